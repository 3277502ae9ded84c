//! Commands behind the `mmtlab` binary.
//!
//! Each command writes into one output directory: the resolved config, a
//! manifest with content hashes, its products and a log. Nothing written
//! depends on wall-clock time, so rerunning a command reproduces its files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mmtlab::checkpoint::{Checkpoint, Stage};
use mmtlab::config::{RunConfig, PRESETS};
use mmtlab::experiment::RunContext;
use mmtlab::mae::transfer_encoder;
use mmtlab::manifest::{content_hash, file_hash, Manifest};
use mmtlab::missing::SubstitutionMethod;
use mmtlab::protocol::MetricsTable;
use mmtlab::synthdata::{generate, sidecar_path};
use serde_json::{json, Value};

pub const SCHEMA: &str = include_str!("../../../schema/run-config.schema.json");

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.mmtd";
pub const PRETRAIN_FILE: &str = "pretrain.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config does not match the schema; offending keys: {}", keys.join(", "))]
    Schema { keys: Vec<String> },
    #[error("no such file: {}", path.display())]
    File { path: PathBuf },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lab(#[from] mmtlab::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lab(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lab(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Schema { .. } => "schema",
            CliError::File { .. } => "file",
            CliError::Usage(_) => "usage",
            CliError::Lab(e) => e.kind(),
        }
    }

    /// The JSON object printed on stderr when a command fails.
    pub fn record(&self) -> Value {
        let mut r = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Schema { keys } => r["keys"] = json!(keys),
            CliError::File { path } => r["path"] = json!(path),
            _ => {}
        }
        r
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::File { path: path.to_path_buf() })
    }
}

/// Dotted paths of keys in `value` that the schema does not declare.
pub fn unknown_keys(value: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(SCHEMA).expect("schema is valid JSON");
    let mut out = vec![];
    walk(value, &schema, "", &mut out);
    out
}

fn walk(value: &Value, schema: &Value, path: &str, out: &mut Vec<String>) {
    let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    match value {
        Value::Object(map) => {
            let Some(props) = schema.get("properties").and_then(Value::as_object) else {
                return;
            };
            for (k, v) in map {
                match props.get(k) {
                    Some(s) => walk(v, s, &join(k), out),
                    None => out.push(join(k)),
                }
            }
        }
        Value::Array(items) => {
            if let Some(s) = schema.get("items") {
                for (i, v) in items.iter().enumerate() {
                    walk(v, s, &format!("{path}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| mmtlab::Error::Config(format!("config is not valid JSON: {e}")))?;
    let keys = unknown_keys(&value);
    if !keys.is_empty() {
        return Err(CliError::Schema { keys });
    }
    Ok(RunConfig::from_json(text)?)
}

/// `source` is a config file, or a preset name when no such file exists.
pub fn load_config(source: &str) -> Result<RunConfig> {
    let path = Path::new(source);
    if !path.exists() && PRESETS.contains(&source) {
        return Ok(RunConfig::preset(source)?);
    }
    require_file(path)?;
    parse_config(&std::fs::read_to_string(path)?)
}

/// Applies `--seed` and `--out` overrides.
pub fn resolve(mut cfg: RunConfig, seed: Option<u64>, out: Option<&Path>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.out = o.to_path_buf();
    }
    cfg
}

/// Writes `contents` under `dir` and records its hash.
fn emit(dir: &Path, manifest: &mut Manifest, rel: &str, contents: &[u8]) -> Result<()> {
    std::fs::write(dir.join(rel), contents)?;
    manifest.files.insert(rel.to_string(), content_hash(contents));
    Ok(())
}

/// The manifest already in `dir`, so that eval can append to a training run.
fn open_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let mut m = if path.is_file() { Manifest::load(&path)? } else { Manifest::default() };
    m.command = command.to_string();
    m.config = serde_json::to_value(cfg)?;
    m.seeds = cfg.seeds.clone();
    Ok(m)
}

/// `<command>.log`, overwritten so that reruns stay idempotent.
fn write_log(dir: &Path, manifest: &mut Manifest, lines: &str) -> Result<()> {
    let name = format!("{}.log", manifest.command.replace(' ', "-"));
    emit(dir, manifest, &name, lines.as_bytes())
}

fn finish(dir: &Path, manifest: &Manifest, cfg: &RunConfig) -> Result<()> {
    let mut manifest = manifest.clone();
    emit(dir, &mut manifest, CONFIG_FILE, cfg.to_json()?.as_bytes())?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

/// Generates the synthetic dataset into `cfg.out`. The resolved config
/// written alongside points at the file, so later commands reuse it.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    let data = generate(&cfg.data, &cfg.tokenizer)?;
    let path = dir.join(DATASET_FILE);
    data.save(&path)?;
    let mut resolved = cfg.clone();
    resolved.dataset = Some(path.clone());
    let mut m = open_manifest(dir, "gen-data", &resolved)?;
    m.record_file(dir, DATASET_FILE)?;
    m.files
        .insert(format!("{DATASET_FILE}.json"), file_hash(&sidecar_path(&path))?);
    let missing = |s: &[mmtlab::synthdata::SyntheticSample]| s.iter().filter(|x| !x.is_complete()).count();
    let log = format!(
        "gen-data: {} train ({} incomplete), {} test ({} incomplete), data seed {}\n",
        data.train.len(),
        missing(&data.train),
        data.test.len(),
        missing(&data.test),
        cfg.data.seed
    );
    write_log(dir, &mut m, &log)?;
    finish(dir, &m, &resolved)?;
    Ok(path)
}

/// MAE pretraining on the modal-complete training samples of the first seed.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    let seed = first_seed(cfg);
    let ctx = RunContext::new(cfg, seed)?;
    let (mae, history) = ctx.pretrain(&cfg.model)?;
    let ckpt = Checkpoint::pretrain(cfg, seed, &mae);
    let path = dir.join(PRETRAIN_FILE);
    ckpt.save(&path)?;
    let mut m = open_manifest(dir, "pretrain", cfg)?;
    m.record_file(dir, PRETRAIN_FILE)?;
    emit(dir, &mut m, "pretrain_log.json", (serde_json::to_string_pretty(&history)? + "\n").as_bytes())?;
    let mut log = String::new();
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(log, "pretrain seed {seed} epoch {e}: reconstruction loss {l:.6}");
    }
    write_log(dir, &mut m, &log)?;
    finish(dir, &m, cfg)?;
    Ok(path)
}

/// Trains the first seed of `cfg`, optionally starting from a pretrained encoder.
pub fn cmd_train(cfg: &RunConfig, pretrained: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    let seed = first_seed(cfg);
    let ctx = RunContext::new(cfg, seed)?;
    let init = match pretrained {
        Some(p) => {
            require_file(p)?;
            let ckpt = Checkpoint::load(p)?;
            if ckpt.header.stage != Stage::Pretrain {
                return Err(mmtlab::Error::Checkpoint(format!("{} is not a pretraining checkpoint", p.display())).into());
            }
            Some(transfer_encoder(&ckpt.to_params()?, &cfg.model, seed)?)
        }
        None => None,
    };
    let (params, train_log) = ctx.fit(&cfg.model, cfg.kind, &cfg.missing, init)?;
    let path = dir.join(MODEL_FILE);
    Checkpoint::finetune(cfg, cfg.kind, seed, &params).save(&path)?;

    let mut m = open_manifest(dir, "train", cfg)?;
    m.schedules.insert(format!("train-missing/seed={seed}"), ctx.schedule.hash());
    m.record_file(dir, MODEL_FILE)?;
    if let Some(p) = pretrained {
        m.files.insert("pretrained".into(), file_hash(p)?);
    }
    emit(dir, &mut m, "train_log.json", (serde_json::to_string_pretty(&train_log)? + "\n").as_bytes())?;
    let mut log = String::new();
    for (e, l) in train_log.epoch_loss.iter().enumerate() {
        let sub = train_log.substituted.get(e).copied().unwrap_or(0);
        let _ = writeln!(log, "train seed {seed} epoch {e}: loss {l:.6}, {sub} samples replaced");
    }
    write_log(dir, &mut m, &log)?;
    finish(dir, &m, cfg)?;
    Ok(path)
}

/// Evaluates a fine-tuned checkpoint over the test-rate grid. `r_test`
/// (fractions) overrides the grid stored with the checkpoint. Writes
/// `metrics.csv` into `out`, by default the checkpoint's directory.
pub fn cmd_eval(
    checkpoint: &Path,
    methods: &[SubstitutionMethod],
    r_test: Option<&[f64]>,
    out: Option<&Path>,
) -> Result<PathBuf> {
    require_file(checkpoint)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = ckpt.header.config.clone();
    if let Some(r) = r_test {
        cfg.r_test = r.to_vec();
    }
    let dir = match out {
        Some(o) => o.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    cfg.out = dir.clone();
    cfg.validate()?;
    if methods.is_empty() {
        return Err(CliError::Usage("at least one method is required".into()));
    }
    std::fs::create_dir_all(&dir)?;
    let seed = ckpt.header.seed;
    let kind = ckpt.header.kind;
    let params = ckpt.to_params()?;
    let ctx = RunContext::new(&cfg, seed)?;
    let mut table = ctx.evaluate_grid(&params, kind, &cfg.missing.test_modalities(), methods, "")?;
    table.sort();

    let mut m = open_manifest(&dir, "eval", &cfg)?;
    m.schedules.insert(format!("test-missing/seed={seed}"), ctx.test_schedule().hash());
    m.files.insert("checkpoint".into(), file_hash(checkpoint)?);
    let path = dir.join(METRICS_FILE);
    emit(&dir, &mut m, METRICS_FILE, table.to_csv().as_bytes())?;
    let names: Vec<&str> = methods.iter().map(|x| x.name()).collect();
    let log = format!(
        "eval seed {seed}: {} records over r_test {:?} with {}\n",
        table.len(),
        cfg.r_test,
        names.join(",")
    );
    write_log(&dir, &mut m, &log)?;
    finish(&dir, &m, &cfg)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    P,
    FusionLayer,
    RTrain,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::FusionLayer => "fusion_layer",
            SweepAxis::RTrain => "r_train",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::P => cfg.missing.p = value,
            SweepAxis::RTrain => cfg.missing.r_train = value,
            SweepAxis::FusionLayer => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(CliError::Usage(format!("fusion_layer must be a whole number, got {value}")));
                }
                cfg.model.fusion_layer = value as usize;
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(SweepAxis::P),
            "fusion_layer" => Ok(SweepAxis::FusionLayer),
            "r_train" => Ok(SweepAxis::RTrain),
            other => Err(CliError::Usage(format!("unknown sweep axis {other:?}; expected p, fusion_layer or r_train"))),
        }
    }
}

/// Parallelism cap from `MMTLAB_THREADS` (default 1).
pub fn thread_cap() -> usize {
    std::env::var("MMTLAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

struct Cell {
    key: String,
    label: String,
    dir: PathBuf,
    config: RunConfig,
}

/// Trains and evaluates every (value, seed) cell. Each cell is a
/// `cmd_train` + `cmd_eval` run in its own `cells/<axis>=<v>/seed=<s>`
/// directory; finished cells are recorded in the sweep manifest and skipped
/// on rerun. The merged `metrics.csv` prefixes methods with `<axis>=<v>:`.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, grid: &[f64], threads: usize) -> Result<PathBuf> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(CliError::Usage("empty sweep grid".into()));
    }
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    let mut cells = vec![];
    for &v in grid {
        let label = format!("{}={v}", axis.name());
        for &seed in &cfg.seeds {
            let key = format!("{label}/seed={seed}");
            let cell_dir = dir.join("cells").join(&label).join(format!("seed={seed}"));
            let mut c = cfg.clone();
            axis.apply(&mut c, v)?;
            c.seeds = vec![seed];
            c.out = cell_dir.clone();
            c.validate()?;
            cells.push(Cell {
                key,
                label: label.clone(),
                dir: cell_dir,
                config: c,
            });
        }
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.is_file() { Manifest::load(&manifest_path)? } else { Manifest::default() };
    manifest.command = format!("sweep {}", axis.name());
    manifest.config = serde_json::to_value(cfg)?;
    manifest.seeds = cfg.seeds.clone();
    manifest.save(&manifest_path)?;

    let done = |c: &Cell, m: &Manifest| -> bool {
        let metrics = c.dir.join(METRICS_FILE);
        match (m.completed.get(&c.key), file_hash(&metrics)) {
            (Some(h), Ok(actual)) => *h == actual,
            _ => false,
        }
    };
    let todo: Vec<&Cell> = cells.iter().filter(|c| !done(c, &manifest)).collect();
    log::info!("sweep {}: {} cells, {} to run", axis.name(), cells.len(), todo.len());

    let manifest = Mutex::new(manifest);
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let workers = threads.clamp(1, todo.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= todo.len() || failure.lock().expect("poisoned").is_some() {
                    break;
                }
                let cell = todo[i];
                let run = || -> Result<String> {
                    let ckpt = cmd_train(&cell.config, None)?;
                    let metrics = cmd_eval(&ckpt, &SubstitutionMethod::ALL, None, Some(&cell.dir))?;
                    Ok(file_hash(&metrics)?)
                };
                match run() {
                    Ok(hash) => {
                        let mut m = manifest.lock().expect("poisoned");
                        m.completed.insert(cell.key.clone(), hash);
                        if let Err(e) = m.save(&manifest_path) {
                            *failure.lock().expect("poisoned") = Some(e.into());
                        }
                    }
                    Err(e) => {
                        failure.lock().expect("poisoned").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }

    let mut manifest = manifest.into_inner().expect("poisoned");
    let mut merged = MetricsTable::default();
    let mut sorted: Vec<&Cell> = cells.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    for c in sorted {
        let table = MetricsTable::read(&c.dir.join(METRICS_FILE))?;
        for mut r in table.records {
            r.method = format!("{}:{}", c.label, r.method);
            merged.push(r);
        }
        let cell_manifest = Manifest::load(&c.dir.join(MANIFEST_FILE))?;
        for (k, v) in cell_manifest.schedules {
            manifest.schedules.insert(k, v);
        }
    }
    merged.sort();
    let path = dir.join(METRICS_FILE);
    emit(dir, &mut manifest, METRICS_FILE, merged.to_csv().as_bytes())?;
    let log = format!(
        "sweep {} over {:?}: {} cells, {} records\n",
        axis.name(),
        grid,
        cells.len(),
        merged.len()
    );
    write_log(dir, &mut manifest, &log)?;
    finish(dir, &manifest, cfg)?;
    Ok(path)
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

/// Seed-averaged accuracy (percent) against `r_test`, one table per head.
pub fn report_text(table: &MetricsTable) -> String {
    let curves = table.mean_over_seeds();
    let mut by_head: BTreeMap<&str, Vec<(&str, &Vec<(f64, f64)>)>> = BTreeMap::new();
    for ((method, head), pts) in &curves {
        by_head.entry(head).or_default().push((method, pts));
    }
    let mut s = String::new();
    for (head, rows) in by_head {
        let mut rates: Vec<f64> = rows.iter().flat_map(|(_, p)| p.iter().map(|x| x.0)).collect();
        rates.sort_by(f64::total_cmp);
        rates.dedup();
        let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(s, "head {head}: accuracy (%) by r_test (%)");
        let _ = write!(s, "{:<width$}", "method");
        for r in &rates {
            let _ = write!(s, " {:>7}", r);
        }
        s.push('\n');
        for (method, pts) in rows {
            let _ = write!(s, "{method:<width$}");
            for r in &rates {
                match pts.iter().find(|p| p.0 == *r) {
                    Some(p) => {
                        let _ = write!(s, " {:>7.1}", 100.0 * p.1);
                    }
                    None => {
                        let _ = write!(s, " {:>7}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

/// Line chart of seed-averaged accuracy against `r_test` for one head.
pub fn report_svg(table: &MetricsTable, head: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 180.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |r: f64| left + pw * r / 100.0;
    let y = |a: f64| top + ph * (1.0 - a);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18">head {head}: accuracy vs r_test</text>"#);
    for i in 0..=4 {
        let t = i as f64 * 25.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{top}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"##,
            x(t),
            x(t),
            top + ph,
            x(t),
            top + ph + 16.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{t}</text>"##,
            y(t / 100.0),
            left + pw,
            y(t / 100.0),
            left - 6.0,
            y(t / 100.0) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">r_test (%)</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">accuracy (%)</text>"#,
        top + ph / 2.0
    );
    let curves = table.mean_over_seeds();
    let lines = curves.iter().filter(|((_, hd), _)| hd == head);
    for (i, ((method, _), pts)) in lines.enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|(r, a)| format!("{:.1},{:.1}", x(*r), y(*a))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for (r, a) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(*r), y(*a));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{method}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.txt` and `report_<head>.svg` next to the metrics (or into `out`).
pub fn cmd_report(metrics: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    require_file(metrics)?;
    let table = MetricsTable::read(metrics)?;
    let dir = match out {
        Some(o) => o.to_path_buf(),
        None => metrics.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir)?;
    let mut written = vec![];
    let text = dir.join("report.txt");
    std::fs::write(&text, report_text(&table))?;
    written.push(text);
    let mut heads: Vec<&str> = table.records.iter().map(|r| r.head.as_str()).collect();
    heads.sort();
    heads.dedup();
    for head in heads {
        let p = dir.join(format!("report_{head}.svg"));
        std::fs::write(&p, report_svg(&table, head))?;
        written.push(p);
    }
    Ok(written)
}

/// Writes every preset as `<name>.json` into `dir`.
pub fn cmd_presets(dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    PRESETS
        .iter()
        .map(|name| {
            let p = dir.join(format!("{name}.json"));
            std::fs::write(&p, RunConfig::preset(name)?.to_json()?)?;
            Ok(p)
        })
        .collect()
}

/// `"0,25,50"` in percent to fractions.
pub fn parse_rtest(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad r_test value {t:?}")))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(CliError::Usage(format!("r_test {v} outside 0..100")));
            }
            Ok(v / 100.0)
        })
        .collect()
}
