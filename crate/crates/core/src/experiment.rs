//! Configuration-driven experiment harness: runs variant × seed × rate grids,
//! writes per-cell and summary CSVs, and aggregates summaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::config::{
    DynamicOp, EncoderConfig, Generator, LabelMode, ModalMode, ModelConfig, PromptConfig, Variant,
};
use crate::data::{apply_missing, split, MissingSpec, Sample, SynthConfig, SyntheticTask};
use crate::error::{input_err, Error, Result};
use crate::modality::{MissingCase, MissingType};
use crate::model::{Model, ParamCensus};
use crate::optim::AdamConfig;
use crate::train::{train_run, EvalSlice, MetricsReport, TrainConfig};

pub const SUMMARY_HEADER: &str =
    "variant,seed,train_case,eta,slice_case,epoch,loss,accuracy,f1_macro,auroc,trainable,total";
pub const CURVE_HEADER: &str = "variant,seed,train_case,rate,slice_case,accuracy,f1_macro,auroc";
pub const COMPARE_HEADER: &str = "train_case,eta,slice_case,variant,n_seeds,accuracy_mean,accuracy_sd,\
f1_macro_mean,f1_macro_sd,auroc_mean,auroc_sd,rank,best_variant";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub n_classes: usize,
    pub noise: f64,
    /// Keys the class codebook; sample draws also mix in the run seed.
    pub seed: u64,
    pub split: [f64; 3],
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 2000, n_classes: 4, noise: 0.2, seed: 0, split: [0.7, 0.1, 0.2], synth: SynthConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    /// Input-level prompt rows shared by the prompted variants.
    pub prompt_total: usize,
    /// Layout used by `dcp`; `baseline` and `mmp_independent` derive theirs.
    pub dcp: PromptConfig,
    pub train_case: MissingCase,
    pub etas: Vec<f64>,
    /// Missing cases applied to the test split; the training case by default.
    pub eval_cases: Vec<MissingCase>,
    pub data: DataConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub eval_train: bool,
    pub threads: usize,
    pub output: PathBuf,
    /// Write wall-clock seconds into per-cell CSVs.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0],
            encoder: EncoderConfig::default(),
            prompt_total: 36,
            dcp: PromptConfig::for_variant(Variant::Dcp, 36),
            train_case: MissingCase::Both,
            etas: vec![0.7],
            eval_cases: vec![MissingCase::Both],
            data: DataConfig::default(),
            epochs: 15,
            batch_size: 4,
            adam: AdamConfig::default(),
            eval_every: 1,
            eval_train: false,
            threads: 1,
            output: PathBuf::from("results"),
            timing: true,
        }
    }
}

/// Checks the structural contract of each variant.
pub fn check_variant(variant: Variant, p: &PromptConfig) -> Result<()> {
    match variant {
        Variant::Baseline if p.total() != 0 => {
            Err(Error::Config(format!("baseline requires all prompt lengths 0, got {}", p.total())))
        }
        Variant::MmpIndependent if p.generator != Generator::None => {
            Err(Error::Config(format!("mmp_independent requires generator none, got {}", p.generator)))
        }
        Variant::MmpIndependent if p.len_dynamic + p.len_common != 0 => {
            Err(Error::Config("mmp_independent uses correlated rows only".into()))
        }
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn prompt_config(&self, variant: Variant) -> PromptConfig {
        match variant {
            Variant::Dcp => self.dcp.clone(),
            v => PromptConfig::for_variant(v, self.dcp.total()),
        }
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let s = &self.data.synth;
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: s.vocab_size,
                max_text_len: s.text_len,
                patch_dim: s.patch_dim,
                max_patches: s.n_patches,
                ..self.encoder.clone()
            },
            prompts: self.prompt_config(variant),
            n_classes: self.data.n_classes,
            label_mode: if s.multi_label { LabelMode::Multi } else { LabelMode::Single },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.variants.is_empty() {
            return bad("variants list is empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds list is empty");
        }
        if self.etas.is_empty() {
            return bad("etas list is empty");
        }
        if self.eval_cases.is_empty() {
            return bad("eval_cases list is empty");
        }
        for &eta in &self.etas {
            MissingSpec::new(self.train_case, eta)?;
        }
        if !(0.0..0.5).contains(&self.data.noise) {
            return bad("data noise must lie in [0, 0.5)");
        }
        if self.batch_size == 0 {
            return bad("batch must be at least 1");
        }
        self.data.synth.validate()?;
        for &v in &self.variants {
            let m = self.model_config(v);
            check_variant(v, &m.prompts)?;
            m.validate()?;
        }
        Ok(())
    }

    /// Every setting that influences results, one `key=value` per line.
    /// Output location, thread count and timing are excluded.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let list = |v: Vec<String>| v.join(",");
        let p = &self.dcp;
        let d = &self.data;
        let e = &self.encoder;
        let _ = writeln!(s, "variants={}", list(self.variants.iter().map(|v| v.to_string()).collect()));
        let _ = writeln!(s, "seeds={}", list(self.seeds.iter().map(|v| v.to_string()).collect()));
        let _ = writeln!(
            s,
            "model={} {} {} {} {}",
            e.d_model, e.n_layers, e.n_heads, e.ff_hidden, e.prompt_depth
        );
        let _ = writeln!(
            s,
            "prompts={} {} {} {} {} {} {} {}",
            p.len_correlated, p.len_dynamic, p.len_common, p.generator, p.modal_mode, p.dynamic_op, p.dynamic_r, p.common_r
        );
        let _ = writeln!(s, "train_case={}", self.train_case);
        let _ = writeln!(s, "etas={}", list(self.etas.iter().map(|v| format!("{v:?}")).collect()));
        let _ = writeln!(s, "eval_cases={}", list(self.eval_cases.iter().map(|v| v.to_string()).collect()));
        let _ = writeln!(s, "data={} {} {:?} {} {:?} {:?}", d.n, d.n_classes, d.noise, d.seed, d.split, d.synth);
        let _ = writeln!(
            s,
            "train={} {} {:?} {:?} {:?} {:?} {:?} {} {}",
            self.epochs,
            self.batch_size,
            self.adam.lr_max,
            self.adam.weight_decay,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.eval_every,
            self.eval_train
        );
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// parsing

const SECTIONS: [&str; 6] = ["experiment", "model", "prompts", "missing", "data", "train"];

fn parse_list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn named<T: std::str::FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| match e {
        Error::Config(m) => m,
        other => other.to_string(),
    })
}

/// Parses the flat `key = value` format with `[section]` headers.
///
/// `#` starts a comment. Unknown sections and keys, duplicates and bad
/// values are errors carrying the 1-based line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<&str> = None;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut total: Option<usize> = None;
    let mut lengths: [Option<usize>; 3] = [None; 3];
    let mut generator: Option<String> = None;
    let mut generator_r: Option<usize> = None;
    let mut eval_cases: Option<Vec<MissingCase>> = None;
    let mut generator_line = 0;
    for (ix, raw) in text.lines().enumerate() {
        let line_no = ix + 1;
        let err = |msg: String| Error::ConfigLine { line: line_no, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| err(format!("malformed section header `{line}`")))?.trim();
            let known = SECTIONS.iter().find(|s| **s == name).ok_or_else(|| err(format!("unknown section [{name}]")))?;
            section = Some(known);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, v) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| err(format!("key `{key}` appears before any [section]")))?;
        let full = format!("{sec}.{key}");
        if let Some(prev) = seen.insert(full.clone(), line_no) {
            return Err(err(format!("duplicate key `{key}` (first set on line {prev})")));
        }
        let res: std::result::Result<(), String> = (|| {
            match full.as_str() {
                "experiment.variants" => cfg.variants = parse_list(v, named)?,
                "experiment.seeds" => cfg.seeds = parse_list(v, num)?,
                "experiment.output" => cfg.output = PathBuf::from(v),
                "experiment.threads" => cfg.threads = num(v)?,
                "experiment.timing" => cfg.timing = boolean(v)?,
                "model.d_model" => cfg.encoder.d_model = num(v)?,
                "model.n_layers" => cfg.encoder.n_layers = num(v)?,
                "model.n_heads" => cfg.encoder.n_heads = num(v)?,
                "model.ff_hidden" => cfg.encoder.ff_hidden = num(v)?,
                "model.prompt_depth" => cfg.encoder.prompt_depth = num(v)?,
                "prompts.total" => total = Some(num(v)?),
                "prompts.len_correlated" => lengths[0] = Some(num(v)?),
                "prompts.len_dynamic" => lengths[1] = Some(num(v)?),
                "prompts.len_common" => lengths[2] = Some(num(v)?),
                "prompts.generator" => {
                    generator = Some(v.to_string());
                    generator_line = line_no;
                }
                "prompts.generator_r" => generator_r = Some(num(v)?),
                "prompts.modal_mode" => cfg.dcp.modal_mode = named::<ModalMode>(v)?,
                "prompts.dynamic_op" => cfg.dcp.dynamic_op = named::<DynamicOp>(v)?,
                "prompts.dynamic_r" => cfg.dcp.dynamic_r = num(v)?,
                "prompts.common_r" => cfg.dcp.common_r = num(v)?,
                "missing.case" => cfg.train_case = named(v)?,
                "missing.etas" => cfg.etas = parse_list(v, num)?,
                "missing.eval_cases" => eval_cases = Some(parse_list(v, named)?),
                "data.n" => cfg.data.n = num(v)?,
                "data.n_classes" => cfg.data.n_classes = num(v)?,
                "data.noise" => cfg.data.noise = num(v)?,
                "data.seed" => cfg.data.seed = num(v)?,
                "data.split" => {
                    let parts: Vec<f64> = parse_list(v, num)?;
                    cfg.data.split = parts.try_into().map_err(|_| "split needs three fractions".to_string())?;
                }
                "data.vocab_size" => cfg.data.synth.vocab_size = num(v)?,
                "data.text_len" => cfg.data.synth.text_len = num(v)?,
                "data.informative_tokens" => cfg.data.synth.informative_tokens = num(v)?,
                "data.n_patches" => cfg.data.synth.n_patches = num(v)?,
                "data.patch_dim" => cfg.data.synth.patch_dim = num(v)?,
                "data.jitter_per_noise" => cfg.data.synth.jitter_per_noise = num(v)?,
                "data.multi_label" => cfg.data.synth.multi_label = boolean(v)?,
                "train.epochs" => cfg.epochs = num(v)?,
                "train.batch" => cfg.batch_size = num(v)?,
                "train.lr_max" => cfg.adam.lr_max = num(v)?,
                "train.weight_decay" => cfg.adam.weight_decay = num(v)?,
                "train.eval_every" => cfg.eval_every = num(v)?,
                "train.eval_train" => cfg.eval_train = boolean(v)?,
                _ => return Err(format!("unknown key `{key}` in [{sec}]")),
            }
            Ok(())
        })();
        res.map_err(err)?;
    }

    let total = total.unwrap_or(cfg.prompt_total);
    let mut layout = PromptConfig::for_variant(Variant::Dcp, total);
    if lengths.iter().any(Option::is_some) {
        let [r, d, c] = lengths;
        layout.len_correlated = r.unwrap_or(0);
        layout.len_dynamic = d.unwrap_or(0);
        layout.len_common = c.unwrap_or(0);
        if seen.contains_key("prompts.total") && layout.total() != total {
            let line = seen["prompts.total"];
            return Err(Error::ConfigLine {
                line,
                msg: format!("prompt lengths sum to {} but total is {total}", layout.total()),
            });
        }
    }
    let r = generator_r.unwrap_or(16);
    layout.generator = match generator.as_deref() {
        None | Some("mlp") => Generator::Mlp { r },
        Some("none") => Generator::None,
        Some("fc") => Generator::Fc,
        Some(other) => {
            return Err(Error::ConfigLine { line: generator_line, msg: format!("unknown generator `{other}`") })
        }
    };
    layout.modal_mode = cfg.dcp.modal_mode;
    layout.dynamic_op = cfg.dcp.dynamic_op;
    layout.dynamic_r = cfg.dcp.dynamic_r;
    layout.common_r = cfg.dcp.common_r;
    cfg.prompt_total = layout.total();
    cfg.dcp = layout;
    cfg.eval_cases = eval_cases.unwrap_or_else(|| vec![cfg.train_case]);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// running

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellKey {
    pub variant: Variant,
    pub seed: u64,
    pub eta: f64,
}

impl CellKey {
    pub fn file_stem(&self) -> String {
        format!("{}_seed{}_eta{:.2}", self.variant, self.seed, self.eta)
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub key: CellKey,
    pub report: MetricsReport,
}

/// Complete splits for run seed `seed`, before any modality is removed.
fn complete_splits(cfg: &ExperimentConfig, seed: u64) -> Result<crate::data::Splits> {
    let d = &cfg.data;
    let task = SyntheticTask::new(d.synth.clone(), d.n_classes, d.seed)?;
    let samples = task.generate(d.n, d.noise, d.seed.wrapping_add(seed.wrapping_mul(0x9E37_79B9)))?;
    split(&samples, d.split, seed)
}

fn slices_for(cfg: &ExperimentConfig, val: &[Sample], test: &[Sample], eta: f64, seed: u64) -> Result<Vec<EvalSlice>> {
    let mut out = Vec::new();
    if !val.is_empty() {
        let spec = MissingSpec::new(cfg.train_case, eta)?;
        out.push(EvalSlice {
            case: format!("val/{}", cfg.train_case),
            eta,
            samples: apply_missing(val, spec, seed.wrapping_add(2)),
        });
    }
    if !test.is_empty() {
        for &case in &cfg.eval_cases {
            out.push(EvalSlice {
                case: format!("test/{case}"),
                eta,
                samples: apply_missing(test, MissingSpec::new(case, eta)?, seed.wrapping_add(3)),
            });
        }
    }
    Ok(out)
}

/// Trains and evaluates one grid cell.
pub fn run_cell(cfg: &ExperimentConfig, key: CellKey, eval_threads: usize) -> Result<CellResult> {
    let splits = complete_splits(cfg, key.seed)?;
    let train = apply_missing(&splits.train, MissingSpec::new(cfg.train_case, key.eta)?, key.seed.wrapping_add(1));
    let slices = slices_for(cfg, &splits.val, &splits.test, key.eta, key.seed)?;
    let mut model = Model::new(cfg.model_config(key.variant), key.seed)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam.clone(),
        seed: key.seed,
        threads: eval_threads,
        eval_train: cfg.eval_train,
        eval_every: cfg.eval_every,
    };
    let report = train_run(&mut model, &train, &slices, &tc)?;
    Ok(CellResult { key, report })
}

pub fn cells(cfg: &ExperimentConfig, etas: &[f64]) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            for &eta in etas {
                out.push(CellKey { variant, seed, eta });
            }
        }
    }
    out
}

/// Runs `keys` on up to `cfg.threads` workers; results come back in key order.
pub fn run_cells(cfg: &ExperimentConfig, keys: &[CellKey]) -> Result<Vec<CellResult>> {
    let threads = cfg.threads.max(1);
    let workers = threads.min(keys.len().max(1));
    let eval_threads = (threads / workers).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..keys.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= keys.len() {
                    break;
                }
                let r = run_cell(cfg, keys[i], eval_threads);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every cell runs"))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.6}")).unwrap_or_default()
}

/// Final-epoch rows of every cell, one line per evaluated slice.
pub fn summary_csv(hash: &str, results: &[CellResult], train_case: MissingCase) -> String {
    let mut s = format!("# config_hash={hash}\n{SUMMARY_HEADER}\n");
    for c in results {
        for r in c.report.final_rows() {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{:.2},{},{},{:.6},{:.6},{:.6},{},{},{}",
                c.key.variant,
                c.key.seed,
                train_case,
                c.key.eta,
                r.slice_case,
                r.epoch,
                m.loss,
                m.accuracy,
                m.f1_macro,
                fmt_opt(m.auroc),
                c.report.census.trainable,
                c.report.census.total
            );
        }
    }
    s
}

/// Rate curve over the test slices of every cell.
pub fn curve_csv(hash: &str, results: &[CellResult], train_case: MissingCase) -> String {
    let mut s = format!("# config_hash={hash}\n{CURVE_HEADER}\n");
    for c in results {
        for r in c.report.final_rows().filter(|r| r.slice_case.starts_with("test/")) {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{:.2},{},{:.6},{:.6},{}",
                c.key.variant,
                c.key.seed,
                train_case,
                c.key.eta,
                r.slice_case.trim_start_matches("test/"),
                m.accuracy,
                m.f1_macro,
                fmt_opt(m.auroc)
            );
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub hash: String,
    pub results: Vec<CellResult>,
    pub census: Vec<(Variant, ParamCensus)>,
    pub cell_files: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub summary: String,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn census_of(cfg: &ExperimentConfig) -> Result<Vec<(Variant, ParamCensus)>> {
    cfg.variants.iter().map(|&v| Ok((v, Model::new(cfg.model_config(v), 0)?.census()))).collect()
}

fn execute(cfg: &ExperimentConfig, etas: &[f64]) -> Result<RunOutput> {
    cfg.validate()?;
    let cells_dir = cfg.output.join("cells");
    std::fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let hash = cfg.hash();
    let census = census_of(cfg)?;
    let results = run_cells(cfg, &cells(cfg, etas))?;
    let mut cell_files = Vec::new();
    for c in &results {
        let path = cells_dir.join(format!("{}.csv", c.key.file_stem()));
        write(&path, &c.report.to_csv(Some(&hash), cfg.timing))?;
        cell_files.push(path);
    }
    let summary = summary_csv(&hash, &results, cfg.train_case);
    let summary_path = cfg.output.join("summary.csv");
    write(&summary_path, &summary)?;
    Ok(RunOutput { hash, results, census, cell_files, summary_path, summary })
}

/// Runs every variant × seed × eta cell of `cfg`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    execute(cfg, &cfg.etas)
}

/// Missing rates `0.0, 0.1, …, 1.0`.
pub fn default_rates() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub run: RunOutput,
    pub curve_path: PathBuf,
    pub curve: String,
}

/// Trains one model per rate and writes `curve.csv` next to the summary.
pub fn sweep(cfg: &ExperimentConfig, rates: &[f64]) -> Result<SweepOutput> {
    if rates.is_empty() {
        return Err(Error::Config("sweep needs at least one rate".into()));
    }
    let mut cfg = cfg.clone();
    cfg.etas = rates.to_vec();
    let run = execute(&cfg, rates)?;
    let curve = curve_csv(&run.hash, &run.results, cfg.train_case);
    let curve_path = cfg.output.join("curve.csv");
    write(&curve_path, &curve)?;
    Ok(SweepOutput { run, curve_path, curve })
}

// ---------------------------------------------------------------------------
// comparison

#[derive(Clone, Debug)]
pub struct CompareOutput {
    pub table: String,
    /// One diagnostic per rejected input row.
    pub rejected: Vec<String>,
}

#[derive(Default)]
struct Agg {
    acc: Vec<f64>,
    f1: Vec<f64>,
    auroc: Vec<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

fn finite_metric(field: &str, name: &str) -> std::result::Result<f64, String> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(format!("non-finite {name} `{field}`")),
        Err(_) => Err(format!("unparsable {name} `{field}`")),
    }
}

/// Joins summary CSVs on `(train_case, eta, slice_case)` and reports mean ± sd
/// over seeds per variant with a rank column (1 = highest mean accuracy).
///
/// `inputs` pairs a display name with file contents.
pub fn compare(inputs: &[(String, String)]) -> Result<CompareOutput> {
    if inputs.is_empty() {
        return Err(input_err!("compare needs at least one summary"));
    }
    let mut groups: BTreeMap<(String, String, String), BTreeMap<String, Agg>> = BTreeMap::new();
    let mut rejected = Vec::new();
    let cols: Vec<&str> = SUMMARY_HEADER.split(',').collect();
    let col = |name: &str| cols.iter().position(|c| *c == name).expect("known column");
    for (name, text) in inputs {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        if header != SUMMARY_HEADER {
            return Err(input_err!("{name}: header `{header}` does not match `{SUMMARY_HEADER}`"));
        }
        for (ix, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            let parsed = (|| -> std::result::Result<_, String> {
                if f.len() != cols.len() {
                    return Err(format!("expected {} fields, got {}", cols.len(), f.len()));
                }
                let acc = finite_metric(f[col("accuracy")], "accuracy")?;
                let f1 = finite_metric(f[col("f1_macro")], "f1_macro")?;
                finite_metric(f[col("loss")], "loss")?;
                let au = f[col("auroc")];
                let auroc = if au.is_empty() { None } else { Some(finite_metric(au, "auroc")?) };
                Ok((acc, f1, auroc))
            })();
            match parsed {
                Ok((acc, f1, auroc)) => {
                    let key = (f[col("train_case")].into(), f[col("eta")].into(), f[col("slice_case")].into());
                    let agg = groups.entry(key).or_default().entry(f[col("variant")].into()).or_default();
                    agg.acc.push(acc);
                    agg.f1.push(f1);
                    agg.auroc.extend(auroc);
                }
                Err(msg) => rejected.push(format!("{name}:{}: row rejected: {msg}", ix + 1)),
            }
        }
    }
    let mut table = format!("{COMPARE_HEADER}\n");
    for ((case, eta, slice), variants) in &groups {
        let mut rows: Vec<(&String, f64, &Agg)> = variants.iter().map(|(v, a)| (v, mean_sd(&a.acc).0, a)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let best = rows[0].0.clone();
        for (rank, (variant, _, agg)) in rows.iter().enumerate() {
            let (am, asd) = mean_sd(&agg.acc);
            let (fm, fsd) = mean_sd(&agg.f1);
            let (aum, ausd) = if agg.auroc.is_empty() {
                (String::new(), String::new())
            } else {
                let (m, s) = mean_sd(&agg.auroc);
                (format!("{m:.6}"), format!("{s:.6}"))
            };
            let _ = writeln!(
                table,
                "{case},{eta},{slice},{variant},{},{am:.6},{asd:.6},{fm:.6},{fsd:.6},{aum},{ausd},{},{best}",
                agg.acc.len(),
                rank + 1
            );
        }
    }
    Ok(CompareOutput { table, rejected })
}

pub fn compare_files(paths: &[PathBuf]) -> Result<CompareOutput> {
    let inputs = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)))
        .collect::<Result<Vec<_>>>()?;
    compare(&inputs)
}

// ---------------------------------------------------------------------------
// self-test

/// One ablation row reachable from the config format.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub axis: &'static str,
    pub label: String,
    pub encoder: EncoderConfig,
    pub prompts: PromptConfig,
}

/// Every ablation axis value, varied one at a time around the DCP layout of `cfg`.
pub fn ablation_grid(cfg: &ExperimentConfig) -> Vec<Ablation> {
    let base = cfg.dcp.clone();
    let enc = cfg.model_config(Variant::Dcp).encoder;
    let mut out = Vec::new();
    let mut push = |axis, label: String, encoder: EncoderConfig, prompts: PromptConfig| {
        out.push(Ablation { axis, label, encoder, prompts })
    };
    for generator in [Generator::None, Generator::Fc, Generator::Mlp { r: 4 }, Generator::Mlp { r: 8 }, Generator::Mlp { r: 16 }] {
        push("generator", generator.to_string(), enc.clone(), PromptConfig { generator, ..base.clone() });
    }
    for modal_mode in [ModalMode::Uni, ModalMode::Bi] {
        push("modal_mode", modal_mode.to_string(), enc.clone(), PromptConfig { modal_mode, ..base.clone() });
    }
    for j in 1..=enc.n_layers {
        push("prompt_depth", j.to_string(), EncoderConfig { prompt_depth: j, ..enc.clone() }, base.clone());
    }
    for dynamic_op in [DynamicOp::Attention, DynamicOp::MaxPool, DynamicOp::MinPool, DynamicOp::AvgPool] {
        push("dynamic_op", dynamic_op.to_string(), enc.clone(), PromptConfig { dynamic_op, ..base.clone() });
    }
    for total in [12, 24, 36, 48, 60] {
        let layout = PromptConfig::for_variant(Variant::Dcp, total);
        push(
            "prompt_length",
            total.to_string(),
            enc.clone(),
            PromptConfig { len_correlated: layout.len_correlated, len_dynamic: layout.len_dynamic, len_common: layout.len_common, ..base.clone() },
        );
    }
    out
}

/// Instantiates every ablation config, runs one forward per missing type
/// and checks the variant contracts. Returns one report line per check.
pub fn selftest(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let task = SyntheticTask::new(cfg.data.synth.clone(), cfg.data.n_classes, cfg.data.seed)?;
    let complete = task.generate(3, cfg.data.noise, cfg.data.seed)?;
    let probes: Vec<Sample> = MissingType::ALL
        .iter()
        .zip(&complete)
        .map(|(&m, s)| {
            let mut s = s.clone();
            if !m.has(crate::modality::Stream::Text) {
                s.text = None;
            }
            if !m.has(crate::modality::Stream::Image) {
                s.image = None;
            }
            s.missing = m;
            s
        })
        .collect();
    let mut lines = Vec::new();
    for ab in ablation_grid(cfg) {
        let mc = ModelConfig { encoder: ab.encoder.clone(), prompts: ab.prompts.clone(), ..cfg.model_config(Variant::Dcp) };
        let model = Model::new(mc, 0)?;
        for s in &probes {
            let z = model.logits(s)?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("{}={}: non-finite logits", ab.axis, ab.label)));
            }
        }
        let c = model.census();
        lines.push(format!(
            "ok {}={} trainable={} total={} generator_tensors={}",
            ab.axis,
            ab.label,
            c.trainable,
            c.total,
            model.bank.generator_params().len()
        ));
    }
    let head_only = Model::new(cfg.model_config(Variant::Baseline), 0)?;
    let head: usize = head_only.backbone.head.params().iter().map(|&id| head_only.store.get(id).numel()).sum();
    if head_only.census().trainable != head {
        return Err(Error::Contract("baseline trains more than the head".into()));
    }
    lines.push(format!("ok baseline trainable={} equals head", head));
    let mmp = Model::new(cfg.model_config(Variant::MmpIndependent), 0)?;
    let dcp = Model::new(cfg.model_config(Variant::Dcp), 0)?;
    let (gm, gd) = (mmp.bank.generator_params().len(), dcp.bank.generator_params().len());
    if gm != 0 || gd == 0 {
        return Err(Error::Contract(format!("generator tensors: mmp {gm}, dcp {gd}")));
    }
    lines.push(format!("ok mmp_independent generator_tensors=0 dcp generator_tensors={gd}"));
    Ok(lines)
}
