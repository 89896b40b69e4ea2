//! Training loop, losses and slice evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::LabelMode;
use crate::data::{Label, Sample};
use crate::error::{input_err, Result};
use crate::metrics;
use crate::model::{Model, ParamCensus};
use crate::modality::MissingType;
use crate::optim::{AdamConfig, OptimState};
use crate::prompts::Chain;
use crate::tensor::{sigmoid, softmax_in_place, Graph, Var};

pub const CSV_HEADER: &str = "epoch,slice_case,eta,loss,accuracy,f1_macro,auroc,seconds";

/// Mean-reduced loss of `logits[B×C]`.
pub fn loss(g: &mut Graph, logits: Var, labels: &[&Label], mode: LabelMode) -> Result<Var> {
    let c = g.cols(logits);
    match mode {
        LabelMode::Single => {
            let targets = labels
                .iter()
                .map(|l| match l {
                    Label::Class(k) => Ok(*k),
                    Label::Bits(_) => Err(input_err!("label bits given to a single-label loss")),
                })
                .collect::<Result<Vec<_>>>()?;
            g.cross_entropy(logits, &targets)
        }
        LabelMode::Multi => {
            let mut targets = Vec::with_capacity(labels.len() * c);
            for l in labels {
                match l {
                    Label::Bits(b) if b.len() == c => targets.extend(b.iter().map(|&x| x as u8 as f64)),
                    Label::Bits(b) => return Err(input_err!("{} label bits for {c} outputs", b.len())),
                    Label::Class(_) => return Err(input_err!("class label given to a multi-label loss")),
                }
            }
            g.bce_with_logits(logits, &targets)
        }
    }
}

/// Logits of `batch` on one graph, one correlated chain per missing type.
fn batch_logits(g: &mut Graph, model: &Model, batch: &[&Sample]) -> Result<Var> {
    let mut chains: [Option<Chain>; 3] = [None, None, None];
    let mut rows = Vec::with_capacity(batch.len());
    for s in batch {
        let m = s.route()?;
        let slot = MissingType::ALL.iter().position(|&x| x == m).expect("missing types are exhaustive");
        if chains[slot].is_none() {
            chains[slot] = Some(model.bank.correlated_chain(g, m)?);
        }
        rows.push(model.forward_model(g, s, m, chains[slot].as_ref())?);
    }
    g.concat_rows(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auroc: Option<f64>,
}

fn sample_eval(model: &Model, s: &Sample) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(&model.store);
    let logits = batch_logits(&mut g, model, &[s])?;
    let l = loss(&mut g, logits, &[&s.label], model.cfg.label_mode)?;
    Ok((g.value(l)[0], g.value(logits).to_vec()))
}

/// Loss and metrics over `samples`, fanning out across `threads` workers.
///
/// Per-sample results are reduced in sample order, so the output does not
/// depend on the thread count.
pub fn evaluate(model: &Model, samples: &[Sample], threads: usize) -> Result<SliceMetrics> {
    if samples.is_empty() {
        return Err(input_err!("cannot evaluate an empty slice"));
    }
    let threads = threads.clamp(1, samples.len());
    let chunk = samples.len().div_ceil(threads);
    let per_chunk: Vec<Result<Vec<(f64, Vec<f64>)>>> = if threads == 1 {
        vec![samples.iter().map(|s| sample_eval(model, s)).collect()]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| sample_eval(model, s)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut outs = Vec::with_capacity(samples.len());
    for part in per_chunk {
        outs.extend(part?);
    }
    let loss = outs.iter().map(|(l, _)| l).sum::<f64>() / outs.len() as f64;
    let logits: Vec<Vec<f64>> = outs.into_iter().map(|(_, z)| z).collect();
    match model.cfg.label_mode {
        LabelMode::Single => {
            let labels: Vec<usize> = samples.iter().map(|s| s.class().unwrap_or(usize::MAX)).collect();
            let preds: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
            let n_classes = model.cfg.n_classes;
            let auroc = if n_classes == 2 {
                let scores: Vec<f64> = logits
                    .iter()
                    .map(|z| {
                        let mut p = z.clone();
                        softmax_in_place(&mut p);
                        p[1]
                    })
                    .collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                metrics::auroc(&scores, &pos).ok()
            } else {
                None
            };
            Ok(SliceMetrics {
                loss,
                accuracy: metrics::accuracy(&preds, &labels)?,
                f1_macro: metrics::f1_macro(&preds, &labels, n_classes)?,
                auroc,
            })
        }
        LabelMode::Multi => {
            let labels: Vec<Vec<bool>> = samples
                .iter()
                .map(|s| match &s.label {
                    Label::Bits(b) => Ok(b.clone()),
                    Label::Class(_) => Err(input_err!("class label in a multi-label slice")),
                })
                .collect::<Result<_>>()?;
            let preds: Vec<Vec<bool>> = logits.iter().map(|z| z.iter().map(|&v| sigmoid(v) > 0.5).collect()).collect();
            let exact = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            Ok(SliceMetrics {
                loss,
                accuracy: exact as f64 / samples.len() as f64,
                f1_macro: metrics::f1_macro_multilabel(&preds, &labels)?,
                auroc: None,
            })
        }
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub threads: usize,
    /// Also evaluate the training data each epoch, reported as slice `train`.
    pub eval_train: bool,
    /// Evaluate every `eval_every` epochs; epoch 0 and the last epoch are always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            threads: 1,
            eval_train: false,
            eval_every: 1,
        }
    }
}

/// A named evaluation set, e.g. the test split under one missing case and rate.
#[derive(Clone, Debug)]
pub struct EvalSlice {
    pub case: String,
    pub eta: f64,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub slice_case: String,
    pub eta: f64,
    pub metrics: SliceMetrics,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub census: ParamCensus,
    pub steps: usize,
}

impl MetricsReport {
    /// Rows of the last evaluated epoch.
    pub fn final_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        let last = self.rows.last().map(|r| r.epoch);
        self.rows.iter().filter(move |r| Some(r.epoch) == last)
    }

    pub fn find(&self, epoch: usize, slice_case: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.epoch == epoch && r.slice_case == slice_case)
    }

    /// CSV with the fixed header. With `timing = false` the seconds column is
    /// written as 0 so the text depends only on the configuration.
    pub fn to_csv(&self, config_hash: Option<&str>, timing: bool) -> String {
        let mut out = String::new();
        if let Some(h) = config_hash {
            let _ = writeln!(out, "# config_hash={h}");
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let auroc = m.auroc.map(|a| format!("{a:.6}")).unwrap_or_default();
            let secs = if timing { r.seconds } else { 0.0 };
            let eta = if r.eta.is_finite() { r.eta.to_string() } else { String::new() };
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{},{:.3}",
                r.epoch, r.slice_case, eta, m.loss, m.accuracy, m.f1_macro, auroc, secs
            );
        }
        out
    }
}

/// Trains the prompt bank and head of `model` on `train`; the backbone stays frozen.
///
/// Epoch 0 rows hold the evaluation before any update.
pub fn train_run(model: &mut Model, train: &[Sample], slices: &[EvalSlice], cfg: &TrainConfig) -> Result<MetricsReport> {
    if cfg.batch_size == 0 {
        return Err(input_err!("batch size must be at least 1"));
    }
    if train.is_empty() && cfg.epochs > 0 {
        return Err(input_err!("no training samples"));
    }
    for s in train {
        s.validate()?;
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = OptimState::new(cfg.adam.clone(), total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11_5EED);
    let mut rows = Vec::new();
    let train_slice = cfg.eval_train.then(|| EvalSlice { case: "train".into(), eta: f64::NAN, samples: train.to_vec() });
    let eval_epoch = |model: &Model, epoch: usize, rows: &mut Vec<MetricsRow>| -> Result<()> {
        for sl in train_slice.iter().chain(slices) {
            let t0 = Instant::now();
            let metrics = evaluate(model, &sl.samples, cfg.threads)?;
            rows.push(MetricsRow {
                epoch,
                slice_case: sl.case.clone(),
                eta: sl.eta,
                metrics,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    };
    eval_epoch(model, 0, &mut rows)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let grads = {
                let mut g = Graph::new(&model.store);
                let logits = batch_logits(&mut g, model, &batch)?;
                let labels: Vec<&Label> = batch.iter().map(|s| &s.label).collect();
                let l = loss(&mut g, logits, &labels, model.cfg.label_mode)?;
                g.backward(l)?
            };
            model.store.zero_grads();
            model.store.accumulate(&grads);
            opt.adam_step(&mut model.store)?;
        }
        if epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs {
            eval_epoch(model, epoch, &mut rows)?;
        }
    }
    Ok(MetricsReport { rows, census: model.census(), steps: opt.step })
}
