//! Synthetic two-modality classification data and the missing-rate protocol.
//!
//! Labels are carried by both streams through two independent keyed codebooks:
//! text tokens copy a per-class codeword with per-token corruption, image
//! patches copy per-class prototypes with Gaussian jitter. The jitter scales
//! with the same `noise` knob so `noise = 0` is noiseless in both streams.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::modality::{MissingCase, MissingType, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMatrix {
    pub n_patches: usize,
    pub patch_dim: usize,
    pub data: Vec<f64>,
}

impl PatchMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_dim..(i + 1) * self.patch_dim]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Bits(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: Label,
    pub missing: MissingType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PatchMatrix>,
}

impl Sample {
    pub fn has(&self, stream: Stream) -> bool {
        match stream {
            Stream::Text => self.text.is_some(),
            Stream::Image => self.image.is_some(),
        }
    }

    /// Routes the sample by which payloads it carries.
    pub fn route(&self) -> Result<MissingType> {
        MissingType::route(self.text.is_some(), self.image.is_some())
    }

    /// Checks that the missing flag agrees with the payloads.
    pub fn validate(&self) -> Result<()> {
        let routed = self.route()?;
        if routed != self.missing {
            return Err(input_err!("sample flagged {} but carries payloads of {}", self.missing, routed));
        }
        Ok(())
    }

    pub fn class(&self) -> Option<usize> {
        match &self.label {
            Label::Class(c) => Some(*c),
            Label::Bits(_) => None,
        }
    }

    /// Removes the payload of `stream`, updating the flag.
    fn drop_stream(&mut self, stream: Stream) {
        match stream {
            Stream::Text => self.text = None,
            Stream::Image => self.image = None,
        }
        self.missing = MissingType::route(self.text.is_some(), self.image.is_some())
            .expect("only one stream is ever dropped");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub text_len: usize,
    /// Positions whose codeword token differs across classes; the rest share one token.
    pub informative_tokens: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub proto_scale: f64,
    /// Image jitter standard deviation per unit of `noise`.
    pub jitter_per_noise: f64,
    pub multi_label: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            text_len: 8,
            informative_tokens: 3,
            n_patches: 6,
            patch_dim: 8,
            proto_scale: 1.0,
            jitter_per_noise: 10.0,
            multi_label: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.text_len == 0 || self.n_patches == 0 || self.patch_dim == 0 {
            return Err(Error::Config("synthetic stream sizes must be positive".into()));
        }
        if self.informative_tokens == 0 || self.informative_tokens > self.text_len {
            return Err(Error::Config(format!(
                "informative_tokens must lie in 1..={}",
                self.text_len
            )));
        }
        if !(self.jitter_per_noise >= 0.0 && self.proto_scale > 0.0) {
            return Err(Error::Config("jitter and prototype scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Keyed codebooks for both streams.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub cfg: SynthConfig,
    pub n_classes: usize,
    /// `codewords[c][p]`, the clean token of class `c` at position `p`.
    pub codewords: Vec<Vec<usize>>,
    /// `prototypes[c]`, flattened `n_patches × patch_dim`.
    pub prototypes: Vec<Vec<f64>>,
}

fn check_noise(noise: f64) -> Result<()> {
    if !(0.0..0.5).contains(&noise) {
        return Err(Error::Config(format!("noise {noise} must lie in [0, 0.5)")));
    }
    Ok(())
}

impl SyntheticTask {
    pub fn new(cfg: SynthConfig, n_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_B00C);
        let mut positions: Vec<usize> = (0..cfg.text_len).collect();
        positions.shuffle(&mut rng);
        let informative = &positions[..cfg.informative_tokens];
        let shared: Vec<usize> = (0..cfg.text_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let mut codewords: Vec<Vec<usize>> = Vec::with_capacity(n_classes);
        while codewords.len() < n_classes {
            let mut w = shared.clone();
            for &p in informative {
                w[p] = rng.gen_range(0..cfg.vocab_size);
            }
            if !codewords.contains(&w) {
                codewords.push(w);
            }
        }
        let proto = Normal::new(0.0, cfg.proto_scale).expect("positive scale");
        let prototypes = (0..n_classes)
            .map(|_| (0..cfg.n_patches * cfg.patch_dim).map(|_| proto.sample(&mut rng)).collect())
            .collect();
        Ok(Self { cfg, n_classes, codewords, prototypes })
    }

    fn text_for(&self, rng: &mut impl Rng, classes: &[usize], noise: f64) -> Vec<usize> {
        (0..self.cfg.text_len)
            .map(|p| {
                let c = classes[rng.gen_range(0..classes.len())];
                if rng.gen::<f64>() < noise {
                    rng.gen_range(0..self.cfg.vocab_size)
                } else {
                    self.codewords[c][p]
                }
            })
            .collect()
    }

    fn image_for(&self, rng: &mut impl Rng, classes: &[usize], noise: f64) -> PatchMatrix {
        let sigma = noise * self.cfg.jitter_per_noise;
        let jitter = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        let d = self.cfg.patch_dim;
        let mut data = Vec::with_capacity(self.cfg.n_patches * d);
        for p in 0..self.cfg.n_patches {
            let c = classes[rng.gen_range(0..classes.len())];
            for j in 0..d {
                let e = if sigma > 0.0 { jitter.sample(rng) } else { 0.0 };
                data.push(self.prototypes[c][p * d + j] + e);
            }
        }
        PatchMatrix { n_patches: self.cfg.n_patches, patch_dim: d, data }
    }

    pub fn sample(&self, rng: &mut impl Rng, noise: f64) -> Sample {
        let (label, active) = if self.cfg.multi_label {
            loop {
                let bits: Vec<bool> = (0..self.n_classes).map(|_| rng.gen::<bool>()).collect();
                let active: Vec<usize> = (0..self.n_classes).filter(|&c| bits[c]).collect();
                if !active.is_empty() {
                    break (Label::Bits(bits), active);
                }
            }
        } else {
            let c = rng.gen_range(0..self.n_classes);
            (Label::Class(c), vec![c])
        };
        let text = self.text_for(rng, &active, noise);
        let image = self.image_for(rng, &active, noise);
        Sample { label, missing: MissingType::Complete, text: Some(text), image: Some(image) }
    }

    pub fn generate(&self, n: usize, noise: f64, seed: u64) -> Result<Vec<Sample>> {
        check_noise(noise)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.sample(&mut rng, noise)).collect())
    }

    /// Per-class log-likelihood scores of the generating process, using
    /// whichever streams the sample carries.
    pub fn log_likelihoods(&self, s: &Sample, noise: f64) -> Vec<f64> {
        let v = self.cfg.vocab_size as f64;
        let sigma = noise * self.cfg.jitter_per_noise;
        (0..self.n_classes)
            .map(|c| {
                let mut ll = 0.0;
                if let Some(t) = &s.text {
                    for (p, &tok) in t.iter().enumerate() {
                        let hit = if tok == self.codewords[c][p] { 1.0 - noise } else { 0.0 };
                        ll += (hit + noise / v).ln();
                    }
                }
                if let Some(img) = &s.image {
                    let d2: f64 =
                        img.data.iter().zip(&self.prototypes[c]).map(|(a, b)| (a - b) * (a - b)).sum();
                    ll -= if sigma > 0.0 { d2 / (2.0 * sigma * sigma) } else { d2 * 1e12 };
                }
                ll
            })
            .collect()
    }

    /// Bayes-optimal class for a single-label sample.
    pub fn bayes_predict(&self, s: &Sample, noise: f64) -> usize {
        let ll = self.log_likelihoods(s, noise);
        let mut best = 0;
        for c in 1..ll.len() {
            if ll[c] > ll[best] {
                best = c;
            }
        }
        best
    }

    pub fn bayes_accuracy(&self, samples: &[Sample], noise: f64) -> f64 {
        let hits = samples
            .iter()
            .filter(|s| s.class() == Some(self.bayes_predict(s, noise)))
            .count();
        hits as f64 / samples.len().max(1) as f64
    }
}

/// `n` complete samples from the default codebook keyed by `seed`.
pub fn make_dataset(n: usize, n_classes: usize, noise: f64, seed: u64) -> Result<Vec<Sample>> {
    check_noise(noise)?;
    let task = SyntheticTask::new(SynthConfig::default(), n_classes, seed)?;
    task.generate(n, noise, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MissingSpec {
    pub case: MissingCase,
    pub eta: f64,
}

impl MissingSpec {
    pub fn new(case: MissingCase, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("missing rate {eta} must lie in [0, 1]")));
        }
        Ok(Self { case, eta })
    }

    /// Closed-form `(text_only, image_only, complete)` counts for `n` samples.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // the small slack absorbs binary representation error in eta * n
        let floor = |x: f64| (x + 1e-9).floor() as usize;
        let (text_only, image_only) = match self.case {
            MissingCase::Both => {
                let half = floor(self.eta * n as f64 / 2.0);
                (half, half)
            }
            MissingCase::TextMissing => (0, floor(self.eta * n as f64)),
            MissingCase::ImageMissing => (floor(self.eta * n as f64), 0),
        };
        (text_only, image_only, n - text_only - image_only)
    }
}

/// Applies the missing-rate protocol: a seeded shuffle picks which samples
/// lose a modality; the removed payload is dropped.
pub fn apply_missing(dataset: &[Sample], spec: MissingSpec, seed: u64) -> Vec<Sample> {
    let n = dataset.len();
    let (text_only, image_only, _) = spec.counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    #[allow(clippy::unusual_byte_groupings)]
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_AB5E));
    let mut out = dataset.to_vec();
    for &i in &order[..text_only] {
        out[i].drop_stream(Stream::Image);
    }
    for &i in &order[text_only..text_only + image_only] {
        out[i].drop_stream(Stream::Text);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded disjoint partition; returns the index sets in shuffled order.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5B11_7000));
    let n_train = (fractions[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = ((fractions[1] * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

pub fn split(dataset: &[Sample], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let [a, b, c] = split_indices(dataset.len(), fractions, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    Ok(Splits { train: pick(&a), val: pick(&b), test: pick(&c) })
}

/// Splits, then applies the same missing protocol independently to each part.
pub fn split_with_missing(dataset: &[Sample], fractions: [f64; 3], spec: MissingSpec, seed: u64) -> Result<Splits> {
    let s = split(dataset, fractions, seed)?;
    Ok(Splits {
        train: apply_missing(&s.train, spec, seed.wrapping_add(1)),
        val: apply_missing(&s.val, spec, seed.wrapping_add(2)),
        test: apply_missing(&s.test, spec, seed.wrapping_add(3)),
    })
}

/// Writes one JSON record per line.
pub fn dump(samples: &[Sample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
