//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcp_lab::config::{EncoderConfig, Generator, ModelConfig, PromptConfig, Variant};
use dcp_lab::data::{apply_missing, make_dataset, MissingSpec, Sample};
use dcp_lab::experiment::{self, CellKey, ExperimentConfig};
use dcp_lab::metrics::{auroc, f1_macro};
use dcp_lab::modality::{MissingCase, MissingType, Stream};
use dcp_lab::model::Model;
use dcp_lab::prompts::DeepGenerator;
use dcp_lab::tensor::{finite_diff_check, Graph};
use dcp_lab::train::{train_run, TrainConfig};

const FD_TOL: f64 = 1e-4;
const FD_SECONDS: f64 = 60.0;
const EQUIV_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;
const DIRECTIONAL_MARGIN: f64 = 0.02;
const DIRECTIONAL_SECONDS: f64 = 600.0;
const BUDGET: f64 = 0.10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn micro(variant: Variant, total: usize) -> ModelConfig {
    let p = PromptConfig::for_variant(variant, total);
    ModelConfig {
        encoder: EncoderConfig { n_layers: 2, d_model: 8, n_heads: 2, ff_hidden: 16, prompt_depth: 2, ..Default::default() },
        prompts: match variant {
            Variant::Dcp => PromptConfig { generator: Generator::Mlp { r: 2 }, dynamic_r: 2, common_r: 2, ..p },
            _ => p,
        },
        ..Default::default()
    }
}

fn with_missing(samples: &[Sample], case: MissingCase, eta: f64, seed: u64) -> Vec<Sample> {
    apply_missing(samples, MissingSpec::new(case, eta).unwrap(), seed)
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let model = Model::new(micro(Variant::Dcp, 6), seed).unwrap();
        let data = with_missing(&make_dataset(6, 4, 0.2, seed).unwrap(), MissingCase::Both, 0.7, seed);
        let targets: Vec<usize> = data.iter().map(|s| s.class().unwrap()).collect();
        let mut store = model.store.clone();
        let ids = store.trainable_ids();
        let err = finite_diff_check(&mut store, &ids, 1e-5, |g: &mut Graph| {
            let rows = data.iter().map(|s| model.forward_model(g, s, s.missing, None)).collect::<Result<Vec<_>, _>>()?;
            let z = g.concat_rows(&rows)?;
            g.cross_entropy(z, &targets)
        })
        .unwrap();
        worst = worst.max(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < FD_TOL && secs < FD_SECONDS,
        format!("max rel err {worst:.2e} (< {FD_TOL:.0e}) over 5 seeds in {secs:.1}s (< {FD_SECONDS}s)"),
    )
}

fn freeze_policy() -> Outcome {
    let mut model = Model::new(micro(Variant::Dcp, 6), 1).unwrap();
    let data = with_missing(&make_dataset(160, 4, 0.2, 1).unwrap(), MissingCase::Both, 0.7, 2);
    let frozen = model.frozen_bytes();
    let before = model.store.clone();
    let cfg = TrainConfig { epochs: 5, batch_size: 4, eval_every: 100, ..Default::default() };
    let report = train_run(&mut model, &data, &[], &cfg).unwrap();

    let head = [model.backbone.head.w, model.backbone.head.b];
    let expected: BTreeSet<_> = model.bank.all_params().into_iter().chain(head).collect();
    let trainable: BTreeSet<_> = model.store.trainable_ids().into_iter().collect();
    let changed: BTreeSet<_> = model.store.ids().filter(|&id| before.get(id).data != model.store.get(id).data).collect();
    let pass = report.steps == 200
        && model.frozen_bytes() == frozen
        && trainable == expected
        && changed.is_subset(&expected)
        && head.iter().all(|h| changed.contains(h));
    outcome(
        pass,
        format!(
            "{} steps, frozen bytes identical: {}, trainable = bank + head: {}, {} tensors updated, all inside trainable set: {}",
            report.steps,
            model.frozen_bytes() == frozen,
            trainable == expected,
            changed.len(),
            changed.is_subset(&expected)
        ),
    )
}

fn protocol_counting() -> Outcome {
    let mut checked = 0;
    for n in [100usize, 999, 2000] {
        let data = make_dataset(n, 4, 0.2, n as u64).unwrap();
        for pct in [0usize, 50, 70, 90, 100] {
            for case in MissingCase::ALL {
                // integer oracle on percentages
                let (text_only, image_only) = match case {
                    MissingCase::Both => (pct * n / 200, pct * n / 200),
                    MissingCase::TextMissing => (0, pct * n / 100),
                    MissingCase::ImageMissing => (pct * n / 100, 0),
                };
                let got = with_missing(&data, case, pct as f64 / 100.0, 9);
                let count = |m: MissingType| got.iter().filter(|s| s.missing == m && s.route().ok() == Some(m)).count();
                let want = (text_only, image_only, n - text_only - image_only);
                let have = (count(MissingType::MissingImage), count(MissingType::MissingText), count(MissingType::Complete));
                if have != want {
                    return outcome(false, format!("n={n} eta={pct}% {case}: {have:?} != {want:?}"));
                }
                checked += 1;
            }
        }
    }
    let ex = with_missing(&make_dataset(100, 4, 0.2, 0).unwrap(), MissingCase::Both, 0.7, 0);
    let text_only = ex.iter().filter(|s| s.missing == MissingType::MissingImage).count();
    let image_only = ex.iter().filter(|s| s.missing == MissingType::MissingText).count();
    outcome(
        text_only == 35 && image_only == 35,
        format!("{checked} (n, eta, case) compositions exact; n=100 eta=0.7 both -> {text_only}/{image_only}/{}", 100 - text_only - image_only),
    )
}

fn chain_independence() -> Outcome {
    let model = Model::new(micro(Variant::Dcp, 6), 3).unwrap();
    let data = make_dataset(10, 4, 0.2, 4).unwrap();
    let l_r = model.bank.cfg.len_correlated;
    let d = model.cfg.encoder.d_model;
    for m in MissingType::ALL {
        let mut reference: Option<Vec<Vec<u64>>> = None;
        let mut dynamic = BTreeSet::new();
        for s in &data {
            let mut g = Graph::new(&model.store);
            let chain = model.bank.correlated_chain(&mut g, m).unwrap();
            let x = |st: Stream, s: &Sample, g: &mut Graph| {
                m.has(st).then(|| {
                    let input = match st {
                        Stream::Text => dcp_lab::backbone::StreamInput::Tokens(s.text.as_deref().unwrap()),
                        Stream::Image => dcp_lab::backbone::StreamInput::Patches(s.image.as_ref().unwrap()),
                    };
                    model.backbone.embed(g, st, Some(input)).unwrap()
                })
            };
            let (xt, xi) = (x(Stream::Text, s, &mut g), x(Stream::Image, s, &mut g));
            let a = model.bank.assemble(&mut g, m, xt, xi, &chain).unwrap();
            let mut bits = Vec::new();
            for st in Stream::BOTH {
                let Some(sp) = a.stream(st) else { continue };
                bits.push(g.value(sp.input)[..l_r * d].iter().map(|v| v.to_bits()).collect());
                for v in &sp.deep {
                    bits.push(g.value(*v).iter().map(|v| v.to_bits()).collect());
                }
                dynamic.insert(g.value(sp.input)[l_r * d..].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
            match &reference {
                None => reference = Some(bits),
                Some(r) if *r != bits => return outcome(false, format!("{m}: correlated prompts differ across samples")),
                _ => {}
            }
        }
        if dynamic.len() < 2 {
            return outcome(false, format!("{m}: dynamic prompts did not vary with the input"));
        }
    }
    outcome(true, "correlated prompts bitwise identical over 10 samples for each of 3 missing types")
}

fn degenerate_equivalences() -> Outcome {
    let base = Model::new(micro(Variant::Baseline, 0), 6).unwrap();
    let empty = Model::new(micro(Variant::Dcp, 0), 6).unwrap();
    let data = with_missing(&make_dataset(30, 4, 0.2, 6).unwrap(), MissingCase::Both, 0.7, 6);
    let mut worst: f64 = 0.0;
    for s in &data {
        for (a, b) in base.logits(s).unwrap().iter().zip(empty.logits(s).unwrap()) {
            worst = worst.max((a - b).abs());
        }
    }
    let free = ModelConfig {
        prompts: PromptConfig { generator: Generator::None, len_dynamic: 0, len_common: 0, ..micro(Variant::Dcp, 6).prompts },
        ..micro(Variant::Dcp, 6)
    };
    let mmp = Model::new(free, 6).unwrap();
    let structural = mmp.bank.generator_params().is_empty()
        && MissingType::ALL.iter().all(|&m| {
            Stream::BOTH.iter().all(|&s| {
                let sb = mmp.bank.entry(m).stream(s);
                sb.dynamic.is_none() && sb.projector.is_none() && sb.deep.iter().all(|g| matches!(g, DeepGenerator::Free(_)))
            })
        });
    outcome(
        worst <= EQUIV_TOL && structural,
        format!(
            "L_p=0 vs baseline max |diff| {worst:.1e} (<= {EQUIV_TOL:.0e}) on 30 samples; generator=none has {} generator tensors, free blocks only: {structural}",
            mmp.bank.generator_params().len()
        ),
    )
}

fn brute_f1(preds: &[usize], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..c {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (p, l) in preds.iter().zip(labels) {
            match (*p == k, *l == k) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        total += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    }
    total / c as f64
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut f1_err, mut auc_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let c = rng.gen_range(2..6);
        let n = rng.gen_range(1..60);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        f1_err = f1_err.max((f1_macro(&preds, &labels, c).unwrap() - brute_f1(&preds, &labels, c)).abs());
    }
    for _ in 0..100 {
        let n = rng.gen_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        auc_err = auc_err.max((auroc(&scores, &labels).unwrap() - brute_auroc(&scores, &labels)).abs());
    }
    let perfect = f1_macro(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
    let ties = auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
    outcome(
        f1_err <= METRIC_TOL && auc_err <= METRIC_TOL && perfect == 1.0 && ties == 0.5,
        format!("f1 max err {f1_err:.1e}, auroc max err {auc_err:.1e} (<= {METRIC_TOL:.0e}); f1(perfect)={perfect}, auroc(ties)={ties}"),
    )
}

/// Reduced model so five seeds of three variants fit the time budget on one core.
fn directional_config() -> ExperimentConfig {
    let prompt_total = 12;
    ExperimentConfig {
        seeds: (10..15).collect(),
        encoder: EncoderConfig { n_layers: 2, d_model: 32, n_heads: 4, ff_hidden: 128, ..Default::default() },
        prompt_total,
        dcp: PromptConfig::for_variant(Variant::Dcp, prompt_total),
        eval_every: 15,
        threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        timing: false,
        ..Default::default()
    }
}

fn directional() -> Outcome {
    let cfg = directional_config();
    let t0 = Instant::now();
    let keys = experiment::cells(&cfg, &cfg.etas);
    let results = experiment::run_cells(&cfg, &keys).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let mean = |v: Variant| {
        let accs: Vec<f64> = results
            .iter()
            .filter(|c| c.key.variant == v)
            .map(|c| c.report.find(cfg.epochs, "test/both").expect("test slice").metrics.accuracy)
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let (b, m, d) = (mean(Variant::Baseline), mean(Variant::MmpIndependent), mean(Variant::Dcp));
    let per_seed: Vec<String> = cfg
        .seeds
        .iter()
        .map(|&s| {
            let acc = |v| {
                let key = CellKey { variant: v, seed: s, eta: 0.7 };
                results.iter().find(|c| c.key == key).unwrap().report.find(cfg.epochs, "test/both").unwrap().metrics.accuracy
            };
            format!("s{s} {:.3}/{:.3}/{:.3}", acc(Variant::Dcp), acc(Variant::MmpIndependent), acc(Variant::Baseline))
        })
        .collect();
    outcome(
        d >= m && m >= b && d - b >= DIRECTIONAL_MARGIN && secs < DIRECTIONAL_SECONDS,
        format!(
            "mean test acc dcp {d:.4} >= mmp {m:.4} >= baseline {b:.4}, dcp - baseline {:.2} pts (>= {:.0}); {secs:.0}s (< {DIRECTIONAL_SECONDS}s); per seed dcp/mmp/base: {}",
            100.0 * (d - b),
            100.0 * DIRECTIONAL_MARGIN,
            per_seed.join(", ")
        ),
    )
}

fn generalization_grid() -> Outcome {
    let run_once = |dir: &std::path::Path| {
        let cfg = ExperimentConfig {
            variants: vec![Variant::Dcp],
            seeds: vec![4],
            encoder: EncoderConfig { n_layers: 2, d_model: 16, n_heads: 2, ff_hidden: 32, ..Default::default() },
            prompt_total: 6,
            dcp: PromptConfig { generator: Generator::Mlp { r: 4 }, dynamic_r: 4, common_r: 4, ..PromptConfig::for_variant(Variant::Dcp, 6) },
            eval_cases: vec![MissingCase::Both, MissingCase::ImageMissing, MissingCase::TextMissing],
            data: experiment::DataConfig { n: 200, ..Default::default() },
            epochs: 2,
            output: dir.to_path_buf(),
            timing: false,
            ..Default::default()
        };
        experiment::run(&cfg).unwrap();
        std::fs::read(dir.join("summary.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (run_once(a.path()), run_once(b.path()));
    let text = String::from_utf8_lossy(&first);
    let cases = ["test/both", "test/image_missing", "test/text_missing"];
    let present = cases.iter().all(|c| text.lines().any(|l| l.contains(&format!(",{c},"))));
    outcome(
        first == second && present,
        format!("train both -> test {{both, image_missing, text_missing}} rows present: {present}; summary CSV byte-identical across runs: {}", first == second),
    )
}

fn parameter_budget() -> Outcome {
    let cfg = ExperimentConfig::default();
    let c = Model::new(cfg.model_config(Variant::Dcp), 0).unwrap().census();
    outcome(
        c.fraction() < BUDGET,
        format!("default dcp trains {}/{} = {:.2}% (< {:.0}%)", c.trainable, c.total, 100.0 * c.fraction(), 100.0 * BUDGET),
    )
}

fn main() -> ExitCode {
    // (name, check, gating); a non-gating failure is reported but keeps the exit code
    let criteria: [(&str, fn() -> Outcome, bool); 9] = [
        ("gradient fidelity", gradient_fidelity, true),
        ("freeze policy", freeze_policy, true),
        ("protocol counting", protocol_counting, true),
        ("chain sample-independence", chain_independence, true),
        ("degenerate equivalences", degenerate_equivalences, true),
        ("metric oracles", metric_oracles, true),
        ("directional comparative", directional, false),
        ("generalization grid", generalization_grid, true),
        ("parameter budget", parameter_budget, true),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut failed, mut reported) = (0, 0);
    for (name, check, gating) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        let tag = if gating { "" } else { " [non-gating]" };
        println!("{} {name}{tag}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        match (o.pass, gating) {
            (false, true) => failed += 1,
            (false, false) => reported += 1,
            _ => {}
        }
    }
    if reported > 0 {
        println!("{reported} non-gating criteria failed");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
