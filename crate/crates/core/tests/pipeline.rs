use dcp_lab::archive;
use dcp_lab::config::{EncoderConfig, Generator, ModelConfig, PromptConfig, Variant};
use dcp_lab::data::{self, apply_missing, make_dataset, MissingSpec};
use dcp_lab::experiment::{parse_config, ExperimentConfig};
use dcp_lab::modality::MissingCase;
use dcp_lab::model::Model;
use dcp_lab::train::{train_run, EvalSlice, TrainConfig};

fn small() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { n_layers: 2, d_model: 8, n_heads: 2, ff_hidden: 16, ..Default::default() },
        prompts: PromptConfig { generator: Generator::Mlp { r: 2 }, dynamic_r: 2, common_r: 2, ..PromptConfig::for_variant(Variant::Dcp, 6) },
        ..Default::default()
    }
}

#[test]
fn trained_prompts_survive_an_archive_round_trip() {
    let samples = apply_missing(&make_dataset(40, 4, 0.2, 2).unwrap(), MissingSpec::new(MissingCase::Both, 0.7).unwrap(), 3);
    let mut model = Model::new(small(), 7).unwrap();
    let cfg = TrainConfig { epochs: 1, eval_every: 10, ..Default::default() };
    train_run(&mut model, &samples, &[], &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ids = model.store.trainable_ids();
    archive::save(&model.store, &ids, dir.path()).unwrap();
    let mut fresh = Model::new(small(), 7).unwrap();
    assert_ne!(fresh.logits(&samples[0]).unwrap(), model.logits(&samples[0]).unwrap());
    assert_eq!(archive::load(&mut fresh.store, dir.path()).unwrap(), ids.len());
    for s in &samples {
        assert_eq!(fresh.logits(s).unwrap(), model.logits(s).unwrap());
    }

    let mut other = Model::new(ModelConfig { n_classes: 3, ..small() }, 7).unwrap();
    assert!(archive::load(&mut other.store, dir.path()).is_err());
}

#[test]
fn datasets_round_trip_through_json() {
    let samples = apply_missing(&make_dataset(30, 4, 0.2, 5).unwrap(), MissingSpec::new(MissingCase::Both, 0.5).unwrap(), 1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("set.json");
    data::dump(&samples, &p).unwrap();
    assert_eq!(data::load(&p).unwrap(), samples);
    std::fs::write(&p, "[{\"label\": 3}]").unwrap();
    assert!(data::load(&p).is_err());
}

#[test]
fn training_is_reproducible_and_thread_count_free() {
    let samples = apply_missing(&make_dataset(60, 4, 0.2, 4).unwrap(), MissingSpec::new(MissingCase::Both, 0.7).unwrap(), 5);
    let slice = EvalSlice { case: "all".into(), eta: 0.7, samples: samples.clone() };
    let report = |threads| {
        let mut m = Model::new(small(), 3).unwrap();
        let cfg = TrainConfig { epochs: 2, threads, ..Default::default() };
        train_run(&mut m, &samples, std::slice::from_ref(&slice), &cfg).unwrap().to_csv(None, false)
    };
    let one = report(1);
    assert_eq!(one, report(1));
    assert_eq!(one, report(3));
}

#[test]
fn config_files_parse_to_the_same_hash_as_defaults() {
    assert_eq!(parse_config("").unwrap().hash(), ExperimentConfig::default().hash());
    let tweaked = parse_config("[train]\nepochs = 3\n").unwrap();
    assert_eq!(tweaked.epochs, 3);
    assert_ne!(tweaked.hash(), ExperimentConfig::default().hash());
    let a = parse_config("[prompts]\ngenerator = none\n");
    assert!(a.is_ok(), "{a:?}");
}
