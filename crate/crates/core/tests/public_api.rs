use cmvae_core::data::{pair_related, subset, FactorSpec, Generator, PairedDataset};
use cmvae_core::eval::sandwich::{oracle_check, SandwichConfig};
use cmvae_core::experiments::objective_for;
use cmvae_core::objective::{ObjectiveConfig, Variant};
use cmvae_core::train::{run, RunConfig, TrainState, Trainer};
use cmvae_core::Error;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.spec = FactorSpec { items_per_modality: 60, ..FactorSpec::default() };
    cfg.data.test_items = 30;
    cfg.data.pairs_per_instance = 3;
    cfg.model.hidden = vec![8];
    cfg.optimizer.steps = 8;
    cfg.optimizer.batch_size = 12;
    cfg.eval_every = 0;
    cfg.objective = ObjectiveConfig::contrastive_iwae(2.0, 3, 4);
    cfg
}

fn ckpt_bytes(state: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    state.write(&mut buf).unwrap();
    buf
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let cfg = small();
    let gen = Generator::new(cfg.data.spec.clone(), cfg.data.seed).unwrap();
    let data = pair_related(gen.generate_all(cfg.data.seed).unwrap(), 3, 7).unwrap();

    let full = run(Trainer::fresh(cfg.clone(), data.clone()).unwrap(), None).unwrap();

    let mut half_cfg = cfg.clone();
    half_cfg.optimizer.steps = 4;
    let half = run(Trainer::fresh(half_cfg, data.clone()).unwrap(), None).unwrap();
    let restored = TrainState::read(ckpt_bytes(&half.state).as_slice()).unwrap();
    assert_eq!(restored.step, 4);
    let resumed = run(Trainer::new(cfg, restored, data).unwrap(), None).unwrap();

    assert_eq!(resumed.state.step, 8);
    assert_eq!(ckpt_bytes(&resumed.state), ckpt_bytes(&full.state));
}

#[test]
fn dataset_binary_round_trip_and_subsetting() {
    let spec = FactorSpec { items_per_modality: 40, ..FactorSpec::default() };
    let gen = Generator::new(spec.clone(), 3).unwrap();
    let ds = pair_related(gen.generate_all(3).unwrap(), 2, 3).unwrap();
    assert_eq!(ds.related_fraction(), 1.0);

    let mut buf = Vec::new();
    ds.write_binary(&mut buf, spec.num_classes).unwrap();
    assert_eq!(&buf[..4], b"CMDS");
    let (back, classes): (PairedDataset, usize) = PairedDataset::read_binary(buf.as_slice()).unwrap();
    assert_eq!(classes, spec.num_classes);
    assert_eq!(back.pairs, ds.pairs);
    assert_eq!(back.pools[1].obs, ds.pools[1].obs);

    let half = subset(&ds, 50.0, 1).unwrap();
    assert!(half.len() < ds.len() && !half.is_empty());
    assert!(subset(&ds, 0.0, 1).is_err() || subset(&ds, 0.0, 1).unwrap().is_empty());
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let mut cfg = small();
    cfg.optimizer.batch_size = 3;
    assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));

    let mut cfg = small();
    cfg.optimizer.learning_rate = f64::NAN;
    assert!(cfg.validate().is_err());
}

#[test]
fn variants_share_the_contrastive_settings() {
    let base = ObjectiveConfig::contrastive_iwae(1.5, 4, 10);
    let baseline = objective_for(&base, Variant::Baseline);
    assert!(baseline.is_baseline());
    let back = objective_for(&baseline, Variant::ContrastiveIwae);
    assert!(!back.is_baseline());
    assert_eq!(back.num_negatives, ObjectiveConfig::default().num_negatives);
}

#[test]
fn oracle_check_passes_at_defaults() {
    let check = oracle_check(&SandwichConfig::default()).unwrap();
    assert!(check.passed(3.0));
}
