mod support;

use recindial::pipeline::{train_on, ExperimentConfig};
use recindial::{Checkpoint, Recommender};

#[test]
fn valid_perplexity_falls_over_the_first_three_epochs() {
    let data = support::synthetic_dataset(600, 0);
    let mut config = ExperimentConfig::toy();
    config.train.epochs = 3;
    let out = train_on(&data, &config).unwrap();
    let ppl: Vec<f64> = out.report.epochs.iter().map(|e| e.valid_ppl).collect();
    assert_eq!(ppl.len(), 3);
    assert!(ppl[0] > ppl[1] && ppl[1] > ppl[2], "{ppl:?}");
    assert_eq!(out.report.best_epoch, 2);
}

#[test]
fn saved_checkpoint_decodes_identically() {
    let data = support::synthetic_dataset(60, 1);
    let mut config = ExperimentConfig::toy();
    config.train.epochs = 1;
    let out = train_on(&data, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    out.checkpoint.save(&path).unwrap();
    let a = Recommender::from_checkpoint(out.checkpoint, &data, true).unwrap();
    let b = Recommender::from_checkpoint(Checkpoint::load(&path).unwrap(), &data, true).unwrap();
    let pairs = &data.split.test;
    assert_eq!(a.generate_all(pairs, &config.decode, 1).unwrap(), b.generate_all(pairs, &config.decode, 1).unwrap());
}
