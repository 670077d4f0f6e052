use std::collections::BTreeMap;

use candle_core::Tensor;
use vhda::corpus::{generate_toy_corpus, Dialog, DialogCorpus, ToySpec};
use vhda::model::{ModelConfig, VhdaModel};
use vhda::sampler::{augment, SamplerConfig};
use vhda::trainer::{load_model, TrainConfig, Trainer};
use vhda::VhdaError;

fn corpus(seed: u64) -> DialogCorpus {
    generate_toy_corpus(&ToySpec {
        n_dialogs: 6,
        seed,
        ..ToySpec::default()
    })
    .unwrap()
}

fn tiny(steps: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::uniform(8),
        batch_size: 3,
        steps,
        anneal_horizon: Some(4),
        ..TrainConfig::toy()
    }
}

fn values(model: &VhdaModel) -> BTreeMap<String, Vec<f64>> {
    model
        .store
        .tensors()
        .into_iter()
        .map(|(k, t)| (k, t.flatten_all().unwrap().to_vec1::<f64>().unwrap()))
        .collect()
}

fn eval_logits(model: &VhdaModel, dialogs: &DialogCorpus) -> Vec<f64> {
    let refs: Vec<&Dialog> = dialogs.dialogs.iter().collect();
    let batch = model.encode_batch(&refs, true, None).unwrap();
    let out = model.forward_eval(&batch).unwrap();
    let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    [
        &out.speaker_logits,
        &out.goal_logits,
        &out.state_logits,
        &out.word_logits,
    ]
    .into_iter()
    .flat_map(flat)
    .collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = corpus(0);
    let mut trainer = Trainer::new(tiny(3), &data).unwrap();
    trainer.train(|_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    trainer.save_checkpoint(dir.path()).unwrap();
    let (loaded, meta) = load_model(dir.path()).unwrap();
    assert_eq!(meta.step, 3);
    assert_eq!(values(&loaded), values(&trainer.model));
    assert_eq!(eval_logits(&loaded, &data), eval_logits(&trainer.model, &data));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = corpus(1);
    let mut straight = Trainer::new(tiny(6), &data).unwrap();
    let full = straight.train(|_| {}).unwrap();

    let mut first = Trainer::new(tiny(6), &data).unwrap();
    let mut head = Vec::new();
    for _ in 0..3 {
        head.push(first.train_step().unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    first.save_checkpoint(dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(dir.path(), &data, Some(&tiny(6))).unwrap();
    assert_eq!(resumed.step, 3);
    let tail = resumed.train(|_| {}).unwrap();

    let totals = |rs: &[vhda::trainer::StepRecord]| rs.iter().map(|r| r.loss.total).collect::<Vec<_>>();
    let joined: Vec<f64> = totals(&head).into_iter().chain(totals(&tail)).collect();
    assert_eq!(joined, totals(&full));
    assert_eq!(values(&resumed.model), values(&straight.model));
}

#[test]
fn resume_rejects_a_corpus_with_a_different_vocabulary() {
    let data = corpus(2);
    let trainer = Trainer::new(tiny(0), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    trainer.save_checkpoint(dir.path()).unwrap();
    let other = generate_toy_corpus(&ToySpec {
        n_dialogs: 6,
        n_slots: 4,
        seed: 2,
        ..ToySpec::default()
    })
    .unwrap();
    match Trainer::resume(dir.path(), &other, None) {
        Err(VhdaError::Version(msg)) => assert!(msg.contains("hash"), "{msg}"),
        other => panic!("expected a version error, got {:?}", other.map(|t| t.step)),
    }
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let data = corpus(3);
    let trainer = Trainer::new(tiny(2), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    trainer.save_checkpoint(dir.path()).unwrap();
    let changed = TrainConfig {
        learning_rate: 0.5,
        ..tiny(2)
    };
    assert!(matches!(
        Trainer::resume(dir.path(), &data, Some(&changed)),
        Err(VhdaError::Version(_))
    ));
}

#[test]
fn same_seed_same_parameters() {
    let data = corpus(4);
    let run = |seed| {
        let mut t = Trainer::new(TrainConfig { seed, ..tiny(3) }, &data).unwrap();
        t.train(|_| {}).unwrap();
        t.model.parameter_hash().unwrap()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn augmentation_does_not_depend_on_worker_count() {
    let data = corpus(5);
    let mut trainer = Trainer::new(tiny(2), &data).unwrap();
    trainer.train(|_| {}).unwrap();
    let config = SamplerConfig::for_corpus(&data);
    let (one, report_one) = augment(&data, &trainer.model, 1.0, 9, &config, 1).unwrap();
    let (three, report_three) = augment(&data, &trainer.model, 1.0, 9, &config, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(report_one, report_three);
    assert_eq!(one.len(), 12);
    assert!(!one.goal_consistent);
}
