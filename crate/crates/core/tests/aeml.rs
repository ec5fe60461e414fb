use csnet::aeml::{
    average_models, average_params, average_tensors, combine_predictions, compare_aeml_ensemble, ensemble_predict,
    select_top_t, AemlSelection, EnsembleMode, EvalSettings, COMPARISON_CSV_HEADER,
};
use csnet::episodes::{sample_episode, synth_family, Split, SynthFamilyConfig};
use csnet::eval::Classifier;
use csnet::networks::ArchSpec;
use csnet::trainer::{train, Checkpoint, CheckpointStore, LogRecord, ModelConfig, ModelParams, TrainConfig, TrainingLog};
use csnet::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        arch: ArchSpec::Mlp { widths: vec![8, 8] },
        channels: 4,
        ..Default::default()
    }
}

/// Store and log with the given validation accuracies at episodes 0, 10, 20, ...
fn fake_run(accs: &[f64]) -> (TrainingLog, CheckpointStore) {
    let mut store = CheckpointStore::memory();
    let mut log = TrainingLog::default();
    for (i, &acc) in accs.iter().enumerate() {
        let cfg = ModelConfig { seed: i as u64, ..model_cfg() };
        store
            .save(&Checkpoint {
                id: i,
                episode: 10 * i,
                val_acc: acc,
                wall_clock: 0,
                provenance: "train".into(),
                model: ModelParams::<f64>::build(&cfg, 1).unwrap(),
                adam: None,
            })
            .unwrap();
        log.push(LogRecord {
            episode: 10 * i,
            loss: None,
            lr: 1e-3,
            val_acc: Some(acc),
            checkpoint_id: Some(i),
        })
        .unwrap();
    }
    (log, store)
}

#[test]
fn top_t_selection_rules() {
    let (log, store) = fake_run(&[0.5, 0.7, 0.6, 0.7]);
    let s = select_top_t(&log, &store, 2).unwrap();
    assert_eq!(s.ids, vec![3, 1]);
    assert_eq!(s.val_accs, vec![0.7, 0.7]);
    assert_eq!(select_top_t(&log, &store, 1).unwrap().ids, vec![3]);
    assert_eq!(select_top_t(&log, &store, 4).unwrap().ids, vec![3, 1, 2, 0]);
    assert!(matches!(
        select_top_t(&log, &store, 5),
        Err(Error::Selection { requested: 5, available: 4 })
    ));
}

#[test]
fn averaging_single_and_identical_checkpoints_is_exact() {
    let (log, store) = fake_run(&[0.5, 0.7, 0.6]);
    let one = select_top_t(&log, &store, 1).unwrap();
    let avg: ModelParams<f64> = average_params(&one, &store).unwrap();
    assert_eq!(avg, store.load::<f64>(1).unwrap().model);

    let m = store.load::<f64>(2).unwrap().model;
    assert_eq!(average_models(&[m.clone(), m.clone(), m.clone()]).unwrap(), m);
}

#[test]
fn averaging_is_independent_of_selection_order() {
    let (log, store) = fake_run(&[0.5, 0.7, 0.6, 0.65, 0.55]);
    let s = select_top_t(&log, &store, 4).unwrap();
    let mut reversed = s.clone();
    reversed.ids.reverse();
    let a: ModelParams<f64> = average_params(&s, &store).unwrap();
    let b: ModelParams<f64> = average_params(&reversed, &store).unwrap();
    assert_eq!(a, b);
}

#[test]
fn averaging_rejects_mixed_architectures() {
    let a = ModelParams::<f64>::build(&model_cfg(), 1).unwrap();
    let b = ModelParams::<f64>::build(&ModelConfig { class_support: false, ..model_cfg() }, 1).unwrap();
    assert!(matches!(average_models(&[a.clone(), b]), Err(Error::Contract(_))));
    let c = ModelParams::<f64>::build(&model_cfg(), 2).unwrap();
    assert!(matches!(average_models(&[a, c]), Err(Error::Contract(_))));
}

#[test]
fn averaged_bn_statistics_are_means() {
    let cfg = ModelConfig {
        arch: ArchSpec::Conv4 { input_shape: [1, 16, 16] },
        class_support: false,
        ..Default::default()
    };
    let mut a = ModelParams::<f64>::build(&cfg, 1).unwrap();
    let mut b = a.clone();
    a.embedding.bn[0].mean[3] = 1.0;
    b.embedding.bn[0].mean[3] = 3.0;
    b.embedding.bn[2].var[0] = 5.0;
    let avg = average_models(&[a, b]).unwrap();
    assert_eq!(avg.embedding.bn[0].mean[3], 2.0);
    assert_eq!(avg.embedding.bn[2].var[0], 3.0);
}

#[test]
fn ensemble_of_one_matches_single_model() {
    let ds = synth_family(&SynthFamilyConfig::default()).unwrap();
    let (log, store) = fake_run(&[0.5, 0.9]);
    let sel = select_top_t(&log, &store, 1).unwrap();
    let ep = sample_episode(&ds, Split::Test, 5, 1, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let single = store.load::<f64>(1).unwrap().model.predict(&ds, &ep).unwrap();
    for mode in [EnsembleMode::ProbAvg] {
        assert_eq!(ensemble_predict::<f64>(&sel, &store, &ds, &ep, mode).unwrap(), single);
    }
    let vote = ensemble_predict::<f64>(&sel, &store, &ds, &ep, EnsembleMode::MajorityVote).unwrap();
    for r in 0..ep.query.len() {
        let hot = csnet::attention::argmax(vote.row(r));
        assert_eq!(hot, csnet::attention::argmax(single.row(r)));
        assert_eq!(vote.row(r).iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn comparison_with_t1_reports_identical_accuracies() {
    let ds = synth_family(&SynthFamilyConfig::default()).unwrap();
    let (log, store) = fake_run(&[0.5, 0.9, 0.6]);
    let sel = select_top_t(&log, &store, 1).unwrap();
    let eval = EvalSettings { episodes: 50, ..Default::default() };
    let r = compare_aeml_ensemble::<f64>(&sel, &store, &ds, &eval, EnsembleMode::ProbAvg).unwrap();
    assert_eq!(r.acc_single, r.acc_aeml);
    assert_eq!(r.acc_single, r.acc_ensemble);
    assert_eq!((r.delta_aeml, r.delta_ensemble), (0.0, 0.0));
    assert_eq!(r.csv_row().split(',').count(), COMPARISON_CSV_HEADER.split(',').count());
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<csnet::aeml::ComparisonReport>(&json).unwrap(), r);
}

#[test]
fn comparison_on_a_trained_run() {
    let ds = synth_family(&SynthFamilyConfig::default()).unwrap();
    let cfg = TrainConfig {
        total_episodes: 500,
        val_period: 100,
        val_episodes: 20,
        model: model_cfg(),
        ..Default::default()
    };
    let mut store = CheckpointStore::memory();
    let out = train::<f32>(&cfg, &ds, &mut store).unwrap();
    let sel: AemlSelection = select_top_t(&out.log, &store, 5).unwrap();
    let eval = EvalSettings { episodes: 100, ..Default::default() };
    for mode in [EnsembleMode::ProbAvg, EnsembleMode::MajorityVote] {
        let r = compare_aeml_ensemble::<f32>(&sel, &store, &ds, &eval, mode).unwrap();
        for a in [r.acc_single, r.acc_aeml, r.acc_ensemble] {
            assert!((0.0..=1.0).contains(&a));
        }
        assert_eq!(r.t, 5);
    }
}

/// Prediction of a model that is linear in its parameters: `X·W + b`.
fn linear_predict(x: &Tensor<f64>, params: &[(String, Tensor<f64>)]) -> Tensor<f64> {
    let (p, d) = (x.shape()[0], x.shape()[1]);
    let w = &params[0].1;
    let b = &params[1].1;
    let n = w.shape()[1];
    let mut out = vec![0.0; p * n];
    for r in 0..p {
        for c in 0..n {
            out[r * n + c] = b.data()[c] + (0..d).map(|k| x.data()[r * d + k] * w.data()[k * n + c]).sum::<f64>();
        }
    }
    Tensor::new(vec![p, n], out).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_model_average_equals_prediction_average(
        seed in any::<u64>(), t in prop::sample::select(vec![2usize, 3, 5]), scale in 0.1f64..10.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, d, n) = (7, 6, 5);
        let x = random_tensor(&mut rng, vec![p, d], 3.0);
        let sets: Vec<Vec<(String, Tensor<f64>)>> = (0..t)
            .map(|_| vec![
                ("w".to_string(), random_tensor(&mut rng, vec![d, n], scale)),
                ("b".to_string(), random_tensor(&mut rng, vec![n], scale)),
            ])
            .collect();
        let preds: Vec<Tensor<f64>> = sets.iter().map(|s| linear_predict(&x, s)).collect();
        let ensemble = combine_predictions(&preds, EnsembleMode::ProbAvg).unwrap();
        let averaged = linear_predict(&x, &average_tensors(&sets).unwrap());
        prop_assert!(ensemble.max_abs_diff(&averaged) <= 1e-10);
    }

    #[test]
    fn average_tensors_is_order_insensitive(seed in any::<u64>(), t in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets: Vec<Vec<(String, Tensor<f64>)>> = (0..t)
            .map(|_| vec![("w".to_string(), random_tensor(&mut rng, vec![4, 3], 5.0))])
            .collect();
        let mut rev = sets.clone();
        rev.reverse();
        let a = average_tensors(&sets).unwrap();
        let b = average_tensors(&rev).unwrap();
        prop_assert!(a[0].1.max_abs_diff(&b[0].1) <= 1e-14);
    }
}
