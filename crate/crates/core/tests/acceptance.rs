//! Acceptance gate. Runs every criterion, prints one `PASS`/`FAIL` line for
//! each and exits non-zero if a gating criterion fails.
//!
//! Criterion 6 (ablation ordering) is reported but does not gate the exit
//! status; see the README for the measured deltas.

mod common;

use std::time::{Duration, Instant};

use csnet::aeml::{average_models, compare_aeml_ensemble, combine_predictions, select_top_t, EnsembleMode, EvalSettings};
use csnet::attention::{
    competitive_attention, head_probs, matching_attention, prototype_head, ClassSupports, HeadKind, HeadSpec, Sign,
};
use csnet::autodiff::{GradCheckConfig, GradCheckReport, Graph};
use csnet::episodes::{sample_episode_seeded, synth_family, Dataset, Split, SynthFamilyConfig};
use csnet::eval::{evaluate, EvalReport, RawNearestNeighbor};
use csnet::networks::ArchSpec;
use csnet::trainer::{episode_grad_check, train, validate, CheckpointStore, ModelConfig, ModelParams, TrainConfig, TrainingLog};
use csnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    gating: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, gating: true, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradients),
        ("attention oracle", attention_oracle),
        ("one-shot reduction", reduction),
        ("aeml linearity", aeml_linearity),
        ("desk-scale learning", desk_scale),
        ("ablation direction", ablation_direction),
        ("aeml utility", aeml_utility),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if o.gating { "" } else { " [reported]" };
        println!("criterion {} {name}: {status}{note} {} ({:.1}s)", i + 1, o.detail, t0.elapsed().as_secs_f64());
        if !o.pass && o.gating {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

fn grad_dataset(sample_shape: Vec<usize>, seed: u64) -> Dataset {
    let len = sample_shape.iter().product();
    let synth = synth_family(&SynthFamilyConfig {
        dim: len,
        train_classes: 8,
        val_classes: 1,
        test_classes: 1,
        samples_per_class: 6,
        seed,
        ..Default::default()
    })
    .unwrap();
    Dataset::new(sample_shape, synth.classes().to_vec()).unwrap()
}

fn grad_case(arch: ArchSpec, class_support: bool, shot: usize, seed: u64) -> GradCheckReport {
    let ds = grad_dataset(arch.input_shape(), seed);
    let cfg = ModelConfig {
        arch,
        class_support,
        channels: 6,
        seed,
        ..Default::default()
    };
    let model = ModelParams::<f64>::build(&cfg, shot).unwrap();
    let ep = sample_episode_seeded(&ds, Split::Train, 3, shot, 2, seed).unwrap();
    let gc = GradCheckConfig {
        h: 1e-5,
        samples: 260,
        seed,
        tol: 1e-4,
    };
    episode_grad_check(&model, &ds, &ep, &gc).unwrap()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let cases = [
        ("mlp", grad_case(ArchSpec::Mlp { widths: vec![6, 16, 12] }, false, 2, 1)),
        ("conv4", grad_case(ArchSpec::Conv4 { input_shape: [1, 16, 16] }, false, 1, 2)),
        ("mlp+class-support", grad_case(ArchSpec::Mlp { widths: vec![6, 12, 10] }, true, 3, 3)),
    ];
    let elapsed = t0.elapsed();
    let ok = cases.iter().all(|(_, r)| r.max_rel_err <= 1e-4 && r.checked >= 200) && elapsed <= Duration::from_secs(120);
    let detail = cases
        .iter()
        .map(|(n, r)| format!("{n}: max_rel_err={:.2e} checked={} kinks={}", r.max_rel_err, r.checked, r.skipped_kinks))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(ok, detail)
}

// ---------------------------------------------------------------- criterion 2

fn attention_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut winner_mismatch, mut max_diff) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=5);
        let d = rng.random_range(1..=8);
        let classes = common::random_classes(&mut rng, n, k, d);
        let queries: Vec<Vec<f64>> = (0..3).map(|_| common::random_vec(&mut rng, d)).collect();
        let supports = ClassSupports::from_nested(&classes).unwrap();

        // graph pipeline over all queries at once
        let mut g = Graph::<f64>::new();
        let flat: Vec<f64> = classes.iter().flatten().flatten().copied().collect();
        let s = g.leaf(Tensor::new(vec![n * k, d], flat).unwrap());
        let q = g.leaf(Tensor::new(vec![3, d], queries.concat()).unwrap());
        let probs = head_probs(&mut g, HeadSpec::default(), s, q, k).unwrap();
        let probs = g.value(probs).clone();

        for (qi, query) in queries.iter().enumerate() {
            let want = common::oracle(&classes, query);
            let got = competitive_attention(&supports, query, Sign::Negative).unwrap();
            if got.winners != want.winners {
                winner_mismatch += 1;
            }
            for c in 0..n {
                max_diff = max_diff
                    .max((got.weights[c] - want.weights[c]).abs())
                    .max((probs.row(qi)[c] - want.weights[c]).abs());
            }
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        winner_mismatch == 0 && max_diff <= 1e-12 && elapsed <= Duration::from_secs(10),
        format!("1000 episodes × 3 queries: winner mismatches={winner_mismatch} max weight diff={max_diff:.2e}"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut max_diff, mut argmax_disagree, mut queries_seen) = (0.0f64, 0usize, 0usize);
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=8);
        let p = rng.random_range(1..=4);
        let classes = common::random_classes(&mut rng, n, 1, d);
        let queries: Vec<Vec<f64>> = (0..p).map(|_| common::random_vec(&mut rng, d)).collect();
        let flat: Vec<f64> = classes.iter().flatten().flatten().copied().collect();
        let support = Tensor::new(vec![n, d], flat).unwrap();
        let query = Tensor::new(vec![p, d], queries.concat()).unwrap();
        let run = |kind| {
            let mut g = Graph::<f64>::new();
            let s = g.leaf(support.clone());
            let q = g.leaf(query.clone());
            let out = head_probs(&mut g, HeadSpec { kind, sign: Sign::Negative }, s, q, 1).unwrap();
            g.value(out).clone()
        };
        let comp = run(HeadKind::Competitive);
        let mat = run(HeadKind::Matching);
        let proto = run(HeadKind::Prototype);
        max_diff = max_diff.max(comp.max_abs_diff(&mat));

        // the scalar reference heads must agree as well
        let supports = ClassSupports::from_nested(&classes).unwrap();
        let labelled: Vec<(&[f64], usize)> = classes.iter().enumerate().map(|(c, v)| (v[0].as_slice(), c)).collect();
        for (qi, q) in queries.iter().enumerate() {
            queries_seen += 1;
            let m = matching_attention(&labelled, q).unwrap();
            let pr = prototype_head(&supports, q).unwrap();
            for c in 0..n {
                max_diff = max_diff.max((m[c] - comp.row(qi)[c]).abs());
            }
            let a = common::argmax(comp.row(qi));
            if a != common::argmax(mat.row(qi)) || a != common::argmax(proto.row(qi)) || a != common::argmax(&pr) {
                argmax_disagree += 1;
            }
        }
    }
    outcome(
        max_diff <= 1e-12 && argmax_disagree == 0,
        format!(
            "1000 episodes, {queries_seen} queries: max |competitive − matching|={max_diff:.2e} argmax disagreements={argmax_disagree}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn aeml_linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (d, n) = (7, 5);
    let cfg = ModelConfig {
        arch: ArchSpec::Mlp { widths: vec![d, n] },
        class_support: false,
        ..Default::default()
    };
    let mut max_diff = 0.0f64;
    let mut sets = 0;
    for &t in &[2usize, 3, 5] {
        for _ in 0..100 {
            let models: Vec<ModelParams<f64>> = (0..t)
                .map(|_| {
                    let mut m = ModelParams::<f64>::build(&cfg, 1).unwrap();
                    let scale = rng.random_range(0.1..10.0);
                    for p in m.tensors_mut() {
                        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
                    }
                    m
                })
                .collect();
            let x = Tensor::new(vec![9, d], (0..9 * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let preds: Vec<Tensor<f64>> = models.iter().map(|m| m.embedding.embed(&x).unwrap()).collect();
            let ensemble = combine_predictions(&preds, EnsembleMode::ProbAvg).unwrap();
            let averaged = average_models(&models).unwrap().embedding.embed(&x).unwrap();
            max_diff = max_diff.max(ensemble.max_abs_diff(&averaged));
            sets += 1;
        }
    }
    outcome(max_diff <= 1e-10, format!("{sets} checkpoint sets, t in {{2,3,5}}: max |ensemble − averaged|={max_diff:.2e}"))
}

// ------------------------------------------------------- criteria 5, 7 and 8

fn desk_family() -> Dataset {
    synth_family(&SynthFamilyConfig::default()).unwrap()
}

fn desk_train_config(shot: usize, class_support: bool, seed: u64) -> TrainConfig {
    TrainConfig {
        shot,
        total_episodes: 20_000,
        val_period: 1000,
        val_episodes: 200,
        seed,
        model: ModelConfig {
            arch: ArchSpec::Mlp { widths: vec![8, 8] },
            channels: 16,
            class_support,
            seed,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn test_settings(shot: usize) -> EvalSettings {
    EvalSettings {
        shot,
        ..Default::default()
    }
}

struct DeskRun {
    log: TrainingLog,
    store: CheckpointStore,
    best: EvalReport,
    elapsed: Duration,
}

/// Trains and evaluates the best validation checkpoint on the test episodes.
fn desk_run(ds: &Dataset, cfg: &TrainConfig) -> DeskRun {
    let t0 = Instant::now();
    let mut store = CheckpointStore::memory();
    let out = train::<f32>(cfg, ds, &mut store).unwrap();
    let sel = select_top_t(&out.log, &store, 1).unwrap();
    let model = store.load::<f32>(sel.ids[0]).unwrap().model;
    let best = evaluate(&model, &format!("checkpoint {}", sel.ids[0]), ds, &test_settings(cfg.shot)).unwrap();
    DeskRun {
        log: out.log,
        store,
        best,
        elapsed: t0.elapsed(),
    }
}

fn desk_scale() -> Outcome {
    let ds = desk_family();
    let run = desk_run(&ds, &desk_train_config(1, true, 0));
    let nn = evaluate(&RawNearestNeighbor, "raw-1nn", &ds, &test_settings(1)).unwrap();
    let csn = run.best.mean;
    let ok = csn >= 0.20 + 0.30 && csn > nn.mean && run.elapsed <= Duration::from_secs(600);
    outcome(
        ok,
        format!(
            "csn={csn:.4}±{:.4} raw-1nn={:.4}±{:.4} margin over chance={:+.4} margin over 1-nn={:+.4} train+eval {:.1}s",
            run.best.ci95,
            nn.mean,
            nn.ci95,
            csn - 0.20,
            csn - nn.mean,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn aeml_utility() -> Outcome {
    let ds = desk_family();
    let cfg = desk_train_config(1, true, 0);
    let run = desk_run(&ds, &cfg);
    let sel = select_top_t(&run.log, &run.store, 5).unwrap();
    let cmp = compare_aeml_ensemble::<f32>(&sel, &run.store, &ds, &test_settings(1), EnsembleMode::ProbAvg).unwrap();
    let averaged = average_models(&csnet::aeml::load_selection::<f32>(&sel, &run.store).unwrap()).unwrap();
    let val_aeml = validate(&averaged, &ds, Split::Val, cfg.way, cfg.shot, cfg.queries, cfg.val_episodes, cfg.val_seed).unwrap();
    let val_best = sel.val_accs[0];
    let all_emitted = [cmp.acc_single, cmp.acc_aeml, cmp.acc_ensemble].iter().all(|a| a.is_finite());
    let ok = all_emitted && cmp.acc_aeml >= cmp.acc_single - 0.01 && val_aeml >= val_best - 0.01;
    outcome(
        ok,
        format!(
            "test: single={:.4} aeml={:.4} ensemble={:.4} (delta aeml {:+.4}, ensemble {:+.4}); val: best={val_best:.4} aeml={val_aeml:.4}",
            cmp.acc_single, cmp.acc_aeml, cmp.acc_ensemble, cmp.delta_aeml, cmp.delta_ensemble
        ),
    )
}

fn determinism() -> Outcome {
    let ds = desk_family();
    let cfg = desk_train_config(1, true, 0);
    let a = desk_run(&ds, &cfg);
    let b = desk_run(&desk_family(), &cfg);
    let logs = a.log.to_csv() == b.log.to_csv() && a.log == b.log;
    let reports = a.best.to_json() == b.best.to_json();
    outcome(
        logs && reports,
        format!(
            "training logs identical={logs} ({} records), eval reports identical={reports}",
            a.log.records().len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn ablation_direction() -> Outcome {
    let seeds = [0u64, 1, 2];
    let mut delta = [0.0f64; 2];
    let mut rows = Vec::new();
    for &seed in &seeds {
        let ds = synth_family(&SynthFamilyConfig { seed, ..Default::default() }).unwrap();
        let mut per = Vec::new();
        for (slot, shot) in [1usize, 5].into_iter().enumerate() {
            let on = desk_run(&ds, &desk_train_config(shot, true, seed)).best.mean;
            let off = desk_run(&ds, &desk_train_config(shot, false, seed)).best.mean;
            delta[slot] += (on - off) / seeds.len() as f64;
            per.push(format!("K={shot} {on:.4}/{off:.4}"));
        }
        rows.push(format!("seed {seed}: {}", per.join(" ")));
    }
    Outcome {
        pass: delta[0] >= delta[1],
        gating: false,
        detail: format!(
            "mean delta K=1 {:+.4} vs K=5 {:+.4} (with/without class support: {})",
            delta[0],
            delta[1],
            rows.join("; ")
        ),
    }
}
