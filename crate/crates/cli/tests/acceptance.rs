//! End-to-end acceptance checks. Runs sequentially under its own harness so
//! the wall-clock limits are measured without other tests competing for
//! cores, and prints one PASS/FAIL line per check.
//!
//! `cargo test -p siamts-cli --test acceptance -- 3 5` runs a subset.

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::Rng;
use siamts::analysis::{mean_std, probe_run, run_method, Pipeline, Pretext, Setting};
use siamts::augment::*;
use siamts::data::*;
use siamts::gradcheck::{run_gradcheck, GradcheckOptions};
use siamts::metrics::{kappa, PredictionSet};
use siamts::models::FeatureExtractorSpec;
use siamts::numerics::{Graph, Tensor};
use siamts::rng::seeded;
use siamts::training::*;
use siamts_cli::{cmd_run, Overrides, RunConfig};

const RUNS: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

/// 20 users split evenly into the two datasets.
fn corpus(noise_std: f64) -> ScenarioInputs<f32> {
    let params = SynthParams {
        n_users: 20,
        noise_std,
        ..SynthParams::default()
    };
    let recs = synth_generate(&params, &mut seeded(0)).unwrap();
    let (d1, d2) = split_dataset(&recs, 0.5, &mut seeded(1)).unwrap();
    ScenarioInputs::new(&d1, &d2, &SessionPlan::default(), 30, 0.5).unwrap()
}

fn kappa_or_zero(k: Option<f64>) -> f64 {
    k.unwrap_or(0.0)
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let results = run_gradcheck(0, &GradcheckOptions::default()).unwrap();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let (fast, time) = within(Duration::from_secs(60), start);
    let ok = results.iter().all(|r| r.passed) && worst < 1e-4 && fast;
    outcome(ok, format!("{} ops, worst relative error {worst:.2e}, {time}", results.len()))
}

fn stop_gradient() -> Outcome {
    let mut rng = seeded(1);
    let mut zero_cases = 0;
    let cases = 50;
    for _ in 0..cases {
        let (b, d) = (rng.random_range(1..9), rng.random_range(2..17));
        let mut r = || {
            let data = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::new(vec![b, d], data).unwrap()
        };
        let mut g = Graph::<f64>::new();
        let (p_i, z_j, p_j, z_i) = (g.param(r()), g.param(r()), g.param(r()), g.param(r()));
        let loss = simsiam_loss_node(&mut g, p_i, z_j, p_j, z_i, true).unwrap();
        let grads = g.backward(loss).unwrap();
        let zero = |id| grads.get(id).data().iter().all(|&v| v == 0.0);
        if zero(z_i) && zero(z_j) && !zero(p_i) && !zero(p_j) {
            zero_cases += 1;
        }
    }
    outcome(zero_cases == cases, format!("{zero_cases}/{cases} random batches with exactly zero target gradients"))
}

fn collapse_ablation() -> Outcome {
    let start = Instant::now();
    let params = SynthParams {
        session_len: 150,
        ..SynthParams::default()
    };
    let recs: Vec<SessionRecording<f32>> = synth_generate(&params, &mut seeded(0)).unwrap();
    let windows: Vec<_> = window_sessions(&recs, 30, 0.5)
        .unwrap()
        .into_iter()
        .map(|w| w.unlabelled())
        .collect();
    let pipeline = Pipeline::for_profile(&DatasetProfile::synth());
    let final_collapse = |sg: bool, seed: u64| {
        let cfg = TrainConfig {
            stop_gradient: sg,
            patience: pipeline.pretrain.max_epochs,
            ..pipeline.pretrain.clone().with_seed(seed)
        };
        let (_, trace) = pretrain_simsiam(
            &windows,
            &pipeline.arch,
            &pipeline.pair_augmentations,
            pipeline.composition,
            &cfg,
        )
        .unwrap();
        trace.collapse.last().copied().flatten().unwrap_or(f64::NAN)
    };
    let mut good = 0;
    let mut stats = Vec::new();
    for seed in 0..RUNS {
        let (with, without) = (final_collapse(true, seed), final_collapse(false, seed));
        if with >= 0.5 && without < 0.1 {
            good += 1;
        }
        stats.push(format!("{with:.2}/{without:.2}"));
    }
    let (fast, time) = within(Duration::from_secs(600), start);
    outcome(
        good >= 8 && fast,
        format!("{good}/{RUNS} seeds separate (with/without: {}), {time}", stats.join(" ")),
    )
}

fn brute_kappa(truth: &[usize], pred: &[usize], k: usize) -> Option<f64> {
    let mut m = vec![vec![0i128; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    let n: i128 = m.iter().flatten().sum();
    let diag: i128 = (0..k).map(|i| m[i][i]).sum();
    let chance: i128 = (0..k)
        .map(|i| m[i].iter().sum::<i128>() * m.iter().map(|r| r[i]).sum::<i128>())
        .sum();
    (chance != n * n).then(|| (n * diag - chance) as f64 / (n * n - chance) as f64)
}

fn kappa_oracle() -> Outcome {
    let mut rng = seeded(4);
    let mut matched = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..10);
        let n = rng.random_range(1..300);
        let skill = rng.random_range(0.0..1.0);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(skill) { t } else { rng.random_range(0..k) })
            .collect();
        let ps = PredictionSet::new(truth.clone(), pred.clone(), k).unwrap();
        if kappa(&ps).unwrap() == brute_kappa(&truth, &pred, k) {
            matched += 1;
        }
    }
    let perfect = kappa(&PredictionSet::new(vec![0, 1, 2, 1], vec![0, 1, 2, 1], 3).unwrap()).unwrap();
    let adversarial = kappa(&PredictionSet::new(vec![0, 1, 0, 1], vec![1, 0, 1, 0], 2).unwrap()).unwrap();
    outcome(
        matched == 1000 && perfect == Some(1.0) && adversarial == Some(-1.0),
        format!("{matched}/1000 exact, perfect {perfect:?}, adversarial {adversarial:?}"),
    )
}

fn label_efficiency() -> Outcome {
    let start = Instant::now();
    let inputs = corpus(1.4);
    let mut pipeline = Pipeline::for_profile(&DatasetProfile::synth());
    pipeline.classifier.initial_lr = 1e-3;
    let mean_kappa = |method: Method, fraction: f64| {
        let ks: Vec<f64> = (0..RUNS)
            .map(|r| {
                let split = make_scenario(ScenarioId::Two, &inputs, fraction, r).unwrap();
                kappa_or_zero(run_method(&pipeline, method, &split, None, r).unwrap().kappa)
            })
            .collect();
        mean_std(&ks).0
    };
    let gap = |f| mean_kappa(Method::Simsiam, f) - mean_kappa(Method::Supervised, f);
    let (g10, g20, g100) = (gap(0.1), gap(0.2), gap(1.0));
    let (fast, time) = within(Duration::from_secs(1800), start);
    outcome(
        g10 >= 0.03 && g20 >= 0.03 && g100.abs() <= 0.02 && fast,
        format!("simsiam minus supervised: {g10:+.3} at 0.1, {g20:+.3} at 0.2, {g100:+.3} at 1.0, {time}"),
    )
}

fn probe_means(inputs: &ScenarioInputs<f32>, pretext: Pretext, setting: Setting) -> f64 {
    let profile = DatasetProfile::synth();
    let pipeline = Pipeline::for_profile(&profile);
    let ks: Vec<f64> = (0..RUNS)
        .map(|r| {
            let ev = probe_run(&pipeline, pretext, inputs, &[setting], profile.probe_samples_per_user, r).unwrap();
            kappa_or_zero(ev[0].kappa)
        })
        .collect();
    mean_std(&ks).0
}

fn unseen_users() -> Outcome {
    let inputs = corpus(1.1);
    let simsiam = probe_means(&inputs, Pretext::Simsiam, Setting::Ex2);
    let random = probe_means(&inputs, Pretext::RandomInit, Setting::Ex2);
    outcome(
        simsiam >= random + 0.05,
        format!("frozen probe on unseen users: simsiam {simsiam:.3}, random init {random:.3}"),
    )
}

fn depth_sweep() -> Outcome {
    let mut inputs = corpus(1.1);
    let stride = (inputs.d1.unlabelled.len() / 64).max(1);
    inputs.d1.unlabelled = inputs.d1.unlabelled.iter().step_by(stride).take(64).cloned().collect();
    let profile = DatasetProfile::synth();
    let mut pipeline = Pipeline::for_profile(&profile);
    pipeline.pretrain.max_epochs = 2;
    let configs: [&[usize]; 5] = [&[32], &[64], &[128], &[128, 256], &[128, 256, 512, 1024, 2048]];
    let means: Vec<f64> = configs
        .iter()
        .map(|filters| {
            let mut p = pipeline.clone();
            p.arch.fe.filters = filters.to_vec();
            let ks: Vec<f64> = (0..RUNS)
                .map(|r| {
                    let ev = probe_run(&p, Pretext::Simsiam, &inputs, &[Setting::Ex1], profile.probe_samples_per_user, r)
                        .unwrap();
                    kappa_or_zero(ev[0].kappa)
                })
                .collect();
            mean_std(&ks).0
        })
        .collect();
    let deepest = means[means.len() - 1];
    let best = means.iter().copied().fold(f64::MIN, f64::max);
    let listed: Vec<String> = configs.iter().zip(&means).map(|(c, m)| format!("{c:?} {m:.3}")).collect();
    outcome(deepest < best, listed.join(", "))
}

fn window(t: usize, c: usize, data: Vec<f64>) -> Window<f64> {
    Window::new(Tensor::new(vec![t, c], data).unwrap(), Some(1), 0).unwrap()
}

fn windows(min_c: usize) -> impl Strategy<Value = Window<f64>> {
    (2usize..40, min_c..6)
        .prop_flat_map(|(t, c)| prop::collection::vec(-5.0f64..5.0, t * c).prop_map(move |d| window(t, c, d)))
}

fn sorted(x: &Window<f64>) -> Vec<f64> {
    let mut v = x.values.data().to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn check(cond: bool, what: &str) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(what.to_string()))
    }
}

fn augmentation_properties() -> Outcome {
    let cases = 128;
    let mut failures = Vec::new();
    let mut run = |name: &str, result: Result<(), String>| {
        if let Err(e) = result {
            failures.push(format!("{name}: {e}"));
        }
    };
    let runner = || TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let seeded_windows = (windows(1), any::<u64>());

    run(
        "shape",
        runner()
            .run(&seeded_windows, |(x, seed)| {
                let mut specs = vec![
                    Augmentation::Jitter { sigma: 0.5 },
                    Augmentation::RandomScaling { mu: 1.0, sigma: 0.5 },
                    Augmentation::MagnitudeWarp { knots: 4, sigma: 0.2 },
                    Augmentation::TimeWarp { knots: 4, sigma: 0.2 },
                    Augmentation::Flip,
                    Augmentation::Drop { fraction: 0.3 },
                    Augmentation::RandomSampling { keep_fraction: 1.0 },
                    Augmentation::Permutation { segments: 2 },
                    Augmentation::Negation,
                ];
                if x.channels() >= 2 {
                    specs.push(Augmentation::ChannelShuffle);
                }
                for spec in specs {
                    let out = spec.apply(&x, &mut seeded(seed)).unwrap();
                    check(out.values.shape() == x.values.shape(), spec.name())?;
                    check((out.user_id, out.session_id) == (x.user_id, x.session_id), spec.name())?;
                }
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    run(
        "involutions",
        runner()
            .run(&windows(1), |x| {
                check(flip(&flip(&x)) == x, "flip")?;
                check(negation(&negation(&x)) == x, "negation")
            })
            .map_err(|e| e.to_string()),
    );
    run(
        "multiset",
        runner()
            .run(&(windows(2), any::<u64>(), 2usize..8), |(x, seed, k)| {
                let mut rng = seeded(seed);
                check(sorted(&flip(&x)) == sorted(&x), "flip")?;
                check(sorted(&permutation(&x, k.min(x.len()), &mut rng)) == sorted(&x), "permutation")?;
                check(sorted(&channel_shuffle(&x, &mut rng)) == sorted(&x), "channel shuffle")
            })
            .map_err(|e| e.to_string()),
    );
    run(
        "zero strength",
        runner()
            .run(&seeded_windows, |(x, seed)| {
                let mut rng = seeded(seed);
                let near = |a: &Window<f64>, tol: f64| {
                    a.values.data().iter().zip(x.values.data()).all(|(p, q)| (p - q).abs() <= tol)
                };
                check(jitter(&x, 0.0, &mut rng) == x, "jitter")?;
                check(random_scaling(&x, 1.0, 0.0, &mut rng) == x, "scaling")?;
                check(near(&magnitude_warp(&x, 4, 0.0, &mut rng), 1e-12), "magnitude warp")?;
                check(near(&time_warp(&x, 4, 0.0, &mut rng), 1e-9), "time warp")
            })
            .map_err(|e| e.to_string()),
    );
    run(
        "moments",
        runner()
            .run(&(0.05f64..3.0, any::<u64>()), |(sigma, seed)| {
                let n = 50_000;
                let out = jitter(&window(n, 1, vec![0.0; n]), sigma, &mut seeded(seed));
                let d = out.values.data();
                let mean = d.iter().sum::<f64>() / n as f64;
                let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                check(mean.abs() <= 5.0 * sigma / (n as f64).sqrt(), "jitter mean")?;
                check((var / (sigma * sigma) - 1.0).abs() <= 0.05, "jitter variance")
            })
            .map_err(|e| e.to_string()),
    );
    let detail = if failures.is_empty() {
        format!("5 properties, {cases} cases each")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

fn windowing_oracle() -> Outcome {
    let mut rng = seeded(12);
    let mut modes = BTreeSet::new();
    let mut matched = 0;
    for case in 0..200 {
        let t = rng.random_range(1..40);
        let l = rng.random_range(t..t * 6 + 1);
        let overlap = match case % 3 {
            0 => 0.0,
            1 => 0.5,
            _ => rng.random_range(0.0..0.95),
        };
        if overlap == 0.0 || overlap == 0.5 {
            modes.insert((overlap * 2.0) as u8);
        }
        let rec = SessionRecording {
            user_id: 1,
            session_id: 2,
            samples: Tensor::new(vec![l, 1], (0..l).map(|i| i as f64).collect()).unwrap(),
            sample_rate: 1.0,
        };
        let starts: Vec<usize> = window_sessions(&[rec], t, overlap)
            .unwrap()
            .iter()
            .map(|w| w.values.data()[0] as usize)
            .collect();
        let stride = ((t as f64) * (1.0 - overlap)).round().max(1.0) as usize;
        let brute: Vec<usize> = (0..l).filter(|s| s % stride == 0 && s + t <= l).collect();
        if starts == brute {
            matched += 1;
        }
    }
    outcome(
        matched == 200 && modes.len() == 2,
        format!("{matched}/200 triples match, both overlap modes covered: {}", modes.len() == 2),
    )
}

const DETERMINISM: &str = r#"
methods = ["simsiam", "mtssl", "supervised", "augmented"]
fractions = [0.2, 1.0]
runs = 2
seed = 11

[synth]
n_users = 6
session_len = 120

[pipeline.pretrain]
max_epochs = 3
[pipeline.classifier]
max_epochs = 5
"#;

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = |sub: &str| {
        let o = Overrides {
            out: Some(dir.path().join(sub)),
            ..Default::default()
        };
        let cfg = RunConfig::from_toml(DETERMINISM, &o).unwrap();
        cmd_run(&cfg).unwrap();
        fs::read(dir.path().join(sub).join("report.json")).unwrap()
    };
    let (a, b) = (report("a"), report("b"));
    outcome(a == b, format!("report.json {} bytes, identical: {}", a.len(), a == b))
}

fn mtssl_baseline() -> Outcome {
    let params = SynthParams {
        n_users: 4,
        session_len: 150,
        channels: 3,
        offset: 10.0,
        noise_std: 0.5,
        ..SynthParams::default()
    };
    let recs: Vec<SessionRecording<f32>> = synth_generate(&params, &mut seeded(9)).unwrap();
    let ws: Vec<_> = window_sessions(&recs, 30, 0.5)
        .unwrap()
        .into_iter()
        .map(|w| w.unlabelled())
        .collect();
    let min = ws.iter().flat_map(|w| w.values.data().iter().copied()).fold(f32::MAX, f32::min);
    let augs = [Augmentation::Negation];
    let cfg = TrainConfig {
        initial_lr: 1e-3,
        ..TrainConfig::pretrain(5).with_seed(0)
    };
    let (model, _) = pretrain_mtssl(&ws, &FeatureExtractorSpec::new(&[8]), &augs, &cfg).unwrap();
    let head = mtssl_head_accuracy(&model, &ws, &augs, 1).unwrap()[0];

    let inputs = corpus(1.1);
    let mtssl = probe_means(&inputs, Pretext::Mtssl, Setting::Ex2);
    let random = probe_means(&inputs, Pretext::RandomInit, Setting::Ex2);
    outcome(
        min > 0.0 && head > 0.95 && mtssl >= random + 0.05,
        format!("corpus minimum {min:.2}, negation head accuracy {head:.3}, frozen probe: mtssl {mtssl:.3}, random init {random:.3}"),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Outcome); 11] = [
        ("gradient check", gradcheck),
        ("stop-gradient", stop_gradient),
        ("collapse ablation", collapse_ablation),
        ("kappa oracle", kappa_oracle),
        ("label efficiency", label_efficiency),
        ("unseen-user probe", unseen_users),
        ("extractor depth", depth_sweep),
        ("augmentation properties", augmentation_properties),
        ("windowing oracle", windowing_oracle),
        ("determinism", determinism),
        ("mtssl baseline", mtssl_baseline),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        println!(
            "acceptance {n:>2} {name:<24} {} [{:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
