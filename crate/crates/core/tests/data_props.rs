use std::collections::BTreeSet;

use rand::Rng;
use siamts::augment::Window;
use siamts::data::*;
use siamts::numerics::Tensor;
use siamts::rng::seeded;
use siamts::Window64;

fn session(user: u32, id: u32, l: usize, c: usize) -> SessionRecording<f64> {
    let data = (0..l * c).map(|i| (i / c) as f64 + 0.001 * (i % c) as f64).collect();
    SessionRecording {
        user_id: user,
        session_id: id,
        samples: Tensor::new(vec![l, c], data).unwrap(),
        sample_rate: 1.0,
    }
}

/// Every start offset whose window fits, kept when it lands on the stride grid.
fn brute_offsets(l: usize, t: usize, overlap: f64) -> Vec<usize> {
    let stride = ((t as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    (0..l).filter(|s| s % stride == 0 && s + t <= l).collect()
}

#[test]
fn windowing_matches_enumeration() {
    let mut rng = seeded(11);
    let mut modes = BTreeSet::new();
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
        let rec = session(3, 9, l, 2);
        let windows = window_sessions(std::slice::from_ref(&rec), t, overlap).unwrap();
        // Row r of the session holds value r in channel 0.
        let starts: Vec<usize> = windows.iter().map(|w| w.values.data()[0] as usize).collect();
        assert_eq!(starts, brute_offsets(l, t, overlap), "L={l} T={t} overlap={overlap}");
        for w in &windows {
            assert_eq!(w.values.shape(), &[t, 2]);
            assert_eq!((w.user_id, w.session_id), (Some(3), 9));
        }
    }
    assert_eq!(modes.len(), 2);
}

#[test]
fn worked_window_examples() {
    assert_eq!(window_offsets(100, 30, stride_for(30, 0.5)), vec![0, 15, 30, 45, 60]);
    assert_eq!(window_offsets(90, 30, stride_for(30, 0.0)), vec![0, 30, 60]);
    for overlap in [0.0, 0.3, 0.5, 0.9] {
        assert_eq!(window_offsets(30, 30, stride_for(30, overlap)), vec![0]);
    }
}

#[test]
fn short_sessions_are_skipped_and_bad_overlap_rejected() {
    let recs = vec![session(0, 0, 10, 1), session(0, 1, 40, 1)];
    let w = window_sessions(&recs, 20, 0.0).unwrap();
    assert!(w.iter().all(|w| w.session_id == 1));
    assert!(window_sessions(&recs, 20, 1.0).is_err());
    assert!(window_sessions(&recs, 20, -0.1).is_err());
}

#[test]
fn windows_never_cross_sessions() {
    let recs: Vec<_> = (0..5).map(|s| session(1, s, 50 + 7 * s as usize, 3)).collect();
    for w in window_sessions(&recs, 12, 0.5).unwrap() {
        let rec = &recs[w.session_id as usize];
        let first = w.values.data()[0] as usize;
        let c = rec.channels();
        assert_eq!(w.values.data(), &rec.samples.data()[first * c..(first + 12) * c]);
    }
}

fn corpus(users: u32, sessions: u32) -> Vec<SessionRecording<f64>> {
    (0..users)
        .flat_map(|u| (0..sessions).map(move |s| session(u, u * 100 + s, 60, 2)))
        .collect()
}

#[test]
fn dataset_split_is_a_user_partition() {
    let recs = corpus(20, 2);
    for seed in 0..20 {
        let (d1, d2) = split_dataset(&recs, 0.3, &mut seeded(seed)).unwrap();
        let u1: BTreeSet<u32> = users_of(&d1).into_iter().collect();
        let u2: BTreeSet<u32> = users_of(&d2).into_iter().collect();
        assert_eq!(u1.len(), 6);
        assert!(u1.is_disjoint(&u2));
        assert_eq!(u1.len() + u2.len(), 20);
        assert_eq!(d1.len() + d2.len(), recs.len());
    }
    assert!(split_dataset(&recs, 0.01, &mut seeded(0)).is_err());
    assert!(split_dataset(&corpus(1, 4), 0.5, &mut seeded(0)).is_err());
}

fn labelled(users: u32, per_user: usize) -> Vec<Window64> {
    (0..users)
        .flat_map(|u| {
            (0..per_user).map(move |k| {
                let v = Tensor::new(vec![2, 1], vec![u as f64, k as f64]).unwrap();
                Window::new(v, Some(u), u).unwrap()
            })
        })
        .collect()
}

#[test]
fn label_subsets_are_nested_and_balanced() {
    let pool = labelled(6, 20);
    let key = |w: &Window64| (w.user_id, w.values.data()[1] as u32);
    for seed in 0..10 {
        let mut prev: Option<BTreeSet<_>> = None;
        for f in [0.1, 0.2, 0.4, 0.7, 1.0] {
            let sub = label_subset(&pool, f, seed).unwrap();
            for u in 0..6 {
                let n = sub.iter().filter(|w| w.user_id == Some(u)).count();
                assert_eq!(n, (f * 20.0_f64).round() as usize);
            }
            let keys: BTreeSet<_> = sub.iter().map(key).collect();
            if let Some(p) = &prev {
                assert!(p.is_subset(&keys));
            }
            prev = Some(keys);
        }
    }
    assert_eq!(label_subset(&pool, 1.0, 3).unwrap().len(), pool.len());
}

#[test]
fn tiny_fraction_names_starved_users() {
    let mut pool = labelled(3, 20);
    pool.retain(|w| w.user_id != Some(2) || w.values.data()[1] < 2.0);
    match label_subset(&pool, 0.1, 0) {
        Err(siamts::Error::EmptyUsers(users)) => assert_eq!(users, vec![2]),
        other => panic!("expected EmptyUsers, got {other:?}"),
    }
}

#[test]
fn scenarios_keep_sessions_apart() {
    let recs = corpus(9, 7);
    let (d1, d2) = split_dataset(&recs, 1.0 / 3.0, &mut seeded(4)).unwrap();
    let inputs = ScenarioInputs::new(&d1, &d2, &SessionPlan::default(), 20, 0.5).unwrap();
    for scenario in [ScenarioId::One, ScenarioId::Two, ScenarioId::Three] {
        let s = make_scenario(scenario, &inputs, 0.5, 1).unwrap();
        let sessions = |ws: &[Window64]| ws.iter().map(|w| w.session_id).collect::<BTreeSet<_>>();
        let held_out: BTreeSet<u32> = sessions(&s.validation).union(&sessions(&s.test)).copied().collect();
        assert!(held_out.is_disjoint(&sessions(&s.train)));
        assert!(held_out.is_disjoint(&sessions(&s.unlabelled)));
        assert!(s.unlabelled.iter().all(|w| w.user_id.is_none()));
        let expected = match scenario {
            ScenarioId::Three => 9,
            _ => 6,
        };
        assert_eq!(s.n_classes(), expected);
    }
    let s1 = make_scenario(ScenarioId::One, &inputs, 1.0, 1).unwrap();
    let s2 = make_scenario(ScenarioId::Two, &inputs, 1.0, 1).unwrap();
    assert_eq!(s2.train.len(), inputs.d2.labelled.len());
    let unl_sessions: BTreeSet<u32> = s1.unlabelled.iter().map(|w| w.session_id).collect();
    let d1_sessions: BTreeSet<u32> = d1.iter().map(|r| r.session_id).collect();
    assert!(unl_sessions.is_subset(&d1_sessions));
}

#[test]
fn noiseless_disjoint_users_are_spectrally_separable() {
    let params = SynthParams {
        n_users: 2,
        sessions_per_user: 4,
        session_len: 128,
        channels: 2,
        noise_std: 0.0,
        ..SynthParams::default()
    };
    let recs: Vec<SessionRecording<f64>> = synth_generate(&params, &mut seeded(8)).unwrap();
    // Magnitude spectrum of each channel by direct DFT.
    let spectrum = |r: &SessionRecording<f64>| -> Vec<f64> {
        let (l, c) = (r.len(), r.channels());
        let mut out = Vec::new();
        for ch in 0..c {
            for k in 1..l / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..l {
                    let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / l as f64;
                    let v = r.samples.data()[t * c + ch];
                    re += v * a.cos();
                    im += v * a.sin();
                }
                out.push((re * re + im * im).sqrt());
            }
        }
        out
    };
    let specs: Vec<Vec<f64>> = recs.iter().map(spectrum).collect();
    let mut correct = 0;
    for i in 0..recs.len() {
        let nearest = (0..recs.len())
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let d = |j: usize| specs[i].iter().zip(&specs[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        correct += usize::from(recs[nearest].user_id == recs[i].user_id);
    }
    assert_eq!(correct, recs.len());
}

#[test]
fn corpus_round_trips_through_both_formats() {
    let params = SynthParams::new(3, 2, 40, 3);
    let recs: Vec<SessionRecording<f32>> = synth_generate(&params, &mut seeded(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("c.stsd");
    save_corpus(&recs, &bin, CorpusFormat::Binary).unwrap();
    assert_eq!(load_corpus::<f32>(&bin, None).unwrap(), recs);
    let csv_dir = dir.path().join("csv");
    save_corpus(&recs, &csv_dir, CorpusFormat::Csv).unwrap();
    let mut back = load_corpus::<f32>(&csv_dir, None).unwrap();
    back.sort_by_key(|r| r.session_id);
    assert_eq!(back, recs);
}
