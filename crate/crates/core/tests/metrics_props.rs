use rand::Rng;
use siamts::metrics::*;
use siamts::numerics::Tensor;
use siamts::rng::seeded;

/// Confusion-matrix kappa in exact integer arithmetic, rounded once.
fn brute_kappa(truth: &[usize], pred: &[usize], k: usize) -> Option<f64> {
    let mut m = vec![vec![0i128; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    let n: i128 = m.iter().flatten().sum();
    let diag: i128 = (0..k).map(|i| m[i][i]).sum();
    let rows: Vec<i128> = m.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<i128> = (0..k).map(|j| m.iter().map(|r| r[j]).sum()).collect();
    let chance: i128 = rows.iter().zip(&cols).map(|(a, b)| a * b).sum();
    if chance == n * n {
        None
    } else {
        Some((n * diag - chance) as f64 / (n * n - chance) as f64)
    }
}

fn random_set<R: Rng>(rng: &mut R) -> (Vec<usize>, Vec<usize>, usize) {
    let k = rng.random_range(1..8);
    let n = rng.random_range(1..200);
    let skill = rng.random_range(0.0..1.0);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let pred = truth
        .iter()
        .map(|&t| if rng.random_bool(skill) { t } else { rng.random_range(0..k) })
        .collect();
    (truth, pred, k)
}

#[test]
fn kappa_matches_confusion_matrix_oracle() {
    let mut rng = seeded(2024);
    for _ in 0..1000 {
        let (t, p, k) = random_set(&mut rng);
        let ps = PredictionSet::new(t.clone(), p.clone(), k).unwrap();
        assert_eq!(kappa(&ps).unwrap(), brute_kappa(&t, &p, k), "{t:?} {p:?}");
    }
}

#[test]
fn kappa_reference_values() {
    let perfect = PredictionSet::new(vec![0, 1, 2, 2, 1], vec![0, 1, 2, 2, 1], 3).unwrap();
    assert_eq!(kappa(&perfect).unwrap(), Some(1.0));
    let adversarial = PredictionSet::new(vec![0, 1, 0, 1], vec![1, 0, 1, 0], 2).unwrap();
    assert_eq!(kappa(&adversarial).unwrap(), Some(-1.0));
}

#[test]
fn kappa_is_invariant_to_relabeling_and_order() {
    let mut rng = seeded(9);
    for _ in 0..200 {
        let (t, p, k) = random_set(&mut rng);
        let base = kappa(&PredictionSet::new(t.clone(), p.clone(), k).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let rt: Vec<usize> = t.iter().map(|&y| perm[y]).collect();
        let rp: Vec<usize> = p.iter().map(|&y| perm[y]).collect();
        assert_eq!(kappa(&PredictionSet::new(rt, rp, k).unwrap()).unwrap(), base);
        let (rt, rp): (Vec<usize>, Vec<usize>) = t.iter().zip(&p).rev().map(|(a, b)| (*a, *b)).unzip();
        assert_eq!(kappa(&PredictionSet::new(rt, rp, k).unwrap()).unwrap(), base);
    }
}

#[test]
fn random_guessing_has_near_zero_kappa() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut rng = seeded(seed);
        let n = 10_000;
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        total += kappa(&PredictionSet::new(t, p, 4).unwrap()).unwrap().unwrap();
    }
    assert!((total / 10.0).abs() < 0.05);
}

#[test]
fn isotropic_embeddings_score_near_one() {
    let mut rng = seeded(3);
    let data: Vec<f64> = (0..1024 * 64).map(|_| siamts::rng::normal(&mut rng, 0.0, 1.0)).collect();
    let s = collapse_stat(&Tensor::new(vec![1024, 64], data).unwrap()).unwrap();
    assert!((0.9..=1.1).contains(&s), "{s}");
}

#[test]
fn collapse_stat_ignores_positive_rescaling() {
    let mut rng = seeded(4);
    let data: Vec<f64> = (0..50 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scaled: Vec<f64> = data
        .chunks(8)
        .flat_map(|r| {
            let s = rng.random_range(0.01..100.0);
            r.iter().map(move |v| v * s).collect::<Vec<_>>()
        })
        .collect();
    let a = collapse_stat(&Tensor::new(vec![50, 8], data).unwrap()).unwrap();
    let b = collapse_stat(&Tensor::new(vec![50, 8], scaled).unwrap()).unwrap();
    assert!((a - b).abs() < 1e-12);
}
