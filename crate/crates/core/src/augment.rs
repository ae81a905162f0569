//! Stochastic time-series transformations.
//!
//! Each transform maps a `T x C` window (time steps by channels) to a window
//! of the same shape. Randomness always comes from the caller's generator so
//! that a seeded stream reproduces its outputs exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::normal;
use crate::scalar::Scalar;

/// Which half of a user-level split a window came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Corpus,
    Dataset1,
    Dataset2,
}

/// One model input: `values` is `T x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<S> {
    pub values: Tensor<S>,
    pub user_id: Option<u32>,
    pub session_id: u32,
    pub source: Source,
}

impl<S: Scalar> Window<S> {
    pub fn new(values: Tensor<S>, user_id: Option<u32>, session_id: u32) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape(
                "window",
                format!("expected T x C, got {:?}", values.shape()),
            ));
        }
        Ok(Window {
            values,
            user_id,
            session_id,
            source: Source::Corpus,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Tensor<S>) -> Self {
        Window {
            values,
            user_id: self.user_id,
            session_id: self.session_id,
            source: self.source,
        }
    }

    /// Drops the user label, as for an unlabelled pool.
    pub fn unlabelled(mut self) -> Self {
        self.user_id = None;
        self
    }

    fn at(&self, t: usize, c: usize) -> S {
        self.values.data()[t * self.channels() + c]
    }
}

/// A named transform with its distribution parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    /// Additive `Normal(0, sigma^2)` noise.
    Jitter { sigma: f64 },
    /// One `Normal(mu, sigma^2)` factor per channel.
    RandomScaling { mu: f64, sigma: f64 },
    /// Per-channel smooth multiplicative curve through `knots` random values.
    MagnitudeWarp { knots: usize, sigma: f64 },
    /// Smooth monotone re-timing with pinned endpoints.
    TimeWarp { knots: usize, sigma: f64 },
    Flip,
    /// Zeroes one contiguous segment covering `fraction` of the time axis.
    Drop { fraction: f64 },
    /// Keeps a random subset of time steps and re-interpolates to length `T`.
    RandomSampling { keep_fraction: f64 },
    /// Cuts the time axis into `segments` slices and shuffles their order.
    Permutation { segments: usize },
    Negation,
    ChannelShuffle,
}

/// Jitter variance used for the MusicID profile.
pub const MUSICID_JITTER_VARIANCE: f64 = 0.8;
/// Scaling variance used for the MusicID profile.
pub const MUSICID_SCALING_VARIANCE: f64 = 0.65;

impl Augmentation {
    pub fn jitter_default() -> Self {
        Augmentation::Jitter {
            sigma: MUSICID_JITTER_VARIANCE.sqrt(),
        }
    }

    pub fn scaling_default() -> Self {
        Augmentation::RandomScaling {
            mu: 1.0,
            sigma: MUSICID_SCALING_VARIANCE.sqrt(),
        }
    }

    pub fn magnitude_warp_default() -> Self {
        Augmentation::MagnitudeWarp { knots: 4, sigma: 0.2 }
    }

    pub fn time_warp_default() -> Self {
        Augmentation::TimeWarp { knots: 4, sigma: 0.2 }
    }

    pub fn drop_default() -> Self {
        Augmentation::Drop { fraction: 0.1 }
    }

    pub fn random_sampling_default() -> Self {
        Augmentation::RandomSampling { keep_fraction: 0.5 }
    }

    pub fn permutation_default() -> Self {
        Augmentation::Permutation { segments: 4 }
    }

    /// All ten transforms with default parameters.
    pub fn all_defaults() -> Vec<Augmentation> {
        vec![
            Self::jitter_default(),
            Self::scaling_default(),
            Self::magnitude_warp_default(),
            Self::random_sampling_default(),
            Augmentation::Flip,
            Self::drop_default(),
            Self::time_warp_default(),
            Augmentation::Negation,
            Augmentation::ChannelShuffle,
            Self::permutation_default(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::Jitter { .. } => "jitter",
            Augmentation::RandomScaling { .. } => "random_scaling",
            Augmentation::MagnitudeWarp { .. } => "magnitude_warp",
            Augmentation::TimeWarp { .. } => "time_warp",
            Augmentation::Flip => "flip",
            Augmentation::Drop { .. } => "drop",
            Augmentation::RandomSampling { .. } => "random_sampling",
            Augmentation::Permutation { .. } => "permutation",
            Augmentation::Negation => "negation",
            Augmentation::ChannelShuffle => "channel_shuffle",
        }
    }

    /// Parameter checks that do not depend on the window shape.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.name())));
        match *self {
            Augmentation::Jitter { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("sigma must be >= 0, got {sigma}"))
            }
            Augmentation::RandomScaling { mu, sigma }
                if !(sigma >= 0.0 && sigma.is_finite() && mu.is_finite()) =>
            {
                bad(format!("need finite mu and sigma >= 0, got ({mu}, {sigma})"))
            }
            Augmentation::MagnitudeWarp { knots, sigma } | Augmentation::TimeWarp { knots, sigma }
                if knots < 2 || !(sigma >= 0.0 && sigma.is_finite()) =>
            {
                bad(format!("need knots >= 2 and sigma >= 0, got ({knots}, {sigma})"))
            }
            Augmentation::Drop { fraction } if !(0.0..=1.0).contains(&fraction) => {
                bad(format!("fraction must lie in [0, 1], got {fraction}"))
            }
            Augmentation::RandomSampling { keep_fraction }
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) =>
            {
                bad(format!("keep_fraction must lie in (0, 1], got {keep_fraction}"))
            }
            Augmentation::Permutation { segments } if segments < 2 => {
                bad(format!("segments must be >= 2, got {segments}"))
            }
            _ => Ok(()),
        }
    }

    /// Applies the transform with fresh randomness from `rng`.
    pub fn apply<S: Scalar, R: Rng + ?Sized>(&self, x: &Window<S>, rng: &mut R) -> Result<Window<S>> {
        self.validate()?;
        let (t, c) = (x.len(), x.channels());
        match *self {
            Augmentation::Jitter { sigma } => Ok(jitter(x, sigma, rng)),
            Augmentation::RandomScaling { mu, sigma } => Ok(random_scaling(x, mu, sigma, rng)),
            Augmentation::MagnitudeWarp { knots, sigma } => Ok(magnitude_warp(x, knots, sigma, rng)),
            Augmentation::TimeWarp { knots, sigma } => Ok(time_warp(x, knots, sigma, rng)),
            Augmentation::Flip => Ok(flip(x)),
            Augmentation::Drop { fraction } => Ok(drop(x, fraction, rng)),
            Augmentation::RandomSampling { keep_fraction } => {
                if ((keep_fraction * t as f64).ceil() as usize) < 2 {
                    return Err(Error::Config(format!(
                        "random_sampling: keep_fraction {keep_fraction} keeps fewer than 2 of {t} steps"
                    )));
                }
                Ok(random_sampling(x, keep_fraction, rng))
            }
            Augmentation::Permutation { segments } => {
                if segments > t {
                    return Err(Error::Config(format!(
                        "permutation: {segments} segments for {t} time steps"
                    )));
                }
                Ok(permutation(x, segments, rng))
            }
            Augmentation::Negation => Ok(negation(x)),
            Augmentation::ChannelShuffle => {
                if c < 2 {
                    return Err(Error::Config("channel_shuffle needs at least 2 channels".into()));
                }
                Ok(channel_shuffle(x, rng))
            }
        }
    }
}

fn map_tc<S: Scalar>(x: &Window<S>, mut f: impl FnMut(usize, usize, S) -> S) -> Window<S> {
    let c = x.channels();
    let data = x
        .values
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i / c, i % c, v))
        .collect();
    x.with_values(Tensor::new(x.values.shape().to_vec(), data).expect("same shape"))
}

pub fn jitter<S: Scalar, R: Rng + ?Sized>(x: &Window<S>, sigma: f64, rng: &mut R) -> Window<S> {
    map_tc(x, |_, _, v| v + S::of(normal(rng, 0.0, sigma)))
}

pub fn random_scaling<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    mu: f64,
    sigma: f64,
    rng: &mut R,
) -> Window<S> {
    let factors: Vec<S> = (0..x.channels()).map(|_| S::of(normal(rng, mu, sigma))).collect();
    map_tc(x, |_, c, v| v * factors[c])
}

/// Natural cubic spline through equally spaced knots on `[0, span]`.
#[derive(Clone, Debug)]
pub struct CubicSpline {
    step: f64,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    pub fn new(span: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        assert!(n >= 2, "spline needs at least two knots");
        let step = span / (n - 1) as f64;
        let mut second = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives, uniform spacing:
            // M[i-1] + 4 M[i] + M[i+1] = 6 (y[i-1] - 2 y[i] + y[i+1]) / h^2
            let m = n - 2;
            let mut diag = vec![4.0; m];
            let mut rhs: Vec<f64> = (1..n - 1)
                .map(|i| 6.0 * (values[i - 1] - 2.0 * values[i] + values[i + 1]) / (step * step))
                .collect();
            for i in 1..m {
                let w = 1.0 / diag[i - 1];
                diag[i] -= w;
                rhs[i] -= w * rhs[i - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (rhs[i] - second[i + 2]) / diag[i];
            }
        }
        CubicSpline {
            step,
            values,
            second,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        if self.step == 0.0 {
            return self.values[0];
        }
        let seg = ((x / self.step).floor().max(0.0) as usize).min(n - 2);
        let x0 = seg as f64 * self.step;
        let a = (x0 + self.step - x) / self.step;
        let b = (x - x0) / self.step;
        let (y0, y1) = (self.values[seg], self.values[seg + 1]);
        let (m0, m1) = (self.second[seg], self.second[seg + 1]);
        a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * self.step * self.step / 6.0
    }
}

/// Smooth curve sampled at `0..t`, through `controls` placed uniformly on `[0, t-1]`.
pub fn warp_curve(controls: &[f64], t: usize) -> Vec<f64> {
    let span = t.saturating_sub(1) as f64;
    let spline = CubicSpline::new(span, controls.to_vec());
    (0..t).map(|i| spline.eval(i as f64)).collect()
}

/// Multiplies channel `c` by the curve through `controls[c]`.
pub fn magnitude_warp_with<S: Scalar>(x: &Window<S>, controls: &[Vec<f64>]) -> Window<S> {
    let curves: Vec<Vec<f64>> = controls.iter().map(|k| warp_curve(k, x.len())).collect();
    map_tc(x, |t, c, v| v * S::of(curves[c][t]))
}

pub fn magnitude_warp<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    knots: usize,
    sigma: f64,
    rng: &mut R,
) -> Window<S> {
    if sigma == 0.0 {
        return x.clone();
    }
    let controls: Vec<Vec<f64>> = (0..x.channels())
        .map(|_| (0..knots).map(|_| normal(rng, 1.0, sigma)).collect())
        .collect();
    magnitude_warp_with(x, &controls)
}

/// Value of channel `c` at fractional time `pos`, linearly interpolated.
fn lerp_at<S: Scalar>(x: &Window<S>, pos: f64, c: usize) -> S {
    let last = x.len() - 1;
    if pos <= 0.0 {
        return x.at(0, c);
    }
    if pos >= last as f64 {
        return x.at(last, c);
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 {
        return x.at(i, c);
    }
    let f = S::of(frac);
    x.at(i, c) * (S::one() - f) + x.at(i + 1, c) * f
}

/// Monotone remap of `0..t` onto `[0, t-1]` with pinned endpoints. Local
/// speed follows the spline through `speeds`; non-positive speeds are
/// clamped to a small floor to keep the map strictly increasing.
pub fn time_warp_path(speeds: &[f64], t: usize) -> Vec<f64> {
    if t < 2 {
        return vec![0.0; t];
    }
    let speed: Vec<f64> = warp_curve(speeds, t).into_iter().map(|s| s.max(1e-3)).collect();
    let mut path = Vec::with_capacity(t);
    let mut acc = 0.0;
    path.push(0.0);
    for i in 1..t {
        acc += 0.5 * (speed[i - 1] + speed[i]);
        path.push(acc);
    }
    let scale = (t - 1) as f64 / acc;
    for p in path.iter_mut() {
        *p *= scale;
    }
    path[t - 1] = (t - 1) as f64;
    path
}

pub fn time_warp_with<S: Scalar>(x: &Window<S>, path: &[f64]) -> Window<S> {
    map_tc(x, |t, c, _| lerp_at(x, path[t], c))
}

pub fn time_warp<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    knots: usize,
    sigma: f64,
    rng: &mut R,
) -> Window<S> {
    if sigma == 0.0 || x.len() < 2 {
        return x.clone();
    }
    let speeds: Vec<f64> = (0..knots).map(|_| normal(rng, 1.0, sigma)).collect();
    time_warp_with(x, &time_warp_path(&speeds, x.len()))
}

pub fn flip<S: Scalar>(x: &Window<S>) -> Window<S> {
    let last = x.len() - 1;
    map_tc(x, |t, c, _| x.at(last - t, c))
}

/// Zeroes rows `offset..offset + len`.
pub fn drop_segment<S: Scalar>(x: &Window<S>, offset: usize, len: usize) -> Window<S> {
    map_tc(x, |t, _, v| if t >= offset && t < offset + len { S::zero() } else { v })
}

pub fn drop<S: Scalar, R: Rng + ?Sized>(x: &Window<S>, fraction: f64, rng: &mut R) -> Window<S> {
    let t = x.len();
    let len = ((fraction * t as f64).round() as usize).min(t);
    if len == 0 {
        return x.clone();
    }
    let offset = rng.random_range(0..=t - len);
    drop_segment(x, offset, len)
}

/// Linear re-interpolation through the sorted time indices `kept`, which
/// must contain `0` and `T-1`.
pub fn resample_through<S: Scalar>(x: &Window<S>, kept: &[usize]) -> Window<S> {
    let mut seg = 0;
    let mut bounds = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        while seg + 1 < kept.len() - 1 && kept[seg + 1] <= t {
            seg += 1;
        }
        bounds.push((kept[seg], kept[(seg + 1).min(kept.len() - 1)]));
    }
    map_tc(x, |t, c, _| {
        let (a, b) = bounds[t];
        if a == b || t == a {
            return x.at(a, c);
        }
        if t == b {
            return x.at(b, c);
        }
        // (x_a (b - t) + x_b (t - a)) / (b - a) keeps linear inputs exact.
        let (wa, wb, span) = (S::of((b - t) as f64), S::of((t - a) as f64), S::of((b - a) as f64));
        (x.at(a, c) * wa + x.at(b, c) * wb) / span
    })
}

pub fn random_sampling<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    keep_fraction: f64,
    rng: &mut R,
) -> Window<S> {
    let t = x.len();
    let keep = ((keep_fraction * t as f64).ceil() as usize).clamp(2.min(t), t);
    if keep >= t {
        return x.clone();
    }
    let mut interior: Vec<usize> = (1..t - 1).collect();
    interior.shuffle(rng);
    let mut kept: Vec<usize> = interior[..keep - 2].to_vec();
    kept.push(0);
    kept.push(t - 1);
    kept.sort_unstable();
    resample_through(x, &kept)
}

/// Boundaries of `segments` contiguous near-equal slices of `0..t`.
pub fn segment_bounds(t: usize, segments: usize) -> Vec<(usize, usize)> {
    let base = t / segments;
    let extra = t % segments;
    let mut start = 0;
    (0..segments)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let s = (start, start + len);
            start += len;
            s
        })
        .collect()
}

/// Concatenates slices in the given `order`.
pub fn permute_segments<S: Scalar>(x: &Window<S>, segments: usize, order: &[usize]) -> Window<S> {
    let bounds = segment_bounds(x.len(), segments);
    let c = x.channels();
    let mut data = Vec::with_capacity(x.values.len());
    for &k in order {
        let (a, b) = bounds[k];
        data.extend_from_slice(&x.values.data()[a * c..b * c]);
    }
    x.with_values(Tensor::new(x.values.shape().to_vec(), data).expect("same shape"))
}

pub fn permutation<S: Scalar, R: Rng + ?Sized>(x: &Window<S>, segments: usize, rng: &mut R) -> Window<S> {
    let mut order: Vec<usize> = (0..segments).collect();
    order.shuffle(rng);
    permute_segments(x, segments, &order)
}

pub fn negation<S: Scalar>(x: &Window<S>) -> Window<S> {
    map_tc(x, |_, _, v| -v)
}

/// Output column `c` is input column `perm[c]`.
pub fn shuffle_channels<S: Scalar>(x: &Window<S>, perm: &[usize]) -> Window<S> {
    map_tc(x, |t, c, _| x.at(t, perm[c]))
}

pub fn channel_shuffle<S: Scalar, R: Rng + ?Sized>(x: &Window<S>, rng: &mut R) -> Window<S> {
    let mut perm: Vec<usize> = (0..x.channels()).collect();
    perm.shuffle(rng);
    shuffle_channels(x, &perm)
}

/// How a list of transforms produces one view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Every transform, in listed order.
    #[default]
    Sequential,
    /// One transform picked uniformly per view.
    PickOne,
}

fn view<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    specs: &[Augmentation],
    mode: Composition,
    rng: &mut R,
) -> Result<Window<S>> {
    match mode {
        Composition::Sequential => {
            let mut out = x.clone();
            for s in specs {
                out = s.apply(&out, rng)?;
            }
            Ok(out)
        }
        Composition::PickOne => {
            let k = rng.random_range(0..specs.len());
            specs[k].apply(x, rng)
        }
    }
}

/// Two independently augmented views of `x`.
pub fn sample_positive_pair<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    specs: &[Augmentation],
    mode: Composition,
    rng: &mut R,
) -> Result<(Window<S>, Window<S>)> {
    if specs.is_empty() {
        return Err(Error::Config("positive pairs need at least one augmentation".into()));
    }
    let a = view(x, specs, mode, rng)?;
    let b = view(x, specs, mode, rng)?;
    Ok((a, b))
}

/// Probability that a multi-task example has its transform applied.
pub const MTSSL_APPLY_PROBABILITY: f64 = 0.5;

/// `(spec(x), 1)` with probability one half, else `(x, 0)`.
pub fn mtssl_example<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    spec: &Augmentation,
    rng: &mut R,
) -> Result<(Window<S>, u8)> {
    let apply = rng.random_bool(MTSSL_APPLY_PROBABILITY);
    mtssl_example_forced(x, spec, apply, rng)
}

/// As [`mtssl_example`] with the apply decision fixed.
pub fn mtssl_example_forced<S: Scalar, R: Rng + ?Sized>(
    x: &Window<S>,
    spec: &Augmentation,
    apply: bool,
    rng: &mut R,
) -> Result<(Window<S>, u8)> {
    if apply {
        Ok((spec.apply(x, rng)?, 1))
    } else {
        Ok((x.clone(), 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn win(t: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> Window<f64> {
        let data: Vec<f64> = (0..t * c).map(|i| f(i / c, i % c)).collect();
        Window::new(Tensor::new(vec![t, c], data).unwrap(), Some(3), 7).unwrap()
    }

    #[test]
    fn flip_small() {
        let x = win(3, 1, |t, _| (t + 1) as f64);
        assert_eq!(flip(&x).values.data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn constant_spline_scales() {
        let x = win(10, 2, |t, c| (t * 2 + c) as f64 - 4.5);
        let out = magnitude_warp_with(&x, &[vec![2.0; 4], vec![2.0; 4]]);
        for (a, b) in out.values.data().iter().zip(x.values.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_hits_knots() {
        let controls = [0.7, 1.3, 0.9, 1.1, 1.05];
        let spline = CubicSpline::new(28.0, controls.to_vec());
        for (i, &v) in controls.iter().enumerate() {
            assert!((spline.eval(i as f64 * 7.0) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn drop_counts_zeros() {
        let x = win(20, 3, |t, c| 1.0 + t as f64 + c as f64);
        let mut rng = seeded(1);
        let out = drop(&x, 0.25, &mut rng);
        let zeros = out.values.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 5 * 3);
        assert!(drop(&x, 1.0, &mut rng).values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_identity_order() {
        let x = win(10, 2, |t, c| (t * 3 + c) as f64);
        assert_eq!(permute_segments(&x, 3, &[0, 1, 2]), x);
        assert_eq!(segment_bounds(10, 3), vec![(0, 4), (4, 7), (7, 10)]);
    }

    #[test]
    fn forced_mtssl() {
        let x = win(5, 2, |t, c| t as f64 - c as f64);
        let mut rng = seeded(0);
        let (w, y) = mtssl_example_forced(&x, &Augmentation::Negation, false, &mut rng).unwrap();
        assert_eq!((w, y), (x.clone(), 0));
        let (w, y) = mtssl_example_forced(&x, &Augmentation::Negation, true, &mut rng).unwrap();
        assert_eq!(y, 1);
        assert_eq!(w, negation(&x));
    }

    #[test]
    fn empty_pair_specs_rejected() {
        let x = win(5, 2, |t, _| t as f64);
        let mut rng = seeded(0);
        assert!(sample_positive_pair(&x, &[], Composition::Sequential, &mut rng).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let x = win(5, 1, |t, _| t as f64);
        let mut rng = seeded(0);
        assert!(Augmentation::Drop { fraction: 1.5 }.apply(&x, &mut rng).is_err());
        assert!(Augmentation::Permutation { segments: 6 }.apply(&x, &mut rng).is_err());
        assert!(Augmentation::ChannelShuffle.apply(&x, &mut rng).is_err());
        assert!(Augmentation::MagnitudeWarp { knots: 1, sigma: 0.2 }.apply(&x, &mut rng).is_err());
        assert!(Augmentation::RandomSampling { keep_fraction: 0.1 }.apply(&x, &mut rng).is_err());
    }

    #[test]
    fn spec_serializes_with_kind_tag() {
        let s = serde_json::to_string(&Augmentation::Jitter { sigma: 0.5 }).unwrap();
        assert_eq!(s, r#"{"kind":"jitter","sigma":0.5}"#);
        let back: Augmentation = serde_json::from_str(r#"{"kind":"flip"}"#).unwrap();
        assert_eq!(back, Augmentation::Flip);
    }
}
