//! Synthetic multi-user corpus: per-user sinusoid mixtures.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SessionRecording;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::normal;
use crate::scalar::Scalar;

/// Generator settings. Frequencies are in cycles per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_users: usize,
    pub sessions_per_user: usize,
    pub session_len: usize,
    pub channels: usize,
    /// Sinusoids per user.
    pub components: usize,
    /// Size of the frequency pool users draw their components from.
    pub frequencies: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    /// Relative standard deviation of each component's amplitude per session.
    pub session_jitter: f64,
    /// Log-scale standard deviation of each channel's gain per session.
    pub channel_jitter: f64,
    /// White noise added after the channel gains.
    pub noise_std: f64,
    /// Constant added to every sample.
    pub offset: f64,
    pub sample_rate: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_users: 10,
            sessions_per_user: 8,
            session_len: 300,
            channels: 8,
            components: 3,
            frequencies: 6,
            freq_min: 0.03,
            freq_max: 0.45,
            session_jitter: 0.3,
            channel_jitter: 0.0,
            noise_std: 1.1,
            offset: 0.0,
            sample_rate: 1.0,
        }
    }
}

impl SynthParams {
    pub fn new(n_users: usize, sessions_per_user: usize, session_len: usize, channels: usize) -> Self {
        SynthParams {
            n_users,
            sessions_per_user,
            session_len,
            channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0
            || self.sessions_per_user == 0
            || self.session_len == 0
            || self.channels == 0
            || self.components == 0
            || self.frequencies < self.components
        {
            return Err(Error::Config(format!(
                "synthetic corpus sizes must all be at least 1: {self:?}"
            )));
        }
        if !(0.0 <= self.freq_min && self.freq_min < self.freq_max && self.freq_max <= 0.5) {
            return Err(Error::Config(format!(
                "frequency band [{}, {}] must lie inside [0, 0.5]",
                self.freq_min, self.freq_max
            )));
        }
        if self.noise_std < 0.0 || self.session_jitter < 0.0 || self.channel_jitter < 0.0 {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

struct UserSignature {
    freqs: Vec<f64>,
    /// `[component][channel]`
    amps: Vec<Vec<f64>>,
    phases: Vec<Vec<f64>>,
}

/// All `k`-element subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Draws a corpus. The band holds a pool of evenly spaced frequencies; each
/// user gets `components` of them and its own amplitude and phase per
/// channel. A pool of at least `n_users * components` frequencies is dealt
/// out disjointly; a smaller one hands out distinct subsets while they last.
pub fn synth_generate<S: Scalar, R: Rng + ?Sized>(
    params: &SynthParams,
    rng: &mut R,
) -> Result<Vec<SessionRecording<S>>> {
    params.validate()?;
    let (nu, k, c) = (params.n_users, params.components, params.channels);
    let pool: Vec<f64> = (0..params.frequencies)
        .map(|i| {
            params.freq_min + (params.freq_max - params.freq_min) * (i as f64 + 0.5) / params.frequencies as f64
        })
        .collect();
    let mut combos = if params.frequencies >= nu * k {
        let mut idx: Vec<usize> = (0..params.frequencies).collect();
        idx.shuffle(rng);
        idx[..nu * k].chunks(k).map(|c| c.to_vec()).collect()
    } else {
        subsets(params.frequencies, k)
    };
    combos.shuffle(rng);
    let users: Vec<UserSignature> = (0..nu)
        .map(|u| {
            let freqs = combos[u % combos.len()].iter().map(|&i| pool[i]).collect();
            let amps = (0..k)
                .map(|_| (0..c).map(|_| rng.random_range(0.3..1.5)).collect())
                .collect();
            let phases = (0..k)
                .map(|_| (0..c).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
                .collect();
            UserSignature { freqs, amps, phases }
        })
        .collect();

    let mut out = Vec::with_capacity(nu * params.sessions_per_user);
    for (u, sig) in users.iter().enumerate() {
        for s in 0..params.sessions_per_user {
            let gains: Vec<f64> = (0..k)
                .map(|_| normal(rng, 1.0, params.session_jitter).max(0.05))
                .collect();
            let channel_gains: Vec<f64> = (0..c)
                .map(|_| normal(rng, 0.0, params.channel_jitter).exp())
                .collect();
            let start = rng.random_range(0.0..1000.0);
            let l = params.session_len;
            let mut data = Vec::with_capacity(l * c);
            for t in 0..l {
                let time = start + t as f64;
                for ch in 0..c {
                    let mut v = 0.0;
                    for j in 0..k {
                        v += gains[j] * sig.amps[j][ch] * (2.0 * PI * sig.freqs[j] * time + sig.phases[j][ch]).sin();
                    }
                    v = params.offset + channel_gains[ch] * v + normal(rng, 0.0, params.noise_std);
                    data.push(S::of(v));
                }
            }
            out.push(SessionRecording {
                user_id: u as u32,
                session_id: (u * params.sessions_per_user + s) as u32,
                samples: Tensor::new(vec![l, c], data)?,
                sample_rate: params.sample_rate,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn same_seed_same_corpus() {
        let p = SynthParams::new(3, 2, 40, 2);
        let a: Vec<SessionRecording<f64>> = synth_generate(&p, &mut seeded(5)).unwrap();
        let b: Vec<SessionRecording<f64>> = synth_generate(&p, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        let c: Vec<SessionRecording<f64>> = synth_generate(&p, &mut seeded(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_ids() {
        let p = SynthParams::new(10, 8, 50, 3);
        let recs: Vec<SessionRecording<f32>> = synth_generate(&p, &mut seeded(0)).unwrap();
        assert_eq!(recs.len(), 80);
        let mut ids: Vec<u32> = recs.iter().map(|r| r.session_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 80);
        assert!(recs.iter().all(|r| r.samples.shape() == [50, 3]));
    }

    #[test]
    fn rejects_empty_sizes() {
        assert!(synth_generate::<f64, _>(&SynthParams::new(0, 1, 1, 1), &mut seeded(0)).is_err());
    }
}
