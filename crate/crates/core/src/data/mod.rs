//! Session recordings, windowing and the user/session split machinery.

mod io;
mod synth;

pub use io::{load_corpus, read_binary, read_csv, save_corpus, write_binary, write_csv, CorpusFormat};
pub use synth::{synth_generate, SynthParams};

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Augmentation, Source, Window};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{mix, stream};
use crate::scalar::Scalar;

/// One continuous recording of one user: `samples` is `L x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecording<S> {
    pub user_id: u32,
    pub session_id: u32,
    pub samples: Tensor<S>,
    pub sample_rate: f64,
}

impl<S: Scalar> SessionRecording<S> {
    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }
}

/// Sorted distinct user ids.
pub fn users_of<S: Scalar>(recs: &[SessionRecording<S>]) -> Vec<u32> {
    let mut u: Vec<u32> = recs.iter().map(|r| r.user_id).collect();
    u.sort_unstable();
    u.dedup();
    u
}

/// Per-dataset defaults: input shape, pre-training length, augmentations
/// and the extractor configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub window_len: usize,
    pub channels: usize,
    pub pretrain_epochs: usize,
    pub pair_augmentations: Vec<Augmentation>,
    pub mtssl_augmentations: Vec<Augmentation>,
    pub fe_filters: Vec<usize>,
    pub projector: Vec<usize>,
    pub predictor: Vec<usize>,
    pub pretrain_lr: f64,
    /// Standardize hidden activations of the projector and predictor.
    pub standardize_hidden: bool,
    pub pretrain_weight_decay: f64,
    pub classifier_batch_size: usize,
    pub classifier_patience: usize,
    /// Labelled windows per user in the frozen-extractor probes.
    pub probe_samples_per_user: usize,
}

impl DatasetProfile {
    pub fn musicid() -> Self {
        DatasetProfile {
            name: "musicid".into(),
            window_len: 30,
            channels: 24,
            pretrain_epochs: 30,
            pair_augmentations: vec![Augmentation::scaling_default(), Augmentation::jitter_default()],
            mtssl_augmentations: Augmentation::all_defaults(),
            fe_filters: vec![128, 256],
            projector: vec![512, 512],
            predictor: vec![8196, 8196, 8196, 4096, 2048, 512],
            pretrain_lr: 3e-5,
            standardize_hidden: false,
            pretrain_weight_decay: 0.01,
            classifier_batch_size: 32,
            classifier_patience: 5,
            probe_samples_per_user: 60,
        }
    }

    pub fn mmi() -> Self {
        DatasetProfile {
            name: "mmi".into(),
            window_len: 128,
            channels: 40,
            pretrain_epochs: 10,
            pair_augmentations: vec![Augmentation::scaling_default(), Augmentation::Flip],
            mtssl_augmentations: vec![
                Augmentation::scaling_default(),
                Augmentation::magnitude_warp_default(),
                Augmentation::time_warp_default(),
                Augmentation::Negation,
            ],
            fe_filters: vec![48, 96],
            projector: vec![512, 512],
            predictor: vec![8196, 8196, 8196, 4096, 2048, 512],
            pretrain_lr: 3e-5,
            standardize_hidden: false,
            pretrain_weight_decay: 0.01,
            classifier_batch_size: 32,
            classifier_patience: 5,
            probe_samples_per_user: 300,
        }
    }

    /// Desk-scale profile for the synthetic corpus.
    pub fn synth() -> Self {
        DatasetProfile {
            name: "synth".into(),
            window_len: 30,
            channels: 8,
            pretrain_epochs: 30,
            pair_augmentations: vec![Augmentation::scaling_default(), Augmentation::jitter_default()],
            mtssl_augmentations: Augmentation::all_defaults(),
            fe_filters: vec![32, 64],
            projector: vec![64, 64],
            predictor: vec![128, 64],
            pretrain_lr: 3e-3,
            standardize_hidden: true,
            pretrain_weight_decay: 1e-3,
            classifier_batch_size: 8,
            classifier_patience: 10,
            probe_samples_per_user: 18,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "musicid" => Ok(Self::musicid()),
            "mmi" => Ok(Self::mmi()),
            "synth" => Ok(Self::synth()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected musicid, mmi or synth)"
            ))),
        }
    }
}

/// Start offsets of length-`t` windows in a length-`l` recording.
pub fn window_offsets(l: usize, t: usize, stride: usize) -> Vec<usize> {
    if t == 0 || stride == 0 || l < t {
        return Vec::new();
    }
    (0..=(l - t) / stride).map(|i| i * stride).collect()
}

/// Window stride for a fractional overlap: `round(T * (1 - overlap))`, at least 1.
pub fn stride_for(t: usize, overlap: f64) -> usize {
    ((t as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Cuts every recording into length-`t` windows. Windows never cross a
/// session boundary; sessions shorter than `t` are skipped with a warning.
pub fn window_sessions<S: Scalar>(
    recs: &[SessionRecording<S>],
    t: usize,
    overlap: f64,
) -> Result<Vec<Window<S>>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if t == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let stride = stride_for(t, overlap);
    let mut out = Vec::new();
    for r in recs {
        if r.len() < t {
            warn!(
                "session {} of user {} has {} samples, shorter than window {t}; skipped",
                r.session_id,
                r.user_id,
                r.len()
            );
            continue;
        }
        let c = r.channels();
        for off in window_offsets(r.len(), t, stride) {
            let values = Tensor::new(vec![t, c], r.samples.data()[off * c..(off + t) * c].to_vec())?;
            out.push(Window::new(values, Some(r.user_id), r.session_id)?);
        }
    }
    Ok(out)
}

/// User-level partition into Dataset 1 (`floor(fraction * n_users)` users)
/// and Dataset 2 (the rest).
pub fn split_dataset<S: Scalar, R: Rng + ?Sized>(
    recs: &[SessionRecording<S>],
    fraction_d1: f64,
    rng: &mut R,
) -> Result<(Vec<SessionRecording<S>>, Vec<SessionRecording<S>>)> {
    let mut users = users_of(recs);
    if users.len() < 2 {
        return Err(Error::Data(format!("need at least 2 users to split, got {}", users.len())));
    }
    let n1 = (fraction_d1 * users.len() as f64 + 1e-9).floor() as usize;
    if n1 == 0 || n1 >= users.len() {
        return Err(Error::Config(format!(
            "fraction {fraction_d1} puts {n1} of {} users in Dataset 1",
            users.len()
        )));
    }
    users.shuffle(rng);
    let d1_users: Vec<u32> = users[..n1].to_vec();
    let (mut d1, mut d2) = (Vec::new(), Vec::new());
    for r in recs {
        if d1_users.contains(&r.user_id) {
            d1.push(r.clone());
        } else {
            d2.push(r.clone());
        }
    }
    Ok((d1, d2))
}

/// How each user's sessions are divided. Sessions are taken in ascending
/// id order: unlabelled first, then labelled, validation and test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub labelled: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SessionPlan {
    fn default() -> Self {
        SessionPlan {
            labelled: 2,
            validation: 1,
            test: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionRole {
    Unlabelled,
    Labelled,
    Validation,
    Test,
}

/// Windows of one dataset grouped by session role. Training pools use the
/// overlapping stride, validation and test windows do not overlap.
#[derive(Clone, Debug, Default)]
pub struct RolePools<S> {
    pub unlabelled: Vec<Window<S>>,
    pub labelled: Vec<Window<S>>,
    pub validation: Vec<Window<S>>,
    pub test: Vec<Window<S>>,
    pub users: Vec<u32>,
}

pub fn assign_roles<S: Scalar>(
    recs: &[SessionRecording<S>],
    plan: &SessionPlan,
) -> Result<Vec<(SessionRole, SessionRecording<S>)>> {
    let mut by_user: BTreeMap<u32, Vec<&SessionRecording<S>>> = BTreeMap::new();
    for r in recs {
        by_user.entry(r.user_id).or_default().push(r);
    }
    let needed = plan.labelled + plan.validation + plan.test;
    let mut out = Vec::with_capacity(recs.len());
    for (user, mut sessions) in by_user {
        if sessions.len() < needed {
            return Err(Error::Data(format!(
                "user {user} has {} sessions, plan needs {needed}",
                sessions.len()
            )));
        }
        sessions.sort_by_key(|r| r.session_id);
        let n_unl = sessions.len() - needed;
        for (i, r) in sessions.into_iter().enumerate() {
            let role = if i < n_unl {
                SessionRole::Unlabelled
            } else if i < n_unl + plan.labelled {
                SessionRole::Labelled
            } else if i < n_unl + plan.labelled + plan.validation {
                SessionRole::Validation
            } else {
                SessionRole::Test
            };
            out.push((role, r.clone()));
        }
    }
    Ok(out)
}

pub fn role_pools<S: Scalar>(
    recs: &[SessionRecording<S>],
    plan: &SessionPlan,
    window_len: usize,
    train_overlap: f64,
    source: Source,
) -> Result<RolePools<S>> {
    let roles = assign_roles(recs, plan)?;
    let pick = |role: SessionRole| -> Vec<SessionRecording<S>> {
        roles.iter().filter(|(r, _)| *r == role).map(|(_, s)| s.clone()).collect()
    };
    let tag = |ws: Vec<Window<S>>| -> Vec<Window<S>> {
        ws.into_iter()
            .map(|mut w| {
                w.source = source;
                w
            })
            .collect()
    };
    Ok(RolePools {
        unlabelled: tag(window_sessions(&pick(SessionRole::Unlabelled), window_len, train_overlap)?)
            .into_iter()
            .map(Window::unlabelled)
            .collect(),
        labelled: tag(window_sessions(&pick(SessionRole::Labelled), window_len, train_overlap)?),
        validation: tag(window_sessions(&pick(SessionRole::Validation), window_len, 0.0)?),
        test: tag(window_sessions(&pick(SessionRole::Test), window_len, 0.0)?),
        users: users_of(recs),
    })
}

/// Keeps `round(fraction * n_u)` windows of each user `u`. The per-user
/// order is a seeded shuffle that does not depend on `fraction`, so smaller
/// fractions select subsets of larger ones.
pub fn label_subset<S: Scalar>(windows: &[Window<S>], fraction: f64, seed: u64) -> Result<Vec<Window<S>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let mut by_user: BTreeMap<u32, Vec<&Window<S>>> = BTreeMap::new();
    for w in windows {
        let u = w
            .user_id
            .ok_or_else(|| Error::Data("labelled pool contains an unlabelled window".into()))?;
        by_user.entry(u).or_default().push(w);
    }
    let mut out = Vec::new();
    let mut empty = Vec::new();
    for (u, mut ws) in by_user {
        let keep = (fraction * ws.len() as f64).round() as usize;
        if keep == 0 {
            empty.push(u);
            continue;
        }
        let mut rng = stream(mix(seed, u as u64), 0);
        ws.shuffle(&mut rng);
        out.extend(ws[..keep].iter().map(|w| (*w).clone()));
    }
    if !empty.is_empty() {
        return Err(Error::EmptyUsers(empty));
    }
    Ok(out)
}

/// Keeps at most `per_user` windows per user (seeded, nested like [`label_subset`]).
pub fn per_user_subset<S: Scalar>(windows: &[Window<S>], per_user: usize, seed: u64) -> Result<Vec<Window<S>>> {
    let mut by_user: BTreeMap<u32, Vec<&Window<S>>> = BTreeMap::new();
    for w in windows {
        let u = w
            .user_id
            .ok_or_else(|| Error::Data("labelled pool contains an unlabelled window".into()))?;
        by_user.entry(u).or_default().push(w);
    }
    let mut out = Vec::new();
    for (u, mut ws) in by_user {
        let mut rng = stream(mix(seed, u as u64), 0);
        ws.shuffle(&mut rng);
        out.extend(ws.iter().take(per_user).map(|w| (*w).clone()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    /// Unlabelled data from other users, labels for the target users.
    #[serde(rename = "1")]
    One,
    /// Unlabelled and labelled data from the same users.
    #[serde(rename = "2")]
    Two,
    /// Initial users with unlabelled and labelled data, plus new labelled users.
    #[serde(rename = "3")]
    Three,
}

impl ScenarioId {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(ScenarioId::One),
            2 => Ok(ScenarioId::Two),
            3 => Ok(ScenarioId::Three),
            _ => Err(Error::Config(format!("scenario must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            ScenarioId::One => 1,
            ScenarioId::Two => 2,
            ScenarioId::Three => 3,
        }
    }
}

/// Data routed to each stage of one scenario.
#[derive(Clone, Debug)]
pub struct ScenarioSplit<S> {
    pub scenario: ScenarioId,
    /// Pre-training pool; carries no user ids.
    pub unlabelled: Vec<Window<S>>,
    pub train: Vec<Window<S>>,
    pub validation: Vec<Window<S>>,
    pub test: Vec<Window<S>>,
    /// User id of each class index.
    pub classes: Vec<u32>,
}

impl<S: Scalar> ScenarioSplit<S> {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Class index of every window under the ordering `classes`.
pub fn class_labels<S: Scalar>(windows: &[Window<S>], classes: &[u32]) -> Result<Vec<usize>> {
    windows
        .iter()
        .map(|w| {
            let u = w.user_id.ok_or_else(|| Error::Data("window has no user id".into()))?;
            classes
                .iter()
                .position(|&c| c == u)
                .ok_or_else(|| Error::Data(format!("user {u} is not a known class")))
        })
        .collect()
}

/// Inputs to [`make_scenario`] that stay fixed across label fractions.
#[derive(Clone, Debug)]
pub struct ScenarioInputs<S> {
    pub d1: RolePools<S>,
    pub d2: RolePools<S>,
}

impl<S: Scalar> ScenarioInputs<S> {
    pub fn new(
        d1: &[SessionRecording<S>],
        d2: &[SessionRecording<S>],
        plan: &SessionPlan,
        window_len: usize,
        train_overlap: f64,
    ) -> Result<Self> {
        Ok(ScenarioInputs {
            d1: role_pools(d1, plan, window_len, train_overlap, Source::Dataset1)?,
            d2: role_pools(d2, plan, window_len, train_overlap, Source::Dataset2)?,
        })
    }
}

/// Routes the two datasets into one scenario at a given label fraction.
pub fn make_scenario<S: Scalar>(
    scenario: ScenarioId,
    inputs: &ScenarioInputs<S>,
    label_fraction: f64,
    seed: u64,
) -> Result<ScenarioSplit<S>> {
    let (d1, d2) = (&inputs.d1, &inputs.d2);
    let split = match scenario {
        ScenarioId::One => ScenarioSplit {
            scenario,
            unlabelled: d1.unlabelled.clone(),
            train: label_subset(&d2.labelled, label_fraction, seed)?,
            validation: d2.validation.clone(),
            test: d2.test.clone(),
            classes: d2.users.clone(),
        },
        ScenarioId::Two => ScenarioSplit {
            scenario,
            unlabelled: d2.unlabelled.clone(),
            train: label_subset(&d2.labelled, label_fraction, seed)?,
            validation: d2.validation.clone(),
            test: d2.test.clone(),
            classes: d2.users.clone(),
        },
        ScenarioId::Three => {
            let mut train = label_subset(&d1.labelled, label_fraction, seed)?;
            train.extend(label_subset(&d2.labelled, label_fraction, seed)?);
            let mut classes = d1.users.clone();
            classes.extend(&d2.users);
            ScenarioSplit {
                scenario,
                unlabelled: d1.unlabelled.clone(),
                train,
                validation: [d1.validation.clone(), d2.validation.clone()].concat(),
                test: [d1.test.clone(), d2.test.clone()].concat(),
                classes,
            }
        }
    };
    if split.unlabelled.is_empty() {
        return Err(Error::Data(format!(
            "scenario {} has an empty unlabelled pool",
            scenario.number()
        )));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rec(user: u32, session: u32, l: usize, c: usize) -> SessionRecording<f64> {
        let data = (0..l * c).map(|i| (user * 1000 + session) as f64 + i as f64 * 1e-3).collect();
        SessionRecording {
            user_id: user,
            session_id: session,
            samples: Tensor::new(vec![l, c], data).unwrap(),
            sample_rate: 1.0,
        }
    }

    #[test]
    fn window_count_example() {
        // L=100, T=30, 50% overlap: stride 15, offsets 0..=60.
        assert_eq!(stride_for(30, 0.5), 15);
        assert_eq!(window_offsets(100, 30, 15), vec![0, 15, 30, 45, 60]);
        let ws = window_sessions(&[rec(1, 2, 100, 3)], 30, 0.5).unwrap();
        assert_eq!(ws.len(), 5);
        assert!(ws.iter().all(|w| w.user_id == Some(1) && w.session_id == 2));
        assert_eq!(window_sessions(&[rec(1, 2, 30, 3)], 30, 0.9).unwrap().len(), 1);
        assert_eq!(window_sessions(&[rec(1, 2, 90, 1)], 30, 0.0).unwrap().len(), 3);
        assert!(window_sessions(&[rec(1, 2, 10, 1)], 30, 0.0).unwrap().is_empty());
        assert!(window_sessions(&[rec(1, 2, 10, 1)], 30, 1.0).is_err());
    }

    #[test]
    fn split_counts_follow_floor() {
        let recs: Vec<_> = (0..20).map(|u| rec(u, u, 5, 1)).collect();
        let (d1, d2) = split_dataset(&recs, 1.0 / 3.0, &mut seeded(0)).unwrap();
        assert_eq!((users_of(&d1).len(), users_of(&d2).len()), (6, 14));
        let recs: Vec<_> = (0..109).map(|u| rec(u, u, 5, 1)).collect();
        let (d1, d2) = split_dataset(&recs, 1.0 / 3.0, &mut seeded(0)).unwrap();
        assert_eq!((users_of(&d1).len(), users_of(&d2).len()), (36, 73));
        assert!(split_dataset(&recs[..2], 0.2, &mut seeded(0)).is_err());
        assert!(split_dataset(&recs[..1], 0.5, &mut seeded(0)).is_err());
    }

    #[test]
    fn scenario_routing() {
        let recs: Vec<_> = (0..6u32)
            .flat_map(|u| (0..6u32).map(move |s| rec(u, u * 10 + s, 40, 2)))
            .collect();
        let (d1, d2) = split_dataset(&recs, 1.0 / 3.0, &mut seeded(3)).unwrap();
        let inputs = ScenarioInputs::new(&d1, &d2, &SessionPlan::default(), 10, 0.5).unwrap();
        let s1 = make_scenario(ScenarioId::One, &inputs, 1.0, 0).unwrap();
        let s2 = make_scenario(ScenarioId::Two, &inputs, 1.0, 0).unwrap();
        let s3 = make_scenario(ScenarioId::Three, &inputs, 1.0, 0).unwrap();
        assert_eq!(s1.n_classes(), 4);
        assert_eq!(s3.n_classes(), 6);
        assert_eq!(s2.train.len(), inputs.d2.labelled.len());
        assert!(s1.unlabelled.iter().all(|w| w.user_id.is_none() && w.source == Source::Dataset1));
        assert!(s2.unlabelled.iter().all(|w| w.source == Source::Dataset2));
        // Disjoint sessions across roles.
        for s in [&s1, &s2, &s3] {
            for w in s.validation.iter().chain(&s.test) {
                assert!(!s.train.iter().any(|t| t.session_id == w.session_id));
                assert!(!s.unlabelled.iter().any(|t| t.session_id == w.session_id));
            }
        }
        assert_eq!(class_labels(&s3.test, &s3.classes).unwrap().len(), s3.test.len());
    }

    #[test]
    fn tiny_fraction_reports_users() {
        let recs: Vec<_> = (0..3u32)
            .flat_map(|u| (0..4u32).map(move |s| rec(u, u * 10 + s, 20, 1)))
            .collect();
        let pools = role_pools(&recs, &SessionPlan::default(), 10, 0.5, Source::Corpus).unwrap();
        match label_subset(&pools.labelled, 0.01, 0) {
            Err(Error::EmptyUsers(u)) => assert_eq!(u, vec![0, 1, 2]),
            other => panic!("expected EmptyUsers, got {other:?}"),
        }
    }
}
