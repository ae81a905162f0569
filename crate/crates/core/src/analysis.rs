//! Experiment protocols: scenario runs per method, frozen-extractor probes
//! (Ex1 / Ex2) and single-variable sweeps averaged over seeded runs.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{Augmentation, Composition, Window};
use crate::data::{per_user_subset, DatasetProfile, RolePools, ScenarioId, ScenarioInputs, ScenarioSplit};
use crate::error::{Error, Result};
use crate::models::{build_feature_extractor, FeatureExtractor, FeatureExtractorSpec, MlpSpec};
use crate::rng::{mix, stream};
use crate::scalar::Scalar;
use crate::training::{
    changed_parameters, default_label_augmentations, evaluate, pretrain_mtssl, pretrain_simsiam,
    train_augmented, train_classifier, train_supervised, transfer_learn, Evaluation, LabelledData, Method,
    SimSiamArch, TrainConfig, TrainTrace,
};

/// Everything a run needs besides data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub arch: SimSiamArch,
    pub pair_augmentations: Vec<Augmentation>,
    #[serde(default)]
    pub composition: Composition,
    pub mtssl_augmentations: Vec<Augmentation>,
    pub label_augmentations: Vec<Augmentation>,
    pub pretrain: TrainConfig,
    pub classifier: TrainConfig,
}

impl Pipeline {
    pub fn for_profile(p: &DatasetProfile) -> Self {
        Pipeline {
            arch: SimSiamArch {
                fe: FeatureExtractorSpec::new(&p.fe_filters),
                projector: MlpSpec {
                    standardize_hidden: p.standardize_hidden,
                    ..MlpSpec::linear(&p.projector)
                },
                predictor: MlpSpec {
                    standardize_hidden: p.standardize_hidden,
                    ..MlpSpec::linear(&p.predictor)
                },
            },
            pair_augmentations: p.pair_augmentations.clone(),
            composition: Composition::Sequential,
            mtssl_augmentations: p.mtssl_augmentations.clone(),
            label_augmentations: default_label_augmentations(),
            pretrain: TrainConfig {
                initial_lr: p.pretrain_lr,
                weight_decay: p.pretrain_weight_decay,
                ..TrainConfig::pretrain(p.pretrain_epochs)
            },
            classifier: TrainConfig {
                batch_size: p.classifier_batch_size,
                patience: p.classifier_patience,
                ..TrainConfig::classifier()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.fe.validate()?;
        self.arch.projector.validate()?;
        self.arch.predictor.validate()?;
        if self.arch.predictor.output_width() != self.arch.projector.output_width() {
            return Err(Error::Config(format!(
                "predictor output width {} must equal projector output width {}",
                self.arch.predictor.output_width(),
                self.arch.projector.output_width()
            )));
        }
        for a in self
            .pair_augmentations
            .iter()
            .chain(&self.mtssl_augmentations)
            .chain(&self.label_augmentations)
        {
            a.validate()?;
        }
        self.pretrain.validate()?;
        self.classifier.validate()
    }
}

/// How an extractor is obtained before a probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretext {
    Simsiam,
    Mtssl,
    /// No pre-training: the untrained extractor.
    RandomInit,
}

pub struct Pretrained<S> {
    pub extractor: FeatureExtractor<S>,
    pub trace: Option<TrainTrace>,
}

/// Pre-trains (or just initializes) an extractor on `unlabelled`.
pub fn pretrain_extractor<S: Scalar>(
    pipeline: &Pipeline,
    pretext: Pretext,
    unlabelled: &[Window<S>],
    seed: u64,
) -> Result<Pretrained<S>> {
    let cfg = pipeline.pretrain.clone().with_seed(seed);
    match pretext {
        Pretext::Simsiam => {
            let (m, t) = pretrain_simsiam(
                unlabelled,
                &pipeline.arch,
                &pipeline.pair_augmentations,
                pipeline.composition,
                &cfg,
            )?;
            Ok(Pretrained {
                extractor: m.extractor,
                trace: Some(t),
            })
        }
        Pretext::Mtssl => {
            let (m, t) = pretrain_mtssl(unlabelled, &pipeline.arch.fe, &pipeline.mtssl_augmentations, &cfg)?;
            Ok(Pretrained {
                extractor: m.extractor,
                trace: Some(t),
            })
        }
        Pretext::RandomInit => {
            let first = unlabelled
                .first()
                .ok_or_else(|| Error::Data("unlabelled set is empty".into()))?;
            let fe = build_feature_extractor(
                &pipeline.arch.fe,
                first.len(),
                first.channels(),
                &mut stream(mix(seed, 1), 0),
            )?;
            Ok(Pretrained {
                extractor: fe,
                trace: None,
            })
        }
    }
}

/// Outcome of one method on one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub kappa: Option<f64>,
    pub accuracy: f64,
    pub collapse: Option<f64>,
    pub stopped_epoch: usize,
}

/// Whether `method` may run in `scenario`; transfer learning needs the
/// labelled source users that only scenario 1 provides.
pub fn method_allowed(method: Method, scenario: ScenarioId) -> Result<()> {
    if method == Method::Transfer && scenario != ScenarioId::One {
        return Err(Error::Config(format!(
            "method transfer is only defined for scenario 1, not scenario {}",
            scenario.number()
        )));
    }
    Ok(())
}

/// Runs one method on a scenario split. `transfer_source` supplies the
/// labelled Dataset-1 pools for transfer learning.
pub fn run_method<S: Scalar>(
    pipeline: &Pipeline,
    method: Method,
    split: &ScenarioSplit<S>,
    transfer_source: Option<&RolePools<S>>,
    seed: u64,
) -> Result<RunOutcome> {
    method_allowed(method, split.scenario)?;
    let data = LabelledData {
        train: &split.train,
        validation: &split.validation,
        classes: &split.classes,
    };
    let cls_cfg = TrainConfig {
        finetune_extractor: true,
        ..pipeline.classifier.clone().with_seed(mix(seed, 0xC1A5))
    };
    let (model, trace, collapse) = match method {
        Method::Simsiam | Method::Mtssl => {
            let pretext = if method == Method::Simsiam {
                Pretext::Simsiam
            } else {
                Pretext::Mtssl
            };
            let pre = pretrain_extractor(pipeline, pretext, &split.unlabelled, seed)?;
            let collapse = pre.trace.as_ref().and_then(TrainTrace::final_collapse);
            let (m, t) = train_classifier(&pre.extractor, &data, &cls_cfg)?;
            (m, t, collapse)
        }
        Method::Supervised => {
            let (m, t) = train_supervised(&data, &pipeline.arch.fe, &cls_cfg)?;
            (m, t, None)
        }
        Method::Augmented => {
            let (m, t) = train_augmented(&data, &pipeline.arch.fe, &pipeline.label_augmentations, &cls_cfg)?;
            (m, t, None)
        }
        Method::Transfer => {
            let src = transfer_source
                .ok_or_else(|| Error::Config("transfer learning needs labelled source users".into()))?;
            let source = LabelledData {
                train: &src.labelled,
                validation: &src.validation,
                classes: &src.users,
            };
            let (m, t) = transfer_learn(&source, &data, &pipeline.arch.fe, &cls_cfg)?;
            (m, t, None)
        }
    };
    let ev = evaluate(&model, &split.test, &split.classes)?;
    Ok(RunOutcome {
        kappa: ev.kappa,
        accuracy: ev.accuracy,
        collapse,
        stopped_epoch: trace.stopped_epoch,
    })
}

/// Frozen-extractor probe settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Classifier trained and tested on the pre-training users.
    Ex1,
    /// Classifier trained and tested on disjoint users.
    Ex2,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Ex1 => "ex1",
            Setting::Ex2 => "ex2",
        }
    }
}

/// Trains a classifier on a frozen extractor with `samples_per_user`
/// labelled windows per user and evaluates it on the setting's test split.
/// Pre-training data always comes from Dataset 1.
pub fn run_setting<S: Scalar>(
    setting: Setting,
    inputs: &ScenarioInputs<S>,
    extractor: &FeatureExtractor<S>,
    samples_per_user: usize,
    classifier: &TrainConfig,
    seed: u64,
) -> Result<Evaluation> {
    let pools = match setting {
        Setting::Ex1 => &inputs.d1,
        Setting::Ex2 => &inputs.d2,
    };
    let train = per_user_subset(&pools.labelled, samples_per_user, seed)?;
    let data = LabelledData {
        train: &train,
        validation: &pools.validation,
        classes: &pools.users,
    };
    let cfg = TrainConfig {
        finetune_extractor: false,
        ..classifier.clone().with_seed(mix(seed, 0xE5))
    };
    let (model, _) = train_classifier(extractor, &data, &cfg)?;
    let changed = changed_parameters(&extractor.state, &model.extractor.state);
    if !changed.is_empty() {
        return Err(Error::Data(format!("frozen extractor changed: {changed:?}")));
    }
    evaluate(&model, &pools.test, &pools.users)
}

/// Pre-trains once on Dataset 1 and probes every requested setting.
pub fn probe_run<S: Scalar>(
    pipeline: &Pipeline,
    pretext: Pretext,
    inputs: &ScenarioInputs<S>,
    settings: &[Setting],
    samples_per_user: usize,
    seed: u64,
) -> Result<Vec<Evaluation>> {
    let pre = pretrain_extractor(pipeline, pretext, &inputs.d1.unlabelled, seed)?;
    settings
        .iter()
        .map(|&s| run_setting(s, inputs, &pre.extractor, samples_per_user, &pipeline.classifier, seed))
        .collect()
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    AugmentationPair,
    FeConfig,
    PredictorDepth,
    WeightDecay,
}

/// One candidate value. Layer lists serve both `fe_config` and `predictor_depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Widths(Vec<usize>),
    Augmentations(Vec<Augmentation>),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Number(v) => format!("{v}"),
            SweepValue::Widths(w) => w.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            SweepValue::Augmentations(a) => a.iter().map(|x| x.name()).collect::<Vec<_>>().join("+"),
        }
    }
}

fn default_runs() -> usize {
    10
}

fn default_settings() -> Vec<Setting> {
    vec![Setting::Ex1, Setting::Ex2]
}

fn default_pretext() -> Pretext {
    Pretext::Simsiam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<SweepValue>,
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
    #[serde(default = "default_runs")]
    pub runs_per_point: usize,
    #[serde(default = "default_pretext")]
    pub pretext: Pretext,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::Config(format!(
                "a sweep needs at least two candidate values, got {}",
                self.values.len()
            )));
        }
        if self.runs_per_point == 0 {
            return Err(Error::Config("runs_per_point must be at least 1".into()));
        }
        if self.settings.is_empty() {
            return Err(Error::Config("a sweep needs at least one setting".into()));
        }
        Ok(())
    }

    /// `pipeline` with the swept field set to `value`; nothing else changes.
    pub fn apply(&self, pipeline: &Pipeline, value: &SweepValue) -> Result<Pipeline> {
        let mut p = pipeline.clone();
        match (self.variable, value) {
            (SweepVariable::WeightDecay, SweepValue::Number(l)) => p.pretrain.weight_decay = *l,
            (SweepVariable::FeConfig, SweepValue::Widths(w)) => p.arch.fe.filters = w.clone(),
            (SweepVariable::PredictorDepth, SweepValue::Widths(w)) => p.arch.predictor.widths = w.clone(),
            (SweepVariable::AugmentationPair, SweepValue::Augmentations(a)) => {
                if self.pretext == Pretext::Mtssl {
                    p.mtssl_augmentations = a.clone();
                } else {
                    p.pair_augmentations = a.clone();
                }
            }
            (var, v) => {
                return Err(Error::Config(format!(
                    "value {} does not fit sweep variable {var:?}",
                    v.label()
                )))
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// Per-run results of one (value, setting) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub setting: Setting,
    pub kappas: Vec<f64>,
    pub failures: Vec<String>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub profile: String,
    pub variable: SweepVariable,
    pub settings: Vec<Setting>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, value: &str, setting: Setting) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.value == value && c.setting == setting)
    }

    /// One row per candidate value, mean/std/failed columns per setting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["value".to_string()];
        for s in &self.settings {
            for col in ["mean_kappa", "std", "failed"] {
                header.push(format!("{}_{}_{col}", self.profile, s.name()));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        let mut values: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !values.contains(&c.value.as_str()) {
                values.push(&c.value);
            }
        }
        for v in values {
            let mut row = vec![format!("\"{v}\"")];
            for &s in &self.settings {
                let c = self.cell(v, s).expect("every value has every setting");
                row.push(format!("{}", c.mean));
                row.push(format!("{}", c.std));
                row.push(c.failures.len().to_string());
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// For each candidate value, `runs_per_point` independent pre-train and
/// probe runs with seeds `base_seed + i`. A failed run is recorded and left
/// out of the mean.
pub fn run_sweep<S: Scalar>(
    spec: &SweepSpec,
    pipeline: &Pipeline,
    profile: &str,
    inputs: &ScenarioInputs<S>,
    samples_per_user: usize,
    base_seed: u64,
) -> Result<SweepTable> {
    spec.validate()?;
    let pipelines = spec
        .values
        .iter()
        .map(|v| spec.apply(pipeline, v))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (value, p) in spec.values.iter().zip(&pipelines) {
        let runs: Vec<Result<Vec<Evaluation>>> = (0..spec.runs_per_point)
            .into_par_iter()
            .map(|i| probe_run(p, spec.pretext, inputs, &spec.settings, samples_per_user, base_seed + i as u64))
            .collect();
        for (k, &setting) in spec.settings.iter().enumerate() {
            let mut kappas = Vec::new();
            let mut failures = Vec::new();
            for (i, r) in runs.iter().enumerate() {
                match r {
                    Ok(evs) => match evs[k].kappa {
                        Some(kp) => kappas.push(kp),
                        None => failures.push(format!("run {i}: kappa undefined")),
                    },
                    Err(e) => failures.push(format!("run {i}: {e}")),
                }
            }
            let (mean, std) = mean_std(&kappas);
            cells.push(SweepCell {
                value: value.label(),
                setting,
                kappas,
                failures,
                mean,
                std,
            });
        }
    }
    Ok(SweepTable {
        profile: profile.to_string(),
        variable: spec.variable,
        settings: spec.settings.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_definition() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn apply_changes_only_the_swept_field() {
        let base = Pipeline::for_profile(&DatasetProfile::synth());
        let spec = SweepSpec {
            variable: SweepVariable::WeightDecay,
            values: vec![SweepValue::Number(0.1), SweepValue::Number(0.001)],
            settings: vec![Setting::Ex1],
            runs_per_point: 1,
            pretext: Pretext::Simsiam,
        };
        let p = spec.apply(&base, &spec.values[0]).unwrap();
        assert_eq!(p.pretrain.weight_decay, 0.1);
        let mut back = p.clone();
        back.pretrain.weight_decay = base.pretrain.weight_decay;
        assert_eq!(back, base);
        assert!(spec.apply(&base, &SweepValue::Widths(vec![3])).is_err());
    }

    #[test]
    fn predictor_must_end_at_projector_width() {
        let base = Pipeline::for_profile(&DatasetProfile::synth());
        let spec = SweepSpec {
            variable: SweepVariable::PredictorDepth,
            values: vec![SweepValue::Widths(vec![64]), SweepValue::Widths(vec![128, 32])],
            settings: vec![Setting::Ex1],
            runs_per_point: 1,
            pretext: Pretext::Simsiam,
        };
        assert!(spec.apply(&base, &spec.values[0]).is_ok());
        assert!(spec.apply(&base, &spec.values[1]).is_err());
    }

    #[test]
    fn transfer_only_in_scenario_one() {
        assert!(method_allowed(Method::Transfer, ScenarioId::One).is_ok());
        assert!(method_allowed(Method::Transfer, ScenarioId::Two).is_err());
        assert!(method_allowed(Method::Simsiam, ScenarioId::Three).is_ok());
    }
}
