//! Network definitions: a 1-D ResNet feature extractor and the MLP heads
//! (projector, predictor, classifier, multi-task discriminators) built on it.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Window;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Graph, NodeId, Tensor};
use crate::scalar::Scalar;

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState<S> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<S>>,
    pub init_seed: u64,
}

impl<S: Scalar> NetworkState<S> {
    pub fn empty(init_seed: u64) -> Self {
        NetworkState {
            names: Vec::new(),
            tensors: Vec::new(),
            init_seed,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Concatenates states under name prefixes, e.g. `fe.` and `proj.`.
    pub fn merged(parts: &[(&str, &NetworkState<S>)]) -> Self {
        let mut out = NetworkState::empty(parts.first().map_or(0, |p| p.1.init_seed));
        for (prefix, st) in parts {
            for (n, t) in st.names.iter().zip(&st.tensors) {
                out.push(format!("{prefix}{n}"), t.clone());
            }
        }
        out
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let mut out = NetworkState::empty(self.init_seed);
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    /// Replaces tensor values, checking that names and shapes line up.
    pub fn load_from(&mut self, other: &NetworkState<S>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config(format!(
                "parameter names differ: {:?} vs {:?}",
                self.names, other.names
            )));
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::shape(
                    "load_state",
                    format!("{:?} vs {:?}", mine.shape(), theirs.shape()),
                ));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}

fn he_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Filter counts of the feature extractor: the first entry is the stem
/// convolution, each further entry adds one residual block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub filters: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

fn default_kernel() -> usize {
    3
}

impl FeatureExtractorSpec {
    pub fn new(filters: &[usize]) -> Self {
        FeatureExtractorSpec {
            filters: filters.to_vec(),
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config(format!(
                "feature extractor filters must be a non-empty list of positive counts, got {:?}",
                self.filters
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd for same padding, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.filters.last().expect("validated")
    }

    /// Parameter count for `channels` input channels.
    pub fn parameter_count(&self, channels: usize) -> usize {
        let k = self.kernel_size;
        let mut n = k * channels * self.filters[0] + self.filters[0];
        for pair in self.filters.windows(2) {
            let (cin, cout) = (pair[0], pair[1]);
            n += k * cin * cout + cout + k * cout * cout + cout;
            if cin != cout {
                n += cin * cout + cout;
            }
        }
        n
    }
}

/// One-dimensional ResNet: conv + ReLU stem, residual blocks
/// (conv-ReLU-conv plus skip, then ReLU), global average pooling over time.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<S> {
    pub spec: FeatureExtractorSpec,
    pub channels: usize,
    pub state: NetworkState<S>,
}

/// Builds a randomly initialized extractor for `T x channels` inputs.
pub fn build_feature_extractor<S: Scalar, R: Rng + ?Sized>(
    spec: &FeatureExtractorSpec,
    window_len: usize,
    channels: usize,
    rng: &mut R,
) -> Result<FeatureExtractor<S>> {
    spec.validate()?;
    if channels == 0 || window_len == 0 {
        return Err(Error::Config(format!(
            "input shape {window_len} x {channels} is empty"
        )));
    }
    let k = spec.kernel_size;
    let mut st = NetworkState::empty(0);
    let f0 = spec.filters[0];
    st.push("stem.weight", he_uniform(&[k, channels, f0], k * channels, rng));
    st.push("stem.bias", Tensor::zeros(&[f0]));
    for (i, pair) in spec.filters.windows(2).enumerate() {
        let (cin, cout) = (pair[0], pair[1]);
        st.push(format!("block{i}.conv1.weight"), he_uniform(&[k, cin, cout], k * cin, rng));
        st.push(format!("block{i}.conv1.bias"), Tensor::zeros(&[cout]));
        st.push(format!("block{i}.conv2.weight"), he_uniform(&[k, cout, cout], k * cout, rng));
        st.push(format!("block{i}.conv2.bias"), Tensor::zeros(&[cout]));
        if cin != cout {
            st.push(format!("block{i}.skip.weight"), he_uniform(&[1, cin, cout], cin, rng));
            st.push(format!("block{i}.skip.bias"), Tensor::zeros(&[cout]));
        }
    }
    Ok(FeatureExtractor {
        spec: spec.clone(),
        channels,
        state: st,
    })
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    /// `[B, T, C]` input node to `[B, filters.last()]` features.
    pub fn forward(&self, g: &mut Graph<S>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let c = g.value(x).shape().get(2).copied();
        if c != Some(self.channels) {
            return Err(Error::shape(
                "feature_extractor",
                format!("expected [B, T, {}], got {:?}", self.channels, g.value(x).shape()),
            ));
        }
        let pad = self.spec.kernel_size / 2;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches spec");
        let (w, b) = (next(), next());
        let h = g.conv1d(x, w, Some(b), 1, pad)?;
        let mut h = g.relu(h)?;
        for pair in self.spec.filters.windows(2) {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let a = g.conv1d(h, w1, Some(b1), 1, pad)?;
            let a = g.relu(a)?;
            let a = g.conv1d(a, w2, Some(b2), 1, pad)?;
            let skip = if pair[0] != pair[1] {
                let (ws, bs) = (next(), next());
                g.conv1d(h, ws, Some(bs), 1, 0)?
            } else {
                h
            };
            let s = g.add(a, skip)?;
            h = g.relu(s)?;
        }
        g.mean_over_time(h)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// Linear output (projector, predictor).
    #[default]
    None,
    /// Class probabilities (classifier).
    Softmax,
    /// Independent probabilities (multi-task discriminators).
    Sigmoid,
}

/// Dense stack: ReLU between layers, optional per-feature batch
/// standardization before each hidden ReLU, chosen output activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub output: OutputActivation,
    #[serde(default)]
    pub standardize_hidden: bool,
}

impl MlpSpec {
    pub fn linear(widths: &[usize]) -> Self {
        MlpSpec {
            widths: widths.to_vec(),
            output: OutputActivation::None,
            standardize_hidden: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP widths must be a non-empty list of positive sizes, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn parameter_count(&self, input: usize) -> usize {
        let mut prev = input;
        let mut n = 0;
        for &w in &self.widths {
            n += prev * w + w;
            prev = w;
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S> {
    pub spec: MlpSpec,
    pub input: usize,
    pub state: NetworkState<S>,
}

pub fn build_mlp<S: Scalar, R: Rng + ?Sized>(spec: &MlpSpec, input: usize, rng: &mut R) -> Result<Mlp<S>> {
    spec.validate()?;
    let mut st = NetworkState::empty(0);
    let mut prev = input;
    for (i, &w) in spec.widths.iter().enumerate() {
        st.push(format!("layer{i}.weight"), he_uniform(&[prev, w], prev, rng));
        st.push(format!("layer{i}.bias"), Tensor::zeros(&[w]));
        prev = w;
    }
    Ok(Mlp {
        spec: spec.clone(),
        input,
        state: st,
    })
}

/// Epsilon of the optional hidden-layer standardization.
const STANDARDIZE_EPS: f64 = 1e-5;

impl<S: Scalar> Mlp<S> {
    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    /// `[B, input]` to pre-activation outputs `[B, widths.last()]`; the
    /// output activation is left to the loss or to [`Mlp::activate`].
    pub fn forward(&self, g: &mut Graph<S>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::shape(
                "mlp",
                format!("expected [B, {}], got {:?}", self.input, shape),
            ));
        }
        let mut h = x;
        let n = self.spec.widths.len();
        for i in 0..n {
            let m = g.matmul(h, params[2 * i])?;
            h = g.add_bias(m, params[2 * i + 1])?;
            if i + 1 < n {
                if self.spec.standardize_hidden && g.value(h).shape()[0] > 1 {
                    h = g.standardize(h, S::of(STANDARDIZE_EPS))?;
                }
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Applies the output activation to a `[B, out]` buffer.
    pub fn activate(&self, logits: &Tensor<S>) -> Tensor<S> {
        match self.spec.output {
            OutputActivation::None => logits.clone(),
            OutputActivation::Softmax => {
                let n = *logits.shape().last().expect("rank 2");
                Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), n)).expect("shape")
            }
            OutputActivation::Sigmoid => logits.map(|v| S::one() / (S::one() + (-v).exp())),
        }
    }
}

/// Stacks windows into a `[B, T, C]` tensor.
pub fn batch_tensor<S: Scalar>(windows: &[&Window<S>]) -> Result<Tensor<S>> {
    let values: Vec<&Tensor<S>> = windows.iter().map(|w| &w.values).collect();
    Tensor::stack(&values)
}

/// Rows evaluated per tape during inference.
const INFERENCE_CHUNK: usize = 128;

/// Features of every window under a fixed extractor, as `[N, D]`.
pub fn extract_features<S: Scalar>(fe: &FeatureExtractor<S>, windows: &[Window<S>]) -> Result<Tensor<S>> {
    let d = fe.output_width();
    let mut data = Vec::with_capacity(windows.len() * d);
    for chunk in windows.chunks(INFERENCE_CHUNK) {
        let refs: Vec<&Window<S>> = chunk.iter().collect();
        let mut g = Graph::new();
        let params = fe.state.bind(&mut g, false);
        let x = g.constant(batch_tensor(&refs)?);
        let f = fe.forward(&mut g, &params, x)?;
        data.extend_from_slice(g.value(f).data());
    }
    Tensor::new(vec![windows.len(), d], data)
}

/// MLP outputs (pre-activation) for `[N, input]` rows.
pub fn mlp_outputs<S: Scalar>(mlp: &Mlp<S>, rows: &Tensor<S>) -> Result<Tensor<S>> {
    let n = rows.shape()[0];
    let d = mlp.input;
    let out_w = mlp.output_width();
    let mut data = Vec::with_capacity(n * out_w);
    let mut start = 0;
    while start < n {
        let end = (start + INFERENCE_CHUNK).min(n);
        let mut g = Graph::new();
        let params = mlp.state.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![end - start, d], rows.data()[start * d..end * d].to_vec())?);
        let y = mlp.forward(&mut g, &params, x)?;
        data.extend_from_slice(g.value(y).data());
        start = end;
    }
    Tensor::new(vec![n, out_w], data)
}

/// Extractor, projector and predictor of the Siamese network.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSiam<S> {
    pub extractor: FeatureExtractor<S>,
    pub projector: Mlp<S>,
    pub predictor: Mlp<S>,
}

pub fn build_simsiam<S: Scalar, R: Rng + ?Sized>(
    fe_spec: &FeatureExtractorSpec,
    projector: &MlpSpec,
    predictor: &MlpSpec,
    window_len: usize,
    channels: usize,
    rng: &mut R,
) -> Result<SimSiam<S>> {
    let extractor = build_feature_extractor(fe_spec, window_len, channels, rng)?;
    let projector = build_mlp(projector, extractor.output_width(), rng)?;
    let predictor = build_mlp(predictor, projector.output_width(), rng)?;
    if predictor.output_width() != projector.output_width() {
        return Err(Error::Config(format!(
            "predictor output width {} must equal projector output width {}",
            predictor.output_width(),
            projector.output_width()
        )));
    }
    Ok(SimSiam {
        extractor,
        projector,
        predictor,
    })
}

impl<S: Scalar> SimSiam<S> {
    pub fn state(&self) -> NetworkState<S> {
        NetworkState::merged(&[
            ("fe.", &self.extractor.state),
            ("proj.", &self.projector.state),
            ("pred.", &self.predictor.state),
        ])
    }
}

/// `z = projector(extractor(x))` for one window.
pub fn encode<S: Scalar>(fe: &FeatureExtractor<S>, proj: &Mlp<S>, x: &Window<S>) -> Result<Vec<S>> {
    let z = encode_batch(fe, proj, std::slice::from_ref(x))?;
    Ok(z.into_data())
}

/// Embeddings `[N, D]` of many windows.
pub fn encode_batch<S: Scalar>(
    fe: &FeatureExtractor<S>,
    proj: &Mlp<S>,
    windows: &[Window<S>],
) -> Result<Tensor<S>> {
    let feats = extract_features(fe, windows)?;
    if feats.shape()[1] != proj.input {
        return Err(Error::shape(
            "encode",
            format!("extractor width {} vs projector input {}", feats.shape()[1], proj.input),
        ));
    }
    mlp_outputs(proj, &feats)
}

/// `p = predictor(z)`.
pub fn predict<S: Scalar>(pred: &Mlp<S>, z: &[S]) -> Result<Vec<S>> {
    if z.len() != pred.input {
        return Err(Error::shape(
            "predict",
            format!("z has {} entries, predictor expects {}", z.len(), pred.input),
        ));
    }
    Ok(mlp_outputs(pred, &Tensor::new(vec![1, z.len()], z.to_vec())?)?.into_data())
}

/// Extractor plus softmax classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<S> {
    pub extractor: FeatureExtractor<S>,
    pub head: Mlp<S>,
}

/// Default hidden widths of the classification head.
pub const CLASSIFIER_HIDDEN: [usize; 2] = [256, 64];

pub fn classifier_head_spec(n_classes: usize) -> MlpSpec {
    let mut widths = CLASSIFIER_HIDDEN.to_vec();
    widths.push(n_classes);
    MlpSpec {
        widths,
        output: OutputActivation::Softmax,
        standardize_hidden: false,
    }
}

pub fn build_classifier<S: Scalar, R: Rng + ?Sized>(
    extractor: FeatureExtractor<S>,
    n_classes: usize,
    rng: &mut R,
) -> Result<Classifier<S>> {
    if n_classes == 0 {
        return Err(Error::Config("classifier needs at least one class".into()));
    }
    let head = build_mlp(&classifier_head_spec(n_classes), extractor.output_width(), rng)?;
    Ok(Classifier { extractor, head })
}

impl<S: Scalar> Classifier<S> {
    pub fn n_classes(&self) -> usize {
        self.head.output_width()
    }

    pub fn state(&self) -> NetworkState<S> {
        NetworkState::merged(&[("fe.", &self.extractor.state), ("head.", &self.head.state)])
    }

    /// Class probabilities `[N, n_classes]`.
    pub fn probabilities(&self, windows: &[Window<S>]) -> Result<Tensor<S>> {
        let feats = extract_features(&self.extractor, windows)?;
        let logits = mlp_outputs(&self.head, &feats)?;
        Ok(self.head.activate(&logits))
    }

    pub fn predict_labels(&self, windows: &[Window<S>]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.probabilities(windows)?))
    }
}

/// Softmax probabilities of one window, checked against the expected user count.
pub fn classify<S: Scalar>(
    fe: &FeatureExtractor<S>,
    head: &Mlp<S>,
    x: &Window<S>,
    n_users: usize,
) -> Result<Vec<S>> {
    if head.output_width() != n_users {
        return Err(Error::shape(
            "classify",
            format!("head has {} outputs for {n_users} users", head.output_width()),
        ));
    }
    let feats = extract_features(fe, std::slice::from_ref(x))?;
    let logits = mlp_outputs(head, &feats)?;
    Ok(softmax_rows(logits.data(), n_users))
}

pub fn argmax_rows<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    let n = t.shape()[1];
    t.data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Shared extractor with one binary discriminator per transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Mtssl<S> {
    pub extractor: FeatureExtractor<S>,
    pub heads: Vec<Mlp<S>>,
}

/// Hidden widths of each multi-task head, ending in one logit.
pub const MTSSL_HEAD: [usize; 2] = [256, 1];

pub fn build_mtssl<S: Scalar, R: Rng + ?Sized>(
    fe_spec: &FeatureExtractorSpec,
    n_heads: usize,
    window_len: usize,
    channels: usize,
    rng: &mut R,
) -> Result<Mtssl<S>> {
    if n_heads == 0 {
        return Err(Error::Config("multi-task model needs at least one head".into()));
    }
    let extractor = build_feature_extractor(fe_spec, window_len, channels, rng)?;
    let spec = MlpSpec {
        widths: MTSSL_HEAD.to_vec(),
        output: OutputActivation::Sigmoid,
        standardize_hidden: false,
    };
    let heads = (0..n_heads)
        .map(|_| build_mlp(&spec, extractor.output_width(), rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mtssl { extractor, heads })
}

impl<S: Scalar> Mtssl<S> {
    /// Probability from head `h` that its transform was applied, per window.
    pub fn head_probabilities(&self, h: usize, windows: &[Window<S>]) -> Result<Vec<S>> {
        let feats = extract_features(&self.extractor, windows)?;
        let logits = mlp_outputs(&self.heads[h], &feats)?;
        Ok(self.heads[h].activate(&logits).into_data())
    }

    pub fn state(&self) -> NetworkState<S> {
        let mut parts: Vec<(String, &NetworkState<S>)> = vec![("fe.".into(), &self.extractor.state)];
        for (i, h) in self.heads.iter().enumerate() {
            parts.push((format!("head{i}."), &h.state));
        }
        let refs: Vec<(&str, &NetworkState<S>)> = parts.iter().map(|(p, s)| (p.as_str(), *s)).collect();
        NetworkState::merged(&refs)
    }
}
