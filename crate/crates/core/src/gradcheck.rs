//! Central finite-difference checks of the tape's gradients.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::models::{build_feature_extractor, build_mlp, FeatureExtractorSpec, MlpSpec};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng::seeded;
use crate::training::simsiam_loss_node;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Added to every analytic gradient entry; nonzero only to exercise failure paths.
    pub perturb: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            perturb: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub op: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

/// One differentiable function of some input tensors.
pub struct GradcheckCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

fn eval(case: &GradcheckCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = (case.build)(&mut g, &ids)?;
    Ok(g.value(root).item())
}

/// Largest `|analytic - numeric|` over all inputs, divided by the largest
/// gradient magnitude of the case (at least 1e-8).
pub fn check_case(case: &GradcheckCase, opts: &GradcheckOptions) -> Result<GradcheckResult> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = (case.build)(&mut g, &ids)?;
    let grads = g.backward(root)?;
    let mut scale: f64 = 1e-8;
    let mut err: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).map(|v| v + opts.perturb);
        for j in 0..case.inputs[k].len() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[j] += opts.step;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[j] -= opts.step;
            let numeric = (eval(case, &plus)? - eval(case, &minus)?) / (2.0 * opts.step);
            let a = analytic.data()[j];
            scale = scale.max(a.abs()).max(numeric.abs());
            err = err.max((a - numeric).abs());
        }
    }
    let worst = err / scale;
    Ok(GradcheckResult {
        op: case.name.clone(),
        max_rel_error: worst,
        passed: worst < opts.tolerance,
    })
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // Keep entries away from zero so ReLU kinks stay outside the stencil.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Contracts any output with fixed random weights into a scalar.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand_tensor(&mut seeded(seed), &shape));
    let m = g.mul(out, w)?;
    g.sum(m)
}

fn case(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static,
) -> GradcheckCase {
    GradcheckCase {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable op, the two network types and the SimSiam loss.
pub fn standard_cases(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = seeded(seed);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
    let fe_spec = FeatureExtractorSpec::new(&[3, 4]);
    let fe = build_feature_extractor::<f64, _>(&fe_spec, 5, 2, &mut seeded(seed ^ 1)).expect("valid spec");
    let fe_params = fe.state.tensors.clone();
    let mlp = build_mlp::<f64, _>(
        &MlpSpec {
            standardize_hidden: true,
            ..MlpSpec::linear(&[5, 3])
        },
        4,
        &mut seeded(seed ^ 2),
    )
    .expect("valid spec");
    let mlp_params = mlp.state.tensors.clone();

    let mut cases = vec![
        case("add", vec![r(&[2, 3]), r(&[2, 3])], |g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y, 11)
        }),
        case("sub", vec![r(&[2, 3]), r(&[2, 3])], |g, x| {
            let y = g.sub(x[0], x[1])?;
            project(g, y, 12)
        }),
        case("mul", vec![r(&[2, 3]), r(&[2, 3])], |g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y, 13)
        }),
        case("scale", vec![r(&[4])], |g, x| {
            let y = g.scale(x[0], -1.7)?;
            project(g, y, 14)
        }),
        case("matmul", vec![r(&[3, 4]), r(&[4, 2])], |g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, 15)
        }),
        case("add_bias", vec![r(&[3, 4]), r(&[4])], |g, x| {
            let y = g.add_bias(x[0], x[1])?;
            project(g, y, 16)
        }),
        case("relu", vec![r(&[3, 4])], |g, x| {
            let y = g.relu(x[0])?;
            project(g, y, 17)
        }),
        case("sigmoid", vec![r(&[3, 4])], |g, x| {
            let y = g.sigmoid(x[0])?;
            project(g, y, 18)
        }),
        case("conv1d", vec![r(&[2, 6, 2]), r(&[3, 2, 3]), r(&[3])], |g, x| {
            let y = g.conv1d(x[0], x[1], Some(x[2]), 1, 1)?;
            project(g, y, 19)
        }),
        case("conv1d_strided", vec![r(&[2, 7, 2]), r(&[3, 2, 2])], |g, x| {
            let y = g.conv1d(x[0], x[1], None, 2, 0)?;
            project(g, y, 20)
        }),
        case("mean_over_time", vec![r(&[2, 4, 3])], |g, x| {
            let y = g.mean_over_time(x[0])?;
            project(g, y, 21)
        }),
        case("standardize", vec![r(&[4, 3])], |g, x| {
            let y = g.standardize(x[0], 1e-5)?;
            project(g, y, 22)
        }),
        case("cosine_similarity", vec![r(&[3, 4]), r(&[3, 4])], |g, x| {
            let y = g.cosine_similarity(x[0], x[1])?;
            project(g, y, 23)
        }),
        case("sum", vec![r(&[2, 3])], |g, x| g.sum(x[0])),
        case("mean", vec![r(&[2, 3])], |g, x| g.mean(x[0])),
        case("sum_squares", vec![r(&[2, 3])], |g, x| g.sum_squares(x[0])),
        case("softmax_cross_entropy", vec![r(&[3, 4])], |g, x| {
            g.softmax_cross_entropy(x[0], &[0, 3, 1])
        }),
        case("bce_with_logits", vec![r(&[4, 1])], |g, x| {
            g.bce_with_logits(x[0], &[1.0, 0.0, 0.0, 1.0])
        }),
        case("reshape", vec![r(&[2, 3])], |g, x| {
            let y = g.reshape(x[0], &[3, 2])?;
            project(g, y, 24)
        }),
        case("simsiam_loss", vec![r(&[3, 4]), r(&[3, 4])], {
            let zs = (r(&[3, 4]), r(&[3, 4]));
            move |g, x| {
                let zj = g.constant(zs.0.clone());
                let zi = g.constant(zs.1.clone());
                simsiam_loss_node(g, x[0], zj, x[1], zi, true)
            }
        }),
        case(
            "simsiam_loss_no_stop_gradient",
            vec![r(&[3, 4]), r(&[3, 4]), r(&[3, 4]), r(&[3, 4])],
            |g, x| simsiam_loss_node(g, x[0], x[1], x[2], x[3], false),
        ),
    ];

    let mut fe_inputs = vec![r(&[2, 5, 2])];
    fe_inputs.extend(fe_params);
    cases.push(case("feature_extractor", fe_inputs, move |g, x| {
        let y = fe.forward(g, &x[1..], x[0])?;
        project(g, y, 25)
    }));
    let mut mlp_inputs = vec![r(&[3, 4])];
    mlp_inputs.extend(mlp_params);
    cases.push(case("mlp", mlp_inputs, move |g, x| {
        let y = mlp.forward(g, &x[1..], x[0])?;
        project(g, y, 26)
    }));
    cases
}

pub fn run_gradcheck(seed: u64, opts: &GradcheckOptions) -> Result<Vec<GradcheckResult>> {
    standard_cases(seed).iter().map(|c| check_case(c, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let c = case("square", vec![Tensor::scalar(3.0)], |g, x| g.mul(x[0], x[0]));
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let y = (c.build)(&mut g, &[w]).unwrap();
        assert_eq!(g.backward(y).unwrap().get(w).item(), 6.0);
        assert!(check_case(&c, &GradcheckOptions::default()).unwrap().passed);
    }

    #[test]
    fn perturbed_gradient_fails() {
        let c = case("square", vec![Tensor::scalar(3.0)], |g, x| g.mul(x[0], x[0]));
        let opts = GradcheckOptions {
            perturb: 0.01,
            ..Default::default()
        };
        let r = check_case(&c, &opts).unwrap();
        assert!(!r.passed && r.max_rel_error > 1e-4);
    }
}
