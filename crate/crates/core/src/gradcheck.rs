//! Central finite-difference verification of graph gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpKind};
use crate::losses::{objective_node, DecoderTerms, KernelConfig, ObjectiveSpec, ObjectiveWeights};
use crate::nn::{Activation, LayerSpec, Mlp};
use crate::rbf::RbfCoeffs;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative deviation per parameter tensor.
    pub deviations: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().copied().fold(0.0, f64::max)
    }
}

/// Deviation between an analytic and a numerical derivative.
///
/// Relative to the larger magnitude once that exceeds 1, absolute below it,
/// so gradients that are legitimately close to zero do not blow up the ratio.
pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the gradients produced by [`Graph::backward`] for a scalar function.
///
/// `build` receives a fresh graph and one tracked leaf per parameter and
/// returns the scalar root.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_gradients(&build, params)?;
    compare_gradients(&build, params, &analytic, h, tol)
}

/// Analytic gradients of `build` at `params` via one backward sweep.
pub fn analytic_gradients<F>(build: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.input(p.clone())).collect();
    let root = build(&mut g, &ids)?;
    let grads = g.backward(root)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p))
        .collect())
}

/// Compares supplied gradients against central differences of `build`.
pub fn compare_gradients<F>(
    build: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::invalid("one analytic gradient per parameter required"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone())).collect();
        let root = build(&mut g, &ids)?;
        g.value(root).item()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut deviations = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Shape {
                op: "grad_check",
                lhs: params[pi].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let mut worst: f64 = 0.0;
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_deviation(grad.data()[k], numeric));
        }
        deviations.push(worst);
    }
    let passed = deviations.iter().all(|&d| d < tol);
    Ok(GradCheckReport {
        deviations,
        tol,
        passed,
    })
}

/// Worst deviation seen for one operation over random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub max_deviation: f64,
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("finite")
}

/// Normal entries kept at least `gap` away from zero, for ops with a kink there.
fn randn_off_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = rng.normal();
            if x.abs() >= gap {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

/// One random instance of `kind`: its operands and whether the first operand
/// is passed twice.
fn instance(kind: OpKind, rng: &mut Rng) -> (Vec<Tensor>, bool) {
    let (m, n, k) = (2 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
    match kind {
        OpKind::MatMul => (vec![randn(&[m, k], rng), randn(&[k, n], rng)], false),
        OpKind::Add | OpKind::Sub | OpKind::Mul => (vec![randn(&[m, n], rng), randn(&[m, n], rng)], false),
        OpKind::Relu | OpKind::Abs => (vec![randn_off_zero(&[m, n], 1e-2, rng)], false),
        OpKind::BroadcastAdd => (vec![randn(&[m, n], rng), randn(&[n], rng)], false),
        OpKind::PairwiseSqDist => (vec![randn(&[m, k], rng), randn(&[n + 1, k], rng)], false),
        OpKind::OffDiagSum => (vec![randn(&[m, m], rng)], false),
        OpKind::KernelOffDiagSum(_) => {
            let same = rng.below(2) == 0;
            let a = randn(&[m, k], rng);
            if same {
                (vec![a], true)
            } else {
                (vec![a, randn(&[m, k], rng)], false)
            }
        }
        OpKind::Dense(act) => loop {
            let (x, w, b) = (randn(&[m, k], rng), randn(&[n, k], rng), randn(&[n], rng));
            let pre = x.affine(&w, &b).expect("shapes");
            // keep relu preactivations clear of the kink
            if act != Activation::Relu || pre.data().iter().all(|v| v.abs() > 1e-2) {
                break (vec![x, w, b], false);
            }
        },
        _ => (vec![randn(&[m, n], rng)], false),
    }
}

/// Every differentiable op checked on `instances` random operands, then the
/// full clone objective with decoder.
///
/// Each op's output is contracted with a fixed random tensor so the whole
/// Jacobian is exercised, not just its column sums.
pub fn op_suite(instances: usize, h: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = Rng::seed(seed);
    let kernel = RbfCoeffs::from_bandwidths(&[0.5, 1.0, 2.0])?;
    let kinds = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale(-1.7),
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Square,
        OpKind::Abs,
        OpKind::Exp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::BroadcastAdd,
        OpKind::SliceRows { start: 1, end: 2 },
        OpKind::PairwiseSqDist,
        OpKind::OffDiagSum,
        OpKind::KernelOffDiagSum(kernel),
        OpKind::Dense(Activation::Relu),
        OpKind::Dense(Activation::Tanh),
        OpKind::Dense(Activation::Linear),
    ];
    let mut out = Vec::with_capacity(kinds.len() + 1);
    for kind in kinds {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (params, same) = instance(kind, &mut rng);
            // output shape from one plain evaluation
            let mut probe = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|p| probe.constant(p.clone())).collect();
            let ids = if same { vec![ids[0], ids[0]] } else { ids };
            let y = probe.apply(kind, &ids)?;
            let weights = randn(probe.value(y).shape(), &mut rng);
            let build = |g: &mut Graph, p: &[NodeId]| {
                let inputs = if same { vec![p[0], p[0]] } else { p.to_vec() };
                let y = g.apply(kind, &inputs)?;
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                g.sum(y)
            };
            let report = grad_check(build, &params, h, f64::INFINITY)?;
            worst = worst.max(report.max_deviation());
        }
        out.push(OpCheck {
            op: match kind {
                OpKind::Dense(act) => format!("dense-{}", format!("{act:?}").to_lowercase()),
                _ => kind.name().to_string(),
            },
            instances,
            max_deviation: worst,
        });
    }

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        worst = worst.max(objective_instance(h, &mut rng)?);
    }
    out.push(OpCheck {
        op: "objective".into(),
        instances,
        max_deviation: worst,
    });
    Ok(out)
}

/// Shared encoder over three clones, MMD² to prior rows and a mirrored decoder.
fn objective_instance(h: f64, rng: &mut Rng) -> Result<f64> {
    let (d, batch, clones) = (4, 4, 3);
    let enc = Mlp::init(&LayerSpec::mlp(d, &[5], 2, Activation::Tanh), rng)?;
    let dec = Mlp::init(&enc.spec().mirrored(), rng)?;
    let xs: Vec<Tensor> = (0..clones).map(|_| randn(&[batch, d], rng)).collect();
    let noise: Vec<Tensor> = (0..clones).map(|_| randn(&[batch, 2], rng).map(|v| 0.1 * v)).collect();
    let prior = randn(&[batch, 2], rng);
    let target = randn(&[batch, d], rng);
    let kernel = KernelConfig::default().kernel(2)?;
    let n_enc = enc.params().len();
    let params: Vec<Tensor> = enc.params().into_iter().chain(dec.params()).cloned().collect();
    let build = |g: &mut Graph, p: &[NodeId]| {
        let e = enc.bind_to(&p[..n_enc])?;
        let dnet = dec.bind_to(&p[n_enc..])?;
        let mut zs = Vec::with_capacity(clones);
        let mut outs = Vec::with_capacity(clones);
        for (x, eps) in xs.iter().zip(&noise) {
            let x = g.constant(x.clone());
            let u = e.forward(g, x)?;
            let eps = g.constant(eps.clone());
            let z = g.add(u, eps)?;
            outs.push(dnet.forward(g, z)?);
            zs.push(z);
        }
        let v = g.constant(prior.clone());
        let y = g.constant(target.clone());
        let nodes = objective_node(
            g,
            &zs,
            v,
            Some(DecoderTerms {
                outputs: &outs,
                target: y,
            }),
            &ObjectiveSpec {
                weights: ObjectiveWeights::default(),
                kernel: &kernel,
                mmd_clone_count: clones,
                similarity: Default::default(),
            },
        )?;
        Ok(nodes.total)
    };
    Ok(grad_check(build, &params, h, f64::INFINITY)?.max_deviation())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = Rng::seed(11);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let build = |g: &mut Graph, p: &[NodeId]| {
            let y = g.matmul(p[0], p[1])?;
            g.sum(y)
        };
        let report = grad_check(build, &[x, w], 1e-5, 1e-9).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn three_layer_tanh_mlp() {
        let mut rng = Rng::seed(5);
        let params = vec![
            random(&[6, 5], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[4], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[3, 1], &mut rng),
        ];
        let build = |g: &mut Graph, p: &[NodeId]| {
            let h = g.matmul(p[0], p[1])?;
            let h = g.broadcast_add(h, p[2])?;
            let h = g.tanh(h)?;
            let h = g.matmul(h, p[3])?;
            let h = g.tanh(h)?;
            let h = g.matmul(h, p[4])?;
            let h = g.tanh(h)?;
            g.sum(h)
        };
        let report = grad_check(build, &params, 1e-5, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let mut rng = Rng::seed(9);
        let x = random(&[4, 3], &mut rng);
        let build = |g: &mut Graph, p: &[NodeId]| {
            let y = g.tanh(p[0])?;
            g.sum(y)
        };
        // d tanh = 1 - y, a wrong rule
        let wrong = x.map(|v| 1.0 - v.tanh());
        let report = compare_gradients(&build, &[x], &[wrong], 1e-5, 1e-5).unwrap();
        assert!(!report.passed);
        assert!(report.max_deviation() > 1e-3);
    }

    #[test]
    fn non_finite_intermediate_identifies_node() {
        let x = Tensor::vector(vec![800.0]).unwrap();
        let build = |g: &mut Graph, p: &[NodeId]| {
            let y = g.exp(p[0])?;
            g.sum(y)
        };
        let err = grad_check(build, &[x], 1e-5, 1e-5).unwrap_err().to_string();
        assert!(err.contains("exp at node 1"), "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        let build = |g: &mut Graph, p: &[NodeId]| g.sum(p[0]);
        assert!(grad_check(build, &[x], 0.0, 1e-5).is_err());
    }

    #[test]
    fn op_suite_covers_every_op() {
        let checks = op_suite(3, 1e-5, 1).unwrap();
        assert_eq!(checks.len(), 22);
        for c in &checks {
            assert!(c.max_deviation < 1e-5, "{c:?}");
        }
    }
}
