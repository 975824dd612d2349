//! Objective terms: clone similarity, MMD² to a Laplacian prior and decoder
//! reconstruction, plus their weighted sum.
//!
//! Every term exists in two forms: a graph builder used during training and a
//! plain evaluation over tensors. The plain forms of the similarity,
//! reconstruction and objective terms go through the same graph builders on
//! constant leaves; [`mmd_squared`] has its own direct implementation because
//! it must scale to large sample sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rbf::{cross_sum, within_sum, RbfCoeffs};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lambda_f: f64,
    pub lambda_d: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_f: 1.0,
            lambda_d: 18.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_d", self.lambda_d)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityVariant {
    /// `Σ_q ‖z¹ − z^q‖²₂`
    #[default]
    AnchoredL2,
    /// `Σ_q ‖z¹ − z^q‖₁`
    AnchoredL1,
    /// `Σ_{p<q} ‖z^p − z^q‖²₂`
    AllPairsL2,
}

/// Sum of Gaussian RBF kernels, `k(a, b) = Σ_σ exp(−‖a−b‖² / 2σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    bandwidths: Vec<f64>,
    coeffs: RbfCoeffs,
}

impl Kernel {
    /// At most [`crate::rbf::MAX_BANDWIDTHS`] positive bandwidths.
    pub fn gaussian(bandwidths: Vec<f64>) -> Result<Self> {
        let coeffs = RbfCoeffs::from_bandwidths(&bandwidths)?;
        Ok(Self { bandwidths, coeffs })
    }

    pub fn coeffs(&self) -> RbfCoeffs {
        self.coeffs
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Kernel value from a squared distance.
    pub fn from_sq_dist(&self, d2: f64) -> f64 {
        self.bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::Shape {
                op: "kernel",
                lhs: vec![a.len()],
                rhs: vec![b.len()],
            });
        }
        Ok(self.from_sq_dist(sq_dist(a, b)))
    }
}

pub fn kernel_eval(kernel: &Kernel, a: &[f64], b: &[f64]) -> Result<f64> {
    kernel.eval(a, b)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// How the MMD kernel bandwidths are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// Bandwidths are `multiplier · base`.
    pub multipliers: Vec<f64>,
    /// Base bandwidth; `None` means `sqrt(feature_dim)` once expanded.
    pub base: Option<f64>,
    /// Replace the base by the median pairwise distance of each pooled batch.
    pub median_heuristic: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            base: None,
            median_heuristic: false,
        }
    }
}

impl KernelConfig {
    pub fn expand(&mut self, feature_dim: usize) {
        if self.base.is_none() {
            self.base = Some((feature_dim as f64).sqrt());
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::invalid("kernel multipliers must be positive"));
        }
        if let Some(b) = self.base {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::invalid("kernel base bandwidth must be positive"));
            }
        }
        Ok(())
    }

    /// Fixed-base kernel.
    pub fn kernel(&self, feature_dim: usize) -> Result<Kernel> {
        let base = self.base.unwrap_or((feature_dim as f64).sqrt());
        Kernel::gaussian(self.multipliers.iter().map(|m| m * base).collect())
    }

    /// Kernel for one batch, honouring the median heuristic when enabled.
    pub fn kernel_for(&self, z: &Tensor, v: &Tensor) -> Result<Kernel> {
        if !self.median_heuristic {
            return self.kernel(z.cols());
        }
        let base = median_pairwise_distance(&[z, v]);
        let base = if base > 0.0 { base } else { self.base.unwrap_or(1.0) };
        Kernel::gaussian(self.multipliers.iter().map(|m| m * base).collect())
    }
}

/// Median Euclidean distance over all distinct row pairs of the pooled samples.
pub fn median_pairwise_distance(samples: &[&Tensor]) -> f64 {
    let rows: Vec<&[f64]> = samples
        .iter()
        .flat_map(|t| (0..t.rows()).map(move |i| t.row(i)))
        .collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// iid Laplace prior with scale `b` (variance `2b²`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacePrior {
    pub scale_b: f64,
}

impl Default for LaplacePrior {
    fn default() -> Self {
        Self {
            scale_b: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

impl LaplacePrior {
    pub fn new(scale_b: f64) -> Result<Self> {
        if !(scale_b > 0.0) || !scale_b.is_finite() {
            return Err(Error::invalid(format!("Laplace scale must be > 0, got {scale_b}")));
        }
        Ok(Self { scale_b })
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.scale_b * self.scale_b
    }

    /// Inverse CDF at `u ∈ (0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let c = u - 0.5;
        if c == 0.0 {
            return 0.0;
        }
        -self.scale_b * c.signum() * (1.0 - 2.0 * c.abs()).ln()
    }
}

pub fn sample_laplace(prior: &LaplacePrior, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    LaplacePrior::new(prior.scale_b)?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| prior.quantile(rng.open01())).collect())
}

fn check_clones(clones: &[&Tensor]) -> Result<()> {
    if clones.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 clones, got {}", clones.len())));
    }
    let s = clones[0].shape();
    if !clones[0].is_matrix() {
        return Err(Error::invalid("clone features must be matrices"));
    }
    if let Some(bad) = clones.iter().find(|c| c.shape() != s) {
        return Err(Error::Shape {
            op: "similarity",
            lhs: s.to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    Ok(())
}

/// Similarity term over per-clone feature nodes, averaged over batch rows.
pub fn similarity_node(g: &mut Graph, clones: &[NodeId], variant: SimilarityVariant) -> Result<NodeId> {
    let values: Vec<&Tensor> = clones.iter().map(|&c| g.value(c)).collect();
    check_clones(&values)?;
    let batch = values[0].rows() as f64;

    let pairs: Vec<(NodeId, NodeId)> = match variant {
        SimilarityVariant::AnchoredL2 | SimilarityVariant::AnchoredL1 => {
            clones[1..].iter().map(|&q| (clones[0], q)).collect()
        }
        SimilarityVariant::AllPairsL2 => {
            let mut v = Vec::new();
            for p in 0..clones.len() {
                for q in p + 1..clones.len() {
                    v.push((clones[p], clones[q]));
                }
            }
            v
        }
    };
    let mut terms = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let d = g.sub(a, b)?;
        let d = match variant {
            SimilarityVariant::AnchoredL1 => g.abs(d)?,
            _ => g.square(d)?,
        };
        terms.push(g.sum(d)?);
    }
    let total = g.add_all(&terms)?;
    g.scale(total, 1.0 / batch)
}

pub fn similarity_loss(clones: &[Tensor], variant: SimilarityVariant) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = clones.iter().map(|c| g.constant(c.clone())).collect();
    let s = similarity_node(&mut g, &ids, variant)?;
    g.value(s).item()
}

fn check_mmd_inputs(z: &Tensor, v: &Tensor) -> Result<()> {
    if !z.is_matrix() || !v.is_matrix() || z.shape() != v.shape() {
        return Err(Error::Shape {
            op: "mmd",
            lhs: z.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    if z.rows() < 2 {
        return Err(Error::invalid(format!("MMD² needs M ≥ 2 samples, got {}", z.rows())));
    }
    Ok(())
}

/// Unbiased empirical MMD² between feature rows `z` and prior rows `v`:
///
/// `1/(M(M−1)) Σ_{i≠j} [k(zᵢ,zⱼ) − k(zᵢ,vⱼ) − k(zⱼ,vᵢ) + k(vᵢ,vⱼ)]`
///
/// The estimator can come out slightly negative when the two samples share a
/// distribution.
pub fn mmd_squared_node(g: &mut Graph, z: NodeId, v: NodeId, kernel: &Kernel) -> Result<NodeId> {
    let s_vv = prior_kernel_sum(g, v, kernel)?;
    mmd_with_prior_sum(g, z, v, s_vv, kernel)
}

/// `Σ_{i≠j} k(vᵢ, vⱼ)`; shared by every clone's MMD² term.
fn prior_kernel_sum(g: &mut Graph, v: NodeId, kernel: &Kernel) -> Result<NodeId> {
    g.kernel_off_diag_sum(v, v, kernel.coeffs)
}

fn mmd_with_prior_sum(g: &mut Graph, z: NodeId, v: NodeId, s_vv: NodeId, kernel: &Kernel) -> Result<NodeId> {
    check_mmd_inputs(g.value(z), g.value(v))?;
    let m = g.value(z).rows() as f64;
    let s_zz = g.kernel_off_diag_sum(z, z, kernel.coeffs)?;
    let s_zv = g.kernel_off_diag_sum(z, v, kernel.coeffs)?;
    let cross = g.scale(s_zv, -2.0)?;
    let total = g.add_all(&[s_zz, cross, s_vv])?;
    g.scale(total, 1.0 / (m * (m - 1.0)))
}

/// Direct evaluation of the same estimator as [`mmd_squared_node`].
///
/// Pairs are visited as `i < j` in every block, so identical batches cancel
/// exactly.
pub fn mmd_squared(z: &Tensor, v: &Tensor, kernel: &Kernel) -> Result<f64> {
    check_mmd_inputs(z, v)?;
    let m = z.rows();
    let k = &kernel.coeffs;
    let s_zz = 2.0 * within_sum(k, z, None)?;
    let s_vv = 2.0 * within_sum(k, v, None)?;
    let s_zv = cross_sum(k, z, v, None)?;
    let value = (s_zz - 2.0 * s_zv + s_vv) / (m as f64 * (m as f64 - 1.0));
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("mmd".into()))
    }
}

/// `Σ_rows ‖ŷ − y‖² / rows`.
pub fn reconstruction_node(g: &mut Graph, y_hat: NodeId, y: NodeId) -> Result<NodeId> {
    let (a, b) = (g.value(y_hat), g.value(y));
    if a.shape() != b.shape() || !a.is_matrix() {
        return Err(Error::Shape {
            op: "reconstruction",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let rows = a.rows() as f64;
    let r = g.sub(y_hat, y)?;
    let r = g.square(r)?;
    let s = g.sum(r)?;
    g.scale(s, 1.0 / rows)
}

pub fn reconstruction_loss(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(y_hat.clone());
    let b = g.constant(y.clone());
    let r = reconstruction_node(&mut g, a, b)?;
    g.value(r).item()
}

/// Per-term values of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub d_s: f64,
    /// Unweighted `Σ_i MMD²(zⁱ, v)` over the evaluated clones.
    pub d_f: f64,
    /// Unweighted `Σ_i D_d(h(zⁱ), y)` over the evaluated clones.
    pub d_d: f64,
    pub total: f64,
}

/// Graph nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub d_s: NodeId,
    pub d_f: NodeId,
    pub d_d: Option<NodeId>,
    pub total: NodeId,
}

impl ObjectiveNodes {
    pub fn breakdown(&self, g: &Graph) -> ObjectiveBreakdown {
        let scalar = |id: NodeId| g.value(id).data()[0];
        ObjectiveBreakdown {
            d_s: scalar(self.d_s),
            d_f: scalar(self.d_f),
            d_d: self.d_d.map_or(0.0, scalar),
            total: scalar(self.total),
        }
    }
}

/// Decoder outputs for the first clones together with the shared target.
pub struct DecoderTerms<'a> {
    pub outputs: &'a [NodeId],
    pub target: NodeId,
}

pub struct ObjectiveSpec<'a> {
    pub weights: ObjectiveWeights,
    pub kernel: &'a Kernel,
    pub mmd_clone_count: usize,
    pub similarity: SimilarityVariant,
}

/// `D_s + λ_f Σ_{i≤n} MMD²(zⁱ, v) + λ_d Σ_i D_d(h(zⁱ), y)`.
pub fn objective_node(
    g: &mut Graph,
    clones: &[NodeId],
    prior: NodeId,
    decoder: Option<DecoderTerms<'_>>,
    spec: &ObjectiveSpec<'_>,
) -> Result<ObjectiveNodes> {
    spec.weights.validate()?;
    if spec.mmd_clone_count < 1 || spec.mmd_clone_count > clones.len() {
        return Err(Error::invalid(format!(
            "mmd_clone_count must be in 1..={}, got {}",
            clones.len(),
            spec.mmd_clone_count
        )));
    }
    match (&decoder, spec.weights.lambda_d > 0.0) {
        (None, true) => return Err(Error::invalid("lambda_d > 0 but no decoder outputs were supplied")),
        (Some(_), false) => return Err(Error::invalid("decoder outputs supplied but lambda_d is 0")),
        _ => {}
    }

    let d_s = similarity_node(g, clones, spec.similarity)?;
    let s_vv = prior_kernel_sum(g, prior, spec.kernel)?;
    let mut mmd_terms = Vec::with_capacity(spec.mmd_clone_count);
    for &z in &clones[..spec.mmd_clone_count] {
        mmd_terms.push(mmd_with_prior_sum(g, z, prior, s_vv, spec.kernel)?);
    }
    let d_f = g.add_all(&mmd_terms)?;
    let weighted_f = g.scale(d_f, spec.weights.lambda_f)?;

    let (d_d, total) = match decoder {
        Some(dec) => {
            if dec.outputs.is_empty() || dec.outputs.len() > clones.len() {
                return Err(Error::invalid(format!(
                    "expected 1..={} decoder outputs, got {}",
                    clones.len(),
                    dec.outputs.len()
                )));
            }
            let mut rec = Vec::with_capacity(dec.outputs.len());
            for &y_hat in dec.outputs {
                rec.push(reconstruction_node(g, y_hat, dec.target)?);
            }
            let d_d = g.add_all(&rec)?;
            let weighted_d = g.scale(d_d, spec.weights.lambda_d)?;
            (Some(d_d), g.add_all(&[d_s, weighted_f, weighted_d])?)
        }
        None => (None, g.add(d_s, weighted_f)?),
    };
    Ok(ObjectiveNodes { d_s, d_f, d_d, total })
}

/// Plain evaluation of [`objective_node`].
pub fn total_objective(
    clone_features: &[Tensor],
    prior_samples: &Tensor,
    decoder_outputs: Option<&[Tensor]>,
    target: Option<&Tensor>,
    spec: &ObjectiveSpec<'_>,
) -> Result<ObjectiveBreakdown> {
    let mut g = Graph::new();
    let clones: Vec<NodeId> = clone_features.iter().map(|c| g.constant(c.clone())).collect();
    let prior = g.constant(prior_samples.clone());
    let outputs: Vec<NodeId>;
    let decoder = match (decoder_outputs, target) {
        (Some(outs), Some(y)) => {
            outputs = outs.iter().map(|o| g.constant(o.clone())).collect();
            let target = g.constant(y.clone());
            Some(DecoderTerms {
                outputs: &outputs,
                target,
            })
        }
        (None, None) => None,
        _ => return Err(Error::invalid("decoder outputs and target must be supplied together")),
    };
    let nodes = objective_node(&mut g, &clones, prior, decoder, spec)?;
    Ok(nodes.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn brute_mmd(z: &Tensor, v: &Tensor, bw: &[f64]) -> f64 {
        let k = |a: &[f64], b: &[f64]| -> f64 {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
        };
        let m = z.rows();
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += k(z.row(i), z.row(j)) - k(z.row(i), v.row(j)) - k(z.row(j), v.row(i)) + k(v.row(i), v.row(j));
                }
            }
        }
        s / (m * (m - 1)) as f64
    }

    #[test]
    fn similarity_examples() {
        let z = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(
            similarity_loss(&[z.clone(), z.clone(), z], SimilarityVariant::AnchoredL2).unwrap(),
            0.0
        );
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(
            similarity_loss(&[a.clone(), b.clone()], SimilarityVariant::AnchoredL2).unwrap(),
            25.0
        );
        assert_eq!(similarity_loss(&[a, b], SimilarityVariant::AnchoredL1).unwrap(), 7.0);
    }

    #[test]
    fn all_pairs_matches_enumeration() {
        let mut rng = Rng::seed(3);
        let clones: Vec<Tensor> = (0..3).map(|_| randn(4, 2, &mut rng)).collect();
        let mut expect = 0.0;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            for r in 0..4 {
                for c in 0..2 {
                    expect += (clones[p].get(r, c) - clones[q].get(r, c)).powi(2);
                }
            }
        }
        expect /= 4.0;
        let got = similarity_loss(&clones, SimilarityVariant::AllPairsL2).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn similarity_errors() {
        let a = Tensor::zeros(&[2, 2]);
        assert!(similarity_loss(std::slice::from_ref(&a), SimilarityVariant::AnchoredL2).is_err());
        assert!(similarity_loss(&[a, Tensor::zeros(&[3, 2])], SimilarityVariant::AnchoredL2).is_err());
    }

    #[test]
    fn kernel_examples() {
        let k3 = Kernel::gaussian(vec![0.5, 1.0, 2.0]).unwrap();
        assert_eq!(k3.eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 3.0);
        assert!(k3.eval(&[0.0], &[1e3]).unwrap() < 1e-100);
        let k1 = Kernel::gaussian(vec![1.0]).unwrap();
        assert!((k1.eval(&[0.0], &[1.0]).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(k1.eval(&[0.0], &[1.0, 2.0]).is_err());
        assert!(Kernel::gaussian(vec![0.0]).is_err());
    }

    #[test]
    fn mmd_hand_expanded_two_points() {
        // M = 2, σ = 1, k(a, b) = exp(−(a−b)²/2). The ordered pairs (0,1) and
        // (1,0) contribute identical brackets, so MMD² = one bracket.
        let k = Kernel::gaussian(vec![1.0]).unwrap();
        let kk = |a: f64, b: f64| (-(a - b) * (a - b) / 2.0).exp();

        // z = {0, 1}, v = {0, 0}: k(0,1) − k(0,0) − k(1,0) + k(0,0) = 0
        let z = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        let expect = kk(0.0, 1.0) - kk(0.0, 0.0) - kk(1.0, 0.0) + kk(0.0, 0.0);
        assert_eq!(expect, 0.0);
        assert!(mmd_squared(&z, &v, &k).unwrap().abs() < 1e-15);

        // z = {0, 1}, v = {0.5, 2}: k(0,1) − k(0,2) − k(1,0.5) + k(0.5,2)
        let v = Tensor::from_rows(&[vec![0.5], vec![2.0]]).unwrap();
        let expect = kk(0.0, 1.0) - kk(0.0, 2.0) - kk(1.0, 0.5) + kk(0.5, 2.0);
        let closed = (-0.5f64).exp() - (-2.0f64).exp() - (-0.125f64).exp() + (-1.125f64).exp();
        assert!((expect - closed).abs() < 1e-15);
        let got = mmd_squared(&z, &v, &k).unwrap();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        assert!((got - brute_mmd(&z, &v, &[1.0])).abs() < 1e-15);
    }

    #[test]
    fn mmd_identical_batches_is_zero_and_symmetric() {
        let mut rng = Rng::seed(8);
        let kernel = Kernel::gaussian(vec![0.3, 1.0, 2.5]).unwrap();
        let z = randn(7, 3, &mut rng);
        assert_eq!(mmd_squared(&z, &z, &kernel).unwrap(), 0.0);
        let v = randn(7, 3, &mut rng);
        let a = mmd_squared(&z, &v, &kernel).unwrap();
        let b = mmd_squared(&v, &z, &kernel).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!((a - brute_mmd(&z, &v, kernel.bandwidths())).abs() < 1e-12);
    }

    #[test]
    fn mmd_graph_matches_direct() {
        let mut rng = Rng::seed(12);
        let kernel = KernelConfig::default().kernel(2).unwrap();
        for _ in 0..20 {
            let z = randn(9, 2, &mut rng);
            let v = sample_laplace(&LaplacePrior::default(), &[9, 2], &mut rng).unwrap();
            let mut g = Graph::new();
            let zi = g.constant(z.clone());
            let vi = g.constant(v.clone());
            let n = mmd_squared_node(&mut g, zi, vi, &kernel).unwrap();
            let direct = mmd_squared(&z, &v, &kernel).unwrap();
            assert!((g.value(n).item().unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_errors() {
        let k = Kernel::gaussian(vec![1.0]).unwrap();
        assert!(mmd_squared(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2]), &k).is_err());
        assert!(mmd_squared(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3, 1]), &k).is_err());
    }

    #[test]
    fn median_heuristic_uses_pooled_distances() {
        let z = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0], vec![10.0]]).unwrap();
        // distances: 1, 3, 10, 2, 9, 7 → sorted 1 2 3 7 9 10, element 3 → 7
        assert_eq!(median_pairwise_distance(&[&z, &v]), 7.0);
        let cfg = KernelConfig {
            multipliers: vec![1.0, 2.0],
            base: Some(1.0),
            median_heuristic: true,
        };
        assert_eq!(cfg.kernel_for(&z, &v).unwrap().bandwidths(), &[7.0, 14.0]);
    }

    #[test]
    fn laplace_quantile_and_moments() {
        let prior = LaplacePrior::default();
        assert_eq!(prior.quantile(0.5), 0.0);
        assert!((prior.variance() - 1.0).abs() < 1e-15);
        let x = sample_laplace(&prior, &[1_000_000], &mut Rng::seed(5)).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.numel() - 1) as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
        let below = x.data().iter().filter(|&&v| v <= 0.0).count() as f64 / x.numel() as f64;
        assert!((below - 0.5).abs() < 0.01);
        assert!(LaplacePrior::new(0.0).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let y = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(reconstruction_loss(&y, &y).unwrap(), 0.0);
        let y_hat = Tensor::from_rows(&[vec![2.0, 3.0, 3.0]]).unwrap();
        assert_eq!(reconstruction_loss(&y_hat, &y).unwrap(), 9.0);
        let doubled = Tensor::from_rows(&[vec![3.0, 5.0, 5.0]]).unwrap();
        assert_eq!(reconstruction_loss(&doubled, &y).unwrap(), 36.0);
        assert!(reconstruction_loss(&y, &Tensor::zeros(&[1, 2])).is_err());
    }

    fn spec(kernel: &Kernel, lambda_f: f64, lambda_d: f64, n: usize) -> ObjectiveSpec<'_> {
        ObjectiveSpec {
            weights: ObjectiveWeights { lambda_f, lambda_d },
            kernel,
            mmd_clone_count: n,
            similarity: SimilarityVariant::AnchoredL2,
        }
    }

    #[test]
    fn objective_reductions() {
        let mut rng = Rng::seed(44);
        let kernel = KernelConfig::default().kernel(2).unwrap();
        let clones: Vec<Tensor> = (0..3).map(|_| randn(4, 2, &mut rng)).collect();
        let v = randn(4, 2, &mut rng);
        let ds = similarity_loss(&clones, SimilarityVariant::AnchoredL2).unwrap();

        let only_s = total_objective(&clones, &v, None, None, &spec(&kernel, 0.0, 0.0, 1)).unwrap();
        assert_eq!(only_s.total, ds);

        let with_f = total_objective(&clones, &v, None, None, &spec(&kernel, 1.0, 0.0, 1)).unwrap();
        let mmd1 = mmd_squared(&clones[0], &v, &kernel).unwrap();
        assert!((with_f.total - (ds + mmd1)).abs() < 1e-12);
    }

    #[test]
    fn objective_recomposes_from_components() {
        let mut rng = Rng::seed(45);
        let kernel = KernelConfig::default().kernel(2).unwrap();
        let clones: Vec<Tensor> = (0..3).map(|_| randn(4, 2, &mut rng)).collect();
        let v = randn(4, 2, &mut rng);
        let outs: Vec<Tensor> = (0..3).map(|_| randn(4, 5, &mut rng)).collect();
        let y = randn(4, 5, &mut rng);
        let b = total_objective(&clones, &v, Some(&outs), Some(&y), &spec(&kernel, 0.7, 18.0, 2)).unwrap();

        let ds = similarity_loss(&clones, SimilarityVariant::AnchoredL2).unwrap();
        let df = mmd_squared(&clones[0], &v, &kernel).unwrap() + mmd_squared(&clones[1], &v, &kernel).unwrap();
        let dd: f64 = outs.iter().map(|o| reconstruction_loss(o, &y).unwrap()).sum();
        let expect = ds + 0.7 * df + 18.0 * dd;
        assert!((b.total - expect).abs() < 1e-10 * expect.abs().max(1.0));
        assert!((b.d_s + 0.7 * b.d_f + 18.0 * b.d_d - b.total).abs() < 1e-12 * b.total.abs().max(1.0));
    }

    #[test]
    fn objective_validation() {
        let kernel = KernelConfig::default().kernel(2).unwrap();
        let clones = vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 2])];
        let v = Tensor::zeros(&[3, 2]);
        assert!(total_objective(&clones, &v, None, None, &spec(&kernel, 1.0, 18.0, 1)).is_err());
        assert!(total_objective(&clones, &v, None, None, &spec(&kernel, 1.0, 0.0, 0)).is_err());
        assert!(total_objective(&clones, &v, None, None, &spec(&kernel, 1.0, 0.0, 3)).is_err());
        assert!(total_objective(&clones, &v, None, None, &spec(&kernel, -1.0, 0.0, 1)).is_err());
    }

    #[test]
    fn loss_gradients_pass_check() {
        let mut rng = Rng::seed(46);
        let kernel = KernelConfig::default().kernel(2).unwrap();
        let mut params: Vec<Tensor> = (0..3).map(|_| randn(4, 2, &mut rng)).collect();
        params.push(randn(4, 3, &mut rng));
        params.push(randn(4, 3, &mut rng));
        let v = randn(4, 2, &mut rng);
        let y = randn(4, 3, &mut rng);
        for variant in [
            SimilarityVariant::AnchoredL2,
            SimilarityVariant::AnchoredL1,
            SimilarityVariant::AllPairsL2,
        ] {
            let build = |g: &mut Graph, p: &[NodeId]| {
                let prior = g.constant(v.clone());
                let target = g.constant(y.clone());
                let nodes = objective_node(
                    g,
                    &p[..3],
                    prior,
                    Some(DecoderTerms {
                        outputs: &p[3..],
                        target,
                    }),
                    &ObjectiveSpec {
                        weights: ObjectiveWeights::default(),
                        kernel: &kernel,
                        mmd_clone_count: 2,
                        similarity: variant,
                    },
                )?;
                Ok(nodes.total)
            };
            let report = grad_check(build, &params, 1e-5, 1e-5).unwrap();
            assert!(report.passed, "{variant:?}: {report:?}");
        }
    }

    #[test]
    fn mmd_gradient_in_both_arguments() {
        let mut rng = Rng::seed(47);
        let kernel = KernelConfig::default().kernel(3).unwrap();
        let params = vec![randn(5, 3, &mut rng), randn(5, 3, &mut rng)];
        let build = |g: &mut Graph, p: &[NodeId]| mmd_squared_node(g, p[0], p[1], &kernel);
        let report = grad_check(build, &params, 1e-5, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
