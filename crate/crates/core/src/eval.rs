//! PCA baseline, smoothness metrics and figure export.
//!
//! All distances are Euclidean. Features handed to the metrics are usually
//! means over `R` excitation redraws per gain row (see [`mean_features`]): a
//! single observation carries too little information about its gains for any
//! extractor to order neighbours reliably.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{mmd_squared, sample_laplace, similarity_loss, LaplacePrior};
use crate::nn::{encode, EncoderParams};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::toydata::{sample_batch, FormantWorld};
use crate::trainer::{Checkpoint, TrainConfig};

/// Principal subspace of a sample covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[k×d]`, orthonormal rows.
    pub components: Tensor,
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order and the matching unit
/// eigenvectors as rows. Each vector's largest-magnitude entry is positive.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(Error::invalid(format!(
            "eigen needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.rows();
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a.get(i, j), a.get(j, i));
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return Err(Error::invalid("eigen needs a symmetric matrix"));
            }
        }
    }
    let mut m = a.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * frob || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * kp - s * kq;
                    m[k * n + q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * pk - s * qk;
                    m[q * n + k] = s * pk + c * qk;
                }
                for k in 0..n {
                    let (kp, kq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * kp - s * kq;
                    v[k * n + q] = s * kp + c * kq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut rows = Vec::with_capacity(n * n);
    for &col in &order {
        let mut vec: Vec<f64> = (0..n).map(|k| v[k * n + col]).collect();
        let pivot = vec
            .iter()
            .copied()
            .fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        if pivot < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
        rows.extend(vec);
    }
    Ok((values, Tensor::matrix(n, n, rows)?))
}

/// Top-`k` principal components of the rows of `data`.
pub fn pca_fit(data: &Tensor, k: usize) -> Result<PcaModel> {
    if !data.is_matrix() {
        return Err(Error::invalid("pca needs an N×d matrix"));
    }
    let (n, d) = (data.rows(), data.cols());
    if k == 0 || k > d {
        return Err(Error::invalid(format!("pca needs 1 ≤ k ≤ {d}, got {k}")));
    }
    if n < 2 || (n <= d && n <= k) {
        return Err(Error::invalid(format!("pca: too few rows ({n}) for d = {d}, k = {k}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = data.data().to_vec();
    for row in centered.chunks_exact_mut(d) {
        for (x, m) in row.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let centered = Tensor::matrix(n, d, centered)?;
    let cov = centered.transpose()?.matmul(&centered)?;
    let cov = cov.map(|x| x / (n - 1) as f64);
    // exact symmetry for the eigen solver
    let mut sym = cov.data().to_vec();
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (sym[i * d + j] + sym[j * d + i]);
            sym[i * d + j] = s;
            sym[j * d + i] = s;
        }
    }
    let (values, vectors) = symmetric_eigen(&Tensor::matrix(d, d, sym)?)?;
    Ok(PcaModel {
        mean,
        components: vectors.slice_rows(0, k)?,
        eigenvalues: values[..k].to_vec(),
    })
}

/// `components · (x − mean)`
pub fn pca_project(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.mean.len() {
        return Err(Error::Shape {
            op: "pca_project",
            lhs: vec![x.len()],
            rhs: vec![model.mean.len()],
        });
    }
    let c = &model.components;
    Ok((0..c.rows())
        .map(|r| {
            c.row(r)
                .iter()
                .zip(x)
                .zip(&model.mean)
                .map(|((w, x), m)| w * (x - m))
                .sum()
        })
        .collect())
}

impl PcaModel {
    pub fn project_rows(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() {
            return Err(Error::invalid("pca projection needs a matrix"));
        }
        let mut out = Vec::with_capacity(x.rows() * self.components.rows());
        for i in 0..x.rows() {
            out.extend(pca_project(self, x.row(i))?);
        }
        Tensor::matrix(x.rows(), self.components.rows(), out)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_paired(psi: &Tensor, z: &Tensor) -> Result<()> {
    if !psi.is_matrix() || !z.is_matrix() || psi.rows() != z.rows() {
        return Err(Error::Shape {
            op: "paired rows",
            lhs: psi.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    Ok(())
}

/// Sorted indices of the `k` nearest other rows of row `i`; ties go to the
/// lower index.
fn knn(x: &Tensor, i: usize, k: usize, scratch: &mut Vec<(f64, usize)>) -> Vec<usize> {
    scratch.clear();
    let xi = x.row(i);
    scratch.extend((0..x.rows()).filter(|&j| j != i).map(|j| (sq_dist(xi, x.row(j)), j)));
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    scratch.select_nth_unstable_by(k - 1, cmp);
    let mut idx: Vec<usize> = scratch[..k].iter().map(|p| p.1).collect();
    idx.sort_unstable();
    idx
}

/// Mean fraction of each row's `k_nn` nearest neighbours in ψ-space that are
/// also among its `k_nn` nearest neighbours in z-space.
pub fn neighbor_preservation(psi: &Tensor, z: &Tensor, k_nn: usize) -> Result<f64> {
    check_paired(psi, z)?;
    let n = psi.rows();
    if k_nn == 0 || n <= k_nn {
        return Err(Error::invalid(format!(
            "neighbor preservation needs N > k_nn ≥ 1, got N = {n}, k_nn = {k_nn}"
        )));
    }
    let mut scratch = Vec::with_capacity(n);
    let mut hits = 0usize;
    for i in 0..n {
        let a = knn(psi, i, k_nn, &mut scratch);
        let b = knn(z, i, k_nn, &mut scratch);
        let (mut x, mut y) = (0, 0);
        while x < a.len() && y < b.len() {
            match a[x].cmp(&b[y]) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => {
                    hits += 1;
                    x += 1;
                    y += 1;
                }
            }
        }
    }
    Ok(hits as f64 / (n * k_nn) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookNmi {
    /// `I(A; B) / H(A)` with `A` the ψ-space labels.
    pub nmi: f64,
    /// Codebook entries that no point chose in ψ-space.
    pub empty_psi_cells: usize,
    /// Codebook entries that no point chose in z-space.
    pub empty_z_cells: usize,
}

fn nearest(codebook: &[&[f64]], x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, entry) in codebook.iter().enumerate() {
        let d = sq_dist(entry, x);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Agreement between nearest-codebook assignments in ψ-space and z-space.
///
/// The codebook is `codebook_size` distinct rows drawn from `rng`; the z-space
/// codebook uses the features of the same rows. Empty cells contribute
/// nothing to either entropy and are counted in the result.
pub fn codebook_nmi(psi: &Tensor, z: &Tensor, codebook_size: usize, rng: &mut Rng) -> Result<CodebookNmi> {
    check_paired(psi, z)?;
    let n = psi.rows();
    if codebook_size < 2 || n < 2 * codebook_size {
        return Err(Error::invalid(format!(
            "codebook NMI needs size ≥ 2 and N ≥ 2·size, got size {codebook_size}, N = {n}"
        )));
    }
    nmi_with_codebook(psi, z, &rng.choose_distinct(n, codebook_size))
}

fn nmi_with_codebook(psi: &Tensor, z: &Tensor, picks: &[usize]) -> Result<CodebookNmi> {
    let n = psi.rows();
    let codebook_size = picks.len();
    let cb_psi: Vec<&[f64]> = picks.iter().map(|&i| psi.row(i)).collect();
    let cb_z: Vec<&[f64]> = picks.iter().map(|&i| z.row(i)).collect();
    let k = codebook_size;
    let mut joint = vec![0usize; k * k];
    for i in 0..n {
        let a = nearest(&cb_psi, psi.row(i));
        let b = nearest(&cb_z, z.row(i));
        joint[a * k + b] += 1;
    }
    let count_a: Vec<usize> = (0..k).map(|a| joint[a * k..(a + 1) * k].iter().sum()).collect();
    let count_b: Vec<usize> = (0..k).map(|b| (0..k).map(|a| joint[a * k + b]).sum()).collect();
    let nf = n as f64;
    let h_a: f64 = count_a
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / nf;
            -p * p.ln()
        })
        .sum();
    if h_a <= 0.0 {
        return Err(Error::invalid("codebook NMI: every point fell in one ψ cell"));
    }
    let mut mi = 0.0;
    for a in 0..k {
        for b in 0..k {
            let c = joint[a * k + b];
            if c > 0 {
                let p = c as f64 / nf;
                mi += p * (p * nf * nf / (count_a[a] as f64 * count_b[b] as f64)).ln();
            }
        }
    }
    Ok(CodebookNmi {
        nmi: (mi / h_a).clamp(0.0, 1.0),
        empty_psi_cells: count_a.iter().filter(|&&c| c == 0).count(),
        empty_z_cells: count_b.iter().filter(|&&c| c == 0).count(),
    })
}

/// Pearson correlation of every z column with every ψ column, `[d_z × P]`.
/// Constant columns correlate as 0.
pub fn correlation_matrix(z: &Tensor, psi: &Tensor) -> Result<Tensor> {
    check_paired(psi, z)?;
    let n = z.rows() as f64;
    let column = |t: &Tensor, c: usize| -> Vec<f64> {
        let col: Vec<f64> = (0..t.rows()).map(|i| t.get(i, c)).collect();
        let mean = col.iter().sum::<f64>() / n;
        col.into_iter().map(|x| x - mean).collect()
    };
    let zc: Vec<Vec<f64>> = (0..z.cols()).map(|c| column(z, c)).collect();
    let pc: Vec<Vec<f64>> = (0..psi.cols()).map(|c| column(psi, c)).collect();
    let mut out = Vec::with_capacity(zc.len() * pc.len());
    for a in &zc {
        for b in &pc {
            let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let den = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
            out.push(if den > 0.0 { num / den } else { 0.0 });
        }
    }
    Tensor::matrix(zc.len(), pc.len(), out)
}

/// The one-to-one pairing of ψ axes with z axes maximising mean |corr|.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `pairs[p]` is the z axis matched to ψ axis `p`.
    pub pairs: Vec<usize>,
    pub assigned_mean: f64,
    /// Mean |corr| over all other (z, ψ) cells.
    pub off_mean: f64,
}

pub fn best_assignment(corr: &Tensor) -> Result<Assignment> {
    if !corr.is_matrix() || corr.rows() < corr.cols() || corr.cols() == 0 || corr.rows() > 10 {
        return Err(Error::invalid(format!(
            "assignment needs a d_z × P matrix with P ≤ d_z ≤ 10, got {:?}",
            corr.shape()
        )));
    }
    let (nz, np) = (corr.rows(), corr.cols());
    fn search(corr: &Tensor, p: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if p == corr.cols() {
            let s: f64 = cur.iter().enumerate().map(|(p, &z)| corr.get(z, p).abs()).sum();
            if s > best.0 {
                *best = (s, cur.clone());
            }
            return;
        }
        for z in 0..corr.rows() {
            if !used[z] {
                used[z] = true;
                cur.push(z);
                search(corr, p + 1, used, cur, best);
                cur.pop();
                used[z] = false;
            }
        }
    }
    let mut best = (-1.0, Vec::new());
    search(corr, 0, &mut vec![false; nz], &mut Vec::new(), &mut best);
    let total: f64 = corr.data().iter().map(|x| x.abs()).sum();
    let off_cells = nz * np - np;
    Ok(Assignment {
        pairs: best.1,
        assigned_mean: best.0 / np as f64,
        off_mean: if off_cells > 0 {
            (total - best.0) / off_cells as f64
        } else {
            0.0
        },
    })
}

/// Mean of `extract` over `redraws` fresh observations of each gain row.
pub fn mean_features(
    world: &FormantWorld,
    psi: &Tensor,
    redraws: usize,
    rng: &mut Rng,
    extract: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if redraws == 0 {
        return Err(Error::invalid("need at least one redraw"));
    }
    const CHUNK: usize = 256;
    let n = psi.rows();
    let mut out: Vec<f64> = Vec::new();
    let mut cols = 0;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let m = end - start;
        let x = world.observe_at(&psi.slice_rows(start, end)?, redraws, rng)?;
        let z = extract(&x)?;
        cols = z.cols();
        let mut acc = vec![0.0; m * cols];
        for r in 0..redraws {
            for (a, v) in acc.iter_mut().zip(&z.data()[r * m * cols..(r + 1) * m * cols]) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a / redraws as f64));
    }
    Tensor::matrix(n, cols, out)
}

/// Gains drawn uniformly from the unit square.
pub fn uniform_gains(world: &FormantWorld, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let p = world.formants();
    Tensor::matrix(n, p, (0..n * p).map(|_| rng.uniform()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub neighbor_points: usize,
    pub k_nn: usize,
    pub codebook_points: usize,
    pub codebook_size: usize,
    /// Excitation redraws averaged per gain row.
    pub redraws: usize,
    /// Rows in the MMD² sample against the prior.
    pub mmd_points: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            neighbor_points: 2000,
            k_nn: 10,
            codebook_points: 10_000,
            codebook_size: 64,
            redraws: 64,
            mmd_points: 1000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Similarity term on a fresh noise-free clone batch.
    pub clone_discrepancy: f64,
    /// MMD² between single-observation features and prior samples.
    pub mmd_to_prior: f64,
    pub neighbor_preservation: f64,
    pub codebook_nmi: CodebookNmi,
    /// The same two metrics on single observations, without averaging.
    pub neighbor_preservation_single: f64,
    pub codebook_nmi_single: CodebookNmi,
    /// `[d_z][P]` correlation of averaged features with the gains.
    pub correlation: Vec<Vec<f64>>,
    pub assignment: Option<Assignment>,
}

/// Runs every metric on `extract`, a map from observation rows to feature rows.
pub fn evaluate_extractor(
    world: &FormantWorld,
    config: &TrainConfig,
    options: &EvalOptions,
    extract: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<EvalReport> {
    let mut rng = Rng::seed(options.seed);

    let batch = sample_batch(world, config.clones, config.batch, &mut rng, Default::default())?;
    let feats: Vec<Tensor> = (0..batch.clones())
        .map(|q| extract(&batch.clone_obs(q)))
        .collect::<Result<_>>()?;
    let clone_discrepancy = similarity_loss(&feats, config.similarity)?;

    let psi = uniform_gains(world, options.mmd_points, &mut rng)?;
    let z = extract(&world.observe_at(&psi, 1, &mut rng)?)?;
    let prior = LaplacePrior::new(config.prior_scale)?;
    let v = sample_laplace(&prior, z.shape(), &mut rng)?;
    let mmd_to_prior = mmd_squared(&z, &v, &config.kernel.kernel_for(&z, &v)?)?;

    let psi = uniform_gains(world, options.neighbor_points, &mut rng)?;
    let z = mean_features(world, &psi, options.redraws, &mut rng, extract)?;
    let neighbor_preservation = neighbor_preservation(&psi, &z, options.k_nn)?;
    let z1 = extract(&world.observe_at(&psi, 1, &mut rng)?)?;
    let neighbor_preservation_single = self::neighbor_preservation(&psi, &z1, options.k_nn)?;

    let psi = uniform_gains(world, options.codebook_points, &mut rng)?;
    let z = mean_features(world, &psi, options.redraws, &mut rng, extract)?;
    let codebook_seed = rng.next_u64();
    let nmi = codebook_nmi(&psi, &z, options.codebook_size, &mut Rng::seed(codebook_seed))?;
    let z1 = extract(&world.observe_at(&psi, 1, &mut rng)?)?;
    let nmi_single = codebook_nmi(&psi, &z1, options.codebook_size, &mut Rng::seed(codebook_seed))?;

    let corr = correlation_matrix(&z, &psi)?;
    let assignment = (corr.rows() >= corr.cols() && corr.rows() <= 10)
        .then(|| best_assignment(&corr))
        .transpose()?;
    Ok(EvalReport {
        clone_discrepancy,
        mmd_to_prior,
        neighbor_preservation,
        codebook_nmi: nmi,
        neighbor_preservation_single,
        codebook_nmi_single: nmi_single,
        correlation: (0..corr.rows()).map(|r| corr.row(r).to_vec()).collect(),
        assignment,
    })
}

/// Metrics of a checkpoint's encoder on its own world.
pub fn evaluate(checkpoint: &Checkpoint, options: &EvalOptions) -> Result<EvalReport> {
    let world = FormantWorld::new(checkpoint.config.world.clone())?;
    let encoder = checkpoint.encoder()?;
    evaluate_extractor(&world, &checkpoint.config, options, &|x| encode(&encoder, x))
}

/// PCA fitted on `fit_points` single observations, as a feature extractor.
pub fn fit_pca_baseline(world: &FormantWorld, k: usize, fit_points: usize, seed: u64) -> Result<PcaModel> {
    let mut rng = Rng::seed(seed);
    let psi = uniform_gains(world, fit_points, &mut rng)?;
    pca_fit(&world.observe_at(&psi, 1, &mut rng)?, k)
}

/// Square lattice of gains over `[0, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Nodes per side.
    pub side: usize,
    pub redraws: usize,
    pub seed: u64,
    pub svg: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            side: 10,
            redraws: 64,
            seed: 11,
            svg: true,
        }
    }
}

/// Grid gains, their mean features and the lattice edges.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureData {
    /// `[side² × 2]`, node `i·side + j` at `(i, j) / (side − 1)`.
    pub psi: Tensor,
    pub z: Tensor,
    pub edges: Vec<(usize, usize)>,
}

pub fn grid_edges(side: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(2 * side * side.saturating_sub(1));
    for i in 0..side {
        for j in 0..side {
            let node = i * side + j;
            if j + 1 < side {
                edges.push((node, node + 1));
            }
            if i + 1 < side {
                edges.push((node, node + side));
            }
        }
    }
    edges
}

pub fn figure_data(world: &FormantWorld, encoder: &EncoderParams, grid: &GridSpec) -> Result<FigureData> {
    if world.formants() != 2 {
        return Err(Error::invalid("figure export needs exactly two formants"));
    }
    if grid.side < 2 {
        return Err(Error::invalid("grid side must be ≥ 2"));
    }
    let s = grid.side;
    let step = 1.0 / (s - 1) as f64;
    let psi: Vec<f64> = (0..s * s)
        .flat_map(|n| [(n / s) as f64 * step, (n % s) as f64 * step])
        .collect();
    let psi = Tensor::matrix(s * s, 2, psi)?;
    let mut rng = Rng::seed(grid.seed);
    let z = mean_features(world, &psi, grid.redraws, &mut rng, &|x| encode(encoder, x))?;
    Ok(FigureData {
        psi,
        z,
        edges: grid_edges(s),
    })
}

/// Files written by [`export_figure_data`].
#[derive(Clone, Debug, PartialEq)]
pub struct FigureFiles {
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Writes the grid correspondence as CSV at `path` and, when requested, an SVG
/// next to it.
pub fn export_figure_data(
    world: &FormantWorld,
    checkpoint: &Checkpoint,
    grid: &GridSpec,
    path: &Path,
) -> Result<FigureFiles> {
    let data = figure_data(world, &checkpoint.encoder()?, grid)?;
    fs::write(path, figure_csv(&data))?;
    let svg = if grid.svg {
        let p = path.with_extension("svg");
        fs::write(&p, figure_svg(&data)?)?;
        Some(p)
    } else {
        None
    };
    Ok(FigureFiles {
        csv: path.to_path_buf(),
        svg,
    })
}

pub fn figure_csv(data: &FigureData) -> String {
    let k = data.z.cols();
    let mut out = String::from("psi_1,psi_2");
    for c in 1..=k {
        write!(out, ",z_{c}").unwrap();
    }
    out.push('\n');
    for i in 0..data.psi.rows() {
        let fields: Vec<String> = data
            .psi
            .row(i)
            .iter()
            .chain(data.z.row(i))
            .map(|x| format!("{x:?}"))
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Reads back `(ψ, z)` from a figure CSV.
pub fn import_figure_csv(path: &Path) -> Result<(Tensor, Tensor)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let k = header.len().saturating_sub(2);
    let expect_z = (1..=k).map(|c| format!("z_{c}"));
    if header.len() < 3 || header[0] != "psi_1" || header[1] != "psi_2" || !header[2..].iter().copied().eq(expect_z) {
        return Err(Error::format("figure csv", format!("unexpected header {header:?}")));
    }
    let (mut psi, mut z, mut n) = (Vec::new(), Vec::new(), 0);
    for (ln, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("figure csv", format!("line {}: {e}", ln + 2)))?;
        if vals.len() != k + 2 {
            return Err(Error::format(
                "figure csv",
                format!("line {}: expected {} fields", ln + 2, k + 2),
            ));
        }
        psi.extend_from_slice(&vals[..2]);
        z.extend_from_slice(&vals[2..]);
        n += 1;
    }
    Ok((Tensor::matrix(n, 2, psi)?, Tensor::matrix(n, k, z)?))
}

/// Least-squares affine map taking feature rows onto their gains, for display.
fn align_to_gains(psi: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (n, k) = (z.rows(), z.cols());
    let m = k + 1;
    // normal equations [z 1]ᵀ[z 1] A = [z 1]ᵀ ψ with a tiny ridge
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m * 2];
    for i in 0..n {
        let row: Vec<f64> = z.row(i).iter().copied().chain([1.0]).collect();
        for a in 0..m {
            for b in 0..m {
                ata[a * m + b] += row[a] * row[b];
            }
            for c in 0..2 {
                atb[a * 2 + c] += row[a] * psi.get(i, c);
            }
        }
    }
    let trace: f64 = (0..m).map(|a| ata[a * m + a]).sum();
    for a in 0..k {
        ata[a * m + a] += 1e-9 * trace.max(1e-300);
    }
    let coef = solve(m, &mut ata, &mut atb, 2)?;
    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        for c in 0..2 {
            let mut s = coef[k * 2 + c];
            for a in 0..k {
                s += z.get(i, a) * coef[a * 2 + c];
            }
            out.push(s);
        }
    }
    Tensor::matrix(n, 2, out)
}

/// Gaussian elimination with partial pivoting on `a [m×m]`, `b [m×r]`.
fn solve(m: usize, a: &mut [f64], b: &mut [f64], r: usize) -> Result<Vec<f64>> {
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[i * m + col].abs().total_cmp(&a[j * m + col].abs()))
            .expect("non-empty");
        if a[piv * m + col] == 0.0 {
            return Err(Error::invalid("singular alignment system"));
        }
        for c in 0..m {
            a.swap(col * m + c, piv * m + c);
        }
        for c in 0..r {
            b.swap(col * r + c, piv * r + c);
        }
        for row in col + 1..m {
            let f = a[row * m + col] / a[col * m + col];
            for c in col..m {
                a[row * m + c] -= f * a[col * m + c];
            }
            for c in 0..r {
                b[row * r + c] -= f * b[col * r + c];
            }
        }
    }
    let mut x = vec![0.0; m * r];
    for row in (0..m).rev() {
        for c in 0..r {
            let mut s = b[row * r + c];
            for k in row + 1..m {
                s -= a[row * m + k] * x[k * r + c];
            }
            x[row * r + c] = s / a[row * m + row];
        }
    }
    Ok(x)
}

/// Self-contained scatter: gains in blue, features in green, a black segment
/// from each gain node to its feature and the lattice drawn in both spaces.
///
/// Features are placed with the least-squares affine map onto the gains.
/// Every element carries `data-node` (or `data-from`/`data-to` for edges).
pub fn figure_svg(data: &FigureData) -> Result<String> {
    const SIZE: f64 = 800.0;
    const MARGIN: f64 = 40.0;
    let aligned = align_to_gains(&data.psi, &data.z)?;
    let n = data.psi.rows();
    let all = data.psi.data().iter().chain(aligned.data());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (i, &v) in all.enumerate() {
        lo[i % 2] = lo[i % 2].min(v);
        hi[i % 2] = hi[i % 2].max(v);
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let place = |t: &Tensor, i: usize| {
        let x = MARGIN + (t.get(i, 0) - lo[0]) * scale;
        let y = SIZE - MARGIN - (t.get(i, 1) - lo[1]) * scale;
        (x, y)
    };

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 800" width="800" height="800">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="800" height="800" fill="white"/>"#).unwrap();
    for (id, t, colour) in [
        ("truth-grid", &data.psi, "#9ecae1"),
        ("feature-grid", &aligned, "#a1d99b"),
    ] {
        writeln!(s, r#"<g id="{id}" stroke="{colour}" stroke-width="1">"#).unwrap();
        for &(a, b) in &data.edges {
            let ((x1, y1), (x2, y2)) = (place(t, a), place(t, b));
            writeln!(
                s,
                r#"<line data-from="{a}" data-to="{b}" x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}"/>"#
            )
            .unwrap();
        }
        s.push_str("</g>\n");
    }
    s.push_str("<g id=\"correspondence\" stroke=\"black\" stroke-width=\"1\">\n");
    for i in 0..n {
        let ((x1, y1), (x2, y2)) = (place(&data.psi, i), place(&aligned, i));
        writeln!(
            s,
            r#"<line data-node="{i}" x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}"/>"#
        )
        .unwrap();
    }
    s.push_str("</g>\n");
    for (id, t, colour) in [("ground-truth", &data.psi, "blue"), ("features", &aligned, "green")] {
        writeln!(s, r#"<g id="{id}" fill="{colour}">"#).unwrap();
        for i in 0..n {
            let (x, y) = place(t, i);
            writeln!(s, r#"<circle data-node="{i}" cx="{x:.3}" cy="{y:.3}" r="4"/>"#).unwrap();
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
