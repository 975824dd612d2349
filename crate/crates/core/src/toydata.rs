//! Synthetic formant world.
//!
//! Each observation is a sum of `P` formants, each a bundle of `L` fixed basis
//! directions `v_{p,l} ∈ R^d`:
//!
//! ```text
//! x^(q) = Σ_p Σ_l (ψ_p + γ^(q)_{p,l}) · w^(q)_{p,l} · v_{p,l}
//! ```
//!
//! The gains `ψ_p ~ U(0,1)` are shared by every clone of a batch row; the
//! excitations `w ~ U(−1,1)` and jitters `γ ~ U(−b_p, b_p)` are drawn per clone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Whether the jitter `γ` is drawn per basis component or once per formant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JitterMode {
    #[default]
    PerComponent,
    PerFormant,
}

/// Clean decoder target emitted alongside each batch (always with `γ = 0`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// `Σ_p ψ_p Σ_l v_{p,l}`: a function of the shared gains only.
    #[default]
    UnitExcitation,
    /// `Σ_p Σ_l ψ_p w^(1)_{p,l} v_{p,l}`: reuses the first clone's excitations.
    FirstCloneExcitation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub formants: usize,
    pub components: usize,
    pub dim: usize,
    pub gamma_bounds: Vec<f64>,
    pub jitter: JitterMode,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            formants: 2,
            components: 10,
            dim: 30,
            gamma_bounds: vec![0.01, 0.005],
            jitter: JitterMode::PerComponent,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.formants == 0 || self.components == 0 || self.dim == 0 {
            return Err(Error::invalid(format!(
                "formants, components and dim must be ≥ 1, got {}, {}, {}",
                self.formants, self.components, self.dim
            )));
        }
        if self.gamma_bounds.len() != self.formants {
            return Err(Error::invalid(format!(
                "need one gamma bound per formant ({}), got {}",
                self.formants,
                self.gamma_bounds.len()
            )));
        }
        if self.gamma_bounds.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(Error::invalid("gamma bounds must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// A frozen set of basis vectors plus jitter bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct FormantWorld {
    config: WorldConfig,
    /// `formants × components × dim`, row-major.
    basis: Vec<f64>,
}

pub fn make_world(config: &WorldConfig) -> Result<FormantWorld> {
    FormantWorld::new(config.clone())
}

impl FormantWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(config.seed);
        let n = config.formants * config.components * config.dim;
        let basis = (0..n).map(|_| rng.normal()).collect();
        Ok(Self { config, basis })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn formants(&self) -> usize {
        self.config.formants
    }

    pub fn components(&self) -> usize {
        self.config.components
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// `v_{p,l}`.
    pub fn basis_vector(&self, p: usize, l: usize) -> &[f64] {
        let d = self.dim();
        let start = (p * self.components() + l) * d;
        &self.basis[start..start + d]
    }

    fn accumulate(&self, out: &mut [f64], p: usize, l: usize, coeff: f64) {
        for (o, v) in out.iter_mut().zip(self.basis_vector(p, l)) {
            *o += coeff * v;
        }
    }

    /// One observation for gains `psi`; draws excitations and jitter from `rng`
    /// and records the excitations in `w_out` (`formants × components`).
    fn observe(&self, psi: &[f64], rng: &mut Rng, shared_w: Option<&[f64]>, w_out: &mut [f64], out: &mut [f64]) {
        let (np, nl) = (self.formants(), self.components());
        out.fill(0.0);
        for p in 0..np {
            let b = self.config.gamma_bounds[p];
            let formant_gamma = match self.config.jitter {
                JitterMode::PerFormant => Some(rng.uniform_in(-b, b)),
                JitterMode::PerComponent => None,
            };
            for l in 0..nl {
                let drawn_w = rng.uniform_in(-1.0, 1.0);
                let gamma = formant_gamma.unwrap_or_else(|| rng.uniform_in(-b, b));
                let w = shared_w.map_or(drawn_w, |s| s[p * nl + l]);
                w_out[p * nl + l] = w;
                self.accumulate(out, p, l, (psi[p] + gamma) * w);
            }
        }
    }

    fn target(&self, psi: &[f64], first_w: &[f64], mode: TargetMode, out: &mut [f64]) {
        let nl = self.components();
        out.fill(0.0);
        for (p, &gain) in psi.iter().enumerate() {
            for l in 0..nl {
                let w = match mode {
                    TargetMode::UnitExcitation => 1.0,
                    TargetMode::FirstCloneExcitation => first_w[p * nl + l],
                };
                self.accumulate(out, p, l, gain * w);
            }
        }
    }

    /// Fresh observations at given gains, `reps` independent draws per row.
    ///
    /// Returns `[reps·N × d]` with repetition-major order: rows `r·N..(r+1)·N`
    /// hold repetition `r` of every gain row.
    pub fn observe_at(&self, psi: &Tensor, reps: usize, rng: &mut Rng) -> Result<Tensor> {
        if !psi.is_matrix() || psi.cols() != self.formants() {
            return Err(Error::Shape {
                op: "observe_at",
                lhs: psi.shape().to_vec(),
                rhs: vec![self.formants()],
            });
        }
        let (n, d) = (psi.rows(), self.dim());
        let mut data = vec![0.0; reps * n * d];
        let mut w = vec![0.0; self.formants() * self.components()];
        for r in 0..reps {
            for i in 0..n {
                let row = (r * n + i) * d;
                self.observe(psi.row(i), rng, None, &mut w, &mut data[row..row + d]);
            }
        }
        Tensor::new(vec![reps * n, d], data)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    pub target: TargetMode,
    /// Reuse the first clone's excitations for every clone.
    pub share_excitation: bool,
}

/// `Q` equivalent observations of each of `batch` gain rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CloneBatch {
    /// `[Q, batch, d]`
    pub x: Tensor,
    /// `[batch, P]`
    pub psi: Tensor,
    /// `[batch, d]`
    pub target: Tensor,
}

impl CloneBatch {
    pub fn clones(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn batch(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[2]
    }

    /// Observations of clone `q` as `[batch × d]`.
    pub fn clone_obs(&self, q: usize) -> Tensor {
        let n = self.batch() * self.dim();
        Tensor::from_parts(
            vec![self.batch(), self.dim()],
            self.x.data()[q * n..(q + 1) * n].to_vec(),
        )
    }

    /// All clones stacked clone-major as `[Q·batch × d]`.
    pub fn stacked(&self) -> Tensor {
        Tensor::from_parts(vec![self.clones() * self.batch(), self.dim()], self.x.data().to_vec())
    }
}

/// Draw order per batch row: gains, then for each clone the (w, γ) pairs.
pub fn sample_batch(
    world: &FormantWorld,
    clones: usize,
    batch: usize,
    rng: &mut Rng,
    options: SampleOptions,
) -> Result<CloneBatch> {
    if clones == 0 || batch == 0 {
        return Err(Error::invalid("clone and batch counts must be ≥ 1"));
    }
    let (np, d) = (world.formants(), world.dim());
    let nw = np * world.components();
    let mut x = vec![0.0; clones * batch * d];
    let mut psi = vec![0.0; batch * np];
    let mut target = vec![0.0; batch * d];
    let mut first_w = vec![0.0; nw];
    let mut w = vec![0.0; nw];

    for t in 0..batch {
        let gains = &mut psi[t * np..(t + 1) * np];
        for g in gains.iter_mut() {
            *g = rng.uniform();
        }
        let gains = &psi[t * np..(t + 1) * np];
        for q in 0..clones {
            let row = (q * batch + t) * d;
            let shared = (options.share_excitation && q > 0).then_some(first_w.as_slice());
            world.observe(gains, rng, shared, &mut w, &mut x[row..row + d]);
            if q == 0 {
                first_w.copy_from_slice(&w);
            }
        }
        world.target(gains, &first_w, options.target, &mut target[t * d..(t + 1) * d]);
    }
    Ok(CloneBatch {
        x: Tensor::new(vec![clones, batch, d], x)?,
        psi: Tensor::new(vec![batch, np], psi)?,
        target: Tensor::new(vec![batch, d], target)?,
    })
}

/// Everything needed to regenerate a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub world: WorldConfig,
    pub clones: usize,
    pub batch: usize,
    pub batches: usize,
    pub seed: u64,
    pub options: SampleOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub batches: Vec<CloneBatch>,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let world = FormantWorld::new(spec.world.clone())?;
    let mut rng = Rng::seed(spec.seed);
    let batches = (0..spec.batches)
        .map(|_| sample_batch(&world, spec.clones, spec.batch, &mut rng, spec.options))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        batches,
    })
}

const MAGIC: &[u8; 4] = b"SFTD";
const VERSION: u16 = 1;

fn write_array(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &s in t.shape() {
        w.write_all(&(s as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("dataset", "truncated file"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_array(r: &mut impl Read, expect: &[usize]) -> Result<Tensor> {
    let ndim = u32::from_le_bytes(read_exact(r)?) as usize;
    if ndim != expect.len() {
        return Err(Error::format(
            "dataset",
            format!("array rank {ndim}, expected {}", expect.len()),
        ));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
    }
    if shape != expect {
        return Err(Error::format(
            "dataset",
            format!("array shape {shape:?}, expected {expect:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(read_exact(r)?));
    }
    Tensor::new(shape, data).map_err(|e| Error::format("dataset", e.to_string()))
}

/// Writes `SFTD`, a `u16` version, a length-prefixed JSON spec and then every
/// batch's `x`, `psi` and `target` arrays (rank, `u64` extents, `f64` data;
/// all little-endian).
pub fn export_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(&dataset.spec)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(dataset.batches.len() as u64).to_le_bytes())?;
    for b in &dataset.batches {
        write_array(&mut w, &b.x)?;
        write_array(&mut w, &b.psi)?;
        write_array(&mut w, &b.target)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::format("dataset", "bad magic bytes"));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::format("dataset", format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    if len > 1 << 24 {
        return Err(Error::format("dataset", "config block too large"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::format("dataset", "truncated file"))?;
    let spec: DatasetSpec = serde_json::from_slice(&json).map_err(|e| Error::format("dataset", e.to_string()))?;
    let count = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    if count != spec.batches {
        return Err(Error::format(
            "dataset",
            format!("header promises {} batches, file has {count}", spec.batches),
        ));
    }
    let (q, b, d, p) = (spec.clones, spec.batch, spec.world.dim, spec.world.formants);
    let mut batches = Vec::with_capacity(count);
    for _ in 0..count {
        batches.push(CloneBatch {
            x: read_array(&mut r, &[q, b, d])?,
            psi: read_array(&mut r, &[b, p])?,
            target: read_array(&mut r, &[b, d])?,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("dataset", "trailing bytes"));
    }
    Ok(Dataset { spec, batches })
}
