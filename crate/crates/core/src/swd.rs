//! Multi-view attention distillation via the sliced Wasserstein distance.
//!
//! A feature tensor `A` becomes a discrete measure `P = A∘² / ‖A‖_F²` with one
//! atom per grid coordinate `(c, x, y)`. For a direction `θ` on the unit
//! sphere every atom is projected to `⟨θ, (c, x, y)⟩`; atoms are sorted by
//! that position (ties broken by channel-major linear index) and the sorted
//! sequence is cut into `g` contiguous groups of near-equal count. The
//! attention vector is the per-group mass. Since the coordinates are shared by
//! any two tensors of the same shape, the bin assignment depends only on the
//! shape and `θ`; the distance is then a smooth function of the masses.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{frobenius_norm_sq, FeatureTensor, Tensor};

/// Nonnegative `C×W×H` masses summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTensor(Tensor);

impl DensityTensor {
    /// Wraps masses that are already normalized.
    pub fn from_masses(t: Tensor) -> Result<Self> {
        t.dims3()?;
        if t.data().iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::data("density masses must be finite and nonnegative"));
        }
        let total = t.sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::data(format!("density masses sum to {total}, expected 1")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims3().expect("density is rank 3")
    }
}

/// `P = A∘² / Σ A²`.
pub fn normalize_density(a: &FeatureTensor) -> Result<DensityTensor> {
    a.dims3()?;
    let norm = frobenius_norm_sq(a);
    if norm == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero tensor".into()));
    }
    Ok(DensityTensor(a.map(|x| x * x / norm)))
}

/// Taped `normalize_density`; gradient flows through numerator and denominator.
pub fn normalize_density_on_tape(tape: &mut Tape, a: Var) -> Result<Var> {
    tape.value(a).dims3()?;
    let norm = tape.frobenius_norm_sq(a);
    if tape.value(norm).item() == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero tensor".into()));
    }
    let sq = tape.square(a);
    tape.div_scalar(sq, norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub seed: u64,
    pub directions: Vec<[f64; 3]>,
}

impl ProjectionSet {
    pub fn k(&self) -> usize {
        self.directions.len()
    }
}

/// `k` directions uniform on S², from normalized standard-normal triples drawn
/// with ChaCha20 seeded by `seed`. Zero-norm draws are rejected.
pub fn sample_projections(k: usize, seed: u64) -> Result<ProjectionSet> {
    if k == 0 {
        return Err(Error::config("number of projections must be at least 1"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut directions = Vec::with_capacity(k);
    while directions.len() < k {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 0.0 && norm.is_finite() {
            directions.push([v[0] / norm, v[1] / norm, v[2] / norm]);
        }
    }
    Ok(ProjectionSet { seed, directions })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector {
    pub bin_mass: Vec<f64>,
}

impl AttentionVector {
    pub fn g(&self) -> usize {
        self.bin_mass.len()
    }
}

/// Group index of every element (in linear order) for one direction.
pub fn bin_assignment(dims: (usize, usize, usize), theta: [f64; 3], g: usize) -> Result<Vec<u32>> {
    let (c, w, h) = dims;
    let n = c * w * h;
    if g == 0 || g > n {
        return Err(Error::config(format!("cannot split {n} elements into {g} bins")));
    }
    let mut position = Vec::with_capacity(n);
    for ci in 0..c {
        for x in 0..w {
            for y in 0..h {
                position.push(theta[0] * ci as f64 + theta[1] * x as f64 + theta[2] * y as f64);
            }
        }
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    // (position, index) is a strict total order, so an unstable sort is deterministic.
    order.sort_unstable_by(|&a, &b| position[a as usize].total_cmp(&position[b as usize]).then(a.cmp(&b)));

    let base = n / g;
    let extra = n % g;
    let split = extra * (base + 1);
    let mut assignment = vec![0u32; n];
    for (rank, &idx) in order.iter().enumerate() {
        let group = if rank < split { rank / (base + 1) } else { extra + (rank - split) / base };
        assignment[idx as usize] = group as u32;
    }
    Ok(assignment)
}

/// Attention vector of `p` along `theta` with `g` bins.
pub fn project_sort_bin(p: &DensityTensor, theta: [f64; 3], g: usize) -> Result<AttentionVector> {
    let bins = bin_assignment(p.dims(), theta, g)?;
    Ok(AttentionVector { bin_mass: bin_masses(&bins, g, p.tensor().data()) })
}

fn bin_masses(bins: &[u32], g: usize, masses: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g];
    for (&b, &m) in bins.iter().zip(masses) {
        out[b as usize] += m;
    }
    out
}

/// Bin assignments for every direction of a [`ProjectionSet`] at one shape.
/// Shared by all distances computed within a training step.
#[derive(Clone, Debug)]
pub struct SlicePlan {
    dims: (usize, usize, usize),
    g: usize,
    bins: Vec<Vec<u32>>,
}

impl SlicePlan {
    pub fn new(dims: (usize, usize, usize), proj: &ProjectionSet, g: usize) -> Result<Self> {
        let bins = proj
            .directions
            .iter()
            .map(|&theta| bin_assignment(dims, theta, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, g, bins })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn k(&self) -> usize {
        self.bins.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.dims3()? != self.dims {
            return Err(Error::dim(format!("tensor {:?} does not match plan shape {:?}", t.shape(), self.dims)));
        }
        Ok(())
    }

    /// One attention vector per direction.
    pub fn attention_vectors(&self, p: &Tensor) -> Result<Vec<AttentionVector>> {
        self.check(p)?;
        Ok(self.bins.iter().map(|b| AttentionVector { bin_mass: bin_masses(b, self.g, p.data()) }).collect())
    }

    /// `Σ_k Σ_j (v_p^k[j] − v_q^k[j])²`, accumulated in direction order.
    pub fn distance(&self, p: &Tensor, q: &Tensor) -> Result<f64> {
        self.check(p)?;
        self.check(q)?;
        let mut total = 0.0;
        for bins in &self.bins {
            let vp = bin_masses(bins, self.g, p.data());
            let vq = bin_masses(bins, self.g, q.data());
            total += vp.iter().zip(&vq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total)
    }

    /// All attention vectors of `p`, concatenated in direction order (`K·g` values).
    pub fn flat_vectors(&self, p: &Tensor) -> Result<Vec<f64>> {
        self.check(p)?;
        let mut out = Vec::with_capacity(self.bins.len() * self.g);
        for bins in &self.bins {
            out.extend(bin_masses(bins, self.g, p.data()));
        }
        Ok(out)
    }

    /// Distance between two outputs of [`SlicePlan::flat_vectors`].
    pub fn distance_between_vectors(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let n = self.bins.len() * self.g;
        if a.len() != n || b.len() != n {
            return Err(Error::dim(format!("attention vectors of length {} and {} for a plan of {n}", a.len(), b.len())));
        }
        let mut total = 0.0;
        for (ca, cb) in a.chunks_exact(self.g).zip(b.chunks_exact(self.g)) {
            total += ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        Ok(total)
    }

    /// `out[i] = Σ_k coef[k·g + bin_k(i)]`: pulls per-bin values back to elements.
    pub fn scatter_bins(&self, coef: &[f64]) -> Vec<f64> {
        let n = self.dims.0 * self.dims.1 * self.dims.2;
        let mut out = vec![0.0; n];
        for (bins, c) in self.bins.iter().zip(coef.chunks_exact(self.g)) {
            for (o, &b) in out.iter_mut().zip(bins) {
                *o += c[b as usize];
            }
        }
        out
    }

    /// `∂distance/∂p`; the gradient with respect to `q` is its negation.
    pub fn distance_grad(&self, p: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
        self.check(p)?;
        self.check(q)?;
        let mut grad = vec![0.0; p.len()];
        for bins in &self.bins {
            let vp = bin_masses(bins, self.g, p.data());
            let vq = bin_masses(bins, self.g, q.data());
            let diff: Vec<f64> = vp.iter().zip(&vq).map(|(a, b)| 2.0 * (a - b)).collect();
            for (gr, &b) in grad.iter_mut().zip(bins) {
                *gr += diff[b as usize];
            }
        }
        Ok(grad)
    }
}

/// Sliced Wasserstein distance with quadratic cost over binned attention vectors.
pub fn swd(p_s: &DensityTensor, p_t: &DensityTensor, proj: &ProjectionSet, g: usize) -> Result<f64> {
    if p_s.dims() != p_t.dims() {
        return Err(Error::dim(format!("density shapes differ: {:?} vs {:?}", p_s.dims(), p_t.dims())));
    }
    SlicePlan::new(p_s.dims(), proj, g)?.distance(p_s.tensor(), p_t.tensor())
}

/// Reference single-direction distance for small tensors (N ≤ 64): ranks come
/// from pairwise counting over explicitly enumerated coordinates.
pub fn brute_force_binned_distance(p_s: &DensityTensor, p_t: &DensityTensor, theta: [f64; 3], g: usize) -> Result<f64> {
    let (c, w, h) = p_s.dims();
    if p_t.dims() != (c, w, h) {
        return Err(Error::dim("density shapes differ"));
    }
    let n = c * w * h;
    if n > 64 {
        return Err(Error::config(format!("brute-force oracle limited to 64 elements, got {n}")));
    }
    if g == 0 || g > n {
        return Err(Error::config(format!("cannot split {n} elements into {g} bins")));
    }
    let mut atoms = Vec::with_capacity(n);
    for ci in 0..c {
        for x in 0..w {
            for y in 0..h {
                let t = theta[0] * ci as f64 + theta[1] * x as f64 + theta[2] * y as f64;
                let idx = (ci * w + x) * h + y;
                atoms.push((t, idx, p_s.tensor().data()[idx], p_t.tensor().data()[idx]));
            }
        }
    }
    let mut sizes = vec![n / g; g];
    for s in sizes.iter_mut().take(n % g) {
        *s += 1;
    }
    let mut vs = vec![0.0; g];
    let mut vt = vec![0.0; g];
    for &(t, idx, ms, mt) in &atoms {
        let rank = atoms.iter().filter(|&&(t2, idx2, _, _)| t2 < t || (t2 == t && idx2 < idx)).count();
        let mut group = 0;
        let mut edge = sizes[0];
        while rank >= edge {
            group += 1;
            edge += sizes[group];
        }
        vs[group] += ms;
        vt[group] += mt;
    }
    Ok(vs.iter().zip(&vt).map(|(a, b)| (a - b).powi(2)).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiViewConfig {
    pub k: usize,
    /// Number of bins; `None` means half the channel count.
    pub g: Option<usize>,
    pub gamma_mv: f64,
    pub eta_mv: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for MultiViewConfig {
    fn default() -> Self {
        Self { k: 64, g: None, gamma_mv: 100.0, eta_mv: 50.0, margin: 0.012, seed: 0 }
    }
}

impl MultiViewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.g == Some(0) {
            return Err(Error::config("g must be at least 1"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config(format!("margin must be nonnegative, got {}", self.margin)));
        }
        Ok(())
    }

    pub fn resolve_g(&self, channels: usize) -> usize {
        self.g.unwrap_or((channels / 2).max(1))
    }
}

/// Records `γ·SWD(S,T) + η·[SWD(S,T+) + max(Δ − SWD(S,T−), 0)]` with one plan
/// shared by all three distances. Teacher tensors are constants.
pub fn mv_loss_on_tape(
    tape: &mut Tape,
    a_s: Var,
    a_t: &FeatureTensor,
    a_t_pos: Option<&FeatureTensor>,
    a_t_neg: Option<&FeatureTensor>,
    plan: &Arc<SlicePlan>,
    cfg: &MultiViewConfig,
) -> Result<Var> {
    let target = |t: &FeatureTensor| -> Result<Arc<Vec<f64>>> {
        if t.shape() != tape.value(a_s).shape() {
            return Err(Error::dim(format!(
                "teacher {:?} and student {:?} shapes differ",
                t.shape(),
                tape.value(a_s).shape()
            )));
        }
        attention_targets(t, plan)
    };
    let anchor = target(a_t)?;
    let pair = match (a_t_pos, a_t_neg) {
        (Some(pos), Some(neg)) => Some((target(pos)?, target(neg)?)),
        _ => None,
    };
    mv_loss_with_targets_on_tape(tape, a_s, &anchor, pair.as_ref().map(|(p, n)| (p, n)), plan, cfg)
}

/// Flattened attention vectors of a frozen teacher feature under `plan`.
pub fn attention_targets(a_t: &FeatureTensor, plan: &SlicePlan) -> Result<Arc<Vec<f64>>> {
    let p = normalize_density(a_t)?;
    Ok(Arc::new(plan.flat_vectors(p.tensor())?))
}

/// [`mv_loss_on_tape`] with teacher attention vectors precomputed by
/// [`attention_targets`]; `pair` holds the positive and negative targets.
pub fn mv_loss_with_targets_on_tape(
    tape: &mut Tape,
    a_s: Var,
    anchor: &Arc<Vec<f64>>,
    pair: Option<(&Arc<Vec<f64>>, &Arc<Vec<f64>>)>,
    plan: &Arc<SlicePlan>,
    cfg: &MultiViewConfig,
) -> Result<Var> {
    if cfg.eta_mv != 0.0 && pair.is_none() {
        return Err(Error::config("eta_mv is nonzero but a positive or negative teacher feature is missing"));
    }
    let p_s = normalize_density_on_tape(tape, a_s)?;
    let mut targets = vec![anchor.clone()];
    if cfg.eta_mv != 0.0 {
        let (pos, neg) = pair.expect("checked above");
        targets.push(pos.clone());
        targets.push(neg.clone());
    }
    let dists = tape.swd_to_targets(p_s, &targets, plan)?;
    let anchor = tape.select(dists, 0)?;
    let mut loss = tape.scale(anchor, cfg.gamma_mv);
    if cfg.eta_mv != 0.0 {
        let pos = tape.select(dists, 1)?;
        let neg = tape.select(dists, 2)?;
        let neg = tape.scale(neg, -1.0);
        let gap = tape.add_const(neg, cfg.margin);
        let hinge = tape.relu(gap);
        let contrast = tape.add(pos, hinge)?;
        let contrast = tape.scale(contrast, cfg.eta_mv);
        loss = tape.add(loss, contrast)?;
    }
    Ok(loss)
}

fn eager_plan(a_s: &FeatureTensor, cfg: &MultiViewConfig) -> Result<Arc<SlicePlan>> {
    cfg.validate()?;
    let dims = a_s.dims3()?;
    let proj = sample_projections(cfg.k, cfg.seed)?;
    Ok(Arc::new(SlicePlan::new(dims, &proj, cfg.resolve_g(dims.0))?))
}

/// Multi-view loss value; projections are drawn from `cfg.k` and `cfg.seed`.
pub fn mv_loss(
    a_s: &FeatureTensor,
    a_t: &FeatureTensor,
    a_t_pos: Option<&FeatureTensor>,
    a_t_neg: Option<&FeatureTensor>,
    cfg: &MultiViewConfig,
) -> Result<f64> {
    let plan = eager_plan(a_s, cfg)?;
    let mut tape = Tape::new();
    let s = tape.constant(a_s.clone());
    let loss = mv_loss_on_tape(&mut tape, s, a_t, a_t_pos, a_t_neg, &plan, cfg)?;
    Ok(tape.value(loss).item())
}

/// Multi-view loss value and `∂L/∂a_s`.
pub fn mv_loss_with_grad(
    a_s: &FeatureTensor,
    a_t: &FeatureTensor,
    a_t_pos: Option<&FeatureTensor>,
    a_t_neg: Option<&FeatureTensor>,
    cfg: &MultiViewConfig,
) -> Result<(f64, Tensor)> {
    let plan = eager_plan(a_s, cfg)?;
    let mut tape = Tape::new();
    let s = tape.leaf(a_s.clone());
    let loss = mv_loss_on_tape(&mut tape, s, a_t, a_t_pos, a_t_neg, &plan, cfg)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.wrt(s)))
}
