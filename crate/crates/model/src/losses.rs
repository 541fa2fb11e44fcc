//! Pretraining objectives on embedding batches.
//!
//! * ITC: symmetric InfoNCE between paired image and text rows.
//! * SRJ: a shared MLP head classifies the relation (STSS / STDS / DT) of a
//!   row and a row of a shuffled batch, over the IT, TI, II and TT pairings.
//! * DNC: per component type, defect and normal image rows are stacked, their
//!   scaled similarity matrix is pushed towards the block target with
//!   logistic BCE, and component losses are weighted by sample share.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use linevlp_core::{CategoryId, Relation, Status, Taxonomy};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::layers::{gelu, log_softmax_last, scalar, Linear};
use crate::params::VarBuilder;

/// τ range enforced on the learnable ITC temperature.
pub const TAU_RANGE: (f64, f64) = (1e-3, 10.0);
pub const DNC_SCALE_RANGE: (f64, f64) = (0.1, 100.0);

fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?)
}

/// Rows of `m` at `idx`, differentiable.
pub fn select_rows(m: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Ok(m.index_select(&index_tensor(idx)?, 0)?)
}

/// Mean cross-entropy of `(n, C)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if targets.len() != n {
        return Err(ModelError::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    let mut onehot = vec![0f64; n * c];
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= c {
            return Err(ModelError::Shape(format!("target {t} out of {c} classes")));
        }
        onehot[i * c + t as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, c), &Device::Cpu)?.to_dtype(logits.dtype())?;
    Ok((log_softmax_last(logits)?.mul(&onehot)?.sum_all()? / -(n as f64))?)
}

// ---------------------------------------------------------------- ITC

/// Symmetric InfoNCE with logits `scale * V Lᵀ`.
pub fn itc_loss_scaled(v: &Tensor, l: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (n, d) = v.dims2()?;
    if l.dims2()? != (n, d) || n == 0 {
        return Err(ModelError::Shape(format!("ITC needs equal non-empty shapes, got {:?} and {:?}", v.dims(), l.dims())));
    }
    let logits = v.matmul(&l.t()?)?.broadcast_mul(scale)?;
    let targets: Vec<u32> = (0..n as u32).collect();
    let i2t = cross_entropy(&logits, &targets)?;
    let t2i = cross_entropy(&logits.t()?.contiguous()?, &targets)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

/// Symmetric InfoNCE at a fixed temperature.
pub fn itc_loss(v: &Tensor, l: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(ModelError::Param(format!("temperature {temperature} must be positive")));
    }
    let scale = Tensor::new(1.0 / temperature, &Device::Cpu)?.to_dtype(v.dtype())?;
    itc_loss_scaled(v, l, &scale)
}

/// `exp(logit_scale)` clamped so that τ stays inside [`TAU_RANGE`].
pub fn itc_scale(logit_scale: &Tensor) -> Result<Tensor> {
    let lo = (1.0 / TAU_RANGE.1).ln();
    let hi = (1.0 / TAU_RANGE.0).ln();
    Ok(logit_scale.clamp(lo, hi)?.exp()?)
}

pub fn dnc_scale(log_scale: &Tensor) -> Result<Tensor> {
    Ok(log_scale.clamp(DNC_SCALE_RANGE.0.ln(), DNC_SCALE_RANGE.1.ln())?.exp()?)
}

// ---------------------------------------------------------------- SRJ

/// A batch with its rows permuted: `matrix[i] == source[perm[i]]`.
#[derive(Debug, Clone)]
pub struct ShuffledBatch {
    pub matrix: Tensor,
    pub perm: Vec<usize>,
}

impl ShuffledBatch {
    pub fn with_perm(source: &Tensor, perm: Vec<usize>) -> Result<Self> {
        let n = source.dim(0)?;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(ModelError::Batch(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        Ok(Self { matrix: select_rows(source, &perm)?, perm })
    }
}

pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Uniformly random row permutation of a batch of at least two rows.
pub fn shuffle_features<R: Rng + ?Sized>(m: &Tensor, rng: &mut R) -> Result<ShuffledBatch> {
    let n = m.dim(0)?;
    if n < 2 {
        return Err(ModelError::Batch(format!("cannot shuffle a batch of {n}")));
    }
    ShuffledBatch::with_perm(m, random_permutation(n, rng))
}

/// `targets[i] = relate(categories[i], categories[perm[i]])`.
pub fn srj_targets(categories: &[CategoryId], perm: &[usize], taxonomy: &Taxonomy) -> Result<Vec<Relation>> {
    if perm.len() != categories.len() {
        return Err(ModelError::Batch(format!("{} categories, permutation of {}", categories.len(), perm.len())));
    }
    perm.iter()
        .enumerate()
        .map(|(i, &p)| {
            let other = categories
                .get(p)
                .ok_or_else(|| ModelError::Batch(format!("permutation entry {p} out of range")))?;
            Ok(taxonomy.relate(categories[i], *other)?)
        })
        .collect()
}

/// Linear(2d, 2d) -> GELU -> Linear(2d, 3), shared by the four subtasks.
#[derive(Debug, Clone)]
pub struct SrjHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SrjHead {
    pub fn new(vb: &VarBuilder, d: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&vb.pp("fc1"), 2 * d, 2 * d, true)?,
            fc2: Linear::new(&vb.pp("fc2"), 2 * d, 3, true)?,
        })
    }

    /// Logits for rows of `concat(a, b)`.
    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[a, b], 1)?;
        self.fc2.forward(&gelu(&self.fc1.forward(&x)?)?)
    }
}

pub fn srj_subtask_loss(a: &Tensor, b: &ShuffledBatch, targets: &[Relation], head: &SrjHead) -> Result<Tensor> {
    let n = a.dim(0)?;
    if b.matrix.dim(0)? != n || targets.len() != n || a.dim(1)? != b.matrix.dim(1)? {
        return Err(ModelError::Shape(format!(
            "SRJ subtask: {:?} vs {:?} with {} targets",
            a.dims(),
            b.matrix.dims(),
            targets.len()
        )));
    }
    let codes: Vec<u32> = targets.iter().map(|r| r.code()).collect();
    cross_entropy(&head.forward(a, &b.matrix)?, &codes)
}

#[derive(Debug, Clone)]
pub struct SrjLoss {
    pub loss: Tensor,
    /// IT, TI, II, TT
    pub subtasks: [Tensor; 4],
    pub v_perm: Vec<usize>,
    pub l_perm: Vec<usize>,
}

/// SRJ from given shuffles: IT = (V, L'), TI = (L, V'), II = (V, V'), TT = (L, L').
pub fn srj_loss_with(
    v: &Tensor,
    l: &Tensor,
    v_shuf: &ShuffledBatch,
    l_shuf: &ShuffledBatch,
    categories: &[CategoryId],
    taxonomy: &Taxonomy,
    head: &SrjHead,
) -> Result<SrjLoss> {
    let tv = srj_targets(categories, &v_shuf.perm, taxonomy)?;
    let tl = srj_targets(categories, &l_shuf.perm, taxonomy)?;
    let it = srj_subtask_loss(v, l_shuf, &tl, head)?;
    let ti = srj_subtask_loss(l, v_shuf, &tv, head)?;
    let ii = srj_subtask_loss(v, v_shuf, &tv, head)?;
    let tt = srj_subtask_loss(l, l_shuf, &tl, head)?;
    let loss = ((((&it + &ti)? + &ii)? + &tt)? * 0.25)?;
    Ok(SrjLoss {
        loss,
        subtasks: [it, ti, ii, tt],
        v_perm: v_shuf.perm.clone(),
        l_perm: l_shuf.perm.clone(),
    })
}

/// SRJ with one fresh permutation for V' and an independent one for L'.
pub fn srj_loss<R: Rng + ?Sized>(
    v: &Tensor,
    l: &Tensor,
    categories: &[CategoryId],
    taxonomy: &Taxonomy,
    head: &SrjHead,
    rng: &mut R,
) -> Result<SrjLoss> {
    let v_shuf = shuffle_features(v, rng)?;
    let l_shuf = shuffle_features(l, rng)?;
    srj_loss_with(v, l, &v_shuf, &l_shuf, categories, taxonomy, head)
}

// ---------------------------------------------------------------- DNC

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DncSkip {
    External,
    NoSamples,
    NoDefect,
    NoNormal,
}

/// Row indices (batch order preserved) of one component type's samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DncFilter {
    Eligible { defect: Vec<usize>, normal: Vec<usize> },
    Skipped(DncSkip),
}

pub fn dnc_filter(categories: &[CategoryId], taxonomy: &Taxonomy, component_type: &str) -> Result<DncFilter> {
    let ty = taxonomy
        .component_type(component_type)
        .ok_or_else(|| linevlp_core::TaxonomyError::UnknownComponentType(component_type.to_string()))?;
    if ty.is_external_interference {
        return Ok(DncFilter::Skipped(DncSkip::External));
    }
    let (mut defect, mut normal) = (Vec::new(), Vec::new());
    for (i, &c) in categories.iter().enumerate() {
        let cat = taxonomy.get(c)?;
        if cat.component_type != component_type {
            continue;
        }
        match cat.status {
            Status::Defect => defect.push(i),
            Status::Normal => normal.push(i),
        }
    }
    Ok(match (defect.is_empty(), normal.is_empty()) {
        (true, true) => DncFilter::Skipped(DncSkip::NoSamples),
        (true, false) => DncFilter::Skipped(DncSkip::NoDefect),
        (false, true) => DncFilter::Skipped(DncSkip::NoNormal),
        (false, false) => DncFilter::Eligible { defect, normal },
    })
}

/// Block target: 1 where both indices are defects or both normals.
pub fn dnc_target(k: usize, q: usize) -> Result<Vec<Vec<u8>>> {
    if k < 1 || q < 1 {
        return Err(ModelError::Param(format!("dnc_target needs k, q >= 1 (got {k}, {q})")));
    }
    let n = k + q;
    Ok((0..n)
        .map(|i| (0..n).map(|j| u8::from((i < k) == (j < k))).collect())
        .collect())
}

#[derive(Debug, Clone)]
pub struct DncOutputs {
    pub loss: Tensor,
    /// Raw similarities `Vj Vjᵀ`.
    pub s: Tensor,
    pub z: Vec<Vec<u8>>,
    pub k: usize,
    pub q: usize,
}

/// Mean logistic BCE of `scale * s_ij` against the block target.
pub fn dnc_component_loss(vd: &Tensor, vn: &Tensor, scale: &Tensor) -> Result<DncOutputs> {
    let (k, q) = (vd.dim(0)?, vn.dim(0)?);
    let z = dnc_target(k, q)?;
    let vj = Tensor::cat(&[vd, vn], 0)?;
    let s = vj.matmul(&vj.t()?)?;
    let x = s.broadcast_mul(scale)?;
    let n = k + q;
    let zt = Tensor::from_vec(
        z.iter().flatten().map(|&b| b as f64).collect::<Vec<_>>(),
        (n, n),
        &Device::Cpu,
    )?
    .to_dtype(x.dtype())?;
    // max(x, 0) - x z + log(1 + exp(-|x|))
    let bce = ((x.relu()? - x.mul(&zt)?)? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok(DncOutputs { loss: bce.mean_all()?, s, z, k, q })
}

#[derive(Debug, Clone)]
pub struct DncLoss {
    pub loss: Tensor,
    /// α per eligible component type; sums to 1 when non-empty.
    pub alpha: BTreeMap<String, f64>,
}

impl DncLoss {
    pub fn eligible(&self) -> bool {
        !self.alpha.is_empty()
    }
}

/// Σ_c α_c L_c over component types with both defect and normal samples.
pub fn dnc_loss(v: &Tensor, categories: &[CategoryId], taxonomy: &Taxonomy, scale: &Tensor) -> Result<DncLoss> {
    let mut parts = Vec::new();
    for ty in taxonomy.component_types() {
        if let DncFilter::Eligible { defect, normal } = dnc_filter(categories, taxonomy, &ty.name)? {
            parts.push((ty.name.clone(), defect, normal));
        }
    }
    if parts.is_empty() {
        return Ok(DncLoss { loss: Tensor::zeros((), v.dtype(), &Device::Cpu)?, alpha: BTreeMap::new() });
    }
    let total: usize = parts.iter().map(|(_, d, n)| d.len() + n.len()).sum();
    let mut alpha = BTreeMap::new();
    let mut loss: Option<Tensor> = None;
    for (name, defect, normal) in parts {
        let a = (defect.len() + normal.len()) as f64 / total as f64;
        let out = dnc_component_loss(&select_rows(v, &defect)?, &select_rows(v, &normal)?, scale)?;
        let term = (out.loss * a)?;
        loss = Some(match loss {
            Some(acc) => (acc + term)?,
            None => term,
        });
        alpha.insert(name, a);
    }
    Ok(DncLoss { loss: loss.expect("non-empty"), alpha })
}

// ---------------------------------------------------------------- total

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_itc: f64,
    pub lambda_srj: f64,
    pub lambda_dnc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_itc: 1.0, lambda_srj: 1.0, lambda_dnc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("itc", self.lambda_itc), ("srj", self.lambda_srj), ("dnc", self.lambda_dnc)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::Param(format!("lambda_{n} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Per-task scalar values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub itc: f64,
    pub srj: f64,
    pub dnc: f64,
    pub total: f64,
}

/// Learnable pieces shared by the objectives.
#[derive(Debug, Clone, Copy)]
pub struct Objectives<'a> {
    pub head: &'a SrjHead,
    /// Multiplier on ITC logits (1/τ).
    pub itc_scale: &'a Tensor,
    pub dnc_scale: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub itc: Tensor,
    pub srj: SrjLoss,
    pub dnc: DncLoss,
    pub breakdown: LossBreakdown,
}

/// `λ1 itc + λ2 srj + λ3 dnc`. Both SRJ permutations are always drawn, so
/// the random stream does not depend on the weights.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    v: &Tensor,
    l: &Tensor,
    categories: &[CategoryId],
    taxonomy: &Taxonomy,
    obj: Objectives<'_>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<TotalLoss> {
    weights.validate()?;
    let itc = itc_loss_scaled(v, l, obj.itc_scale)?;
    let srj = srj_loss(v, l, categories, taxonomy, obj.head, rng)?;
    let dnc = dnc_loss(v, categories, taxonomy, obj.dnc_scale)?;
    let mut total: Option<Tensor> = None;
    for (lambda, t) in [(weights.lambda_itc, &itc), (weights.lambda_srj, &srj.loss), (weights.lambda_dnc, &dnc.loss)] {
        if lambda == 0.0 {
            continue;
        }
        let term = (t * lambda)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::zeros((), v.dtype(), &Device::Cpu)?,
    };
    let breakdown = LossBreakdown {
        itc: scalar(&itc)?,
        srj: scalar(&srj.loss)?,
        dnc: scalar(&dnc.loss)?,
        total: scalar(&total)?,
    };
    Ok(TotalLoss { total, itc, srj, dnc, breakdown })
}

/// 0-d tensor in `dtype`.
pub fn scalar_tensor(v: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?.to_dtype(dtype)?)
}
