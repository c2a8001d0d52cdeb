//! Training objective: symmetric InfoNCE over in-batch negatives plus the
//! disentanglement and stability regularizers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("score matrix contains non-finite values")]
    NonFiniteScores,
    #[error("inverse temperature must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// The regularizers that can be switched off for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    Dis,
    Splice,
    Cal,
    NonNeg,
    Tv,
}

impl Regularizer {
    pub const ALL: [Regularizer; 5] = [Self::Dis, Self::Splice, Self::Cal, Self::NonNeg, Self::Tv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dis => "dis",
            Self::Splice => "splice",
            Self::Cal => "cal",
            Self::NonNeg => "nonneg",
            Self::Tv => "tv",
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regularizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| format!("unknown regularizer {s:?} (expected one of dis, splice, cal, nonneg, tv)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub dis: f64,
    pub splice: f64,
    pub cal: f64,
    pub nonneg: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dis: 0.05,
            splice: 0.01,
            cal: 0.1,
            nonneg: 0.01,
            tv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn get(&self, r: Regularizer) -> f64 {
        match r {
            Regularizer::Dis => self.dis,
            Regularizer::Splice => self.splice,
            Regularizer::Cal => self.cal,
            Regularizer::NonNeg => self.nonneg,
            Regularizer::Tv => self.tv,
        }
    }

    pub fn set(&mut self, r: Regularizer, value: f64) {
        match r {
            Regularizer::Dis => self.dis = value,
            Regularizer::Splice => self.splice = value,
            Regularizer::Cal => self.cal = value,
            Regularizer::NonNeg => self.nonneg = value,
            Regularizer::Tv => self.tv = value,
        }
    }
}

/// Coordinates sampled per step for the non-negativity penalty.
pub const NONNEG_SAMPLES: usize = 250;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub disabled: Vec<Regularizer>,
}

impl LossConfig {
    pub fn enabled(&self, r: Regularizer) -> bool {
        !self.disabled.contains(&r)
    }
}

/// Component values of one loss evaluation. Disabled terms read 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_av: f64,
    pub l_va: f64,
    pub l_dis: f64,
    pub l_splice: f64,
    pub l_cal: f64,
    pub l_nonneg: f64,
    pub l_tv: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn component(&self, r: Regularizer) -> f64 {
        match r {
            Regularizer::Dis => self.l_dis,
            Regularizer::Splice => self.l_splice,
            Regularizer::Cal => self.l_cal,
            Regularizer::NonNeg => self.l_nonneg,
            Regularizer::Tv => self.l_tv,
        }
    }

    /// `l_av + l_va + sum of weighted regularizers`, in the same order the
    /// graph sums them.
    pub fn weighted_sum(&self) -> f64 {
        let mut total = self.l_av + self.l_va;
        for r in Regularizer::ALL {
            total += self.weights.get(r) * self.component(r);
        }
        total
    }
}

fn scalar_zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn diag_log_likelihood(g: &mut Graph, logits: Var, b: usize) -> Result<Var> {
    let ls = g.log_softmax(logits)?;
    let eye = g.constant(Tensor::eye(b));
    let diag = g.mul(ls, eye)?;
    let s = g.sum_all(diag)?;
    Ok(g.scale(s, -1.0 / (2.0 * b as f64)))
}

/// Symmetric InfoNCE on a `[B, B]` score matrix (rows audio, columns
/// visual) with inverse temperature `exp(log_gamma)`.
///
/// `l_av = -(1 / 2B) * sum_b log softmax_row_b(gamma * M)[b]`; `l_va` is the
/// same over columns.
pub fn info_nce(g: &mut Graph, scores: Var, log_gamma: Var) -> Result<(Var, Var)> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::Invalid(format!("score matrix must be square, got {shape:?}")).into());
    }
    if !g.value(scores).all_finite() {
        return Err(LossError::NonFiniteScores);
    }
    let b = shape[0];
    let gamma = g.exp(log_gamma);
    let logits = g.mul(scores, gamma)?;
    let l_av = diag_log_likelihood(g, logits, b)?;
    let cols = g.transpose(logits)?;
    let l_va = diag_log_likelihood(g, cols, b)?;
    Ok((l_av, l_va))
}

/// Mean of `|s[k1] * s[k2]|` over the volume, averaged over every unordered
/// head pair. `vol` is `[..., K, F, T, H, W]` with the head axis at
/// `rank - 5`.
pub fn l_dis(g: &mut Graph, vol: Var) -> Result<Var> {
    let rank = g.shape(vol).len();
    let axis = rank - 5;
    let k = g.shape(vol)[axis];
    if k < 2 {
        return Ok(scalar_zero(g));
    }
    let mut terms = Vec::new();
    for k1 in 0..k {
        for k2 in k1 + 1..k {
            let a = g.narrow(vol, axis, k1, 1)?;
            let b = g.narrow(vol, axis, k2, 1)?;
            let p = g.mul(a, b)?;
            let p = g.abs(p);
            terms.push(g.mean_all(p)?);
        }
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64))
}

/// Weighted mean of `s^2` with the per-frame mask `[B, T]` broadcast over
/// every other axis of the positive volumes `[B, K, F, T, H, W]`. Zero when
/// the mask is all zeros.
pub fn l_splice(g: &mut Graph, vol: Var, mask: &Tensor) -> Result<Var> {
    let s = g.shape(vol).to_vec();
    if s.len() != 6 || mask.shape() != [s[0], s[3]] {
        return Err(TensorError::ShapeMismatch {
            op: "l_splice",
            lhs: s,
            rhs: mask.shape().to_vec(),
        }
        .into());
    }
    let per_frame: usize = s[1] * s[2] * s[4] * s[5];
    let weight = mask.sum() * per_frame as f64;
    if weight <= 0.0 {
        return Ok(scalar_zero(g));
    }
    let m = g.constant(mask.clone().reshape([s[0], 1, 1, s[3], 1, 1])?);
    let sq = g.square(vol);
    let weighted = g.mul(sq, m)?;
    let total = g.sum_all(weighted)?;
    Ok(g.scale(total, 1.0 / weight))
}

/// `max(-log gamma, 0)^2`.
pub fn l_cal(g: &mut Graph, log_gamma: Var) -> Result<Var> {
    let neg = g.scale(log_gamma, -1.0);
    let clipped = g.relu(neg);
    let sq = g.square(clipped);
    Ok(g.sum_all(sq)?)
}

/// Uniform (with replacement) flat coordinates into a volume of `numel`
/// entries.
pub fn sample_coords(rng: &mut impl rand::Rng, numel: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..numel)).collect()
}

/// `(1 / |coords|) * sum min(s, 0)^2` over the sampled flat coordinates of
/// `vol` (all pairs, positive and negative).
pub fn l_nonneg(g: &mut Graph, vol: Var, coords: &[usize]) -> Result<Var> {
    if coords.is_empty() {
        return Ok(scalar_zero(g));
    }
    let n = g.value(vol).numel();
    let flat = g.reshape(vol, &[n])?;
    let picked = g.index_select(flat, coords)?;
    let neg = g.min_with_zero(picked);
    let sq = g.square(neg);
    Ok(g.mean_all(sq)?)
}

/// Mean squared difference between adjacent time frames. `vol` is
/// `[..., K, F, T, H, W]`.
pub fn l_tv(g: &mut Graph, vol: Var) -> Result<Var> {
    let rank = g.shape(vol).len();
    let axis = rank - 3;
    let t = g.shape(vol)[axis];
    if t < 2 {
        return Ok(scalar_zero(g));
    }
    let early = g.narrow(vol, axis, 0, t - 1)?;
    let late = g.narrow(vol, axis, 1, t - 1)?;
    let d = g.sub(early, late)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq)?)
}

/// Graph inputs of one batch loss.
pub struct LossInputs<'a> {
    /// `[B, B, K, F, T, H, W]` volumes for every (audio, visual) pair.
    pub volumes: Var,
    /// `[B, B]` pooled scores of those volumes.
    pub scores: Var,
    pub log_gamma: Var,
    /// `[B, T]` per-frame splice/silence weights.
    pub splice_mask: &'a Tensor,
    /// Flat coordinates into `volumes` for the non-negativity penalty.
    pub nonneg_coords: &'a [usize],
}

/// Assembles the full objective. Disabled terms are neither computed nor
/// differentiated and read 0 in the breakdown.
pub fn total_loss(g: &mut Graph, inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let (l_av, l_va) = info_nce(g, inputs.scores, inputs.log_gamma)?;
    let vs = g.shape(inputs.volumes).to_vec();
    let b = vs[0];
    let positives = if cfg.enabled(Regularizer::Dis) || cfg.enabled(Regularizer::Splice) || cfg.enabled(Regularizer::Tv) {
        let mut flat_shape = vec![b * vs[1]];
        flat_shape.extend_from_slice(&vs[2..]);
        let flat = g.reshape(inputs.volumes, &flat_shape)?;
        let diag: Vec<usize> = (0..b).map(|i| i * vs[1] + i).collect();
        Some(g.index_select(flat, &diag)?)
    } else {
        None
    };
    let mut total = g.add(l_av, l_va)?;
    let mut values = [0.0; 5];
    for (slot, r) in Regularizer::ALL.into_iter().enumerate() {
        if !cfg.enabled(r) {
            continue;
        }
        let term = match r {
            Regularizer::Dis => l_dis(g, positives.expect("positives built"))?,
            Regularizer::Splice => l_splice(g, positives.expect("positives built"), inputs.splice_mask)?,
            Regularizer::Cal => l_cal(g, inputs.log_gamma)?,
            Regularizer::NonNeg => l_nonneg(g, inputs.volumes, inputs.nonneg_coords)?,
            Regularizer::Tv => l_tv(g, positives.expect("positives built"))?,
        };
        values[slot] = g.value(term).item();
        let weighted = g.scale(term, cfg.weights.get(r));
        total = g.add(total, weighted)?;
    }
    let breakdown = LossBreakdown {
        l_av: g.value(l_av).item(),
        l_va: g.value(l_va).item(),
        l_dis: values[0],
        l_splice: values[1],
        l_cal: values[2],
        l_nonneg: values[3],
        l_tv: values[4],
        total: g.value(total).item(),
        weights: cfg.weights,
    };
    Ok((total, breakdown))
}

/// Value-level `l_cal` for a given inverse temperature.
pub fn calibration_penalty(gamma: f64) -> Result<f64> {
    if gamma <= 0.0 || gamma.is_nan() {
        return Err(LossError::NonPositiveGamma(gamma));
    }
    Ok((-gamma.ln()).max(0.0).powi(2))
}
