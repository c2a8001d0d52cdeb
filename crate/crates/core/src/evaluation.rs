//! Localization, retrieval and head-disentanglement metrics.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{render_prompt, GeneratorConfig, Regime, SamplePair};
use crate::featurizers::{AudioFeatures, ModelError, ModelParams, VisualFeatures};
use crate::similarity::{
    batch_score_matrix, paired_head_scores, prompt_heatmap, similarity_volume, upsample_bilinear, SimilarityError,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision needs at least one positive label")]
    NoPositives,
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("no scores for regime {0:?}")]
    MissingRegime(Regime),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Binary average precision. Items are ranked by descending score; items
/// with exactly equal scores form one group that enters the ranking at
/// once, so the result does not depend on their order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::ShapeMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut seen, mut hits, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_hits = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            group_hits += labels[order[j]] as usize;
            j += 1;
        }
        seen += j - i;
        hits += group_hits;
        ap += (group_hits as f64 / positives as f64) * (hits as f64 / seen as f64);
        i = j;
    }
    Ok(ap)
}

/// `|pred & gt| / |pred | gt|`; 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(pred.len(), gt.len()));
    }
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let union = pred.iter().zip(gt).filter(|(&p, &g)| p || g).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub const MIOU_THRESHOLDS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub threshold_index: usize,
    pub threshold: f64,
    /// Every activation was equal; `miou` is then that of all-ones masks.
    pub degenerate: bool,
}

/// Best mean IoU over 20 thresholds spaced uniformly strictly between the
/// global minimum and maximum activation. `classes[c]` lists the
/// `(heatmap, mask)` pairs of class `c`; a pixel is predicted when its
/// activation exceeds the threshold.
pub fn miou_sweep(classes: &[Vec<(&[f64], &[bool])>]) -> Result<MiouResult> {
    if classes.is_empty() || classes.iter().any(|c| c.is_empty()) {
        return Err(EvalError::Invalid("every class needs at least one heatmap".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (heat, mask) in classes.iter().flatten() {
        if heat.len() != mask.len() {
            return Err(EvalError::ShapeMismatch(heat.len(), mask.len()));
        }
        for &x in heat.iter() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let miou_at = |pred: &dyn Fn(f64) -> bool| -> Result<f64> {
        let mut total = 0.0;
        for class in classes {
            let mut sum = 0.0;
            for (heat, mask) in class {
                let p: Vec<bool> = heat.iter().map(|&x| pred(x)).collect();
                sum += iou(&p, mask)?;
            }
            total += sum / class.len() as f64;
        }
        Ok(total / classes.len() as f64)
    };
    if lo == hi {
        return Ok(MiouResult {
            miou: miou_at(&|_| true)?,
            threshold_index: 0,
            threshold: lo,
            degenerate: true,
        });
    }
    let mut best = MiouResult {
        miou: f64::NEG_INFINITY,
        threshold_index: 0,
        threshold: lo,
        degenerate: false,
    };
    for i in 0..MIOU_THRESHOLDS {
        let thr = lo + (hi - lo) * (i + 1) as f64 / (MIOU_THRESHOLDS + 1) as f64;
        let m = miou_at(&|x| x > thr)?;
        if m > best.miou {
            best = MiouResult {
                miou: m,
                threshold_index: i,
                threshold: thr,
                degenerate: false,
            };
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAccuracy {
    pub at1: f64,
    pub at5: f64,
    pub at10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub n: usize,
    /// Audio query, image candidates (rows of the score matrix).
    pub audio_to_image: RetrievalAccuracy,
    /// Image query, audio candidates (columns).
    pub image_to_audio: RetrievalAccuracy,
}

/// 0-based rank of `scores[target]`: candidates scoring strictly higher,
/// plus equal-scoring candidates with a smaller index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

fn accuracy(ranks: &[usize]) -> RetrievalAccuracy {
    let at = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64;
    RetrievalAccuracy {
        at1: at(1),
        at5: at(5),
        at10: at(10),
    }
}

/// Retrieval accuracy from an `[N, N]` score matrix whose diagonal holds
/// the true pairs. Ties are broken by ascending index.
pub fn retrieval_accuracy(m: &Tensor) -> Result<RetrievalResult> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(EvalError::Invalid(format!("score matrix must be square and nonempty, got {s:?}")));
    }
    let n = s[0];
    let rows: Vec<usize> = (0..n).map(|i| rank_of(&m.data()[i * n..(i + 1) * n], i)).collect();
    let cols: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| m.data()[i * n + j]).collect();
            rank_of(&col, j)
        })
        .collect();
    Ok(RetrievalResult {
        n,
        audio_to_image: accuracy(&rows),
        image_to_audio: accuracy(&cols),
    })
}

/// Min-max scales to `[0, 1]`; constant input maps to 0.5.
pub fn minmax_scale(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// `heads[k][i]`: normalized score of head `k` on sample `i`.
fn check_heads(heads: &[Vec<f64>], regimes: &[Regime]) -> Result<()> {
    if heads.len() != 2 {
        return Err(EvalError::Invalid(format!("disentanglement needs 2 heads, got {}", heads.len())));
    }
    for h in heads {
        if h.len() != regimes.len() {
            return Err(EvalError::ShapeMismatch(h.len(), regimes.len()));
        }
    }
    for r in Regime::ALL {
        if !regimes.contains(&r) {
            return Err(EvalError::MissingRegime(r));
        }
    }
    Ok(())
}

/// Half the larger of the two head-to-regime assignment sums.
fn best_assignment(delta: impl Fn(usize, usize) -> Result<f64>) -> Result<f64> {
    let straight = delta(0, 0)? + delta(1, 1)?;
    let crossed = delta(0, 1)? + delta(1, 0)?;
    Ok(0.5 * straight.max(crossed))
}

/// Prediction disentanglement: how well each head's scores alone detect
/// "its" regime, by AP, under the better head-to-regime assignment.
pub fn pred_dis(heads: &[Vec<f64>], regimes: &[Regime]) -> Result<f64> {
    check_heads(heads, regimes)?;
    best_assignment(|k, r| {
        let labels: Vec<bool> = regimes.iter().map(|&x| x.index() == r).collect();
        average_precision(&heads[k], &labels)
    })
}

/// Activation disentanglement: how inactive each head is on the regime it
/// does not serve, under the better assignment.
pub fn act_dis(heads: &[Vec<f64>], regimes: &[Regime]) -> Result<f64> {
    check_heads(heads, regimes)?;
    let inactivity = |k: usize, r: usize| -> Result<f64> {
        let vals: Vec<f64> = heads[k]
            .iter()
            .zip(regimes)
            .filter(|(_, x)| x.index() == r)
            .map(|(&s, _)| s)
            .collect();
        Ok(1.0 - vals.iter().sum::<f64>() / vals.len() as f64)
    };
    // Head k serves regime k' exactly when it is inactive on the other one.
    best_assignment(|k, r| inactivity(k, 1 - r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    pub pred_dis: f64,
    pub act_dis: f64,
}

/// Min-max scales each column of `[N, 2]` raw per-head scores over both
/// regimes, then computes both disentanglement scores.
pub fn disentanglement(raw: &Tensor, regimes: &[Regime]) -> Result<Disentanglement> {
    let s = raw.shape();
    if s.len() != 2 || s[0] != regimes.len() {
        return Err(EvalError::Invalid(format!("per-head scores {s:?} for {} samples", regimes.len())));
    }
    let heads: Vec<Vec<f64>> = (0..s[1])
        .map(|k| minmax_scale(&(0..s[0]).map(|i| raw.get(&[i, k])).collect::<Vec<_>>()))
        .collect();
    Ok(Disentanglement {
        pred_dis: pred_dis(&heads, regimes)?,
        act_dis: act_dis(&heads, regimes)?,
    })
}

/// Features of every sample, computed once.
pub struct Encoded {
    pub visual: Vec<VisualFeatures>,
    pub audio: Vec<AudioFeatures>,
}

pub fn encode(params: &ModelParams, samples: &[SamplePair], workers: usize) -> Result<Encoded> {
    let pairs = crate::parallel::map_indexed(samples.len(), workers, |i| -> Result<_> {
        let s = &samples[i];
        Ok((params.visual_features(&s.image)?, params.audio_features(&s.clip, s.valid_len)?))
    });
    let (mut visual, mut audio) = (Vec::new(), Vec::new());
    for p in pairs {
        let (v, a) = p?;
        visual.push(v);
        audio.push(a);
    }
    Ok(Encoded { visual, audio })
}

/// Feature frames overlapping raw samples `[start, end)`.
pub fn event_frames(event: (usize, usize), stride: usize, frames: usize) -> Range<usize> {
    let start = (event.0 / stride).min(frames - 1);
    let end = event.1.div_ceil(stride).clamp(start + 1, frames);
    start..end
}

/// One `(image, class)` localization query.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapQuery {
    pub sample: usize,
    pub class_id: usize,
    pub regime: Regime,
    /// Upsampled to image resolution, row-major.
    pub heat: Tensor,
    pub mask: Vec<bool>,
}

/// Heatmaps for every object of every sample. Language samples use the
/// object's own event window in the paired clip; sound samples use a clean
/// prompt of the class's sound averaged over the whole clip.
pub fn prompted_heatmaps(
    params: &ModelParams,
    gen: &GeneratorConfig,
    samples: &[SamplePair],
    encoded: &Encoded,
) -> Result<Vec<HeatmapQuery>> {
    let cfg = &params.config;
    let stride = cfg.audio_stride();
    let mut sound_prompts = BTreeMap::new();
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        for o in &s.objects {
            let (vol, window) = match s.regime {
                Regime::Language => (
                    similarity_volume(&encoded.audio[i], &encoded.visual[i])?,
                    event_frames(o.event, stride, cfg.frames),
                ),
                Regime::Sound => {
                    if !sound_prompts.contains_key(&o.class_id) {
                        let (clip, _) = render_prompt(gen, Regime::Sound, o.class_id);
                        let len = clip.shape()[1];
                        sound_prompts.insert(o.class_id, params.audio_features(&clip, len)?);
                    }
                    (similarity_volume(&sound_prompts[&o.class_id], &encoded.visual[i])?, 0..cfg.frames)
                }
            };
            let heat = prompt_heatmap(&vol, Some(window))?;
            out.push(HeatmapQuery {
                sample: i,
                class_id: o.class_id,
                regime: s.regime,
                heat: upsample_bilinear(&heat, h, w),
                mask: o.mask.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// AP per visual class; `None` for classes absent from the split.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// Mean over classes of the class's pixel prevalence, the expected AP
    /// of scores unrelated to the masks.
    pub prevalence_baseline: f64,
    pub miou: MiouResult,
}

/// Per-class AP over all pixels of all queries of that class, their mean,
/// and the mIoU sweep.
pub fn segmentation_metrics(queries: &[HeatmapQuery], classes: usize) -> Result<SegmentationResult> {
    let mut per_class_ap = vec![None; classes];
    let mut prevalence = Vec::new();
    let mut grouped: Vec<Vec<(&[f64], &[bool])>> = vec![Vec::new(); classes];
    for q in queries {
        if q.class_id >= classes {
            return Err(EvalError::Invalid(format!("class id {} out of range", q.class_id)));
        }
        grouped[q.class_id].push((q.heat.data(), &q.mask));
    }
    for (c, group) in grouped.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let scores: Vec<f64> = group.iter().flat_map(|(h, _)| h.iter().copied()).collect();
        let labels: Vec<bool> = group.iter().flat_map(|(_, m)| m.iter().copied()).collect();
        per_class_ap[c] = Some(average_precision(&scores, &labels)?);
        prevalence.push(labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64);
    }
    let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(EvalError::Invalid("no objects to localize".into()));
    }
    let present: Vec<_> = grouped.into_iter().filter(|g| !g.is_empty()).collect();
    Ok(SegmentationResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        prevalence_baseline: prevalence.iter().sum::<f64>() / prevalence.len() as f64,
        per_class_ap,
        miou: miou_sweep(&present)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Samples in the N-way retrieval task (the first N of the split).
    pub retrieval_n: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { retrieval_n: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub samples: usize,
    pub segmentation: SegmentationResult,
    pub retrieval: RetrievalResult,
    pub disentanglement: Disentanglement,
    pub options: EvalOptions,
    pub generator: GeneratorConfig,
    pub model: crate::featurizers::ModelConfig,
}

/// Full evaluation of `params` on `samples` (normally the eval split).
pub fn evaluate(
    params: &ModelParams,
    checkpoint: &str,
    gen: &GeneratorConfig,
    samples: &[SamplePair],
    options: &EvalOptions,
    workers: usize,
) -> Result<(EvalReport, Vec<HeatmapQuery>)> {
    let n = options.retrieval_n.min(samples.len());
    if n < 10 {
        return Err(EvalError::Invalid(format!("retrieval needs at least 10 samples, have {n}")));
    }
    let encoded = encode(params, samples, workers)?;
    let queries = prompted_heatmaps(params, gen, samples, &encoded)?;
    let segmentation = segmentation_metrics(&queries, gen.visual_classes())?;
    let m = batch_score_matrix(&encoded.audio[..n], &encoded.visual[..n], params.config.head_pool)?;
    let retrieval = retrieval_accuracy(&m)?;
    let heads = paired_head_scores(&encoded.audio, &encoded.visual)?;
    let regimes: Vec<Regime> = samples.iter().map(|s| s.regime).collect();
    let disentanglement = disentanglement(&heads, &regimes)?;
    let report = EvalReport {
        checkpoint: checkpoint.to_string(),
        samples: samples.len(),
        segmentation,
        retrieval,
        disentanglement,
        options: options.clone(),
        generator: gen.clone(),
        model: params.config.clone(),
    };
    Ok((report, queries))
}

impl EvalReport {
    /// `(metric, name, value)` rows of the flat CSV.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for (c, ap) in self.segmentation.per_class_ap.iter().enumerate() {
            if let Some(ap) = ap {
                rows.push(("ap".into(), format!("object_{c:02}"), *ap));
            }
        }
        let seg = &self.segmentation;
        rows.push(("segmentation".into(), "map".into(), seg.map));
        rows.push(("segmentation".into(), "prevalence_baseline".into(), seg.prevalence_baseline));
        rows.push(("segmentation".into(), "miou".into(), seg.miou.miou));
        rows.push(("segmentation".into(), "miou_threshold_index".into(), seg.miou.threshold_index as f64));
        for (dir, acc) in [
            ("audio_to_image", &self.retrieval.audio_to_image),
            ("image_to_audio", &self.retrieval.image_to_audio),
        ] {
            for (k, v) in [(1, acc.at1), (5, acc.at5), (10, acc.at10)] {
                rows.push(("retrieval".into(), format!("{dir}@{k}"), v));
            }
        }
        rows.push(("disentanglement".into(), "pred_dis".into(), self.disentanglement.pred_dis));
        rows.push(("disentanglement".into(), "act_dis".into(), self.disentanglement.act_dis));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,name,value\n");
        for (m, n, v) in self.rows() {
            s.push_str(&format!("{m},{n},{v}\n"));
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        let json = crate::json::to_canonical_pretty(self).expect("report serializes");
        let p = dir.join("report.json");
        std::fs::write(&p, json + "\n").map_err(io(&p))?;
        let p = dir.join("report.csv");
        std::fs::write(&p, self.to_csv()).map_err(io(&p))
    }
}
