//! Similarity volumes between dense audio and visual features, their
//! pooling into scores, and heatmaps for localization.

use std::fs;
use std::io;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizers::{AudioFeatures, VisualFeatures};
use crate::tensor::{Graph, HeadPool, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("empty time window {start}..{end} for {frames} frames")]
    EmptyWindow {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SimilarityError>;

/// `s[k, f, t, h, w]`: inner products between every audio position and
/// every image position, per head.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVolume(pub Tensor);

impl SimilarityVolume {
    pub fn new(volume: Tensor) -> Result<Self> {
        if volume.rank() != 5 {
            return Err(TensorError::Invalid(format!("volume must be [K, F, T, H, W], got {:?}", volume.shape())).into());
        }
        Ok(Self(volume))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn heads(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Un-normalized inner products `sum_c a[c, k, f, t] * v[c, k, h, w]`.
pub fn similarity_volume(audio: &AudioFeatures, visual: &VisualFeatures) -> Result<SimilarityVolume> {
    let mut g = Graph::inference();
    let a = g.constant(audio.features.clone());
    let v = g.constant(visual.features.clone());
    let s = g.similarity_volume(a, v)?;
    SimilarityVolume::new(g.value(s).clone())
}

/// `(1 / FT) * sum_{f,t} max_{k,h,w} s` (or the head-mean variant).
pub fn aggregate(vol: &SimilarityVolume, pool: HeadPool) -> Result<f64> {
    let mut g = Graph::inference();
    let s = g.constant(vol.0.clone());
    let score = g.aggregate(s, pool)?;
    Ok(g.value(score).item())
}

/// Per-head scores `(1 / FT) * sum_{f,t} max_{h,w} s[k]`.
pub fn per_head_scores(vol: &SimilarityVolume) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let s = g.constant(vol.0.clone());
    let scores = g.per_head_scores(s)?;
    Ok(g.value(scores).data().to_vec())
}

/// Stacks per-sample features into `[B, ...]` batches.
fn stack_audio(audio: &[AudioFeatures]) -> Result<Tensor> {
    let parts: Vec<Tensor> = audio.iter().map(|a| a.features.clone()).collect();
    Ok(Tensor::stack(&parts)?)
}

fn stack_visual(visual: &[VisualFeatures]) -> Result<Tensor> {
    let parts: Vec<Tensor> = visual.iter().map(|v| v.features.clone()).collect();
    Ok(Tensor::stack(&parts)?)
}

/// Audio rows per chunk when scoring large batches.
const SCORE_CHUNK: usize = 10;

/// `M[i, j] = aggregate(similarity_volume(audio[i], visual[j]))`; the
/// diagonal holds the positive pairs. Rows are evaluated in chunks.
pub fn batch_score_matrix(audio: &[AudioFeatures], visual: &[VisualFeatures], pool: HeadPool) -> Result<Tensor> {
    let (b, b2) = (audio.len(), visual.len());
    if b == 0 || b2 == 0 {
        return Ok(Tensor::zeros([b, b2]));
    }
    let vt = stack_visual(visual)?;
    let mut out = Vec::with_capacity(b * b2);
    for chunk in audio.chunks(SCORE_CHUNK) {
        let mut g = Graph::inference();
        let a = g.constant(stack_audio(chunk)?);
        let v = g.constant(vt.clone());
        let vols = g.pair_volumes(a, v)?;
        let m = g.aggregate(vols, pool)?;
        out.extend_from_slice(g.value(m).data());
    }
    Ok(Tensor::new([b, b2], out)?)
}

/// Per-head scores of the positive pairs `(audio[i], visual[i])`, shape `[B, K]`.
pub fn paired_head_scores(audio: &[AudioFeatures], visual: &[VisualFeatures]) -> Result<Tensor> {
    if audio.len() != visual.len() {
        return Err(TensorError::Invalid(format!("{} audio vs {} visual features", audio.len(), visual.len())).into());
    }
    let mut rows = Vec::with_capacity(audio.len());
    for (a, v) in audio.iter().zip(visual) {
        let vol = similarity_volume(a, v)?;
        rows.push(Tensor::new([vol.heads()], per_head_scores(&vol)?)?);
    }
    Ok(Tensor::stack(&rows)?)
}

/// `heat[h, w]` = mean over f and over t in `window` of `max_k s[k, f, t, h, w]`.
/// `None` averages over the whole clip.
pub fn prompt_heatmap(vol: &SimilarityVolume, window: Option<Range<usize>>) -> Result<Tensor> {
    let s = vol.0.shape();
    let (k, f, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let range = window.unwrap_or(0..t);
    if range.start >= range.end || range.end > t {
        return Err(SimilarityError::EmptyWindow {
            start: range.start,
            end: range.end,
            frames: t,
        });
    }
    let hw = h * w;
    let data = vol.0.data();
    let mut heat = vec![0.0; hw];
    for fi in 0..f {
        for ti in range.clone() {
            for (j, acc) in heat.iter_mut().enumerate() {
                let best = (0..k)
                    .map(|ki| data[((ki * f + fi) * t + ti) * hw + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                *acc += best;
            }
        }
    }
    let n = (f * range.len()) as f64;
    heat.iter_mut().for_each(|v| *v /= n);
    Ok(Tensor::new([h, w], heat)?)
}

/// Bilinear resize of an `[H, W]` map with aligned corners: output pixel
/// `(i, j)` samples source coordinate `(i * (H-1) / (H'-1), j * (W-1) / (W'-1))`.
pub fn upsample_bilinear(map: &Tensor, height: usize, width: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if dst <= 1 || src <= 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (x.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let d = map.data();
    Tensor::from_fn([height, width], |idx| {
        let (i, j) = (idx / width, idx % width);
        let (y0, y1, fy) = coord(i, h, height);
        let (x0, x1, fx) = coord(j, w, width);
        let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
        let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Raw value range of an exported heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
}

/// Writes `map` as an 8-bit binary PGM (P5), min-max normalized, plus a JSON
/// sidecar (`<path>.json`) with the raw range.
pub fn write_heatmap_pgm(path: &Path, map: &Tensor) -> io::Result<HeatmapSidecar> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes)?;
    let sidecar = HeatmapSidecar {
        width: w,
        height: h,
        min,
        max,
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    fs::write(side, serde_json::to_string(&sidecar).map_err(io::Error::other)?)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 5], data: Vec<f64>) -> SimilarityVolume {
        SimilarityVolume::new(Tensor::new(shape, data).unwrap()).unwrap()
    }

    /// K=2, F=1, T=2, H=W=1 with head slices (1, 3) and (2, 0).
    fn two_head_example() -> SimilarityVolume {
        vol([2, 1, 2, 1, 1], vec![1.0, 3.0, 2.0, 0.0])
    }

    #[test]
    fn aggregate_examples() {
        let v = two_head_example();
        assert_eq!(aggregate(&v, HeadPool::Max).unwrap(), 2.5);
        assert_eq!(per_head_scores(&v).unwrap(), vec![2.0, 1.0]);
        assert_eq!(aggregate(&v, HeadPool::Mean).unwrap(), 1.5);
        let c = vol([2, 1, 3, 2, 2], vec![0.75; 24]);
        assert_eq!(aggregate(&c, HeadPool::Max).unwrap(), 0.75);
    }

    #[test]
    fn single_head_score_equals_aggregate() {
        let v = vol([1, 1, 3, 2, 1], vec![0.5, -1.0, 2.0, 4.0, 0.0, 1.0]);
        assert_eq!(per_head_scores(&v).unwrap(), vec![aggregate(&v, HeadPool::Max).unwrap()]);
    }

    #[test]
    fn heatmap_examples() {
        let v = vol([1, 1, 2, 1, 1], vec![1.0, 3.0]);
        assert_eq!(prompt_heatmap(&v, None).unwrap().data(), &[2.0]);
        assert_eq!(prompt_heatmap(&v, Some(1..2)).unwrap().data(), &[3.0]);
        assert!(matches!(prompt_heatmap(&v, Some(1..1)), Err(SimilarityError::EmptyWindow { .. })));
        assert!(prompt_heatmap(&v, Some(0..3)).is_err());
        let two = two_head_example();
        assert_eq!(prompt_heatmap(&two, Some(0..1)).unwrap().data(), &[2.0]);
    }

    #[test]
    fn bilinear_examples() {
        let m = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        let up = upsample_bilinear(&m, 3, 3);
        assert!((up.get(&[1, 1]) - 1.0).abs() < 1e-12);
        assert_eq!(up.get(&[2, 2]), 2.0);
        assert_eq!(upsample_bilinear(&m, 2, 2), m);
        let one = Tensor::new([1, 1], vec![4.0]).unwrap();
        assert!(upsample_bilinear(&one, 5, 7).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn pgm_export_writes_header_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        let m = Tensor::new([1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let side = write_heatmap_pgm(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        assert_eq!((side.min, side.max), (-1.0, 1.0));
        let json = fs::read_to_string(dir.path().join("h.pgm.json")).unwrap();
        let back: HeatmapSidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(back, side);
    }
}
