#![allow(dead_code)]

pub mod grads;

use dg_core::featurizers::{ModelConfig, ModelParams};
use dg_core::tensor::{Graph, HeadPool, Tensor};
use dg_core::training::Batch;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Values in (-1, 1) with pairwise gaps of at least `1 / n` and none within
/// `1 / (2n)` of zero, so max/abs/relu kinks stay far from a central
/// difference step.
pub fn tie_free(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(r);
    let width = 2.0 / n as f64;
    Tensor::from_fn(shape.to_vec(), |i| {
        let jitter = r.random_range(-0.2..0.2) * width;
        -1.0 + (slots[i] as f64 + 0.5) * width + jitter
    })
}

/// `[B, C, K, F, T]` x `[B', C, K, H, W]` -> `[B, B', K, F, T, H, W]` by
/// explicit loops.
pub fn naive_volumes(a: &Tensor, v: &Tensor) -> Tensor {
    let (sa, sv) = (a.shape(), v.shape());
    let (b, c, k, f, t) = (sa[0], sa[1], sa[2], sa[3], sa[4]);
    let (b2, h, w) = (sv[0], sv[3], sv[4]);
    let mut out = Tensor::zeros([b, b2, k, f, t, h, w]);
    for i in 0..b {
        for j in 0..b2 {
            for kk in 0..k {
                for ff in 0..f {
                    for tt in 0..t {
                        for hh in 0..h {
                            for ww in 0..w {
                                let mut s = 0.0;
                                for cc in 0..c {
                                    s += a.get(&[i, cc, kk, ff, tt]) * v.get(&[j, cc, kk, hh, ww]);
                                }
                                out.set(&[i, j, kk, ff, tt, hh, ww], s);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Pooled score of one `[K, F, T, H, W]` volume by explicit loops.
pub fn naive_aggregate(vol: &Tensor, pool: HeadPool) -> f64 {
    let s = vol.shape();
    let (k, f, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let best_over = |heads: &[usize], ff: usize, tt: usize| {
        let mut best = f64::NEG_INFINITY;
        for &kk in heads {
            for hh in 0..h {
                for ww in 0..w {
                    best = best.max(vol.get(&[kk, ff, tt, hh, ww]));
                }
            }
        }
        best
    };
    let all: Vec<usize> = (0..k).collect();
    let mut acc = 0.0;
    for ff in 0..f {
        for tt in 0..t {
            acc += match pool {
                HeadPool::Max => best_over(&all, ff, tt),
                HeadPool::Mean => (0..k).map(|kk| best_over(&[kk], ff, tt)).sum::<f64>() / k as f64,
            };
        }
    }
    acc / (f * t) as f64
}

/// Library volumes for random features.
pub fn graph_volumes(a: &Tensor, v: &Tensor) -> Tensor {
    let mut g = Graph::inference();
    let av = g.constant(a.clone());
    let vv = g.constant(v.clone());
    let vol = g.pair_volumes(av, vv).unwrap();
    g.value(vol).clone()
}

/// A model small enough for finite differences over every weight.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: 3,
        heads: 2,
        feature_height: 2,
        feature_width: 2,
        frames: 4,
        image_channels: 2,
        image_height: 4,
        image_width: 4,
        audio_channels: 2,
        audio_length: 8,
        visual_widths: vec![3],
        audio_widths: vec![3],
        head_pool: HeadPool::Max,
    }
}

/// A random batch for [`tiny_config`]; the first clip carries a splice mask.
pub fn tiny_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let images = uniform(&[b, cfg.image_channels, cfg.image_height, cfg.image_width], &mut r);
    let clips = uniform(&[b, cfg.audio_channels, cfg.audio_length], &mut r);
    let mut splice_mask = Tensor::zeros([b, cfg.frames]);
    splice_mask.set(&[0, 1], 0.5);
    splice_mask.set(&[0, 2], 1.0);
    Batch {
        ids: (0..b).collect(),
        flipped: vec![false; b],
        splices: vec![None; b],
        images,
        clips,
        splice_mask,
    }
}

/// Initial weights plus noise, so biases and gains are away from their
/// special values.
pub fn tiny_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    // Below 1 so the calibration term is active.
    let lg = p.tensors_mut().last_mut().unwrap();
    lg.data_mut()[0] = -0.2;
    p
}
