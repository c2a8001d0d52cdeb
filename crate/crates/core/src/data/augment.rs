//! Clip padding, negative splicing and image flips.

use super::{DataError, Result, SamplePair};
use crate::tensor::Tensor;

/// Trims or zero-pads `clip` (`[C, T]`) to `target` samples. Returns the
/// new clip, the number of real samples kept and a mask that is 1 on the
/// padding.
pub fn pad_or_trim(clip: &Tensor, target: usize) -> (Tensor, usize, Vec<f64>) {
    let (c, t) = (clip.shape()[0], clip.shape()[1]);
    let keep = t.min(target);
    let out = Tensor::from_fn([c, target], |i| {
        let (k, tau) = (i / target, i % target);
        if tau < keep {
            clip.data()[k * t + tau]
        } else {
            0.0
        }
    });
    let mask = (0..target).map(|tau| if tau < keep { 0.0 } else { 1.0 }).collect();
    (out, keep, mask)
}

/// Crossfade weight of the donor at offset `j` of a segment of `len`
/// samples with ramps of `ramp_len` at both ends.
fn donor_weight(j: usize, len: usize, ramp_len: usize) -> f64 {
    let edge = j.min(len - 1 - j);
    if edge < ramp_len {
        (edge as f64 + 0.5) / ramp_len as f64
    } else {
        1.0
    }
}

/// Crossfades `donor` (`[C, L]`) into `clip` (`[C, T]`) starting at
/// `position`. The first and last `ramp_len` samples of the segment are
/// linear ramps; the mask is the donor weight (1 in the pure donor region,
/// 0 outside the segment).
pub fn splice_negative(clip: &Tensor, donor: &Tensor, position: usize, ramp_len: usize) -> Result<(Tensor, Vec<f64>)> {
    let (c, t) = (clip.shape()[0], clip.shape()[1]);
    let len = donor.shape()[1];
    let end = position + len;
    if donor.shape()[0] != c || end > t || (len > 0 && 2 * ramp_len > len) {
        return Err(DataError::OutOfBounds {
            position,
            end,
            len: t,
            ramp_len,
        });
    }
    let mut out = clip.clone();
    let mut mask = vec![0.0; t];
    for j in 0..len {
        let w = donor_weight(j, len, ramp_len);
        mask[position + j] = w;
        for k in 0..c {
            let o = &mut out.data_mut()[k * t + position + j];
            *o = (1.0 - w) * *o + w * donor.data()[k * len + j];
        }
    }
    Ok((out, mask))
}

/// Mirrors the image and every object mask left to right.
pub fn flip_horizontal(sample: &mut SamplePair) {
    let s = sample.image.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let src = sample.image.clone();
    for (i, x) in sample.image.data_mut().iter_mut().enumerate() {
        let (row, col) = (i / w, i % w);
        *x = src.data()[row * w + (w - 1 - col)];
    }
    for o in &mut sample.objects {
        for y in 0..h {
            o.mask[y * w..(y + 1) * w].reverse();
        }
    }
}

/// Averages a per-sample mask over consecutive windows to `frames` values.
pub fn frame_mask(mask: &[f64], frames: usize) -> Vec<f64> {
    let stride = mask.len() / frames;
    (0..frames)
        .map(|f| mask[f * stride..(f + 1) * stride].iter().sum::<f64>() / stride as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_clip(c: usize, t: usize, offset: f64) -> Tensor {
        Tensor::from_fn([c, t], |i| i as f64 + offset)
    }

    #[test]
    fn pad_exact_length_is_identity() {
        let clip = ramp_clip(2, 8, 0.0);
        let (out, valid, mask) = pad_or_trim(&clip, 8);
        assert_eq!(out, clip);
        assert_eq!(valid, 8);
        assert!(mask.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn pad_half_length() {
        let clip = ramp_clip(2, 4, 1.0);
        let (out, valid, mask) = pad_or_trim(&clip, 8);
        assert_eq!(valid, 4);
        assert_eq!(mask, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        for k in 0..2 {
            assert!((4..8).all(|t| out.get(&[k, t]) == 0.0));
            assert!((0..4).all(|t| out.get(&[k, t]) == clip.get(&[k, t])));
        }
    }

    #[test]
    fn trim_then_pad_keeps_prefix() {
        let clip = Tensor::from_fn([3, 50], |i| (i as f64 * 0.37).sin());
        let (trimmed, _, _) = pad_or_trim(&clip, 20);
        let (back, valid, _) = pad_or_trim(&trimmed, 20);
        assert_eq!(valid, 20);
        for k in 0..3 {
            for t in 0..20 {
                assert_eq!(back.get(&[k, t]).to_bits(), clip.get(&[k, t]).to_bits());
            }
        }
    }

    #[test]
    fn hard_cut_splice() {
        let clip = Tensor::zeros([2, 10]);
        let donor = Tensor::ones([2, 3]);
        let (out, mask) = splice_negative(&clip, &donor, 4, 0).unwrap();
        assert_eq!(mask, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(out.get(&[1, 5]), 1.0);
        assert_eq!(out.get(&[1, 7]), 0.0);
    }

    #[test]
    fn empty_splice_is_identity() {
        let clip = ramp_clip(2, 10, 0.0);
        let (out, mask) = splice_negative(&clip, &Tensor::zeros([2, 0]), 3, 2).unwrap();
        assert_eq!(out, clip);
        assert!(mask.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn ramp_midpoint_is_half_and_half() {
        let clip = Tensor::full([1, 20], 2.0);
        let donor = Tensor::full([1, 12], 6.0);
        let (out, mask) = splice_negative(&clip, &donor, 5, 3).unwrap();
        // Ramp of 3 samples: its midpoint is offset 1.
        assert_eq!(mask[6], 0.5);
        assert_eq!(out.get(&[0, 6]), 4.0);
        assert_eq!(mask[5 + 12 - 2], 0.5);
        assert!(mask[8..14].iter().all(|&m| m == 1.0));
        assert!(mask[5..17].iter().all(|&m| m > 0.0 && m <= 1.0));
    }

    #[test]
    fn splice_out_of_bounds() {
        let clip = Tensor::zeros([1, 10]);
        assert!(splice_negative(&clip, &Tensor::zeros([1, 4]), 7, 0).is_err());
        assert!(splice_negative(&clip, &Tensor::zeros([1, 4]), 0, 3).is_err());
        assert!(splice_negative(&clip, &Tensor::zeros([2, 4]), 0, 0).is_err());
    }

    #[test]
    fn frame_mask_averages_windows() {
        let m = [0.0, 0.0, 1.0, 1.0, 0.5, 0.0, 1.0, 0.0];
        assert_eq!(frame_mask(&m, 4), [0.0, 1.0, 0.25, 0.5]);
    }

    proptest! {
        #[test]
        fn splice_stays_between_sources(pos in 0usize..20, len in 0usize..20, ramp in 0usize..6) {
            prop_assume!(pos + len <= 40 && 2 * ramp <= len);
            let clip = Tensor::full([2, 40], -1.0);
            let donor = Tensor::full([2, len], 3.0);
            let (out, mask) = splice_negative(&clip, &donor, pos, ramp).unwrap();
            for t in 0..40 {
                prop_assert!((0.0..=1.0).contains(&mask[t]));
                prop_assert!(((out.get(&[0, t]) - (-1.0 + 4.0 * mask[t])).abs()) < 1e-12);
                if t < pos || t >= pos + len {
                    prop_assert_eq!(mask[t], 0.0);
                }
            }
        }
    }
}
