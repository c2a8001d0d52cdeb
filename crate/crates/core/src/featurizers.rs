//! Small trainable backbones plus the aligner heads that turn their output
//! into dense per-location features split into heads.
//!
//! Visual path: strided 3x3 conv + relu blocks, channel LayerNorm, 1x1 conv
//! to `C * K` channels, reshape to `[C, K, H, W]`.
//!
//! Audio path: strided temporal conv + relu blocks, channel LayerNorm, two
//! width-3 temporal convs with a relu between them, reshape to
//! `[C, K, 1, T]` (a single frequency bin).
//!
//! Channel `c * K + k` of an aligner output is channel `c` of head `k`, so
//! the head split is a pure reshape.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{ConvSpec, Graph, HeadPool, Result as TensorResult, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels per head.
    pub channels: usize,
    pub heads: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    pub frames: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub audio_channels: usize,
    pub audio_length: usize,
    /// Output widths of the stride-2 visual backbone blocks.
    pub visual_widths: Vec<usize>,
    /// Output widths of the stride-2 audio backbone blocks.
    pub audio_widths: Vec<usize>,
    pub head_pool: HeadPool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 2,
            feature_height: 8,
            feature_width: 8,
            frames: 32,
            image_channels: 3,
            image_height: 64,
            image_width: 64,
            audio_channels: 16,
            audio_length: 256,
            visual_widths: vec![16, 32, 32],
            audio_widths: vec![32, 32, 32],
            head_pool: HeadPool::Max,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("feature_height", self.feature_height),
            ("feature_width", self.feature_width),
            ("frames", self.frames),
            ("image_channels", self.image_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("audio_channels", self.audio_channels),
            ("audio_length", self.audio_length),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.visual_widths.is_empty() || self.audio_widths.is_empty() {
            return Err(ModelError::InvalidConfig("backbones need at least one block".into()));
        }
        if self.visual_widths.iter().chain(&self.audio_widths).any(|&w| w == 0) {
            return Err(ModelError::InvalidConfig("backbone widths must be positive".into()));
        }
        let vs = self.visual_stride();
        if self.feature_height * vs != self.image_height || self.feature_width * vs != self.image_width {
            return Err(ModelError::InvalidConfig(format!(
                "image {}x{} is not feature grid {}x{} times visual stride {vs}",
                self.image_height, self.image_width, self.feature_height, self.feature_width
            )));
        }
        if self.frames * self.audio_stride() != self.audio_length {
            return Err(ModelError::InvalidConfig(format!(
                "audio length {} is not {} frames times audio stride {}",
                self.audio_length,
                self.frames,
                self.audio_stride()
            )));
        }
        Ok(())
    }

    pub fn visual_stride(&self) -> usize {
        1 << self.visual_widths.len()
    }

    pub fn audio_stride(&self) -> usize {
        1 << self.audio_widths.len()
    }

    /// Aligner output width, `C * K`.
    pub fn aligned_channels(&self) -> usize {
        self.channels * self.heads
    }

    /// Feature frames covering `valid_len` raw samples.
    pub fn valid_frames(&self, valid_len: usize) -> usize {
        valid_len.div_ceil(self.audio_stride())
    }
}

/// Which training phase may update a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Backbone weights; frozen during aligner warm-up.
    Backbone,
    /// Aligner weights and the log inverse temperature.
    Aligner,
}

/// All model weights as an ordered list of named tensors.
///
/// Order: visual backbone blocks, audio backbone blocks, visual aligner,
/// audio aligner, `log_gamma`. The order is part of the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut cin = cfg.image_channels;
    for (i, &w) in cfg.visual_widths.iter().enumerate() {
        out.push((format!("visual.backbone.conv{i}.weight"), vec![w, cin, 3, 3]));
        out.push((format!("visual.backbone.conv{i}.bias"), vec![w]));
        cin = w;
    }
    let visual_out = cin;
    let mut cin = cfg.audio_channels;
    for (i, &w) in cfg.audio_widths.iter().enumerate() {
        out.push((format!("audio.backbone.conv{i}.weight"), vec![w, cin, 3]));
        out.push((format!("audio.backbone.conv{i}.bias"), vec![w]));
        cin = w;
    }
    let audio_out = cin;
    let ck = cfg.aligned_channels();
    out.push(("visual.aligner.norm.gain".into(), vec![visual_out]));
    out.push(("visual.aligner.norm.bias".into(), vec![visual_out]));
    out.push(("visual.aligner.proj.weight".into(), vec![ck, visual_out, 1, 1]));
    out.push(("visual.aligner.proj.bias".into(), vec![ck]));
    out.push(("audio.aligner.norm.gain".into(), vec![audio_out]));
    out.push(("audio.aligner.norm.bias".into(), vec![audio_out]));
    out.push(("audio.aligner.conv1.weight".into(), vec![ck, audio_out, 3]));
    out.push(("audio.aligner.conv1.bias".into(), vec![ck]));
    out.push(("audio.aligner.conv2.weight".into(), vec![ck, ck, 3]));
    out.push(("audio.aligner.conv2.bias".into(), vec![ck]));
    out.push(("log_gamma".into(), vec![1]));
    out
}

impl ModelParams {
    /// Fan-in scaled normal conv weights, zero biases, unit LayerNorm gains
    /// and `log_gamma = 0`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_shapes(config) {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let std = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
            } else if name.ends_with(".gain") {
                Tensor::ones(shape)
            } else {
                Tensor::zeros(shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != named.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn group(name: &str) -> ParamGroup {
        if name.contains(".backbone.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::Aligner
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.names.iter().map(|n| Self::group(n)).collect()
    }

    pub fn log_gamma(&self) -> f64 {
        self.get("log_gamma").expect("log_gamma present").item()
    }

    /// Inverse temperature, always positive.
    pub fn gamma(&self) -> f64 {
        self.log_gamma().exp()
    }

    /// Registers every tensor on `g`: trainable when `trainable(group)`,
    /// constant otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> BoundParams {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if trainable(Self::group(n)) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            names: self.names.clone(),
            vars,
        }
    }

    /// Visual features for one image `[C_in, H_in, W_in]`.
    pub fn visual_features(&self, image: &Tensor) -> Result<VisualFeatures, ModelError> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, |_| false);
        let s = image.shape();
        if s.len() != 3 {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "visual_forward",
                lhs: s.to_vec(),
                rhs: vec![self.config.image_channels, self.config.image_height, self.config.image_width],
            }));
        }
        let x = g.constant(image.clone().reshape([1, s[0], s[1], s[2]])?);
        let v = visual_forward(&mut g, &p, &self.config, x)?;
        Ok(VisualFeatures {
            features: g.value(v).index_axis0(0),
        })
    }

    /// Audio features for one clip `[C_in, T_in]` with `valid_len` real samples.
    pub fn audio_features(&self, clip: &Tensor, valid_len: usize) -> Result<AudioFeatures, ModelError> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, |_| false);
        let s = clip.shape();
        if s.len() != 2 {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "audio_forward",
                lhs: s.to_vec(),
                rhs: vec![self.config.audio_channels, self.config.audio_length],
            }));
        }
        let x = g.constant(clip.clone().reshape([1, s[0], s[1]])?);
        let a = audio_forward(&mut g, &p, &self.config, x)?;
        Ok(AudioFeatures {
            features: g.value(a).index_axis0(0),
            valid_frames: self.config.valid_frames(valid_len.min(self.config.audio_length)),
        })
    }
}

/// Parameters registered on a graph, in [`ModelParams`] order.
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `[C, K, H, W]` visual features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub features: Tensor,
}

/// `[C, K, 1, T]` audio features of one clip; frames at or beyond
/// `valid_frames` come from padding silence.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub features: Tensor,
    pub valid_frames: usize,
}

fn check_input(g: &Graph, x: Var, expect: &[usize], op: &'static str) -> TensorResult<()> {
    let s = g.shape(x);
    if s.len() != expect.len() + 1 || &s[1..] != expect {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: expect.to_vec(),
        });
    }
    Ok(())
}

fn conv_bias(g: &mut Graph, x: Var, w: Var, b: Var, spec: ConvSpec) -> TensorResult<Var> {
    let y = g.conv(x, w, spec)?;
    let spatial = g.shape(y).len() - 2;
    let c = g.shape(b)[0];
    let mut bshape = vec![c];
    bshape.extend(std::iter::repeat_n(1, spatial));
    let b = g.reshape(b, &bshape)?;
    g.add(y, b)
}

/// Batched visual path: `[N, C_in, H_in, W_in]` -> `[N, C, K, H, W]`.
pub fn visual_forward(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, images: Var) -> TensorResult<Var> {
    check_input(
        g,
        images,
        &[cfg.image_channels, cfg.image_height, cfg.image_width],
        "visual_forward",
    )?;
    let n = g.shape(images)[0];
    let mut x = images;
    for i in 0..cfg.visual_widths.len() {
        let w = p.var(&format!("visual.backbone.conv{i}.weight"));
        let b = p.var(&format!("visual.backbone.conv{i}.bias"));
        let y = conv_bias(g, x, w, b, ConvSpec::strided(2))?;
        x = g.relu(y);
    }
    let x = g.layer_norm(
        x,
        p.var("visual.aligner.norm.gain"),
        p.var("visual.aligner.norm.bias"),
        1,
        LAYER_NORM_EPS,
    )?;
    let y = conv_bias(
        g,
        x,
        p.var("visual.aligner.proj.weight"),
        p.var("visual.aligner.proj.bias"),
        ConvSpec::same(),
    )?;
    g.reshape(y, &[n, cfg.channels, cfg.heads, cfg.feature_height, cfg.feature_width])
}

/// Batched audio path: `[N, C_in, T_in]` -> `[N, C, K, 1, T]`.
pub fn audio_forward(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, clips: Var) -> TensorResult<Var> {
    check_input(g, clips, &[cfg.audio_channels, cfg.audio_length], "audio_forward")?;
    let n = g.shape(clips)[0];
    let mut x = clips;
    for i in 0..cfg.audio_widths.len() {
        let w = p.var(&format!("audio.backbone.conv{i}.weight"));
        let b = p.var(&format!("audio.backbone.conv{i}.bias"));
        let y = conv_bias(g, x, w, b, ConvSpec::strided(2))?;
        x = g.relu(y);
    }
    let x = g.layer_norm(
        x,
        p.var("audio.aligner.norm.gain"),
        p.var("audio.aligner.norm.bias"),
        1,
        LAYER_NORM_EPS,
    )?;
    let h = conv_bias(
        g,
        x,
        p.var("audio.aligner.conv1.weight"),
        p.var("audio.aligner.conv1.bias"),
        ConvSpec::same(),
    )?;
    let h = g.relu(h);
    let y = conv_bias(
        g,
        h,
        p.var("audio.aligner.conv2.weight"),
        p.var("audio.aligner.conv2.bias"),
        ConvSpec::same(),
    )?;
    g.reshape(y, &[n, cfg.channels, cfg.heads, 1, cfg.frames])
}

/// Concatenates `[C, K, ...]` head features back into `[C * K, ...]`
/// aligner channels.
pub fn merge_heads(features: &Tensor) -> Tensor {
    let s = features.shape();
    let mut shape = vec![s[0] * s[1]];
    shape.extend_from_slice(&s[2..]);
    features.clone().reshape(shape).expect("same element count")
}

/// Splits `[C * K, ...]` aligner channels into `[C, K, ...]`.
pub fn split_heads(aligned: &Tensor, heads: usize) -> TensorResult<Tensor> {
    let s = aligned.shape();
    if s.is_empty() || heads == 0 || s[0] % heads != 0 {
        return Err(TensorError::Invalid(format!("cannot split {s:?} into {heads} heads")));
    }
    let mut shape = vec![s[0] / heads, heads];
    shape.extend_from_slice(&s[1..]);
    aligned.clone().reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
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

    #[test]
    fn init_is_deterministic_with_unit_gamma() {
        let a = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        let b = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gamma(), 1.0);
        let c = ModelParams::init(&ModelConfig::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 0;
        assert!(matches!(ModelParams::init(&cfg, 0), Err(ModelError::InvalidConfig(_))));
        let mut cfg = ModelConfig::default();
        cfg.image_height = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.frames = 31;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn weight_std_matches_fan_in() {
        // 64 * 64 * 3 = 12288 draws with fan-in 192.
        let p = ModelParams::init(&ModelConfig::default(), 11).unwrap();
        let w = p.get("audio.aligner.conv2.weight").unwrap();
        assert!(w.numel() >= 10_000);
        let n = w.numel() as f64;
        let mean = w.sum() / n;
        let std = (w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / 192f64.sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "std {std} target {target}");
    }

    #[test]
    fn output_shapes_for_default_config() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let img = Tensor::from_fn([3, 64, 64], |i| (i as f64 * 0.01).sin());
        assert_eq!(p.visual_features(&img).unwrap().features.shape(), &[32, 2, 8, 8]);
        let clip = Tensor::from_fn([16, 256], |i| (i as f64 * 0.03).cos());
        let a = p.audio_features(&clip, 200).unwrap();
        assert_eq!(a.features.shape(), &[32, 2, 1, 32]);
        assert_eq!(a.valid_frames, 25);
        assert!(p.visual_features(&Tensor::zeros([3, 32, 64])).is_err());
    }

    #[test]
    fn silence_gives_zero_finite_features() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let a = p.audio_features(&Tensor::zeros([16, 256]), 0).unwrap();
        assert!(a.features.all_finite());
        assert!(a.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_seeds_give_different_features() {
        let cfg = ModelConfig::default();
        let img = Tensor::from_fn([3, 64, 64], |i| (i as f64 * 0.37).sin());
        let f1 = ModelParams::init(&cfg, 1).unwrap().visual_features(&img).unwrap();
        let f2 = ModelParams::init(&cfg, 2).unwrap().visual_features(&img).unwrap();
        assert_ne!(f1, f2);
    }

    #[test]
    fn head_split_round_trips() {
        let f = Tensor::from_fn([4, 3, 2, 2], |i| i as f64);
        assert_eq!(split_heads(&merge_heads(&f), 3).unwrap(), f);
        assert!(split_heads(&Tensor::zeros([5, 2]), 2).is_err());
    }

    #[test]
    fn groups_partition_parameters() {
        let p = ModelParams::init(&tiny(), 0).unwrap();
        let groups = p.groups();
        let backbone = groups.iter().filter(|g| **g == ParamGroup::Backbone).count();
        let aligner = groups.iter().filter(|g| **g == ParamGroup::Aligner).count();
        assert_eq!(backbone + aligner, p.names().len());
        assert_eq!(backbone, 4);
        assert_eq!(ModelParams::group("log_gamma"), ParamGroup::Aligner);
    }

    #[test]
    fn from_named_checks_layout() {
        let p = ModelParams::init(&tiny(), 0).unwrap();
        let named: Vec<_> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        assert_eq!(ModelParams::from_named(tiny(), named.clone()).unwrap(), p);
        let mut bad = named;
        bad.swap(0, 1);
        assert!(ModelParams::from_named(tiny(), bad).is_err());
    }
}
