//! Three operations behind a static page: generate a synthetic pair, load a
//! `dg train` checkpoint, and localize one object of the pair with a chosen
//! head. Pixels cross the boundary as RGBA bytes ready for `ImageData`.

use dg_core::checkpoint::Checkpoint;
use dg_core::data::{generate_sample, render_prompt, GeneratorConfig, Regime, SamplePair};
use dg_core::evaluation::{average_precision, event_frames, iou, minmax_scale};
use dg_core::featurizers::{ModelConfig, ModelParams};
use dg_core::rng;
use dg_core::similarity::{prompt_heatmap, similarity_volume, upsample_bilinear, SimilarityVolume};
use dg_core::tensor::Tensor;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    generator: GeneratorConfig,
    params: ModelParams,
    source: String,
    sample: Option<SamplePair>,
}

/// Result of one localization query.
#[wasm_bindgen]
pub struct Localization {
    rgba: Vec<u8>,
    ap: f64,
    iou: f64,
    frames: String,
}

#[wasm_bindgen]
impl Localization {
    /// Heatmap over the image, image-sized RGBA.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Average precision of the heatmap against the object's mask.
    pub fn ap(&self) -> f64 {
        self.ap
    }

    /// IoU of the min-max scaled heatmap thresholded at 0.5.
    pub fn iou(&self) -> f64 {
        self.iou
    }

    /// Feature frames the audio side was averaged over.
    pub fn frames(&self) -> String {
        self.frames.clone()
    }
}

#[wasm_bindgen]
impl Demo {
    /// Default generator with an untrained model until a checkpoint is loaded.
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        let params = ModelParams::init(&ModelConfig::default(), 0).expect("default model is valid");
        Demo {
            generator: GeneratorConfig::default(),
            params,
            source: "untrained (seed 0)".into(),
            sample: None,
        }
    }

    /// Where the current weights came from.
    pub fn model_source(&self) -> String {
        self.source.clone()
    }

    pub fn image_size(&self) -> usize {
        self.generator.image_size
    }

    pub fn clip_length(&self) -> usize {
        self.generator.clip_length
    }

    pub fn audio_channels(&self) -> usize {
        self.generator.audio_channels
    }

    pub fn heads(&self) -> usize {
        self.params.config.heads
    }

    /// Replaces the weights with those of a `.dgck` file.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<String, String> {
        let ck = Checkpoint::read(&mut &bytes[..]).map_err(|e| e.to_string())?;
        let m = &ck.params.config;
        let g = &self.generator;
        if m.image_channels != g.image_channels
            || (m.image_height, m.image_width) != (g.image_size, g.image_size)
            || m.audio_channels != g.audio_channels
            || m.audio_length != g.clip_length
        {
            return Err("checkpoint model does not match the default generator".into());
        }
        self.source = format!("checkpoint {} at step {}", ck.checksum(), ck.step);
        self.params = ck.params;
        Ok(self.source.clone())
    }

    /// Draws a new pair; `language` picks the regime. Returns one line per
    /// object: class and event window in samples.
    pub fn generate(&mut self, language: bool, seed: u64) -> Result<Vec<String>, String> {
        let regime = if language { Regime::Language } else { Regime::Sound };
        let mut r = rng::stream(seed, "demo", 0);
        let s = generate_sample(&self.generator, regime, &mut r).map_err(|e| e.to_string())?;
        let lines = s
            .objects
            .iter()
            .map(|o| format!("class {} event {}..{}", o.class_id, o.event.0, o.event.1))
            .collect();
        self.sample = Some(s);
        Ok(lines)
    }

    /// The image, contrast-stretched per channel.
    pub fn image_rgba(&self) -> Result<Vec<u8>, String> {
        let s = self.current()?;
        let (c, hw) = (s.image.shape()[0], s.image.shape()[1] * s.image.shape()[2]);
        let d = s.image.data();
        let channels: Vec<Vec<f64>> = (0..c.min(3)).map(|ci| minmax_scale(&d[ci * hw..(ci + 1) * hw])).collect();
        Ok((0..hw)
            .flat_map(|i| {
                let px = |ci: usize| channels.get(ci).map_or(0, |ch| to_byte(ch[i]));
                [px(0), px(1), px(2), 255]
            })
            .collect())
    }

    /// The clip as a `channels x length` magnitude strip, low channels at
    /// the bottom. The splice mask tints padding and spliced audio red.
    pub fn clip_rgba(&self) -> Result<Vec<u8>, String> {
        let s = self.current()?;
        let (c, t) = (s.clip.shape()[0], s.clip.shape()[1]);
        let mag: Vec<f64> = s.clip.data().iter().map(|v| v.abs()).collect();
        let scaled = minmax_scale(&mag);
        let mut out = Vec::with_capacity(c * t * 4);
        for row in 0..c {
            let ch = c - 1 - row;
            for x in 0..t {
                let v = to_byte(scaled[ch * t + x]);
                let tint = if s.splice_mask[x] > 0.0 { 60 } else { 0 };
                out.extend_from_slice(&[v.saturating_add(tint), v, v, 255]);
            }
        }
        Ok(out)
    }

    /// Ground-truth mask of object `index`, as an overlay.
    pub fn mask_rgba(&self, index: usize) -> Result<Vec<u8>, String> {
        let o = self.current()?.objects.get(index).ok_or("no such object")?;
        Ok(o.mask.iter().flat_map(|&m| if m { [255, 255, 255, 110] } else { [0, 0, 0, 0] }).collect())
    }

    /// Heatmap for object `index`. A language object is queried with its own
    /// event window of the paired clip, a sound object with a clean prompt of
    /// its class. `head` selects one head; a negative value pools over all.
    pub fn localize(&self, index: usize, head: i32) -> Result<Localization, String> {
        let s = self.current()?;
        let o = s.objects.get(index).ok_or("no such object")?;
        let cfg = &self.params.config;
        let err = |e: &dyn std::fmt::Display| e.to_string();
        let visual = self.params.visual_features(&s.image).map_err(|e| err(&e))?;
        let (audio, window) = match s.regime {
            Regime::Language => (
                self.params.audio_features(&s.clip, s.valid_len).map_err(|e| err(&e))?,
                event_frames(o.event, cfg.audio_stride(), cfg.frames),
            ),
            Regime::Sound => {
                let (clip, _) = render_prompt(&self.generator, Regime::Sound, o.class_id);
                let len = clip.shape()[1];
                (self.params.audio_features(&clip, len).map_err(|e| err(&e))?, 0..cfg.frames)
            }
        };
        let mut vol = similarity_volume(&audio, &visual).map_err(|e| err(&e))?;
        if head >= 0 {
            vol = single_head(&vol, head as usize)?;
        }
        let frames = format!("{}..{}", window.start, window.end);
        let heat = prompt_heatmap(&vol, Some(window)).map_err(|e| err(&e))?;
        let n = self.generator.image_size;
        let heat = upsample_bilinear(&heat, n, n);
        let scaled = minmax_scale(heat.data());
        let ap = average_precision(heat.data(), &o.mask).map_err(|e| err(&e))?;
        let pred: Vec<bool> = scaled.iter().map(|&v| v >= 0.5).collect();
        let iou = iou(&pred, &o.mask).map_err(|e| err(&e))?;
        Ok(Localization {
            rgba: scaled.iter().flat_map(|&v| colormap(v)).collect(),
            ap,
            iou,
            frames,
        })
    }
}

impl Default for Demo {
    fn default() -> Self {
        Self::new()
    }
}

impl Demo {
    fn current(&self) -> Result<&SamplePair, String> {
        self.sample.as_ref().ok_or_else(|| "generate a sample first".to_string())
    }
}

fn single_head(vol: &SimilarityVolume, head: usize) -> Result<SimilarityVolume, String> {
    let s = vol.tensor().shape();
    if head >= s[0] {
        return Err(format!("head {head} out of range, model has {}", s[0]));
    }
    let inner: usize = s[1..].iter().product();
    let data = vol.tensor().data()[head * inner..(head + 1) * inner].to_vec();
    let mut shape = s.to_vec();
    shape[0] = 1;
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    SimilarityVolume::new(t).map_err(|e| e.to_string())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Black through red to yellow.
fn colormap(v: f64) -> [u8; 4] {
    let v = v.clamp(0.0, 1.0);
    [to_byte(2.0 * v), to_byte(2.0 * v - 1.0), 0, 255]
}
