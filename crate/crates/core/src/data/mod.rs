//! Synthetic paired image/audio corpus with planted couplings.
//!
//! Every image is a grid of cells; some cells hold an object whose texture
//! identifies its class. The paired clip contains one audio event per
//! object. In the language regime the event is the class's "word" (short,
//! bell-shaped, low half of the bands); in the sound regime it is the
//! class's "sound" (longer, flat-topped, high half of the bands). The visual
//! vocabulary is shared between regimes, the audio vocabularies are not.

mod augment;
mod io;

use std::ops::Range;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub use augment::{flip_horizontal, frame_mask, pad_or_trim, splice_negative};
pub use io::{load_corpus, load_sample, read_sample, write_corpus, write_sample, CorpusManifest, SampleRecord};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("could not place {objects} objects without overlap after {retries} retries")]
    PlacementFailure { objects: usize, retries: usize },
    #[error("splice [{position}, {end}) does not fit a clip of {len} samples with ramps of {ramp_len}")]
    OutOfBounds {
        position: usize,
        end: usize,
        len: usize,
        ramp_len: usize,
    },
    #[error("corrupt sample file {path}: {reason}")]
    CorruptFile { path: String, reason: String },
    #[error("sample invariant violated: {0}")]
    InvariantViolation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Language,
    Sound,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::Language, Regime::Sound];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Cells per side; objects occupy whole cells.
    pub grid: usize,
    pub audio_channels: usize,
    pub clip_length: usize,
    pub language_classes: usize,
    pub sound_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Fraction of samples in the language regime.
    pub language_fraction: f64,
    pub min_valid_len: usize,
    /// Inclusive event length range in samples.
    pub language_event_len: [usize; 2],
    pub sound_event_len: [usize; 2],
    pub image_noise: f64,
    pub audio_noise: f64,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 64,
            grid: 4,
            audio_channels: 16,
            clip_length: 256,
            language_classes: 12,
            sound_classes: 12,
            min_objects: 1,
            max_objects: 3,
            train_samples: 2000,
            eval_samples: 400,
            language_fraction: 0.5,
            min_valid_len: 192,
            language_event_len: [20, 36],
            sound_event_len: [40, 60],
            image_noise: 0.05,
            audio_noise: 0.05,
            max_retries: 100,
        }
    }
}

/// Side of the repeating texture tile of an object.
const TILE: usize = 4;
const TEXTURE_AMPLITUDE: f64 = 0.8;
const CARRIER_AMPLITUDE: f64 = 1.0;
const CLASS_BAND_AMPLITUDE: f64 = 0.8;
/// Ramp length of the flat-topped sound envelope.
const SOUND_RAMP: usize = 4;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.image_channels == 0 || self.image_size == 0 || self.grid == 0 || self.clip_length == 0 {
            return bad("image and clip dimensions must be positive".into());
        }
        if self.image_size % self.grid != 0 || (self.image_size / self.grid) % TILE != 0 {
            return bad(format!(
                "image_size {} must split into {} cells that are multiples of {TILE} pixels",
                self.image_size, self.grid
            ));
        }
        if self.audio_channels < 6 || self.audio_channels % 2 != 0 {
            return bad(format!("audio_channels must be even and at least 6, got {}", self.audio_channels));
        }
        let pairs = band_pairs(self.audio_channels / 2 - 1).len();
        for (name, v) in [("language_classes", self.language_classes), ("sound_classes", self.sound_classes)] {
            if v < self.max_objects || v > pairs {
                return bad(format!("{name} = {v} must lie in [{}, {pairs}]", self.max_objects));
            }
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("objects range [{}, {}] is empty", self.min_objects, self.max_objects));
        }
        if !(0.0..=1.0).contains(&self.language_fraction) {
            return bad(format!("language_fraction {} outside [0, 1]", self.language_fraction));
        }
        if self.min_valid_len == 0 || self.min_valid_len > self.clip_length {
            return bad(format!("min_valid_len {} outside [1, {}]", self.min_valid_len, self.clip_length));
        }
        for (name, [lo, hi]) in [
            ("language_event_len", self.language_event_len),
            ("sound_event_len", self.sound_event_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} [{lo}, {hi}] is empty"));
            }
            if hi * self.max_objects > self.min_valid_len {
                return bad(format!(
                    "{} events of up to {hi} samples do not fit min_valid_len {}",
                    self.max_objects, self.min_valid_len
                ));
            }
        }
        if self.image_noise < 0.0 || self.audio_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    pub fn visual_classes(&self) -> usize {
        self.language_classes.max(self.sound_classes)
    }

    pub fn classes(&self, regime: Regime) -> usize {
        match regime {
            Regime::Language => self.language_classes,
            Regime::Sound => self.sound_classes,
        }
    }

    pub fn cell_size(&self) -> usize {
        self.image_size / self.grid
    }

    fn event_len(&self, regime: Regime) -> [usize; 2] {
        match regime {
            Regime::Language => self.language_event_len,
            Regime::Sound => self.sound_event_len,
        }
    }

    /// Regime of sample `i` in a split: the first `floor(n * f)` positions
    /// of every prefix are language, spread evenly.
    pub fn regime_of(&self, i: usize) -> Regime {
        let f = self.language_fraction;
        if ((i + 1) as f64 * f).floor() > (i as f64 * f).floor() {
            Regime::Language
        } else {
            Regime::Sound
        }
    }
}

/// One object in a sample: its class, pixel mask and audio event.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub class_id: usize,
    /// Row-major `H_in * W_in` mask.
    pub mask: Vec<bool>,
    /// Event window `[start, end)` in raw audio samples.
    pub event: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[C_in, H_in, W_in]`.
    pub image: Tensor,
    /// `[C_audio, T_in]`.
    pub clip: Tensor,
    pub regime: Regime,
    pub objects: Vec<ObjectAnnotation>,
    /// Per raw sample; 1 on padding silence and spliced-in audio.
    pub splice_mask: Vec<f64>,
    pub valid_len: usize,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::InvariantViolation(msg));
        let (is, cs) = (self.image.shape(), self.clip.shape());
        if is.len() != 3 || cs.len() != 2 {
            return bad(format!("image shape {is:?} / clip shape {cs:?}"));
        }
        let (h, w, t) = (is[1], is[2], cs[1]);
        if self.splice_mask.len() != t {
            return bad(format!("splice mask has {} entries for {t} samples", self.splice_mask.len()));
        }
        if self.splice_mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("splice mask outside [0, 1]".into());
        }
        if self.valid_len > t {
            return bad(format!("valid_len {} exceeds clip length {t}", self.valid_len));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.mask.len() != h * w || !o.mask.iter().any(|&m| m) {
                return bad(format!("object {i} mask is empty or has the wrong size"));
            }
            let (s, e) = o.event;
            if s >= e || e > self.valid_len {
                return bad(format!("object {i} event [{s}, {e}) outside [0, {})", self.valid_len));
            }
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub train: Vec<SamplePair>,
    pub eval: Vec<SamplePair>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// All unordered pairs of `n` items in lexicographic order.
fn band_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

/// Rounds to the nearest f32 so that f32 storage is lossless.
fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// The `3 x TILE x TILE` texture tile of visual class `class`, fixed
/// independently of any run seed.
pub fn class_texture(channels: usize, class: usize) -> Tensor {
    let mut r = rng::stream(0, "texture", class as u64);
    Tensor::from_fn([channels, TILE, TILE], |_| {
        if r.random::<bool>() {
            TEXTURE_AMPLITUDE
        } else {
            -TEXTURE_AMPLITUDE
        }
    })
}

/// Spectral signature of one audio class: carrier band plus two class
/// bands within the regime's half of the channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AudioSignature {
    pub carrier: usize,
    pub bands: (usize, usize),
}

pub fn audio_signature(audio_channels: usize, regime: Regime, class: usize) -> AudioSignature {
    let half = audio_channels / 2;
    let base = regime.index() * half;
    let (a, b) = band_pairs(half - 1)[class];
    AudioSignature {
        carrier: base,
        bands: (base + 1 + a, base + 1 + b),
    }
}

fn envelope(regime: Regime, tau: usize, len: usize) -> f64 {
    match regime {
        Regime::Language => {
            let x = std::f64::consts::PI * (tau as f64 + 0.5) / len as f64;
            x.sin().powi(2)
        }
        Regime::Sound => {
            let edge = tau.min(len - 1 - tau);
            ((edge + 1) as f64 / (SOUND_RAMP + 1) as f64).min(1.0)
        }
    }
}

/// Adds the event of `(regime, class)` over `[start, start + len)`. The
/// first class band dominates the first half of the event and the second
/// band the second half.
pub fn render_event(clip: &mut Tensor, regime: Regime, class: usize, start: usize, len: usize) {
    let (c, t) = (clip.shape()[0], clip.shape()[1]);
    let sig = audio_signature(c, regime, class);
    let data = clip.data_mut();
    for tau in 0..len.min(t.saturating_sub(start)) {
        let env = envelope(regime, tau, len);
        let first_half = 2 * tau < len;
        let (w1, w2) = if first_half { (1.0, 0.4) } else { (0.4, 1.0) };
        let at = start + tau;
        data[sig.carrier * t + at] += CARRIER_AMPLITUDE * env;
        data[sig.bands.0 * t + at] += CLASS_BAND_AMPLITUDE * w1 * env;
        data[sig.bands.1 * t + at] += CLASS_BAND_AMPLITUDE * w2 * env;
    }
}

/// A clean single-class prompt clip of full length. Language prompts hold
/// one word of the middle event length centered in the clip; sound
/// prompts sustain the sound over the whole clip. Returns the clip and the
/// event window in raw samples.
pub fn render_prompt(cfg: &GeneratorConfig, regime: Regime, class: usize) -> (Tensor, Range<usize>) {
    let mut clip = Tensor::zeros([cfg.audio_channels, cfg.clip_length]);
    let window = match regime {
        Regime::Language => {
            let [lo, hi] = cfg.language_event_len;
            let len = (lo + hi) / 2;
            let start = (cfg.clip_length - len) / 2;
            start..start + len
        }
        Regime::Sound => 0..cfg.clip_length,
    };
    render_event(&mut clip, regime, class, window.start, window.len());
    clip.data_mut().iter_mut().for_each(|x| *x = quantize(*x));
    (clip, window)
}

fn place_cells(cfg: &GeneratorConfig, r: &mut Rng, n: usize) -> Result<Vec<usize>> {
    let cells = cfg.grid * cfg.grid;
    let mut taken = Vec::with_capacity(n);
    let mut tries = 0;
    while taken.len() < n {
        if tries >= cfg.max_retries.max(1) * n {
            return Err(DataError::PlacementFailure {
                objects: n,
                retries: tries,
            });
        }
        tries += 1;
        let c = r.random_range(0..cells);
        if !taken.contains(&c) {
            taken.push(c);
        }
    }
    Ok(taken)
}

/// Renders one sample from its own random stream.
pub fn generate_sample(cfg: &GeneratorConfig, regime: Regime, r: &mut Rng) -> Result<SamplePair> {
    let (s, cell, ch) = (cfg.image_size, cfg.cell_size(), cfg.image_channels);
    let n = r.random_range(cfg.min_objects..=cfg.max_objects);
    let classes: Vec<usize> = index::sample(r, cfg.classes(regime), n).into_vec();
    let cells = place_cells(cfg, r, n)?;

    let image_noise = Normal::new(0.0, cfg.image_noise).expect("finite std");
    let mut image = Tensor::from_fn([ch, s, s], |_| image_noise.sample(r));
    let mut masks = Vec::with_capacity(n);
    for (&class, &c) in classes.iter().zip(&cells) {
        let tex = class_texture(ch, class);
        let (y0, x0) = ((c / cfg.grid) * cell, (c % cfg.grid) * cell);
        let mut mask = vec![false; s * s];
        let data = image.data_mut();
        for y in y0..y0 + cell {
            for x in x0..x0 + cell {
                mask[y * s + x] = true;
                for k in 0..ch {
                    data[(k * s + y) * s + x] = tex.data()[(k * TILE + y % TILE) * TILE + x % TILE];
                }
            }
        }
        masks.push(mask);
    }
    image.data_mut().iter_mut().for_each(|x| *x = quantize(*x));

    // Events in random order, separated by random gaps.
    let valid_len = r.random_range(cfg.min_valid_len..=cfg.clip_length);
    let [lo, hi] = cfg.event_len(regime);
    let lens: Vec<usize> = (0..n).map(|_| r.random_range(lo..=hi)).collect();
    let order: Vec<usize> = index::sample(r, n, n).into_vec();
    let free = valid_len - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..n).map(|_| r.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut events = vec![(0, 0); n];
    let (mut cursor, mut prev_cut) = (0, 0);
    for (&obj, &cut) in order.iter().zip(&cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        events[obj] = (cursor, cursor + lens[obj]);
        cursor += lens[obj];
    }

    let audio_noise = Normal::new(0.0, cfg.audio_noise).expect("finite std");
    let mut raw = Tensor::from_fn([cfg.audio_channels, valid_len], |_| audio_noise.sample(r));
    for (&class, &(start, end)) in classes.iter().zip(&events) {
        render_event(&mut raw, regime, class, start, end - start);
    }
    raw.data_mut().iter_mut().for_each(|x| *x = quantize(*x));
    let (clip, valid_len, silence) = pad_or_trim(&raw, cfg.clip_length);

    let objects = classes
        .into_iter()
        .zip(masks)
        .zip(events)
        .map(|((class_id, mask), event)| ObjectAnnotation { class_id, mask, event })
        .collect();
    let sample = SamplePair {
        image,
        clip,
        regime,
        objects,
        splice_mask: silence,
        valid_len,
    };
    debug_assert!(sample.validate().is_ok());
    Ok(sample)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

/// Generates one split; sample `i` draws from stream `(seed, split, i)` so
/// the output does not depend on `workers`.
pub fn generate_split(cfg: &GeneratorConfig, seed: u64, split: Split, workers: usize) -> Result<Vec<SamplePair>> {
    let n = match split {
        Split::Train => cfg.train_samples,
        Split::Eval => cfg.eval_samples,
    };
    crate::parallel::map_indexed(n, workers, |i| {
        let mut r = rng::stream(seed, split_name(split), i as u64);
        generate_sample(cfg, cfg.regime_of(i), &mut r)
    })
    .into_iter()
    .collect()
}

pub fn generate_corpus(cfg: &GeneratorConfig, seed: u64, workers: usize) -> Result<Corpus> {
    cfg.validate()?;
    Ok(Corpus {
        config: cfg.clone(),
        seed,
        train: generate_split(cfg, seed, Split::Train, workers)?,
        eval: generate_split(cfg, seed, Split::Eval, workers)?,
    })
}
