//! Sample files (`DGSP`) and the corpus manifest.
//!
//! Sample layout: magic `DGSP`, `u32` version, `u32` header length, the
//! canonical JSON header, then DGT1 tensors in this order: image
//! `[C, H, W]` (f32), clip `[C, T]` (f32), object masks `[N, H, W]` (f32,
//! 0/1), splice mask `[T]` (f64).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, DataError, GeneratorConfig, ObjectAnnotation, Regime, Result, SamplePair, Split};
use crate::json::{to_canonical, to_canonical_pretty};
use crate::tensor::serialize::{read_tensor, read_u32, write_tensor, Dtype};
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: &[u8; 4] = b"DGSP";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectHeader {
    class_id: usize,
    event: (usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleHeader {
    regime: Regime,
    objects: Vec<ObjectHeader>,
    valid_len: usize,
    image_shape: Vec<usize>,
    clip_shape: Vec<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::CorruptFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn masks_tensor(sample: &SamplePair) -> Tensor {
    let s = sample.image.shape();
    let (h, w) = (s[1], s[2]);
    let data = sample
        .objects
        .iter()
        .flat_map(|o| o.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new([sample.objects.len(), h, w], data).expect("mask sizes validated")
}

pub fn write_sample<W: Write>(w: &mut W, sample: &SamplePair) -> std::io::Result<()> {
    let header = SampleHeader {
        regime: sample.regime,
        objects: sample
            .objects
            .iter()
            .map(|o| ObjectHeader {
                class_id: o.class_id,
                event: o.event,
            })
            .collect(),
        valid_len: sample.valid_len,
        image_shape: sample.image.shape().to_vec(),
        clip_shape: sample.clip.shape().to_vec(),
    };
    let json = to_canonical(&header).map_err(std::io::Error::other)?;
    w.write_all(SAMPLE_MAGIC)?;
    w.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    write_tensor(w, &sample.image, Dtype::F32)?;
    write_tensor(w, &sample.clip, Dtype::F32)?;
    write_tensor(w, &masks_tensor(sample), Dtype::F32)?;
    let t = sample.splice_mask.len();
    write_tensor(w, &Tensor::new([t], sample.splice_mask.clone()).expect("1-d"), Dtype::F64)
}

/// Parses one sample; `path` only labels errors.
pub fn read_sample<R: Read>(r: &mut R, path: &Path) -> Result<SamplePair> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt(path, "truncated magic"))?;
    if &magic != SAMPLE_MAGIC {
        return Err(corrupt(path, format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(|_| corrupt(path, "truncated version"))?;
    if version != SAMPLE_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let len = read_u32(r).map_err(|_| corrupt(path, "truncated header length"))?;
    if len > MAX_HEADER {
        return Err(corrupt(path, format!("header length {len} too large")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| corrupt(path, "truncated header"))?;
    let header: SampleHeader =
        serde_json::from_slice(&json).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let mut tensor = |what: &str| read_tensor(r).map_err(|e| corrupt(path, format!("{what}: {e}")));
    let image = tensor("image")?;
    let clip = tensor("clip")?;
    let masks = tensor("masks")?;
    let splice = tensor("splice mask")?;
    if image.shape() != header.image_shape || clip.shape() != header.clip_shape {
        return Err(corrupt(path, "tensor shapes disagree with header"));
    }
    let (h, w) = match image.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(corrupt(path, format!("image shape {s:?}"))),
    };
    let n = header.objects.len();
    if masks.shape() != [n, h, w] {
        return Err(corrupt(path, format!("mask shape {:?}", masks.shape())));
    }
    let objects = header
        .objects
        .into_iter()
        .enumerate()
        .map(|(i, o)| ObjectAnnotation {
            class_id: o.class_id,
            mask: masks.data()[i * h * w..(i + 1) * h * w].iter().map(|&m| m != 0.0).collect(),
            event: o.event,
        })
        .collect();
    let sample = SamplePair {
        image,
        clip,
        regime: header.regime,
        objects,
        splice_mask: splice.into_data(),
        valid_len: header.valid_len,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn load_sample(path: &Path) -> Result<SamplePair> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_sample(&mut BufReader::new(f), path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// Relative to the corpus directory.
    pub path: String,
    pub split: Split,
    pub regime: Regime,
    pub class_ids: Vec<usize>,
    pub events: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub language: Vec<String>,
    pub sound: Vec<String>,
    pub visual: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub samples: Vec<SampleRecord>,
    pub vocabulary: Vocabulary,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i:02}")).collect()
}

fn record(path: String, split: Split, s: &SamplePair) -> SampleRecord {
    SampleRecord {
        path,
        split,
        regime: s.regime,
        class_ids: s.class_ids(),
        events: s.objects.iter().map(|o| o.event).collect(),
    }
}

/// Writes every sample plus `manifest.json` under `dir` (created if
/// missing, but its parent must exist).
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    if !dir.exists() {
        fs::create_dir(dir).map_err(io_err(dir))?;
    }
    let mut samples = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Eval, "eval")] {
        let list = corpus.split(split);
        if list.is_empty() {
            continue;
        }
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for (i, s) in list.iter().enumerate() {
            let rel = format!("{name}/{i:06}.dgsp");
            let path = dir.join(&rel);
            let f = fs::File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(f);
            write_sample(&mut w, s).and_then(|_| w.flush()).map_err(io_err(&path))?;
            samples.push(record(rel, split, s));
        }
    }
    let cfg = &corpus.config;
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed: corpus.seed,
        generator: cfg.clone(),
        samples,
        vocabulary: Vocabulary {
            language: names("word", cfg.language_classes),
            sound: names("sound", cfg.sound_classes),
            visual: names("object", cfg.visual_classes()),
        },
    };
    let path = dir.join("manifest.json");
    let json = to_canonical_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads `manifest.json` and every sample it references, checking each
/// against its record.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(&path, format!("bad manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(corrupt(&path, format!("unsupported manifest version {}", manifest.version)));
    }
    manifest.generator.validate()?;
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for rec in &manifest.samples {
        let p = dir.join(&rec.path);
        let s = load_sample(&p)?;
        if record(rec.path.clone(), rec.split, &s) != *rec {
            return Err(DataError::InvariantViolation(format!("{} disagrees with its manifest record", rec.path)));
        }
        if s.class_ids().iter().any(|&c| c >= manifest.generator.classes(s.regime)) {
            return Err(DataError::InvariantViolation(format!("{}: class id out of range", rec.path)));
        }
        match rec.split {
            Split::Train => train.push(s),
            Split::Eval => eval.push(s),
        }
    }
    Ok(Corpus {
        config: manifest.generator,
        seed: manifest.seed,
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    fn tiny() -> Corpus {
        let cfg = GeneratorConfig {
            train_samples: 6,
            eval_samples: 3,
            ..Default::default()
        };
        generate_corpus(&cfg, 9, 1).unwrap()
    }

    #[test]
    fn sample_round_trip() {
        let c = tiny();
        for s in &c.train {
            let mut buf = Vec::new();
            write_sample(&mut buf, s).unwrap();
            assert_eq!(&read_sample(&mut &buf[..], Path::new("mem")).unwrap(), s);
        }
    }

    #[test]
    fn truncated_sample_is_corrupt() {
        let c = tiny();
        let mut buf = Vec::new();
        write_sample(&mut buf, &c.train[0]).unwrap();
        for cut in [2, 10, buf.len() / 2, buf.len() - 1] {
            let r = read_sample(&mut &buf[..cut], Path::new("mem"));
            assert!(matches!(r, Err(DataError::CorruptFile { .. })), "cut {cut}");
        }
        buf[0] = b'X';
        assert!(matches!(read_sample(&mut &buf[..], Path::new("mem")), Err(DataError::CorruptFile { .. })));
    }

    #[test]
    fn event_outside_valid_len_is_rejected() {
        let mut s = tiny().train[0].clone();
        s.objects[0].event = (s.valid_len - 2, s.valid_len + 3);
        let mut buf = Vec::new();
        write_sample(&mut buf, &s).unwrap();
        assert!(matches!(
            read_sample(&mut &buf[..], Path::new("mem")),
            Err(DataError::InvariantViolation(_))
        ));
    }

    #[test]
    fn corpus_round_trip() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(&c, &dir.path().join("corpus")).unwrap();
        assert_eq!(m.samples.len(), 9);
        assert_eq!(m.vocabulary.visual.len(), 12);
        assert_eq!(load_corpus(&dir.path().join("corpus")).unwrap(), c);
    }

    #[test]
    fn missing_parent_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_corpus(&tiny(), &dir.path().join("no/such/dir"));
        assert!(matches!(r, Err(DataError::Io { .. })));
    }
}
