//! Synthetic toy task, feature files and manifests.
//!
//! Feature file layout, little-endian: `u32 T`, `u32 d`, then `T·d` `f32`
//! values row-major (frame by frame). A manifest has one
//! `id<TAB>feature-file<TAB>transcript` line per utterance; relative paths are
//! resolved against the manifest's directory and the transcript is
//! space-separated unit names.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LabelSequence;
use crate::nn::{FeatureSequence, Tensor2D};

/// Seconds per raw feature frame.
pub const FRAME_PERIOD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive range of labels per utterance.
    pub min_labels: usize,
    pub max_labels: usize,
    /// Inclusive range of frames each label lasts.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Inclusive range of silence frames around and between labels.
    pub min_gap: usize,
    pub max_gap: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            vocab_size: 8,
            feature_dim: 16,
            min_labels: 1,
            max_labels: 6,
            min_frames: 3,
            max_frames: 6,
            min_gap: 1,
            max_gap: 2,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.vocab_size == 0 || self.feature_dim == 0 {
            return bad("toy vocabulary and feature width must be positive");
        }
        if self.min_labels > self.max_labels || self.min_frames > self.max_frames || self.min_gap > self.max_gap {
            return bad("toy ranges must satisfy min <= max");
        }
        if self.min_frames == 0 {
            return bad("labels must last at least one frame");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative value");
        }
        Ok(())
    }
}

/// Unit names used by toy models: `a`, `b`, ... then `u26`, `u27`, ...
pub fn toy_vocabulary(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| if i < 26 { char::from(b'a' + i as u8).to_string() } else { format!("u{i}") })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

/// A toy task instance: fixed per-label embeddings drawn from the seed.
#[derive(Clone, Debug)]
pub struct ToyTask {
    spec: ToyTaskSpec,
    embeddings: Vec<Vec<f32>>,
}

impl ToyTask {
    pub fn new(spec: ToyTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let embeddings = (0..spec.vocab_size)
            .map(|_| (0..spec.feature_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
            .collect();
        Ok(ToyTask { spec, embeddings })
    }

    pub fn spec(&self) -> &ToyTaskSpec {
        &self.spec
    }

    pub fn vocabulary(&self) -> Vec<String> {
        toy_vocabulary(self.spec.vocab_size)
    }

    /// Embedding of label `id` (1-based).
    pub fn embedding(&self, id: u32) -> &[f32] {
        &self.embeddings[id as usize - 1]
    }

    /// Independent random stream `stream` derived from the task seed.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream + 1);
        rng
    }

    pub fn sample_labels(&self, rng: &mut impl Rng) -> Vec<u32> {
        let n = rng.random_range(self.spec.min_labels..=self.spec.max_labels);
        (0..n).map(|_| rng.random_range(1..=self.spec.vocab_size as u32)).collect()
    }

    /// Features for `labels`; `noise[i]` is the noise level of label `i`
    /// (silence always uses the task level).
    pub fn render_with_noise(&self, labels: &[u32], noise: &[f64], rng: &mut impl Rng) -> Result<FeatureSequence> {
        if noise.len() != labels.len() {
            return Err(Error::config("one noise level per label required"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > self.spec.vocab_size) {
            return Err(Error::config(format!("toy label {bad} out of range")));
        }
        let s = &self.spec;
        let d = s.feature_dim;
        let mut data: Vec<f32> = Vec::new();
        fn push(data: &mut Vec<f32>, rng: &mut impl Rng, base: Option<&[f32]>, sigma: f64, frames: usize, d: usize) {
            for _ in 0..frames {
                for k in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    data.push((base.map_or(0.0, |b| b[k] as f64) + sigma * e) as f32);
                }
            }
        }
        let g = rng.random_range(s.min_gap..=s.max_gap);
        push(&mut data, rng, None, s.noise, g, d);
        for (&l, &sigma) in labels.iter().zip(noise) {
            let frames = rng.random_range(s.min_frames..=s.max_frames);
            push(&mut data, rng, Some(self.embedding(l)), sigma, frames, d);
            let g = rng.random_range(s.min_gap..=s.max_gap);
            push(&mut data, rng, None, s.noise, g, d);
        }
        if data.is_empty() {
            push(&mut data, rng, None, s.noise, 1, d);
        }
        let t = data.len() / d;
        Ok(FeatureSequence::new(Tensor2D::from_vec(t, d, data)?, FRAME_PERIOD))
    }

    pub fn render(&self, labels: &[u32], rng: &mut impl Rng) -> Result<FeatureSequence> {
        self.render_with_noise(labels, &vec![self.spec.noise; labels.len()], rng)
    }

    /// `count` utterances from random stream `stream`, IDs `{prefix}{index}`.
    pub fn generate(&self, count: usize, stream: u64, prefix: &str) -> Result<Vec<Utterance>> {
        let mut rng = self.rng(stream);
        (0..count)
            .map(|i| {
                let labels = self.sample_labels(&mut rng);
                let features = self.render(&labels, &mut rng)?;
                Ok(Utterance { id: format!("{prefix}{i:05}"), features, labels: LabelSequence::new(labels)? })
            })
            .collect()
    }
}

/// `count` utterances of the task defined by `spec` (stream 0).
pub fn gen_toy_data(spec: &ToyTaskSpec, count: usize) -> Result<Vec<Utterance>> {
    if count == 0 {
        return Err(Error::config("count must be at least 1"));
    }
    ToyTask::new(spec.clone())?.generate(count, 0, "utt")
}

pub fn features_to_bytes(f: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * f.frames.data().len());
    out.extend_from_slice(&(f.len() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for v in f.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 8 {
        return Err(Error::Format("feature file shorter than its 8-byte header".into()));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if t.checked_mul(d).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(Error::Format(format!("feature file header {t}x{d} does not match {} payload bytes", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor2D::from_vec(t, d, data)
        .map(|m| FeatureSequence::new(m, FRAME_PERIOD))
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_features(path: &Path, f: &FeatureSequence) -> Result<()> {
    Ok(fs::write(path, features_to_bytes(f))?)
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    features_from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub transcript: String,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(file)) = (parts.next(), parts.next()) else {
            return Err(Error::Format(format!("manifest line {}: expected id<TAB>file<TAB>transcript", n + 1)));
        };
        let transcript = parts.next().unwrap_or("").trim().to_string();
        let path = Path::new(file);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        out.push(ManifestEntry { id: id.to_string(), path, transcript });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Labels of a transcript given the unit vocabulary (unit `i` has ID `i+1`).
pub fn transcript_labels(transcript: &str, vocabulary: &[String]) -> Result<LabelSequence> {
    transcript
        .split_whitespace()
        .map(|u| {
            vocabulary
                .iter()
                .position(|v| v == u)
                .map(|i| i as u32 + 1)
                .ok_or_else(|| Error::Format(format!("unknown unit `{u}` in transcript")))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(LabelSequence::new)
}

pub fn labels_transcript(labels: &[u32], vocabulary: &[String]) -> String {
    labels
        .iter()
        .map(|&l| vocabulary.get(l as usize - 1).map_or("<unk>", String::as_str))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes `{dir}/{name}.tsv` and one feature file per utterance under
/// `{dir}/{name}/`; returns the manifest path.
pub fn write_dataset(dir: &Path, name: &str, utts: &[Utterance], vocabulary: &[String]) -> Result<PathBuf> {
    let feat_dir = dir.join(name);
    fs::create_dir_all(&feat_dir)?;
    let mut manifest = String::new();
    for u in utts {
        let rel = format!("{name}/{}.f32", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", u.id, rel, labels_transcript(u.labels.as_slice(), vocabulary)));
    }
    let path = dir.join(format!("{name}.tsv"));
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Loads every utterance of a manifest.
pub fn read_dataset(manifest: &Path, vocabulary: &[String]) -> Result<Vec<Utterance>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                features: read_features(&e.path)?,
                labels: transcript_labels(&e.transcript, vocabulary)?,
                id: e.id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = ToyTaskSpec::default();
        let a = gen_toy_data(&spec, 20).unwrap();
        let b = gen_toy_data(&spec, 20).unwrap();
        assert_eq!(a, b);
        let c = gen_toy_data(&ToyTaskSpec { seed: 1, ..spec }, 20).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_unit_duration_is_the_embedding() {
        let spec =
            ToyTaskSpec { noise: 0.0, min_frames: 1, max_frames: 1, min_gap: 0, max_gap: 0, ..Default::default() };
        let task = ToyTask::new(spec.clone()).unwrap();
        for u in task.generate(10, 0, "x").unwrap() {
            assert_eq!(u.features.len(), u.labels.len());
            for (t, &l) in u.labels.as_slice().iter().enumerate() {
                assert_eq!(u.features.frame(t), task.embedding(l));
            }
        }
    }

    #[test]
    fn label_lengths_are_uniform() {
        let task = ToyTask::new(ToyTaskSpec::default()).unwrap();
        let mut rng = task.rng(9);
        let mut counts = [0usize; 6];
        let n = 10_000;
        for _ in 0..n {
            counts[task.sample_labels(&mut rng).len() - 1] += 1;
        }
        let expected = n as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 5 degrees of freedom
        assert!(chi2 < 15.086, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn feature_file_layout() {
        let f = FeatureSequence::new(Tensor2D::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.25, -1.0]).unwrap(), 0.01);
        let b = features_to_bytes(&f);
        assert_eq!(&b[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[8..12], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 8 + 24);
        assert_eq!(features_from_bytes(&b).unwrap(), f);
        assert!(features_from_bytes(&b[..b.len() - 1]).is_err());
        assert!(features_from_bytes(&b[..4]).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("u1\tf/u1.f32\ta b\n\nu2\t/abs/u2.f32\t\n", Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].path, PathBuf::from("/data/f/u1.f32"));
        assert_eq!(m[0].transcript, "a b");
        assert_eq!(m[1].path, PathBuf::from("/abs/u2.f32"));
        assert_eq!(m[1].transcript, "");
        assert!(parse_manifest("just-an-id\n", Path::new(".")).is_err());
        let vocab = toy_vocabulary(3);
        assert_eq!(transcript_labels("a c", &vocab).unwrap().as_slice(), &[1, 3]);
        assert!(transcript_labels("a z", &vocab).is_err());
        assert_eq!(labels_transcript(&[3, 1], &vocab), "c a");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = std::env::temp_dir().join(format!("rnnt-data-{}", std::process::id()));
        let spec = ToyTaskSpec::default();
        let utts = gen_toy_data(&spec, 5).unwrap();
        let vocab = toy_vocabulary(spec.vocab_size);
        let manifest = write_dataset(&dir, "train", &utts, &vocab).unwrap();
        let back = read_dataset(&manifest, &vocab).unwrap();
        assert_eq!(back, utts);
        fs::remove_dir_all(&dir).unwrap();
    }
}
