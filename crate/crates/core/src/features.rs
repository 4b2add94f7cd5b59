//! Frame-level speech encoder: one 512-d vector per 10 ms.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{save_audio, MelExtractor, SignalConfig, Waveform};

pub const FEATURE_DIM: usize = 512;
pub const FEATURE_HOP_S: f64 = 0.010;
pub const MIN_ENCODE_DURATION_S: f64 = 0.025;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub vectors: Array2<f32>,
    pub frame_hop_s: f64,
    pub source_utterance_id: String,
}

impl FeatureSequence {
    pub fn new(vectors: Array2<f32>, source_utterance_id: impl Into<String>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::validation("feature sequence needs at least one frame"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature sequence contains non-finite values"));
        }
        Ok(Self {
            vectors,
            frame_hop_s: FEATURE_HOP_S,
            source_utterance_id: source_utterance_id.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> FeatureSequence {
        FeatureSequence {
            vectors: self.vectors.slice(ndarray::s![start..end, ..]).to_owned(),
            frame_hop_s: self.frame_hop_s,
            source_utterance_id: self.source_utterance_id.clone(),
        }
    }

    pub fn with_vectors(&self, vectors: Array2<f32>) -> FeatureSequence {
        FeatureSequence {
            vectors,
            frame_hop_s: self.frame_hop_s,
            source_utterance_id: self.source_utterance_id.clone(),
        }
    }

    pub fn concat(parts: &[FeatureSequence]) -> Result<FeatureSequence> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("cannot concatenate zero feature sequences"))?;
        let views: Vec<_> = parts.iter().map(|p| p.vectors.view()).collect();
        let vectors = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::validation(format!("feature concat: {e}")))?;
        Ok(first.with_vectors(vectors))
    }
}

/// A frame-level speech encoder. Implementations must be read-only after
/// construction.
pub trait SpeechEncoderBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Same waveform in, same features out.
    fn deterministic(&self) -> bool;

    /// Raw `[T x 512]` features; shape checks happen in [`encode`].
    fn encode_frames(&self, w: &Waveform) -> Result<Array2<f32>>;
}

/// Run `backend` on `w` and check the frame-rate and width contract.
pub fn encode(
    w: &Waveform,
    backend: &dyn SpeechEncoderBackend,
    utterance_id: &str,
) -> Result<FeatureSequence> {
    if w.duration_s() < MIN_ENCODE_DURATION_S {
        return Err(Error::validation(format!(
            "utterance '{utterance_id}' is {:.1} ms long; the speech encoder needs at least {:.0} ms",
            w.duration_s() * 1e3,
            MIN_ENCODE_DURATION_S * 1e3
        )));
    }
    let vectors = backend.encode_frames(w).map_err(|e| match e {
        e @ Error::Backend { .. } => e,
        other => Error::backend(backend.name(), other.to_string()),
    })?;
    if vectors.ncols() != FEATURE_DIM {
        return Err(Error::backend(
            backend.name(),
            format!("produced {}-d features, expected {FEATURE_DIM}", vectors.ncols()),
        ));
    }
    let expected = (w.duration_s() / FEATURE_HOP_S).floor() as i64;
    if (vectors.nrows() as i64 - expected).abs() > 1 {
        return Err(Error::backend(
            backend.name(),
            format!("produced {} frames for {:.3} s, expected {expected} +/- 1", vectors.nrows(), w.duration_s()),
        ));
    }
    FeatureSequence::new(vectors, utterance_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureBackendKind {
    Standin,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    pub backend: FeatureBackendKind,
    /// Descriptor JSON for the external backend.
    pub checkpoint: Option<PathBuf>,
    /// Which internal layer an external model should expose. Passed through
    /// to the backend verbatim.
    pub layer: Option<usize>,
    /// Frames of context stacked on each side by the stand-in.
    pub standin_context: usize,
    pub standin_seed: u64,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            backend: FeatureBackendKind::Standin,
            checkpoint: None,
            layer: None,
            standin_context: 2,
            standin_seed: 0x00c0_ffee,
        }
    }
}

pub fn build_backend(cfg: &FeaturesConfig, signal: &SignalConfig) -> Result<Arc<dyn SpeechEncoderBackend>> {
    match cfg.backend {
        FeatureBackendKind::Standin => Ok(Arc::new(StandinEncoder::new(signal, cfg.standin_context, cfg.standin_seed)?)),
        FeatureBackendKind::External => {
            let path = cfg
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("features.backend = external requires features.checkpoint"))?;
            Ok(Arc::new(ExternalEncoder::load(path, cfg.layer)?))
        }
    }
}

/// Deterministic desk-scale substitute for a pretrained encoder: log-mel
/// frames with +/-`context` neighbours stacked, projected to 512-d by a
/// fixed Gaussian matrix.
#[derive(Debug, Clone)]
pub struct StandinEncoder {
    mel: MelExtractor,
    context: usize,
    /// `[(2*context+1)*n_mels x 512]`
    projection: Array2<f32>,
}

impl StandinEncoder {
    pub fn new(signal: &SignalConfig, context: usize, seed: u64) -> Result<Self> {
        let mel = MelExtractor::new(signal)?;
        let in_dim = (2 * context + 1) * signal.n_mels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f32).sqrt();
        let projection = Array2::from_shape_simple_fn((in_dim, FEATURE_DIM), || {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Ok(Self {
            mel,
            context,
            projection,
        })
    }

    pub fn projection(&self) -> &Array2<f32> {
        &self.projection
    }
}

impl SpeechEncoderBackend for StandinEncoder {
    fn name(&self) -> &str {
        "standin"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn encode_frames(&self, w: &Waveform) -> Result<Array2<f32>> {
        let mel = self.mel.melspec(w)?;
        let frames = &mel.frames;
        let (t, n_mels) = frames.dim();
        let width = 2 * self.context + 1;
        let mut stacked = Array2::<f32>::zeros((t, width * n_mels));
        for i in 0..t {
            for k in 0..width {
                // replicate edges
                let src = (i as isize + k as isize - self.context as isize).clamp(0, t as isize - 1) as usize;
                stacked
                    .slice_mut(ndarray::s![i, k * n_mels..(k + 1) * n_mels])
                    .assign(&frames.row(src));
            }
        }
        Ok(stacked.dot(&self.projection))
    }
}

/// Descriptor for an out-of-process encoder.
///
/// The command is invoked with the path of a 16-bit WAV appended to `args`
/// and must print the features to stdout as little-endian `f32`, row-major
/// `[T x dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEncoderDescriptor {
    pub name: String,
    pub command: Vec<String>,
    pub frame_hop_s: f64,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct ExternalEncoder {
    desc: ExternalEncoderDescriptor,
    layer: Option<usize>,
}

impl ExternalEncoder {
    pub fn load(path: &Path, layer: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let desc: ExternalEncoderDescriptor = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::new(desc, layer)
    }

    pub fn new(desc: ExternalEncoderDescriptor, layer: Option<usize>) -> Result<Self> {
        if (desc.frame_hop_s - FEATURE_HOP_S).abs() > 1e-9 {
            return Err(Error::config(format!(
                "external encoder '{}' declares a {} s frame hop; {FEATURE_HOP_S} s is required",
                desc.name, desc.frame_hop_s
            )));
        }
        if desc.dim != FEATURE_DIM {
            return Err(Error::config(format!(
                "external encoder '{}' declares {}-d output; {FEATURE_DIM} is required",
                desc.name, desc.dim
            )));
        }
        if desc.command.is_empty() {
            return Err(Error::config(format!("external encoder '{}' has an empty command", desc.name)));
        }
        Ok(Self { desc, layer })
    }
}

impl SpeechEncoderBackend for ExternalEncoder {
    fn name(&self) -> &str {
        &self.desc.name
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn encode_frames(&self, w: &Waveform) -> Result<Array2<f32>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let wav = dir.path().join("input.wav");
        save_audio(&wav, w)?;
        let mut cmd = Command::new(&self.desc.command[0]);
        cmd.args(&self.desc.command[1..]).arg(&wav);
        if let Some(layer) = self.layer {
            cmd.env("VCAUG_ENCODER_LAYER", layer.to_string());
        }
        let bytes = run_capture(&mut cmd, self.name())?;
        if bytes.len() % (4 * self.desc.dim) != 0 {
            return Err(Error::backend(
                self.name(),
                format!("output of {} bytes is not a whole number of {}-d f32 frames", bytes.len(), self.desc.dim),
            ));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let rows = values.len() / self.desc.dim;
        Array2::from_shape_vec((rows, self.desc.dim), values).map_err(|e| Error::backend(self.name(), e.to_string()))
    }
}

/// Run a command and return its stdout, turning non-zero exits into
/// backend errors that carry stderr.
pub(crate) fn run_capture(cmd: &mut Command, backend: &str) -> Result<Vec<u8>> {
    let mut child = cmd
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::backend(backend, format!("could not start command: {e}")))?;
    let mut stdout = Vec::new();
    let mut stderr = String::new();
    if let Some(mut out) = child.stdout.take() {
        out.read_to_end(&mut stdout)
            .map_err(|e| Error::backend(backend, e.to_string()))?;
    }
    if let Some(mut err) = child.stderr.take() {
        let _ = err.read_to_string(&mut stderr);
    }
    let status = child.wait().map_err(|e| Error::backend(backend, e.to_string()))?;
    if !status.success() {
        return Err(Error::backend(backend, format!("command exited with {status}: {}", stderr.trim())));
    }
    Ok(stdout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seconds: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * 16_000.0).round() as usize;
        let samples = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect();
        Waveform::new(samples, 16_000).unwrap()
    }

    fn standin() -> StandinEncoder {
        StandinEncoder::new(&SignalConfig::default(), 2, 7).unwrap()
    }

    #[test]
    fn one_second_gives_about_100_frames() {
        let f = encode(&noise(1.0, 1), &standin(), "u").unwrap();
        assert!((99..=101).contains(&f.n_frames()));
        assert_eq!(f.dim(), 512);
        assert_eq!(f.frame_hop_s, 0.010);
    }

    #[test]
    fn standin_is_deterministic() {
        let w = noise(0.7, 2);
        let a = encode(&w, &standin(), "u").unwrap();
        let b = encode(&w, &standin(), "u").unwrap();
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn too_short_is_rejected() {
        let err = encode(&noise(0.005, 3), &standin(), "u").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn frame_count_is_length_linear() {
        let w = noise(0.83, 4);
        let mut doubled = w.samples.clone();
        doubled.extend_from_slice(&w.samples);
        let ww = Waveform::new(doubled, 16_000).unwrap();
        let t1 = encode(&w, &standin(), "u").unwrap().n_frames() as i64;
        let t2 = encode(&ww, &standin(), "u").unwrap().n_frames() as i64;
        assert!((t2 - 2 * t1).abs() <= 2);
    }

    #[test]
    fn external_descriptor_is_validated() {
        let mut desc = ExternalEncoderDescriptor {
            name: "cpc".into(),
            command: vec!["true".into()],
            frame_hop_s: 0.02,
            dim: 512,
        };
        assert!(matches!(ExternalEncoder::new(desc.clone(), None), Err(Error::Config(_))));
        desc.frame_hop_s = 0.01;
        desc.dim = 256;
        assert!(matches!(ExternalEncoder::new(desc.clone(), None), Err(Error::Config(_))));
        desc.dim = 512;
        assert!(ExternalEncoder::new(desc, Some(3)).is_ok());
    }

    #[test]
    fn external_failure_is_backend_error() {
        let desc = ExternalEncoderDescriptor {
            name: "broken".into(),
            command: vec!["false".into()],
            frame_hop_s: 0.01,
            dim: 512,
        };
        let enc = ExternalEncoder::new(desc, None).unwrap();
        let err = encode(&noise(0.5, 5), &enc, "u").unwrap_err();
        assert!(matches!(err, Error::Backend { .. }), "{err}");
    }
}
