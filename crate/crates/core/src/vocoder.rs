//! Mel-to-waveform backends: a Griffin-Lim fallback that needs no weights,
//! and an adapter for an out-of-process neural vocoder.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::run_capture;
use crate::signal::{load_audio, MelSpectrogram, SignalConfig, SpectrogramSignature, Stft, Waveform};

pub trait VocoderBackend: Send + Sync {
    fn name(&self) -> &str;

    /// The spectrogram parameters this backend was built for.
    fn expects(&self) -> SpectrogramSignature;

    /// Produce audio; signature checks and clipping happen in [`vocode`].
    fn synthesize(&self, mel: &MelSpectrogram) -> Result<Vec<f32>>;
}

/// Invert `mel` with `backend`. The result is clipped to `[-1, 1]`.
pub fn vocode(mel: &MelSpectrogram, backend: &dyn VocoderBackend) -> Result<Waveform> {
    let want = backend.expects();
    if mel.signature != want {
        return Err(Error::validation(format!(
            "vocoder '{}' expects {:?}, spectrogram has {:?}",
            backend.name(),
            want,
            mel.signature
        )));
    }
    let mut samples = backend.synthesize(mel)?;
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::backend(backend.name(), format!("non-finite output sample at {i}")));
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    Waveform::new(samples, want.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocoderBackendKind {
    Griffinlim,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderConfig {
    pub backend: VocoderBackendKind,
    pub checkpoint: Option<PathBuf>,
    pub griffin_lim_iterations: usize,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            backend: VocoderBackendKind::Griffinlim,
            checkpoint: None,
            griffin_lim_iterations: 60,
        }
    }
}

pub fn build_vocoder(cfg: &VocoderConfig, signal: &SignalConfig) -> Result<Arc<dyn VocoderBackend>> {
    match cfg.backend {
        VocoderBackendKind::Griffinlim => Ok(Arc::new(GriffinLim::new(signal, cfg.griffin_lim_iterations)?)),
        VocoderBackendKind::External => {
            let path = cfg
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("vocoder.backend = external requires vocoder.checkpoint"))?;
            Ok(Arc::new(ExternalVocoder::load(path)?))
        }
    }
}

/// Griffin-Lim phase reconstruction from a log-mel spectrogram.
///
/// Mel magnitudes are mapped back to linear frequency with the
/// pseudo-inverse of the filterbank; phase starts at zero so the output is
/// a pure function of the input.
#[derive(Debug, Clone)]
pub struct GriffinLim {
    stft: Stft,
    /// `[n_bins x n_mels]`
    inverse_filterbank: Array2<f32>,
    iterations: usize,
}

impl GriffinLim {
    pub fn new(signal: &SignalConfig, iterations: usize) -> Result<Self> {
        signal.validate()?;
        let fb = crate::signal::mel_filterbank(signal);
        let (rows, cols) = fb.dim();
        let m = nalgebra::DMatrix::from_fn(rows, cols, |r, c| fb[[r, c]] as f64);
        let pinv = m
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::config(format!("mel filterbank pseudo-inverse failed: {e}")))?;
        let inverse_filterbank = Array2::from_shape_fn((cols, rows), |(r, c)| pinv[(r, c)] as f32);
        Ok(Self {
            stft: Stft::new(signal),
            inverse_filterbank,
            iterations,
        })
    }

    fn linear_magnitudes(&self, mel: &MelSpectrogram) -> Vec<Vec<f32>> {
        mel.frames
            .outer_iter()
            .map(|row| {
                let energies: Vec<f32> = row.iter().map(|v| v.exp()).collect();
                self.inverse_filterbank
                    .outer_iter()
                    .map(|w| w.iter().zip(&energies).map(|(a, b)| a * b).sum::<f32>().max(0.0))
                    .collect()
            })
            .collect()
    }
}

impl VocoderBackend for GriffinLim {
    fn name(&self) -> &str {
        "griffinlim"
    }

    fn expects(&self) -> SpectrogramSignature {
        self.stft.cfg.signature()
    }

    fn synthesize(&self, mel: &MelSpectrogram) -> Result<Vec<f32>> {
        let n_frames = mel.n_frames();
        let out_len = n_frames * self.stft.cfg.hop_length;
        let mags = self.linear_magnitudes(mel);
        let mut spectra: Vec<Vec<Complex32>> = mags
            .iter()
            .map(|m| m.iter().map(|&a| Complex32::new(a, 0.0)).collect())
            .collect();
        for _ in 0..self.iterations {
            let y = self.stft.synthesize(&spectra, out_len);
            let rebuilt = self.stft.analyze(&y, n_frames);
            for ((spec, mag), est) in spectra.iter_mut().zip(&mags).zip(&rebuilt) {
                for ((s, &a), e) in spec.iter_mut().zip(mag).zip(est) {
                    let norm = e.norm();
                    *s = if norm > 1e-12 {
                        e * (a / norm)
                    } else {
                        Complex32::new(a, 0.0)
                    };
                }
            }
        }
        Ok(self.stft.synthesize(&spectra, out_len))
    }
}

/// Descriptor for an out-of-process vocoder.
///
/// The command is invoked as `command... <mel.f32> <n_frames> <out.wav>`,
/// where `mel.f32` holds little-endian `f32` log-mel values, row-major
/// `[n_frames x n_mels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalVocoderDescriptor {
    pub name: String,
    pub command: Vec<String>,
    pub sample_rate: u32,
    pub hop_length: usize,
    pub n_mels: usize,
}

#[derive(Debug, Clone)]
pub struct ExternalVocoder {
    desc: ExternalVocoderDescriptor,
}

impl ExternalVocoder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let desc: ExternalVocoderDescriptor =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::new(desc)
    }

    pub fn new(desc: ExternalVocoderDescriptor) -> Result<Self> {
        if desc.command.is_empty() {
            return Err(Error::config(format!("external vocoder '{}' has an empty command", desc.name)));
        }
        Ok(Self { desc })
    }
}

impl VocoderBackend for ExternalVocoder {
    fn name(&self) -> &str {
        &self.desc.name
    }

    fn expects(&self) -> SpectrogramSignature {
        SpectrogramSignature {
            sample_rate: self.desc.sample_rate,
            hop_length: self.desc.hop_length,
            n_mels: self.desc.n_mels,
        }
    }

    fn synthesize(&self, mel: &MelSpectrogram) -> Result<Vec<f32>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let mel_path = dir.path().join("mel.f32");
        let out_path = dir.path().join("out.wav");
        let bytes: Vec<u8> = mel.frames.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&mel_path, bytes).map_err(|e| Error::io(&mel_path, e))?;
        let mut cmd = Command::new(&self.desc.command[0]);
        cmd.args(&self.desc.command[1..])
            .arg(&mel_path)
            .arg(mel.n_frames().to_string())
            .arg(&out_path);
        run_capture(&mut cmd, self.name())?;
        let w = load_audio(&out_path, self.desc.sample_rate)?;
        Ok(w.samples)
    }
}
