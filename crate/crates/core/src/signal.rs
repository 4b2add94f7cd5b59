//! Audio I/O, resampling, and log-mel analysis.
//!
//! Every spectrogram in the pipeline (decoder targets, stand-in features,
//! vocoder input) comes from [`MelExtractor`], so frames line up 1:1 with
//! the 10 ms feature hop.

use std::f32::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalConfig {
    pub sample_rate: u32,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f32,
    pub f_max: f32,
    /// Magnitudes are clamped to this value before the natural log.
    pub log_floor: f32,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            sample_rate: CANONICAL_RATE,
            hop_length: 160,
            win_length: 640,
            n_fft: 1024,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl SignalConfig {
    pub fn hop_s(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    pub fn signature(&self) -> SpectrogramSignature {
        SpectrogramSignature {
            sample_rate: self.sample_rate,
            hop_length: self.hop_length,
            n_mels: self.n_mels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return Err(Error::config("signal: sample_rate, hop_length and n_mels must be positive"));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::config("signal: need 0 < win_length <= n_fft"));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f32 / 2.0) {
            return Err(Error::config("signal: need 0 <= f_min < f_max <= sample_rate/2"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("signal: log_floor must be positive"));
        }
        Ok(())
    }
}

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::validation("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::validation(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt() as f32
    }

    /// Samples `[start, end)`, clamped to the signal.
    pub fn slice(&self, start: usize, end: usize) -> Waveform {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// The parameters a vocoder needs to agree on before it can invert a mel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrogramSignature {
    pub sample_rate: u32,
    pub hop_length: usize,
    pub n_mels: usize,
}

/// Log-mel frames, `[T x n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
    pub signature: SpectrogramSignature,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f32>, signature: SpectrogramSignature) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::validation("mel spectrogram needs at least one frame"));
        }
        if frames.ncols() != signature.n_mels {
            return Err(Error::validation(format!(
                "mel width {} does not match n_mels {}",
                frames.ncols(),
                signature.n_mels
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("mel spectrogram contains non-finite values"));
        }
        Ok(Self { frames, signature })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn hop_s(&self) -> f64 {
        self.signature.hop_length as f64 / self.signature.sample_rate as f64
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.frames.iter().map(|&v| v as f64).sum();
        (sum / self.frames.len() as f64) as f32
    }

    /// Concatenate along time. All parts must share a signature.
    pub fn concat(parts: &[MelSpectrogram]) -> Result<MelSpectrogram> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("cannot concatenate zero spectrograms"))?;
        if parts.iter().any(|p| p.signature != first.signature) {
            return Err(Error::validation("spectrogram signatures differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.frames.view()).collect();
        let frames = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::validation(format!("mel concat: {e}")))?;
        Ok(MelSpectrogram {
            frames,
            signature: first.signature,
        })
    }
}

/// Read a WAV (PCM or float) or FLAC file, downmix to mono and resample.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<Waveform> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let (channels, rate, interleaved) = if ext == "flac" {
        read_flac(path)?
    } else {
        read_wav(path)?
    };
    if interleaved.is_empty() {
        return Err(Error::validation(format!("{} contains no audio", path.display())));
    }
    let mono = downmix(&interleaved, channels);
    let w = Waveform::new(mono, rate)?;
    Ok(resample(&w, target_rate))
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn read_wav(path: &Path) -> Result<(usize, u32, Vec<f32>)> {
    let reader = hound::WavReader::new(std::io::BufReader::new(open(path)?)).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let samples: std::result::Result<Vec<f32>, _> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect()
        }
    };
    let samples = samples.map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok((spec.channels as usize, spec.sample_rate, samples))
}

fn read_flac(path: &Path) -> Result<(usize, u32, Vec<f32>)> {
    let mut reader = claxon::FlacReader::new(std::io::BufReader::new(open(path)?))
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let info = reader.streaminfo();
    let scale = 1.0 / (1u64 << (info.bits_per_sample - 1)) as f32;
    let samples: std::result::Result<Vec<f32>, _> =
        reader.samples().map(|s| s.map(|v| v as f32 * scale)).collect();
    let samples = samples.map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok((info.channels as usize, info.sample_rate, samples))
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels <= 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Write 16-bit PCM WAV. Samples are clipped to [-1, 1].
pub fn save_audio(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 32.0;
const RESAMPLE_ROLLOFF: f64 = 0.95;

/// Band-limited resampling by Hann-windowed sinc interpolation.
///
/// Output length is `round(len * target / source)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    if w.sample_rate == target_rate || w.is_empty() {
        return Waveform {
            samples: w.samples.clone(),
            sample_rate: target_rate,
        };
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    // cutoff relative to the source Nyquist
    let cutoff = ratio.min(1.0) * RESAMPLE_ROLLOFF;
    let half_width = (RESAMPLE_ZERO_CROSSINGS / cutoff).ceil();
    let src = &w.samples;
    let n = src.len() as isize;
    let samples = (0..out_len)
        .map(|i| {
            let x = i as f64 / ratio;
            let lo = ((x - half_width).ceil() as isize).max(0);
            let hi = ((x + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0f64;
            for j in lo..=hi {
                let u = x - j as f64;
                let win = 0.5 + 0.5 * (std::f64::consts::PI * u / half_width).cos();
                acc += src[j as usize] as f64 * cutoff * sinc(cutoff * u) * win;
            }
            acc as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: target_rate,
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

pub fn hz_to_mel(hz: f32) -> f32 {
    // Slaney: linear below 1 kHz, logarithmic above.
    const F_SP: f32 = 200.0 / 3.0;
    const MIN_LOG_HZ: f32 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f32.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f32) -> f32 {
    const F_SP: f32 = 200.0 / 3.0;
    const MIN_LOG_HZ: f32 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f32.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// The `n_mels + 2` band edge frequencies; band `i` peaks at edge `i + 1`.
pub fn mel_band_edges(cfg: &SignalConfig) -> Vec<f32> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f32 / (n - 1) as f32))
        .collect()
}

/// Center frequency of every mel band.
pub fn mel_center_frequencies(cfg: &SignalConfig) -> Vec<f32> {
    let edges = mel_band_edges(cfg);
    edges[1..edges.len() - 1].to_vec()
}

/// Slaney-normalized triangular filterbank, `[n_mels x (n_fft/2 + 1)]`.
pub fn mel_filterbank(cfg: &SignalConfig) -> Array2<f32> {
    let n_bins = cfg.n_fft / 2 + 1;
    let edges = mel_band_edges(cfg);
    let bin_hz: Vec<f32> = (0..n_bins)
        .map(|k| k as f32 * cfg.sample_rate as f32 / cfg.n_fft as f32)
        .collect();
    let mut fb = Array2::<f32>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            let w = up.min(down).max(0.0);
            fb[[m, k]] = w * norm;
        }
    }
    fb
}

/// Hann window of `win_length` centered inside an `n_fft` frame.
pub fn analysis_window(cfg: &SignalConfig) -> Vec<f32> {
    let mut w = vec![0.0f32; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win_length) / 2;
    for i in 0..cfg.win_length {
        // periodic Hann
        w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f32 / cfg.win_length as f32).cos();
    }
    w
}

/// Number of analysis frames for a signal of `len` samples: `ceil(len / hop)`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Shared short-time Fourier machinery. Frame `t` is centered on sample
/// `t * hop` and zero-padded past the signal ends.
#[derive(Clone)]
pub struct Stft {
    pub cfg: SignalConfig,
    window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: &SignalConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            window: analysis_window(cfg),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    pub fn n_bins(&self) -> usize {
        self.cfg.n_fft / 2 + 1
    }

    /// Complex spectra, one `n_bins` row per frame.
    pub fn analyze(&self, samples: &[f32], n_frames: usize) -> Vec<Vec<Complex32>> {
        let n_fft = self.cfg.n_fft;
        let hop = self.cfg.hop_length as isize;
        let half = (n_fft / 2) as isize;
        let len = samples.len() as isize;
        let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        (0..n_frames)
            .map(|t| {
                let start = t as isize * hop - half;
                for (i, b) in buf.iter_mut().enumerate() {
                    let idx = start + i as isize;
                    let s = if idx >= 0 && idx < len { samples[idx as usize] } else { 0.0 };
                    *b = Complex32::new(s * self.window[i], 0.0);
                }
                self.forward.process_with_scratch(&mut buf, &mut scratch);
                buf[..self.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`], producing
    /// exactly `out_len` samples.
    pub fn synthesize(&self, spectra: &[Vec<Complex32>], out_len: usize) -> Vec<f32> {
        let n_fft = self.cfg.n_fft;
        let hop = self.cfg.hop_length as isize;
        let half = (n_fft / 2) as isize;
        let mut out = vec![0.0f32; out_len];
        let mut wsum = vec![0.0f32; out_len];
        let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let n_bins = self.n_bins();
        for (t, spec) in spectra.iter().enumerate() {
            buf[..n_bins].copy_from_slice(spec);
            // Hermitian mirror so the inverse is real.
            for k in n_bins..n_fft {
                buf[k] = buf[n_fft - k].conj();
            }
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t as isize * hop - half;
            for i in 0..n_fft {
                let idx = start + i as isize;
                if idx < 0 || idx >= out_len as isize {
                    continue;
                }
                let w = self.window[i];
                out[idx as usize] += buf[i].re / n_fft as f32 * w;
                wsum[idx as usize] += w * w;
            }
        }
        for (o, &ws) in out.iter_mut().zip(&wsum) {
            if ws > 1e-8 {
                *o /= ws;
            }
        }
        out
    }
}

/// Computes log-mel spectrograms with a cached filterbank and FFT plan.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    stft: Stft,
    filterbank: Array2<f32>,
}

impl MelExtractor {
    pub fn new(cfg: &SignalConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            stft: Stft::new(cfg),
            filterbank: mel_filterbank(cfg),
        })
    }

    pub fn config(&self) -> &SignalConfig {
        &self.stft.cfg
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filterbank(&self) -> &Array2<f32> {
        &self.filterbank
    }

    pub fn melspec(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let cfg = &self.stft.cfg;
        if w.sample_rate != cfg.sample_rate {
            return Err(Error::validation(format!(
                "melspec expects {} Hz audio, got {} Hz",
                cfg.sample_rate, w.sample_rate
            )));
        }
        if w.is_empty() {
            return Err(Error::validation("melspec of empty waveform"));
        }
        let n_frames = frame_count(w.len(), cfg.hop_length);
        let spectra = self.stft.analyze(&w.samples, n_frames);
        let log_floor = cfg.log_floor;
        let mut frames = Array2::<f32>::zeros((n_frames, cfg.n_mels));
        let mut mag = vec![0.0f32; self.stft.n_bins()];
        for (t, spec) in spectra.iter().enumerate() {
            for (m, c) in mag.iter_mut().zip(spec) {
                *m = c.norm();
            }
            for (b, row) in self.filterbank.outer_iter().enumerate() {
                let e: f32 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
                frames[[t, b]] = e.max(log_floor).ln();
            }
        }
        MelSpectrogram::new(frames, cfg.signature())
    }
}

/// One-shot convenience wrapper around [`MelExtractor::melspec`].
pub fn melspec(w: &Waveform, cfg: &SignalConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg)?.melspec(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f32, seconds: f64, rate: u32) -> Waveform {
        let n = (seconds * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f32 / rate as f32).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn silence_is_all_floor() {
        let cfg = SignalConfig::default();
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let mel = melspec(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn half_second_frame_count() {
        let cfg = SignalConfig::default();
        let mel = melspec(&tone(300.0, 0.5, 16_000), &cfg).unwrap();
        assert!((49..=51).contains(&mel.n_frames()), "{}", mel.n_frames());
        assert_eq!(mel.n_mels(), 80);
    }

    #[test]
    fn tone_peaks_at_nearest_mel_center() {
        let cfg = SignalConfig::default();
        let centers = mel_center_frequencies(&cfg);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0;
        let mel = melspec(&tone(440.0, 1.0, 16_000), &cfg).unwrap();
        // skip the edge frames, whose windows are half zero-padding
        for row in mel.frames.outer_iter().skip(4).take(mel.n_frames() - 8) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn rejects_wrong_rate() {
        let cfg = SignalConfig::default();
        assert!(melspec(&tone(440.0, 0.1, 8_000), &cfg).is_err());
    }

    #[test]
    fn identity_resample_keeps_samples() {
        let w = tone(440.0, 1.0, 16_000);
        let r = resample(&w, 16_000);
        assert_eq!(r.samples, w.samples);
    }

    #[test]
    fn wav_round_trip_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = tone(440.0, 1.0, 16_000);
        save_audio(&path, &w).unwrap();
        let back = load_audio(&path, 16_000).unwrap();
        assert_eq!(back.len(), 16_000);
        let max_err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-4);

        let empty = dir.path().join("empty.wav");
        save_audio(&empty, &Waveform::new(vec![], 16_000).unwrap()).unwrap();
        assert!(matches!(load_audio(&empty, 16_000), Err(Error::Validation(_))));

        assert!(matches!(
            load_audio(&dir.path().join("missing.wav"), 16_000),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn stereo_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            wr.write_sample(0.5f32).unwrap();
            wr.write_sample(-0.25f32).unwrap();
        }
        wr.finalize().unwrap();
        let w = load_audio(&path, 16_000).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.samples.iter().all(|&s| (s - 0.125).abs() < 1e-7));
    }
}
