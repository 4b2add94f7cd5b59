//! Inference: source + reference → converted waveform, processed in fixed
//! length waveform chunks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bottleneck::{fit_stats, normalize, quantize, NormalizationStats, Quantizer};
use crate::error::{Error, Result};
use crate::features::{encode, FeatureSequence, SpeechEncoderBackend, MIN_ENCODE_DURATION_S};
use crate::model::VcModel;
use crate::signal::{MelSpectrogram, SignalConfig, Waveform};
use crate::style::{style_from_features, StyleVector};
use crate::vocoder::{vocode, VocoderBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertConfig {
    pub chunk_s: f64,
    /// Linear crossfade between chunks; `None` concatenates.
    pub crossfade_ms: Option<f64>,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            chunk_s: 7.0,
            crossfade_ms: None,
        }
    }
}

impl ConvertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_s.is_finite() && self.chunk_s > 0.0) {
            return Err(Error::config("convert.chunk_s must be positive"));
        }
        if let Some(ms) = self.crossfade_ms {
            if !(ms.is_finite() && ms >= 0.0) {
                return Err(Error::config("convert.crossfade_ms must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn stitch(&self) -> Stitch {
        match self.crossfade_ms {
            Some(ms) if ms > 0.0 => Stitch::Crossfade { ms },
            _ => Stitch::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stitch {
    Concat,
    Crossfade { ms: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub waveform: Waveform,
    pub transcript: String,
}

#[derive(Debug, Clone)]
pub struct ConversionRequest<'a> {
    pub source: &'a Utterance,
    pub reference: &'a Utterance,
    pub chunk_s: f64,
    pub stitch: Stitch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionResult {
    pub waveform: Waveform,
    pub per_chunk_frames: Vec<usize>,
    pub style: StyleVector,
    pub transcript: String,
    pub mel: MelSpectrogram,
    /// Chunks whose decoder hit the step limit before predicting a stop.
    pub truncated_chunks: usize,
    /// Audio seconds converted per wall-clock second.
    pub real_time_factor: f64,
}

/// Greedy split into `chunk_s` pieces; the last piece holds the remainder.
/// Concatenating the pieces gives back `w` exactly.
pub fn chunk(w: &Waveform, chunk_s: f64) -> Vec<Waveform> {
    let n = ((chunk_s * w.sample_rate as f64).round() as usize).max(1);
    if w.is_empty() {
        return vec![w.clone()];
    }
    (0..w.len())
        .step_by(n)
        .map(|start| w.slice(start, (start + n).min(w.len())))
        .collect()
}

/// Pipeline stages, reported to a [`ConversionObserver`] in the order they
/// run.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Style,
    Features { chunk: usize },
    SourceStats,
    Quantized { chunk: usize },
    Decoded { chunk: usize, frames: usize },
    Vocoded { chunk: usize },
    Stitched,
}

/// Hook for watching a conversion run; every method defaults to a no-op.
pub trait ConversionObserver {
    fn stage(&mut self, _stage: &Stage) {}
    fn normalization_stats(&mut self, _chunk: usize, _stats: &NormalizationStats) {}
}

pub struct NoObserver;

impl ConversionObserver for NoObserver {}

/// Anything that turns a source utterance into the reference speaker's
/// voice.
pub trait VoiceConverter: Sync {
    fn convert_utterance(&self, source: &Utterance, reference: &Utterance) -> Result<Waveform>;
}

/// Returns the source unchanged; the control condition for evaluation.
pub struct IdentityConverter;

impl VoiceConverter for IdentityConverter {
    fn convert_utterance(&self, source: &Utterance, _reference: &Utterance) -> Result<Waveform> {
        Ok(source.waveform.clone())
    }
}

pub struct Converter<'a> {
    pub model: &'a VcModel,
    pub quantizer: &'a Quantizer,
    pub backend: &'a dyn SpeechEncoderBackend,
    pub vocoder: &'a dyn VocoderBackend,
    pub signal: SignalConfig,
    pub config: ConvertConfig,
}

impl Converter<'_> {
    pub fn style(&self, reference: &Utterance) -> Result<StyleVector> {
        let f = encode(&reference.waveform, self.backend, &reference.id)?;
        Ok(style_from_features(&f, &self.model.style, &self.model.store)?.0)
    }

    pub fn convert(&self, req: &ConversionRequest<'_>) -> Result<ConversionResult> {
        self.convert_observed(req, &mut NoObserver)
    }

    pub fn convert_observed(
        &self,
        req: &ConversionRequest<'_>,
        observer: &mut dyn ConversionObserver,
    ) -> Result<ConversionResult> {
        let started = Instant::now();
        if req.source.waveform.is_empty() {
            return Err(Error::validation(format!("source '{}' is empty", req.source.id)));
        }
        if !(req.chunk_s.is_finite() && req.chunk_s > 0.0) {
            return Err(Error::validation("chunk length must be positive"));
        }
        let style = self.style(req.reference)?;
        observer.stage(&Stage::Style);

        // Normalization statistics come from the whole source utterance,
        // once, so every chunk is normalized identically.
        let stats = source_stats(&req.source.waveform, &req.source.id, self.backend)?;
        observer.stage(&Stage::SourceStats);
        let chunks = encodable_chunks(&req.source.waveform, req.chunk_s);
        let mut feats = Vec::with_capacity(chunks.len());
        for (i, c) in chunks.iter().enumerate() {
            feats.push(encode(c, self.backend, &req.source.id)?);
            observer.stage(&Stage::Features { chunk: i });
        }

        let sig = self.signal.signature();
        let mut mels = Vec::with_capacity(chunks.len());
        let mut waves = Vec::with_capacity(chunks.len());
        let mut per_chunk_frames = Vec::with_capacity(chunks.len());
        let mut truncated_chunks = 0;
        for (i, f) in feats.iter().enumerate() {
            observer.normalization_stats(i, &stats);
            let q = quantize(&normalize(f, &stats)?, &self.quantizer.codebook)?;
            observer.stage(&Stage::Quantized { chunk: i });
            let out = self.model.generate(&q, &style)?;
            truncated_chunks += usize::from(out.truncated);
            let mel = out.mel_spectrogram(0, sig)?;
            per_chunk_frames.push(mel.n_frames());
            observer.stage(&Stage::Decoded {
                chunk: i,
                frames: mel.n_frames(),
            });
            waves.push(vocode(&mel, self.vocoder)?);
            observer.stage(&Stage::Vocoded { chunk: i });
            mels.push(mel);
        }
        let waveform = stitch(&waves, req.stitch)?;
        observer.stage(&Stage::Stitched);
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        Ok(ConversionResult {
            waveform,
            per_chunk_frames,
            style,
            transcript: req.source.transcript.clone(),
            mel: MelSpectrogram::concat(&mels)?,
            truncated_chunks,
            real_time_factor: req.source.waveform.duration_s() / elapsed,
        })
    }
}

impl VoiceConverter for Converter<'_> {
    fn convert_utterance(&self, source: &Utterance, reference: &Utterance) -> Result<Waveform> {
        let req = ConversionRequest {
            source,
            reference,
            chunk_s: self.config.chunk_s,
            stitch: self.config.stitch(),
        };
        Ok(self.convert(&req)?.waveform)
    }
}

/// [`chunk`], with a trailing piece too short for the speech encoder folded
/// into its predecessor.
fn encodable_chunks(w: &Waveform, chunk_s: f64) -> Vec<Waveform> {
    let mut chunks = chunk(w, chunk_s);
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.duration_s() < MIN_ENCODE_DURATION_S) {
        let tail = chunks.pop().expect("len > 1");
        let prev = chunks.pop().expect("len > 1");
        let mut samples = prev.samples;
        samples.extend_from_slice(&tail.samples);
        chunks.push(Waveform {
            samples,
            sample_rate: w.sample_rate,
        });
    }
    chunks
}

/// Join converted chunks by concatenation or a linear crossfade.
pub fn stitch(parts: &[Waveform], how: Stitch) -> Result<Waveform> {
    let Some(first) = parts.first() else {
        return Err(Error::validation("nothing to stitch"));
    };
    let rate = first.sample_rate;
    let mut out = first.samples.clone();
    for p in &parts[1..] {
        if p.sample_rate != rate {
            return Err(Error::validation("chunks have different sample rates"));
        }
        let overlap = match how {
            Stitch::Concat => 0,
            Stitch::Crossfade { ms } => ((ms / 1000.0 * rate as f64).round() as usize).min(out.len()).min(p.len()),
        };
        let base = out.len() - overlap;
        for i in 0..overlap {
            let a = (i + 1) as f32 / (overlap + 1) as f32;
            out[base + i] = out[base + i] * (1.0 - a) + p.samples[i] * a;
        }
        out.extend_from_slice(&p.samples[overlap..]);
    }
    Waveform::new(out, rate)
}

/// Whole-utterance features, for callers that want the source stats
/// without converting.
pub fn source_stats(w: &Waveform, id: &str, backend: &dyn SpeechEncoderBackend) -> Result<NormalizationStats> {
    let f: FeatureSequence = encode(w, backend, id)?;
    fit_stats([&f])
}
