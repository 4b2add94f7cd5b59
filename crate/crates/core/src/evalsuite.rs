//! Intrinsic evaluation: W/CER, the re-synthesis intelligibility drop and
//! the speaker-similarity error rate, with pluggable ASR and speaker
//! embedding backends.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::GenderFilter;
use crate::convert::{Utterance, VoiceConverter};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::signal::{save_audio, MelExtractor, MelSpectrogram, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. Among
/// optimal alignments the backtrace prefers match/substitution, then
/// deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        distance: d[n][m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            c.substitutions += usize::from(reference[i - 1] != hyp[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

/// Tokens of `text` at `unit` level. Characters are taken from the text
/// with whitespace runs collapsed to one space.
pub fn tokenize(text: &str, unit: Unit) -> Vec<String> {
    let words = text.split_whitespace();
    match unit {
        Unit::Word => words.map(str::to_string).collect(),
        Unit::Char => words.collect::<Vec<_>>().join(" ").chars().map(String::from).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateReport {
    pub rate: f64,
    pub errors: EditCounts,
    pub reference_tokens: usize,
    pub n_utterances: usize,
}

/// Corpus-pooled error rate: total edit distance over total reference
/// length.
pub fn error_rates(pairs: &[(String, String)], unit: Unit) -> Result<RateReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no (reference, hypothesis) pairs to score"));
    }
    let mut total = EditCounts::default();
    let mut ref_len = 0;
    for (r, h) in pairs {
        let rt = tokenize(r, unit);
        let c = edit_distance(&rt, &tokenize(h, unit));
        ref_len += rt.len();
        total.distance += c.distance;
        total.substitutions += c.substitutions;
        total.insertions += c.insertions;
        total.deletions += c.deletions;
    }
    if ref_len == 0 {
        return Err(Error::validation("every reference transcript is empty"));
    }
    Ok(RateReport {
        rate: total.distance as f64 / ref_len as f64,
        errors: total,
        reference_tokens: ref_len,
        n_utterances: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRateReport {
    pub wer: f64,
    pub cer: f64,
    pub n_utterances: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

pub fn error_rate_report(pairs: &[(String, String)]) -> Result<ErrorRateReport> {
    let w = error_rates(pairs, Unit::Word)?;
    let c = error_rates(pairs, Unit::Char)?;
    Ok(ErrorRateReport {
        wer: w.rate,
        cer: c.rate,
        n_utterances: w.n_utterances,
        substitutions: w.errors.substitutions,
        insertions: w.errors.insertions,
        deletions: w.errors.deletions,
        reference_words: w.reference_tokens,
    })
}

pub trait AsrBackend: Sync {
    fn name(&self) -> &str;
    /// Transcribe the utterance whose source record is `utterance_id`.
    fn transcribe(&self, utterance_id: &str, audio: &Waveform) -> Result<String>;
}

/// Test ASR that knows each utterance's transcript and original audio. It
/// replaces words with `<unk>` at a rate that grows with how far the input's
/// spectrogram drifts from the original's.
///
/// Each word `i` of utterance `id` gets a fixed uniform draw `u_i`; the word
/// is corrupted when `u_i < p`. Because the draws depend only on `(seed, id)`,
/// a more distorted input corrupts a superset of the words a less distorted
/// one does, and identical input gives identical output.
pub struct MockAsr {
    transcripts: HashMap<String, String>,
    originals: HashMap<String, MelSpectrogram>,
    mel: MelExtractor,
    pub base_rate: f64,
    pub distortion_gain: f64,
    pub seed: u64,
}

impl MockAsr {
    pub fn new(mel: MelExtractor, base_rate: f64, distortion_gain: f64, seed: u64) -> Self {
        Self {
            transcripts: HashMap::new(),
            originals: HashMap::new(),
            mel,
            base_rate,
            distortion_gain,
            seed,
        }
    }

    pub fn register(&mut self, id: &str, transcript: &str, original: &Waveform) -> Result<()> {
        self.transcripts.insert(id.to_string(), transcript.to_string());
        self.originals.insert(id.to_string(), self.mel.melspec(original)?);
        Ok(())
    }

    /// `1 − r`, with `r` the mean per-bin Pearson correlation between the
    /// input mel (linearly resampled in time to the original's length) and
    /// the original mel, clamped to `[0, 2]`.
    pub fn distortion(&self, id: &str, audio: &Waveform) -> Result<f64> {
        let orig = self
            .originals
            .get(id)
            .ok_or_else(|| Error::backend("mock-asr", format!("unknown utterance '{id}'")))?;
        let mel = self.mel.melspec(audio)?;
        let aligned = resample_frames(&mel.frames, orig.n_frames());
        let r = mean_bin_pearson(&aligned, &orig.frames);
        Ok((1.0 - r.min(1.0)).clamp(0.0, 2.0))
    }

    pub fn corruption_probability(&self, id: &str, audio: &Waveform) -> Result<f64> {
        Ok((self.base_rate + self.distortion_gain * self.distortion(id, audio)?).clamp(0.0, 1.0))
    }
}

impl AsrBackend for MockAsr {
    fn name(&self) -> &str {
        "mock"
    }

    fn transcribe(&self, utterance_id: &str, audio: &Waveform) -> Result<String> {
        let text = self
            .transcripts
            .get(utterance_id)
            .ok_or_else(|| Error::backend("mock-asr", format!("unknown utterance '{utterance_id}'")))?;
        let p = self.corruption_probability(utterance_id, audio)?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        std::hash::Hash::hash(utterance_id, &mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ std::hash::Hasher::finish(&h));
        Ok(text
            .split_whitespace()
            .map(|w| if rng.random::<f64>() < p { "<unk>" } else { w })
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Linear interpolation of rows to `t` frames.
pub fn resample_frames(a: &ndarray::Array2<f32>, t: usize) -> ndarray::Array2<f32> {
    let (n, d) = a.dim();
    let mut out = ndarray::Array2::zeros((t, d));
    for j in 0..t {
        let x = if t > 1 { j as f64 * (n - 1) as f64 / (t - 1) as f64 } else { 0.0 };
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let w = (x - i0 as f64) as f32;
        for k in 0..d {
            out[[j, k]] = a[[i0, k]] * (1.0 - w) + a[[i1, k]] * w;
        }
    }
    out
}

/// Mean over bins of the Pearson correlation along time; bins that are
/// constant in either input are skipped (0 when all are).
pub fn mean_bin_pearson(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for (x, y) in a.columns().into_iter().zip(b.columns()) {
        let n = x.len() as f64;
        let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (&u, &v) in x.iter().zip(y.iter()) {
            let (du, dv) = (u as f64 - mx, v as f64 - my);
            sxy += du * dv;
            sxx += du * du;
            syy += dv * dv;
        }
        if sxx > 0.0 && syy > 0.0 {
            sum += sxy / (sxx * syy).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// ASR through a user command: `command... <wav>` prints the transcript.
pub struct ExternalAsr {
    pub command: Vec<String>,
    scratch: tempfile::TempDir,
}

impl ExternalAsr {
    pub fn new(command: Vec<String>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::config("eval.asr.command is empty"));
        }
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(Self { command, scratch })
    }
}

impl AsrBackend for ExternalAsr {
    fn name(&self) -> &str {
        &self.command[0]
    }

    fn transcribe(&self, utterance_id: &str, audio: &Waveform) -> Result<String> {
        let safe: String = utterance_id.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect();
        let path = self.scratch.path().join(format!("{safe}-{}.wav", rand::random::<u32>()));
        save_audio(&path, audio)?;
        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..]).arg(&path);
        let out = crate::features::run_capture(&mut cmd, "external-asr");
        let _ = std::fs::remove_file(&path);
        let text = String::from_utf8(out?).map_err(|e| Error::backend("external-asr", e.to_string()))?;
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResynthesisReport {
    pub original: ErrorRateReport,
    pub converted: ErrorRateReport,
    pub wer_drop: f64,
    pub cer_drop: f64,
    /// Utterances left out because conversion or ASR failed.
    pub failed_ids: Vec<(String, String)>,
}

pub struct ResynthesisSetup<'a> {
    pub converter: &'a dyn VoiceConverter,
    pub asr: &'a dyn AsrBackend,
    pub pool: &'a Manifest,
    pub gender_filter: GenderFilter,
    pub seed: u64,
    pub sample_rate: u32,
}

/// Convert every test utterance against a randomly drawn reference, run ASR
/// on both versions and compare rates. Failures are listed, not fatal.
pub fn resynthesis_eval(test: &Manifest, setup: &ResynthesisSetup<'_>) -> Result<ResynthesisReport> {
    let admitted = crate::augment::filter_pool(setup.pool, setup.gender_filter)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let refs: Vec<_> = test
        .records
        .iter()
        .map(|_| admitted[rng.random_range(0..admitted.len())])
        .collect();
    type Row = std::result::Result<((String, String), (String, String)), (String, String)>;
    let rows: Vec<Row> = test
        .records
        .par_iter()
        .zip(refs.par_iter())
        .map(|(r, reference)| {
            let run = || -> Result<_> {
                let source = Utterance {
                    id: r.id.clone(),
                    waveform: test.load_waveform(r, setup.sample_rate)?,
                    transcript: r.transcript.clone(),
                };
                let refu = Utterance {
                    id: reference.id.clone(),
                    waveform: setup.pool.load_waveform(reference, setup.sample_rate)?,
                    transcript: reference.transcript.clone(),
                };
                let converted = setup.converter.convert_utterance(&source, &refu)?;
                let h_orig = setup.asr.transcribe(&r.id, &source.waveform)?;
                let h_conv = setup.asr.transcribe(&r.id, &converted)?;
                Ok(((r.transcript.clone(), h_orig), (r.transcript.clone(), h_conv)))
            };
            run().map_err(|e| (r.id.clone(), e.to_string()))
        })
        .collect();
    let mut orig = Vec::new();
    let mut conv = Vec::new();
    let mut failed_ids = Vec::new();
    for row in rows {
        match row {
            Ok((o, c)) => {
                orig.push(o);
                conv.push(c);
            }
            Err(f) => failed_ids.push(f),
        }
    }
    if orig.is_empty() {
        return Err(Error::backend(
            setup.asr.name(),
            format!("every utterance failed; first: {:?}", failed_ids.first()),
        ));
    }
    let original = error_rate_report(&orig)?;
    let converted = error_rate_report(&conv)?;
    Ok(ResynthesisReport {
        wer_drop: converted.wer - original.wer,
        cer_drop: converted.cer - original.cer,
        original,
        converted,
        failed_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TripleOutcome {
    pub cos_to_source: f64,
    pub cos_to_reference: f64,
    pub is_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeakerSimilarityReport {
    pub error_rate: f64,
    pub n_triples: usize,
    pub per_triple: Vec<TripleOutcome>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "embeddings have different dimensions ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::validation("zero-norm or non-finite embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// A triple is an error when the converted embedding is at least as close
/// (by cosine) to the source as to the reference.
pub fn speaker_similarity_eval(triples: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Result<SpeakerSimilarityReport> {
    if triples.is_empty() {
        return Err(Error::validation("no triples to evaluate"));
    }
    let per_triple = triples
        .iter()
        .map(|(conv, src, reference)| {
            let cos_to_source = cosine(conv, src)?;
            let cos_to_reference = cosine(conv, reference)?;
            Ok(TripleOutcome {
                cos_to_source,
                cos_to_reference,
                is_error: cos_to_source >= cos_to_reference,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let errors = per_triple.iter().filter(|t| t.is_error).count();
    Ok(SpeakerSimilarityReport {
        error_rate: errors as f64 / per_triple.len() as f64,
        n_triples: per_triple.len(),
        per_triple,
    })
}

pub trait SpeakerEmbedder: Sync {
    fn name(&self) -> &str;
    fn embed(&self, audio: &Waveform) -> Result<Vec<f64>>;
}

/// Per-bin mean and standard deviation of the log-mel spectrogram.
pub struct StandinSpeakerEmbedder {
    pub mel: MelExtractor,
}

impl SpeakerEmbedder for StandinSpeakerEmbedder {
    fn name(&self) -> &str {
        "standin"
    }

    fn embed(&self, audio: &Waveform) -> Result<Vec<f64>> {
        let m = self.mel.melspec(audio)?;
        let n = m.n_frames() as f64;
        let mut out = Vec::with_capacity(2 * m.n_mels());
        let means: Vec<f64> = m.frames.columns().into_iter().map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / n).collect();
        for (c, mean) in m.frames.columns().into_iter().zip(&means) {
            out.push(*mean);
            out.push((c.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt());
        }
        Ok(out)
    }
}

/// Embedder through a user command: `command... <wav>` prints
/// whitespace-separated numbers.
pub struct ExternalSpeakerEmbedder {
    pub command: Vec<String>,
    scratch: tempfile::TempDir,
}

impl ExternalSpeakerEmbedder {
    pub fn new(command: Vec<String>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::config("eval.speaker.command is empty"));
        }
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(Self { command, scratch })
    }
}

impl SpeakerEmbedder for ExternalSpeakerEmbedder {
    fn name(&self) -> &str {
        &self.command[0]
    }

    fn embed(&self, audio: &Waveform) -> Result<Vec<f64>> {
        let path = self.scratch.path().join(format!("emb-{}.wav", rand::random::<u64>()));
        save_audio(&path, audio)?;
        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..]).arg(&path);
        let out = crate::features::run_capture(&mut cmd, "external-embedder");
        let _ = std::fs::remove_file(&path);
        let text = String::from_utf8(out?).map_err(|e| Error::backend("external-embedder", e.to_string()))?;
        text.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::backend("external-embedder", format!("bad number '{t}': {e}")))
            })
            .collect()
    }
}

/// Embedding triples for every converted record (provenance `vc` or
/// `chain`) of `converted`, resolving sources there and references in
/// `pool`.
pub fn triples_from_manifest(
    converted: &Manifest,
    pool: &Manifest,
    embedder: &dyn SpeakerEmbedder,
    sample_rate: u32,
) -> Result<(Vec<String>, Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>)> {
    let mut ids = Vec::new();
    let mut jobs = Vec::new();
    for r in &converted.records {
        let (Some(src), Some(reference)) = (r.provenance.source_id(), r.provenance.reference_id()) else {
            continue;
        };
        let s = converted
            .get(src)
            .ok_or_else(|| Error::validation(format!("source '{src}' of '{}' not in manifest", r.id)))?;
        let p = pool
            .get(reference)
            .or_else(|| converted.get(reference))
            .ok_or_else(|| Error::validation(format!("reference '{reference}' of '{}' not found", r.id)))?;
        let p_manifest = if pool.get(reference).is_some() { pool } else { converted };
        ids.push(r.id.clone());
        jobs.push((r, s, p, p_manifest));
    }
    if jobs.is_empty() {
        return Err(Error::validation("manifest has no converted records"));
    }
    let triples = jobs
        .par_iter()
        .map(|(r, s, p, pm)| {
            Ok((
                embedder.embed(&converted.load_waveform(r, sample_rate)?)?,
                embedder.embed(&converted.load_waveform(s, sample_rate)?)?,
                embedder.embed(&pm.load_waveform(p, sample_rate)?)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ids, triples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsrKind {
    #[default]
    Mock,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrConfig {
    pub backend: AsrKind,
    pub command: Vec<String>,
    pub mock_base_rate: f64,
    pub mock_distortion_gain: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            backend: AsrKind::Mock,
            command: Vec::new(),
            mock_base_rate: 0.02,
            mock_distortion_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Standin,
    External,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerConfig {
    pub backend: EmbedderKind,
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub asr: AsrConfig,
    pub speaker: SpeakerConfig,
    pub gender_filter: GenderFilter,
    /// Reference pool for re-synthesis; the test manifest when absent.
    pub reference_pool: Option<PathBuf>,
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Plain-text table in the layout of a W/CER comparison.
pub fn resynthesis_table(r: &ResynthesisReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>6}", "audio", "WER (%)", "CER (%)", "utts");
    for (name, e) in [("original", &r.original), ("converted", &r.converted)] {
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>6}", name, pct(e.wer), pct(e.cer), e.n_utterances);
    }
    let _ = writeln!(s, "{:<12} {:>8} {:>8}", "drop", pct(r.wer_drop), pct(r.cer_drop));
    if !r.failed_ids.is_empty() {
        let _ = writeln!(s, "failed: {}", r.failed_ids.len());
    }
    s
}

pub fn speaker_table(r: &SpeakerSimilarityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:>10}", "metric", "value");
    let _ = writeln!(s, "{:<24} {:>10}", "speaker sim. error (%)", pct(r.error_rate));
    let _ = writeln!(s, "{:<24} {:>10}", "triples", r.n_triples);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, Unit::Word)
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&toks("a b c"), &toks("a b c")).distance, 0);
        let c = edit_distance(&toks("a b c"), &toks("a c"));
        assert_eq!((c.distance, c.deletions), (1, 1));
        let c = edit_distance(&toks(""), &toks("x y"));
        assert_eq!((c.distance, c.insertions), (2, 2));
        let c = edit_distance(&toks("a b c d"), &toks("a x c d"));
        assert_eq!((c.distance, c.substitutions), (1, 1));
    }

    #[test]
    fn pooled_rates() {
        let p = |r: &str, h: &str| (r.to_string(), h.to_string());
        let one = error_rates(&[p("a b c", "a c")], Unit::Word).unwrap();
        assert!((one.rate - 1.0 / 3.0).abs() < 1e-15);
        let sub = error_rates(&[p("a b c d", "a b x d")], Unit::Word).unwrap();
        assert_eq!(sub.rate, 0.25);
        let pooled = error_rates(&[p("a b", "a x"), p("a b c d e f g h", "a b c d e f g x")], Unit::Word).unwrap();
        assert_eq!(pooled.rate, 0.2);
        let pooled = error_rates(&[p("a b c d", "a b c x"), p("a b c d", "x y z d")], Unit::Word).unwrap();
        assert_eq!(pooled.rate, 0.5);
        assert!(error_rates(&[p("", "x")], Unit::Word).is_err());
        assert!(error_rates(&[], Unit::Word).is_err());
    }

    #[test]
    fn char_tokens_collapse_whitespace() {
        assert_eq!(tokenize(" ab  c ", Unit::Char), vec!["a", "b", " ", "c"]);
    }

    #[test]
    fn similarity_rules() {
        let src = vec![1.0, 0.0];
        let reference = vec![0.0, 1.0];
        let r = speaker_similarity_eval(&[(reference.clone(), src.clone(), reference.clone())]).unwrap();
        assert!(!r.per_triple[0].is_error);
        let r = speaker_similarity_eval(&[(src.clone(), src.clone(), reference.clone())]).unwrap();
        assert!(r.per_triple[0].is_error);
        let tie = speaker_similarity_eval(&[(vec![1.0, 1.0], src.clone(), reference.clone())]).unwrap();
        assert!(tie.per_triple[0].is_error);
        assert!(speaker_similarity_eval(&[(vec![0.0, 0.0], src, reference)]).is_err());
    }
}
