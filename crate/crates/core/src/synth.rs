//! Synthetic "speech" for smoke runs and tests: harmonic voices with a
//! per-speaker pitch and vocal-tract scale, where each word of the
//! transcript becomes a short vowel-like segment.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::manifest::{Gender, Manifest, Provenance, Record};
use crate::signal::{save_audio, Waveform};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub gender: Gender,
    pub f0_hz: f64,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
}

impl SyntheticSpeaker {
    /// Alternating female/male speakers with spread-out pitches.
    pub fn roster(n: usize) -> Vec<Self> {
        (0..n)
            .map(|i| {
                let female = i % 2 == 0;
                let rank = (i / 2) as f64;
                Self {
                    id: format!("spk{i:02}"),
                    gender: if female { Gender::Female } else { Gender::Male },
                    f0_hz: if female { 190.0 + 17.0 * rank } else { 95.0 + 11.0 * rank },
                    formant_scale: if female { 1.15 + 0.03 * rank } else { 0.9 + 0.03 * rank },
                }
            })
            .collect()
    }
}

const VOWELS: [(f64, f64); 6] = [(730.0, 1090.0), (270.0, 2290.0), (530.0, 1840.0), (570.0, 840.0), (300.0, 870.0), (640.0, 1190.0)];
const WORDS: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
];

fn word_vowels(word: &str) -> Vec<(f64, f64)> {
    let mut v: Vec<_> = word
        .bytes()
        .filter(|b| b"aeiouy".contains(b))
        .map(|b| VOWELS[b as usize % VOWELS.len()])
        .collect();
    v.push(VOWELS[word.len() % VOWELS.len()]);
    v
}

/// Render `transcript` in `speaker`'s voice at `sample_rate`.
pub fn synth_utterance(speaker: &SyntheticSpeaker, transcript: &str, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f32; (0.05 * sr) as usize];
    let mut phase = 0.0f64;
    for word in transcript.split_whitespace() {
        for (f1, f2) in word_vowels(word) {
            let dur = rng.random_range(0.08..0.14);
            let n = (dur * sr) as usize;
            let (f1, f2) = (f1 * speaker.formant_scale, f2 * speaker.formant_scale);
            let glide = rng.random_range(-0.08..0.08);
            for i in 0..n {
                let pos = i as f64 / n as f64;
                let f0 = speaker.f0_hz * (1.0 + glide * pos);
                phase += 2.0 * PI * f0 / sr;
                let mut v = 0.0;
                let mut h = 1;
                while (h as f64) * f0 < 0.45 * sr {
                    let fh = h as f64 * f0;
                    let env = resonance(fh, f1, 90.0) + 0.5 * resonance(fh, f2, 120.0);
                    v += env * (h as f64 * phase).sin() / (h as f64).sqrt();
                    h += 1;
                }
                let fade = (pos * 20.0).min(1.0) * ((1.0 - pos) * 20.0).min(1.0);
                out.push((0.08 * v * fade) as f32);
            }
        }
        out.extend(std::iter::repeat_n(0.0, (rng.random_range(0.03..0.06) * sr) as usize));
    }
    Waveform::new(out, sample_rate)
}

fn resonance(f: f64, center: f64, bandwidth: f64) -> f64 {
    let x = (f - center) / bandwidth;
    1.0 / (1.0 + x * x)
}

/// Random transcript of `n_words` from a small vocabulary.
pub fn random_transcript(n_words: usize, rng: &mut impl Rng) -> String {
    (0..n_words)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Write `n` utterances spread over `n_speakers` speakers into `dir` and
/// return their manifest (audio paths relative to `dir`).
pub fn write_corpus(
    dir: &Path,
    n: usize,
    n_speakers: usize,
    words: std::ops::RangeInclusive<usize>,
    sample_rate: u32,
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let speakers = SyntheticSpeaker::roster(n_speakers.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let spk = &speakers[i % speakers.len()];
        let n_words = rng.random_range(words.clone());
        let transcript = random_transcript(n_words, &mut rng);
        let w = synth_utterance(spk, &transcript, sample_rate, rng.random())?;
        let id = format!("utt{i:04}");
        let rel = format!("{id}.wav");
        save_audio(&dir.join(&rel), &w)?;
        records.push(Record {
            id,
            audio_path: rel.into(),
            speaker_id: spk.id.clone(),
            gender: spk.gender,
            language: "synthetic".into(),
            transcript,
            duration_s: w.duration_s(),
            provenance: Provenance::Original,
        });
    }
    let manifest = Manifest {
        records,
        base_dir: Some(dir.to_path_buf()),
    };
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
