//! Dataset augmentation: voice conversion against a reference pool,
//! SpecAugment, and the two chained (conversion first, then masking).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::{Utterance, VoiceConverter};
use crate::error::{Error, Result};
use crate::manifest::{Gender, Manifest, Provenance, Record};
use crate::signal::{save_audio, MelExtractor, MelSpectrogram, Waveform};
use crate::vocoder::{vocode, VocoderBackend};

/// Mask and warp settings. Defaults are SpecAugment's LibriSpeech-double
/// (LD) policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    /// Largest frequency-mask width F, in mel bins.
    pub freq_mask_param: usize,
    pub n_freq_masks: usize,
    /// Largest time-mask width T, in frames.
    pub time_mask_param: usize,
    pub n_time_masks: usize,
    /// Time masks cover at most this fraction of the frames (p).
    pub time_mask_ratio: f64,
    /// Largest time-warp shift W, in frames; 0 disables warping.
    pub time_warp_param: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            freq_mask_param: 27,
            n_freq_masks: 2,
            time_mask_param: 100,
            n_time_masks: 2,
            time_mask_ratio: 1.0,
            time_warp_param: 80,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            freq_mask_param: 0,
            n_freq_masks: 0,
            time_mask_param: 0,
            n_time_masks: 0,
            time_mask_ratio: 0.0,
            time_warp_param: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time_mask_ratio) {
            return Err(Error::config("augment.specaugment.time_mask_ratio must be in [0, 1]"));
        }
        Ok(())
    }
}

/// What [`spec_augment`] did: `(start, width)` of every mask and the warp
/// `(anchor, shift)` when one was applied.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MaskReport {
    pub freq_masks: Vec<(usize, usize)>,
    pub time_masks: Vec<(usize, usize)>,
    pub warp: Option<(usize, i64)>,
    pub fill_value: f32,
}

/// Piecewise-linear time warp moving frame `anchor` to `anchor + shift`,
/// with the endpoints fixed; output frames interpolate linearly.
fn time_warp(frames: &Array2<f32>, anchor: usize, shift: i64) -> Array2<f32> {
    let t = frames.nrows();
    let last = (t - 1) as f64;
    let a = anchor as f64;
    let b = a + shift as f64;
    let mut out = Array2::zeros(frames.raw_dim());
    for j in 0..t {
        let y = j as f64;
        let x = if y <= b { y * a / b } else { a + (y - b) * (last - a) / (last - b) };
        let x = x.clamp(0.0, last);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(t - 1);
        let w = (x - i0 as f64) as f32;
        for k in 0..frames.ncols() {
            out[[j, k]] = frames[[i0, k]] * (1.0 - w) + frames[[i1, k]] * w;
        }
    }
    out
}

/// Time warp (when the spectrogram is long enough), then frequency masks,
/// then time masks. Masked cells take the mean of the spectrogram as it
/// was just before masking.
pub fn spec_augment(mel: &MelSpectrogram, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> (MelSpectrogram, MaskReport) {
    let (t, n_mels) = mel.frames.dim();
    let mut frames = mel.frames.clone();
    let mut report = MaskReport::default();

    let w = cfg.time_warp_param;
    if w > 0 && t > 2 * w + 1 {
        let anchor = rng.random_range(w..t - w);
        let shift = rng.random_range(-(w as i64)..=w as i64);
        if shift != 0 {
            frames = time_warp(&frames, anchor, shift);
        }
        report.warp = Some((anchor, shift));
    }

    let fill = (frames.iter().map(|&v| v as f64).sum::<f64>() / frames.len() as f64) as f32;
    report.fill_value = fill;

    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=cfg.freq_mask_param.min(n_mels));
        let start = rng.random_range(0..=n_mels - width);
        frames.slice_mut(ndarray::s![.., start..start + width]).fill(fill);
        report.freq_masks.push((start, width));
    }
    let max_t = cfg.time_mask_param.min((cfg.time_mask_ratio * t as f64).floor() as usize).min(t);
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(0..=max_t);
        let start = rng.random_range(0..=t - width);
        frames.slice_mut(ndarray::s![start..start + width, ..]).fill(fill);
        report.time_masks.push((start, width));
    }
    let out = MelSpectrogram {
        frames,
        signature: mel.signature,
    };
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    Vc,
    Specaug,
    VcThenSpecaug,
}

impl AugmentMethod {
    pub fn uses_conversion(self) -> bool {
        matches!(self, AugmentMethod::Vc | AugmentMethod::VcThenSpecaug)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderFilter {
    #[default]
    None,
    FemaleOnly,
    MaleOnly,
}

impl GenderFilter {
    pub fn admits(self, g: Gender) -> bool {
        match self {
            GenderFilter::None => true,
            GenderFilter::FemaleOnly => g == Gender::Female,
            GenderFilter::MaleOnly => g == Gender::Male,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPlan {
    pub method: AugmentMethod,
    /// Generated records as a percentage of the original count.
    pub ratio_percent: u32,
    /// Reference manifest for conversion; the input manifest when absent.
    #[serde(default)]
    pub reference_pool: Option<PathBuf>,
    #[serde(default)]
    pub gender_filter: GenderFilter,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.ratio_percent == 0 {
            return Err(Error::config("augmentation ratio must be positive"));
        }
        Ok(())
    }

    pub fn n_generated(&self, n_original: usize) -> usize {
        (self.ratio_percent as f64 / 100.0 * n_original as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub specaugment: SpecAugmentConfig,
    /// Worker threads for per-record generation; 0 uses every core.
    pub workers: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            specaugment: SpecAugmentConfig::default(),
            workers: 0,
        }
    }
}

/// Records of `pool` that pass `filter`; empty is a configuration error.
pub fn filter_pool(pool: &Manifest, filter: GenderFilter) -> Result<Vec<&Record>> {
    let admitted: Vec<&Record> = pool.records.iter().filter(|r| filter.admits(r.gender)).collect();
    if admitted.is_empty() {
        return Err(Error::config(format!(
            "reference pool has no records left after gender filter {filter:?} ({} records before filtering)",
            pool.len()
        )));
    }
    Ok(admitted)
}

/// Uniform draw from the filtered pool.
pub fn select_reference<'a>(pool: &'a Manifest, filter: GenderFilter, rng: &mut impl Rng) -> Result<&'a Record> {
    let admitted = filter_pool(pool, filter)?;
    Ok(admitted[rng.random_range(0..admitted.len())])
}

/// Events reported per generated record, in the order they happen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentEvent {
    Converted,
    MelComputed,
    SpecAugmented,
    Vocoded,
}

pub trait AugmentObserver: Sync {
    fn event(&self, record_id: &str, event: AugmentEvent);
}

pub struct NoAugmentObserver;

impl AugmentObserver for NoAugmentObserver {
    fn event(&self, _: &str, _: AugmentEvent) {}
}

pub struct AugmentContext<'a> {
    /// Needed for the conversion methods.
    pub converter: Option<&'a dyn VoiceConverter>,
    pub vocoder: &'a dyn VocoderBackend,
    pub mel: &'a MelExtractor,
    pub config: &'a AugmentConfig,
}

struct Job<'a> {
    index: usize,
    source: &'a Record,
    reference: Option<&'a Record>,
    seed: u64,
}

const AUDIO_DIR: &str = "audio";

fn generated_id(source: &str, method: AugmentMethod, index: usize) -> String {
    let tag = match method {
        AugmentMethod::Vc => "vc",
        AugmentMethod::Specaug => "sa",
        AugmentMethod::VcThenSpecaug => "vcsa",
    };
    format!("{source}-{tag}{index:05}")
}

/// Expand `original` by `plan`, writing generated audio under `out_dir`.
/// The result lists every original record (in input order, paths rebased
/// to `out_dir`) followed by the generated records sorted by id.
pub fn augment_dataset(
    original: &Manifest,
    pool: &Manifest,
    plan: &AugmentPlan,
    ctx: &AugmentContext<'_>,
    out_dir: &Path,
    observer: &dyn AugmentObserver,
) -> Result<Manifest> {
    plan.validate()?;
    ctx.config.specaugment.validate()?;
    if original.is_empty() {
        return Err(Error::validation("input manifest is empty"));
    }
    if plan.method.uses_conversion() && ctx.converter.is_none() {
        return Err(Error::config(format!(
            "method {:?} needs a trained checkpoint",
            plan.method
        )));
    }
    let admitted = if plan.method.uses_conversion() {
        filter_pool(pool, plan.gender_filter)?
    } else {
        Vec::new()
    };

    let n = original.len();
    let n_gen = plan.n_generated(n);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let jobs: Vec<Job<'_>> = (0..n_gen)
        .map(|index| {
            let reference = (!admitted.is_empty()).then(|| admitted[rng.random_range(0..admitted.len())]);
            Job {
                index,
                source: &original.records[index % n],
                reference,
                seed: rng.random(),
            }
        })
        .collect();

    let audio_dir = out_dir.join(AUDIO_DIR);
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let run = || -> Result<Vec<Record>> {
        jobs.par_iter()
            .map(|job| generate(original, pool, plan, ctx, job, &audio_dir, observer))
            .collect()
    };
    let mut generated = if ctx.config.workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(ctx.config.workers)
            .build()
            .map_err(|e| Error::config(format!("augment.workers: {e}")))?
            .install(run)?
    };
    generated.sort_by(|a, b| a.id.cmp(&b.id));

    let mut out = original.rebased(out_dir);
    out.records.extend(generated);
    out.validate()?;
    Ok(out)
}

fn generate(
    original: &Manifest,
    pool: &Manifest,
    plan: &AugmentPlan,
    ctx: &AugmentContext<'_>,
    job: &Job<'_>,
    audio_dir: &Path,
    observer: &dyn AugmentObserver,
) -> Result<Record> {
    let rate = ctx.mel.config().sample_rate;
    let id = generated_id(&job.source.id, plan.method, job.index);
    if original.get(&id).is_some() {
        return Err(Error::validation(format!("generated id '{id}' collides with an input record")));
    }
    let source = Utterance {
        id: job.source.id.clone(),
        waveform: original.load_waveform(job.source, rate)?,
        transcript: job.source.transcript.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);

    let converted = match (plan.method.uses_conversion(), job.reference, ctx.converter) {
        (true, Some(r), Some(conv)) => {
            let reference = Utterance {
                id: r.id.clone(),
                waveform: pool.load_waveform(r, rate)?,
                transcript: r.transcript.clone(),
            };
            let w = conv.convert_utterance(&source, &reference)?;
            observer.event(&id, AugmentEvent::Converted);
            w
        }
        (true, ..) => return Err(Error::config("conversion requested without a converter or reference")),
        (false, ..) => source.waveform.clone(),
    };

    let waveform = if matches!(plan.method, AugmentMethod::Specaug | AugmentMethod::VcThenSpecaug) {
        specaug_waveform(&converted, ctx, &id, &mut rng, observer)?
    } else {
        converted
    };

    let rel = PathBuf::from(AUDIO_DIR).join(format!("{id}.wav"));
    save_audio(&audio_dir.join(format!("{id}.wav")), &waveform)?;
    let (speaker_id, gender) = match job.reference {
        Some(r) => (r.speaker_id.clone(), r.gender),
        None => (job.source.speaker_id.clone(), job.source.gender),
    };
    let provenance = match (plan.method, job.reference) {
        (AugmentMethod::Vc, Some(r)) => Provenance::Vc {
            source_id: job.source.id.clone(),
            reference_id: r.id.clone(),
            seed: job.seed,
        },
        (AugmentMethod::VcThenSpecaug, Some(r)) => Provenance::Chain {
            source_id: job.source.id.clone(),
            reference_id: r.id.clone(),
            seed: job.seed,
        },
        _ => Provenance::Specaug {
            source_id: job.source.id.clone(),
            seed: job.seed,
        },
    };
    Ok(Record {
        id,
        audio_path: rel,
        speaker_id,
        gender,
        language: job.source.language.clone(),
        transcript: job.source.transcript.clone(),
        duration_s: waveform.duration_s(),
        provenance,
    })
}

/// Mel of `w`, masked, then vocoded back to audio.
fn specaug_waveform(
    w: &Waveform,
    ctx: &AugmentContext<'_>,
    id: &str,
    rng: &mut ChaCha8Rng,
    observer: &dyn AugmentObserver,
) -> Result<Waveform> {
    let mel = ctx.mel.melspec(w)?;
    observer.event(id, AugmentEvent::MelComputed);
    let (masked, _) = spec_augment(&mel, &ctx.config.specaugment, rng);
    observer.event(id, AugmentEvent::SpecAugmented);
    let out = vocode(&masked, ctx.vocoder)?;
    observer.event(id, AugmentEvent::Vocoded);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SpectrogramSignature;

    fn mel(t: usize, n: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array2::from_shape_simple_fn((t, n), || rng.random_range(-10.0f32..0.0));
        MelSpectrogram::new(
            frames,
            SpectrogramSignature {
                sample_rate: 16_000,
                hop_length: 160,
                n_mels: n,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_config_is_identity() {
        let m = mel(300, 80, 1);
        let (out, rep) = spec_augment(&m, &SpecAugmentConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, m);
        assert!(rep.warp.is_none());
    }

    #[test]
    fn masks_respect_widths_and_fill() {
        let cfg = SpecAugmentConfig {
            time_warp_param: 0,
            ..SpecAugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..50 {
            let m = mel(250, 80, s);
            let mean = (m.frames.iter().map(|&v| v as f64).sum::<f64>() / m.frames.len() as f64) as f32;
            let (out, rep) = spec_augment(&m, &cfg, &mut rng);
            assert_eq!(out.frames.dim(), m.frames.dim());
            assert_eq!(rep.fill_value, mean);
            assert!(rep.freq_masks.iter().all(|&(_, w)| w <= 27));
            assert!(rep.time_masks.iter().all(|&(_, w)| w <= 100));
            let masked_bins = (0..80).filter(|&k| rep.freq_masks.iter().any(|&(s, w)| k >= s && k < s + w)).count();
            assert!(masked_bins <= 54);
            for ((t, k), &v) in out.frames.indexed_iter() {
                let masked = rep.freq_masks.iter().any(|&(s, w)| k >= s && k < s + w)
                    || rep.time_masks.iter().any(|&(s, w)| t >= s && t < s + w);
                if masked {
                    assert_eq!(v, mean);
                } else {
                    assert_eq!(v, m.frames[[t, k]]);
                }
            }
        }
    }

    #[test]
    fn time_masks_bounded_by_ratio() {
        let cfg = SpecAugmentConfig {
            time_mask_ratio: 0.1,
            time_warp_param: 0,
            ..SpecAugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (_, rep) = spec_augment(&mel(120, 80, 0), &cfg, &mut rng);
            assert!(rep.time_masks.iter().all(|&(_, w)| w <= 12));
        }
    }

    #[test]
    fn warp_fixes_endpoints_and_moves_anchor() {
        let t = 50;
        let frames = Array2::from_shape_fn((t, 1), |(i, _)| i as f32);
        let warped = time_warp(&frames, 20, 5);
        assert_eq!(warped[[0, 0]], 0.0);
        assert_eq!(warped[[t - 1, 0]], (t - 1) as f32);
        assert!((warped[[25, 0]] - 20.0).abs() < 1e-5);
        assert!(warped.column(0).to_vec().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn warp_applies_on_long_inputs_only() {
        let cfg = SpecAugmentConfig {
            n_freq_masks: 0,
            n_time_masks: 0,
            ..SpecAugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, rep) = spec_augment(&mel(100, 8, 0), &cfg, &mut rng);
        assert!(rep.warp.is_none());
        assert_eq!(out.frames, mel(100, 8, 0).frames);
        let (_, rep) = spec_augment(&mel(400, 8, 0), &cfg, &mut rng);
        let (anchor, shift) = rep.warp.unwrap();
        assert!((80..320).contains(&anchor));
        assert!(shift.abs() <= 80);
    }
}
