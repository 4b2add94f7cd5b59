//! The conversion pipeline: chunking, style purity, normalization scope and
//! self-reconstruction with a trained tiny model.

mod common;

use std::sync::{Mutex, OnceLock};

use candle_core::DType;
use ndarray::{s, Array2};
use vcaug::bottleneck::NormalizationStats;
use vcaug::convert::{
    source_stats, ConversionObserver, ConversionRequest, ConvertConfig, Converter, Stage, Stitch, Utterance,
};
use vcaug::evalsuite::mean_bin_pearson;
use vcaug::features::{SpeechEncoderBackend, StandinEncoder};
use vcaug::model::{ModelConfig, VcModel};
use vcaug::signal::Waveform;
use vcaug::synth::{synth_utterance, SyntheticSpeaker};
use vcaug::vocoder::GriffinLim;

/// Stand-in encoder that records the length of every waveform it sees.
struct SpyBackend {
    inner: StandinEncoder,
    seen: Mutex<Vec<usize>>,
}

impl SpeechEncoderBackend for SpyBackend {
    fn name(&self) -> &str {
        "spy"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn encode_frames(&self, w: &Waveform) -> vcaug::Result<Array2<f32>> {
        self.seen.lock().unwrap().push(w.len());
        self.inner.encode_frames(w)
    }
}

#[derive(Default)]
struct Recorder {
    stages: Vec<Stage>,
    stats: Vec<(usize, NormalizationStats)>,
}

impl ConversionObserver for Recorder {
    fn stage(&mut self, stage: &Stage) {
        self.stages.push(stage.clone());
    }

    fn normalization_stats(&mut self, chunk: usize, stats: &NormalizationStats) {
        self.stats.push((chunk, stats.clone()));
    }
}

fn untrained() -> &'static (common::TinyStack, VcModel) {
    static CELL: OnceLock<(common::TinyStack, VcModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let stack = common::tiny_stack(2, 2, 21);
        let model = VcModel::new(&ModelConfig::tiny(stack.signal.n_mels, 7), DType::F32).unwrap();
        (stack, model)
    })
}

fn trained() -> &'static (common::TinyStack, VcModel) {
    static CELL: OnceLock<(common::TinyStack, VcModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let stack = common::tiny_stack(8, 4, 1);
        let model = common::trained_tiny(&stack, common::DESK_EPOCHS, common::DESK_LR);
        (stack, model)
    })
}

fn converter<'a>(
    stack: &'a common::TinyStack,
    model: &'a VcModel,
    backend: &'a dyn SpeechEncoderBackend,
    vocoder: &'a GriffinLim,
) -> Converter<'a> {
    Converter {
        model,
        quantizer: &stack.quantizer,
        backend,
        vocoder,
        signal: stack.signal.clone(),
        config: ConvertConfig::default(),
    }
}

/// Synthetic speech of exactly `seconds`, built from back-to-back
/// utterances of one speaker.
fn speech(seconds: f64, speaker: usize, seed: u64) -> Waveform {
    let rate = 16_000;
    let n = (seconds * rate as f64).round() as usize;
    let who = &SyntheticSpeaker::roster(speaker + 1)[speaker];
    let mut samples = Vec::with_capacity(n);
    let mut k = 0;
    while samples.len() < n {
        let w = synth_utterance(who, "ba di gu mo", rate, seed + k).unwrap();
        samples.extend_from_slice(&w.samples);
        k += 1;
    }
    samples.truncate(n);
    Waveform::new(samples, rate).unwrap()
}

fn utterance(id: &str, waveform: Waveform, transcript: &str) -> Utterance {
    Utterance {
        id: id.into(),
        waveform,
        transcript: transcript.into(),
    }
}

fn request<'a>(source: &'a Utterance, reference: &'a Utterance, chunk_s: f64) -> ConversionRequest<'a> {
    ConversionRequest {
        source,
        reference,
        chunk_s,
        stitch: Stitch::Concat,
    }
}

#[test]
fn fourteen_seconds_convert_in_two_chunks() {
    let (stack, model) = untrained();
    let vocoder = GriffinLim::new(&stack.signal, 4).unwrap();
    let conv = converter(stack, model, &stack.backend, &vocoder);
    let source = utterance("long", speech(14.0, 0, 1), "  Fünf   Wörter, bitte.\t");
    let reference = utterance("ref", speech(1.5, 1, 2), "");

    let mut rec = Recorder::default();
    let result = conv.convert_observed(&request(&source, &reference, 7.0), &mut rec).unwrap();
    assert_eq!(result.per_chunk_frames.len(), 2);
    assert_eq!(result.transcript.as_bytes(), source.transcript.as_bytes());
    assert_eq!(result.mel.n_frames(), result.per_chunk_frames.iter().sum::<usize>());
    assert!(result.real_time_factor.is_finite() && result.real_time_factor > 0.0);
    assert_eq!(rec.stages.first(), Some(&Stage::Style));
    assert_eq!(rec.stages.last(), Some(&Stage::Stitched));
    for c in 0..2 {
        let decoded = rec
            .stages
            .iter()
            .position(|s| matches!(s, Stage::Decoded { chunk, .. } if *chunk == c))
            .unwrap();
        let vocoded = rec.stages.iter().position(|s| *s == Stage::Vocoded { chunk: c }).unwrap();
        assert!(decoded < vocoded);
    }
}

#[test]
fn normalization_stats_come_from_the_whole_source() {
    let (stack, model) = untrained();
    let spy = SpyBackend {
        inner: stack.backend.clone(),
        seen: Mutex::new(Vec::new()),
    };
    let vocoder = GriffinLim::new(&stack.signal, 2).unwrap();
    let conv = converter(stack, model, &spy, &vocoder);
    let source = utterance("src", speech(2.5, 0, 3), "x");
    let reference = utterance("ref", speech(1.0, 1, 4), "");

    let mut rec = Recorder::default();
    conv.convert_observed(&request(&source, &reference, 1.0), &mut rec).unwrap();

    // One full-length pass for the statistics, then one per chunk.
    let seen = spy.seen.lock().unwrap().clone();
    assert_eq!(seen, vec![16_000, 40_000, 16_000, 16_000, 8_000]);
    assert_eq!(rec.stages.iter().filter(|s| **s == Stage::SourceStats).count(), 1);

    let full = source_stats(&source.waveform, "src", &stack.backend).unwrap();
    assert_eq!(rec.stats.iter().map(|(c, _)| *c).collect::<Vec<_>>(), vec![0, 1, 2]);
    for (_, stats) in &rec.stats {
        assert_eq!(stats, &full);
    }
}

#[test]
fn style_is_bit_identical_across_sources() {
    let (stack, model) = untrained();
    let vocoder = GriffinLim::new(&stack.signal, 2).unwrap();
    let conv = converter(stack, model, &stack.backend, &vocoder);
    let reference = utterance("ref", speech(1.2, 1, 5), "");
    let a = utterance("a", speech(0.8, 0, 6), "a");
    let b = utterance("b", speech(1.1, 2, 7), "b");
    let ra = conv.convert(&request(&a, &reference, 7.0)).unwrap();
    let rb = conv.convert(&request(&b, &reference, 7.0)).unwrap();
    let bits = |s: &[f32]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra.style.s), bits(&rb.style.s));
    assert_eq!(ra.style.reference_utterance_id, "ref");
    assert_eq!(bits(&conv.style(&reference).unwrap().s), bits(&ra.style.s));
}

#[test]
fn crossfade_overlaps_each_join() {
    let (stack, model) = untrained();
    let vocoder = GriffinLim::new(&stack.signal, 2).unwrap();
    let conv = converter(stack, model, &stack.backend, &vocoder);
    let source = utterance("src", speech(2.0, 0, 8), "");
    let reference = utterance("ref", speech(1.0, 1, 9), "");
    let plain = conv.convert(&request(&source, &reference, 1.0)).unwrap();
    let faded = conv
        .convert(&ConversionRequest {
            stitch: Stitch::Crossfade { ms: 10.0 },
            ..request(&source, &reference, 1.0)
        })
        .unwrap();
    assert_eq!(plain.per_chunk_frames, faded.per_chunk_frames);
    assert_eq!(plain.waveform.len() - faded.waveform.len(), 160);
}

#[test]
fn short_reference_is_rejected_with_the_minimum() {
    let (stack, model) = untrained();
    let vocoder = GriffinLim::new(&stack.signal, 2).unwrap();
    let conv = converter(stack, model, &stack.backend, &vocoder);
    let source = utterance("src", speech(1.0, 0, 10), "");
    let reference = utterance("tiny", speech(0.4, 1, 11), "");
    let err = conv.convert(&request(&source, &reference, 7.0)).unwrap_err();
    assert!(matches!(err, vcaug::Error::Validation(_)), "{err}");
    let min = model.min_reference_frames();
    assert!(err.to_string().contains(&format!("at least {min}")), "{err}");
}

#[test]
fn self_conversion_reconstructs_the_input() {
    let (stack, model) = trained();
    let vocoder = GriffinLim::new(&stack.signal, 4).unwrap();
    let conv = converter(stack, model, &stack.backend, &vocoder);
    let mut rs = Vec::new();
    for (id, w) in &stack.waves {
        let u = utterance(id, w.clone(), "");
        let result = conv.convert(&request(&u, &u, 7.0)).unwrap();
        let input = stack.mel.melspec(w).unwrap().frames;
        let out = &result.mel.frames;
        let n = input.nrows().min(out.nrows());
        let r = mean_bin_pearson(&input.slice(s![..n, ..]).to_owned(), &out.slice(s![..n, ..]).to_owned());
        eprintln!(
            "{id}: {} input frames, {} output frames, r = {r:.3}",
            input.nrows(),
            out.nrows()
        );
        assert_eq!(result.truncated_chunks, 0, "{id}: decoder never predicted a stop");
        rs.push(r);
    }
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    assert!(mean > 0.5, "mean per-bin Pearson r = {mean:.3}");
}
