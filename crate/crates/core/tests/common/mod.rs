#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcaug::nn::ParamStore;

/// Worst relative error between backprop gradients and central finite
/// differences over up to `per_tensor` coordinates of every parameter.
///
/// `loss` must rebuild the forward pass from the current parameter values.
pub fn max_gradient_error(
    store: &ParamStore,
    per_tensor: usize,
    step: f64,
    seed: u64,
    loss: &dyn Fn() -> Tensor,
) -> (f64, usize) {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in store.vars() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = flat(var.as_tensor());
        let n = base.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let numeric = {
                let plus = eval_with(var, &base, i, step, loss);
                let minus = eval_with(var, &base, i, -step, loss);
                (plus - minus) / (2.0 * step)
            };
            set_flat(var, &base);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
            if err > worst {
                worst = err;
                if err > 1e-3 {
                    eprintln!("{name}[{i}]: analytic {a:e} numeric {numeric:e}");
                }
            }
            checked += 1;
        }
    }
    (worst, checked)
}

fn eval_with(var: &Var, base: &[f64], i: usize, delta: f64, loss: &dyn Fn() -> Tensor) -> f64 {
    let mut p = base.to_vec();
    p[i] += delta;
    set_flat(var, &p);
    loss().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn set_flat(var: &Var, values: &[f64]) {
    let t = Tensor::from_vec(values.to_vec(), var.shape(), var.device())
        .unwrap()
        .to_dtype(var.dtype())
        .unwrap();
    var.set(&t).unwrap();
}

/// A desk-scale stack: stand-in encoder, a small quantizer fit on the
/// synthetic utterances themselves, and training items for each.
pub struct TinyStack {
    pub signal: vcaug::signal::SignalConfig,
    pub backend: vcaug::features::StandinEncoder,
    pub quantizer: vcaug::bottleneck::Quantizer,
    pub mel: vcaug::signal::MelExtractor,
    pub waves: Vec<(String, vcaug::signal::Waveform)>,
    pub items: Vec<vcaug::training::TrainItem>,
}

pub fn tiny_stack(n: usize, n_speakers: usize, seed: u64) -> TinyStack {
    use vcaug::bottleneck::{fit_quantizer, BottleneckConfig};
    use vcaug::features::encode;
    use vcaug::synth::{random_transcript, synth_utterance, SyntheticSpeaker};

    let signal = vcaug::signal::SignalConfig::default();
    let backend = vcaug::features::StandinEncoder::new(&signal, 2, 0x00c0_ffee).unwrap();
    let mel = vcaug::signal::MelExtractor::new(&signal).unwrap();
    let speakers = SyntheticSpeaker::roster(n_speakers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<_> = (0..n)
        .map(|i| {
            let text = random_transcript(rng.random_range(2..=3), &mut rng);
            let w = synth_utterance(&speakers[i % n_speakers], &text, signal.sample_rate, rng.random()).unwrap();
            (format!("utt{i}"), w)
        })
        .collect();
    let feats: Vec<_> = waves.iter().map(|(id, w)| encode(w, &backend, id).unwrap()).collect();
    let cfg = BottleneckConfig {
        k: 16,
        ..BottleneckConfig::default()
    };
    let quantizer = fit_quantizer(&feats, &cfg).unwrap();
    let items = waves
        .iter()
        .map(|(id, w)| vcaug::training::prepare_item(id, w, &backend, &quantizer, &mel).unwrap())
        .collect();
    TinyStack {
        signal,
        backend,
        quantizer,
        mel,
        waves,
        items,
    }
}

/// Desk-scale training budget: enough full-batch steps on eight short
/// utterances for attention to lock onto the diagonal and the stop token
/// to fire. The higher peak rate stands in for the paper's far longer run.
pub const DESK_EPOCHS: usize = 400;
pub const DESK_LR: f64 = 2e-3;

/// The tiny model trained on `stack` for `epochs` full-batch epochs.
pub fn trained_tiny(stack: &TinyStack, epochs: usize, max_lr: f64) -> vcaug::model::VcModel {
    use vcaug::model::{ModelConfig, VcModel};
    use vcaug::training::{TrainConfig, Trainer};
    let cfg = TrainConfig {
        epochs,
        max_lr,
        ..TrainConfig::default()
    };
    let model = VcModel::new(&ModelConfig::tiny(stack.signal.n_mels, 7), DType::F32).unwrap();
    let mut t = Trainer::new(model, &cfg, stack.items.len()).unwrap();
    t.run(&stack.items, &[], None, None, None).unwrap();
    t.model
}
