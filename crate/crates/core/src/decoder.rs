//! Autoregressive mel decoder with location-sensitive attention and a
//! stop-token head, plus the reconstruction loss.

use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::content::ContentSequence;
use crate::error::{Error, Result};
use crate::nn::{self, Conv1d, LayerNorm, LstmCell, LstmState, ParamStore};
use crate::signal::{MelSpectrogram, SpectrogramSignature};
use crate::style::StyleVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    /// Keep pre-net dropout on during free-running decoding, drawn from a
    /// fixed-seed generator so outputs stay deterministic.
    pub prenet_dropout_at_inference: bool,
    pub attention_rnn_dim: usize,
    pub decoder_rnn_dim: usize,
    pub decoder_rnn_layers: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    pub stop_weight: f64,
    /// Weight on the positive (final-frame) class of the stop target.
    pub stop_pos_weight: f64,
    pub stop_threshold: f64,
    /// Free-running decoding stops after `max_steps_factor * T'` frames.
    pub max_steps_factor: f64,
    /// Weight of the diagonal attention prior in the training loss; 0
    /// disables it. Attention learns to align in a few hundred steps with
    /// it instead of tens of thousands without.
    pub guided_attention_weight: f64,
    /// Width of the diagonal band, as a fraction of the sequence lengths.
    pub guided_attention_sigma: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            prenet_dims: vec![256, 256],
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: true,
            attention_rnn_dim: 1024,
            decoder_rnn_dim: 1024,
            decoder_rnn_layers: 2,
            attention_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            postnet_channels: 512,
            postnet_kernel: 5,
            postnet_layers: 5,
            stop_weight: 1.0,
            stop_pos_weight: 5.0,
            stop_threshold: 0.5,
            max_steps_factor: 2.0,
            guided_attention_weight: 0.0,
            guided_attention_sigma: 0.2,
        }
    }
}

impl DecoderConfig {
    /// Hidden widths of 32 and a small location filter bank, for tests and
    /// desk-scale runs on a CPU.
    pub fn tiny() -> Self {
        Self {
            prenet_dims: vec![32, 32],
            attention_rnn_dim: 32,
            decoder_rnn_dim: 32,
            attention_dim: 32,
            location_filters: 8,
            location_kernel: 15,
            postnet_channels: 32,
            guided_attention_weight: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prenet_dims.is_empty() || self.prenet_dims.contains(&0) {
            return Err(Error::config("decoder.prenet_dims must be non-empty and positive"));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::config("decoder.prenet_dropout must be in [0, 1)"));
        }
        if self.decoder_rnn_layers == 0 || self.postnet_layers < 2 {
            return Err(Error::config("decoder needs >= 1 decoder RNN layer and >= 2 postnet layers"));
        }
        if self.location_kernel % 2 == 0 || self.postnet_kernel % 2 == 0 {
            return Err(Error::config("decoder kernel sizes must be odd"));
        }
        if self.attention_rnn_dim == 0
            || self.decoder_rnn_dim == 0
            || self.attention_dim == 0
            || self.location_filters == 0
            || self.postnet_channels == 0
        {
            return Err(Error::config("decoder widths must be positive"));
        }
        if !(self.guided_attention_weight >= 0.0) || !(self.guided_attention_sigma > 0.0) {
            return Err(Error::config("decoder.guided_attention_weight must be >= 0 and sigma > 0"));
        }
        if !(self.max_steps_factor > 0.0) || !(self.stop_weight >= 0.0) || !(self.stop_pos_weight > 0.0) {
            return Err(Error::config("decoder.max_steps_factor and stop weights must be positive"));
        }
        Ok(())
    }
}

const INFERENCE_DROPOUT_SEED: u64 = 0x5eed_d40b;

#[derive(Debug, Clone)]
pub struct Decoder {
    prenet: Vec<Linear>,
    prenet_dropout: f64,
    prenet_dropout_at_inference: bool,
    attention_rnn: LstmCell,
    query_proj: Linear,
    memory_proj: Linear,
    location_conv: Conv1d,
    location_proj: Linear,
    energy: Linear,
    decoder_rnns: Vec<LstmCell>,
    mel_proj: Linear,
    stop_proj: Linear,
    postnet: Vec<(Conv1d, Option<LayerNorm>)>,
    n_mels: usize,
    input_dim: usize,
    stop_threshold: f64,
    max_steps_factor: f64,
}

/// Decoder outputs for a batch.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Post-net refined mel, `[B, T_out, n_mels]`.
    pub mel: Tensor,
    /// Decoder frames before the post-net; these are what gets fed back.
    pub mel_pre: Tensor,
    /// Stop logits, `[B, T_out]`.
    pub stop_logits: Tensor,
    /// Attention weights, `[B, T_out, T']`; rows sum to 1.
    pub alignment: Tensor,
    /// Free-running decoding hit its step limit without a stop signal.
    pub truncated: bool,
}

impl DecoderOutput {
    pub fn n_frames(&self) -> Result<usize> {
        Ok(self.mel.dim(1)?)
    }

    pub fn stop_probs(&self) -> Result<Vec<f64>> {
        nn::to_vec_f64(&candle_nn::ops::sigmoid(&self.stop_logits)?)
    }

    /// Mel of batch item `b`.
    pub fn mel_spectrogram(&self, b: usize, signature: SpectrogramSignature) -> Result<MelSpectrogram> {
        let m = self.mel.get(b)?;
        MelSpectrogram::new(nn::to_array2(&m)?, signature)
    }

    pub fn alignment_matrix(&self, b: usize) -> Result<Array2<f32>> {
        nn::to_array2(&self.alignment.get(b)?)
    }
}

struct StepState {
    attention: LstmState,
    decoders: Vec<LstmState>,
    context: Tensor,
    alignment: Tensor,
    cumulative: Tensor,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, input_dim: usize, n_mels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut prenet = Vec::new();
        let mut prev = n_mels;
        for (i, &d) in cfg.prenet_dims.iter().enumerate() {
            prenet.push(store.linear(&format!("decoder.prenet{i}"), prev, d, true)?);
            prev = d;
        }
        let attention_rnn = store.lstm("decoder.attention_rnn", prev + input_dim, cfg.attention_rnn_dim)?;
        let query_proj = store.linear("decoder.query_proj", cfg.attention_rnn_dim, cfg.attention_dim, false)?;
        let memory_proj = store.linear("decoder.memory_proj", input_dim, cfg.attention_dim, false)?;
        let location_conv = store.conv1d(
            "decoder.location_conv",
            2,
            cfg.location_filters,
            cfg.location_kernel,
            1,
            false,
        )?;
        let location_proj = store.linear("decoder.location_proj", cfg.location_filters, cfg.attention_dim, false)?;
        let energy = store.linear("decoder.energy", cfg.attention_dim, 1, false)?;
        let mut decoder_rnns = Vec::new();
        let mut prev = cfg.attention_rnn_dim + input_dim;
        for i in 0..cfg.decoder_rnn_layers {
            decoder_rnns.push(store.lstm(&format!("decoder.rnn{i}"), prev, cfg.decoder_rnn_dim)?);
            prev = cfg.decoder_rnn_dim;
        }
        let mel_proj = store.linear("decoder.mel_proj", cfg.decoder_rnn_dim + input_dim, n_mels, true)?;
        let stop_proj = store.linear("decoder.stop_proj", cfg.decoder_rnn_dim + input_dim, 1, true)?;
        let mut postnet = Vec::new();
        for i in 0..cfg.postnet_layers {
            let last = i + 1 == cfg.postnet_layers;
            let cin = if i == 0 { n_mels } else { cfg.postnet_channels };
            let cout = if last { n_mels } else { cfg.postnet_channels };
            let conv = store.conv1d(&format!("decoder.postnet{i}"), cin, cout, cfg.postnet_kernel, 1, true)?;
            let norm = if last {
                None
            } else {
                Some(store.layer_norm(&format!("decoder.postnet_norm{i}"), cout)?)
            };
            postnet.push((conv, norm));
        }
        Ok(Self {
            prenet,
            prenet_dropout: cfg.prenet_dropout,
            prenet_dropout_at_inference: cfg.prenet_dropout_at_inference,
            attention_rnn,
            query_proj,
            memory_proj,
            location_conv,
            location_proj,
            energy,
            decoder_rnns,
            mel_proj,
            stop_proj,
            postnet,
            n_mels,
            input_dim,
            stop_threshold: cfg.stop_threshold,
            max_steps_factor: cfg.max_steps_factor,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn max_steps(&self, memory_len: usize) -> usize {
        ((self.max_steps_factor * memory_len as f64).floor() as usize).max(1)
    }

    fn prenet_forward(&self, x: &Tensor, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.prenet {
            h = layer.forward(&h)?.relu()?;
            h = nn::dropout(&h, self.prenet_dropout, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    fn initial_state(&self, memory: &Tensor) -> Result<StepState> {
        let (b, t, d) = memory.dims3()?;
        let zeros = |shape: (usize, usize)| Tensor::zeros(shape, memory.dtype(), memory.device());
        Ok(StepState {
            attention: self.attention_rnn.zero_state(b, memory)?,
            decoders: self
                .decoder_rnns
                .iter()
                .map(|r| r.zero_state(b, memory))
                .collect::<Result<_>>()?,
            context: zeros((b, d))?,
            // Attention "was" on the first frame: gives the location
            // features an anchor to shift forward from.
            alignment: Tensor::cat(&[Tensor::ones((b, 1), memory.dtype(), memory.device())?, zeros((b, t - 1))?], 1)?,
            cumulative: zeros((b, t))?,
        })
    }

    /// One decoder step. Returns `(mel_frame [B, n_mels], stop_logit [B])`.
    fn step(
        &self,
        prev_frame: &Tensor,
        memory: &Tensor,
        processed_memory: &Tensor,
        st: &mut StepState,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor)> {
        let pre = self.prenet_forward(prev_frame, rng)?;
        let att_in = Tensor::cat(&[&pre, &st.context], 1)?;
        st.attention = self.attention_rnn.step(&att_in, &st.attention)?;

        // location-sensitive attention
        let query = self.query_proj.forward(&st.attention.h)?.unsqueeze(1)?;
        let loc_in = Tensor::stack(&[&st.alignment, &st.cumulative], 1)?;
        let loc = self.location_conv.forward(&loc_in)?;
        let loc = self.location_proj.forward(&nn::swap_time_channels(&loc)?)?;
        let hidden = processed_memory.broadcast_add(&query)?.add(&loc)?.tanh()?;
        let energies = self.energy.forward(&hidden)?.squeeze(D::Minus1)?;
        let alignment = candle_nn::ops::softmax(&energies, D::Minus1)?;
        st.context = alignment.unsqueeze(1)?.matmul(memory)?.squeeze(1)?;
        st.cumulative = (&st.cumulative + &alignment)?;
        st.alignment = alignment;

        let mut x = Tensor::cat(&[&st.attention.h, &st.context], 1)?;
        for (rnn, state) in self.decoder_rnns.iter().zip(st.decoders.iter_mut()) {
            *state = rnn.step(&x, state)?;
            x = state.h.clone();
        }
        let proj_in = Tensor::cat(&[&x, &st.context], 1)?;
        let frame = self.mel_proj.forward(&proj_in)?;
        let stop = self.stop_proj.forward(&proj_in)?.squeeze(1)?;
        Ok((frame, stop))
    }

    fn postnet_forward(&self, mel: &Tensor) -> Result<Tensor> {
        let mut h = nn::swap_time_channels(mel)?;
        for (conv, norm) in &self.postnet {
            let y = conv.forward(&h)?;
            h = match norm {
                Some(norm) => {
                    let y = norm.forward(&nn::swap_time_channels(&y)?)?.tanh()?;
                    nn::swap_time_channels(&y)?
                }
                None => y,
            };
        }
        Ok((mel + nn::swap_time_channels(&h)?)?)
    }

    /// Decode from fused content `[B, T', D]`.
    ///
    /// With `teacher` (`[B, T, n_mels]`) the decoder is teacher-forced for
    /// exactly `T` steps. Without it, decoding runs until every batch item's
    /// stop probability exceeds the threshold or `max_steps` frames.
    /// `dropout_rng` enables pre-net dropout (training only).
    pub fn forward(
        &self,
        memory: &Tensor,
        teacher: Option<&Tensor>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderOutput> {
        let (b, t_mem, d) = memory.dims3()?;
        if t_mem == 0 {
            return Err(Error::validation("decoder input is empty"));
        }
        if d != self.input_dim {
            return Err(Error::validation(format!(
                "decoder expects {}-d input, got {d}",
                self.input_dim
            )));
        }
        let processed_memory = self.memory_proj.forward(memory)?;
        let mut st = self.initial_state(memory)?;
        let mut prev = Tensor::zeros((b, self.n_mels), memory.dtype(), memory.device())?;
        let mut frames = Vec::new();
        let mut stops = Vec::new();
        let mut aligns = Vec::new();
        let mut truncated = false;

        match teacher {
            Some(target) => {
                let (tb, t_out, n) = target.dims3()?;
                if tb != b || n != self.n_mels {
                    return Err(Error::validation(format!(
                        "teacher mel is [{tb}, {t_out}, {n}], decoder needs [{b}, T, {}]",
                        self.n_mels
                    )));
                }
                for t in 0..t_out {
                    let (frame, stop) = self.step(&prev, memory, &processed_memory, &mut st, &mut dropout_rng)?;
                    frames.push(frame);
                    stops.push(stop);
                    aligns.push(st.alignment.clone());
                    prev = target.narrow(1, t, 1)?.squeeze(1)?;
                }
            }
            None => {
                let mut inference_rng = ChaCha8Rng::seed_from_u64(INFERENCE_DROPOUT_SEED);
                let mut rng = match dropout_rng.as_deref_mut() {
                    Some(r) => Some(r),
                    None if self.prenet_dropout_at_inference => Some(&mut inference_rng),
                    None => None,
                };
                let max_steps = self.max_steps(t_mem);
                let mut done = vec![false; b];
                loop {
                    let (frame, stop) = self.step(&prev, memory, &processed_memory, &mut st, &mut rng)?;
                    let probs = nn::to_vec_f64(&candle_nn::ops::sigmoid(&stop)?)?;
                    for (d, p) in done.iter_mut().zip(&probs) {
                        *d |= *p > self.stop_threshold;
                    }
                    prev = frame.detach();
                    frames.push(frame);
                    stops.push(stop);
                    aligns.push(st.alignment.clone());
                    if done.iter().all(|&d| d) {
                        break;
                    }
                    if frames.len() >= max_steps {
                        truncated = true;
                        break;
                    }
                }
            }
        }
        let mel_pre = Tensor::stack(&frames, 1)?;
        let mel = self.postnet_forward(&mel_pre)?;
        Ok(DecoderOutput {
            mel,
            mel_pre,
            stop_logits: Tensor::stack(&stops, 1)?,
            alignment: Tensor::stack(&aligns, 1)?,
            truncated,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionLoss {
    /// Mean squared error of the post-net mel.
    pub l2_term: f64,
    /// The same error on the pre-post-net frames. Training on it keeps the
    /// fed-back frames mel-like, as in Tacotron 2.
    pub pre_postnet_l2: f64,
    pub stop_term: f64,
    /// Mean off-diagonal attention mass; only counted in `total` when the
    /// guided-attention weight is nonzero.
    pub attention_term: f64,
    /// `l2_term + pre_postnet_l2 + stop_weight * stop_term
    /// + guided_attention_weight * attention_term`.
    pub total: f64,
}

/// Stop targets: 1 on the final frame, 0 elsewhere.
fn stop_targets(b: usize, t: usize, like: &Tensor) -> Result<Tensor> {
    let mut y = vec![0.0f64; b * t];
    for i in 0..b {
        y[i * t + t - 1] = 1.0;
    }
    Ok(Tensor::from_vec(y, (b, t), like.device())?.to_dtype(like.dtype())?)
}

/// Differentiable loss: mean squared mel error before and after the
/// post-net plus weighted stop-token binary cross-entropy.
pub fn loss_tensor(
    pred: &DecoderOutput,
    target: &Tensor,
    stop_weight: f64,
    stop_pos_weight: f64,
) -> Result<(Tensor, ReconstructionLoss)> {
    if pred.mel.dims() != target.dims() {
        return Err(Error::validation(format!(
            "prediction {:?} and target {:?} shapes differ",
            pred.mel.dims(),
            target.dims()
        )));
    }
    let (b, t, _) = target.dims3()?;
    let l2 = (&pred.mel - target)?.sqr()?.mean_all()?;
    let pre = (&pred.mel_pre - target)?.sqr()?.mean_all()?;
    let y = stop_targets(b, t, &pred.stop_logits)?;
    let z = &pred.stop_logits;
    let pos = (y.mul(&nn::softplus(&z.neg()?)?)? * stop_pos_weight)?;
    let neg = ((1.0 - &y)?).mul(&nn::softplus(z)?)?;
    let stop = (pos + neg)?.mean_all()?;
    let total = ((&l2 + &pre)? + (&stop * stop_weight)?)?;
    let values = ReconstructionLoss {
        l2_term: l2.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        pre_postnet_l2: pre.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        stop_term: stop.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        attention_term: 0.0,
        total: total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    };
    Ok((total, values))
}

/// Attention mass per decoder step, averaged over steps, weighted by
/// `1 - exp(-(n/T' - t/T_out)^2 / (2 sigma^2))`: zero on the diagonal and
/// approaching one away from it. `alignment` is `[B, T_out, T']`.
pub fn guided_attention_loss(alignment: &Tensor, sigma: f64) -> Result<Tensor> {
    let (_, t_out, t_in) = alignment.dims3()?;
    let mut w = Vec::with_capacity(t_out * t_in);
    for t in 0..t_out {
        for n in 0..t_in {
            let d = n as f64 / t_in as f64 - t as f64 / t_out as f64;
            w.push(1.0 - (-d * d / (2.0 * sigma * sigma)).exp());
        }
    }
    let w = Tensor::from_vec(w, (1, t_out, t_in), alignment.device())?.to_dtype(alignment.dtype())?;
    Ok(alignment.broadcast_mul(&w)?.sum(2)?.mean_all()?)
}

/// Loss values of a single-utterance prediction against a target mel.
pub fn reconstruction_loss(
    pred: &DecoderOutput,
    target: &MelSpectrogram,
    cfg: &DecoderConfig,
) -> Result<ReconstructionLoss> {
    let t = nn::from_array2(&target.frames, pred.mel.dtype(), pred.mel.device())?.unsqueeze(0)?;
    loss_tensor(pred, &t, cfg.stop_weight, cfg.stop_pos_weight).map(|(_, v)| v)
}

/// Add the style vector to every content frame.
pub fn fuse(content: &ContentSequence, s: &StyleVector) -> Result<ContentSequence> {
    if content.dim() != s.s.len() {
        return Err(Error::validation(format!(
            "content is {}-d but the style vector is {}-d",
            content.dim(),
            s.s.len()
        )));
    }
    let style = ndarray::ArrayView1::from(&s.s);
    let mut vectors = content.vectors.clone();
    for mut row in vectors.outer_iter_mut() {
        row += &style;
    }
    Ok(ContentSequence {
        vectors,
        frame_hop_s: content.frame_hop_s,
    })
}

/// Tensor form of [`fuse`]: `[B, T', D] + [B, D]`.
pub fn fuse_tensor(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    Ok(content.broadcast_add(&style.unsqueeze(1)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny_decoder(dtype: DType, input_dim: usize, n_mels: usize) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new(dtype, 9);
        let dec = Decoder::new(&mut store, &DecoderConfig::tiny(), input_dim, n_mels).unwrap();
        (store, dec)
    }

    #[test]
    fn teacher_forcing_matches_teacher_length() {
        let (_, dec) = tiny_decoder(DType::F32, 16, 80);
        let memory = Tensor::randn(0f32, 1.0, (1, 30, 16), &Device::Cpu).unwrap();
        let teacher = Tensor::randn(0f32, 1.0, (1, 120, 80), &Device::Cpu).unwrap();
        let out = dec.forward(&memory, Some(&teacher), None).unwrap();
        assert_eq!(out.mel.dims(), &[1, 120, 80]);
        assert!(out.stop_probs().unwrap().iter().all(|p| (0.0..=1.0).contains(p)));
        let rows = out.alignment_matrix(0).unwrap();
        for row in rows.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn free_running_respects_max_steps() {
        let (_, dec) = tiny_decoder(DType::F32, 16, 80);
        let memory = Tensor::randn(0f32, 1.0, (1, 50, 16), &Device::Cpu).unwrap();
        let out = dec.forward(&memory, None, None).unwrap();
        let n = out.n_frames().unwrap();
        assert!(n <= 100);
        assert_eq!(out.truncated, n == 100 && out.stop_probs().unwrap()[99] <= 0.5);
    }

    #[test]
    fn loss_zero_at_identity_and_one_at_unit_offset() {
        let (_, dec) = tiny_decoder(DType::F64, 8, 4);
        let memory = Tensor::randn(0f64, 1.0, (1, 6, 8), &Device::Cpu).unwrap();
        let teacher = Tensor::randn(0f64, 1.0, (1, 5, 4), &Device::Cpu).unwrap();
        let out = dec.forward(&memory, Some(&teacher), None).unwrap();
        let (_, same) = loss_tensor(&out, &out.mel.clone(), 1.0, 5.0).unwrap();
        assert_eq!(same.l2_term, 0.0);
        let (_, shifted) = loss_tensor(&out, &(&out.mel - 1.0).unwrap(), 1.0, 5.0).unwrap();
        assert!((shifted.l2_term - 1.0).abs() < 1e-12);
        let parts = shifted.l2_term + shifted.pre_postnet_l2 + shifted.stop_term;
        assert!((shifted.total - parts).abs() < 1e-12);
        assert!(shifted.stop_term >= 0.0);
        let wrong = Tensor::zeros((1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(loss_tensor(&out, &wrong, 1.0, 5.0).is_err());
    }

    #[test]
    fn hand_computed_mse_on_3x2() {
        // stop logits of 0 make the stop term log(2) * (5 * 1 + 2) / 3
        let mel = Tensor::new(&[[[1.0f64, 2.0], [0.5, -1.0], [3.0, 0.0]]], &Device::Cpu).unwrap();
        let target = Tensor::new(&[[[0.0f64, 2.5], [0.5, 1.0], [1.0, -1.0]]], &Device::Cpu).unwrap();
        let out = DecoderOutput {
            mel,
            mel_pre: (&target + 2.0).unwrap(),
            stop_logits: Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap(),
            alignment: Tensor::ones((1, 3, 1), DType::F64, &Device::Cpu).unwrap(),
            truncated: false,
        };
        let (_, v) = loss_tensor(&out, &target, 1.0, 5.0).unwrap();
        let mse = (1.0 + 0.25 + 0.0 + 4.0 + 4.0 + 1.0) / 6.0;
        assert!((v.l2_term - mse).abs() < 1e-10);
        let stop = 2f64.ln() * 7.0 / 3.0;
        assert!((v.stop_term - stop).abs() < 1e-10);
        assert!((v.pre_postnet_l2 - 4.0).abs() < 1e-10);
        assert!((v.total - (mse + 4.0 + stop)).abs() < 1e-10);
    }

    #[test]
    fn guided_attention_penalizes_off_diagonal_mass() {
        let diagonal = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let on = guided_attention_loss(&diagonal, 0.2).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(on, 0.0);
        // All mass on the last input frame: row t pays 1 - exp(-((3-t)/4)^2 / 0.08).
        let last = Tensor::new(&[[[0.0f64, 0.0, 0.0, 1.0]; 4]], &Device::Cpu).unwrap();
        let off = guided_attention_loss(&last, 0.2).unwrap().to_scalar::<f64>().unwrap();
        let expected = (0..4)
            .map(|t| 1.0 - (-((3 - t) as f64 / 4.0).powi(2) / 0.08).exp())
            .sum::<f64>()
            / 4.0;
        assert!((off - expected).abs() < 1e-12);
    }

    #[test]
    fn fuse_contract() {
        let content = ContentSequence {
            vectors: ndarray::array![[1.0f32, 2.0], [3.0, 4.0]],
            frame_hop_s: 0.01,
        };
        let zero = StyleVector {
            s: vec![0.0, 0.0],
            reference_utterance_id: "r".into(),
        };
        assert_eq!(fuse(&content, &zero).unwrap(), content);
        let empty = ContentSequence {
            vectors: Array2::zeros((3, 2)),
            frame_hop_s: 0.01,
        };
        let v = StyleVector {
            s: vec![0.5, -2.0],
            reference_utterance_id: "r".into(),
        };
        let out = fuse(&empty, &v).unwrap();
        assert!(out.vectors.outer_iter().all(|r| r.to_vec() == v.s));
        let bad = StyleVector {
            s: vec![1.0],
            reference_utterance_id: "r".into(),
        };
        assert!(fuse(&content, &bad).is_err());
    }
}
