//! Style encoder: a convolutional/recurrent reference encoder that squeezes
//! an utterance into one vector, followed by a hierarchical global style
//! token (HGST) layer that re-expresses that vector as a sum of convex
//! combinations of a few learned tokens.

use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{encode, FeatureSequence, SpeechEncoderBackend, FEATURE_DIM};
use crate::nn::{self, Conv1d, Init, LayerNorm, LstmCell, ParamStore};
use crate::signal::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleConfig {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub lstm_hidden: usize,
    /// Run the recurrent layer in both directions (as the Tacotron 2
    /// encoder does); the final state concatenates both directions.
    pub bidirectional: bool,
    pub style_dim: usize,
    /// HGST sublayers (l).
    pub sublayers: usize,
    /// Tokens per sublayer (h).
    pub tokens_per_sublayer: usize,
    pub attention_dim: usize,
    pub token_init_std: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 32, 64, 64, 128, 128],
            kernel_size: 9,
            stride: 2,
            lstm_hidden: 256,
            bidirectional: true,
            style_dim: 512,
            sublayers: 3,
            tokens_per_sublayer: 5,
            attention_dim: 128,
            token_init_std: 0.3,
        }
    }
}

impl StyleConfig {
    pub fn tiny() -> Self {
        Self {
            conv_channels: vec![32; 6],
            lstm_hidden: 32,
            attention_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config("style.conv_channels must be non-empty and positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("style.kernel_size must be odd"));
        }
        if self.stride == 0 {
            return Err(Error::config("style.stride must be positive"));
        }
        if self.sublayers == 0 || self.tokens_per_sublayer == 0 {
            return Err(Error::config("style HGST needs at least one sublayer and one token"));
        }
        if self.style_dim == 0 || self.lstm_hidden == 0 || self.attention_dim == 0 {
            return Err(Error::config("style widths must be positive"));
        }
        Ok(())
    }
}

/// Strided 1-D convolutions (each followed by layer norm and ReLU) feeding
/// an LSTM, optionally bidirectional. Shared by the reference and content
/// encoders.
#[derive(Debug, Clone)]
pub struct ConvLstmEncoder {
    convs: Vec<(Conv1d, LayerNorm)>,
    lstm: LstmCell,
    backward: Option<LstmCell>,
    stride: usize,
}

impl ConvLstmEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        channels: &[usize],
        kernel: usize,
        stride: usize,
        hidden: usize,
        bidirectional: bool,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut prev = input_dim;
        for (i, &ch) in channels.iter().enumerate() {
            let conv = store.conv1d(&format!("{prefix}.conv{i}"), prev, ch, kernel, stride, true)?;
            let norm = store.layer_norm(&format!("{prefix}.norm{i}"), ch)?;
            convs.push((conv, norm));
            prev = ch;
        }
        let lstm = store.lstm(&format!("{prefix}.lstm"), prev, hidden)?;
        let backward = if bidirectional {
            Some(store.lstm(&format!("{prefix}.lstm_backward"), prev, hidden)?)
        } else {
            None
        };
        Ok(Self {
            convs,
            lstm,
            backward,
            stride,
        })
    }

    /// Width of each output state.
    pub fn output_dim(&self) -> usize {
        self.lstm.hidden() * if self.backward.is_some() { 2 } else { 1 }
    }

    /// Smallest input length for which every strided layer still has a
    /// full-stride worth of frames.
    pub fn min_frames(&self) -> usize {
        if self.stride <= 1 {
            1
        } else {
            self.stride.pow(self.convs.len() as u32)
        }
    }

    pub fn output_len(&self, t: usize) -> usize {
        (0..self.convs.len()).fold(t, |len, _| len.div_ceil(self.stride))
    }

    /// `[B, T, C] -> ([B, T', H], final hidden [B, H])`
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, t, _) = x.dims3()?;
        if t < self.min_frames() {
            return Err(Error::validation(format!(
                "encoder input has {t} frames; at least {} are required",
                self.min_frames()
            )));
        }
        let mut h = nn::swap_time_channels(x)?;
        for (conv, norm) in &self.convs {
            let y = conv.forward(&h)?;
            let y = norm.forward(&nn::swap_time_channels(&y)?)?.relu()?;
            h = nn::swap_time_channels(&y)?;
        }
        let seq = nn::swap_time_channels(&h)?;
        let (states, last) = self.lstm.forward_seq(&seq)?;
        match &self.backward {
            None => Ok((states, last.h)),
            Some(bw) => {
                let (b_states, b_last) = bw.forward_seq(&reverse_time(&seq)?)?;
                let states = Tensor::cat(&[&states, &reverse_time(&b_states)?], D::Minus1)?;
                Ok((states, Tensor::cat(&[&last.h, &b_last.h], D::Minus1)?))
            }
        }
    }
}

fn reverse_time(x: &Tensor) -> Result<Tensor> {
    let t = x.dim(1)?;
    let idx = Tensor::from_vec((0..t as u32).rev().collect::<Vec<_>>(), t, x.device())?;
    Ok(x.index_select(&idx, 1)?)
}

/// `E_R`: final LSTM state, linearly projected to the style width.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    stack: ConvLstmEncoder,
    proj: Linear,
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, cfg: &StyleConfig) -> Result<Self> {
        let stack = ConvLstmEncoder::new(
            store,
            prefix,
            input_dim,
            &cfg.conv_channels,
            cfg.kernel_size,
            cfg.stride,
            cfg.lstm_hidden,
            cfg.bidirectional,
        )?;
        let proj = store.linear(&format!("{prefix}.proj"), stack.output_dim(), cfg.style_dim, true)?;
        Ok(Self { stack, proj })
    }

    pub fn min_frames(&self) -> usize {
        self.stack.min_frames()
    }

    /// `[B, T, 512] -> [B, style_dim]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, last) = self.stack.forward(x)?;
        Ok(self.proj.forward(&last)?)
    }
}

#[derive(Debug, Clone)]
struct HgstSublayer {
    /// `[h, d]`
    tokens: Tensor,
    /// `[d_k, d]`
    w_query: Tensor,
    /// `[d_k, d]`
    w_key: Tensor,
}

/// Hierarchical global style tokens.
#[derive(Debug, Clone)]
pub struct Hgst {
    sublayers: Vec<HgstSublayer>,
    scale: f64,
}

#[derive(Debug, Clone)]
pub struct HgstOutput {
    /// Sum of every sublayer's token combination, `[B, d]`.
    pub style: Tensor,
    /// Residual after each sublayer, `r_2 .. r_{l+1}`.
    pub residuals: Vec<Tensor>,
    /// Attention weights of each sublayer, `[B, h]`, rows on the simplex.
    pub weights: Vec<Tensor>,
}

impl Hgst {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &StyleConfig) -> Result<Self> {
        let d = cfg.style_dim;
        let dk = cfg.attention_dim;
        let mut sublayers = Vec::with_capacity(cfg.sublayers);
        for i in 0..cfg.sublayers {
            sublayers.push(HgstSublayer {
                tokens: store.var(
                    &format!("{prefix}.layer{i}.tokens"),
                    &[cfg.tokens_per_sublayer, d],
                    Init::Normal(cfg.token_init_std),
                )?,
                w_query: store.var(&format!("{prefix}.layer{i}.w_query"), &[dk, d], Init::FanIn(d))?,
                w_key: store.var(&format!("{prefix}.layer{i}.w_key"), &[dk, d], Init::FanIn(d))?,
            });
        }
        Ok(Self {
            sublayers,
            scale: 1.0 / (dk as f64).sqrt(),
        })
    }

    /// Build from explicit `(tokens, w_query, w_key)` per sublayer.
    pub fn from_parts(parts: Vec<(Tensor, Tensor, Tensor)>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("HGST needs at least one sublayer"))?;
        let dk = first.1.dim(0)?;
        let sublayers = parts
            .into_iter()
            .map(|(tokens, w_query, w_key)| HgstSublayer { tokens, w_query, w_key })
            .collect();
        Ok(Self {
            sublayers,
            scale: 1.0 / (dk as f64).sqrt(),
        })
    }

    pub fn n_sublayers(&self) -> usize {
        self.sublayers.len()
    }

    pub fn tokens(&self) -> Vec<Tensor> {
        self.sublayers.iter().map(|s| s.tokens.clone()).collect()
    }

    /// `r_1 = r`; per sublayer `c_i = softmax(score(r_i, tokens_i)) tokens_i`
    /// and `r_{i+1} = r_i - c_i`; the style vector is `sum_i c_i`.
    pub fn forward(&self, r: &Tensor) -> Result<HgstOutput> {
        let mut residual = r.clone();
        let mut style: Option<Tensor> = None;
        let mut residuals = Vec::with_capacity(self.sublayers.len());
        let mut weights = Vec::with_capacity(self.sublayers.len());
        for layer in &self.sublayers {
            let query = residual.matmul(&layer.w_query.t()?)?;
            let keys = layer.tokens.matmul(&layer.w_key.t()?)?;
            let scores = (query.matmul(&keys.t()?)? * self.scale)?;
            let alpha = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let combo = alpha.matmul(&layer.tokens)?;
            residual = (&residual - &combo)?;
            style = Some(match style {
                None => combo,
                Some(s) => (s + combo)?,
            });
            residuals.push(residual.clone());
            weights.push(alpha);
        }
        Ok(HgstOutput {
            style: style.expect("at least one sublayer"),
            residuals,
            weights,
        })
    }
}

/// E_R followed by HGST.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    pub reference: ReferenceEncoder,
    pub hgst: Hgst,
}

impl StyleEncoder {
    pub fn new(store: &mut ParamStore, cfg: &StyleConfig) -> Result<Self> {
        Ok(Self {
            reference: ReferenceEncoder::new(store, "style.reference", FEATURE_DIM, cfg)?,
            hgst: Hgst::new(store, "style.hgst", cfg)?,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<HgstOutput> {
        self.hgst.forward(&self.reference.forward(features)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector {
    pub s: Vec<f32>,
    pub reference_utterance_id: String,
}

/// Result of [`hgst_forward`] in plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HgstTrace {
    pub style: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

/// One reference vector through the HGST layer. Computation happens in the
/// dtype the layer's parameters were built with.
pub fn hgst_forward(r: &[f64], g: &Hgst) -> Result<HgstTrace> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("HGST input contains non-finite values"));
    }
    let proto = &g.sublayers[0].tokens;
    let x = Tensor::from_vec(r.to_vec(), (1, r.len()), proto.device())?.to_dtype(proto.dtype())?;
    let out = g.forward(&x)?;
    Ok(HgstTrace {
        style: nn::to_vec_f64(&out.style)?,
        residuals: out.residuals.iter().map(nn::to_vec_f64).collect::<Result<_>>()?,
        weights: out.weights.iter().map(nn::to_vec_f64).collect::<Result<_>>()?,
    })
}

fn features_tensor(f: &FeatureSequence, like: &ParamStore) -> Result<Tensor> {
    Ok(nn::from_array2(&f.vectors, like.dtype(), like.device())?.unsqueeze(0)?)
}

/// E_R on a single utterance: one `style_dim` vector regardless of length.
pub fn encode_reference(f: &FeatureSequence, er: &ReferenceEncoder, store: &ParamStore) -> Result<Vec<f32>> {
    if f.n_frames() < er.min_frames() {
        return Err(Error::validation(format!(
            "reference '{}' has {} frames; the reference encoder needs at least {} ({:.2} s)",
            f.source_utterance_id,
            f.n_frames(),
            er.min_frames(),
            er.min_frames() as f64 * f.frame_hop_s
        )));
    }
    let r = er.forward(&features_tensor(f, store)?)?;
    Ok(r.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

/// Style of already-encoded reference features, with the per-sublayer
/// attention weights.
pub fn style_from_features(
    f: &FeatureSequence,
    enc: &StyleEncoder,
    store: &ParamStore,
) -> Result<(StyleVector, Vec<Vec<f64>>)> {
    if f.n_frames() < enc.reference.min_frames() {
        return Err(Error::validation(format!(
            "reference '{}' has {} frames; the reference encoder needs at least {} ({:.2} s)",
            f.source_utterance_id,
            f.n_frames(),
            enc.reference.min_frames(),
            enc.reference.min_frames() as f64 * f.frame_hop_s
        )));
    }
    let out = enc.forward(&features_tensor(f, store)?)?;
    let s = out.style.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let weights = out.weights.iter().map(nn::to_vec_f64).collect::<Result<_>>()?;
    Ok((
        StyleVector {
            s,
            reference_utterance_id: f.source_utterance_id.clone(),
        },
        weights,
    ))
}

/// Speech encoder, reference encoder and HGST on a reference waveform.
pub fn style_of(
    utterance: &Waveform,
    utterance_id: &str,
    backend: &dyn SpeechEncoderBackend,
    enc: &StyleEncoder,
    store: &ParamStore,
) -> Result<StyleVector> {
    let f = encode(utterance, backend, utterance_id)?;
    style_from_features(&f, enc, store).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tensor(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (r, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn reference_encoder_shape_contract() {
        let mut store = ParamStore::new(DType::F32, 0);
        let er = ReferenceEncoder::new(&mut store, "er", 16, &StyleConfig::tiny()).unwrap();
        assert_eq!(er.min_frames(), 64);
        for t in [100, 1000] {
            let x = Tensor::randn(0f32, 1.0, (1, t, 16), &Device::Cpu).unwrap();
            assert_eq!(er.forward(&x).unwrap().dims(), &[1, 512]);
        }
        let short = Tensor::zeros((1, 10, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(er.forward(&short), Err(Error::Validation(_))));
    }

    #[test]
    fn saturated_attention_represents_input_exactly() {
        // orthonormal tokens, keys/queries scaled so the score is one-hot
        let tokens = tensor(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let big = tensor(&[
            &[100.0, 0.0, 0.0, 0.0],
            &[0.0, 100.0, 0.0, 0.0],
            &[0.0, 0.0, 100.0, 0.0],
            &[0.0, 0.0, 0.0, 100.0],
        ]);
        let eye = tensor(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        let g = Hgst::from_parts(vec![(tokens, big, eye)]).unwrap();
        let trace = hgst_forward(&[1.0, 0.0, 0.0, 0.0], &g).unwrap();
        for (c, want) in trace.style.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert!((c - want).abs() < 1e-6);
        }
        assert!(trace.residuals[0].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn uniform_attention_hand_example() {
        // zero query projection -> all scores 0 -> uniform weights 1/2
        let zero = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
        let k = Tensor::ones((3, 4), DType::F64, &Device::Cpu).unwrap();
        let t1 = tensor(&[&[1.0, 2.0, 0.0, -1.0], &[3.0, 0.0, 2.0, 1.0]]);
        let t2 = tensor(&[&[0.5, 0.5, 0.5, 0.5], &[-0.5, 1.5, 0.0, 2.5]]);
        let g = Hgst::from_parts(vec![(t1, zero.clone(), k.clone()), (t2, zero, k)]).unwrap();
        let r = [4.0, -1.0, 2.0, 0.0];
        let trace = hgst_forward(&r, &g).unwrap();
        // c1 = (2, 1, 1, 0), c2 = (0, 1, 0.25, 1.5)
        let want_s = [2.0, 2.0, 1.25, 1.5];
        let want_r2 = [2.0, -2.0, 1.0, 0.0];
        let want_r3 = [2.0, -3.0, 0.75, -1.5];
        for i in 0..4 {
            assert!((trace.style[i] - want_s[i]).abs() < 1e-6);
            assert!((trace.residuals[0][i] - want_r2[i]).abs() < 1e-6);
            assert!((trace.residuals[1][i] - want_r3[i]).abs() < 1e-6);
        }
        for w in &trace.weights {
            assert_eq!(w, &vec![0.5, 0.5]);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut store = ParamStore::new(DType::F32, 0);
        let g = Hgst::new(&mut store, "g", &StyleConfig::default()).unwrap();
        let mut r = vec![0.0; 512];
        r[3] = f64::NAN;
        assert!(hgst_forward(&r, &g).is_err());
    }
}
