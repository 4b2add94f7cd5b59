//! Content encoder `E_C`: the reference-encoder architecture, returning
//! every LSTM state instead of only the last one.

use candle_core::Tensor;
use candle_nn::{Linear, Module};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FEATURE_DIM};
use crate::nn::{self, ParamStore};
use crate::style::ConvLstmEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentConfig {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    /// 1 keeps one content vector per 10 ms frame; 2 mirrors the reference
    /// encoder's downsampling.
    pub stride: usize,
    pub lstm_hidden: usize,
    /// A backward pass lets every content vector see the end of the
    /// utterance, which is what the stop-token predictor keys on.
    pub bidirectional: bool,
    pub output_dim: usize,
}

impl Default for ContentConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 32, 64, 64, 128, 128],
            kernel_size: 9,
            stride: 1,
            lstm_hidden: 256,
            bidirectional: true,
            output_dim: 512,
        }
    }
}

impl ContentConfig {
    pub fn tiny() -> Self {
        Self {
            conv_channels: vec![32; 6],
            lstm_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::config("content.stride must be 1 or 2"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("content.kernel_size must be odd"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config("content.conv_channels must be non-empty and positive"));
        }
        if self.lstm_hidden == 0 || self.output_dim == 0 {
            return Err(Error::config("content widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContentEncoder {
    stack: ConvLstmEncoder,
    proj: Linear,
}

impl ContentEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ContentConfig) -> Result<Self> {
        let stack = ConvLstmEncoder::new(
            store,
            "content",
            FEATURE_DIM,
            &cfg.conv_channels,
            cfg.kernel_size,
            cfg.stride,
            cfg.lstm_hidden,
            cfg.bidirectional,
        )?;
        let proj = store.linear("content.proj", stack.output_dim(), cfg.output_dim, true)?;
        Ok(Self { stack, proj })
    }

    pub fn min_frames(&self) -> usize {
        self.stack.min_frames()
    }

    pub fn output_len(&self, t: usize) -> usize {
        self.stack.output_len(t)
    }

    /// `[B, T, 512] -> [B, T', output_dim]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (states, _) = self.stack.forward(x)?;
        Ok(self.proj.forward(&states)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentSequence {
    pub vectors: Array2<f32>,
    pub frame_hop_s: f64,
}

impl ContentSequence {
    pub fn n_frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Run `E_C` on a quantized feature sequence.
pub fn encode_content(qf: &FeatureSequence, ec: &ContentEncoder, store: &ParamStore) -> Result<ContentSequence> {
    if qf.n_frames() < ec.min_frames() {
        return Err(Error::validation(format!(
            "content input has {} frames; at least {} are required",
            qf.n_frames(),
            ec.min_frames()
        )));
    }
    let x = nn::from_array2(&qf.vectors, store.dtype(), store.device())?.unsqueeze(0)?;
    let y = ec.forward(&x)?.squeeze(0)?;
    let t_out = y.dim(0)?;
    Ok(ContentSequence {
        vectors: nn::to_array2(&y)?,
        frame_hop_s: qf.frame_hop_s * qf.n_frames() as f64 / t_out as f64,
    })
}
