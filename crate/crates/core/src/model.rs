//! The trainable part of the converter: style encoder, content encoder and
//! decoder sharing one parameter store.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::content::{ContentConfig, ContentEncoder};
use crate::decoder::{fuse_tensor, guided_attention_loss, loss_tensor, Decoder, DecoderConfig, DecoderOutput, ReconstructionLoss};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{self, ParamStore};
use crate::style::{HgstOutput, StyleConfig, StyleEncoder, StyleVector};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub style: StyleConfig,
    pub content: ContentConfig,
    pub decoder: DecoderConfig,
    pub n_mels: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn tiny(n_mels: usize, seed: u64) -> Self {
        Self {
            style: StyleConfig::tiny(),
            content: ContentConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            n_mels,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.style.validate()?;
        self.content.validate()?;
        self.decoder.validate()?;
        if self.content.output_dim != self.style.style_dim {
            return Err(Error::config(format!(
                "content.output_dim ({}) must equal style.style_dim ({}) so the two can be summed",
                self.content.output_dim, self.style.style_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct VcModel {
    pub store: ParamStore,
    pub style: StyleEncoder,
    pub content: ContentEncoder,
    pub decoder: Decoder,
    pub cfg: ModelConfig,
}

/// One teacher-forced forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub loss: Tensor,
    pub values: ReconstructionLoss,
    pub output: DecoderOutput,
    pub style: HgstOutput,
}

impl VcModel {
    pub fn new(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, cfg.seed);
        let style = StyleEncoder::new(&mut store, &cfg.style)?;
        let content = ContentEncoder::new(&mut store, &cfg.content)?;
        let decoder = Decoder::new(&mut store, &cfg.decoder, cfg.style.style_dim, cfg.n_mels)?;
        Ok(Self {
            store,
            style,
            content,
            decoder,
            cfg: cfg.clone(),
        })
    }

    /// Frames a reference needs before the style encoder accepts it.
    pub fn min_reference_frames(&self) -> usize {
        self.style.reference.min_frames()
    }

    pub fn tensor(&self, a: &ndarray::Array2<f32>) -> Result<Tensor> {
        nn::from_array2(a, self.store.dtype(), self.store.device())
    }

    /// Reconstruction pass: style from `raw` features, content from the
    /// quantized ones, decoder teacher-forced on `target_mel`.
    /// All inputs are `[B, T, _]`.
    pub fn forward_teacher(
        &self,
        raw: &Tensor,
        quantized: &Tensor,
        target_mel: &Tensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let style = self.style.forward(raw)?;
        let content = self.content.forward(quantized)?;
        let memory = fuse_tensor(&content, &style.style)?;
        let output = self.decoder.forward(&memory, Some(target_mel), dropout_rng)?;
        let dc = &self.cfg.decoder;
        let (mut loss, mut values) = loss_tensor(&output, target_mel, dc.stop_weight, dc.stop_pos_weight)?;
        let attention = guided_attention_loss(&output.alignment, dc.guided_attention_sigma)?;
        values.attention_term = attention.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if dc.guided_attention_weight > 0.0 {
            loss = (loss + (attention * dc.guided_attention_weight)?)?;
            values.total += dc.guided_attention_weight * values.attention_term;
        }
        Ok(ForwardPass {
            loss,
            values,
            output,
            style,
        })
    }

    /// Free-running generation for one utterance.
    pub fn generate(&self, quantized: &FeatureSequence, style: &StyleVector) -> Result<DecoderOutput> {
        if quantized.n_frames() < self.content.min_frames() {
            return Err(Error::validation(format!(
                "source segment has {} frames; the content encoder needs at least {}",
                quantized.n_frames(),
                self.content.min_frames()
            )));
        }
        let q = self.tensor(&quantized.vectors)?.unsqueeze(0)?;
        let s = Tensor::from_vec(style.s.clone(), (1, style.s.len()), self.store.device())?.to_dtype(self.store.dtype())?;
        let content = self.content.forward(&q)?;
        let memory = fuse_tensor(&content, &s)?;
        self.decoder.forward(&memory, None, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(cfg, DType::F32)?;
        model.store.load(path)?;
        Ok(model)
    }
}
