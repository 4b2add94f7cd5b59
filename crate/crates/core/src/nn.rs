//! Small layer library on top of candle tensors.
//!
//! Parameters are created through [`ParamStore`], which initializes them
//! from a seeded ChaCha stream so that a model built twice with the same
//! seed is bit-identical, independent of candle's own RNG.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Linear, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// 1-d convolution over `(batch, channels, time)`, lowered to
/// unfold + matmul.
///
/// candle's native conv1d computes a wrong kernel gradient whenever the
/// batch has more than one item; built from slices and a matmul, the
/// backward pass only touches primitive ops.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
}

impl Conv1d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn output_len(&self, len: usize) -> usize {
        let k = self.weight.dim(2).unwrap_or(1);
        (len + 2 * self.padding).saturating_sub(k) / self.stride + 1
    }
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, cin, len) = x.dims3()?;
        let (cout, _, k) = self.weight.dims3()?;
        if len + 2 * self.padding < k {
            candle_core::bail!("conv1d input of {len} frames is shorter than the kernel ({k})");
        }
        let t = self.output_len(len);
        let x = x.pad_with_zeros(2, self.padding, self.padding)?;
        let span = (t - 1) * self.stride + 1;
        let picks = (self.stride > 1)
            .then(|| Tensor::arange_step(0u32, span as u32, self.stride as u32, x.device()))
            .transpose()?;
        let taps = (0..k)
            .map(|j| {
                let tap = x.narrow(2, j, span)?;
                match &picks {
                    Some(idx) => tap.contiguous()?.index_select(idx, 2),
                    None => Ok(tap),
                }
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        // (b, cin, t, k) -> (b·t, cin·k), matching the weight's layout.
        let cols = Tensor::stack(&taps, 3)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b * t, cin * k))?;
        let w = self.weight.reshape((cout, cin * k))?.t()?;
        let y = cols.matmul(&w)?;
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(bias)?,
            None => y,
        };
        y.reshape((b, t, cout))?.transpose(1, 2)?.contiguous()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
    Const(f64),
}

/// Owns every trainable tensor of a model, keyed by dotted name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("n_tensors", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("parameter '{name}' declared twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) -> Result<Linear> {
        let w = self.var(&format!("{name}.weight"), &[output, input], Init::FanIn(input))?;
        let b = if bias {
            Some(self.var(&format!("{name}.bias"), &[output], Init::FanIn(input))?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    pub fn conv1d(
        &mut self,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Conv1d> {
        let fan_in = input * kernel;
        let w = self.var(&format!("{name}.weight"), &[output, input, kernel], Init::FanIn(fan_in))?;
        let b = if bias {
            Some(self.var(&format!("{name}.bias"), &[output], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Conv1d {
            weight: w,
            bias: b,
            padding: kernel / 2,
            stride,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.var(&format!("{name}.gain"), &[dim], Init::Const(1.0))?,
            bias: self.var(&format!("{name}.bias"), &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> Result<LstmCell> {
        let w_ih = self.var(&format!("{name}.w_ih"), &[4 * hidden, input], Init::FanIn(hidden))?;
        let w_hh = self.var(&format!("{name}.w_hh"), &[4 * hidden, hidden], Init::FanIn(hidden))?;
        // forget-gate bias starts at 1
        let mut bias = vec![0.0f64; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = Tensor::from_vec(bias, 4 * hidden, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&b)?;
        let bias = var.as_tensor().clone();
        let key = format!("{name}.bias");
        if self.vars.insert(key.clone(), var).is_some() {
            return Err(Error::config(format!("parameter '{key}' declared twice")));
        }
        Ok(LstmCell {
            w_ih,
            w_hh,
            bias,
            hidden,
        })
    }

    /// Parameters in name order.
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn n_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        save_tensors(path, tensors)
    }

    /// Overwrite every parameter from a safetensors file. Names and shapes
    /// must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = load_tensors(path)?;
        if loaded.len() != self.vars.len() {
            return Err(Error::validation(format!(
                "{}: {} tensors, model expects {}",
                path.display(),
                loaded.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::validation(format!("{}: missing tensor '{name}'", path.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::validation(format!(
                    "{}: tensor '{name}' has shape {:?}, model expects {:?}",
                    path.display(),
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub(crate) fn save_tensors(path: &Path, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    candle_core::safetensors::save(&map, tmp.path())?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn load_tensors(path: &Path) -> Result<std::collections::HashMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?)
}

/// Layer normalization over the last dimension, written with differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Single LSTM layer, gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, like: &Tensor) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), like.dtype(), like.device())?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Input projection `x W_ih^T + b` for any leading shape.
    pub fn project_input(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?)
    }

    /// Advance one step given an already projected input `[B, 4H]`.
    pub fn step_projected(&self, gates_x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (gates_x + state.h.matmul(&self.w_hh.t()?)?)?;
        let chunks = gates.chunk(4, D::Minus1)?;
        let i = candle_nn::ops::sigmoid(&chunks[0])?;
        let f = candle_nn::ops::sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = candle_nn::ops::sigmoid(&chunks[3])?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        self.step_projected(&self.project_input(x)?, state)
    }

    /// Run over `[B, T, I]`; returns every hidden state `[B, T, H]` and the
    /// final state.
    pub fn forward_seq(&self, x: &Tensor) -> Result<(Tensor, LstmState)> {
        let (b, t, _) = x.dims3()?;
        let gates_x = self.project_input(x)?;
        let mut state = self.zero_state(b, x)?;
        let mut hs = Vec::with_capacity(t);
        for step in 0..t {
            let gx = gates_x.narrow(1, step, 1)?.squeeze(1)?;
            state = self.step_projected(&gx, &state)?;
            hs.push(state.h.clone());
        }
        Ok((Tensor::stack(&hs, 1)?, state))
    }
}

/// Inverted dropout with masks drawn from a caller-owned RNG.
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// `[B, C, T] -> [B, T, C]` and back.
pub fn swap_time_channels(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(1, 2)?.contiguous()?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((pos + tail)?)
}

/// Flatten a tensor to `Vec<f64>` regardless of dtype.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn from_array2(a: &ndarray::Array2<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), device)?.to_dtype(dtype)?)
}

pub fn to_array2(t: &Tensor) -> Result<ndarray::Array2<f32>> {
    let (r, c) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    ndarray::Array2::from_shape_vec((r, c), data).map_err(|e| Error::validation(e.to_string()))
}
