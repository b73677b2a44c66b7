use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle::{DType, Device, Tensor, D};

use super::{CONSISTENCY_LAYERS, FEATURE_DIM, FRAME_STRIDE, N_LAYERS};
use crate::audio::{ResampleKernel, Waveform, SLM_RATE_HZ};
use crate::error::{invalid, Error, Result};
use crate::util::{hash_tensors, stream_rng, uniform_tensor};

const SLM_SEED: u64 = 0x51_3b_ac_0e;
/// (stride, output channels) of the front-end stages; strides multiply to 320.
const FRONTEND: [(usize, usize); 4] = [(5, 64), (4, 128), (4, 256), (4, FEATURE_DIM)];
const LN_EPS: f64 = 1e-5;

/// Per-layer frame features: 13 maps of shape `(B, T', 768)`.
#[derive(Debug, Clone)]
pub struct SlmFeatureStack {
    layers: Vec<Tensor>,
}

impl SlmFeatureStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.len() != N_LAYERS {
            return invalid(format!("expected {N_LAYERS} layers, got {}", layers.len()));
        }
        let dims = layers[0].dims().to_vec();
        if dims.len() != 3 || dims[2] != FEATURE_DIM {
            return invalid(format!("layer maps must be (B, T', {FEATURE_DIM}), got {dims:?}"));
        }
        if layers.iter().any(|l| l.dims() != dims.as_slice()) {
            return invalid("all layers must share one shape");
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Tensor {
        &self.layers[i]
    }

    pub fn n_frames(&self) -> usize {
        self.layers[0].dim(1).unwrap_or(0)
    }

    pub fn input_rate_hz(&self) -> u32 {
        SLM_RATE_HZ
    }

    pub fn frame_stride_samples(&self) -> usize {
        FRAME_STRIDE
    }

    /// Copy with every layer detached from the graph.
    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.detach()).collect(),
        }
    }

    /// Copy with layer `i` replaced.
    pub fn with_layer(&self, i: usize, value: Tensor) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers[i] = value;
        Self::new(layers)
    }

    /// Layers 6–9 stacked as `(B, 4, T', 768)`.
    pub fn consistency_features(&self) -> Result<Tensor> {
        let picked: Vec<&Tensor> = CONSISTENCY_LAYERS.map(|i| &self.layers[i]).collect();
        Ok(Tensor::stack(&picked, 1)?)
    }
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let c = x.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(c.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

// (u[t-1] + 2u[t] + u[t+1]) / 4 along the time axis of (B, T, C).
fn smooth_time(u: &Tensor) -> Result<Tensor> {
    let t = u.dim(1)?;
    let p = u.pad_with_zeros(1, 1, 1)?;
    let sum = ((p.narrow(1, 0, t)? + p.narrow(1, 2, t)?)? + (p.narrow(1, 1, t)? * 2.0)?)?;
    Ok((sum * 0.25)?)
}

/// Frozen surrogate speech encoder.
///
/// A non-overlapping strided front-end (stride product 320 at 16 kHz) yields
/// layer 0; twelve residual blocks of temporal smoothing, a 768×768 linear map
/// and `tanh` yield layers 1–12. Weights come from a fixed seed and are never
/// trained; the whole path is differentiable with respect to the waveform.
#[derive(Debug)]
pub struct SlmBackbone {
    params: HashMap<String, Tensor>,
    kernels: Mutex<HashMap<(usize, u32), Arc<ResampleKernel>>>,
}

impl Clone for SlmBackbone {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            kernels: Mutex::new(HashMap::new()),
        }
    }
}

impl SlmBackbone {
    pub fn new(device: &Device) -> Result<Self> {
        let mut rng = stream_rng(SLM_SEED, "slm-backbone");
        let mut params = HashMap::new();
        let mut cin = 1;
        for (i, (stride, cout)) in FRONTEND.iter().enumerate() {
            let shape = [stride * cin, *cout];
            let bound = (3.0 / shape[0] as f64).sqrt();
            params.insert(format!("frontend{i}.weight"), uniform_tensor(&mut rng, &shape, bound, device)?);
            params.insert(format!("frontend{i}.bias"), uniform_tensor(&mut rng, &[*cout], 0.1, device)?);
            cin = *cout;
        }
        for l in 1..N_LAYERS {
            let shape = [FEATURE_DIM, FEATURE_DIM];
            let bound = (3.0 / FEATURE_DIM as f64).sqrt();
            params.insert(format!("block{l}.weight"), uniform_tensor(&mut rng, &shape, bound, device)?);
            params.insert(format!("block{l}.bias"), uniform_tensor(&mut rng, &[FEATURE_DIM], 0.1, device)?);
        }
        Ok(Self {
            params,
            kernels: Mutex::new(HashMap::new()),
        })
    }

    fn kernel(&self, len: usize, rate: u32) -> Result<Arc<ResampleKernel>> {
        let mut cache = self.kernels.lock().expect("kernel cache poisoned");
        if let Some(k) = cache.get(&(len, rate)) {
            return Ok(k.clone());
        }
        let k = Arc::new(ResampleKernel::new(len, rate, SLM_RATE_HZ)?);
        cache.insert((len, rate), k.clone());
        Ok(k)
    }

    /// Frames produced for `len` samples at `rate_hz`.
    pub fn n_frames(len: usize, rate_hz: u32) -> usize {
        let resampled = if rate_hz == SLM_RATE_HZ {
            len
        } else {
            (len as f64 * SLM_RATE_HZ as f64 / rate_hz as f64).round() as usize
        };
        resampled / FRAME_STRIDE
    }

    fn p(&self, name: &str, dtype: DType) -> Result<Tensor> {
        Ok(self.params[name].to_dtype(dtype)?)
    }

    /// `(B, L)` waveform batch at `rate_hz` → feature stack.
    pub fn forward(&self, wav: &Tensor, rate_hz: u32) -> Result<SlmFeatureStack> {
        let (b, len) = wav.dims2()?;
        if len == 0 {
            return invalid("empty waveform");
        }
        let x = if rate_hz == SLM_RATE_HZ {
            wav.clone()
        } else {
            self.kernel(len, rate_hz)?.apply_tensor(wav)?
        };
        let frames = x.dim(1)? / FRAME_STRIDE;
        if frames == 0 {
            return invalid(format!(
                "waveform too short: {len} samples at {rate_hz} Hz gives no {FRAME_STRIDE}-sample frame"
            ));
        }
        let dtype = wav.dtype();
        let mut h = x.narrow(1, 0, frames * FRAME_STRIDE)?.unsqueeze(2)?;
        let mut steps = frames * FRAME_STRIDE;
        let mut cin = 1;
        for (i, (stride, cout)) in FRONTEND.iter().enumerate() {
            steps /= stride;
            h = h.reshape((b, steps, stride * cin))?;
            h = h
                .broadcast_matmul(&self.p(&format!("frontend{i}.weight"), dtype)?)?
                .broadcast_add(&self.p(&format!("frontend{i}.bias"), dtype)?)?
                .gelu()?;
            h = layer_norm(&h)?;
            cin = *cout;
        }
        let mut layers = Vec::with_capacity(N_LAYERS);
        layers.push(h.clone());
        for l in 1..N_LAYERS {
            let u = smooth_time(&layer_norm(&h)?)?;
            let v = u
                .broadcast_matmul(&self.p(&format!("block{l}.weight"), dtype)?)?
                .broadcast_add(&self.p(&format!("block{l}.bias"), dtype)?)?
                .tanh()?;
            h = (h + v)?;
            layers.push(h.clone());
        }
        SlmFeatureStack::new(layers)
    }

    pub fn extract(&self, wav: &Waveform, device: &Device) -> Result<SlmFeatureStack> {
        self.forward(&wav.to_tensor(device)?, wav.sample_rate_hz())
    }

    pub fn param_hash(&self) -> Result<String> {
        hash_tensors(self.params.iter().map(|(k, v)| (k.as_str(), v)))
    }

    /// Replaces one parameter tensor (for perturbation studies).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get(name) {
            Some(old) if old.dims() == value.dims() => {
                self.params.insert(name.to_string(), value);
                Ok(())
            }
            Some(old) => invalid(format!("{name}: shape {:?} != {:?}", value.dims(), old.dims())),
            None => invalid(format!("unknown backbone parameter {name}")),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle::safetensors::save(&self.params, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let params = candle::safetensors::load(path, device)?;
        for l in 1..N_LAYERS {
            if !params.contains_key(&format!("block{l}.weight")) {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("missing block{l}.weight"),
                });
            }
        }
        Ok(Self {
            params,
            kernels: Mutex::new(HashMap::new()),
        })
    }
}
