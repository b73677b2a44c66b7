use candle::{DType, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::{SlmFeatureStack, FEATURE_DIM, N_LAYERS, PROJECTED_DIM};
use crate::error::{invalid, Result};

/// Linear `13·768 → 256` map applied per frame to the concatenated layers.
///
/// The weight is stored output-major, `(256, 9984)`, so column block
/// `ℓ·768 .. (ℓ+1)·768` holds the coefficients that read layer `ℓ`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    weight: Tensor,
    bias: Tensor,
}

impl ProjectionHead {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        let in_dim = N_LAYERS * FEATURE_DIM;
        let weight = vb.get_with_hints((PROJECTED_DIM, in_dim), "weight", candle_nn::init::ZERO)?;
        let bias = vb.get_with_hints(PROJECTED_DIM, "bias", candle_nn::init::ZERO)?;
        Ok(Self { weight, bias })
    }

    /// From an input-major `(9984, 256)` weight and a `(256,)` bias.
    pub fn from_parts(weight_in_out: &Tensor, bias: &Tensor) -> Result<Self> {
        let in_dim = N_LAYERS * FEATURE_DIM;
        if weight_in_out.dims() != [in_dim, PROJECTED_DIM] || bias.dims() != [PROJECTED_DIM] {
            return invalid(format!(
                "projection head must be ({in_dim}, {PROJECTED_DIM}) + ({PROJECTED_DIM},), got {:?} + {:?}",
                weight_in_out.dims(),
                bias.dims()
            ));
        }
        Ok(Self {
            weight: weight_in_out.t()?.contiguous()?,
            bias: bias.clone(),
        })
    }

    /// Output-major `(256, 9984)` weight.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// `(B, T', 256)` projection of a feature stack.
    pub fn project(&self, stack: &SlmFeatureStack) -> Result<Tensor> {
        let x = Tensor::cat(stack.layers(), 2)?;
        let dtype = x.dtype();
        let w = self.weight.to_dtype(dtype)?;
        if x.dim(2)? != w.dim(1)? {
            return invalid(format!("stack width {} != head input {}", x.dim(2)?, w.dim(1)?));
        }
        Ok(x
            .broadcast_matmul(&w.t()?)?
            .broadcast_add(&self.bias.to_dtype(dtype)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceNorm {
    #[default]
    Frobenius,
    L1,
}

/// Normalized per-layer weight magnitude of a projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub importance: [f64; N_LAYERS],
}

impl LayerImportance {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer_index,importance\n");
        for (i, v) in self.importance.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }

    pub fn sum(&self) -> f64 {
        self.importance.iter().sum()
    }
}

/// Share of the head's weight magnitude that reads each layer (bias excluded).
/// An all-zero weight yields the uniform distribution.
pub fn layer_importance(head: &ProjectionHead, norm: ImportanceNorm) -> Result<LayerImportance> {
    let w = head.weight.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut mags = [0.0f64; N_LAYERS];
    for row in &w {
        for (l, m) in mags.iter_mut().enumerate() {
            let block = &row[l * FEATURE_DIM..(l + 1) * FEATURE_DIM];
            *m += match norm {
                ImportanceNorm::Frobenius => block.iter().map(|v| v * v).sum::<f64>(),
                ImportanceNorm::L1 => block.iter().map(|v| v.abs()).sum::<f64>(),
            };
        }
    }
    if norm == ImportanceNorm::Frobenius {
        for m in mags.iter_mut() {
            *m = m.sqrt();
        }
    }
    let total: f64 = mags.iter().sum();
    let mut importance = [1.0 / N_LAYERS as f64; N_LAYERS];
    if total > 0.0 {
        for (i, m) in mags.iter().enumerate() {
            importance[i] = m / total;
        }
    } else {
        log::warn!("projection head weight is all zero; reporting uniform importance");
    }
    Ok(LayerImportance { importance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::Device;
    use rand::Rng;

    const IN: usize = N_LAYERS * FEATURE_DIM;

    fn head_from(f: impl Fn(usize, usize) -> f32, bias: Vec<f32>) -> ProjectionHead {
        let mut w = Vec::with_capacity(IN * PROJECTED_DIM);
        for i in 0..IN {
            for o in 0..PROJECTED_DIM {
                w.push(f(i, o));
            }
        }
        let w = Tensor::from_vec(w, (IN, PROJECTED_DIM), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(bias, PROJECTED_DIM, &Device::Cpu).unwrap();
        ProjectionHead::from_parts(&w, &b).unwrap()
    }

    fn random_stack(frames: usize, seed: u64) -> (Vec<Vec<f32>>, SlmFeatureStack) {
        let mut rng = crate::util::stream_rng(seed, "stack");
        let mut raw = Vec::new();
        let mut layers = Vec::new();
        for _ in 0..N_LAYERS {
            let v: Vec<f32> = (0..frames * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            layers.push(Tensor::from_slice(&v, (1, frames, FEATURE_DIM), &Device::Cpu).unwrap());
            raw.push(v);
        }
        (raw, SlmFeatureStack::new(layers).unwrap())
    }

    #[test]
    fn zero_weight_returns_bias() {
        let bias: Vec<f32> = (0..PROJECTED_DIM).map(|i| i as f32 * 0.01).collect();
        let head = head_from(|_, _| 0.0, bias.clone());
        let (_, stack) = random_stack(2, 1);
        let out = head.project(&stack).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        for frame in out {
            assert_eq!(frame, bias);
        }
    }

    #[test]
    fn selector_weight_copies_layer_zero() {
        let head = head_from(|i, o| if i == o { 1.0 } else { 0.0 }, vec![0.0; PROJECTED_DIM]);
        let (raw, stack) = random_stack(2, 2);
        let out = head.project(&stack).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        for (t, frame) in out.iter().enumerate() {
            assert_eq!(frame.as_slice(), &raw[0][t * FEATURE_DIM..t * FEATURE_DIM + PROJECTED_DIM]);
        }
    }

    #[test]
    fn one_hot_block_importance() {
        let head = head_from(
            |i, _| if i / FEATURE_DIM == 3 { 0.5 } else { 0.0 },
            vec![0.0; PROJECTED_DIM],
        );
        let imp = layer_importance(&head, ImportanceNorm::Frobenius).unwrap();
        for (l, v) in imp.importance.iter().enumerate() {
            assert_eq!(*v, if l == 3 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn equal_blocks_are_uniform_and_scale_free() {
        let head = head_from(|i, o| if (i + o) % 2 == 0 { 1.0 } else { -1.0 }, vec![0.0; PROJECTED_DIM]);
        let scaled = head_from(|i, o| if (i + o) % 2 == 0 { 7.0 } else { -7.0 }, vec![0.0; PROJECTED_DIM]);
        let a = layer_importance(&head, ImportanceNorm::Frobenius).unwrap();
        let b = layer_importance(&scaled, ImportanceNorm::Frobenius).unwrap();
        for (x, y) in a.importance.iter().zip(&b.importance) {
            assert!((x - 1.0 / 13.0).abs() < 1e-12);
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = head_from(|_, _| 0.0, vec![0.0; PROJECTED_DIM]);
        let imp = layer_importance(&head, ImportanceNorm::L1).unwrap();
        assert!(imp.importance.iter().all(|&v| v == 1.0 / 13.0));
    }

    #[test]
    fn csv_has_thirteen_rows() {
        let head = head_from(|i, _| (i % 5) as f32, vec![0.0; PROJECTED_DIM]);
        let csv = layer_importance(&head, ImportanceNorm::Frobenius).unwrap().to_csv();
        assert_eq!(csv.lines().count(), 14);
        assert!(csv.starts_with("layer_index,importance"));
    }

    #[test]
    fn rejects_wrong_shape() {
        let w = Tensor::zeros((10, PROJECTED_DIM), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(PROJECTED_DIM, DType::F32, &Device::Cpu).unwrap();
        assert!(ProjectionHead::from_parts(&w, &b).is_err());
    }
}
