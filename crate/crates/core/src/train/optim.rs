//! AdamW with decoupled weight decay and serializable moment state.

use std::collections::HashMap;
use std::path::Path;

use candle::backprop::GradStore;
use candle::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.99,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config("AdamW betas must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return config("AdamW needs lr > 0, weight_decay >= 0, eps > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// Per-variable AdamW. A variable is only touched on steps where it has a
/// gradient, and keeps its own step count for bias correction, so critics that
/// join late start with fresh moments and no weight decay before then.
#[derive(Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    vars: Vec<(String, Var)>,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            vars,
            state: HashMap::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |m| m.steps)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let OptimConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            weight_decay: wd,
            eps,
        } = self.cfg;
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let theta = var.as_tensor().detach();
            let st = match self.state.remove(name) {
                Some(s) => s,
                None => Moments {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                    steps: 0,
                },
            };
            let steps = st.steps + 1;
            let m = ((&st.m * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((&st.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&m / (1.0 - b1.powi(steps as i32)))?;
            let v_hat = (&v / (1.0 - b2.powi(steps as i32)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = ((theta * (1.0 - lr * wd))? - (update * lr)?)?;
            var.set(&next)?;
            self.state.insert(name.clone(), Moments { m, v, steps });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = HashMap::new();
        for (name, s) in &self.state {
            out.insert(format!("{name}.m"), s.m.clone());
            out.insert(format!("{name}.v"), s.v.clone());
            out.insert(
                format!("{name}.steps"),
                Tensor::new(&[s.steps as f64], s.m.device())?,
            );
        }
        candle::safetensors::save(&out, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>, device: &Device) -> Result<()> {
        let path = path.as_ref();
        let mut data = candle::safetensors::load(path, device)?;
        let mut state = HashMap::new();
        for (name, var) in &self.vars {
            let (Some(m), Some(v), Some(steps)) = (
                data.remove(&format!("{name}.m")),
                data.remove(&format!("{name}.v")),
                data.remove(&format!("{name}.steps")),
            ) else {
                continue;
            };
            if m.dims() != var.dims() || v.dims() != var.dims() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("optimizer state for {name} has the wrong shape"),
                });
            }
            let steps = steps.to_dtype(DType::F64)?.to_vec1::<f64>()?[0] as u64;
            state.insert(name.clone(), Moments { m, v, steps });
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("{} optimizer entries match no variable", data.len()),
            });
        }
        self.state = state;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_with_zero_beta1_moves_by_lr() {
        // With β1 = 0 the bias-corrected update is g/(|g| + eps) ≈ sign(g).
        let dev = Device::Cpu;
        let x = Var::new(&[1.0f32, -2.0], &dev).unwrap();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        let loss = (x.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = x.as_tensor().to_vec1::<f32>().unwrap();
        assert!((v[0] - (1.0 - 1e-4)).abs() < 1e-7);
        assert!((v[1] - (-2.0 - 1e-4)).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay() {
        let dev = Device::Cpu;
        let x = Var::new(&[2.0f64], &dev).unwrap();
        let cfg = OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        // unit gradient: θ(1 − lr·wd) − lr·g/(|g| + eps)
        let loss = x.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let expected = 2.0 * (1.0 - 0.05) - 0.1 / (1.0 + 1e-8);
        assert!((x.as_tensor().to_vec1::<f64>().unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn untouched_vars_stay_put() {
        let dev = Device::Cpu;
        let a = Var::new(&[1.0f32], &dev).unwrap();
        let b = Var::new(&[1.0f32], &dev).unwrap();
        let mut opt = AdamW::new(
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            OptimConfig::default(),
        )
        .unwrap();
        let loss = a.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0]);
        assert_eq!(opt.steps("a"), 1);
        assert_eq!(opt.steps("b"), 0);
    }

    #[test]
    fn state_round_trip_gives_identical_trajectories() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let run = |resume: bool| -> Vec<f32> {
            let x = Var::new(&[0.5f32, -0.3, 0.8], &dev).unwrap();
            let mut opt = AdamW::new(vec![("x".into(), x.clone())], OptimConfig::default()).unwrap();
            for i in 0..6 {
                if resume && i == 3 {
                    let p = dir.path().join("opt.safetensors");
                    opt.save(&p).unwrap();
                    let mut fresh = AdamW::new(vec![("x".into(), x.clone())], OptimConfig::default()).unwrap();
                    fresh.load(&p, &dev).unwrap();
                    opt = fresh;
                }
                let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap()).unwrap();
            }
            x.as_tensor().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn rejects_bad_betas() {
        let cfg = OptimConfig {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(AdamW::new(vec![], cfg).is_err());
    }
}
