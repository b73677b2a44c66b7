//! Scalar-loop reference implementations, fixture builders and a central
//! finite-difference gradient checker shared by the integration tests.
#![allow(dead_code)]

use candle::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use slmgan::audio::Waveform;
use slmgan::dataset::TrainingData;
use slmgan::synth;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(label: &str) -> ChaCha8Rng {
    slmgan::util::stream_rng(20_240_917, label)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn t64(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

pub fn t32(v: &[f64], shape: &[usize]) -> Tensor {
    t64(v, shape).to_dtype(DType::F32).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// `|a − b| <= tol · max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---- loss oracles -------------------------------------------------------

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn adv_g(fake: &[f64]) -> f64 {
    mean(&fake.iter().map(|s| (s - 1.0) * (s - 1.0)).collect::<Vec<_>>())
}

pub fn adv_d(fake: &[f64], real: &[f64]) -> f64 {
    mean(&fake.iter().map(|s| s * s).collect::<Vec<_>>())
        + mean(&real.iter().map(|s| (s - 1.0) * (s - 1.0)).collect::<Vec<_>>())
}

/// Binary cross-entropy on logits: `−ln σ(z)` for real, `−ln(1 − σ(z))` for fake.
pub fn adv_ce(logits: &[f64], is_real: bool) -> f64 {
    let per: Vec<f64> = logits
        .iter()
        .map(|&z| {
            let p = 1.0 / (1.0 + (-z).exp());
            if is_real {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .collect();
    mean(&per)
}

/// Mean softmax cross-entropy of `(B, S)` logits against labels.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let per: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        })
        .collect();
    mean(&per)
}

pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    mean(&a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
}

pub fn normalize_f0(track: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &v in track {
        if v > 0.0 {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return vec![0.0; track.len()];
    }
    let m = sum / n as f64;
    track.iter().map(|v| v / m).collect()
}

/// Tracks are rows of equal length.
pub fn f0_loss(src: &[Vec<f64>], gen: &[Vec<f64>]) -> f64 {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (s, g) in src.iter().zip(gen) {
        let t = s.len().min(g.len());
        a.extend(normalize_f0(&s[..t]));
        b.extend(normalize_f0(&g[..t]));
    }
    mean_abs_diff(&a, &b)
}

/// `x[b][n][t]`.
pub fn frame_norm(x: &[Vec<Vec<f64>>], b: usize, t: usize) -> f64 {
    x[b].iter().map(|band| band[t].abs()).sum()
}

pub fn norm_loss(x: &[Vec<Vec<f64>>], g: &[Vec<Vec<f64>>]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0;
    for b in 0..x.len() {
        for t in 0..x[b][0].len() {
            acc += (frame_norm(x, b, t) - frame_norm(g, b, t)).abs();
            count += 1;
        }
    }
    acc / count as f64
}

/// Nested `(B, N, T)` view of a flat buffer.
pub fn nest3(v: &[f64], b: usize, n: usize, t: usize) -> Vec<Vec<Vec<f64>>> {
    (0..b)
        .map(|i| (0..n).map(|j| v[(i * n + j) * t..(i * n + j + 1) * t].to_vec()).collect())
        .collect()
}

pub fn nest2(v: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|i| v[i * cols..(i + 1) * cols].to_vec()).collect()
}

/// Stub-critic bCR: critic = per-sample mean, augment = add `shift`.
pub fn bcr_mean_critic(real: &[Vec<f64>], fake: &[Vec<f64>], shift: f64) -> f64 {
    let branch = |rows: &[Vec<f64>]| {
        let d: Vec<f64> = rows
            .iter()
            .map(|r| {
                let a = mean(r);
                let b = mean(&r.iter().map(|v| v + shift).collect::<Vec<_>>());
                (a - b) * (a - b)
            })
            .collect();
        mean(&d)
    };
    branch(real) + branch(fake)
}

pub fn generator_objective(terms: &[(&str, f64)], w: &slmgan::losses::LossWeights) -> f64 {
    let mut total = 0.0;
    for &(name, v) in terms {
        let lambda = match name {
            "adv" => 1.0,
            "advcls" => w.advcls,
            "sty" => w.sty,
            "f0" => w.f0,
            "slm" => w.slm,
            "norm" => w.norm,
            "cyc" => w.cyc,
            other => panic!("unknown term {other}"),
        };
        total += lambda * v;
    }
    total
}

// ---- SLM oracles --------------------------------------------------------

/// `layers[l][t][d]` for one batch element → `out[t][k] = b[k] + Σ_{l,d} x[l][t][d]·w[k][l·768 + d]`.
pub fn project(layers: &[Vec<Vec<f64>>], w: &[Vec<f64>], bias: &[f64]) -> Vec<Vec<f64>> {
    let frames = layers[0].len();
    let dim = layers[0][0].len();
    (0..frames)
        .map(|t| {
            (0..bias.len())
                .map(|k| {
                    let mut acc = bias[k];
                    for (l, layer) in layers.iter().enumerate() {
                        for d in 0..dim {
                            acc += layer[t][d] * w[k][l * dim + d];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Per-layer Frobenius norm of an output-major `(256, 13·768)` weight, normalized.
pub fn importance(w: &[Vec<f64>], n_layers: usize) -> Vec<f64> {
    let dim = w[0].len() / n_layers;
    let mut mags = vec![0.0; n_layers];
    for row in w {
        for (l, m) in mags.iter_mut().enumerate() {
            for d in 0..dim {
                *m += row[l * dim + d] * row[l * dim + d];
            }
        }
    }
    let mags: Vec<f64> = mags.iter().map(|m| m.sqrt()).collect();
    let total: f64 = mags.iter().sum();
    mags.iter().map(|m| m / total).collect()
}

// ---- gradient check -----------------------------------------------------

/// Largest elementwise relative error between the autograd gradient of
/// `f(inputs)` and central differences with step [`FD_STEP`]. Inputs must be
/// f64. The denominator is floored at `1e-6`.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    grad_check_coords(f, inputs, None)
}

/// As [`grad_check`], restricted to the flat coordinates in `coords` (per input).
pub fn grad_check_coords<F>(f: F, inputs: &[Tensor], coords: Option<&[usize]>) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors).backward().unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(flat).unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let base = flat(v.as_tensor());
        let shape = v.dims().to_vec();
        let all: Vec<usize> = (0..base.len()).collect();
        let idx = coords.unwrap_or(&all);
        for &j in idx {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[j] += delta;
                let mut args: Vec<Tensor> = inputs.to_vec();
                args[i] = t64(&p, &shape);
                scalar(&f(&args))
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

// ---- training fixtures ----------------------------------------------------

/// `n` synthetic speakers with `utts` utterances of `seconds` each, in memory.
pub fn synthetic_data(n: usize, utts: usize, seconds: f64, seed: u64) -> TrainingData {
    let roster = synth::roster(n);
    let data: Vec<(String, Vec<Waveform>)> = roster
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let wavs = (0..utts)
                .map(|k| synth::utterance(s, seconds, 22_050, seed * 1_000 + (si * 100 + k) as u64))
                .collect();
            (s.name.clone(), wavs)
        })
        .collect();
    TrainingData::from_waveforms(data).unwrap()
}
