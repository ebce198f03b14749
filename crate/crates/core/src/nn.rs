//! Layer helpers shared by the tokenizer and the recommender.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bound, Graph, ParameterSet, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// Registers `{prefix}.w` (in×out) and `{prefix}.b` (out).
pub fn init_linear(params: &mut ParameterSet, rng: &mut SeededRng, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let std = 1.0 / libm::sqrt(fan_in as f64);
    params.insert(format!("{prefix}.w"), normal(rng, &[fan_in, fan_out], std))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

/// Layer widths `input, hidden.., output`, registered as `{prefix}.{i}`.
pub fn init_mlp(params: &mut ParameterSet, rng: &mut SeededRng, prefix: &str, widths: &[usize]) -> Result<()> {
    for (i, w) in widths.windows(2).enumerate() {
        init_linear(params, rng, &format!("{prefix}.{i}"), w[0], w[1])?;
    }
    Ok(())
}

/// Linear layers with ReLU between them; the last layer is linear.
pub fn mlp(g: &mut Graph, p: &Bound, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, p, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Inverted dropout mask: kept entries are scaled by `1/(1-rate)`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut SeededRng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    g.mul_const(x, Tensor::new(shape, data)?)
}
