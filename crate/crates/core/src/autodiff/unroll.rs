//! Total derivative of an outer loss through one plain gradient step of an
//! inner loss:
//!
//! ```text
//! θ′ = θ − η ∇_θ inner(φ, θ)
//! d/dφ outer(φ, θ′)
//! ```

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::params::{Bound, GradMap, ParameterSet};
use crate::error::Result;
use crate::tensor::Tensor;

/// How the second-order term is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnrollMode {
    /// Record the inner backward pass and differentiate through it.
    #[default]
    Recorded,
    /// `∂outer/∂φ − η (∂²inner/∂φ∂θ)ᵀ ∇_θ′ outer`, with the mixed second
    /// derivative applied as a Hessian-vector product.
    HessianVector,
}

/// One plain descent step `θ′ = θ − η g` built on the graph. Parameters
/// without a gradient keep their variable.
pub fn tentative_step(graph: &mut Graph, theta: &Bound, grads: &[Option<Var>], eta: f64) -> Result<Bound> {
    let mut out = BTreeMap::new();
    for ((name, v), g) in theta.iter().zip(grads) {
        let nv = match g {
            Some(g) if eta != 0.0 => {
                let step = graph.scale(*g, -eta);
                graph.add(v, step)?
            }
            _ => v,
        };
        out.insert(name.to_string(), nv);
    }
    Ok(Bound::from_vars(out))
}

/// `d/dφ outer(φ, θ − η ∇_θ inner(φ, θ))`.
pub fn unrolled_gradient<O, I>(
    outer: O,
    inner: I,
    theta: &ParameterSet,
    phi: &ParameterSet,
    eta: f64,
    mode: UnrollMode,
) -> Result<GradMap>
where
    O: Fn(&mut Graph, &Bound, &Bound) -> Result<Var>,
    I: Fn(&mut Graph, &Bound, &Bound) -> Result<Var>,
{
    match mode {
        UnrollMode::Recorded => {
            let mut g = Graph::new();
            let pb = phi.bind(&mut g, true);
            let tb = theta.bind(&mut g, true);
            let tb_next = if eta == 0.0 {
                tb
            } else {
                let inner_loss = inner(&mut g, &pb, &tb)?;
                let gt = g.backward(inner_loss, &tb.vars(), true)?;
                tentative_step(&mut g, &tb, &gt, eta)?
            };
            let outer_loss = outer(&mut g, &pb, &tb_next)?;
            g.gradients(outer_loss, &pb)
        }
        UnrollMode::HessianVector => {
            let mut g = Graph::new();
            let pb = phi.bind(&mut g, true);
            let tb = theta.bind(&mut g, true);
            let inner_loss = inner(&mut g, &pb, &tb)?;
            let gt = g.backward(inner_loss, &tb.vars(), true)?;

            let mut theta_next = theta.clone();
            for ((name, _), gv) in tb.iter().zip(&gt) {
                if let Some(gv) = gv {
                    let cur = theta.value(name)?;
                    let stepped = cur.zip_map(g.value(*gv), |t, d| t - eta * d);
                    theta_next.set_value(name, stepped)?;
                }
            }

            let mut og = Graph::new();
            let opb = phi.bind(&mut og, true);
            let otb = theta_next.bind(&mut og, true);
            let outer_loss = outer(&mut og, &opb, &otb)?;
            let grads = og.gradients_multi(outer_loss, &[&opb, &otb])?;
            let (direct, v) = (&grads[0], &grads[1]);

            // (∂²inner/∂φ∂θ)ᵀ v = ∇_φ ⟨∇_θ inner, v⟩ with v held constant
            let mut terms = Vec::new();
            for ((name, _), gv) in tb.iter().zip(&gt) {
                if let Some(gv) = gv {
                    let vc = g.constant(v[name].clone());
                    let prod = g.mul(*gv, vc)?;
                    terms.push(g.sum(prod));
                }
            }
            if terms.is_empty() || eta == 0.0 {
                return Ok(direct.clone());
            }
            let dot = g.add_all(&terms)?;
            let mixed = g.gradients(dot, &pb)?;
            Ok(direct
                .iter()
                .map(|(k, d)| {
                    let t: Tensor = d.zip_map(&mixed[k], |a, m| a - eta * m);
                    (k.clone(), t)
                })
                .collect())
        }
    }
}

fn accumulate(acc: &mut GradMap, g: GradMap) {
    for (k, t) in g {
        match acc.get_mut(&k) {
            Some(a) => *a = a.zip_map(&t, |x, y| x + y),
            None => {
                acc.insert(k, t);
            }
        }
    }
}

/// [`unrolled_gradient`] for losses that are sums over chunks:
/// `outer = Σ_c outer(c)` over `0..outer_chunks` and likewise for `inner`.
///
/// With [`UnrollMode::HessianVector`] only one chunk's graph is alive at a
/// time, so memory is bounded by the chunk size. [`UnrollMode::Recorded`]
/// sums every chunk on one graph.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_gradient_chunked<O, I>(
    outer: O,
    outer_chunks: usize,
    inner: I,
    inner_chunks: usize,
    theta: &ParameterSet,
    phi: &ParameterSet,
    eta: f64,
    mode: UnrollMode,
) -> Result<GradMap>
where
    O: Fn(&mut Graph, &Bound, &Bound, usize) -> Result<Var>,
    I: Fn(&mut Graph, &Bound, &Bound, usize) -> Result<Var>,
{
    let sum = |g: &mut Graph, f: &dyn Fn(&mut Graph, usize) -> Result<Var>, n: usize| -> Result<Var> {
        let parts = (0..n).map(|c| f(g, c)).collect::<Result<Vec<_>>>()?;
        g.add_all(&parts)
    };
    if mode == UnrollMode::Recorded || (outer_chunks <= 1 && inner_chunks <= 1) {
        let outer = |g: &mut Graph, p: &Bound, t: &Bound| sum(g, &|g, c| outer(g, p, t, c), outer_chunks);
        let inner = |g: &mut Graph, p: &Bound, t: &Bound| sum(g, &|g, c| inner(g, p, t, c), inner_chunks);
        return unrolled_gradient(outer, inner, theta, phi, eta, mode);
    }

    // θ′ from first-order inner gradients
    let mut theta_next = theta.clone();
    if eta != 0.0 {
        let mut gt = GradMap::new();
        for c in 0..inner_chunks {
            let mut g = Graph::new();
            let pb = phi.bind(&mut g, false);
            let tb = theta.bind(&mut g, true);
            let l = inner(&mut g, &pb, &tb, c)?;
            accumulate(&mut gt, g.gradients(l, &tb)?);
        }
        for (name, d) in &gt {
            let stepped = theta.value(name)?.zip_map(d, |t, d| t - eta * d);
            theta_next.set_value(name, stepped)?;
        }
    }

    let (mut direct, mut v) = (GradMap::new(), GradMap::new());
    for c in 0..outer_chunks {
        let mut g = Graph::new();
        let pb = phi.bind(&mut g, true);
        let tb = theta_next.bind(&mut g, true);
        let l = outer(&mut g, &pb, &tb, c)?;
        let mut grads = g.gradients_multi(l, &[&pb, &tb])?.into_iter();
        accumulate(&mut direct, grads.next().unwrap_or_default());
        accumulate(&mut v, grads.next().unwrap_or_default());
    }
    if eta == 0.0 {
        return Ok(direct);
    }

    // Σ_c ∇_φ ⟨∇_θ inner(c), v⟩
    let mut mixed = GradMap::new();
    for c in 0..inner_chunks {
        let mut g = Graph::new();
        let pb = phi.bind(&mut g, true);
        let tb = theta.bind(&mut g, true);
        let l = inner(&mut g, &pb, &tb, c)?;
        let gt = g.backward(l, &tb.vars(), true)?;
        let mut terms = Vec::new();
        for ((name, _), gv) in tb.iter().zip(&gt) {
            if let (Some(gv), Some(vv)) = (gv, v.get(name)) {
                let vc = g.constant(vv.clone());
                let prod = g.mul(*gv, vc)?;
                terms.push(g.sum(prod));
            }
        }
        if terms.is_empty() {
            continue;
        }
        let dot = g.add_all(&terms)?;
        accumulate(&mut mixed, g.gradients(dot, &pb)?);
    }
    Ok(direct
        .iter()
        .map(|(k, d)| {
            let t = match mixed.get(k) {
                Some(m) => d.zip_map(m, |a, m| a - eta * m),
                None => d.clone(),
            };
            (k.clone(), t)
        })
        .collect())
}
