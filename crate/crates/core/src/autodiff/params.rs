use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// A value tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named collection of trainable tensors. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, Parameter { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a value; the new tensor must keep the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                node: None,
                detail: alloc::format!("{name}: {:?} -> {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the accumulators; missing names are skipped.
    pub fn accumulate(&mut self, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "accumulate",
                    node: None,
                    detail: alloc::format!("{name}: {:?} vs {:?}", p.grad.shape(), g.shape()),
                });
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> GradMap {
        self.entries.iter().map(|(k, p)| (k.clone(), p.grad.clone())).collect()
    }

    /// Places every value on `graph`, as leaves when `trainable`, else as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| {
                let v = if trainable { graph.leaf(p.value.clone()) } else { graph.constant(p.value.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Order-sensitive bitwise fingerprint of every value.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over names and value bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (k, p) in &self.entries {
            for b in k.bytes() {
                eat(b as u64);
            }
            for x in p.value.data() {
                eat(x.to_bits());
            }
        }
        h
    }
}

/// Graph variables standing in for the entries of a [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}

impl Graph {
    /// `∂loss/∂p` for every bound parameter; unreachable parameters get zeros.
    pub fn gradients(&mut self, loss: Var, params: &Bound) -> Result<GradMap> {
        let vars = params.vars();
        let gs = self.backward(loss, &vars, false)?;
        Ok(params
            .iter()
            .zip(gs)
            .map(|((name, v), g)| {
                let t = match g {
                    Some(g) => self.value(g).clone(),
                    None => Tensor::zeros(self.shape(v)),
                };
                (name.to_string(), t)
            })
            .collect())
    }

    /// Gradients for several parameter groups from one backward pass.
    pub fn gradients_multi(&mut self, loss: Var, groups: &[&Bound]) -> Result<Vec<GradMap>> {
        let vars: Vec<Var> = groups.iter().flat_map(|b| b.vars()).collect();
        let gs = self.backward(loss, &vars, false)?;
        let mut out = Vec::with_capacity(groups.len());
        let mut it = gs.into_iter();
        for b in groups {
            let mut m = GradMap::new();
            for (name, v) in b.iter() {
                let t = match it.next().flatten() {
                    Some(g) => self.value(g).clone(),
                    None => Tensor::zeros(self.shape(v)),
                };
                m.insert(name.to_string(), t);
            }
            out.push(m);
        }
        Ok(out)
    }
}
