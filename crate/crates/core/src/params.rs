//! Named parameter collections shared by both model families.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    /// Places every parameter on `g` as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t)).collect()
    }

    /// Moves gradients from the bound leaves into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(bound) {
            g.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let t = glorot_uniform(&[10, 20], 10, 20, &mut ChaCha8Rng::seed_from_u64(0));
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn bind_and_accumulate() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let vars = ps.bind(&mut g);
        let sq = g.square(vars[0]);
        let l = g.sum_all(sq);
        g.backward(l).unwrap();
        ps.accumulate_grads(&g, &vars).unwrap();
        assert_eq!(ps.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }
}
