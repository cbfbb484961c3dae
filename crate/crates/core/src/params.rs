//! Named parameter collections shared by the projectors and the decoder.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// An ordered set of named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index. The tensor is marked as
    /// requiring grad.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let t = if t.requires_grad() { t } else { t.with_grad() };
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
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

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Records every parameter as a constant (evaluation only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t)).collect(),
        }
    }

    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces the values of every parameter, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", self.tensors.len(), values.len()),
            ));
        }
        for (name, (dst, src)) in self.names.iter().zip(self.tensors.iter_mut().zip(values)) {
            if dst.shape() != src.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name}: shape {:?} vs {:?}", src.shape(), dst.shape()),
                ));
            }
            *dst = src.with_grad();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            t.validate(n)?;
        }
        Ok(())
    }
}

/// `rows×cols` matrix with entries uniform in `±1/sqrt(fan_in)`.
pub fn uniform_matrix(rng: &mut SeedRng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_backward_accumulate() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::full(vec![2], 3.0));
        ps.push("b", Tensor::full(vec![2], 5.0));
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let p = tape.mul(b.var(0), b.var(1)).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        ps.accumulate(&b, &g).unwrap();
        assert_eq!(ps.get("a").unwrap().grad().unwrap(), &[5.0, 5.0]);
        assert_eq!(ps.get("b").unwrap().grad().unwrap(), &[3.0, 3.0]);
        assert!((ps.grad_norm() - (2.0 * 25.0 + 2.0 * 9.0f64).sqrt()).abs() < 1e-12);
        ps.zero_grad();
        assert_eq!(ps.grad_norm(), 0.0);
    }

    #[test]
    fn load_values_checks_shapes() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::zeros(vec![2, 2]));
        assert!(ps.load_values(vec![Tensor::zeros(vec![4])]).is_err());
        ps.load_values(vec![Tensor::full(vec![2, 2], 1.0)]).unwrap();
        assert!(ps.tensors()[0].requires_grad());
    }
}
