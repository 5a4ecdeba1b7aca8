//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tape, Tensor, Var};

/// Declared shape of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs feeding each output unit; sets the init range.
    pub fan_in: usize,
    pub init: Init,
}

/// Initial distribution of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform,
    Zeros,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Weight and bias entries for a convolution layer under `prefix`.
    pub fn conv(prefix: &str, spec: &ConvSpec) -> [ParamSpec; 2] {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        [
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: spec.weight_shape().to_vec(),
                fan_in,
                init: Init::HeUniform,
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![spec.out_channels],
                fan_in,
                init: Init::Zeros,
            },
        ]
    }
}

/// Model weights keyed by name. Iteration order is the sorted name order,
/// which is also the checkpoint order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    /// Draws every entry according to its [`Init`], in sorted name order from
    /// a generator seeded with `seed`.
    pub fn init_uniform(specs: &[ParamSpec], seed: u64) -> Self {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::new();
        for spec in sorted {
            let t = match spec.init {
                Init::HeUniform => {
                    let bound = (6.0 / spec.fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(spec.shape.clone(), |_| T::lit(rng.random_range(-bound..bound)))
                }
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
            };
            params.insert(spec.name.clone(), t);
        }
        params
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let mut params = Self::new();
        for spec in specs {
            params.insert(spec.name.clone(), Tensor::zeros(spec.shape.clone()));
        }
        params
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                hit += 1;
            }
        }
        hit
    }

    /// Checks names and shapes against the declared layout.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self
                .get(&spec.name)
                .ok_or_else(|| Error::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape {
                return Err(Error::shape(
                    "params",
                    format!("`{}` is {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
        }
        if self.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self.names().find(|n| !known.contains(n.as_str())).cloned().unwrap_or_default();
            return Err(Error::InvalidParam(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

/// A bound convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: Var,
    pub bias: Var,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, &self.spec, self.weight, self.bias)
    }
}

impl ParamVars {
    /// Binding from vars already on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn conv(&self, prefix: &str, spec: ConvSpec) -> Result<ConvLayer> {
        Ok(ConvLayer {
            spec,
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter after `backward`, zeros where the
    /// loss did not depend on a parameter.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> ModelParams<T> {
        let mut out = ModelParams::new();
        for (name, &v) in &self.vars {
            let shape = tape.shape(v).to_vec();
            let g = match tape.grad(v) {
                Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value"),
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut v = Vec::new();
        v.extend(ParamSpec::conv("b", &ConvSpec::new(2, 3, 3).unwrap()));
        v.extend(ParamSpec::conv("a", &ConvSpec::new(3, 1, 1).unwrap()));
        v
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::<f32>::init_uniform(&specs(), 5);
        let b = ModelParams::<f32>::init_uniform(&specs(), 5);
        let c = ModelParams::<f32>::init_uniform(&specs(), 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f32 / 18.0).sqrt();
        assert!(a.get("b.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("b.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.numel(), 2 * 3 * 9 + 3 + 3 + 1);
        a.check_layout(&specs()).unwrap();
    }

    #[test]
    fn layout_mismatch_detected() {
        let mut p = ModelParams::<f32>::zeros(&specs());
        p.insert("a.weight", Tensor::zeros([1, 3, 3, 3]));
        assert!(p.check_layout(&specs()).is_err());
        let mut p = ModelParams::<f32>::zeros(&specs());
        p.insert("zzz", Tensor::zeros([1]));
        assert!(p.check_layout(&specs()).is_err());
    }
}
