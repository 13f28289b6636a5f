use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regerr_core::seed::derive;

use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    TruncNormal(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations in a fixed order.
#[derive(Default)]
pub(crate) struct Registry {
    pub specs: Vec<ParamSpec>,
}

impl Registry {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    /// PyTorch-default conv init: `U(±1/√fan_in)` for weight and bias.
    pub fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize, bias: bool) {
        let bound = 1.0 / ((ci * k * k * k) as f64).sqrt();
        self.push(format!("{name}.weight"), vec![co, ci, k, k, k], Init::Uniform(bound));
        if bias {
            self.push(format!("{name}.bias"), vec![co], Init::Uniform(bound));
        }
    }

    /// Transposed conv weight `[ci, co, 2, 2, 2]`; fan-in counts `co·8`.
    pub fn conv_t(&mut self, name: &str, ci: usize, co: usize) {
        let bound = 1.0 / ((co * 8) as f64).sqrt();
        self.push(format!("{name}.weight"), vec![ci, co, 2, 2, 2], Init::Uniform(bound));
    }

    pub fn linear(&mut self, name: &str, co: usize, ci: usize, bias: bool) {
        let bound = 1.0 / (ci as f64).sqrt();
        self.push(format!("{name}.weight"), vec![co, ci], Init::Uniform(bound));
        if bias {
            self.push(format!("{name}.bias"), vec![co], Init::Uniform(bound));
        }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.weight"), vec![c], Init::Ones);
        self.push(format!("{name}.bias"), vec![c], Init::Zeros);
    }

    pub fn table(&mut self, name: &str, rows: usize, heads: usize) {
        self.push(name.to_string(), vec![rows, heads], Init::TruncNormal(0.02));
    }
}

fn init_values(spec: &ParamSpec, seed: u64) -> Vec<f32> {
    let n: usize = spec.shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[b"init", spec.name.as_bytes()]));
    match spec.init {
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b) as f32).collect(),
        Init::TruncNormal(std) => {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n)
                .map(|_| loop {
                    let v: f64 = dist.sample(&mut rng);
                    if (-2.0..=2.0).contains(&v) {
                        break v as f32;
                    }
                })
                .collect()
        }
        Init::Ones => vec![1.0; n],
        Init::Zeros => vec![0.0; n],
    }
}

/// Named parameter arrays in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Real> ParamStore<T> {
    pub(crate) fn from_parts(names: Vec<String>, values: Vec<Tensor<T>>) -> Self {
        let index = Arc::new(names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect());
        ParamStore { names, values: values.into_iter().map(Arc::new).collect(), index }
    }

    pub(crate) fn initialize(specs: &[ParamSpec], seed: u64) -> ParamStore<T> {
        let names = specs.iter().map(|s| s.name.clone()).collect();
        let values = specs
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), init_values(s, seed).into_iter().map(|v| T::c(v as f64)).collect()))
            .collect();
        ParamStore::from_parts(names, values)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &*self.values[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    /// Mutable access; clones only if a tape still holds the array.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter().map(|v| &**v))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }

    /// Puts every array on `tape` (as leaves when the tape records).
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(), index: self.index.clone() }
    }
}

/// Parameters attached to one tape.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Real> Bound<T> {
    pub fn get(&self, name: &str) -> &Var<T> {
        match self.index.get(name) {
            Some(&i) => &self.vars[i],
            None => panic!("model refers to undeclared parameter {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Var<T>> {
        self.index.get(name).map(|&i| &self.vars[i])
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}
