use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Memory tokens appended to each document (`l`).
    pub memory_tokens: usize,
    pub max_positions: usize,
    pub ff_mult: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.layers == 0 || self.memory_tokens == 0 {
            return Err(Error::Config(format!("degenerate model configuration {self:?}")));
        }
        if self.memory_tokens >= self.max_positions {
            return Err(Error::Config(format!(
                "{} memory tokens do not fit in {} positions",
                self.memory_tokens, self.max_positions
            )));
        }
        Ok(())
    }

    /// Shapes of one parameter group, in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, v, f) = (self.hidden, self.vocab_size, self.hidden * self.ff_mult.max(1));
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, h]),
            ("pos_emb".to_string(), vec![self.max_positions, h]),
            ("mem_emb".to_string(), vec![self.memory_tokens, h]),
        ];
        for b in 0..self.layers {
            let p = |n: &str| format!("blk{b}.{n}");
            out.extend([
                (p("ln1.g"), vec![h]),
                (p("ln1.b"), vec![h]),
                (p("attn.wq"), vec![h, h]),
                (p("attn.wk"), vec![h, h]),
                (p("attn.wv"), vec![h, h]),
                (p("attn.wo"), vec![h, h]),
                (p("ln2.g"), vec![h]),
                (p("ln2.b"), vec![h]),
                (p("ff.w1"), vec![h, f]),
                (p("ff.b1"), vec![f]),
                (p("ff.w2"), vec![f, h]),
                (p("ff.b2"), vec![h]),
            ]);
        }
        out.extend([
            ("ln_f.g".to_string(), vec![h]),
            ("ln_f.b".to_string(), vec![h]),
            ("head".to_string(), vec![h, v]),
        ]);
        out
    }
}

/// Named tensors of one parameter group, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::shape("param set", &[names.len()], &[tensors.len()]));
        }
        Ok(Self { names, tensors })
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.shapes() {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name == "tok_emb" {
                Tensor::randn(&shape, 1.0, rng)
            } else if name.ends_with("_emb") {
                Tensor::randn(&shape, 0.1, rng)
            } else {
                let fan_in = shape[0] as f64;
                let scale = if name.ends_with("wo") || name.ends_with("w2") { 0.5 } else { 1.0 };
                Tensor::randn(&shape, scale / fan_in.sqrt(), rng)
            };
            names.push(name);
            tensors.push(t);
        }
        Self { names, tensors }
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t, '_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }

    /// Checks that every tensor matches the configuration's shapes.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.shapes();
        if expected.len() != self.len() {
            return Err(Error::shape("parameter count", &[expected.len()], &[self.len()]));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{n}` has shape {:?}, configuration expects `{name}` {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// A parameter group placed on a tape.
pub struct Bound<'t, 'p> {
    set: &'p ParamSet,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t, '_> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let i = self
            .set
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients aligned with the group's tensors; zero where none flowed.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}
