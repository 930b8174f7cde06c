//! Flat, named storage for every learnable tensor of a model.
//!
//! Modules keep [`ParamId`] handles; a forward pass binds the whole store
//! onto a [`Graph`] once and looks handles up through [`Bound`].

use rand::Rng;

use crate::error::{DimeError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen entries are bound as constants and never updated.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix `[out, inp]` drawn uniformly from `±sqrt(1 / inp)`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out: usize,
        inp: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / inp as f64).sqrt();
        let data = (0..out * inp).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(vec![out, inp], data).expect("positive extents"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[n]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every value with the entry of the same name and shape in
    /// `values`, which must cover the store exactly.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(DimeError::Input(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut staged = self.params.clone();
        for (name, t) in values {
            let p = staged
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| DimeError::Input(format!("unknown parameter {name}")))?;
            if p.value.shape() != t.shape() {
                return Err(DimeError::dim("load parameter", p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        self.params = staged;
        Ok(())
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Binds with externally supplied values (used by gradient checking).
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len());
        Bound { vars }
    }
}

/// Graph leaves for one bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
