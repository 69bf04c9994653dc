use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::tape::{Gradients, Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<DenseArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray) -> ParamId {
        self.names.push(name.into());
        self.arrays.push(value);
        ParamId(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[DenseArray] {
        &self.arrays
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.arrays[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: DenseArray) -> Result<()> {
        if value.shape() != self.arrays[id.0].shape() {
            return Err(Error::shape("ParamStore::set", self.arrays[id.0].shape(), value.shape()));
        }
        self.arrays[id.0] = value;
        Ok(())
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(DenseArray::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays.iter().flat_map(|a| a.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("ParamStore::unflatten", &[self.num_scalars()], &[flat.len()]));
        }
        let mut offset = 0;
        for a in &mut self.arrays {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self.arrays.iter().map(|a| tape.var(a.clone())).collect(),
        }
    }

    /// Records every parameter as a non-differentiable constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self.arrays.iter().map(|a| tape.constant(a.clone())).collect(),
        }
    }
}

/// Parameters recorded on a tape.
#[derive(Clone)]
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<DenseArray> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }

    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.gradients(grads).into_iter().flat_map(DenseArray::into_data).collect()
    }
}
