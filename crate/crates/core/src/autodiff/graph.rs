use alloc::borrow::Cow;
use core::marker::PhantomData;

use super::op::{forward, Op};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Something that can evaluate ops: a recording [`Tape`] or the tape-free
/// [`Eager`] evaluator. Model code is written once against this trait.
pub trait Graph {
    type Value;

    fn constant(&mut self, value: Tensor) -> Self::Value;

    fn apply(&mut self, op: Op, inputs: &[&Self::Value]) -> Result<Self::Value>;
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, value: Tensor) -> Var {
        Tape::constant(self, value)
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let vars: alloc::vec::Vec<Var> = inputs.iter().map(|v| **v).collect();
        Tape::apply(self, op, &vars)
    }
}

/// Evaluates ops directly, recording nothing. Values may borrow existing
/// tensors (typically parameters) for `'a`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager<'a>(PhantomData<&'a ()>);

impl<'a> Eager<'a> {
    pub fn new() -> Self {
        Self(PhantomData)
    }

    pub fn input(value: &'a Tensor) -> Cow<'a, Tensor> {
        Cow::Borrowed(value)
    }
}

impl<'a> Graph for Eager<'a> {
    type Value = Cow<'a, Tensor>;

    fn constant(&mut self, value: Tensor) -> Self::Value {
        Cow::Owned(value)
    }

    fn apply(&mut self, op: Op, inputs: &[&Self::Value]) -> Result<Self::Value> {
        let tensors: alloc::vec::Vec<&Tensor> = inputs.iter().map(|v| v.as_ref()).collect();
        forward(&op, &tensors).map(Cow::Owned)
    }
}
