//! Invertible building blocks: volume normalization, clamped affine coupling,
//! PLU 1×1 convolution and the dual pyramid coupling block.

mod affine;
mod dual;
mod invconv;
mod volume_norm;

pub use affine::{
    affine_forward, affine_inverse, affine_logdet, AffineNetCache, AffineNetGrads, AffineParamNet,
    AffineParams, ATAN_SCALE,
};
pub use dual::{DualBlockCache, DualCouplingBlock};
pub use invconv::{InvConv1x1, InvConvGrads};
pub use volume_norm::{VnAxis, VolumeNormState};

use crate::error::Result;
use crate::pyramid::PyramidStack;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Whether normalizers use batch statistics (and update running means) or
/// their frozen running means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Eval,
}

/// Borrowed view of a named parameter or buffer.
#[derive(Debug)]
pub struct ParamRef<'a, T> {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable view of a named parameter.
#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: &'static str,
    pub data: &'a mut [T],
}

/// Result of one block's forward map.
#[derive(Clone, Debug)]
pub struct BlockStep<T, C> {
    pub output: PyramidStack<T>,
    /// Summed over the batch.
    pub logdet: T,
    /// Batch statistic for the block's running mean, produced in training.
    pub stat: Option<Tensor4<T>>,
    pub cache: Option<C>,
}

/// An invertible stage over a pyramid with analytic log-determinant and a
/// local vector-Jacobian product.
pub trait FlowBlock<T: Scalar> {
    /// Intermediates needed by [`FlowBlock::backward`].
    type Cache;

    /// Pure forward map; running statistics are reported in the step, not applied.
    fn forward(&self, x: &PyramidStack<T>, phase: Phase, keep_cache: bool) -> Result<BlockStep<T, Self::Cache>>;

    fn inverse(&self, z: &PyramidStack<T>, phase: Phase) -> Result<PyramidStack<T>>;

    /// Fold a training statistic into the running mean.
    fn commit_stat(&mut self, stat: &Tensor4<T>) -> Result<()>;

    /// Replace `grad` (w.r.t. the block output) by the gradient w.r.t. the
    /// block input; returns parameter gradients ordered as [`FlowBlock::param_names`].
    fn backward(&self, cache: &Self::Cache, grad: &mut PyramidStack<T>) -> Result<Vec<Vec<T>>>;

    fn param_names(&self) -> Vec<&'static str>;

    fn cache_bytes(cache: &Self::Cache) -> usize;
}
