//! Cell-based supernet with relaxed operation and input-subset selection.

mod arch;
mod geometry;
mod gumbel;
mod primitives;
mod supernet;

pub use arch::{ArchLayout, ArchParams, Categorical, Target};
pub use geometry::{k_subsets, CellKind, Geometry};
pub use gumbel::{anneal, argmax, gumbel_softmax, sample_gumbel, softmax_with_noise, Noise};
pub(crate) use primitives::init_op;
pub use primitives::{apply_op, op_output_shape, relu_conv_affine, DwPw, OpParams, Primitive, ReluConvAffine, N_OPS, PRIMITIVES};
pub use supernet::{
    cell_forward, mixed_op, register, CatWeights, CellLayout, EdgeLayout, Mode, Stem, SuperNet,
};
