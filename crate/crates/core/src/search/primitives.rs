//! The eight candidate operations of a cell edge and their parameter blocks.

use rand::Rng;

use crate::params::{Param, ParamSet};
use crate::tensor::{ConvSpec, PoolKind, Real, Tape, Tensor, TensorError, Var};

/// Candidate operations, in the fixed order that indexes every op-logit
/// vector. Serialized with checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Zero,
    Identity,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
}

pub const PRIMITIVES: [Primitive; 8] = [
    Primitive::Zero,
    Primitive::Identity,
    Primitive::SepConv3x3,
    Primitive::SepConv5x5,
    Primitive::DilConv3x3,
    Primitive::DilConv5x5,
    Primitive::MaxPool3x3,
    Primitive::AvgPool3x3,
];

pub const N_OPS: usize = PRIMITIVES.len();

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Zero => "none",
            Primitive::Identity => "skip_connect",
            Primitive::SepConv3x3 => "sep_conv_3x3",
            Primitive::SepConv5x5 => "sep_conv_5x5",
            Primitive::DilConv3x3 => "dil_conv_3x3",
            Primitive::DilConv5x5 => "dil_conv_5x5",
            Primitive::MaxPool3x3 => "max_pool_3x3",
            Primitive::AvgPool3x3 => "avg_pool_3x3",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        PRIMITIVES.iter().copied().find(|p| p.name() == name)
    }

    pub fn index(self) -> usize {
        PRIMITIVES.iter().position(|&p| p == self).unwrap()
    }
}

/// ReLU -> conv -> per-channel affine, used for cell-input preprocessing
/// and for the strided skip path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReluConvAffine {
    pub conv: usize,
    pub scale: usize,
    pub shift: usize,
    pub stride: usize,
}

/// Parameter indices (into the weight [`ParamSet`]) owned by one op of one
/// edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpParams {
    None,
    /// `stride` > 1 identity: a strided 1x1 reduction.
    Reduce(ReluConvAffine),
    /// Two depthwise+pointwise stages.
    Sep {
        kernel: usize,
        stages: [DwPw; 2],
    },
    Dil {
        kernel: usize,
        stage: DwPw,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DwPw {
    pub depthwise: usize,
    pub pointwise: usize,
    pub scale: usize,
    pub shift: usize,
}

pub(crate) fn he_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

fn push_affine(w: &mut ParamSet, prefix: &str, suffix: &str, channels: usize) -> (usize, usize) {
    let scale = w.push(Param::new(format!("{prefix}.scale{suffix}"), vec![channels], vec![1.0; channels]));
    let shift = w.push(Param::new(format!("{prefix}.shift{suffix}"), vec![channels], vec![0.0; channels]));
    (scale, shift)
}

pub(crate) fn init_relu_conv_affine<R: Rng + ?Sized>(
    w: &mut ParamSet,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    rng: &mut R,
) -> ReluConvAffine {
    let conv = w.push(Param::from_tensor(
        format!("{prefix}.conv"),
        he_init(&[c_out, c_in, 1, 1], c_in, rng),
    ));
    let (scale, shift) = push_affine(w, prefix, "", c_out);
    ReluConvAffine {
        conv,
        scale,
        shift,
        stride,
    }
}

fn init_dwpw<R: Rng + ?Sized>(
    w: &mut ParamSet,
    prefix: &str,
    suffix: &str,
    c: usize,
    k: usize,
    rng: &mut R,
) -> DwPw {
    let depthwise = w.push(Param::from_tensor(
        format!("{prefix}.dw{suffix}"),
        he_init(&[c, 1, k, k], k * k, rng),
    ));
    let pointwise = w.push(Param::from_tensor(
        format!("{prefix}.pw{suffix}"),
        he_init(&[c, c, 1, 1], c, rng),
    ));
    let (scale, shift) = push_affine(w, prefix, suffix, c);
    DwPw {
        depthwise,
        pointwise,
        scale,
        shift,
    }
}

/// Allocates the parameters of `prim` on an edge with `c` channels.
pub(crate) fn init_op<R: Rng + ?Sized>(
    w: &mut ParamSet,
    prefix: &str,
    prim: Primitive,
    c: usize,
    stride: usize,
    rng: &mut R,
) -> OpParams {
    let prefix = format!("{prefix}.{}", prim.name());
    match prim {
        Primitive::Zero | Primitive::MaxPool3x3 | Primitive::AvgPool3x3 => OpParams::None,
        Primitive::Identity if stride == 1 => OpParams::None,
        Primitive::Identity => OpParams::Reduce(init_relu_conv_affine(w, &prefix, c, c, stride, rng)),
        Primitive::SepConv3x3 | Primitive::SepConv5x5 => {
            let k = if prim == Primitive::SepConv3x3 { 3 } else { 5 };
            OpParams::Sep {
                kernel: k,
                stages: [init_dwpw(w, &prefix, "1", c, k, rng), init_dwpw(w, &prefix, "2", c, k, rng)],
            }
        }
        Primitive::DilConv3x3 | Primitive::DilConv5x5 => {
            let k = if prim == Primitive::DilConv3x3 { 3 } else { 5 };
            OpParams::Dil {
                kernel: k,
                stage: init_dwpw(w, &prefix, "", c, k, rng),
            }
        }
    }
}

pub fn relu_conv_affine<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &ReluConvAffine,
    w: &[Var],
) -> Result<Var, TensorError> {
    let r = tape.relu(x)?;
    let y = tape.conv2d(r, w[p.conv], ConvSpec::new(p.stride, 1, 0))?;
    tape.channel_affine(y, w[p.scale], w[p.shift])
}

/// ReLU -> depthwise conv -> pointwise conv -> affine.
fn dwpw<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    st: &DwPw,
    kernel: usize,
    stride: usize,
    dilation: usize,
    w: &[Var],
) -> Result<Var, TensorError> {
    let channels = tape.value(x)?.shape()[1];
    let r = tape.relu(x)?;
    let d = tape.conv2d(r, w[st.depthwise], ConvSpec::same(kernel, stride, dilation).groups(channels))?;
    let p = tape.conv2d(d, w[st.pointwise], ConvSpec::new(1, 1, 0))?;
    tape.channel_affine(p, w[st.scale], w[st.shift])
}

/// Output shape of any op on an input of `shape` with the given stride.
pub fn op_output_shape(shape: &[usize], stride: usize) -> Vec<usize> {
    vec![shape[0], shape[1], (shape[2] - 1) / stride + 1, (shape[3] - 1) / stride + 1]
}

/// Applies one primitive. Returns `None` for the zero op, whose output is
/// the all-zero tensor of [`op_output_shape`].
pub fn apply_op<T: Real>(
    tape: &mut Tape<T>,
    prim: Primitive,
    params: &OpParams,
    x: Var,
    stride: usize,
    w: &[Var],
) -> Result<Option<Var>, TensorError> {
    let y = match (prim, params) {
        (Primitive::Zero, _) => return Ok(None),
        (Primitive::Identity, OpParams::Reduce(p)) => relu_conv_affine(tape, x, p, w)?,
        (Primitive::Identity, _) => x,
        (Primitive::MaxPool3x3, _) => tape.pool(x, PoolKind::Max, 3, stride, 1)?,
        (Primitive::AvgPool3x3, _) => tape.pool(x, PoolKind::Avg, 3, stride, 1)?,
        (_, OpParams::Sep { kernel, stages }) => {
            let h = dwpw(tape, x, &stages[0], *kernel, stride, 1, w)?;
            dwpw(tape, h, &stages[1], *kernel, 1, 1, w)?
        }
        (_, OpParams::Dil { kernel, stage }) => dwpw(tape, x, stage, *kernel, stride, 2, w)?,
        (p, _) => {
            return Err(TensorError::InvalidArgument {
                op: "apply_op",
                reason: format!("no parameters bound for {}", p.name()),
            })
        }
    };
    Ok(Some(y))
}
