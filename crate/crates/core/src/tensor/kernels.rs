//! Raw loops behind the differentiable ops. Inner reductions accumulate in `f64`.

use super::{Real, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
            groups: 1,
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Padding that keeps `H' = H / stride` for an odd kernel.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self::new(stride, dilation, dilation * (kernel - 1) / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

fn out_dim(
    op: &'static str,
    dim: &'static str,
    input: usize,
    kernel: usize,
    spec: &ConvSpec,
) -> Result<usize, TensorError> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if span > padded {
        return Err(TensorError::WindowTooLarge {
            op,
            dim,
            window: span,
            padded,
        });
    }
    Ok((padded - span) / spec.stride + 1)
}

pub(crate) fn conv_geom(
    input: &[usize],
    kernel: &[usize],
    spec: ConvSpec,
) -> Result<ConvGeom, TensorError> {
    const OP: &str = "conv2d";
    if input.len() != 4 {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            got: input.len(),
        });
    }
    if kernel.len() != 4 {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            got: kernel.len(),
        });
    }
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "stride, dilation and groups must be positive".into(),
        });
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (f, cg, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: format!("kernel must be odd-sized, got {kh}x{kw}"),
        });
    }
    if c % spec.groups != 0 || f % spec.groups != 0 {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "channels",
            expected: spec.groups,
            got: c,
        });
    }
    if cg != c / spec.groups {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "kernel input channels",
            expected: c / spec.groups,
            got: cg,
        });
    }
    let oh = out_dim(OP, "height", h, kh, &spec)?;
    let ow = out_dim(OP, "width", w, kw, &spec)?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh,
        ow,
        spec,
    })
}

#[inline]
fn src_index(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, lim: usize) -> Option<usize> {
    let pos = (o * stride + k * dilation) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < lim).then_some(pos as usize)
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let s = g.spec;
    let cg = g.c / s.groups;
    let fg = g.f / s.groups;
    let mut out = vec![T::ZERO; g.n * g.f * g.oh * g.ow];
    for n in 0..g.n {
        for f in 0..g.f {
            let grp = f / fg;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0f64;
                    for ci in 0..cg {
                        let c = grp * cg + ci;
                        let xbase = (n * g.c + c) * g.h * g.w;
                        let kbase = (f * cg + ci) * g.kh * g.kw;
                        for i in 0..g.kh {
                            let Some(y) = src_index(oy, i, s.stride, s.dilation, s.padding, g.h) else {
                                continue;
                            };
                            for j in 0..g.kw {
                                let Some(xx) = src_index(ox, j, s.stride, s.dilation, s.padding, g.w) else {
                                    continue;
                                };
                                acc += x[xbase + y * g.w + xx].to_f64() * k[kbase + i * g.kw + j].to_f64();
                            }
                        }
                    }
                    out[((n * g.f + f) * g.oh + oy) * g.ow + ox] = T::from_f64(acc);
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    dy: &[T],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let s = g.spec;
    let cg = g.c / s.groups;
    let fg = g.f / s.groups;
    let mut dx = need_dx.then(|| vec![0f64; x.len()]);
    let mut dk = need_dk.then(|| vec![0f64; k.len()]);
    for n in 0..g.n {
        for f in 0..g.f {
            let grp = f / fg;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = dy[((n * g.f + f) * g.oh + oy) * g.ow + ox].to_f64();
                    if gy == 0.0 {
                        continue;
                    }
                    for ci in 0..cg {
                        let c = grp * cg + ci;
                        let xbase = (n * g.c + c) * g.h * g.w;
                        let kbase = (f * cg + ci) * g.kh * g.kw;
                        for i in 0..g.kh {
                            let Some(y) = src_index(oy, i, s.stride, s.dilation, s.padding, g.h) else {
                                continue;
                            };
                            for j in 0..g.kw {
                                let Some(xx) = src_index(ox, j, s.stride, s.dilation, s.padding, g.w) else {
                                    continue;
                                };
                                let xi = xbase + y * g.w + xx;
                                let ki = kbase + i * g.kw + j;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += gy * k[ki].to_f64();
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[ki] += gy * x[xi].to_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx.map(narrow), dk.map(narrow))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn pool_geom(
    input: &[usize],
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<PoolGeom, TensorError> {
    const OP: &str = "pool";
    if input.len() != 4 {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            got: input.len(),
        });
    }
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "window and stride must be positive".into(),
        });
    }
    if padding >= window {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: format!("padding {padding} must be smaller than window {window}"),
        });
    }
    let spec = ConvSpec::new(stride, 1, padding);
    let oh = out_dim(OP, "height", input[2], window, &spec)?;
    let ow = out_dim(OP, "width", input[3], window, &spec)?;
    Ok(PoolGeom {
        n: input[0],
        c: input[1],
        h: input[2],
        w: input[3],
        window,
        stride,
        padding,
        oh,
        ow,
    })
}

/// Max pooling over in-bounds cells; returns values and the flat argmax of
/// every output (first index in row-major order on ties).
pub(crate) fn max_pool_forward<T: Real>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let total = g.n * g.c * g.oh * g.ow;
    let mut out = Vec::with_capacity(total);
    let mut arg = Vec::with_capacity(total);
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = T::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for i in 0..g.window {
                    let Some(y) = src_index(oy, i, g.stride, 1, g.padding, g.h) else {
                        continue;
                    };
                    for j in 0..g.window {
                        let Some(xx) = src_index(ox, j, g.stride, 1, g.padding, g.w) else {
                            continue;
                        };
                        let idx = base + y * g.w + xx;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Average pooling; the divisor counts only in-bounds cells, so constant
/// inputs map to the same constant everywhere.
pub(crate) fn avg_pool_forward<T: Real>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0f64;
                let mut count = 0usize;
                for i in 0..g.window {
                    let Some(y) = src_index(oy, i, g.stride, 1, g.padding, g.h) else {
                        continue;
                    };
                    for j in 0..g.window {
                        let Some(xx) = src_index(ox, j, g.stride, 1, g.padding, g.w) else {
                            continue;
                        };
                        acc += x[base + y * g.w + xx].to_f64();
                        count += 1;
                    }
                }
                out.push(T::from_f64(acc / count as f64));
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(g: &PoolGeom, dy: &[T]) -> Vec<T> {
    let mut dx = vec![0f64; g.n * g.c * g.h * g.w];
    let mut o = 0;
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let rows: Vec<usize> = (0..g.window)
                    .filter_map(|i| src_index(oy, i, g.stride, 1, g.padding, g.h))
                    .collect();
                let cols: Vec<usize> = (0..g.window)
                    .filter_map(|j| src_index(ox, j, g.stride, 1, g.padding, g.w))
                    .collect();
                let share = dy[o].to_f64() / (rows.len() * cols.len()) as f64;
                for &y in &rows {
                    for &xx in &cols {
                        dx[base + y * g.w + xx] += share;
                    }
                }
                o += 1;
            }
        }
    }
    dx.into_iter().map(T::from_f64).collect()
}
