//! Dilated 3-D convolution with zero padding and its adjoints.
//!
//! Every pass unfolds a fixed group of destination rows (im2col) and runs a
//! packed matrix product over it. Row groups depend only on tensor shapes,
//! and per-group results are merged in index order, so outputs are
//! identical for any number of workers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Shape5, Tensor5};

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
    pub stride: [usize; 3],
    pub has_bias: bool,
}

impl ConvSpec {
    /// Isotropic kernel `k` with dilation `r` and "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, r: usize, has_bias: bool) -> Self {
        let pad = r * (k.saturating_sub(1)) / 2;
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            dilation: [r; 3],
            padding: [pad; 3],
            stride: [1; 3],
            has_bias,
        }
    }

    pub fn weight_shape(&self) -> Shape5 {
        Shape5::new(
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        )
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Effective extent of the dilated kernel along each axis.
    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| kernel_extent(self.kernel[a], self.dilation[a]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dilation must be positive, got {:?}",
                self.dilation
            )));
        }
        if self.kernel.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "kernel must be positive, got {:?}",
                self.kernel
            )));
        }
        if self.stride != [1; 3] {
            return Err(Error::Unsupported {
                field: "conv stride",
                value: format!("{:?}", self.stride),
            });
        }
        Ok(())
    }

    /// Output spatial dims for an input of spatial dims `dims`.
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = dims[a] + 2 * self.padding[a];
            let ext = kernel_extent(self.kernel[a], self.dilation[a]);
            if span < ext {
                return Err(Error::InvalidArgument(format!(
                    "padded input {span} smaller than kernel extent {ext} on axis {a}"
                )));
            }
            out[a] = span - ext + 1;
        }
        Ok(out)
    }

    fn tap_offsets(&self) -> Vec<[isize; 3]> {
        let mut v = Vec::with_capacity(self.taps());
        for kz in 0..self.kernel[0] {
            for ky in 0..self.kernel[1] {
                for kx in 0..self.kernel[2] {
                    let k = [kz, ky, kx];
                    v.push([0, 1, 2].map(|a| {
                        (k[a] * self.dilation[a]) as isize - self.padding[a] as isize
                    }));
                }
            }
        }
        v
    }
}

/// Span of voxels touched by a kernel of size `k` with dilation `r`.
pub fn kernel_extent(k: usize, r: usize) -> usize {
    (k - 1) * r + 1
}

/// Everything the backward pass needs from the forward call.
#[derive(Clone, Debug)]
pub struct ConvContext<T: Real> {
    pub spec: ConvSpec,
    pub input: Tensor5<T>,
    pub weights: Tensor5<T>,
}

fn check_shapes<T: Real>(input: &Tensor5<T>, weights: &Tensor5<T>, bias: Option<&[T]>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape("conv3d weights", weights.shape(), spec.weight_shape()));
    }
    if input.shape().c != spec.in_channels {
        return Err(Error::shape("conv3d input/weights", input.shape(), weights.shape()));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.len() == spec.out_channels => Ok(()),
        (None, false) => Ok(()),
        (b, _) => Err(Error::shape(
            "conv3d bias",
            b.map(|b| b.len()),
            spec.has_bias.then_some(spec.out_channels),
        )),
    }
}

/// Valid destination range `[lo, hi)` along one axis for source offset `off`.
#[inline]
fn valid_range(dst_len: usize, src_len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (src_len as isize - off).min(dst_len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Upper bound on im2col buffer elements per task.
const COL_BUDGET: usize = 1 << 21;

/// Destination rows (z, y) are processed in fixed-size groups that depend
/// only on the shapes, never on the number of workers.
fn row_chunks(k: usize, dd: [usize; 3]) -> Vec<(usize, usize)> {
    let rows = dd[0] * dd[1];
    let per = (COL_BUDGET / (k * dd[2]).max(1)).clamp(1, rows.max(1));
    (0..rows).step_by(per).map(|r0| (r0, (r0 + per).min(rows))).collect()
}

/// One batch item of a correlation source: `channels` slabs of `dims` voxels.
#[derive(Clone, Copy)]
struct Src<'a, T> {
    data: &'a [T],
    dims: [usize; 3],
    channels: usize,
}

impl<T: Real> Src<'_, T> {
    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// True when the unfolded matrix equals the source itself (pointwise kernel).
    fn is_pointwise(&self, offsets: &[[isize; 3]], dd: [usize; 3]) -> bool {
        offsets.len() == 1 && offsets[0] == [0, 0, 0] && self.dims == dd
    }

    /// Unfolds destination rows `[r0, r1)` into `col`, one matrix row per
    /// (source channel, tap), zero where a tap falls outside the source.
    fn im2col(&self, col: &mut Vec<T>, offsets: &[[isize; 3]], dd: [usize; 3], (r0, r1): (usize, usize)) {
        let [sd, sh, sw] = self.dims;
        let (dh, dw) = (dd[1], dd[2]);
        let ncols = (r1 - r0) * dw;
        let vs = self.voxels();
        col.clear();
        col.resize(self.channels * offsets.len() * ncols, T::ZERO);
        for s in 0..self.channels {
            let slab = &self.data[s * vs..(s + 1) * vs];
            for (t, off) in offsets.iter().enumerate() {
                let row = &mut col[(s * offsets.len() + t) * ncols..][..ncols];
                let (lo, hi) = valid_range(dw, sw, off[2]);
                if lo >= hi {
                    continue;
                }
                for r in r0..r1 {
                    let (iz, iy) = ((r / dh) as isize + off[0], (r % dh) as isize + off[1]);
                    if iz < 0 || iz >= sd as isize || iy < 0 || iy >= sh as isize {
                        continue;
                    }
                    let base = (iz as usize * sh + iy as usize) * sw;
                    let so = (base as isize + lo as isize + off[2]) as usize;
                    row[(r - r0) * dw + lo..(r - r0) * dw + hi].copy_from_slice(&slab[so..so + hi - lo]);
                }
            }
        }
    }
}

/// `dst[d, v] = sum_{s,t} wmat[d, s*taps + t] * src[s, v + off_t]` for every
/// batch item, with `dst` pre-filled by `init(channel)`.
fn correlate<T: Real>(
    src: &Tensor5<T>,
    dst_shape: Shape5,
    wmat: &[T],
    offsets: &[[isize; 3]],
    init: impl Fn(usize) -> T + Sync,
) -> Tensor5<T> {
    let ss = src.shape();
    let dd = [dst_shape.d, dst_shape.h, dst_shape.w];
    let (cd, k) = (dst_shape.c, ss.c * offsets.len());
    let chunks = row_chunks(k, dd);
    let tasks: Vec<(usize, (usize, usize))> = (0..ss.n)
        .flat_map(|n| chunks.iter().map(move |&c| (n, c)))
        .collect();
    let per_item = ss.c * ss.spatial();
    let tiles = par::map_range(tasks.len(), |i| {
        let (n, (r0, r1)) = tasks[i];
        let src_n = Src {
            data: &src.data()[n * per_item..(n + 1) * per_item],
            dims: [ss.d, ss.h, ss.w],
            channels: ss.c,
        };
        let ncols = (r1 - r0) * dd[2];
        let mut tile = vec![T::ZERO; cd * ncols];
        if src_n.is_pointwise(offsets, dd) {
            let b = &src_n.data[r0 * dd[2]..];
            T::gemm(cd, k, ncols, wmat, (k, 1), b, (src_n.voxels(), 1), T::ZERO, &mut tile, (ncols, 1));
        } else {
            let mut col = Vec::new();
            src_n.im2col(&mut col, offsets, dd, (r0, r1));
            T::gemm(cd, k, ncols, wmat, (k, 1), &col, (ncols, 1), T::ZERO, &mut tile, (ncols, 1));
        }
        tile
    });
    let mut out = Tensor5::zeros(dst_shape);
    let vd = dst_shape.spatial();
    let data = out.data_mut();
    for ((n, (r0, r1)), tile) in tasks.iter().zip(&tiles) {
        let ncols = (r1 - r0) * dd[2];
        for c in 0..cd {
            let b = init(c);
            let dst = &mut data[(n * cd + c) * vd + r0 * dd[2]..][..ncols];
            for (o, &v) in dst.iter_mut().zip(&tile[c * ncols..(c + 1) * ncols]) {
                *o = b + v;
            }
        }
    }
    out
}

/// Forward dilated convolution: `y[i] = sum_k x[i + r*k - p] w[k] (+ b)`.
pub fn conv3d_forward<T: Real>(
    input: &Tensor5<T>,
    weights: &Tensor5<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    check_shapes(input, weights, bias, spec)?;
    let is = input.shape();
    let od = spec.output_dims([is.d, is.h, is.w])?;
    let os = Shape5::new(is.n, spec.out_channels, od[0], od[1], od[2]);
    Ok(correlate(input, os, weights.data(), &spec.tap_offsets(), |c| {
        bias.map_or(T::ZERO, |b| b[c])
    }))
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor5<T>,
    pub weights: Tensor5<T>,
    pub bias: Option<Vec<T>>,
}

/// Adjoint of [`conv3d_forward`] with respect to the input only.
pub fn conv3d_backward_input<T: Real>(
    grad_out: &Tensor5<T>,
    weights: &Tensor5<T>,
    spec: &ConvSpec,
    input_shape: Shape5,
) -> Tensor5<T> {
    let ntaps = spec.taps();
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let flipped: Vec<[isize; 3]> = spec.tap_offsets().iter().map(|o| o.map(|v| -v)).collect();
    // wt[ic, oc*taps + t] = w[oc, ic, t]
    let w = weights.data();
    let mut wt = Vec::with_capacity(cin * cout * ntaps);
    for ic in 0..cin {
        for oc in 0..cout {
            wt.extend_from_slice(&w[(oc * cin + ic) * ntaps..][..ntaps]);
        }
    }
    correlate(grad_out, input_shape, &wt, &flipped, |_| T::ZERO)
}

/// Weight gradient: `dw[oc,ic,k] = sum_{n,i} g[n,oc,i] x[n,ic,i + r*k - p]`.
pub fn conv3d_backward_weights<T: Real>(grad_out: &Tensor5<T>, input: &Tensor5<T>, spec: &ConvSpec) -> Tensor5<T> {
    let gs = grad_out.shape();
    let is = input.shape();
    let offsets = spec.tap_offsets();
    let (cout, k) = (spec.out_channels, spec.in_channels * offsets.len());
    let dd = [gs.d, gs.h, gs.w];
    let chunks = row_chunks(k, dd);
    let tasks: Vec<(usize, (usize, usize))> = (0..gs.n)
        .flat_map(|n| chunks.iter().map(move |&c| (n, c)))
        .collect();
    let per_item = is.c * is.spatial();
    let partials = par::map_range(tasks.len(), |i| {
        let (n, (r0, r1)) = tasks[i];
        let src = Src {
            data: &input.data()[n * per_item..(n + 1) * per_item],
            dims: [is.d, is.h, is.w],
            channels: is.c,
        };
        let ncols = (r1 - r0) * dd[2];
        let g = &grad_out.data()[n * cout * gs.spatial() + r0 * dd[2]..];
        let mut part = vec![T::ZERO; cout * k];
        if src.is_pointwise(&offsets, dd) {
            let b = &src.data[r0 * dd[2]..];
            T::gemm(cout, ncols, k, g, (gs.spatial(), 1), b, (1, src.voxels()), T::ZERO, &mut part, (k, 1));
        } else {
            let mut col = Vec::new();
            src.im2col(&mut col, &offsets, dd, (r0, r1));
            T::gemm(cout, ncols, k, g, (gs.spatial(), 1), &col, (1, ncols), T::ZERO, &mut part, (k, 1));
        }
        part
    });
    let mut gw = Tensor5::zeros(spec.weight_shape());
    for part in &partials {
        for (a, &b) in gw.data_mut().iter_mut().zip(part) {
            *a += b;
        }
    }
    gw
}

/// Full backward pass given the saved forward context.
pub fn conv3d_backward<T: Real>(grad_out: &Tensor5<T>, saved: Option<&ConvContext<T>>) -> Result<ConvGrads<T>> {
    let ctx = saved.ok_or(Error::MissingContext(0))?;
    let spec = &ctx.spec;
    let is = ctx.input.shape();
    let od = spec.output_dims([is.d, is.h, is.w])?;
    let expect = Shape5::new(is.n, spec.out_channels, od[0], od[1], od[2]);
    if grad_out.shape() != expect {
        return Err(Error::shape("conv3d_backward grad_out", grad_out.shape(), expect));
    }
    let input = conv3d_backward_input(grad_out, &ctx.weights, spec, is);
    let weights = conv3d_backward_weights(grad_out, &ctx.input, spec);
    let bias = spec.has_bias.then(|| bias_grad(grad_out));
    Ok(ConvGrads { input, weights, bias })
}

/// Per-channel sum of `grad_out` over batch and space.
pub fn bias_grad<T: Real>(grad_out: &Tensor5<T>) -> Vec<T> {
    let s = grad_out.shape();
    (0..s.c)
        .map(|c| {
            let mut acc = T::ZERO;
            for n in 0..s.n {
                acc += grad_out.slab(n, c).iter().copied().sum::<T>();
            }
            acc
        })
        .collect()
}
