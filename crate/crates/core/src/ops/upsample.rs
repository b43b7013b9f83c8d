//! Trilinear x2 upsampling (align-corners = false, edge-clamped) and its adjoint.

use crate::par;
use crate::tensor::{Real, Shape5, Tensor5};

/// Source indices and weights for each output position along one axis.
fn axis_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// One 1-D upsampling pass along the axis with extent `dims[axis]`.
fn up_axis<T: Real>(src: &[T], dims: [usize; 3], axis: usize) -> (Vec<T>, [usize; 3]) {
    let len = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let taps = axis_taps(len);
    let mut out = vec![T::ZERO; outer * 2 * len * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::from_f64(w0), T::from_f64(w1));
            let dst = &mut out[(o * 2 * len + j) * inner..(o * 2 * len + j + 1) * inner];
            let a = &src[(o * len + i0) * inner..(o * len + i0 + 1) * inner];
            let b = &src[(o * len + i1) * inner..(o * len + i1 + 1) * inner];
            for ((d, &x0), &x1) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * x0 + w1 * x1;
            }
        }
    }
    let mut nd = dims;
    nd[axis] *= 2;
    (out, nd)
}

/// Transpose of [`up_axis`]; `dims` are the small (pre-upsampling) dims.
fn up_axis_adjoint<T: Real>(grad: &[T], dims: [usize; 3], axis: usize) -> Vec<T> {
    let len = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let taps = axis_taps(len);
    let mut out = vec![T::ZERO; outer * len * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::from_f64(w0), T::from_f64(w1));
            let g = &grad[(o * 2 * len + j) * inner..(o * 2 * len + j + 1) * inner];
            for (k, &gv) in g.iter().enumerate() {
                out[(o * len + i0) * inner + k] += w0 * gv;
                out[(o * len + i1) * inner + k] += w1 * gv;
            }
        }
    }
    out
}

pub fn trilinear_upsample2<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let s = x.shape();
    let os = s.with_spatial(2 * s.d, 2 * s.h, 2 * s.w);
    let mut out = Tensor5::zeros(os);
    par::for_each_chunk_mut(out.data_mut(), os.spatial(), |slab, dst| {
        let src = x.slab(slab / s.c, slab % s.c);
        let dims = [s.d, s.h, s.w];
        let (a, dims) = up_axis(src, dims, 2);
        let (b, dims) = up_axis(&a, dims, 1);
        let (c, _) = up_axis(&b, dims, 0);
        dst.copy_from_slice(&c);
    });
    out
}

/// Exact adjoint of [`trilinear_upsample2`]; `input_shape` is the small shape.
pub fn trilinear_upsample2_backward<T: Real>(grad_out: &Tensor5<T>, input_shape: Shape5) -> Tensor5<T> {
    let gs = grad_out.shape();
    let s = input_shape;
    let mut gin = Tensor5::zeros(s);
    par::for_each_chunk_mut(gin.data_mut(), s.spatial(), |slab, dst| {
        let g = grad_out.slab(slab / gs.c, slab % gs.c);
        let a = up_axis_adjoint(g, [s.d, 2 * s.h, 2 * s.w], 0);
        let b = up_axis_adjoint(&a, [s.d, s.h, 2 * s.w], 1);
        let c = up_axis_adjoint(&b, [s.d, s.h, s.w], 2);
        dst.copy_from_slice(&c);
    });
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor5::<f32>::full([1, 2, 2, 3, 4], 5.0);
        let y = trilinear_upsample2(&x);
        assert_eq!(y.shape(), Shape5::new(1, 2, 4, 6, 8));
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn ramp_is_monotone() {
        let x = Tensor5::<f64>::from_vec([1, 1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = trilinear_upsample2(&x);
        let row: Vec<f64> = (0..4).map(|i| y.at(0, 0, 0, 0, i)).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        assert!(row.windows(2).all(|w| w[0] <= w[1]));
    }
}
