//! 2x2x2 max pooling.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor5};

/// Pooled tensor plus, per output voxel, the flat in-slab index of the winner.
#[derive(Clone, Debug)]
pub struct PoolOutput<T: Real> {
    pub output: Tensor5<T>,
    pub argmax: Vec<u32>,
}

pub fn maxpool3d<T: Real>(x: &Tensor5<T>) -> Result<PoolOutput<T>> {
    let s = x.shape();
    for (axis, len) in [("depth", s.d), ("height", s.h), ("width", s.w)] {
        if len % 2 != 0 {
            return Err(Error::NotDivisible { axis, len, divisor: 2 });
        }
    }
    let (od, oh, ow) = (s.d / 2, s.h / 2, s.w / 2);
    let os = s.with_spatial(od, oh, ow);
    let mut out = Tensor5::zeros(os);
    let mut argmax = vec![0u32; os.numel()];
    let osp = os.spatial();
    // pair each output slab with its argmax slab
    let mut pairs: Vec<(&mut [T], &mut [u32])> = out
        .data_mut()
        .chunks_mut(osp)
        .zip(argmax.chunks_mut(osp))
        .collect();
    let fill = |slab: usize, (dst, idx): &mut (&mut [T], &mut [u32])| {
        let src = x.slab(slab / s.c, slab % s.c);
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((2 * z + dz) * s.h + 2 * y + dy) * s.w + 2 * xo + dx;
                                // strict comparison keeps the lowest flat index on ties
                                if best == usize::MAX || src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    let o = (z * oh + y) * ow + xo;
                    dst[o] = src[best];
                    idx[o] = best as u32;
                }
            }
        }
    };
    par::for_each_chunk_mut(&mut pairs, 1, |slab, p| fill(slab, &mut p[0]));
    Ok(PoolOutput { output: out, argmax })
}

/// Routes each output gradient to its recorded argmax.
pub fn maxpool3d_backward<T: Real>(grad_out: &Tensor5<T>, argmax: &[u32], input_shape: crate::tensor::Shape5) -> Tensor5<T> {
    let gs = grad_out.shape();
    let mut gin = Tensor5::zeros(input_shape);
    let osp = gs.spatial();
    par::for_each_chunk_mut(gin.data_mut(), input_shape.spatial(), |slab, dst| {
        let g = grad_out.slab(slab / gs.c, slab % gs.c);
        let idx = &argmax[slab * osp..(slab + 1) * osp];
        for (&i, &v) in idx.iter().zip(g) {
            dst[i as usize] += v;
        }
    });
    gin
}
