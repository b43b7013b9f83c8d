//! Isotropic resampling and intensity normalization.

use crate::error::{Error, Result};

use super::volume::{Volume, VolumeKind};

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 2000.0;
pub const TARGET_SPACING: [f64; 3] = [1.0; 3];

/// Clips to the HU window and maps it linearly onto [0, 1].
pub fn normalize_hu(v: f32) -> f32 {
    ((v as f64).clamp(HU_MIN, HU_MAX) - HU_MIN) as f32 / (HU_MAX - HU_MIN) as f32
}

pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

/// Source coordinate of each output sample, pixel-centre aligned and clamped.
fn source_coords(len_in: usize, len_out: usize, ratio: f64) -> Vec<f64> {
    (0..len_out)
        .map(|i| ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len_in - 1) as f64))
        .collect()
}

/// Linear resampling of one axis of a (outer, len, inner) array.
fn resample_axis(src: &[f32], outer: usize, len_in: usize, inner: usize, coords: &[f64]) -> Vec<f32> {
    let len_out = coords.len();
    let mut out = vec![0f32; outer * len_out * inner];
    for o in 0..outer {
        for (i, &c) in coords.iter().enumerate() {
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            let f = c - i0 as f64;
            let a = &src[(o * len_in + i0) * inner..][..inner];
            let b = &src[(o * len_in + i1) * inner..][..inner];
            let dst = &mut out[(o * len_out + i) * inner..][..inner];
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = (x as f64 * (1.0 - f) + y as f64 * f) as f32;
            }
        }
    }
    out
}

fn check_spacing(v: &Volume) -> Result<()> {
    if v.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("non-positive spacing {:?}", v.spacing)));
    }
    Ok(())
}

fn regrid(v: &Volume, target: [f64; 3], data: Vec<f32>, dims: [usize; 3]) -> Result<Volume> {
    let mut out = Volume::new(dims, target, data, v.kind)?;
    out.origin = [0, 1, 2].map(|a| v.origin[a] + 0.5 * (target[a] - v.spacing[a]));
    out.orientation = v.orientation.map(|mut o| {
        for row in &mut o.srow {
            for (col, axis) in [(0, 2), (1, 1), (2, 0)] {
                row[col] *= (target[axis] / v.spacing[axis]) as f32;
            }
        }
        o
    });
    Ok(out)
}

/// Trilinear (separable, edge-clamped) resampling to `target` spacing.
pub fn resample_trilinear(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    check_spacing(v)?;
    let [d, h, w] = v.dims();
    let out_dims = resampled_dims(v.dims(), v.spacing, target);
    if out_dims == v.dims() && v.spacing == target {
        return Ok(v.clone());
    }
    let ratio = [0, 1, 2].map(|a| target[a] / v.spacing[a]);
    let [od, oh, ow] = out_dims;
    let x = resample_axis(v.data(), d * h, w, 1, &source_coords(w, ow, ratio[2]));
    let y = resample_axis(&x, d, h, ow, &source_coords(h, oh, ratio[1]));
    let z = resample_axis(&y, 1, d, oh * ow, &source_coords(d, od, ratio[0]));
    regrid(v, target, z, out_dims)
}

/// Nearest-neighbour resampling, used for label volumes.
pub fn resample_nearest(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    check_spacing(v)?;
    let out_dims = resampled_dims(v.dims(), v.spacing, target);
    if out_dims == v.dims() && v.spacing == target {
        return Ok(v.clone());
    }
    let idx = |a: usize| -> Vec<usize> {
        let ratio = target[a] / v.spacing[a];
        (0..out_dims[a])
            .map(|i| (((i as f64 + 0.5) * ratio) as usize).min(v.dims()[a] - 1))
            .collect()
    };
    let (iz, iy, ix) = (idx(0), idx(1), idx(2));
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for &z in &iz {
        for &y in &iy {
            data.extend(ix.iter().map(|&x| v.at(z, y, x)));
        }
    }
    regrid(v, target, data, out_dims)
}

/// Resamples to 1 mm isotropic and maps HU onto [0, 1]. A volume that is
/// already normalized is only resampled and re-clipped.
pub fn preprocess(v: &Volume) -> Result<Volume> {
    let r = resample_trilinear(v, TARGET_SPACING)?;
    let data = match v.kind {
        VolumeKind::Intensity => r.data().iter().map(|&x| normalize_hu(x)).collect(),
        VolumeKind::Normalized => r.data().iter().map(|&x| x.clamp(0.0, 1.0)).collect(),
        other => {
            return Err(Error::InvalidArgument(format!("cannot preprocess a {other} volume")));
        }
    };
    r.with_data(data, VolumeKind::Normalized)
}
