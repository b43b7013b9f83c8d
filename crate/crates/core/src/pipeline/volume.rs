//! Scalar 3-D grids with physical geometry.
//!
//! Axes are stored in (d, h, w) order with w varying fastest, which is the
//! on-disk voxel order of NIfTI (x fastest). `spacing` and `origin` follow
//! the same (z, y, x) order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeKind {
    /// Raw scanner intensities (HU for CT).
    Intensity,
    /// Intensities already clipped and scaled to [0, 1].
    Normalized,
    Probability,
    BinaryMask,
}

impl VolumeKind {
    pub fn name(self) -> &'static str {
        match self {
            VolumeKind::Intensity => "intensity",
            VolumeKind::Normalized => "normalized",
            VolumeKind::Probability => "probability",
            VolumeKind::BinaryMask => "binary-mask",
        }
    }
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            VolumeKind::Intensity,
            VolumeKind::Normalized,
            VolumeKind::Probability,
            VolumeKind::BinaryMask,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Unsupported {
            field: "volume kind",
            value: s.to_string(),
        })
    }
}

/// NIfTI orientation fields, carried from input to output headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    data: Vec<f32>,
    pub kind: VolumeKind,
    pub orientation: Option<Orientation>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape("volume data", dims, data.len()));
        }
        if let Some(s) = spacing.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("voxel spacing {s} must be positive")));
        }
        let v = Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            data,
            kind,
            orientation: None,
        };
        v.check_kind()?;
        Ok(v)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()], kind)
    }

    /// Copies geometry from `self` onto new data of the same dims.
    pub fn with_data(&self, data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        let mut v = Volume::new(self.dims, self.spacing, data, kind)?;
        v.origin = self.origin;
        v.orientation = self.orientation;
        Ok(v)
    }

    pub fn check_kind(&self) -> Result<()> {
        let bad = match self.kind {
            VolumeKind::BinaryMask => self.data.iter().find(|&&v| v != 0.0 && v != 1.0),
            VolumeKind::Probability | VolumeKind::Normalized => {
                self.data.iter().find(|&&v| !(0.0..=1.0).contains(&v))
            }
            VolumeKind::Intensity => self.data.iter().find(|v| !v.is_finite()),
        };
        match bad {
            Some(v) => Err(Error::InvalidArgument(format!("value {v} not valid in a {} volume", self.kind))),
            None => Ok(()),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Shape (1, 1, d, h, w) copy of the data.
    pub fn to_tensor(&self) -> Tensor5<f32> {
        let [d, h, w] = self.dims;
        Tensor5::from_vec([1, 1, d, h, w], self.data.clone()).expect("volume length matches dims")
    }

    /// Zero-extended copy with every axis at least `min_dims`.
    pub fn padded_to(&self, min_dims: [usize; 3]) -> Volume {
        let dims = [0, 1, 2].map(|a| self.dims[a].max(min_dims[a]));
        if dims == self.dims {
            return self.clone();
        }
        let mut data = vec![0.0; dims.iter().product()];
        let [d, h, w] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let src = (z * h + y) * w;
                let dst = (z * dims[1] + y) * dims[2];
                data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Volume { dims, data, ..self.clone() }
    }

    /// Leading `dims` corner of the grid.
    pub fn cropped_to(&self, dims: [usize; 3]) -> Result<Volume> {
        if (0..3).any(|a| dims[a] > self.dims[a]) {
            return Err(Error::shape("crop", self.dims, dims));
        }
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let s = self.index(z, y, 0);
                data.extend_from_slice(&self.data[s..s + dims[2]]);
            }
        }
        Ok(Volume { dims, data, ..self.clone() })
    }

    /// Extracts the block starting at `start` with extent `shape` as (1,1,d,h,w).
    pub fn block(&self, start: [usize; 3], shape: [usize; 3]) -> Tensor5<f32> {
        let [pd, ph, pw] = shape;
        let mut out = Vec::with_capacity(pd * ph * pw);
        for z in 0..pd {
            for y in 0..ph {
                let s = self.index(start[0] + z, start[1] + y, start[2]);
                out.extend_from_slice(&self.data[s..s + pw]);
            }
        }
        Tensor5::from_vec([1, 1, pd, ph, pw], out).expect("block length matches shape")
    }
}
