//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Supported storage types are uint8, int16 and float32. Orientation fields
//! are carried through untouched apart from the pixdim and sform scaling
//! that follows a spacing change.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

use super::volume::{Orientation, Volume, VolumeKind};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
const UNITS_MM: u8 = 2;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: gzip stream: {e}", path.display())))?;
        out
    } else {
        raw
    };
    parse_nifti(&bytes, VolumeKind::Intensity)
}

/// Header fields needed to decode the payload.
struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 4],
    vox_offset: usize,
    slope: f32,
    inter: f32,
    orientation: Orientation,
}

fn parse_header<E: ByteOrder>(b: &[u8]) -> Result<Header> {
    let i16_at = |o: usize| E::read_i16(&b[o..o + 2]);
    let f32_at = |o: usize| E::read_f32(&b[o..o + 4]);

    let ndim = i16_at(40);
    let dim: Vec<i16> = (0..8).map(|i| i16_at(40 + 2 * i)).collect();
    let extra_ok = (4..=ndim.clamp(3, 7) as usize).all(|i| dim[i] == 1);
    if !(3..=7).contains(&ndim) || !extra_ok {
        return Err(Error::Unsupported {
            field: "dim",
            value: format!("{:?}", &dim[..=(ndim.clamp(0, 7) as usize)]),
        });
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::Format(format!("non-positive dimension in dim {:?}", &dim[1..4])));
    }
    let datatype = i16_at(70);
    let expected_bits = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        other => {
            return Err(Error::Unsupported {
                field: "datatype",
                value: other.to_string(),
            })
        }
    };
    let bitpix = i16_at(72);
    if bitpix != expected_bits {
        return Err(Error::Format(format!("bitpix {bitpix} disagrees with datatype {datatype}")));
    }
    let pixdim = [f32_at(76), f32_at(80), f32_at(84), f32_at(88)];
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} inside the header")));
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(280 + 16 * r + 4 * c);
        }
    }
    Ok(Header {
        dims: [dim[3] as usize, dim[2] as usize, dim[1] as usize],
        datatype,
        pixdim,
        vox_offset: vox_offset as usize,
        slope: f32_at(112),
        inter: f32_at(116),
        orientation: Orientation {
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            qfac: if pixdim[0] == -1.0 { -1.0 } else { 1.0 },
            quatern: [f32_at(256), f32_at(260), f32_at(264)],
            qoffset: [f32_at(268), f32_at(272), f32_at(276)],
            srow,
        },
    })
}

/// Decodes an uncompressed NIfTI-1 byte image.
pub fn parse_nifti(b: &[u8], kind: VolumeKind) -> Result<Volume> {
    if b.len() < HEADER_SIZE {
        return Err(Error::Format(format!("header truncated at {} bytes", b.len())));
    }
    let little = match (LittleEndian::read_i32(&b[..4]), BigEndian::read_i32(&b[..4])) {
        (348, _) => true,
        (_, 348) => false,
        (n, _) => return Err(Error::Format(format!("sizeof_hdr {n}, not a NIfTI-1 file"))),
    };
    if &b[344..348] != b"n+1\0" {
        return Err(Error::Unsupported {
            field: "magic",
            value: String::from_utf8_lossy(&b[344..348]).trim_end_matches('\0').to_string(),
        });
    }
    let h = if little {
        parse_header::<LittleEndian>(b)?
    } else {
        parse_header::<BigEndian>(b)?
    };
    let n: usize = h.dims.iter().product();
    let bytes_per = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let need = h.vox_offset + n * bytes_per;
    if b.len() < need {
        return Err(Error::Format(format!(
            "payload truncated: need {need} bytes, file has {}",
            b.len()
        )));
    }
    let payload = &b[h.vox_offset..need];
    let mut data: Vec<f32> = match (h.datatype, little) {
        (DT_UINT8, _) => payload.iter().map(|&v| v as f32).collect(),
        (DT_INT16, true) => payload.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f32).collect(),
        (DT_INT16, false) => payload.chunks_exact(2).map(|c| BigEndian::read_i16(c) as f32).collect(),
        (_, true) => payload.chunks_exact(4).map(LittleEndian::read_f32).collect(),
        (_, false) => payload.chunks_exact(4).map(BigEndian::read_f32).collect(),
    };
    if h.slope != 0.0 && h.slope.is_finite() && (h.slope != 1.0 || h.inter != 0.0) {
        let inter = if h.inter.is_finite() { h.inter } else { 0.0 };
        for v in &mut data {
            *v = *v * h.slope + inter;
        }
    }
    let spacing = [h.pixdim[3] as f64, h.pixdim[2] as f64, h.pixdim[1] as f64];
    let mut v = Volume::new(h.dims, spacing, data, kind)?;
    let q = h.orientation.qoffset;
    v.origin = [q[2] as f64, q[1] as f64, q[0] as f64];
    v.orientation = Some(h.orientation);
    Ok(v)
}

/// Encodes `v` as an uncompressed NIfTI-1 image. Masks are stored as uint8,
/// everything else as float32.
pub fn encode_nifti(v: &Volume) -> Vec<u8> {
    let datatype = if v.kind == VolumeKind::BinaryMask { DT_UINT8 } else { DT_FLOAT32 };
    let bitpix: i16 = if datatype == DT_UINT8 { 8 } else { 32 };
    let [d, h, w] = v.dims();
    let o = v.orientation.unwrap_or(Orientation {
        qform_code: 0,
        sform_code: 0,
        qfac: 1.0,
        quatern: [0.0; 3],
        qoffset: [v.origin[2] as f32, v.origin[1] as f32, v.origin[0] as f32],
        srow: [
            [v.spacing[2] as f32, 0.0, 0.0, v.origin[2] as f32],
            [0.0, v.spacing[1] as f32, 0.0, v.origin[1] as f32],
            [0.0, 0.0, v.spacing[0] as f32, v.origin[0] as f32],
        ],
    });

    let mut hdr = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut hdr[0..4], HEADER_SIZE as i32);
    let dim: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, &x) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..], x);
    }
    LittleEndian::write_i16(&mut hdr[70..], datatype);
    LittleEndian::write_i16(&mut hdr[72..], bitpix);
    let pixdim = [o.qfac, v.spacing[2] as f32, v.spacing[1] as f32, v.spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, &x) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..], x);
    }
    LittleEndian::write_f32(&mut hdr[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0);
    LittleEndian::write_f32(&mut hdr[116..], 0.0);
    hdr[123] = UNITS_MM;
    LittleEndian::write_i16(&mut hdr[252..], o.qform_code);
    LittleEndian::write_i16(&mut hdr[254..], o.sform_code);
    for (i, &x) in o.quatern.iter().chain(&o.qoffset).enumerate() {
        LittleEndian::write_f32(&mut hdr[256 + 4 * i..], x);
    }
    for (r, row) in o.srow.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut hdr[280 + 16 * r + 4 * c..], x);
        }
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut out = hdr;
    out.reserve(v.len() * (bitpix as usize / 8));
    if datatype == DT_UINT8 {
        out.extend(v.data().iter().map(|&x| x as u8));
    } else {
        for &x in v.data() {
            out.write_f32::<LittleEndian>(x).unwrap();
        }
    }
    out
}

pub fn write_nifti(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(v);
    let io = |e| Error::io(path, e);
    if is_gz(path) {
        let file = std::fs::File::create(path).map_err(io)?;
        let mut enc = GzEncoder::new(std::io::BufWriter::new(file), Compression::fast());
        enc.write_all(&bytes).map_err(io)?;
        enc.finish().map_err(io)?.flush().map_err(io)
    } else {
        std::fs::write(path, bytes).map_err(io)
    }
}
