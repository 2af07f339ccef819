//! Uncompressed single-file (and header/image pair) NIfTI-1 reader and a
//! float32 single-file writer.

use std::path::Path;

use super::{Result, SpaceTag, Volume, VolumeError};

pub const NIFTI_HEADER_LEN: usize = 348;
/// Header plus the 4-byte empty extension block.
pub const NIFTI_VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Off-diagonal sform entries above this (relative to the diagonal) count as oblique.
const OBLIQUE_TOL: f64 = 1e-6;

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[off..off + N].try_into().expect("slice of N bytes");
        if !self.little {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.raw(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }
}

/// Read a NIfTI-1 volume; data are converted to f32 with `scl_slope`/`scl_inter`
/// applied when the slope is nonzero.
pub fn nifti_read(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => VolumeError::MissingFile(path.to_path_buf()),
        _ => VolumeError::Io(e),
    })?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(VolumeError::Truncated(format!(
            "{} bytes, header needs {NIFTI_HEADER_LEN}",
            bytes.len()
        )));
    }
    let magic = &bytes[344..348];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(VolumeError::BadMagic),
    };
    let little = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) == 348;
    if !little && i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) != 348 {
        return Err(VolumeError::BadMagic);
    }
    let h = Reader { bytes: &bytes, little };

    let ndim = h.i16(40);
    if ndim != 3 {
        return Err(VolumeError::UnsupportedDim(ndim));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = h.i16(42 + 2 * a);
        if v <= 0 {
            return Err(VolumeError::Invalid(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    let datatype = h.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(VolumeError::UnsupportedDatatype(other)),
    };
    let qfac = h.f32(76);
    let spacing: [f64; 3] = std::array::from_fn(|a| h.f32(80 + 4 * a) as f64);
    let vox_offset = h.f32(108);
    let slope = h.f32(112);
    let inter = h.f32(116);
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);

    let origin = if sform_code > 0 {
        let srow: [[f64; 4]; 3] =
            std::array::from_fn(|r| std::array::from_fn(|c| h.f32(280 + 16 * r + 4 * c) as f64));
        for (r, row) in srow.iter().enumerate() {
            let diag = row[r];
            if diag <= 0.0 {
                return Err(VolumeError::UnsupportedOrientation);
            }
            for (c, v) in row.iter().take(3).enumerate() {
                if c != r && v.abs() > OBLIQUE_TOL * diag {
                    return Err(VolumeError::UnsupportedOrientation);
                }
            }
        }
        [srow[0][3], srow[1][3], srow[2][3]]
    } else if qform_code > 0 {
        let quat = [h.f32(256), h.f32(260), h.f32(264)];
        if quat.iter().any(|q| q.abs() > 1e-6) || qfac < 0.0 {
            return Err(VolumeError::UnsupportedOrientation);
        }
        [h.f32(268) as f64, h.f32(272) as f64, h.f32(276) as f64]
    } else {
        [0.0; 3]
    };

    let n: usize = dims.iter().product();
    let payload_owned;
    let (payload, offset) = if single_file {
        if !(vox_offset.is_finite() && vox_offset >= NIFTI_HEADER_LEN as f32) {
            return Err(VolumeError::Invalid(format!("vox_offset {vox_offset}")));
        }
        (&bytes[..], vox_offset as usize)
    } else {
        payload_owned = std::fs::read(path.with_extension("img"))?;
        (&payload_owned[..], vox_offset.max(0.0) as usize)
    };
    let need = offset + n * width;
    if payload.len() < need {
        return Err(VolumeError::Truncated(format!(
            "payload needs {need} bytes, file has {}",
            payload.len()
        )));
    }
    let p = Reader {
        bytes: &payload[offset..need],
        little,
    };
    let raw: Vec<f32> = match datatype {
        DT_UINT8 => p.bytes.iter().map(|&b| b as f32).collect(),
        DT_INT16 => (0..n).map(|i| p.i16(2 * i) as f32).collect(),
        DT_INT32 => (0..n).map(|i| p.i32(4 * i) as f32).collect(),
        DT_FLOAT32 => (0..n).map(|i| p.f32(4 * i)).collect(),
        DT_FLOAT64 => (0..n).map(|i| f64::from_le_bytes(p.raw(8 * i)) as f32).collect(),
        _ => unreachable!("datatype validated above"),
    };
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data = if scaled {
        raw.into_iter().map(|v| v * slope + inter).collect()
    } else {
        raw
    };
    Volume::new(dims, spacing, origin, data, SpaceTag::Other)
}

/// Write a float32 single-file NIfTI-1 with an sform encoding spacing and origin.
pub fn nifti_write(vol: &Volume, path: &Path) -> Result<()> {
    let mut buf = vec![0u8; NIFTI_VOX_OFFSET + 4 * vol.len()];
    let put_i16 = |b: &mut [u8], off: usize, v: i16| b[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |b: &mut [u8], off: usize, v: f32| b[off..off + 4].copy_from_slice(&v.to_le_bytes());
    buf[0..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    let dims = vol.dims();
    for d in &dims {
        if *d > i16::MAX as usize {
            return Err(VolumeError::Invalid(format!("dimension {d} exceeds the NIfTI-1 limit")));
        }
    }
    put_i16(&mut buf, 40, 3);
    for (a, &d) in dims.iter().enumerate() {
        put_i16(&mut buf, 42 + 2 * a, d as i16);
    }
    for a in 3..7 {
        put_i16(&mut buf, 42 + 2 * a, 1);
    }
    put_i16(&mut buf, 70, DT_FLOAT32);
    put_i16(&mut buf, 72, 32);
    let spacing = vol.spacing();
    let origin = vol.origin();
    put_f32(&mut buf, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut buf, 80 + 4 * a, spacing[a] as f32);
    }
    put_f32(&mut buf, 108, NIFTI_VOX_OFFSET as f32);
    // scl_slope = 0 means "no scaling", which keeps the payload bit-exact.
    put_f32(&mut buf, 112, 0.0);
    put_f32(&mut buf, 116, 0.0);
    buf[123] = 2; // xyzt_units: millimetres
    let descrip = b"fusionseg";
    buf[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut buf, 252, 1);
    put_i16(&mut buf, 254, 1);
    for a in 0..3 {
        put_f32(&mut buf, 268 + 4 * a, origin[a] as f32);
        put_f32(&mut buf, 280 + 16 * a + 4 * a, spacing[a] as f32);
        put_f32(&mut buf, 280 + 16 * a + 12, origin[a] as f32);
    }
    buf[344..348].copy_from_slice(b"n+1\0");
    for (i, v) in vol.data().iter().enumerate() {
        put_f32(&mut buf, NIFTI_VOX_OFFSET + 4 * i, *v);
    }
    std::fs::write(path, buf)?;
    Ok(())
}
