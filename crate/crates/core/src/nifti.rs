//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only the subset needed for scalar 3-D maps is supported: `n+1` magic,
//! int16/float32/float64 element types, and at most a singleton 4th
//! dimension. Anything else is rejected rather than guessed at.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::mask::VolumeGeometry;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const DESCRIP_LEN: usize = 80;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// A scalar volume held as 64-bit reals, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: VolumeGeometry,
    pub data: Vec<f64>,
    pub description: String,
}

impl Volume {
    pub fn new(geometry: VolumeGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.n_voxels() {
            return Err(Error::Geometry(format!(
                "volume has {} values but dims {:?} need {}",
                data.len(),
                geometry.dims,
                geometry.n_voxels()
            )));
        }
        Ok(Self {
            geometry,
            data,
            description: String::new(),
        })
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }
}

/// On-disk element type for [`write_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Float64,
}

#[derive(Clone, Copy)]
enum ByteOrder {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut buf = [0u8; N];
        buf.copy_from_slice(&self.bytes[offset..offset + N]);
        buf
    }

    fn i16(&self, offset: usize) -> i16 {
        let b = self.take::<2>(offset);
        match self.order {
            ByteOrder::Little => i16::from_le_bytes(b),
            ByteOrder::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, offset: usize) -> f32 {
        let b = self.take::<4>(offset);
        match self.order {
            ByteOrder::Little => f32::from_le_bytes(b),
            ByteOrder::Big => f32::from_be_bytes(b),
        }
    }

    fn f64(&self, offset: usize) -> f64 {
        let b = self.take::<8>(offset);
        match self.order {
            ByteOrder::Little => f64::from_le_bytes(b),
            ByteOrder::Big => f64::from_be_bytes(b),
        }
    }
}

fn nifti_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a single-file NIfTI-1 volume, gunzipping if the file is gzip-compressed.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| nifti_err(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    parse_volume(&bytes).map_err(|m| nifti_err(path, m))
}

fn parse_volume(bytes: &[u8]) -> std::result::Result<Volume, String> {
    if bytes.len() < HEADER_SIZE {
        return Err(format!(
            "truncated header ({} bytes, need {HEADER_SIZE})",
            bytes.len()
        ));
    }
    let order = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        ByteOrder::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        ByteOrder::Big
    } else {
        return Err("sizeof_hdr is not 348 in either byte order".into());
    };
    let r = Reader { bytes, order };

    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err("unsupported two-file format (magic \"ni1\")".into()),
        other => return Err(format!("bad magic {other:?}")),
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("dim[0] = {ndim} outside 1..7"));
    }
    let ndim = ndim as usize;
    let mut dims = [1usize; 3];
    for (axis, d) in dims.iter_mut().enumerate().take(ndim.min(3)) {
        let v = r.i16(42 + 2 * axis as usize);
        if v < 1 {
            return Err(format!("dim[{}] = {v} is not positive", axis + 1));
        }
        *d = v as usize;
    }
    for k in 4..=ndim {
        let v = r.i16(40 + 2 * k);
        if v != 1 {
            return Err(format!("dim[{k}] = {v}; only 3-D volumes are supported"));
        }
    }

    let datatype = r.i16(70);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };

    let pixdim: Vec<f64> = (0..8).map(|k| r.f32(76 + 4 * k) as f64).collect();
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(format!("invalid vox_offset {vox_offset}"));
    }
    let vox_offset = vox_offset as usize;
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;

    let descrip = &bytes[148..148 + DESCRIP_LEN];
    let end = descrip.iter().position(|&b| b == 0).unwrap_or(DESCRIP_LEN);
    let description = String::from_utf8_lossy(&descrip[..end]).into_owned();

    let voxel_size = [1, 2, 3].map(|k| {
        let s = pixdim[k].abs();
        if s.is_finite() && s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let affine = read_affine(&r, &pixdim, voxel_size);
    let geometry = VolumeGeometry::new(dims, voxel_size, affine).map_err(|e| e.to_string())?;

    let n = geometry.n_voxels();
    let needed = vox_offset + n * width;
    if bytes.len() < needed {
        return Err(format!(
            "truncated data section ({} bytes, need {needed})",
            bytes.len()
        ));
    }
    let (slope, inter) = if slope != 0.0 && slope.is_finite() {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    } else {
        (1.0, 0.0)
    };
    let mut data = Vec::with_capacity(n);
    for k in 0..n {
        let off = vox_offset + k * width;
        let stored = match datatype {
            DT_INT16 => r.i16(off) as f64,
            DT_FLOAT32 => r.f32(off) as f64,
            _ => r.f64(off),
        };
        let v = if slope == 1.0 && inter == 0.0 { stored } else { stored * slope + inter };
        if !v.is_finite() {
            return Err(format!("non-finite value at voxel {k}"));
        }
        data.push(v);
    }
    Ok(Volume {
        geometry,
        data,
        description,
    })
}

fn read_affine(r: &Reader<'_>, pixdim: &[f64], voxel_size: [f64; 3]) -> [[f64; 4]; 4] {
    let sform_code = r.i16(254);
    let qform_code = r.i16(252);
    let mut affine = [[0.0; 4]; 4];
    affine[3][3] = 1.0;
    if sform_code >= 1 {
        for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
            for col in 0..4 {
                affine[row][col] = r.f32(base + 4 * col) as f64;
            }
        }
    } else if qform_code >= 1 {
        let (b, c, d) = (r.f32(256) as f64, r.f32(260) as f64, r.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [voxel_size[0], voxel_size[1], voxel_size[2] * qfac];
        for row in 0..3 {
            for col in 0..3 {
                affine[row][col] = rot[row][col] * scale[col];
            }
        }
        affine[0][3] = r.f32(268) as f64;
        affine[1][3] = r.f32(272) as f64;
        affine[2][3] = r.f32(276) as f64;
    } else {
        for axis in 0..3 {
            affine[axis][axis] = voxel_size[axis];
        }
    }
    affine
}

/// Writes `volume` as little-endian single-file NIfTI-1; gzipped when `path` ends in `.gz`.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>, element_type: ElementType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(volume, element_type).map_err(|m| nifti_err(path, m))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|ext| ext == "gz");
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(&bytes)
            .and_then(|_| enc.finish())
            .and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

fn encode_volume(volume: &Volume, element_type: ElementType) -> std::result::Result<Vec<u8>, String> {
    let g = &volume.geometry;
    g.validate().map_err(|e| e.to_string())?;
    if volume.data.len() != g.n_voxels() {
        return Err(format!(
            "volume has {} values but dims {:?} need {}",
            volume.data.len(),
            g.dims,
            g.n_voxels()
        ));
    }
    for (i, &v) in volume.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(format!("non-finite value at voxel {i}"));
        }
        if element_type == ElementType::Float32 && v.abs() > f32::MAX as f64 {
            return Err(format!("value {v:e} at voxel {i} overflows float32"));
        }
    }
    for (axis, &d) in g.dims.iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(format!("dim[{}] = {d} exceeds the NIfTI-1 limit", axis + 1));
        }
    }

    let (code, width) = match element_type {
        ElementType::Float32 => (DT_FLOAT32, 4usize),
        ElementType::Float64 => (DT_FLOAT64, 8usize),
    };
    let mut out = vec![0u8; DATA_OFFSET + g.n_voxels() * width];
    let put = |out: &mut [u8], offset: usize, b: &[u8]| out[offset..offset + b.len()].copy_from_slice(b);

    put(&mut out, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        put(&mut out, 40 + 2 * k, &d.to_le_bytes());
    }
    put(&mut out, 70, &code.to_le_bytes());
    put(&mut out, 72, &((width * 8) as i16).to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        g.voxel_size[0] as f32,
        g.voxel_size[1] as f32,
        g.voxel_size[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (k, p) in pixdim.iter().enumerate() {
        put(&mut out, 76 + 4 * k, &p.to_le_bytes());
    }
    put(&mut out, 108, &(DATA_OFFSET as f32).to_le_bytes());
    put(&mut out, 112, &1.0f32.to_le_bytes());
    put(&mut out, 116, &0.0f32.to_le_bytes());
    // xyzt_units: mm
    out[123] = 2;

    let mut descrip = volume.description.as_bytes();
    if descrip.len() > DESCRIP_LEN - 1 {
        let mut cut = DESCRIP_LEN - 1;
        while !volume.description.is_char_boundary(cut) {
            cut -= 1;
        }
        descrip = &descrip[..cut];
    }
    put(&mut out, 148, descrip);

    put(&mut out, 252, &0i16.to_le_bytes());
    put(&mut out, 254, &1i16.to_le_bytes());
    for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
        for col in 0..4 {
            put(&mut out, base + 4 * col, &(g.affine[row][col] as f32).to_le_bytes());
        }
    }
    put(&mut out, 344, b"n+1\0");

    for (k, &v) in volume.data.iter().enumerate() {
        let off = DATA_OFFSET + k * width;
        match element_type {
            ElementType::Float32 => put(&mut out, off, &(v as f32).to_le_bytes()),
            ElementType::Float64 => put(&mut out, off, &v.to_le_bytes()),
        }
    }
    Ok(out)
}
