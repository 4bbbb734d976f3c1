//! Minimal single-file NIfTI-1 (.nii) reader and writer.
//!
//! Covers what ingestion needs: the 348-byte header with endianness
//! detection via `sizeof_hdr`, 3-D and 4-D images, data types float32,
//! float64 and int16 (with `scl_slope`/`scl_inter` scaling), and voxel
//! sizes from `pixdim`. Orientation fields are parsed but not applied;
//! inputs are assumed registered.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::BrainVolume;

const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;
const DIM_OFFSET: usize = 40;
const DATATYPE_OFFSET: usize = 70;
const BITPIX_OFFSET: usize = 72;
const PIXDIM_OFFSET: usize = 76;
const VOX_OFFSET_OFFSET: usize = 108;
const SCL_SLOPE_OFFSET: usize = 112;
const SCL_INTER_OFFSET: usize = 116;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// A parsed .nii file: one volume for 3-D images, several for 4-D series.
#[derive(Debug, Clone)]
pub struct NiftiSeries {
    pub volumes: Vec<BrainVolume>,
    /// Temporal spacing (pixdim[4]) for 4-D images.
    pub tr_seconds: Option<f64>,
}

struct Header {
    little_endian: bool,
    ndim: usize,
    dim: [usize; 4],
    datatype: i16,
    pixdim: [f64; 5],
    vox_offset: usize,
    scl_slope: f64,
    scl_inter: f64,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(format!(
            "file too short for a NIfTI-1 header: {} bytes",
            bytes.len()
        )));
    }
    let little_endian = match (
        LittleEndian::read_i32(&bytes[0..4]),
        BigEndian::read_i32(&bytes[0..4]),
    ) {
        (348, _) => true,
        (_, 348) => false,
        (le, _) => {
            return Err(Error::format(format!(
                "sizeof_hdr is {le}, expected 348 in either byte order"
            )))
        }
    };
    let magic = &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    if magic != b"n+1\0" {
        return Err(Error::format(format!(
            "bad magic {:?}, expected \"n+1\\0\"",
            String::from_utf8_lossy(magic)
        )));
    }

    let read_i16 = |off: usize| -> i16 {
        if little_endian {
            LittleEndian::read_i16(&bytes[off..off + 2])
        } else {
            BigEndian::read_i16(&bytes[off..off + 2])
        }
    };
    let read_f32 = |off: usize| -> f32 {
        if little_endian {
            LittleEndian::read_f32(&bytes[off..off + 4])
        } else {
            BigEndian::read_f32(&bytes[off..off + 4])
        }
    };

    let ndim = read_i16(DIM_OFFSET);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(format!("dim[0] = {ndim} out of range 1..=7")));
    }
    let ndim = (ndim as usize).min(4);
    let mut dim = [1usize; 4];
    for (i, d) in dim.iter_mut().enumerate().take(ndim) {
        let v = read_i16(DIM_OFFSET + 2 + i * 2);
        if v < 1 {
            return Err(Error::format(format!("dim[{}] = {v} must be >= 1", i + 1)));
        }
        *d = v as usize;
    }

    let datatype = read_i16(DATATYPE_OFFSET);
    let bitpix = read_i16(BITPIX_OFFSET);
    let expected_bits = match datatype {
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        DT_FLOAT64 => 64,
        other => {
            return Err(Error::Unsupported(format!(
                "NIfTI datatype code {other} (supported: 4 = int16, 16 = float32, 64 = float64)"
            )))
        }
    };
    if bitpix != expected_bits {
        return Err(Error::format(format!(
            "bitpix {bitpix} inconsistent with datatype {datatype}"
        )));
    }

    let mut pixdim = [0.0f64; 5];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = read_f32(PIXDIM_OFFSET + i * 4) as f64;
    }
    let vox_offset = read_f32(VOX_OFFSET_OFFSET);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::format(format!("invalid vox_offset {vox_offset}")));
    }

    Ok(Header {
        little_endian,
        ndim,
        dim,
        datatype,
        pixdim,
        vox_offset: vox_offset as usize,
        scl_slope: read_f32(SCL_SLOPE_OFFSET) as f64,
        scl_inter: read_f32(SCL_INTER_OFFSET) as f64,
    })
}

fn decode_voxels(h: &Header, raw: &[u8], count: usize) -> Result<Vec<f32>> {
    let elem = match h.datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        _ => unreachable!("validated in parse_header"),
    };
    if raw.len() < count * elem {
        return Err(Error::format(format!(
            "data section has {} bytes, need {}",
            raw.len(),
            count * elem
        )));
    }
    // scl_slope == 0 means "no scaling" per the format.
    let (slope, inter) = if h.scl_slope != 0.0 {
        (h.scl_slope, h.scl_inter)
    } else {
        (1.0, 0.0)
    };
    let scaled = slope != 1.0 || inter != 0.0;
    let mut out = Vec::with_capacity(count);
    macro_rules! decode {
        ($read:path, $width:expr) => {
            for chunk in raw[..count * $width].chunks_exact($width) {
                let v = $read(chunk) as f64;
                out.push(if scaled { (v * slope + inter) as f32 } else { v as f32 });
            }
        };
    }
    match (h.datatype, h.little_endian) {
        (DT_INT16, true) => decode!(LittleEndian::read_i16, 2),
        (DT_INT16, false) => decode!(BigEndian::read_i16, 2),
        (DT_FLOAT32, true) => decode!(LittleEndian::read_f32, 4),
        (DT_FLOAT32, false) => decode!(BigEndian::read_f32, 4),
        (DT_FLOAT64, true) => decode!(LittleEndian::read_f64, 8),
        (DT_FLOAT64, false) => decode!(BigEndian::read_f64, 8),
        _ => unreachable!(),
    }
    Ok(out)
}

/// Reads a single-file uncompressed .nii image.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiSeries> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    read_nifti_bytes(&bytes)
}

/// Parses .nii content from memory.
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<NiftiSeries> {
    let h = parse_header(bytes)?;
    let (nx, ny, nz) = (h.dim[0], h.dim[1], h.dim[2]);
    let nt = if h.ndim >= 4 { h.dim[3] } else { 1 };
    let voxel_size = [
        positive_or(h.pixdim[1], 1.0),
        positive_or(h.pixdim[2], 1.0),
        positive_or(h.pixdim[3], 1.0),
    ];
    if bytes.len() < h.vox_offset {
        return Err(Error::format("vox_offset beyond end of file".to_string()));
    }
    let raw = &bytes[h.vox_offset..];
    let per_volume = nx * ny * nz;
    let all = decode_voxels(&h, raw, per_volume * nt)?;
    let volumes = all
        .chunks_exact(per_volume)
        .map(|chunk| BrainVolume::new((nx, ny, nz), voxel_size, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(NiftiSeries {
        volumes,
        tr_seconds: if h.ndim >= 4 && h.pixdim[4] > 0.0 {
            Some(h.pixdim[4])
        } else {
            None
        },
    })
}

fn positive_or(v: f64, fallback: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        fallback
    }
}

/// Writes volumes as float32 little-endian .nii (4-D when more than one).
pub fn write_nifti(
    path: impl AsRef<Path>,
    volumes: &[BrainVolume],
    tr_seconds: Option<f64>,
) -> Result<()> {
    let bytes = write_nifti_bytes(volumes, tr_seconds)?;
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Serializes volumes to .nii bytes.
pub fn write_nifti_bytes(volumes: &[BrainVolume], tr_seconds: Option<f64>) -> Result<Vec<u8>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::data("cannot write an empty volume list"))?;
    let (nx, ny, nz) = first.dims;
    for v in volumes {
        if v.dims != first.dims {
            return Err(Error::dimension(format!(
                "inconsistent volume dims: {:?} vs {:?}",
                v.dims, first.dims
            )));
        }
    }
    let nt = volumes.len();
    let vox_offset = 352usize;
    let mut buf = vec![0u8; vox_offset + nx * ny * nz * nt * 4];

    LittleEndian::write_i32(&mut buf[0..4], 348);
    let ndim: i16 = if nt > 1 { 4 } else { 3 };
    LittleEndian::write_i16(&mut buf[DIM_OFFSET..DIM_OFFSET + 2], ndim);
    for (i, d) in [nx, ny, nz, nt].iter().enumerate().take(ndim as usize) {
        LittleEndian::write_i16(
            &mut buf[DIM_OFFSET + 2 + i * 2..DIM_OFFSET + 4 + i * 2],
            *d as i16,
        );
    }
    // Unused trailing dims stay 1 by convention.
    for i in ndim as usize..7 {
        LittleEndian::write_i16(&mut buf[DIM_OFFSET + 2 + i * 2..DIM_OFFSET + 4 + i * 2], 1);
    }
    LittleEndian::write_i16(&mut buf[DATATYPE_OFFSET..DATATYPE_OFFSET + 2], DT_FLOAT32);
    LittleEndian::write_i16(&mut buf[BITPIX_OFFSET..BITPIX_OFFSET + 2], 32);
    LittleEndian::write_f32(&mut buf[PIXDIM_OFFSET..PIXDIM_OFFSET + 4], 1.0);
    for (i, &p) in first.voxel_size_mm.iter().enumerate() {
        LittleEndian::write_f32(
            &mut buf[PIXDIM_OFFSET + 4 + i * 4..PIXDIM_OFFSET + 8 + i * 4],
            p as f32,
        );
    }
    if let Some(tr) = tr_seconds {
        LittleEndian::write_f32(&mut buf[PIXDIM_OFFSET + 16..PIXDIM_OFFSET + 20], tr as f32);
        // xyzt_units: millimetres | seconds.
        buf[123] = 0x02 | 0x08;
    } else {
        buf[123] = 0x02;
    }
    LittleEndian::write_f32(
        &mut buf[VOX_OFFSET_OFFSET..VOX_OFFSET_OFFSET + 4],
        vox_offset as f32,
    );
    LittleEndian::write_f32(&mut buf[SCL_SLOPE_OFFSET..SCL_SLOPE_OFFSET + 4], 1.0);
    LittleEndian::write_f32(&mut buf[SCL_INTER_OFFSET..SCL_INTER_OFFSET + 4], 0.0);
    buf[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");

    let mut off = vox_offset;
    for v in volumes {
        for &x in &v.data {
            LittleEndian::write_f32(&mut buf[off..off + 4], x);
            off += 4;
        }
    }
    Ok(buf)
}
