//! Volume I/O: a minimal single-file NIfTI-1 subset and a raw + JSON debug
//! format.
//!
//! Only little-endian `n+1` files with float32 or int16 data are read. The
//! writer always emits float32 with slope 1, intercept 0 and data at byte 352,
//! so a write/read round trip reproduces the values bit for bit. Files whose
//! name ends in `.gz` are transparently (de)compressed.
//!
//! Orientation is not modelled. The origin is taken from `qoffset_*` when
//! `qform_code > 0` and any rotation is ignored; grids are stored as f32 on
//! disk, so geometry survives a round trip only to f32 precision.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{clamp_to_hu_range, Semantics, Volume, VoxelGrid};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

/// The header fields this crate reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub qoffset: [f32; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn for_grid(grid: &VoxelGrid) -> Self {
        let [nx, ny, nz] = grid.dims();
        let [sx, sy, sz] = grid.spacing();
        let [ox, oy, oz] = grid.origin();
        let has_origin = grid.origin() != [0.0; 3];
        Self {
            dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim: [1.0, sx as f32, sy as f32, sz as f32, 0.0, 0.0, 0.0, 0.0],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code: if has_origin { 1 } else { 0 },
            sform_code: 0,
            qoffset: [ox as f32, oy as f32, oz as f32],
            magic: *b"n+1\0",
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        b[38] = b'r';
        for (i, d) in self.dim.iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&self.datatype.to_le_bytes());
        b[72..74].copy_from_slice(&self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        b[108..112].copy_from_slice(&self.vox_offset.to_le_bytes());
        b[112..116].copy_from_slice(&self.scl_slope.to_le_bytes());
        b[116..120].copy_from_slice(&self.scl_inter.to_le_bytes());
        b[123] = 2; // xyzt_units: millimetres
        b[252..254].copy_from_slice(&self.qform_code.to_le_bytes());
        b[254..256].copy_from_slice(&self.sform_code.to_le_bytes());
        for (i, q) in self.qoffset.iter().enumerate() {
            b[268 + 4 * i..272 + 4 * i].copy_from_slice(&q.to_le_bytes());
        }
        b[344..348].copy_from_slice(&self.magic);
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_SIZE {
            return Err(Error::TruncatedData {
                expected: HEADER_SIZE,
                actual: b.len(),
            });
        }
        let i32_at = |o: usize| i32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let i16_at = |o: usize| i16::from_le_bytes(b[o..o + 2].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap());

        let sizeof_hdr = i32_at(0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            if i32::from_be_bytes(b[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
                return Err(Error::EndiannessUnsupported);
            }
            return Err(Error::CorruptHeader(format!(
                "sizeof_hdr is {sizeof_hdr}, expected 348"
            )));
        }
        let magic: [u8; 4] = b[344..348].try_into().unwrap();
        match &magic {
            b"n+1\0" => {}
            b"ni1\0" => {
                return Err(Error::CorruptHeader(
                    "magic \"ni1\": detached .hdr/.img pairs are not supported, use single-file .nii"
                        .into(),
                ))
            }
            other => {
                return Err(Error::CorruptHeader(format!(
                    "bad magic {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = i16_at(40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = f32_at(76 + 4 * i);
        }
        Ok(Self {
            dim,
            datatype: i16_at(70),
            bitpix: i16_at(72),
            pixdim,
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            qoffset: [f32_at(268), f32_at(272), f32_at(276)],
            magic,
        })
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        if self.dim[0] != 3 {
            return Err(Error::CorruptHeader(format!(
                "dim[0] must be 3, got {}",
                self.dim[0]
            )));
        }
        if self.dim[1..4].iter().any(|&d| d < 1) {
            return Err(Error::CorruptHeader(format!(
                "dims must be >= 1, got {:?}",
                &self.dim[1..4]
            )));
        }
        let dims = [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize];
        let spacing = [
            f64::from(self.pixdim[1]),
            f64::from(self.pixdim[2]),
            f64::from(self.pixdim[3]),
        ];
        let origin = if self.qform_code > 0 {
            self.qoffset.map(f64::from)
        } else {
            [0.0; 3]
        };
        VoxelGrid::new(dims, spacing, origin).map_err(|e| Error::CorruptHeader(e.to_string()))
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    if is_gz(path) {
        GzDecoder::new(file)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(buf)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    NiftiHeader::parse(&read_bytes(path.as_ref())?)
}

/// Decodes an in-memory `.nii` image.
pub fn decode_nifti(bytes: &[u8], semantics: Semantics) -> Result<Volume> {
    let hdr = NiftiHeader::parse(bytes)?;
    let grid = hdr.grid()?;
    let (width, expected_bitpix) = match hdr.datatype {
        DT_FLOAT32 => (4usize, 32),
        DT_INT16 => (2usize, 16),
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if hdr.bitpix != expected_bitpix {
        return Err(Error::CorruptHeader(format!(
            "bitpix {} does not match datatype {}",
            hdr.bitpix, hdr.datatype
        )));
    }
    if !(hdr.vox_offset.is_finite() && hdr.vox_offset >= VOX_OFFSET as f32) {
        return Err(Error::CorruptHeader(format!(
            "vox_offset {} is before the end of the header",
            hdr.vox_offset
        )));
    }
    let start = hdr.vox_offset as usize;
    let needed = start + grid.len() * width;
    if bytes.len() < needed {
        return Err(Error::TruncatedData {
            expected: needed,
            actual: bytes.len(),
        });
    }
    let data = &bytes[start..needed];
    let raw: Vec<f32> = match hdr.datatype {
        DT_FLOAT32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        _ => data
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    let (slope, inter) = (hdr.scl_slope, hdr.scl_inter);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let values = if scaled {
        let (s, i) = (f64::from(slope), f64::from(inter));
        raw.iter().map(|&r| (f64::from(r) * s + i) as f32).collect()
    } else {
        raw
    };
    let v = Volume::new(grid, values, semantics)?;
    match semantics {
        Semantics::HounsfieldUnits => clamp_to_hu_range(&v),
        Semantics::MrIntensityArbitrary => Ok(v),
    }
}

/// Reads a `.nii` (or `.nii.gz`) file. HU volumes are clamped on ingest.
pub fn read_volume(path: impl AsRef<Path>, semantics: Semantics) -> Result<Volume> {
    decode_nifti(&read_bytes(path.as_ref())?, semantics)
}

/// Encodes values as a float32 single-file NIfTI image.
pub fn encode_nifti(grid: &VoxelGrid, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: values.len(),
        });
    }
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::NonFiniteInput { count: bad });
    }
    if grid.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidGrid(format!(
            "dims {:?} exceed the NIfTI-1 limit",
            grid.dims()
        )));
    }
    let mut out = Vec::with_capacity(VOX_OFFSET + 4 * values.len());
    out.extend_from_slice(&NiftiHeader::for_grid(grid).to_bytes());
    out.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes raw values; non-finite data is refused before anything touches disk.
pub fn write_values(grid: &VoxelGrid, values: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(grid, values)?;
    let file = File::create(path).map_err(|e| Error::write_io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::write_io(path, e))?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| Error::write_io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::write_io(path, e))?;
        w.flush().map_err(|e| Error::write_io(path, e))?;
    }
    Ok(())
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_values(v.grid(), v.values(), path)
}

/// Sidecar for the raw debug format: `<stem>.json` next to `<stem>.raw`,
/// the latter holding little-endian float32 voxels, x fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub semantics: Semantics,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

pub const RAW_FORMAT: &str = "sct-sentinel-raw";
const RAW_DTYPE: &str = "float32le";

pub fn write_raw(
    v: &Volume,
    stem: impl AsRef<Path>,
    provenance: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let stem = stem.as_ref();
    let g = v.grid();
    let meta = RawMeta {
        format: RAW_FORMAT.into(),
        version: 1,
        dims: g.dims(),
        spacing_mm: g.spacing(),
        origin_mm: g.origin(),
        semantics: v.semantics(),
        dtype: RAW_DTYPE.into(),
        provenance,
    };
    let json_path = stem.with_extension("json");
    let raw_path = stem.with_extension("raw");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&json_path, e))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::write_io(&json_path, e))?;
    let bytes: Vec<u8> = v.values().iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(&raw_path, bytes).map_err(|e| Error::write_io(&raw_path, e))
}

pub fn read_raw(stem: impl AsRef<Path>) -> Result<(Volume, RawMeta)> {
    let stem = stem.as_ref();
    let json_path = stem.with_extension("json");
    let raw_path = stem.with_extension("raw");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: RawMeta = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    if meta.format != RAW_FORMAT || meta.dtype != RAW_DTYPE {
        return Err(Error::CorruptHeader(format!(
            "unsupported raw format {:?} / dtype {:?}",
            meta.format, meta.dtype
        )));
    }
    let grid = VoxelGrid::new(meta.dims, meta.spacing_mm, meta.origin_mm)?;
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != 4 * grid.len() {
        return Err(Error::TruncatedData {
            expected: 4 * grid.len(),
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Volume::new(grid, values, meta.semantics)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = VoxelGrid::new(dims, [0.5, 1.25, 2.0], [0.0; 3]).unwrap();
        let vals = (0..grid.len()).map(|_| rng.random_range(-3000.0f32..3000.0)).collect();
        Volume::new(grid, vals, Semantics::MrIntensityArbitrary).unwrap()
    }

    #[test]
    fn zero_volume_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.nii");
        let v = Volume::filled(VoxelGrid::with_dims([16; 3]).unwrap(), 0.0, Semantics::HounsfieldUnits).unwrap();
        write_volume(&v, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 352 + 4 * 16 * 16 * 16);
    }

    #[test]
    fn roundtrip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(3, [7, 5, 3]);
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p, Semantics::MrIntensityArbitrary).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn origin_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = VoxelGrid::new([4, 4, 4], [1.0; 3], [-90.5, 12.25, 3.0]).unwrap();
        let v = Volume::filled(grid, 1.0, Semantics::MrIntensityArbitrary).unwrap();
        let p = dir.path().join("o.nii");
        write_volume(&v, &p).unwrap();
        assert_eq!(read_volume(&p, Semantics::MrIntensityArbitrary).unwrap(), v);
    }

    #[test]
    fn nan_is_refused_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.nii");
        let g = VoxelGrid::with_dims([2, 2, 2]).unwrap();
        let mut vals = vec![0.0f32; 8];
        vals[5] = f32::NAN;
        assert_eq!(write_values(&g, &vals, &p).unwrap_err().kind(), "NonFiniteInput");
        assert!(!p.exists());
    }

    #[test]
    fn hu_semantics_clamp_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hu.nii");
        let g = VoxelGrid::with_dims([3, 1, 1]).unwrap();
        write_values(&g, &[-3000.0, 10.0, 5000.0], &p).unwrap();
        let v = read_volume(&p, Semantics::HounsfieldUnits).unwrap();
        assert_eq!(v.values(), &[-1024.0, 10.0, 3071.0]);
    }

    #[test]
    fn missing_file_is_input_not_found() {
        let err = read_volume("/nonexistent/x.nii", Semantics::HounsfieldUnits).unwrap_err();
        assert_eq!(err.kind(), "InputNotFound");
    }

    #[test]
    fn raw_format_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(9, [4, 3, 2]);
        let mut prov = serde_json::Map::new();
        prov.insert("source".into(), "unit-test".into());
        write_raw(&v, dir.path().join("vol"), prov.clone()).unwrap();
        let (back, meta) = read_raw(dir.path().join("vol")).unwrap();
        assert_eq!(back, v);
        assert_eq!(meta.provenance, prov);
    }
}
