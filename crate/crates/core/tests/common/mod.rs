//! Helpers shared by the integration test targets.
#![allow(dead_code)]

/// Hand-rolled NIfTI-1 image, written field by field without the crate's
/// encoder.
pub struct RawNifti {
    pub dims: [i16; 3],
    pub pixdim: [f32; 3],
    pub datatype: i16,
    pub bitpix: i16,
    pub slope: f32,
    pub inter: f32,
    pub magic: [u8; 4],
    pub dim0: i16,
    pub big_endian: bool,
    pub data: Vec<u8>,
}

impl RawNifti {
    pub fn int16(dims: [i16; 3], values: &[i16], slope: f32, inter: f32) -> Self {
        Self {
            dims,
            pixdim: [1.0; 3],
            datatype: 4,
            bitpix: 16,
            slope,
            inter,
            magic: *b"n+1\0",
            dim0: 3,
            big_endian: false,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn float32(dims: [i16; 3], values: &[f32]) -> Self {
        Self {
            datatype: 16,
            bitpix: 32,
            slope: 1.0,
            inter: 0.0,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ..Self::int16(dims, &[], 1.0, 0.0)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        let put32 = |b: &mut [u8], o: usize, v: [u8; 4]| b[o..o + 4].copy_from_slice(&v);
        let put16 = |b: &mut [u8], o: usize, v: [u8; 2]| b[o..o + 2].copy_from_slice(&v);
        let be = self.big_endian;
        let i32b = |v: i32| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        let i16b = |v: i16| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        let f32b = |v: f32| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        put32(&mut b, 0, i32b(348));
        put16(&mut b, 40, i16b(self.dim0));
        for (i, d) in self.dims.iter().enumerate() {
            put16(&mut b, 42 + 2 * i, i16b(*d));
        }
        for i in 4..8 {
            put16(&mut b, 40 + 2 * i, i16b(1));
        }
        put16(&mut b, 70, i16b(self.datatype));
        put16(&mut b, 72, i16b(self.bitpix));
        put32(&mut b, 76, f32b(1.0));
        for (i, p) in self.pixdim.iter().enumerate() {
            put32(&mut b, 80 + 4 * i, f32b(*p));
        }
        put32(&mut b, 108, f32b(352.0));
        put32(&mut b, 112, f32b(self.slope));
        put32(&mut b, 116, f32b(self.inter));
        b[344..348].copy_from_slice(&self.magic);
        b.extend_from_slice(&self.data);
        b
    }
}

/// Malformed files and the error kind each must produce.
pub fn malformed_fixtures() -> Vec<(&'static str, Vec<u8>, &'static str)> {
    let good = || RawNifti::float32([2, 2, 2], &[0.0; 8]);
    let mut v = Vec::new();
    v.push(("big_endian", RawNifti { big_endian: true, ..good() }.to_bytes(), "EndiannessUnsupported"));
    v.push(("ni1_pair", RawNifti { magic: *b"ni1\0", ..good() }.to_bytes(), "CorruptHeader"));
    v.push(("bad_magic", RawNifti { magic: *b"abc\0", ..good() }.to_bytes(), "CorruptHeader"));
    v.push(("dim0_4", RawNifti { dim0: 4, ..good() }.to_bytes(), "CorruptHeader"));
    v.push(("zero_dim", RawNifti { dims: [2, 0, 2], ..good() }.to_bytes(), "CorruptHeader"));
    v.push(("float64", RawNifti { datatype: 64, bitpix: 64, ..good() }.to_bytes(), "UnsupportedDatatype"));
    v.push(("uint8", RawNifti { datatype: 2, bitpix: 8, ..good() }.to_bytes(), "UnsupportedDatatype"));
    v.push(("bitpix_mismatch", RawNifti { bitpix: 16, ..good() }.to_bytes(), "CorruptHeader"));
    let mut short = good().to_bytes();
    short.truncate(352 + 20);
    v.push(("truncated_data", short, "TruncatedData"));
    v.push(("truncated_header", good().to_bytes()[..100].to_vec(), "TruncatedData"));
    let mut nan = good();
    nan.data = [f32::NAN; 8].iter().flat_map(|x| x.to_le_bytes()).collect();
    v.push(("nan_voxels", nan.to_bytes(), "NonFiniteInput"));
    v.push(("zero_spacing", RawNifti { pixdim: [1.0, 0.0, 1.0], ..good() }.to_bytes(), "CorruptHeader"));
    v
}
