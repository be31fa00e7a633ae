//! Volumetric data: loading, intensity/coordinate normalization and the
//! complete-octree partition into z-curve ordered leaf regions.
//!
//! Axis order is always `(z, y, x)`; voxels are stored z-major with x
//! varying fastest.

use std::io::{Read, Write};

use ndarray::{Array3, ArrayView3, s};

use crate::error::{ConfigError, Error, FormatError, Result};

pub const TVOL_MAGIC: &[u8; 4] = b"TVOL";
pub const TVOL_VERSION: u8 = 1;
const TVOL_HEADER_LEN: usize = 4 + 1 + 1 + 12;

const AXIS_NAMES: [&str; 3] = ["z", "y", "x"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::U16 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::U8),
            1 => Some(Dtype::U16),
            2 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Dtype::F32)
    }

    /// Largest representable value for integer dtypes.
    pub fn integer_max(self) -> Option<f64> {
        match self {
            Dtype::U8 => Some(u8::MAX as f64),
            Dtype::U16 => Some(u16::MAX as f64),
            Dtype::F32 => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
            Dtype::F32 => "f32",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "u8" => Ok(Dtype::U8),
            "u16" => Ok(Dtype::U16),
            "f32" => Ok(Dtype::F32),
            other => Err(format!("unknown dtype {other:?} (expected u8, u16 or f32)")),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A dense 3D grid of intensities together with its raw value range.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    dtype: Dtype,
    d_min: f64,
    d_max: f64,
}

impl Volume {
    /// Wraps an array, validating it against `dtype` and scanning its range.
    pub fn from_array(data: Array3<f32>, dtype: Dtype) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::MalformedInput("volume has a zero-sized axis".into()));
        }
        let mut d_min = f64::INFINITY;
        let mut d_max = f64::NEG_INFINITY;
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::MalformedInput(format!("non-finite intensity {v}")));
            }
            if let Some(max) = dtype.integer_max() {
                if v < 0.0 || f64::from(v) > max || v.fract() != 0.0 {
                    return Err(Error::MalformedInput(format!(
                        "intensity {v} is not a valid {dtype} value"
                    )));
                }
            }
            d_min = d_min.min(f64::from(v));
            d_max = d_max.max(f64::from(v));
        }
        Ok(Self {
            data,
            dtype,
            d_min,
            d_max,
        })
    }

    /// Decodes headerless little-endian voxels in z-major order.
    pub fn load_raw(bytes: &[u8], dims: [usize; 3], dtype: Dtype) -> Result<Self> {
        let count = dims.iter().product::<usize>();
        let expected = count * dtype.bytes_per_voxel();
        if bytes.len() != expected {
            return Err(Error::MalformedInput(format!(
                "raw size mismatch: {} bytes for dims {:?} of {dtype} (expected {expected})",
                bytes.len(),
                dims
            )));
        }
        let values: Vec<f32> = match dtype {
            Dtype::U8 => bytes.iter().map(|&b| f32::from(b)).collect(),
            Dtype::U16 => bytes
                .chunks_exact(2)
                .map(|c| f32::from(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        if dtype == Dtype::F32 && values.iter().any(|v| v.is_nan()) {
            return Err(Error::MalformedInput("NaN in f32 input".into()));
        }
        let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
            .map_err(|e| Error::MalformedInput(e.to_string()))?;
        Self::from_array(data, dtype)
    }

    /// Little-endian raw payload, z-major.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.raw_byte_len());
        for &v in self.data.iter() {
            match self.dtype {
                Dtype::U8 => out.push(v as u8),
                Dtype::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn raw_byte_len(&self) -> usize {
        self.data.len() * self.dtype.bytes_per_voxel()
    }

    pub fn write_tvol<W: Write>(&self, mut w: W) -> Result<()> {
        let [z, y, x] = self.dims();
        w.write_all(TVOL_MAGIC)?;
        w.write_all(&[TVOL_VERSION, self.dtype.code()])?;
        for d in [z, y, x] {
            let d = u32::try_from(d)
                .map_err(|_| Error::MalformedInput(format!("axis size {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.to_raw_bytes())?;
        Ok(())
    }

    pub fn to_tvol_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TVOL_HEADER_LEN + self.raw_byte_len());
        self.write_tvol(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_tvol<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_tvol_bytes(&bytes)
    }

    pub fn from_tvol_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TVOL_MAGIC {
            return Err(FormatError::BadMagic { expected: "TVOL" }.into());
        }
        if bytes.len() < TVOL_HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: TVOL_HEADER_LEN,
                actual: bytes.len(),
            }
            .into());
        }
        if bytes[4] != TVOL_VERSION {
            return Err(FormatError::UnsupportedVersion(bytes[4]).into());
        }
        let dtype = Dtype::from_code(bytes[5])
            .ok_or_else(|| FormatError::Malformed(format!("unknown dtype code {}", bytes[5])))?;
        let mut dims = [0usize; 3];
        for (a, d) in dims.iter_mut().enumerate() {
            let o = 6 + 4 * a;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        let expected = TVOL_HEADER_LEN + dims.iter().product::<usize>() * dtype.bytes_per_voxel();
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes {
                extra: bytes.len() - expected,
            }
            .into());
        }
        Self::load_raw(&bytes[TVOL_HEADER_LEN..], dims, dtype)
    }

    /// `(Dz, Dy, Dx)`.
    pub fn dims(&self) -> [usize; 3] {
        let (z, y, x) = self.data.dim();
        [z, y, x]
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: [usize; 3]) -> f32 {
        self.data[idx]
    }

    pub fn region_view(&self, region: &Region) -> ArrayView3<'_, f32> {
        self.data.slice(s![
            region.lo[0]..region.hi[0],
            region.lo[1]..region.hi[1],
            region.lo[2]..region.hi[2]
        ])
    }

    /// Normalized target in `[0, 100]` for the voxel at `idx`.
    pub fn normalized(&self, idx: [usize; 3]) -> f64 {
        normalize_intensity(f64::from(self.data[idx]), self.d_min, self.d_max)
    }

    /// Peak signal value used by PSNR/SSIM: full dtype range for integers,
    /// the observed range for floats.
    pub fn peak(&self) -> f64 {
        match self.dtype.integer_max() {
            Some(max) => max,
            None => self.d_max - self.d_min,
        }
    }
}

/// Maps a voxel index to `[-1, 1]`, grid endpoints landing exactly on ±1.
/// A size-1 axis maps to 0.
pub fn normalize_coord(index: [usize; 3], dims: [usize; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = axis_coord(index[a], dims[a]);
    }
    out
}

#[inline]
pub fn axis_coord(index: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * index as f64 / (size - 1) as f64
    }
}

/// Maps a raw intensity in `[d_min, d_max]` to `[0, 100]`. Constant volumes map to 0.
pub fn normalize_intensity(d: f64, d_min: f64, d_max: f64) -> f64 {
    if d_max <= d_min {
        0.0
    } else {
        100.0 * (d - d_min) / (d_max - d_min)
    }
}

/// Inverse of [`normalize_intensity`]: clamps to the raw range and rounds
/// to the nearest integer for integer dtypes.
pub fn denormalize_intensity(value: f64, d_min: f64, d_max: f64, dtype: Dtype) -> f32 {
    if d_max <= d_min {
        return d_min as f32;
    }
    let raw = if value.is_finite() {
        (d_min + value / 100.0 * (d_max - d_min)).clamp(d_min, d_max)
    } else {
        d_min
    };
    if dtype.is_integer() {
        raw.round() as f32
    } else {
        raw as f32
    }
}

/// An axis-aligned block of voxels: `lo` inclusive, `hi` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub leaf_index: usize,
}

impl Region {
    pub fn shape(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= idx[a] && idx[a] < self.hi[a])
    }

    /// Voxel index of the `i`-th voxel in z-major order within the region.
    pub fn voxel_at(&self, i: usize) -> [usize; 3] {
        let [_, sy, sx] = self.shape();
        [
            self.lo[0] + i / (sy * sx),
            self.lo[1] + (i / sx) % sy,
            self.lo[2] + i % sx,
        ]
    }
}

/// Interleaves the low `bits` bits of each cell coordinate, x least significant.
pub fn morton_encode(z: usize, y: usize, x: usize, bits: u32) -> usize {
    let mut code = 0usize;
    for b in 0..bits {
        code |= ((x >> b) & 1) << (3 * b);
        code |= ((y >> b) & 1) << (3 * b + 1);
        code |= ((z >> b) & 1) << (3 * b + 2);
    }
    code
}

/// Inverse of [`morton_encode`]; returns `(z, y, x)`.
pub fn morton_decode(code: usize, bits: u32) -> (usize, usize, usize) {
    let (mut z, mut y, mut x) = (0, 0, 0);
    for b in 0..bits {
        x |= ((code >> (3 * b)) & 1) << b;
        y |= ((code >> (3 * b + 1)) & 1) << b;
        z |= ((code >> (3 * b + 2)) & 1) << b;
    }
    (z, y, x)
}

/// Splits the grid into `8^(levels-1)` equal blocks ordered along the z-curve.
pub fn partition_octree(dims: [usize; 3], levels: u32) -> Result<Vec<Region>, ConfigError> {
    if levels == 0 {
        return Err(ConfigError::Invalid("levels must be at least 1".into()));
    }
    let bits = levels - 1;
    let per_axis = 1usize << bits;
    let mut block = [0usize; 3];
    for a in 0..3 {
        if dims[a] == 0 || dims[a] % per_axis != 0 {
            return Err(ConfigError::NotDivisible {
                axis: AXIS_NAMES[a],
                size: dims[a],
                divisor: per_axis,
            });
        }
        block[a] = dims[a] / per_axis;
    }
    let count = per_axis.pow(3);
    Ok((0..count)
        .map(|leaf_index| {
            let (z, y, x) = morton_decode(leaf_index, bits);
            let lo = [z * block[0], y * block[1], x * block[2]];
            Region {
                lo,
                hi: [lo[0] + block[0], lo[1] + block[1], lo[2] + block[2]],
                leaf_index,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn raw_u8_identity() {
        let bytes: Vec<u8> = (0..8).collect();
        let v = Volume::load_raw(&bytes, [2, 2, 2], Dtype::U8).unwrap();
        assert_eq!(v.d_min(), 0.0);
        assert_eq!(v.d_max(), 7.0);
        assert_eq!(v.get([1, 1, 1]), 7.0);
        assert_eq!(v.get([0, 1, 0]), 2.0);
    }

    #[test]
    fn raw_u16_little_endian() {
        let expected: [u16; 8] = [0x0102, 0xff00, 1, 256, 65535, 0, 0x1234, 0x8001];
        let mut bytes = Vec::new();
        for v in expected {
            bytes.push((v & 0xff) as u8);
            bytes.push((v >> 8) as u8);
        }
        let vol = Volume::load_raw(&bytes, [2, 2, 2], Dtype::U16).unwrap();
        let got: Vec<u16> = vol.data().iter().map(|&v| v as u16).collect();
        assert_eq!(got, expected);
        assert_eq!(vol.to_raw_bytes(), bytes);
    }

    #[test]
    fn raw_size_mismatch() {
        let err = Volume::load_raw(&[0u8; 7], [2, 2, 2], Dtype::U8).unwrap_err();
        assert!(matches!(err, Error::MalformedInput(_)));
    }

    #[test]
    fn raw_nan_rejected() {
        let mut bytes = Vec::new();
        for v in [0.0f32, 1.0, f32::NAN, 2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = Volume::load_raw(&bytes, [1, 2, 2], Dtype::F32).unwrap_err();
        assert!(matches!(err, Error::MalformedInput(_)));
    }

    #[test]
    fn tvol_round_trip() {
        let data = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| (z * 100 + y * 10 + x) as f32);
        let v = Volume::from_array(data, Dtype::U16).unwrap();
        let bytes = v.to_tvol_bytes();
        assert_eq!(&bytes[..4], b"TVOL");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &4u32.to_le_bytes());
        assert_eq!(Volume::from_tvol_bytes(&bytes).unwrap(), v);
        assert!(matches!(
            Volume::from_tvol_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn coord_examples() {
        assert_eq!(axis_coord(0, 64), -1.0);
        assert_eq!(axis_coord(63, 64), 1.0);
        assert!((axis_coord(31, 64) - (-1.0 + 62.0 / 63.0)).abs() < 1e-15);
        assert!((axis_coord(31, 64) + 0.015873).abs() < 1e-6);
        assert_eq!(axis_coord(0, 1), 0.0);
    }

    #[test]
    fn intensity_examples() {
        assert_eq!(normalize_intensity(3.0, 3.0, 9.0), 0.0);
        assert_eq!(normalize_intensity(9.0, 3.0, 9.0), 100.0);
        assert_eq!(normalize_intensity(50.0, 0.0, 200.0), 25.0);
        assert_eq!(normalize_intensity(5.0, 5.0, 5.0), 0.0);
        assert_eq!(denormalize_intensity(37.0, 5.0, 5.0, Dtype::U8), 5.0);
        assert_eq!(denormalize_intensity(150.0, 0.0, 200.0, Dtype::U8), 200.0);
        assert_eq!(denormalize_intensity(-3.0, 0.0, 200.0, Dtype::U8), 0.0);
    }

    #[test]
    fn normalization_round_trip_exhaustive_u8() {
        for (lo, hi) in [(0u32, 255u32), (10, 11), (3, 200), (0, 1)] {
            for d in lo..=hi {
                let n = normalize_intensity(d as f64, lo as f64, hi as f64);
                assert_eq!(
                    denormalize_intensity(n, lo as f64, hi as f64, Dtype::U8),
                    d as f32
                );
            }
        }
    }

    #[test]
    fn partition_single_region() {
        let r = partition_octree([64, 64, 64], 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].lo, [0, 0, 0]);
        assert_eq!(r[0].hi, [64, 64, 64]);
    }

    #[test]
    fn partition_64_blocks() {
        let r = partition_octree([64, 64, 64], 3).unwrap();
        assert_eq!(r.len(), 64);
        assert!(r.iter().all(|r| r.shape() == [16, 16, 16]));
        for (i, reg) in r.iter().enumerate() {
            assert_eq!(reg.leaf_index, i);
        }
    }

    #[test]
    fn partition_morton_order() {
        // Independent enumeration: octant ordinal = x + 2y + 4z.
        let r = partition_octree([64, 64, 64], 2).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let expect = x + 2 * y + 4 * z;
                    let reg = r
                        .iter()
                        .find(|reg| reg.lo == [32 * z, 32 * y, 32 * x])
                        .unwrap();
                    assert_eq!(reg.leaf_index, expect);
                }
            }
        }
        let octant_x1 = r.iter().find(|reg| reg.lo == [0, 0, 32]).unwrap();
        assert_eq!(octant_x1.leaf_index, 1);
    }

    #[test]
    fn partition_rejects_non_divisible() {
        let err = partition_octree([64, 30, 64], 3).unwrap_err();
        assert_eq!(
            err,
            ConfigError::NotDivisible {
                axis: "y",
                size: 30,
                divisor: 4
            }
        );
    }

    #[test]
    fn disjoint_cover_exhaustive() {
        for (dims, levels) in [([8, 8, 8], 3), ([4, 8, 16], 2), ([12, 4, 8], 3), ([2, 2, 2], 2)] {
            let regions = partition_octree(dims, levels).unwrap();
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let n = regions.iter().filter(|r| r.contains([z, y, x])).count();
                        assert_eq!(n, 1, "voxel {:?}", [z, y, x]);
                    }
                }
            }
        }
    }

    #[test]
    fn region_voxel_enumeration() {
        let regions = partition_octree([4, 4, 4], 2).unwrap();
        let r = regions[5];
        let all: Vec<_> = (0..r.voxel_count()).map(|i| r.voxel_at(i)).collect();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|&v| r.contains(v)));
        assert_eq!(all[0], r.lo);
    }

    proptest! {
        #[test]
        fn coords_strictly_monotone(size in 2usize..512) {
            for i in 1..size {
                prop_assert!(axis_coord(i, size) > axis_coord(i - 1, size));
            }
        }

        #[test]
        fn morton_round_trip(z in 0usize..16, y in 0usize..16, x in 0usize..16) {
            prop_assert_eq!(morton_decode(morton_encode(z, y, x, 4), 4), (z, y, x));
        }
    }
}
