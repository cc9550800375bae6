//! Dense scalar volumes and the `TAFVOL01` binary format.
//!
//! Layout (little endian): 8-byte magic, three `u32` extents `(d, h, w)`,
//! three `f32` spacings in mm, then `d·h·w` `f32` voxels in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::error::{io_err, Result, TafError};

pub const MAGIC: &[u8; 8] = b"TAFVOL01";
pub const HEADER_LEN: usize = 8 + 3 * 4 + 3 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityTag {
    Raw,
    /// Every voxel lies in `[0, 1]`.
    Unit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f32; 3],
    tag: IntensityTag,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3], tag: IntensityTag) -> Result<Self> {
        if data.shape().iter().any(|&s| s == 0) {
            return Err(TafError::Shape(format!("empty volume extent {:?}", data.shape())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(TafError::Data(format!("non-finite voxel value {bad}")));
        }
        if tag == IntensityTag::Unit && data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TafError::Data("unit-tagged volume has values outside [0, 1]".into()));
        }
        Ok(Self { data, spacing, tag })
    }

    /// Raw-tagged volume with 1 mm isotropic spacing.
    pub fn raw(data: Array3<f32>) -> Result<Self> {
        Self::new(data, [1.0; 3], IntensityTag::Raw)
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { data: Array3::zeros(shape), spacing: [1.0; 3], tag: IntensityTag::Raw }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn tag(&self) -> IntensityTag {
        self.tag
    }

    /// Same voxels under a different tag; validates the unit range.
    pub fn with_tag(self, tag: IntensityTag) -> Result<Self> {
        Self::new(self.data, self.spacing, tag)
    }

    /// Replaces the voxel grid, keeping spacing; tag is re-validated.
    pub fn with_data(&self, data: Array3<f32>, tag: IntensityTag) -> Result<Self> {
        Self::new(data, self.spacing, tag)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Voxels widened to `f64` in row-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.len());
        out.extend_from_slice(MAGIC);
        for s in self.shape() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a volume. The intensity tag is not stored on disk and is
    /// inferred: `Unit` when every voxel lies in `[0, 1]`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(TafError::Format(format!("header truncated: {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(TafError::Format("bad magic, expected TAFVOL01".into()));
        }
        let word = |i: usize| <[u8; 4]>::try_from(&bytes[8 + 4 * i..12 + 4 * i]).unwrap();
        let shape = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
        let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
        let n = shape.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s));
        let n = n.ok_or_else(|| TafError::Format(format!("extent overflow {shape:?}")))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(TafError::Format(format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| v.is_nan()) {
            return Err(TafError::Data("NaN in volume payload".into()));
        }
        let unit = values.iter().all(|v| (0.0..=1.0).contains(v));
        let data = Array3::from_shape_vec(shape, values).map_err(|e| TafError::Format(e.to_string()))?;
        Self::new(data, spacing, if unit { IntensityTag::Unit } else { IntensityTag::Raw })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Volume {
        let data = Array3::from_shape_fn((n, n, n), |(z, y, x)| (z * n * n + y * n + x) as f32);
        Volume::new(data, [1.0, 1.5, 2.0], IntensityTag::Raw).unwrap()
    }

    #[test]
    fn ramp_roundtrip_is_bit_exact() {
        let v = ramp(4);
        let bytes = v.to_bytes();
        let back = Volume::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, v);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = ramp(2).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Volume::from_bytes(&bytes), Err(TafError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let bytes = ramp(3).to_bytes();
        assert!(matches!(Volume::from_bytes(&bytes[..bytes.len() - 1]), Err(TafError::Format(_))));
        assert!(matches!(Volume::from_bytes(&bytes[..10]), Err(TafError::Format(_))));
    }

    #[test]
    fn nan_payload_is_data_error() {
        let mut bytes = ramp(2).to_bytes();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Volume::from_bytes(&bytes), Err(TafError::Data(_))));
    }

    #[test]
    fn invariants_enforced_on_construction() {
        assert!(Volume::raw(Array3::zeros((0, 2, 2))).is_err());
        assert!(Volume::raw(Array3::from_elem((1, 1, 1), f32::INFINITY)).is_err());
        assert!(Volume::new(Array3::from_elem((1, 1, 1), 1.5), [1.0; 3], IntensityTag::Unit).is_err());
    }
}
