//! Dense 3D volumes and their on-disk format.
//!
//! A volume file is raw little-endian `f32` in C order (last axis fastest),
//! next to a JSON sidecar with the same stem:
//!
//! ```json
//! {"shape":[32,38,32],"voxel_size_mm":2.0,"dtype":"f32le","order":"C"}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const DEFAULT_VOXEL_SIZE_MM: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    voxel_size_mm: f64,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected = voxel_count(shape);
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "volume of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            voxel_size_mm: DEFAULT_VOXEL_SIZE_MM,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Self {
            shape,
            voxel_size_mm: DEFAULT_VOXEL_SIZE_MM,
            data: vec![value; voxel_count(shape)],
        }
    }

    pub fn with_voxel_size(mut self, mm: f64) -> Self {
        self.voxel_size_mm = mm;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxel_size_mm(&self) -> f64 {
        self.voxel_size_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.offset(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.offset(x, y, z);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean and population standard deviation, accumulated in f64.
    pub fn mean_sd(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).at(path)?;
        let header = VolumeHeader {
            shape: self.shape,
            voxel_size_mm: self.voxel_size_mm,
            dtype: "f32le".into(),
            order: "C".into(),
        };
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, serde_json::to_vec(&header)?).at(&sidecar)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let header = VolumeHeader::read(path)?;
        let bytes = fs::read(path).at(path)?;
        let expected = voxel_count(header.shape) * 4;
        if bytes.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{}: expected {expected} bytes for shape {:?}, found {}",
                path.display(),
                header.shape,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            shape: header.shape,
            voxel_size_mm: header.voxel_size_mm,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub voxel_size_mm: f64,
    pub dtype: String,
    pub order: String,
}

impl VolumeHeader {
    /// Reads the sidecar of the volume stored at `volume_path`.
    pub fn read(volume_path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(volume_path);
        let text = fs::read_to_string(&sidecar).at(&sidecar)?;
        let header: VolumeHeader = serde_json::from_str(&text)?;
        if header.dtype != "f32le" || header.order != "C" {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported dtype/order {}/{}",
                sidecar.display(),
                header.dtype,
                header.order
            )));
        }
        if header.shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "{}: zero-length axis in shape {:?}",
                sidecar.display(),
                header.shape
            )));
        }
        Ok(header)
    }
}

pub fn sidecar_path(volume_path: &Path) -> PathBuf {
    volume_path.with_extension("json")
}

pub fn voxel_count(shape: [usize; 3]) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32");
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.37 - 2.0).collect();
        let v = Volume::new([2, 3, 4], data).unwrap();
        v.write(&path).unwrap();
        let back = Volume::read(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(VolumeHeader::read(&path).unwrap().shape, [2, 3, 4]);
    }

    #[test]
    fn c_order_indexing() {
        let v = Volume::new([2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.get(1, 2, 3), 23.0);
        assert_eq!(v.get(0, 1, 0), 4.0);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(Volume::new([2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32");
        Volume::filled([2, 2, 2], 1.0).write(&path).unwrap();
        fs::write(&path, [0u8; 12]).unwrap();
        assert!(Volume::read(&path).is_err());
    }
}
