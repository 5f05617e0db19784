//! Intensity volumes and integer label masks on a 3D voxel grid.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn flat_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

#[inline]
pub fn unflat_index(dims: Dims, i: usize) -> [usize; 3] {
    let z = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let x = i / (dims[1] * dims[2]);
    [x, y, z]
}

/// Scalar intensities, row-major with the last axis contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if voxel_count(dims) != data.len() {
            return Err(contract(format!("volume {dims:?} needs {} values", voxel_count(dims))));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; voxel_count(dims)] }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[flat_index(self.dims, x, y, z)]
    }

    /// Sub-block starting at `corner` with extent `size`.
    pub fn crop(&self, corner: [usize; 3], size: Dims) -> Volume {
        Volume { dims: size, data: crop_slice(&self.data, self.dims, corner, size) }
    }
}

/// Integer class labels on the same grid as a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if voxel_count(dims) != data.len() {
            return Err(contract(format!("mask {dims:?} needs {} values", voxel_count(dims))));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0; voxel_count(dims)] }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[flat_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = flat_index(self.dims, x, y, z);
        self.data[i] = v;
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Voxel coordinates of every voxel labelled `class`, in scan order.
    pub fn coords_of(&self, class: u8) -> Vec<[f64; 3]> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .map(|(i, _)| {
                let [x, y, z] = unflat_index(self.dims, i);
                [x as f64, y as f64, z as f64]
            })
            .collect()
    }

    pub fn crop(&self, corner: [usize; 3], size: Dims) -> Mask {
        Mask { dims: size, data: crop_slice(&self.data, self.dims, corner, size) }
    }

    /// Nearest-neighbour downsampling by an integer `factor` (samples voxel
    /// `factor·i` along each axis).
    pub fn downsample(&self, factor: usize) -> Mask {
        if factor == 1 {
            return self.clone();
        }
        let dims = [self.dims[0] / factor, self.dims[1] / factor, self.dims[2] / factor];
        let mut out = Mask::zeros(dims);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    out.set(x, y, z, self.get(x * factor, y * factor, z * factor));
                }
            }
        }
        out
    }

    /// One-hot encoding `[classes, N]`, flattened row-major.
    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let n = self.data.len();
        let mut out = vec![0.0; classes * n];
        for (i, &c) in self.data.iter().enumerate() {
            out[c as usize * n + i] = 1.0;
        }
        out
    }
}

fn crop_slice<T: Copy>(data: &[T], dims: Dims, corner: [usize; 3], size: Dims) -> Vec<T> {
    assert!((0..3).all(|a| corner[a] + size[a] <= dims[a]), "crop out of bounds");
    let mut out = Vec::with_capacity(voxel_count(size));
    for x in 0..size[0] {
        for y in 0..size[1] {
            let start = flat_index(dims, corner[0] + x, corner[1] + y, corner[2]);
            out.extend_from_slice(&data[start..start + size[2]]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let d = [3, 4, 5];
        for i in 0..60 {
            let [x, y, z] = unflat_index(d, i);
            assert_eq!(flat_index(d, x, y, z), i);
        }
    }

    #[test]
    fn crop_and_downsample() {
        let d = [4, 4, 4];
        let m = Mask::new(d, (0..64).map(|i| (i % 2) as u8).collect()).unwrap();
        let c = m.crop([1, 1, 0], [2, 2, 4]);
        assert_eq!(c.get(0, 0, 1), m.get(1, 1, 1));
        let ds = m.downsample(2);
        assert_eq!(ds.dims, [2, 2, 2]);
        assert_eq!(ds.get(1, 1, 1), m.get(2, 2, 2));
        assert_eq!(m.one_hot(2).iter().sum::<f64>(), 64.0);
    }
}
