//! Multi-channel fields on a uniform square grid.

use crate::error::{Error, Result};

/// Real channels sampled on an `n x n` grid, stored pixel-major with the
/// channels of one pixel adjacent. Row index is `y`, column index is `x`.
/// A complex field is two channels: real then imaginary.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    resolution: usize,
    channels: usize,
    data: Vec<f64>,
}

impl GridField {
    pub fn new(resolution: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != resolution * resolution * channels {
            return Err(Error::shape(
                "grid_field",
                &[resolution, resolution, channels],
                &[data.len()],
            ));
        }
        Ok(GridField {
            resolution,
            channels,
            data,
        })
    }

    pub fn zeros(resolution: usize, channels: usize) -> Self {
        GridField {
            resolution,
            channels,
            data: vec![0.0; resolution * resolution * channels],
        }
    }

    /// Builds a field whose channel `c` at pixel `(x, y)` is `f(x, y, c)`.
    pub fn from_fn(resolution: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(resolution * resolution * channels);
        for y in 0..resolution {
            for x in 0..resolution {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        GridField {
            resolution,
            channels,
            data,
        }
    }

    /// Stacks single-channel planes (each `n*n`, row-major) into one field.
    pub fn from_planes(resolution: usize, planes: &[&[f64]]) -> Result<Self> {
        let npix = resolution * resolution;
        if let Some(p) = planes.iter().find(|p| p.len() != npix) {
            return Err(Error::shape("from_planes", &[npix], &[p.len()]));
        }
        let c = planes.len();
        let mut data = vec![0.0; npix * c];
        for (ci, p) in planes.iter().enumerate() {
            for (i, v) in p.iter().enumerate() {
                data[i * c + ci] = *v;
            }
        }
        GridField::new(resolution, c, data)
    }

    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.resolution + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.resolution + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &GridField) -> bool {
        self.resolution == other.resolution && self.channels == other.channels
    }
}
