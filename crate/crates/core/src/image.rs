use crate::error::{Error, Result};

/// Row-major `height × width × 3` image with channel values in `[0, 1]`.
///
/// Values are stored as `f32` because that is the precision of the dataset
/// container; model code widens to `f64` on read.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image buffer of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every channel value and clamps the result to `[0, 1]`.
    pub fn map_values(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Mean absolute per-value difference, the distortion measure used to
    /// order corruption severities.
    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        total / self.data.len() as f64
    }

    /// Rec. 601 luma as 8-bit gray values, for previews.
    pub fn to_gray_u8(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .map(|p| {
                let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                (l * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}
