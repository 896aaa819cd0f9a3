//! 2-D raster of attenuation values.

use crate::error::{Result, TomoError};

/// Row-major 2-D image with square pixels.
///
/// Values are on a Hounsfield-like scale for phantoms and displayed
/// reconstructions, and on a linear-attenuation scale inside the scan and
/// reconstruction pipelines; see [`crate::scan::hu_to_mu`].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl Image {
    /// All-zero image.
    pub fn zeros(width: usize, height: usize, pixel_size: f64) -> Image {
        assert!(width >= 1 && height >= 1 && pixel_size > 0.0);
        Image {
            width,
            height,
            pixel_size,
            data: vec![0.0; width * height],
        }
    }

    /// Build from raw row-major data, validating the type invariants.
    pub fn from_data(width: usize, height: usize, pixel_size: f64, data: Vec<f64>) -> Result<Image> {
        if width < 1 || height < 1 {
            return Err(TomoError::Input("image dimensions must be >= 1".into()));
        }
        if !(pixel_size > 0.0) {
            return Err(TomoError::Input("pixel_size must be > 0".into()));
        }
        if data.len() != width * height {
            return Err(TomoError::Dimension(format!(
                "image data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TomoError::Input("image contains non-finite values".into()));
        }
        Ok(Image {
            width,
            height,
            pixel_size,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        debug_assert!(row < self.height && col < self.width);
        &mut self.data[row * self.width + col]
    }

    /// True if the other image has the same grid.
    pub fn same_grid(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Elementwise map into a new image.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixel_size: self.pixel_size,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all pixel values.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Image) {
        assert!(self.same_grid(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_data_validates() {
        assert!(Image::from_data(2, 2, 1.0, vec![0.0; 3]).is_err());
        assert!(Image::from_data(2, 2, 0.0, vec![0.0; 4]).is_err());
        assert!(Image::from_data(2, 2, 1.0, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(Image::from_data(2, 2, 1.0, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let mut img = Image::zeros(3, 2, 1.0);
        *img.at_mut(1, 2) = 5.0;
        assert_eq!(img.data()[1 * 3 + 2], 5.0);
        assert_eq!(img.at(1, 2), 5.0);
    }
}
