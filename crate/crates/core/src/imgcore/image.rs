use crate::error::{Error, Result};

/// An `height × width × channels` image with interleaved, row-major `f32`
/// samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, validating shape and value range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary samples, clamping each to `[0, 1]`.
    /// Non-finite samples become 0.
    pub fn from_unclamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![clamp_unit(value); height * width * channels],
        )
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Applies `f` to every sample and clamps the result.
    pub(crate) fn map_clamped(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| clamp_unit(f(v))).collect(),
        }
    }

    /// Internal constructor for kernels that already produced clamped data.
    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Image {
        debug_assert_eq!(data.len(), height * width * channels);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    /// Planar `[channel][y][x]` copy of the samples, the layout the networks use.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    /// Per-pixel luminance `0.299 R + 0.587 G + 0.114 B` (identity for
    /// single-channel images).
    pub fn luminance(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Mean absolute per-sample difference between two same-shape images.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::dim("images differ in shape"));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(matches!(
            Image::new(2, 2, 3, vec![0.0; 11]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Image::new(2, 2, 2, vec![0.0; 8]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Image::new(1, 1, 1, vec![1.5]),
            Err(Error::Parameter(_))
        ));
        assert!(Image::new(1, 1, 1, vec![1.0]).is_ok());
    }

    #[test]
    fn planar_layout() {
        let img = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.to_planar(), vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }
}
