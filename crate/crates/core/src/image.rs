//! Dense multi-channel float images used for G-buffer dumps, renders and
//! normal maps. Row-major, interleaved channels, row 0 at the top.

use crate::error::{Error, Result};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::arg(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Three-channel image from per-pixel vectors.
    pub fn from_vec3(width: usize, height: usize, pixels: &[Vec3]) -> Self {
        assert_eq!(pixels.len(), width * height);
        let data = pixels.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Image {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "{what}: shape {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    #[inline]
    pub fn vec3(&self, p: usize) -> Vec3 {
        let s = self.pixel(p);
        Vec3::new(s[0], s[1], s[2])
    }

    #[inline]
    pub fn set_vec3(&mut self, p: usize, v: Vec3) {
        let s = self.pixel_mut(p);
        s[0] = v.x;
        s[1] = v.y;
        s[2] = v.z;
    }

    pub fn to_vec3(&self) -> Vec<Vec3> {
        assert_eq!(self.channels, 3);
        (0..self.pixel_count()).map(|p| self.vec3(p)).collect()
    }

    /// Single channel extracted as a one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = (0..self.pixel_count()).map(|p| self.data[p * self.channels + c]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Per-pixel unit-normal map encoded into [0,1] as (n+1)/2.
pub fn encode_normals(normals: &Image) -> Image {
    normals.map(|v| 0.5 * (v + 1.0))
}
