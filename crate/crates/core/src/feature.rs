//! In-memory feature maps.
//!
//! A [`FeatureTensor`] is the `H × W × D` activation grid a frozen backbone
//! produces for one image. Values are held in `f64`; files store `f32`.

use crate::error::{Error, Result};
use crate::tensorio::EptTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    /// Builds a tensor from row-major `(h, w, d)` data with `d` fastest-varying.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "feature data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                for k in 0..channels {
                    data.push(f(h, w, k));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, k: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + k]
    }

    /// The length-`D` channel vector at spatial cell `(h, w)`.
    pub fn pixel(&self, h: usize, w: usize) -> &[f64] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Pixels in row-major spatial order.
    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.channels.max(1))
    }

    pub fn pixels_mut(&mut self) -> impl Iterator<Item = &mut [f64]> + '_ {
        self.data.chunks_exact_mut(self.channels.max(1))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn to_ept(&self) -> EptTensor {
        EptTensor::new(
            vec![self.height, self.width, self.channels],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("feature tensor dims match payload")
    }

    pub fn from_ept(t: &EptTensor) -> Result<Self> {
        match *t.dims() {
            [h, w, d] => Ok(Self {
                height: h,
                width: w,
                channels: d,
                data: t.data().iter().map(|&v| f64::from(v)).collect(),
            }),
            _ => Err(Error::contract(format!(
                "feature tensor must be rank 3, got dims {:?}",
                t.dims()
            ))),
        }
    }
}
