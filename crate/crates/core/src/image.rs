//! Image containers: exact 8-bit pixels for the codec and file boundaries,
//! unit-interval floats for everything that is differentiated.

use std::path::Path;

use crate::error::{invalid, BasnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest accepted side length; kernel-7 windows need at least this much.
pub const MIN_SIDE: usize = 8;

/// 8-bit image stored row-major, channel-minor (`HWC`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    bytes: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, bytes: Vec<u8>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(invalid(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid(format!("unsupported channel count {channels}")));
        }
        if bytes.len() != height * width * channels {
            return Err(BasnError::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                bytes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            bytes,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.bytes[self.index(row, col, channel)]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: u8) {
        let i = self.index(row, col, channel);
        self.bytes[i] = value;
    }

    /// Float view, `pixel / 255`.
    pub fn to_float<T: Scalar>(&self) -> FloatImage<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let scale = T::lit(255.0);
        let mut data = vec![T::zero(); h * w * c];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    data[(ch * h + r) * w + col] = T::lit(self.get(r, col, ch) as f64) / scale;
                }
            }
        }
        FloatImage {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    /// Round a float image to bytes (values clipped to `[0, 1]` first).
    pub fn from_float<T: Scalar>(img: &FloatImage<T>) -> Result<Self> {
        let (h, w, c) = (img.height, img.width, img.channels);
        let mut bytes = vec![0u8; h * w * c];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let v = img.data[(ch * h + r) * w + col].as_f64().clamp(0.0, 1.0);
                    bytes[(r * w + col) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        Self::new(h, w, c, bytes)
    }

    /// Reads any format the `image` crate decodes. Alpha is dropped; gray
    /// stays single channel, everything else becomes RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Self::new(h as usize, w as usize, 1, g.into_raw())
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Self::new(h as usize, w as usize, 3, rgb.into_raw())
        }
    }

    /// Lossless 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

/// True when the file extension names a lossy container we refuse to embed in.
pub fn is_lossy_format(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("jpg" | "jpeg" | "webp")
    )
}

/// Unit-interval float image in planar `CHW` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FloatImage<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(BasnError::ShapeMismatch(format!(
                "{channels}x{height}x{width} float image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn plane(&self, channel: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .unwrap()
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(BasnError::ShapeMismatch(format!(
                "expected [1, C, H, W], got {s:?}"
            )));
        }
        Self::new(s[1], s[2], s[3], t.data().to_vec())
    }
}

/// Per-pixel embedding tolerance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(BasnError::ShapeMismatch(format!(
                "{height}x{width} attention needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values
            .iter()
            .find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
        {
            return Err(invalid(format!("attention value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::from_usize(self.values.len()).unwrap()
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, 1, self.height, self.width], self.values.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 {
            return Err(BasnError::ShapeMismatch(format!(
                "expected [1, 1, H, W], got {s:?}"
            )));
        }
        Self::new(s[2], s[3], t.data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> AttentionMap<U> {
        AttentionMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Smoothed counterpart of a cover image used as the blending target.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureFreeImage<T>(pub FloatImage<T>);

impl<T> TextureFreeImage<T> {
    pub fn image(&self) -> &FloatImage<T> {
        &self.0
    }
}
