//! Image tensors, PNG I/O and tiling.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use skygan_nn::{Scalar, Tensor};

use crate::error::{Error, Result};

/// `height x width x channels` float image, row-major and channel-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(Error::InvalidImage(format!("value {} at index {i} outside [0, 1]", data[i])));
        }
        Ok(ImageTensor { height, width, channels, data })
    }

    /// Like [`new`](Self::new) but clamps into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        ImageTensor { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.channels)
    }

    /// Rectangular sub-image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidImage(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(ImageTensor { height, width, channels: self.channels, data })
    }

    /// Channels `range` of every pixel.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&c) = channels.iter().find(|&&c| c >= self.channels) {
            return Err(Error::InvalidImage(format!("channel {c} out of range for {} channels", self.channels)));
        }
        let data = self.pixels().flat_map(|p| channels.iter().map(move |&c| p[c])).collect();
        Ok(ImageTensor { height: self.height, width: self.width, channels: channels.len(), data })
    }

    /// Pixel-wise channel concatenation.
    pub fn concat_channels(parts: &[&ImageTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidImage("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some(p) = parts.iter().find(|p| (p.height, p.width) != (h, w)) {
            return Err(Error::InvalidImage(format!("cannot concatenate {}x{} with {h}x{w}", p.height, p.width)));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for i in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Ok(ImageTensor { height: h, width: w, channels, data })
    }

    /// Reflect-pads (mirror without repeating the edge) on the bottom and right to `height x width`.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::InvalidImage("pad target smaller than image".into()));
        }
        if (height > self.height && height - self.height >= self.height.max(2))
            || (width > self.width && width - self.width >= self.width.max(2))
        {
            return Err(Error::InvalidImage(format!(
                "reflect padding {}x{} to {height}x{width} needs a larger image",
                self.height, self.width
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(self.pixel(reflect(y, self.height), reflect(x, self.width)));
            }
        }
        Ok(ImageTensor { height, width, channels: self.channels, data })
    }

    /// `[1, c, h, w]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w, c) = self.dims();
        let mut data = vec![T::zero(); h * w * c];
        for (i, px) in self.pixels().enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = T::from_f64_lossy(v as f64);
            }
        }
        Tensor::from_vec(vec![1, c, h, w], data).unwrap()
    }

    /// Sample `index` of an NCHW tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4();
        if index >= n {
            return Err(Error::InvalidImage(format!("batch index {index} out of range {n}")));
        }
        let plane = h * w;
        let src = &t.data()[index * c * plane..(index + 1) * c * plane];
        let mut data = vec![0.0f32; c * plane];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = src[ch * plane + i].to_f32().unwrap_or(f32::NAN);
            }
        }
        Self::from_clamped(h, w, c, data)
    }
}

/// Stacks same-shaped images into one NCHW batch.
pub fn batch_tensor<T: Scalar>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack_batch(&parts).map_err(|e| Error::InvalidImage(e.to_string()))
}

/// A clean tile, one synthetic hazy rendition of it and its haze level.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub hazy: ImageTensor,
    pub clean: ImageTensor,
    pub haze_level: u8,
    pub source_id: String,
}

impl DatasetPair {
    pub fn new(hazy: ImageTensor, clean: ImageTensor, haze_level: u8, source_id: impl Into<String>) -> Result<Self> {
        if hazy.dims() != clean.dims() || hazy.channels() != 3 {
            return Err(Error::InvalidImage(format!(
                "pair needs matching 3-channel images, got {:?} and {:?}",
                hazy.dims(),
                clean.dims()
            )));
        }
        if !(1..=5).contains(&haze_level) {
            return Err(Error::InvalidImage(format!("haze level {haze_level} not in 1..=5")));
        }
        Ok(DatasetPair { hazy, clean, haze_level, source_id: source_id.into() })
    }
}

/// Reads an 8-bit RGB raster; values are `byte / 255`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

/// Round-half-up quantization of `[0, 1]` to a byte.
pub fn quantize(v: f32) -> u8 {
    ((v as f64) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a 3-channel image as 8-bit RGB PNG.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidImage(format!("save_image needs 3 channels, got {}", img.channels())));
    }
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer length matches dimensions");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Encode { path: path.to_path_buf(), message: other.to_string() },
    })
}

/// Offsets `0, stride, 2 stride, ...` that fit, plus one flush with the far edge if the
/// last stride leaves pixels uncovered.
pub fn tile_offsets(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..=extent - tile).step_by(stride).collect();
    if *offs.last().unwrap() != extent - tile {
        offs.push(extent - tile);
    }
    offs
}

/// All `tile x tile` windows, row-major by offset.
pub fn crop_tiles(img: &ImageTensor, tile: usize, stride: usize) -> Result<Vec<ImageTensor>> {
    if tile == 0 || tile > img.height().min(img.width()) {
        return Err(Error::InvalidImage(format!(
            "tile {tile} does not fit a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidImage("tile stride must be at least 1".into()));
    }
    let ys = tile_offsets(img.height(), tile, stride);
    let xs = tile_offsets(img.width(), tile, stride);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(img.crop(y, x, tile, tile)?);
        }
    }
    Ok(out)
}
