//! Planar float images and 8-bit PNG I/O.
//!
//! An [`Image`] is a `channels x height x width` tensor stored channel-major,
//! so each channel is one contiguous plane. Values loaded from PNG are scaled
//! into `[0, 1]`; nothing is clamped until the image is quantized on save.
//! The flow also uses [`Image`] for its internal feature maps, so the channel
//! count is not restricted to 3 except at the PNG boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image by evaluating `f(channel, row, col)` at every position.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Copies the window `[top, top + h) x [left, left + w)` out of every channel.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::OutOfBounds {
                top,
                left,
                height: h,
                width: w,
                image_height: self.height,
                image_width: self.width,
            });
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let plane = self.channel(c);
            for y in top..top + h {
                let row = y * self.width;
                data.extend_from_slice(&plane[row + left..row + left + w]);
            }
        }
        Ok(Image {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Stacks the channels of `self` followed by those of `other`.
    pub(crate) fn concat_channels(&self, other: &Image) -> Image {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Image {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits off channels `[start, start + count)` into a new image.
    pub(crate) fn slice_channels(&self, start: usize, count: usize) -> Image {
        let n = self.plane_len();
        Image {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    /// Quantizes to bytes: `floor(clamp(v, 0, 1) * 255 + 0.5)`, interleaved RGB.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "8-bit RGB output needs 3 channels, image has {}",
                self.channels
            )));
        }
        let n = self.plane_len();
        let mut bytes = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                bytes.push(quantize(self.data[c * n + i]));
            }
        }
        Ok(bytes)
    }

    /// Inverse of [`Image::to_rgb8`]: bytes scaled by `1/255`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        let n = height * width;
        if bytes.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {height}x{width} RGB image",
                bytes.len()
            )));
        }
        let mut img = Image::zeros(3, height, width);
        for i in 0..n {
            for c in 0..3 {
                img.data[c * n + i] = f64::from(bytes[3 * i + c]) / 255.0;
            }
        }
        Ok(img)
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    // NaN maps to 0 through the saturating cast.
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Loads an 8-bit RGB or grayscale PNG. Grayscale is expanded to three
/// identical channels.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let decode_err = |e: png::DecodingError| Error::PngDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            bits: info.bit_depth as u8,
        });
    }
    let color = info.color_type;
    if !matches!(color, png::ColorType::Rgb | png::ColorType::Grayscale) {
        return Err(Error::UnsupportedColorType {
            path: path.to_path_buf(),
            color: format!("{color:?}"),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::PngDecode {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    let stride = frame.line_size;
    let n = width * height;
    let mut img = Image::zeros(3, height, width);
    for y in 0..height {
        let row = &buf[y * stride..];
        for x in 0..width {
            let i = y * width + x;
            match color {
                png::ColorType::Rgb => {
                    for c in 0..3 {
                        img.data[c * n + i] = f64::from(row[3 * x + c]) / 255.0;
                    }
                }
                _ => {
                    let v = f64::from(row[x]) / 255.0;
                    for c in 0..3 {
                        img.data[c * n + i] = v;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// `(height, width)` from the PNG header, without decoding pixels.
pub fn png_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::PngDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

/// Writes a 3-channel image as an 8-bit RGB PNG (clamped, round-half-up).
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.to_rgb8()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encode_err = |e: png::EncodingError| Error::PngEncode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}
