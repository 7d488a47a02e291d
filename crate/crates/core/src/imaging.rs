//! RGB images, aspect-preserving resize onto a zero-padded square canvas,
//! and the feature-cell validity mask derived from it.

use std::io::{Read, Write};
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `[height, width, 3]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("degenerate {height}x{width} image")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Loads a PNG (or any format the `image` crate decodes) or a raw tensor
    /// file (`.tensor`).
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "tensor") {
            let t = read_raw_tensor(path)?;
            match *t.shape() {
                [h, w, 3] => Self::new(h, w, t.into_data()),
                ref s => Err(Error::Data(format!("{}: expected [h, w, 3], got {s:?}", path.display()))),
            }
        } else {
            let img = image::open(path)?;
            Ok(Self::from_rgb8(&img.to_rgb8()))
        }
    }
}

const RAW_MAGIC: &[u8; 8] = b"GTENSOR1";

/// Raw tensor file: magic `GTENSOR1`, u32 LE rank, rank × u64 LE dims,
/// then the row-major f64 LE payload.
pub fn write_raw_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if buf.len() < 12 || &buf[..8] != RAW_MAGIC {
        return Err(bad("not a raw tensor file"));
    }
    let rank = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if buf.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(buf[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let payload = &buf[header..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

/// An image placed at the top-left of an `L×L` zero canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedImage {
    pixels: Tensor,
    valid_height: usize,
    valid_width: usize,
    stride: usize,
}

impl PaddedImage {
    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn cells_per_side(&self) -> usize {
        self.side() / self.stride
    }

    pub fn valid_extent(&self) -> (usize, usize) {
        (self.valid_height, self.valid_width)
    }

    /// `[L, L, 3]` canvas; everything outside the valid extent is zero.
    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    /// Overwrites canvas pixels outside the valid extent. The encoder
    /// re-zeroes them, so this only exists to test that guarantee.
    #[doc(hidden)]
    pub fn scribble_padding(&mut self, value: f64) {
        let l = self.side();
        let (vh, vw) = (self.valid_height, self.valid_width);
        let data = self.pixels.data_mut();
        for y in 0..l {
            for x in 0..l {
                if y >= vh || x >= vw {
                    data[(y * l + x) * 3..(y * l + x) * 3 + 3].fill(value);
                }
            }
        }
    }

    /// Canvas with the padding forced back to zero.
    pub fn sanitized_pixels(&self) -> Tensor {
        let mut t = self.pixels.clone();
        let l = self.side();
        let (vh, vw) = (self.valid_height, self.valid_width);
        let data = t.data_mut();
        for y in 0..l {
            for x in 0..l {
                if y >= vh || x >= vw {
                    data[(y * l + x) * 3..(y * l + x) * 3 + 3].fill(0.0);
                }
            }
        }
        t
    }

    /// Row-major validity of the `(L/stride)²` feature cells: a cell is valid
    /// when its receptive-field origin lies inside the image extent.
    pub fn cell_mask(&self) -> Vec<bool> {
        let n = self.cells_per_side();
        let s = self.stride;
        (0..n * n)
            .map(|i| (i / n) * s < self.valid_height && (i % n) * s < self.valid_width)
            .collect()
    }
}

/// Resizes `img` so its longest side is `side` (aspect ratio kept), places
/// it at the top-left of a zero `side×side` canvas and records the extent.
pub fn resize_and_pad(img: &Image, side: usize, stride: usize) -> Result<PaddedImage> {
    if stride == 0 || side == 0 || !side.is_multiple_of(stride) {
        return Err(Error::Config(format!("canvas side {side} must be a positive multiple of stride {stride}")));
    }
    let (h, w) = (img.height(), img.width());
    let scale = side as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, side);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, side);
    let resized: Vec<f64> = if (nh, nw) == (h, w) {
        img.data().to_vec()
    } else {
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, img.data().iter().map(|&v| v as f32).collect())
                .expect("buffer size matches");
        imageops::resize(&buf, nw as u32, nh as u32, FilterType::Triangle)
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v).clamp(0.0, 1.0))
            .collect()
    };
    let mut canvas = vec![0.0; side * side * 3];
    for y in 0..nh {
        canvas[y * side * 3..(y * side + nw) * 3].copy_from_slice(&resized[y * nw * 3..(y + 1) * nw * 3]);
    }
    Ok(PaddedImage {
        pixels: Tensor::new(vec![side, side, 3], canvas)?,
        valid_height: nh,
        valid_width: nw,
        stride,
    })
}
