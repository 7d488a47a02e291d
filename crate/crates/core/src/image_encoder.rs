//! Image tower: convolutional stem → serialized feature cells with fixed 2-D
//! sinusoidal positions → Transformer → image-token state.

use rand::Rng;

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::encoder::TransformerEncoder;
use crate::error::{Error, Result};
use crate::imaging::PaddedImage;
use crate::params::{embedding_normal, fan_in_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fixed 2-D sinusoidal encoding, one `d`-vector per cell of an `h×w` grid
/// (row-major). The first `d/2` dims encode the row index and the last
/// `d/2` the column index, each as interleaved sin/cos pairs at geometric
/// frequencies `10000^(-i/(d/4))`.
pub fn positional_encoding_2d(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("positional encoding dim {d} must be a positive multiple of 4")));
    }
    let quarter = d / 4;
    let freqs: Vec<f64> = (0..quarter).map(|i| 10000f64.powf(-(i as f64) / quarter as f64)).collect();
    let mut data = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * d..(r * w + c + 1) * d];
            for (i, f) in freqs.iter().enumerate() {
                row[2 * i] = (r as f64 * f).sin();
                row[2 * i + 1] = (r as f64 * f).cos();
                row[d / 2 + 2 * i] = (c as f64 * f).sin();
                row[d / 2 + 2 * i + 1] = (c as f64 * f).cos();
            }
        }
    }
    Tensor::new(vec![h * w, d], data).map_err(Into::into)
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    kernel: usize,
    out_channels: usize,
}

/// Three strided conv blocks (GELU) followed by a 1×1 projection to `d`.
/// The first block takes stride `stride / 4`, the other two stride 2.
#[derive(Debug, Clone)]
pub struct Stem {
    blocks: Vec<ConvBlock>,
    proj_weight: ParamId,
    proj_bias: ParamId,
    stride: usize,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(stride: usize, channels: [usize; 3], d: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if stride < 4 || !stride.is_multiple_of(4) {
            return Err(Error::Config(format!("stem stride {stride} must be a multiple of 4 (e.g. 8 or 16)")));
        }
        if channels.contains(&0) {
            return Err(Error::Config("stem channels must be positive".into()));
        }
        let mut cin = 3;
        let mut blocks = Vec::new();
        for (i, (&cout, s)) in channels.iter().zip([stride / 4, 2, 2]).enumerate() {
            let kernel = 2 * (s / 2) + 1;
            let fan_in = kernel * kernel * cin;
            blocks.push(ConvBlock {
                weight: store.add(format!("image.stem.conv{i}.weight"), Tensor::uniform(&[fan_in, cout], (6.0 / fan_in as f64).sqrt(), rng)),
                bias: store.add(format!("image.stem.conv{i}.bias"), Tensor::zeros(&[cout])),
                stride: s,
                kernel,
                out_channels: cout,
            });
            cin = cout;
        }
        Ok(Self {
            blocks,
            proj_weight: store.add("image.stem.proj.weight", fan_in_uniform(&[cin, d], cin, rng)),
            proj_bias: store.add("image.stem.proj.bias", Tensor::zeros(&[d])),
            stride,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `[L, L, 3]` → `[(L/stride)², d]`, cells in row-major order.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, pixels: Var) -> Result<Var> {
        let mut x = pixels;
        for b in &self.blocks {
            let (h, w, c) = match *tape.shape(x) {
                [h, w, c] => (h, w, c),
                ref s => return Err(Error::Config(format!("stem expects [h, w, c], got {s:?}"))),
            };
            let geom = ConvGeometry {
                height: h,
                width: w,
                channels: c,
                kernel: b.kernel,
                stride: b.stride,
                padding: b.kernel / 2,
            };
            let cols = tape.im2col(x, geom)?;
            let y = tape.matmul(cols, p[b.weight])?;
            let y = tape.add_row(y, p[b.bias])?;
            let y = tape.gelu(y);
            x = tape.reshape(y, &[geom.out_height(), geom.out_width(), b.out_channels])?;
        }
        let (h, w, c) = {
            let s = tape.shape(x);
            (s[0], s[1], s[2])
        };
        let flat = tape.reshape(x, &[h * w, c])?;
        let y = tape.matmul(flat, p[self.proj_weight])?;
        Ok(tape.add_row(y, p[self.proj_bias])?)
    }
}

#[derive(Debug, Clone)]
pub struct ImageTower {
    pub stem: Stem,
    pub token: ParamId,
    pub encoder: TransformerEncoder,
    side: usize,
    positions: Tensor,
}

impl ImageTower {
    pub fn new<R: Rng + ?Sized>(
        side: usize,
        stem: Stem,
        encoder: TransformerEncoder,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let d = encoder.config().model_dim;
        if !side.is_multiple_of(stem.stride()) {
            return Err(Error::Config(format!(
                "image side {side} must be a multiple of the stem stride {}",
                stem.stride()
            )));
        }
        let cells = side / stem.stride();
        let pe = positional_encoding_2d(cells, cells, d)?;
        let mut positions = Tensor::zeros(&[1 + cells * cells, d]);
        positions.data_mut()[d..].copy_from_slice(pe.data());
        Ok(Self {
            stem,
            token: store.add("image.token", embedding_normal(&[d], d, rng)),
            encoder,
            side,
            positions,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Sequence length seen by the encoder: image token plus every cell.
    pub fn sequence_len(&self) -> usize {
        self.positions.shape()[0]
    }

    /// Final-layer state of the image token, shape `[1, d]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, img: &PaddedImage) -> Result<Var> {
        if img.side() != self.side || img.stride() != self.stem.stride() {
            return Err(Error::Config(format!(
                "image prepared for side {} / stride {}, tower expects {} / {}",
                img.side(),
                img.stride(),
                self.side,
                self.stem.stride()
            )));
        }
        let pixels = tape.constant(img.sanitized_pixels());
        let features = self.stem.forward(tape, p, pixels)?;
        self.encode_features(tape, p, features, &img.cell_mask())
    }

    /// Encodes stem features `[cells, d]`; cells with `mask == false` are
    /// excluded as attention targets.
    pub fn encode_features(&self, tape: &mut Tape, p: &Bound, features: Var, mask: &[bool]) -> Result<Var> {
        let d = self.encoder.config().model_dim;
        let token = tape.reshape(p[self.token], &[1, d])?;
        let tokens = tape.concat_rows(&[token, features])?;
        let positions = tape.constant(self.positions.clone());
        let keep: Vec<bool> = std::iter::once(true).chain(mask.iter().copied()).collect();
        if keep.len() != self.sequence_len() {
            return Err(Error::Config(format!(
                "mask covers {} cells, tower expects {}",
                mask.len(),
                self.sequence_len() - 1
            )));
        }
        let out = self.encoder.forward(tape, p, tokens, positions, Some(&keep))?;
        Ok(tape.slice_rows(out, 0, 1)?)
    }

    pub fn encode_batch(&self, tape: &mut Tape, p: &Bound, imgs: &[&PaddedImage]) -> Result<Var> {
        if imgs.is_empty() {
            return Err(Error::Data("cannot encode an empty batch".into()));
        }
        let rows = imgs.iter().map(|img| self.encode(tape, p, img)).collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&rows)?)
    }
}
