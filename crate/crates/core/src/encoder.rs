//! The per-level feature network.
//!
//! `B` blocks of 3x3 convolution (stride 2, zero padding 1) followed by
//! ReLU, then global average pooling. Parameters live in one flat `f32`
//! buffer laid out block by block as `kernel[out][in][3][3]` then
//! `bias[out]`; arithmetic runs in `f64`. The backward pass is written out
//! by hand for exactly this layer set.

use crate::error::{Error, Result};
use crate::image::{Image, Patch};
use crate::pyramid::Level;
use crate::rng::SeededRng;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"MSQW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderArch {
    pub in_channels: usize,
    /// Output channels of each block; the last is the embedding size.
    pub widths: Vec<usize>,
    /// Side patches are resized to before encoding.
    pub input_side: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            input_side: 64,
        }
    }
}

impl EncoderArch {
    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn min_side(&self) -> usize {
        1 << self.blocks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("encoder needs nonzero block widths".into()));
        }
        if self.embedding_dim() < 2 {
            return Err(Error::InvalidParameter("embedding dimension must be >= 2".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidParameter("encoder needs input channels".into()));
        }
        if self.blocks() > 16 || self.input_side < self.min_side() {
            return Err(Error::InvalidParameter(format!(
                "input side {} too small for {} blocks",
                self.input_side,
                self.blocks()
            )));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut prev = self.in_channels;
        self.widths
            .iter()
            .map(|&w| {
                let s = (prev, w);
                prev = w;
                s
            })
            .collect()
    }

    /// `(kernel offset, bias offset, in, out)` per block.
    fn layout(&self) -> Vec<LayerSlot> {
        let mut off = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(cin, cout)| {
                let k = off;
                off += cout * cin * 9;
                let b = off;
                off += cout;
                LayerSlot {
                    kernel: k,
                    bias: b,
                    cin,
                    cout,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(cin, cout)| cout * cin * 9 + cout)
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    kernel: usize,
    bias: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub arch: EncoderArch,
    pub level: Level,
    pub epoch: u32,
    params: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * c).collect())
    }
}

/// He-style uniform init: kernels on `+-sqrt(6 / fan_in)`, biases zero.
pub fn encoder_init(arch: &EncoderArch, level: Level, rng: &mut SeededRng) -> Result<EncoderWeights> {
    arch.validate()?;
    let mut params = vec![0.0f32; arch.param_count()];
    for slot in arch.layout() {
        let bound = (6.0 / (slot.cin * 9) as f64).sqrt();
        for p in &mut params[slot.kernel..slot.bias] {
            *p = rng.uniform_range(-bound, bound) as f32;
        }
    }
    Ok(EncoderWeights {
        arch: arch.clone(),
        level,
        epoch: 0,
        params,
    })
}

/// Activations of one block, channel-major.
#[derive(Debug, Clone)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }
}

/// Output indices `i` with `0 <= 2i + d - 1 < n` for tap offset `d`.
#[inline]
fn tap_range(d: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = ((n_in + 2 - d) / 2).min(n_out);
    lo..hi.max(lo)
}

fn conv_forward(input: &Tensor, kernel: &[f32], bias: &[f32], cout: usize) -> Tensor {
    let (h, w) = (input.h.div_ceil(2), input.w.div_ceil(2));
    let mut out = Tensor::zeros(cout, h, w);
    let plane_in = input.h * input.w;
    for o in 0..cout {
        let dst = &mut out.data[o * h * w..(o + 1) * h * w];
        dst.fill(bias[o] as f64);
        for ci in 0..input.c {
            let src = &input.data[ci * plane_in..(ci + 1) * plane_in];
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = kernel[((o * input.c + ci) * 3 + dy) * 3 + dx] as f64;
                    if k == 0.0 {
                        continue;
                    }
                    let xr = tap_range(dx, input.w, w);
                    for i in tap_range(dy, input.h, h) {
                        let row = (2 * i + dy - 1) * input.w;
                        let drow = &mut dst[i * w..(i + 1) * w];
                        for j in xr.clone() {
                            drow[j] += k * src[row + 2 * j + dx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and, if asked, the input gradient.
fn conv_backward(
    input: &Tensor,
    kernel: &[f32],
    grad_out: &Tensor,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    let (h, w) = (grad_out.h, grad_out.w);
    let plane_in = input.h * input.w;
    let mut grad_in = want_input.then(|| Tensor::zeros(input.c, input.h, input.w));
    for o in 0..grad_out.c {
        let g = &grad_out.data[o * h * w..(o + 1) * h * w];
        grad_bias[o] += g.iter().sum::<f64>();
        for ci in 0..input.c {
            let src = &input.data[ci * plane_in..(ci + 1) * plane_in];
            for dy in 0..3 {
                for dx in 0..3 {
                    let idx = ((o * input.c + ci) * 3 + dy) * 3 + dx;
                    let xr = tap_range(dx, input.w, w);
                    let yr = tap_range(dy, input.h, h);
                    let mut acc = 0.0;
                    for i in yr.clone() {
                        let row = (2 * i + dy - 1) * input.w;
                        let grow = &g[i * w..(i + 1) * w];
                        for j in xr.clone() {
                            acc += grow[j] * src[row + 2 * j + dx - 1];
                        }
                    }
                    grad_kernel[idx] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let k = kernel[idx] as f64;
                        let dst = &mut gi.data[ci * plane_in..(ci + 1) * plane_in];
                        for i in yr {
                            let row = (2 * i + dy - 1) * input.w;
                            let grow = &g[i * w..(i + 1) * w];
                            for j in xr.clone() {
                                dst[row + 2 * j + dx - 1] += k * grow[j];
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Block inputs: the patch, then each post-ReLU activation.
    inputs: Vec<Tensor>,
    /// Pre-activations of every block.
    pre: Vec<Tensor>,
    embedding: Embedding,
}

impl Forward {
    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Pre-activation values of block `b`, channel-major.
    pub fn pre_activation(&self, b: usize) -> &[f64] {
        &self.pre[b].data
    }

    /// Gradient of `grad_out . embedding` with respect to every parameter,
    /// in the flat parameter layout.
    pub fn backward(&self, weights: &EncoderWeights, grad_out: &[f64]) -> Result<Vec<f64>> {
        if grad_out.len() != weights.arch.embedding_dim() {
            return Err(Error::DimensionMismatch(format!(
                "gradient of size {} for embedding of size {}",
                grad_out.len(),
                weights.arch.embedding_dim()
            )));
        }
        let layout = weights.arch.layout();
        let mut grads = vec![0.0; weights.params.len()];
        let last = self.pre.last().expect("at least one block");
        let n = (last.h * last.w) as f64;
        let mut g = Tensor::zeros(last.c, last.h, last.w);
        for o in 0..last.c {
            let v = grad_out[o] / n;
            g.data[o * last.h * last.w..(o + 1) * last.h * last.w].fill(v);
        }
        for b in (0..layout.len()).rev() {
            for (gv, &z) in g.data.iter_mut().zip(&self.pre[b].data) {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            }
            let slot = layout[b];
            let (gk, rest) = grads[slot.kernel..].split_at_mut(slot.bias - slot.kernel);
            let gb = &mut rest[..slot.cout];
            let gin = conv_backward(
                &self.inputs[b],
                &weights.params[slot.kernel..slot.bias],
                &g,
                gk,
                gb,
                b > 0,
            );
            if let Some(next) = gin {
                g = next;
            }
        }
        Ok(grads)
    }
}

impl EncoderWeights {
    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    /// Zeroes every parameter.
    pub fn zeroed(&self) -> EncoderWeights {
        EncoderWeights {
            params: vec![0.0; self.params.len()],
            ..self.clone()
        }
    }

    /// Kernel and bias ranges of block `b` in the flat layout.
    pub fn block_ranges(&self, b: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.arch.layout()[b];
        (s.kernel..s.bias, s.bias..s.bias + s.cout)
    }

    fn input_tensor(&self, img: &Image) -> Result<Tensor> {
        if img.width() != img.height() {
            return Err(Error::DimensionMismatch("encoder input must be square".into()));
        }
        if img.width() < self.arch.min_side() {
            return Err(Error::TooSmall(format!(
                "patch side {} below the encoder minimum {}",
                img.width(),
                self.arch.min_side()
            )));
        }
        let img = match (img.channels(), self.arch.in_channels) {
            (a, b) if a == b => img.clone(),
            (1, 3) => img.to_rgb()?,
            (a, b) => {
                return Err(Error::DimensionMismatch(format!(
                    "{a}-channel patch for a {b}-channel encoder"
                )))
            }
        };
        Ok(Tensor {
            c: img.channels(),
            h: img.height(),
            w: img.width(),
            data: img.into_data(),
        })
    }

    pub fn forward(&self, img: &Image) -> Result<Forward> {
        let mut x = self.input_tensor(img)?;
        let mut inputs = Vec::with_capacity(self.arch.blocks());
        let mut pre = Vec::with_capacity(self.arch.blocks());
        for slot in self.arch.layout() {
            let z = conv_forward(
                &x,
                &self.params[slot.kernel..slot.bias],
                &self.params[slot.bias..slot.bias + slot.cout],
                slot.cout,
            );
            let a = Tensor {
                data: z.data.iter().map(|&v| v.max(0.0)).collect(),
                ..z.clone()
            };
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        let plane = x.h * x.w;
        let embedding = Embedding(
            (0..x.c)
                .map(|o| x.data[o * plane..(o + 1) * plane].iter().sum::<f64>() / plane as f64)
                .collect(),
        );
        Ok(Forward {
            inputs,
            pre,
            embedding,
        })
    }

    pub fn encode_image(&self, img: &Image) -> Result<Embedding> {
        Ok(self.forward(img)?.embedding)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.params.len());
        out.extend_from_slice(&WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [
            self.arch.in_channels as u32,
            self.arch.input_side as u32,
            self.arch.blocks() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &w in &self.arch.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.level.id().to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EncoderWeights> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::BadMagic {
                expected: WEIGHTS_MAGIC,
            });
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: WEIGHTS_VERSION,
            });
        }
        let in_channels = r.u32()? as usize;
        let input_side = r.u32()? as usize;
        let blocks = r.u32()? as usize;
        if blocks > 64 {
            return Err(Error::Parse(format!("implausible block count {blocks}")));
        }
        let widths = (0..blocks).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let arch = EncoderArch {
            in_channels,
            widths,
            input_side,
        };
        arch.validate()?;
        let level = Level::from_id(r.u32()?)?;
        let epoch = r.u32()?;
        let n = arch.param_count();
        let raw = r.take(4 * n)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after weights",
                bytes.len() - r.pos
            )));
        }
        Ok(EncoderWeights {
            arch,
            level,
            epoch,
            params,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn encode(w: &EncoderWeights, patch: &Patch) -> Result<Embedding> {
    w.encode_image(&patch.pixels)
}

pub fn encode_backward(w: &EncoderWeights, patch: &Patch, grad_out: &Embedding) -> Result<Vec<f64>> {
    w.forward(&patch.pixels)?.backward(w, &grad_out.0)
}

pub fn weights_serialize(w: &EncoderWeights) -> Vec<u8> {
    w.to_bytes()
}

pub fn weights_deserialize(bytes: &[u8]) -> Result<EncoderWeights> {
    EncoderWeights::from_bytes(bytes)
}
