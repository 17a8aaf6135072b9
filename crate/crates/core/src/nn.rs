//! Small feed-forward networks over video-shaped inputs with exact backprop.
//!
//! Activations are `(frames, h, w, channels)` row-major buffers. Convolutions
//! are 3x3, padded by one, and purely spatial (temporal kernel and stride 1).
//! Parameters live in one flat vector so optimizers, checkpoints and
//! finite-difference checks can treat a network as a point in `R^n`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::video::Dims;

const CKPT_MAGIC: &[u8; 4] = b"SVNN";
const CKPT_VERSION: u32 = 1;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.f * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<Dims> for Shape {
    fn from(d: Dims) -> Self {
        Shape { f: d.t, h: d.h, w: d.w, c: d.c }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    /// 3x3 spatial convolution applied to every frame independently.
    Conv { in_ch: usize, out_ch: usize, stride: usize },
    Relu,
    /// Global average over `(h, w)` within each frame.
    FramePool,
    /// Average over frames.
    TemporalMean,
    /// Fully connected layer over the flattened activation.
    Dense { inputs: usize, outputs: usize },
}

impl Layer {
    fn param_count(&self) -> usize {
        match *self {
            Layer::Conv { in_ch, out_ch, .. } => KERNEL * KERNEL * in_ch * out_ch + out_ch,
            Layer::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv { in_ch, .. } => KERNEL * KERNEL * in_ch,
            Layer::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    fn output_shape(&self, s: Shape) -> Result<Shape> {
        match *self {
            Layer::Conv { in_ch, out_ch, stride } => {
                if s.c != in_ch || stride == 0 {
                    return Err(invalid(format!("conv expects {in_ch} channels, got {}", s.c)));
                }
                Ok(Shape { f: s.f, h: (s.h - 1) / stride + 1, w: (s.w - 1) / stride + 1, c: out_ch })
            }
            Layer::Relu => Ok(s),
            Layer::FramePool => Ok(Shape { f: s.f, h: 1, w: 1, c: s.c }),
            Layer::TemporalMean => Ok(Shape { f: 1, ..s }),
            Layer::Dense { inputs, outputs } => {
                if s.len() != inputs {
                    return Err(invalid(format!("dense expects {inputs} inputs, got {}", s.len())));
                }
                Ok(Shape { f: 1, h: 1, w: 1, c: outputs })
            }
        }
    }
}

/// Activations recorded by a forward pass; consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    /// Builds a zero-parameter network; see [`Network::init_uniform`].
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input];
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for layer in &layers {
            shapes.push(layer.output_shape(*shapes.last().unwrap())?);
            offsets.push(total);
            total += layer.param_count();
        }
        offsets.push(total);
        Ok(Self { input, layers, shapes, offsets, params: vec![0.0; total] })
    }

    /// Uniform fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        for (i, layer) in self.layers.iter().enumerate() {
            let fan_in = layer.fan_in();
            if fan_in == 0 {
                continue;
            }
            let bound = (6.0 / fan_in as f64).sqrt();
            let n_weights = layer.param_count() - self.bias_len(i);
            let start = self.offsets[i];
            for p in &mut self.params[start..start + n_weights] {
                *p = rng.gen_range(-bound..bound);
            }
        }
    }

    fn bias_len(&self, i: usize) -> usize {
        match self.layers[i] {
            Layer::Conv { out_ch, .. } => out_ch,
            Layer::Dense { outputs, .. } => outputs,
            _ => 0,
        }
    }

    /// Zeroes the parameters of layer `i`.
    pub fn zero_layer(&mut self, i: usize) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.params[a..b].fill(0.0);
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().unwrap().len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Rounds parameters to single precision so checkpoints reload bit-exactly.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} inputs", self.input.len()),
                actual: format!("{} inputs", input.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        for i in 0..self.layers.len() {
            cur = self.layer_forward(i, &cur);
        }
        Ok(cur)
    }

    /// Forward pass that keeps every intermediate activation.
    pub fn forward_tape(&self, input: &[f64]) -> Result<Tape> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, acts.last().unwrap());
            acts.push(next);
        }
        Ok(Tape { acts })
    }

    /// Conv-stage features for each frame: the activation right before the
    /// first layer that mixes frames (`FramePool`, `TemporalMean` or `Dense`).
    pub fn frame_features(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        for i in 0..self.layers.len() {
            if !matches!(self.layers[i], Layer::Conv { .. } | Layer::Relu) {
                break;
            }
            cur = self.layer_forward(i, &cur);
        }
        Ok(cur)
    }

    fn layer_forward(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let s = self.shapes[i];
        let o = self.shapes[i + 1];
        let p = &self.params[self.offsets[i]..self.offsets[i + 1]];
        match self.layers[i] {
            Layer::Conv { in_ch, out_ch, stride } => conv_forward(x, s, o, in_ch, out_ch, stride, p),
            Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Layer::FramePool => {
                let area = (s.h * s.w) as f64;
                let mut y = vec![0.0; o.len()];
                for f in 0..s.f {
                    let dst = &mut y[f * s.c..(f + 1) * s.c];
                    for px in x[f * s.h * s.w * s.c..(f + 1) * s.h * s.w * s.c].chunks_exact(s.c) {
                        for (d, v) in dst.iter_mut().zip(px) {
                            *d += v;
                        }
                    }
                    dst.iter_mut().for_each(|d| *d /= area);
                }
                y
            }
            Layer::TemporalMean => {
                let n = o.len();
                let mut y = vec![0.0; n];
                for frame in x.chunks_exact(n) {
                    for (d, v) in y.iter_mut().zip(frame) {
                        *d += v;
                    }
                }
                y.iter_mut().for_each(|d| *d /= s.f as f64);
                y
            }
            Layer::Dense { inputs, outputs } => {
                let (w, b) = p.split_at(inputs * outputs);
                let mut y = b.to_vec();
                for (xi, row) in x.iter().zip(w.chunks_exact(outputs)) {
                    if *xi == 0.0 {
                        continue;
                    }
                    for (yo, wo) in y.iter_mut().zip(row) {
                        *yo += xi * wo;
                    }
                }
                y
            }
        }
    }

    /// Accumulates `d(loss)/d(params)` into `grads` given `d(loss)/d(output)`.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grads: &mut [f64]) -> Result<()> {
        if tape.acts.len() != self.layers.len() + 1 {
            return Err(Error::ContractViolation("tape was recorded by a different network".into()));
        }
        if grad_out.len() != self.output_len() || grads.len() != self.params.len() {
            return Err(invalid("gradient buffer sizes do not match the network"));
        }
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let need_input_grad = i > 0;
            g = self.layer_backward(i, &tape.acts[i], &g, grads, need_input_grad);
        }
        Ok(())
    }

    /// `d(loss)/d(input)` given `d(loss)/d(output)`.
    pub fn input_gradient(&self, tape: &Tape, grad_out: &[f64]) -> Result<Vec<f64>> {
        if tape.acts.len() != self.layers.len() + 1 {
            return Err(Error::ContractViolation("tape was recorded by a different network".into()));
        }
        if grad_out.len() != self.output_len() {
            return Err(invalid("gradient buffer size does not match the network"));
        }
        let mut scratch = vec![0.0; self.params.len()];
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            g = self.layer_backward(i, &tape.acts[i], &g, &mut scratch, true);
        }
        Ok(g)
    }

    /// Parameter gradients summed over a batch of recorded forward passes.
    pub fn backward_batch(&self, tapes: &[Tape], grad_outs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if tapes.is_empty() || tapes.len() != grad_outs.len() {
            return Err(Error::ContractViolation(
                "backward needs one recorded forward pass per output gradient".into(),
            ));
        }
        let mut grads = vec![0.0; self.params.len()];
        for (tape, g) in tapes.iter().zip(grad_outs) {
            self.backward(tape, g, &mut grads)?;
        }
        Ok(grads)
    }

    fn layer_backward(&self, i: usize, x: &[f64], gy: &[f64], grads: &mut [f64], need_gx: bool) -> Vec<f64> {
        let s = self.shapes[i];
        let o = self.shapes[i + 1];
        let range = self.offsets[i]..self.offsets[i + 1];
        match self.layers[i] {
            Layer::Conv { in_ch, out_ch, stride } => {
                let p = &self.params[range.clone()];
                conv_backward(x, gy, s, o, in_ch, out_ch, stride, p, &mut grads[range], need_gx)
            }
            Layer::Relu => x.iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
            Layer::FramePool => {
                let area = (s.h * s.w) as f64;
                let mut gx = vec![0.0; s.len()];
                for f in 0..s.f {
                    let src = &gy[f * s.c..(f + 1) * s.c];
                    for px in gx[f * s.h * s.w * s.c..(f + 1) * s.h * s.w * s.c].chunks_exact_mut(s.c) {
                        for (d, g) in px.iter_mut().zip(src) {
                            *d = g / area;
                        }
                    }
                }
                gx
            }
            Layer::TemporalMean => {
                let scale = 1.0 / s.f as f64;
                let mut gx = Vec::with_capacity(s.len());
                for _ in 0..s.f {
                    gx.extend(gy.iter().map(|g| g * scale));
                }
                gx
            }
            Layer::Dense { inputs, outputs } => {
                let p = &self.params[range.clone()];
                let (w, _) = p.split_at(inputs * outputs);
                let gp = &mut grads[range];
                let (gw, gb) = gp.split_at_mut(inputs * outputs);
                for (b, g) in gb.iter_mut().zip(gy) {
                    *b += g;
                }
                let mut gx = vec![0.0; if need_gx { inputs } else { 0 }];
                for (idx, (xi, grow)) in x.iter().zip(gw.chunks_exact_mut(outputs)).enumerate() {
                    if *xi != 0.0 {
                        for (d, g) in grow.iter_mut().zip(gy) {
                            *d += xi * g;
                        }
                    }
                    if need_gx {
                        let wrow = &w[idx * outputs..(idx + 1) * outputs];
                        gx[idx] = wrow.iter().zip(gy).map(|(a, b)| a * b).sum();
                    }
                }
                gx
            }
        }
    }

    pub fn to_bytes(&self, kind: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut out, CKPT_VERSION);
        put_u32(&mut out, kind);
        for v in [self.input.f, self.input.h, self.input.w, self.input.c] {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, self.layers.len() as u32);
        for layer in &self.layers {
            let fields = match *layer {
                Layer::Conv { in_ch, out_ch, stride } => [0, in_ch, out_ch, stride],
                Layer::Relu => [1, 0, 0, 0],
                Layer::FramePool => [2, 0, 0, 0],
                Layer::TemporalMean => [3, 0, 0, 0],
                Layer::Dense { inputs, outputs } => [4, inputs, outputs, 0],
            };
            for v in fields {
                put_u32(&mut out, v as u32);
            }
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint, returning the network and its kind tag.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, u32)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.u32()?;
        let input = Shape { f: r.usize()?, h: r.usize()?, w: r.usize()?, c: r.usize()? };
        let n_layers = r.usize()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let f = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
            layers.push(match f[0] {
                0 => Layer::Conv { in_ch: f[1], out_ch: f[2], stride: f[3] },
                1 => Layer::Relu,
                2 => Layer::FramePool,
                3 => Layer::TemporalMean,
                4 => Layer::Dense { inputs: f[1], outputs: f[2] },
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            });
        }
        let mut net = Network::new(input, layers).map_err(|e| Error::Format(e.to_string()))?;
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        if count != net.params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {count}", net.params.len())));
        }
        for p in &mut net.params {
            let b = r.take(4)?;
            *p = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok((net, kind))
    }

    pub fn save(&self, path: impl AsRef<Path>, kind: u32) -> Result<()> {
        fs::write(path, self.to_bytes(kind))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u32)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - 1;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

// Weight layout: [ky][kx][in][out] followed by bias[out].
fn conv_forward(x: &[f64], s: Shape, o: Shape, ci: usize, co: usize, stride: usize, p: &[f64]) -> Vec<f64> {
    let (w, b) = p.split_at(KERNEL * KERNEL * ci * co);
    let mut y = vec![0.0; o.len()];
    for f in 0..s.f {
        let xf = &x[f * s.h * s.w * ci..(f + 1) * s.h * s.w * ci];
        for oy in 0..o.h {
            for ox in 0..o.w {
                let base = ((f * o.h + oy) * o.w + ox) * co;
                let out = &mut y[base..base + co];
                out.copy_from_slice(b);
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, stride, s.h) else { continue };
                    for kx in 0..KERNEL {
                        let Some(ix) = tap(ox, kx, stride, s.w) else { continue };
                        let inp = &xf[(iy * s.w + ix) * ci..(iy * s.w + ix + 1) * ci];
                        let wk = &w[(ky * KERNEL + kx) * ci * co..(ky * KERNEL + kx + 1) * ci * co];
                        for (v, wrow) in inp.iter().zip(wk.chunks_exact(co)) {
                            if *v == 0.0 {
                                continue;
                            }
                            for (d, wv) in out.iter_mut().zip(wrow) {
                                *d += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    gy: &[f64],
    s: Shape,
    o: Shape,
    ci: usize,
    co: usize,
    stride: usize,
    p: &[f64],
    gp: &mut [f64],
    need_gx: bool,
) -> Vec<f64> {
    let nw = KERNEL * KERNEL * ci * co;
    let w = &p[..nw];
    let (gw, gb) = gp.split_at_mut(nw);
    let mut gx = vec![0.0; if need_gx { s.len() } else { 0 }];
    for f in 0..s.f {
        let xoff = f * s.h * s.w * ci;
        for oy in 0..o.h {
            for ox in 0..o.w {
                let base = ((f * o.h + oy) * o.w + ox) * co;
                let g = &gy[base..base + co];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for (b, gv) in gb.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, stride, s.h) else { continue };
                    for kx in 0..KERNEL {
                        let Some(ix) = tap(ox, kx, stride, s.w) else { continue };
                        let ioff = xoff + (iy * s.w + ix) * ci;
                        let koff = (ky * KERNEL + kx) * ci * co;
                        for c in 0..ci {
                            let row = koff + c * co..koff + (c + 1) * co;
                            let v = x[ioff + c];
                            if v != 0.0 {
                                for (d, gv) in gw[row.clone()].iter_mut().zip(g) {
                                    *d += v * gv;
                                }
                            }
                            if need_gx {
                                gx[ioff + c] += w[row].iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `log(softmax(logits))`, finite for finite logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}
