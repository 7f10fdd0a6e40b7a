//! A fixed small convolutional classifier with exact hand-derived gradients.
//!
//! Architecture, all tensors NHWC and 64-bit:
//!
//! ```text
//! conv3x3(C_in -> 16, pad 1) -> relu -> maxpool2
//! conv3x3(16 -> 32, pad 1)   -> relu -> maxpool2
//! dense(-> 128) -> relu -> dense(-> classes)
//! ```
//!
//! Convolutions run as im2col followed by a GEMM. ReLU passes gradient only
//! where the pre-activation is strictly positive; max pooling routes gradient
//! to the first maximal element of each window in row-major order.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageops::Image;

const CONV1_OUT: usize = 16;
const CONV2_OUT: usize = 32;
const HIDDEN: usize = 128;
/// Layers in the forward pass: conv, relu, pool, conv, relu, pool, dense, relu, dense.
pub const ARCH_LAYERS: usize = 9;
/// Parameter tensors in file and optimizer order.
pub const PARAM_TENSORS: usize = 8;

const MAGIC: &[u8; 4] = b"AKDW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn of(img: &Image) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
        }
    }

    fn pooled(self) -> (usize, usize, usize, usize) {
        let (h1, w1) = (self.height / 2, self.width / 2);
        (h1, w1, h1 / 2, w1 / 2)
    }

    fn flat_features(self) -> usize {
        let (_, _, h2, w2) = self.pooled();
        h2 * w2 * CONV2_OUT
    }
}

/// Stacks images into an `[N, H, W, C]` batch scaled to `[0, 1]`.
pub fn images_to_batch<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<InputShape> = None;
    let mut n = 0;
    for img in images {
        let s = InputShape::of(img);
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::Shape(format!("mixed image shapes {prev:?} and {s:?}")))
            }
            _ => {}
        }
        data.extend(img.data().iter().map(|&b| f64::from(b) / 255.0));
        n += 1;
    }
    let s = shape.ok_or_else(|| Error::Shape("empty batch".into()))?;
    Tensor::new(vec![n, s.height, s.width, s.channels], data)
}

/// All trainable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    input: InputShape,
    classes: usize,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

fn layer_shapes(input: InputShape, classes: usize) -> [Vec<usize>; PARAM_TENSORS] {
    [
        vec![3, 3, input.channels, CONV1_OUT],
        vec![CONV1_OUT],
        vec![3, 3, CONV1_OUT, CONV2_OUT],
        vec![CONV2_OUT],
        vec![input.flat_features(), HIDDEN],
        vec![HIDDEN],
        vec![HIDDEN, classes],
        vec![classes],
    ]
}

fn check_architecture(input: InputShape, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, got {classes}")));
    }
    if input.height < 8 || input.width < 8 {
        return Err(Error::InputTooSmall {
            height: input.height,
            width: input.width,
        });
    }
    if input.channels == 0 {
        return Err(Error::Shape("input has no channels".into()));
    }
    Ok(())
}

impl ModelParams {
    /// All-zero parameters for the given input and class count.
    pub fn zeros(input: InputShape, classes: usize) -> Result<Self> {
        check_architecture(input, classes)?;
        let [a, b, c, d, e, f, g, h] = layer_shapes(input, classes).map(|s| Tensor::zeros(&s));
        Ok(Self {
            input,
            classes,
            conv1_w: a,
            conv1_b: b,
            conv2_w: c,
            conv2_b: d,
            fc1_w: e,
            fc1_b: f,
            fc2_w: g,
            fc2_b: h,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input, self.classes).expect("shape already validated")
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tensors(&self) -> [&Tensor; PARAM_TENSORS] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; PARAM_TENSORS] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.input == other.input && self.classes == other.classes
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn init_params<R: Rng + ?Sized>(
    rng: &mut R,
    input: InputShape,
    classes: usize,
) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(input, classes)?;
    for (i, t) in p.tensors_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            continue;
        }
        let fan_in: usize = t.shape()[..t.shape().len() - 1].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for w in t.data_mut() {
            *w = normal.sample(rng);
        }
    }
    Ok(p)
}

/// `C = op(A) · op(B) + beta · C` with row-major storage, where `A` is
/// `m×k` (stored `k×m` when `a_t`) and `B` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the kernel touches by the
    // slice lengths, and `c` does not alias `a` or `b` (it is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries whose activation was not strictly positive.
fn relu_backward(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn column_sums(m: &[f64], cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for row in m.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// 3x3, pad-1 patches: row `(n, y, x)`, column `(ky, kx, c)`.
fn im2col(input: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let cols = 9 * c;
    let mut out = vec![0.0; n * h * w * cols];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * cols;
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x + kx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        let src = ((b * h + sy - 1) * w + sx - 1) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the input.
fn col2im(patches: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let cols = 9 * c;
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * cols;
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x + kx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        let dst = ((b * h + sy - 1) * w + sx - 1) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (o, g) in out[dst..dst + c].iter_mut().zip(&patches[src..src + c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 max pooling; returns the pooled values and, for each, the
/// flat input index of the first maximal element in row-major window order.
fn maxpool(input: &[f64], n: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    let mut idx = vec![0u32; out.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                    out[o + ch] = input[best];
                    idx[o + ch] = best as u32;
                }
            }
        }
    }
    (out, idx)
}

fn unpool(grad: &[f64], idx: &[u32], input_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; input_len];
    for (&g, &i) in grad.iter().zip(idx) {
        out[i as usize] += g;
    }
    out
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    input: InputShape,
    classes: usize,
    patches1: Vec<f64>,
    act1: Vec<f64>,
    pool1_idx: Vec<u32>,
    patches2: Vec<f64>,
    act2: Vec<f64>,
    pool2_idx: Vec<u32>,
    flat: Vec<f64>,
    act3: Vec<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Number of architecture layers whose state the trace covers.
    pub fn layer_count(&self) -> usize {
        ARCH_LAYERS
    }
}

fn check_batch(params: &ModelParams, batch: &Tensor) -> Result<usize> {
    let s = params.input;
    match batch.shape() {
        [n, h, w, c] if *h == s.height && *w == s.width && *c == s.channels && *n > 0 => Ok(*n),
        other => Err(Error::Shape(format!(
            "batch {other:?} does not match model input [N, {}, {}, {}]",
            s.height, s.width, s.channels
        ))),
    }
}

/// Logits `[N, classes]` without keeping a trace.
pub fn infer(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    forward(params, batch).map(|(logits, _)| logits)
}

pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    let n = check_batch(params, batch)?;
    let s = params.input;
    let (h, w, cin) = (s.height, s.width, s.channels);
    let (h1, w1, h2, w2) = s.pooled();
    let classes = params.classes;

    let patches1 = im2col(batch.data(), n, h, w, cin);
    let rows1 = n * h * w;
    let mut act1 = vec![0.0; rows1 * CONV1_OUT];
    gemm(rows1, 9 * cin, CONV1_OUT, &patches1, false, params.conv1_w.data(), false, 0.0, &mut act1);
    add_bias(&mut act1, params.conv1_b.data());
    relu_in_place(&mut act1);
    let (pool1, pool1_idx) = maxpool(&act1, n, h, w, CONV1_OUT);

    let patches2 = im2col(&pool1, n, h1, w1, CONV1_OUT);
    let rows2 = n * h1 * w1;
    let mut act2 = vec![0.0; rows2 * CONV2_OUT];
    gemm(rows2, 9 * CONV1_OUT, CONV2_OUT, &patches2, false, params.conv2_w.data(), false, 0.0, &mut act2);
    add_bias(&mut act2, params.conv2_b.data());
    relu_in_place(&mut act2);
    let (flat, pool2_idx) = maxpool(&act2, n, h1, w1, CONV2_OUT);

    let features = h2 * w2 * CONV2_OUT;
    let mut act3 = vec![0.0; n * HIDDEN];
    gemm(n, features, HIDDEN, &flat, false, params.fc1_w.data(), false, 0.0, &mut act3);
    add_bias(&mut act3, params.fc1_b.data());
    relu_in_place(&mut act3);

    let mut logits = vec![0.0; n * classes];
    gemm(n, HIDDEN, classes, &act3, false, params.fc2_w.data(), false, 0.0, &mut logits);
    add_bias(&mut logits, params.fc2_b.data());

    let trace = ForwardTrace {
        batch: n,
        input: s,
        classes,
        patches1,
        act1,
        pool1_idx,
        patches2,
        act2,
        pool2_idx,
        flat,
        act3,
    };
    Ok((Tensor::new(vec![n, classes], logits)?, trace))
}

/// Gradients of `(1/N) Σ_n grad_logits[n] · logits[n]` with respect to every
/// parameter, i.e. the batch-mean gradient of any loss whose per-sample logit
/// gradient is `grad_logits`.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<ModelParams> {
    let n = trace.batch;
    if trace.input != params.input || trace.classes != params.classes {
        return Err(Error::Shape(
            "trace was produced by a model of a different shape".into(),
        ));
    }
    if grad_logits.shape() != [n, params.classes] {
        return Err(Error::Shape(format!(
            "grad_logits {:?} does not match trace batch [{n}, {}]",
            grad_logits.shape(),
            params.classes
        )));
    }
    let s = params.input;
    let (h, w, cin) = (s.height, s.width, s.channels);
    let (h1, w1, h2, w2) = s.pooled();
    let classes = params.classes;
    let features = h2 * w2 * CONV2_OUT;
    let mut grads = params.zeros_like();

    let scale = 1.0 / n as f64;
    let g4: Vec<f64> = grad_logits.data().iter().map(|g| g * scale).collect();

    // dense 2
    gemm(HIDDEN, n, classes, &trace.act3, true, &g4, false, 0.0, grads.fc2_w.data_mut());
    column_sums(&g4, classes, grads.fc2_b.data_mut());
    let mut g3 = vec![0.0; n * HIDDEN];
    gemm(n, classes, HIDDEN, &g4, false, params.fc2_w.data(), true, 0.0, &mut g3);
    relu_backward(&mut g3, &trace.act3);

    // dense 1
    gemm(features, n, HIDDEN, &trace.flat, true, &g3, false, 0.0, grads.fc1_w.data_mut());
    column_sums(&g3, HIDDEN, grads.fc1_b.data_mut());
    let mut g_flat = vec![0.0; n * features];
    gemm(n, HIDDEN, features, &g3, false, params.fc1_w.data(), true, 0.0, &mut g_flat);

    // pool 2, relu 2, conv 2
    let rows2 = n * h1 * w1;
    let mut g2 = unpool(&g_flat, &trace.pool2_idx, rows2 * CONV2_OUT);
    relu_backward(&mut g2, &trace.act2);
    let k2 = 9 * CONV1_OUT;
    gemm(k2, rows2, CONV2_OUT, &trace.patches2, true, &g2, false, 0.0, grads.conv2_w.data_mut());
    column_sums(&g2, CONV2_OUT, grads.conv2_b.data_mut());
    let mut g_patches2 = vec![0.0; rows2 * k2];
    gemm(rows2, CONV2_OUT, k2, &g2, false, params.conv2_w.data(), true, 0.0, &mut g_patches2);
    let g_pool1 = col2im(&g_patches2, n, h1, w1, CONV1_OUT);

    // pool 1, relu 1, conv 1
    let rows1 = n * h * w;
    let mut g1 = unpool(&g_pool1, &trace.pool1_idx, rows1 * CONV1_OUT);
    relu_backward(&mut g1, &trace.act1);
    gemm(9 * cin, rows1, CONV1_OUT, &trace.patches1, true, &g1, false, 0.0, grads.conv1_w.data_mut());
    column_sums(&g1, CONV1_OUT, grads.conv1_b.data_mut());

    Ok(grads)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ParamsFormat(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes to the `AKDW` layout: magic, version, class count, input
/// height/width/channels, then for each of the eight tensors its rank, dims
/// and little-endian f64 data. All integers are little-endian u32.
pub fn save_params(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize)?;
    put_u32(&mut out, params.classes)?;
    put_u32(&mut out, params.input.height)?;
    put_u32(&mut out, params.input.width)?;
    put_u32(&mut out, params.input.channels)?;
    for t in params.tensors() {
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_params<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(&save_params(params)?)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    load_params(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::ParamsFormat(format!("truncated stream at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn load_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::ParamsFormat("bad magic, expected AKDW".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::ParamsFormat(format!("unsupported version {version}")));
    }
    let classes = cur.u32()?;
    let input = InputShape {
        height: cur.u32()?,
        width: cur.u32()?,
        channels: cur.u32()?,
    };
    let mut params = ModelParams::zeros(input, classes)?;
    let expected = layer_shapes(input, classes);
    for (i, (t, want)) in params.tensors_mut().into_iter().zip(expected).enumerate() {
        let rank = cur.u32()?;
        if rank > 8 {
            return Err(Error::Shape(format!("tensor {i}: implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        if dims != want {
            return Err(Error::Shape(format!(
                "tensor {i}: file has {dims:?}, architecture needs {want:?}"
            )));
        }
        let raw = cur.take(t.len() * 8)?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::ParamsFormat(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}
