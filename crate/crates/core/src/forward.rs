//! Forward evaluation: full traces and the incremental evaluator used by
//! permutation sampling.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Layer, LayerRef, ModelGraph};
use crate::tensor::Tensor;

/// Cached outputs of one forward pass.
///
/// `outputs[l]` is the output of layer `l`; the last entry is the logit
/// vector. Pre-activations of a ReLU are the previous entry (or the input).
#[derive(Debug, Clone)]
pub struct ActivationTrace<'m> {
    model: &'m ModelGraph,
    input: Tensor,
    outputs: Vec<Tensor>,
}

impl<'m> ActivationTrace<'m> {
    pub fn model(&self) -> &'m ModelGraph {
        self.model
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("models have at least one layer")
    }

    pub fn logit(&self, target: usize) -> f64 {
        self.logits().data()[target]
    }

    /// Input of layer `l` (the image for `l == 0`).
    pub fn layer_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.input
        } else {
            &self.outputs[l - 1]
        }
    }

    /// Cached output of a layer. Layer outputs are post-activation only when
    /// the activation is itself the referenced layer; `LastConv` resolves to
    /// the ReLU that directly follows the last convolution.
    pub fn feature_at(&self, layer: LayerRef) -> Result<&Tensor> {
        let idx = self.model.resolve(layer)?;
        Ok(&self.outputs[idx])
    }
}

/// Runs the model on `input`, keeping every layer output.
pub fn forward<'m>(model: &'m ModelGraph, input: &Tensor) -> Result<ActivationTrace<'m>> {
    check_input(model, input)?;
    let outputs = run_layers(model, input);
    if !outputs.last().is_some_and(Tensor::is_finite) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(ActivationTrace {
        model,
        input: input.clone(),
        outputs,
    })
}

pub(crate) fn check_input(model: &ModelGraph, input: &Tensor) -> Result<()> {
    if input.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            found: input.shape().to_vec(),
        });
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("model input"));
    }
    Ok(())
}

/// Forward pass without validation; `input` must match the model.
pub(crate) fn run_layers(model: &ModelGraph, input: &Tensor) -> Vec<Tensor> {
    run_packed(model, &pack_kernels(model), input)
}

fn run_packed(model: &ModelGraph, packed: &[Vec<f64>], input: &Tensor) -> Vec<Tensor> {
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.layers().len());
    for (l, layer) in model.layers().iter().enumerate() {
        let mut out = Tensor::zeros(model.output_shape(l));
        let x = if l == 0 { input } else { &outputs[l - 1] };
        eval_region(layer, &packed[l], x, &mut out, Region::All);
        outputs.push(out);
    }
    outputs
}

/// Conv weights reordered to `[ci][ky][kx][co]` (empty for other layers), so
/// that one input tap updates all output channels from contiguous memory.
fn pack_kernels(model: &ModelGraph) -> Vec<Vec<f64>> {
    model
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Conv2d { weight, .. } => {
                let &[co_n, ci_n, k, _] = weight.shape() else {
                    unreachable!("validated conv weight")
                };
                let taps = ci_n * k * k;
                let mut packed = alloc::vec![0.0; co_n * taps];
                for co in 0..co_n {
                    for t in 0..taps {
                        packed[t * co_n + co] = weight.data()[co * taps + t];
                    }
                }
                packed
            }
            _ => Vec::new(),
        })
        .collect()
}

/// Logits only.
pub(crate) fn run_logits(model: &ModelGraph, input: &Tensor) -> Tensor {
    run_layers(model, input).pop().expect("non-empty model")
}

/// Half-open spatial rectangle of a rank-3 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    fn union(self, other: Rect) -> Rect {
        Rect {
            y0: self.y0.min(other.y0),
            y1: self.y1.max(other.y1),
            x0: self.x0.min(other.x0),
            x1: self.x1.max(other.x1),
        }
    }

    fn is_empty(&self) -> bool {
        self.y0 >= self.y1 || self.x0 >= self.x1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Region {
    None,
    Rect(Rect),
    All,
}

/// Output cells of `layer` affected by a change of `region` in its input.
fn propagate(layer: &Layer, region: Region, out_shape: &[usize]) -> Region {
    let r = match region {
        Region::None => return Region::None,
        Region::All => return Region::All,
        Region::Rect(r) => r,
    };
    let out = match layer {
        Layer::Conv2d { weight, padding, .. } => {
            let k = weight.shape()[2];
            let (h, w) = (out_shape[1], out_shape[2]);
            Rect {
                y0: (r.y0 + padding + 1).saturating_sub(k),
                y1: (r.y1 + padding).min(h),
                x0: (r.x0 + padding + 1).saturating_sub(k),
                x1: (r.x1 + padding).min(w),
            }
        }
        Layer::Relu if out_shape.len() == 3 => r,
        Layer::MaxPool2d { size } => Rect {
            y0: r.y0 / size,
            y1: ((r.y1 - 1) / size + 1).min(out_shape[1]),
            x0: r.x0 / size,
            x1: ((r.x1 - 1) / size + 1).min(out_shape[2]),
        },
        _ => return Region::All,
    };
    if out.is_empty() {
        Region::None
    } else {
        Region::Rect(out)
    }
}

/// Recomputes `region` of `out = layer(x)`.
fn eval_region(layer: &Layer, packed: &[f64], x: &Tensor, out: &mut Tensor, region: Region) {
    let full = |t: &Tensor| {
        let s = t.shape();
        Rect {
            y0: 0,
            y1: s[1],
            x0: 0,
            x1: s[2],
        }
    };
    match layer {
        Layer::Dense { weight, bias } => {
            let cols = weight.shape()[1];
            let (w, b, xin) = (weight.data(), bias.data(), x.data());
            for (j, o) in out.data_mut().iter_mut().enumerate() {
                let row = &w[j * cols..(j + 1) * cols];
                let mut acc = b[j];
                for (wi, xi) in row.iter().zip(xin) {
                    acc += wi * xi;
                }
                *o = acc;
            }
        }
        Layer::Conv2d { weight, bias, padding } => {
            let rect = match region {
                Region::None => return,
                Region::All => full(out),
                Region::Rect(r) => r,
            };
            conv_rect(weight.shape()[2], packed, bias.data(), *padding, x, out, rect);
        }
        Layer::Relu => match region {
            Region::None => {}
            Region::Rect(r) if out.shape().len() == 3 => {
                let (c, h, w) = out.chw().expect("rank 3");
                let xin = x.data();
                let o = out.data_mut();
                for ch in 0..c {
                    for y in r.y0..r.y1 {
                        let base = (ch * h + y) * w;
                        for i in base + r.x0..base + r.x1 {
                            o[i] = relu(xin[i]);
                        }
                    }
                }
            }
            _ => {
                for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                    *o = relu(v);
                }
            }
        },
        Layer::MaxPool2d { size } => {
            let rect = match region {
                Region::None => return,
                Region::All => full(out),
                Region::Rect(r) => r,
            };
            let (c, h, w) = x.chw().expect("rank 3");
            let (_, oh, ow) = out.chw().expect("rank 3");
            let xin = x.data();
            let o = out.data_mut();
            for ch in 0..c {
                for oy in rect.y0..rect.y1 {
                    for ox in rect.x0..rect.x1 {
                        let (src, _) = pool_winner(xin, ch, h, w, oy, ox, *size);
                        o[(ch * oh + oy) * ow + ox] = xin[src];
                    }
                }
            }
        }
        Layer::GlobalAvgPool => {
            let (c, h, w) = x.chw().expect("rank 3");
            let area = (h * w) as f64;
            let xin = x.data();
            for (ch, o) in out.data_mut().iter_mut().enumerate().take(c) {
                let s: f64 = xin[ch * h * w..(ch + 1) * h * w].iter().sum();
                *o = s / area;
            }
        }
        Layer::Flatten => out.data_mut().copy_from_slice(x.data()),
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Flat index of the winning input inside one pooling window; ties go to
/// the lowest flat index.
pub(crate) fn pool_winner(xin: &[f64], ch: usize, h: usize, w: usize, oy: usize, ox: usize, size: usize) -> (usize, f64) {
    let mut best = (ch * h + oy * size) * w + ox * size;
    for dy in 0..size {
        let row = (ch * h + oy * size + dy) * w + ox * size;
        for i in row..row + size {
            if xin[i] > xin[best] {
                best = i;
            }
        }
    }
    (best, xin[best])
}

/// Each output cell starts from its bias and adds the taps in
/// `(ci, ky, kx)` order, independently per output channel.
fn conv_rect(k: usize, packed: &[f64], bias: &[f64], padding: usize, x: &Tensor, out: &mut Tensor, rect: Rect) {
    let co_n = bias.len();
    let (ci_n, h, w) = x.chw().expect("rank 3");
    let (_, oh, ow) = out.chw().expect("rank 3");
    let xin = x.data();
    let o = out.data_mut();
    let mut acc = alloc::vec![0.0; co_n];
    for oy in rect.y0..rect.y1 {
        // Input row oy + ky - padding must lie in [0, h).
        let ky0 = padding.saturating_sub(oy);
        let ky1 = k.min(h + padding - oy);
        for ox in rect.x0..rect.x1 {
            let kx0 = padding.saturating_sub(ox);
            let kx1 = k.min(w + padding - ox);
            acc.copy_from_slice(bias);
            for ci in 0..ci_n {
                for ky in ky0..ky1 {
                    let xrow = (ci * h + oy + ky - padding) * w + ox;
                    let trow = (ci * k + ky) * k;
                    for kx in kx0..kx1 {
                        let xv = xin[xrow + kx - padding];
                        let wt = &packed[(trow + kx) * co_n..(trow + kx + 1) * co_n];
                        for (a, wv) in acc.iter_mut().zip(wt) {
                            *a += wv * xv;
                        }
                    }
                }
            }
            for (co, a) in acc.iter().enumerate() {
                o[(co * oh + oy) * ow + ox] = *a;
            }
        }
    }
}

/// Copies the cells of `r` (all channels) out of a rank-3 tensor.
fn snapshot(t: &Tensor, r: Rect, buf: &mut Vec<f64>) {
    let (c, h, w) = t.chw().expect("spatial regions only exist on rank-3 tensors");
    buf.clear();
    for ch in 0..c {
        for y in r.y0..r.y1 {
            let row = (ch * h + y) * w;
            buf.extend_from_slice(&t.data()[row + r.x0..row + r.x1]);
        }
    }
}

/// Bounding box of the cells in `r` whose bits differ from `old`.
fn changed_cells(t: &Tensor, r: Rect, old: &[f64]) -> Region {
    let (c, h, w) = t.chw().expect("spatial regions only exist on rank-3 tensors");
    let mut hit: Option<Rect> = None;
    let mut i = 0;
    for ch in 0..c {
        for y in r.y0..r.y1 {
            let row = (ch * h + y) * w;
            for x in r.x0..r.x1 {
                if t.data()[row + x].to_bits() != old[i].to_bits() {
                    let cell = Rect {
                        y0: y,
                        y1: y + 1,
                        x0: x,
                        x1: x + 1,
                    };
                    hit = Some(hit.map_or(cell, |h| h.union(cell)));
                }
                i += 1;
            }
        }
    }
    hit.map_or(Region::None, Region::Rect)
}

/// Values of a spatial rectangle saved before it was overwritten.
struct Saved<'a> {
    buf: &'a [f64],
    rect: Rect,
}

impl Saved<'_> {
    fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        let (rh, rw) = (self.rect.y1 - self.rect.y0, self.rect.x1 - self.rect.x0);
        self.buf[(ch * rh + y - self.rect.y0) * rw + x - self.rect.x0]
    }
}

/// Adds `conv(new − old)` over the changed input cells `r` to `out`.
fn conv_delta(k: usize, packed: &[f64], padding: usize, x: &Tensor, old: &Saved<'_>, r: Rect, out: &mut Tensor) {
    let (ci_n, h, w) = x.chw().expect("rank 3");
    let (co_n, oh, ow) = out.chw().expect("rank 3");
    let o = out.data_mut();
    for ci in 0..ci_n {
        for y in r.y0..r.y1 {
            for xx in r.x0..r.x1 {
                let d = x.data()[(ci * h + y) * w + xx] - old.get(ci, y, xx);
                if d == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    let Some(oy) = (y + padding).checked_sub(ky).filter(|&v| v < oh) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ox) = (xx + padding).checked_sub(kx).filter(|&v| v < ow) else {
                            continue;
                        };
                        let tap = ((ci * k + ky) * k + kx) * co_n;
                        for (co, wv) in packed[tap..tap + co_n].iter().enumerate() {
                            o[(co * oh + oy) * ow + ox] += wv * d;
                        }
                    }
                }
            }
        }
    }
}

/// Adds the change of each channel mean caused by the cells in `r`.
fn gap_delta(x: &Tensor, old: &Saved<'_>, r: Rect, out: &mut Tensor) {
    let (c, h, w) = x.chw().expect("rank 3");
    let area = (h * w) as f64;
    for ch in 0..c {
        let mut d = 0.0;
        for y in r.y0..r.y1 {
            for xx in r.x0..r.x1 {
                d += x.data()[(ch * h + y) * w + xx] - old.get(ch, y, xx);
            }
        }
        out.data_mut()[ch] += d / area;
    }
}

/// Keeps a forward pass up to date under pixel edits.
///
/// Only cells downstream of an edit are touched. Convolutions and global
/// average pooling are linear, so they absorb the change of their input
/// instead of being recomputed; ReLU and max pooling are re-evaluated on the
/// affected window. The logits therefore track a fresh [`forward`] up to
/// floating-point rounding, and any fixed sequence of edits gives
/// bit-identical results.
#[derive(Debug, Clone)]
pub struct IncrementalForward<'m> {
    model: &'m ModelGraph,
    input: Tensor,
    /// The input as of the last refresh.
    synced: Tensor,
    outputs: Vec<Tensor>,
    dirty: Region,
    packed: Vec<Vec<f64>>,
    old_in: Vec<f64>,
    old_out: Vec<f64>,
}

impl<'m> IncrementalForward<'m> {
    pub fn new(model: &'m ModelGraph, input: &Tensor) -> Result<Self> {
        check_input(model, input)?;
        let packed = pack_kernels(model);
        Ok(IncrementalForward {
            model,
            input: input.clone(),
            synced: input.clone(),
            outputs: run_packed(model, &packed, input),
            dirty: Region::None,
            packed,
            old_in: Vec::new(),
            old_out: Vec::new(),
        })
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Overwrites every channel of pixel `(y, x)` with `values`.
    pub fn set_pixel(&mut self, y: usize, x: usize, values: &[f64]) {
        let [c, h, w] = self.model.input_shape();
        debug_assert_eq!(values.len(), c);
        let data = self.input.data_mut();
        for (ch, &v) in values.iter().enumerate() {
            data[(ch * h + y) * w + x] = v;
        }
        let cell = Rect {
            y0: y,
            y1: y + 1,
            x0: x,
            x1: x + 1,
        };
        self.dirty = match self.dirty {
            Region::None => Region::Rect(cell),
            Region::Rect(r) => Region::Rect(r.union(cell)),
            Region::All => Region::All,
        };
    }

    /// Brings every layer output up to date and returns the logits.
    pub fn logits(&mut self) -> &Tensor {
        let mut region = core::mem::replace(&mut self.dirty, Region::None);
        // `saved` is the rectangle whose previous values sit in `old_in`.
        let mut saved = match region {
            Region::Rect(r) => {
                snapshot(&self.synced, r, &mut self.old_in);
                copy_rect(&self.input, &mut self.synced, r);
                r
            }
            _ => {
                self.synced.data_mut().copy_from_slice(self.input.data());
                Rect {
                    y0: 0,
                    y1: 0,
                    x0: 0,
                    x1: 0,
                }
            }
        };
        for (l, layer) in self.model.layers().iter().enumerate() {
            let changed = region;
            region = propagate(layer, changed, self.model.output_shape(l));
            if region == Region::None {
                break;
            }
            let (before, after) = self.outputs.split_at_mut(l);
            let x = if l == 0 { &self.input } else { &before[l - 1] };
            let out = &mut after[0];
            let old = Saved {
                buf: &self.old_in,
                rect: saved,
            };
            match (changed, region, layer) {
                (Region::Rect(rin), Region::Rect(rout), _) => {
                    snapshot(out, rout, &mut self.old_out);
                    match layer {
                        Layer::Conv2d { weight, padding, .. } => {
                            conv_delta(weight.shape()[2], &self.packed[l], *padding, x, &old, rin, out)
                        }
                        _ => eval_region(layer, &self.packed[l], x, out, region),
                    }
                    region = changed_cells(out, rout, &self.old_out);
                    core::mem::swap(&mut self.old_in, &mut self.old_out);
                    saved = rout;
                }
                (Region::Rect(rin), _, Layer::GlobalAvgPool) => gap_delta(x, &old, rin, out),
                _ => eval_region(layer, &self.packed[l], x, out, region),
            }
        }
        self.outputs.last().expect("non-empty model")
    }
}

fn copy_rect(src: &Tensor, dst: &mut Tensor, r: Rect) {
    let (c, h, w) = src.chw().expect("rank 3");
    for ch in 0..c {
        for y in r.y0..r.y1 {
            let row = (ch * h + y) * w;
            dst.data_mut()[row + r.x0..row + r.x1].copy_from_slice(&src.data()[row + r.x0..row + r.x1]);
        }
    }
}
