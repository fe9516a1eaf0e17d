use std::sync::Arc;

use super::conv::{col2im, im2col, same_geometry, Geometry};
use super::{Op, Tape, Var};
use crate::error::NnError;
use crate::tensor::{Float, Tensor};

fn mismatch(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

/// Result of a batch-normalization forward pass. The batch statistics are
/// returned so the caller can fold them into its running estimates.
pub struct BatchNormOutput<F> {
    pub y: Var<F>,
    pub mean: Vec<F>,
    pub var_unbiased: Vec<F>,
}

impl<F: Float> Tape<F> {
    /// Stride-1 convolution with "same" zero padding. `w` is `(C_out, C_in, k, k)`, `k` odd.
    pub fn conv2d(&mut self, x: &Var<F>, w: &Var<F>, bias: Option<&Var<F>>) -> Result<Var<F>, NnError> {
        let (b, ci, h, wd) = x.dims4()?;
        let (co, wci, k, k2) = w.dims4()?;
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(mismatch(format!(
                "conv2d: input {:?} with kernel {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if let Some(bias) = bias {
            if bias.shape() != [co] {
                return Err(mismatch(format!("conv2d: bias {:?} for {co} outputs", bias.shape())));
            }
        }
        let g = same_geometry(ci, h, wd, k);
        let cells = h * wd;
        let mut out = Tensor::zeros(&[b, co, h, wd]);
        let mut cols = if k == 1 { Vec::new() } else { vec![F::zero(); g.rows() * cells] };
        let wdat = w.value().data();
        for item in 0..b {
            let src = x.value().item(item);
            let dst = &mut out.data_mut()[item * co * cells..(item + 1) * co * cells];
            let rhs: &[F] = if k == 1 {
                src
            } else {
                im2col(src, &g, &mut cols);
                &cols
            };
            F::gemm(co, g.rows(), cells, F::one(), wdat, g.rows(), 1, rhs, cells, 1, F::zero(), dst, cells);
            if let Some(bias) = bias {
                for (c, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut dst[c * cells..(c + 1) * cells] {
                        *v += bv;
                    }
                }
            }
        }
        let inputs = [Some(x), Some(w), bias];
        Ok(if self.wants(&inputs) {
            let op = Op::Conv2d { x: x.rc(), w: w.rc() };
            self.push(op, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Transposed convolution; `w` is `(C_in, C_out, k, k)`. Output side is
    /// `(n - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: &Var<F>,
        w: &Var<F>,
        bias: Option<&Var<F>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var<F>, NnError> {
        let (b, ci, h, wd) = x.dims4()?;
        let (wci, co, k, k2) = w.dims4()?;
        if wci != ci || k != k2 {
            return Err(mismatch(format!(
                "conv_transpose2d: input {:?} with kernel {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let oh = ((h - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| mismatch("conv_transpose2d: padding larger than output".into()))?;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        let g = Geometry {
            channels: co,
            img_h: oh,
            img_w: ow,
            k,
            stride,
            pad,
            grid_h: h,
            grid_w: wd,
        };
        let cells = h * wd;
        let mut cols = vec![F::zero(); g.rows() * cells];
        let mut out = Tensor::zeros(&[b, co, oh, ow]);
        let ocells = oh * ow;
        for item in 0..b {
            let src = x.value().item(item);
            // cols = W^T x, with W viewed as (C_in, C_out*k*k)
            F::gemm(g.rows(), ci, cells, F::one(), w.value().data(), 1, g.rows(), src, cells, 1, F::zero(), &mut cols, cells);
            let dst = &mut out.data_mut()[item * co * ocells..(item + 1) * co * ocells];
            col2im(&cols, &g, dst);
            if let Some(bias) = bias {
                for (c, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut dst[c * ocells..(c + 1) * ocells] {
                        *v += bv;
                    }
                }
            }
        }
        let inputs = [Some(x), Some(w), bias];
        Ok(if self.wants(&inputs) {
            let op = Op::ConvTranspose2d {
                x: x.rc(),
                w: w.rc(),
                stride,
                pad,
            };
            self.push(op, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// 2x2 max pooling with stride 2; spatial sides must be even.
    pub fn max_pool2(&mut self, x: &Var<F>) -> Result<Var<F>, NnError> {
        let (b, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(mismatch(format!("max_pool2: odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0u32; b * c * oh * ow];
        let src = x.value().data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = src[best];
                    argmax[o] = (best - base) as u32;
                }
            }
        }
        let inputs = [Some(x)];
        Ok(if self.wants(&inputs) {
            let op = Op::MaxPool2 {
                in_shape: x.shape().to_vec(),
                argmax,
            };
            self.push(op, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Per-channel normalization. With `running = None` the batch statistics
    /// are used (training); otherwise the given mean/variance are.
    pub fn batch_norm(
        &mut self,
        x: &Var<F>,
        gamma: &Var<F>,
        beta: &Var<F>,
        running: Option<(&[F], &[F])>,
        eps: f64,
    ) -> Result<BatchNormOutput<F>, NnError> {
        let (b, c, h, w) = x.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(mismatch(format!(
                "batch_norm: {c} channels, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let cells = h * w;
        let n = b * cells;
        let src = x.value().data();
        let (mean, var_biased): (Vec<F>, Vec<F>) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => (0..c)
                .map(|ch| {
                    let mut sum = F::zero();
                    for item in 0..b {
                        let off = (item * c + ch) * cells;
                        sum += src[off..off + cells].iter().copied().sum::<F>();
                    }
                    let mean = sum / F::of(n as f64);
                    let mut sq = F::zero();
                    for item in 0..b {
                        let off = (item * c + ch) * cells;
                        for &v in &src[off..off + cells] {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    (mean, sq / F::of(n as f64))
                })
                .unzip(),
        };
        let invstd: Vec<F> = var_biased.iter().map(|&v| F::one() / (v + F::of(eps)).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        for item in 0..b {
            for ch in 0..c {
                let off = (item * c + ch) * cells;
                let (m, s, g, bt) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                let xs = &mut xhat.data_mut()[off..off + cells];
                for (d, &v) in xs.iter_mut().zip(&src[off..off + cells]) {
                    *d = (v - m) * s;
                }
                for (o, &xh) in out.data_mut()[off..off + cells].iter_mut().zip(xhat.data()[off..off + cells].iter()) {
                    *o = g * xh + bt;
                }
            }
        }
        let var_unbiased = if n > 1 {
            var_biased.iter().map(|&v| v * F::of(n as f64 / (n - 1) as f64)).collect()
        } else {
            var_biased.clone()
        };
        let inputs = [Some(x), Some(gamma), Some(beta)];
        let y = if self.wants(&inputs) {
            let op = Op::BatchNorm {
                xhat,
                gamma: gamma.rc(),
                invstd,
                batch_stats: running.is_none(),
            };
            self.push(op, &inputs, out)
        } else {
            Self::untracked(out)
        };
        Ok(BatchNormOutput { y, mean, var_unbiased })
    }

    pub fn relu(&mut self, x: &Var<F>) -> Var<F> {
        let y = x.value().map(|v| if v > F::zero() { v } else { F::zero() });
        self.unary(x, y, |y| Op::Relu { y })
    }

    pub fn sigmoid(&mut self, x: &Var<F>) -> Var<F> {
        let y = x.value().map(sigmoid);
        self.unary(x, y, |y| Op::Sigmoid { y })
    }

    pub fn tanh(&mut self, x: &Var<F>) -> Var<F> {
        let y = x.value().map(|v| v.tanh());
        self.unary(x, y, |y| Op::Tanh { y })
    }

    fn unary(&mut self, x: &Var<F>, y: Tensor<F>, op: impl FnOnce(Arc<Tensor<F>>) -> Op<F>) -> Var<F> {
        let inputs = [Some(x)];
        if self.wants(&inputs) {
            let y = Arc::new(y);
            self.nodes.push(super::Node {
                op: op(Arc::clone(&y)),
                inputs: vec![x.node],
            });
            Var {
                node: Some(self.nodes.len() - 1),
                value: y,
            }
        } else {
            Self::untracked(y)
        }
    }

    pub fn add(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>, NnError> {
        if a.shape() != b.shape() {
            return Err(mismatch(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut out = a.value().clone();
        out.add_assign(b.value());
        let inputs = [Some(a), Some(b)];
        Ok(if self.wants(&inputs) {
            self.push(Op::Add, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[&Var<F>]) -> Result<Var<F>, NnError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_channels of zero tensors".into()))?;
        let (b, _, h, w) = first.dims4()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(mismatch(format!(
                    "concat_channels: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let cells = h * w;
        let mut data = Vec::with_capacity(b * total * cells);
        for item in 0..b {
            for p in parts {
                data.extend_from_slice(p.value().item(item));
            }
        }
        let out = Tensor::from_vec(&[b, total, h, w], data)?;
        let inputs: Vec<Option<&Var<F>>> = parts.iter().map(|p| Some(*p)).collect();
        Ok(if self.wants(&inputs) {
            self.push(Op::ConcatChannels { widths }, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    pub fn narrow_channels(&mut self, x: &Var<F>, start: usize, len: usize) -> Result<Var<F>, NnError> {
        let (b, c, h, w) = x.dims4()?;
        if start + len > c || len == 0 {
            return Err(mismatch(format!("narrow_channels: [{start}, {}) of {c}", start + len)));
        }
        let cells = h * w;
        let mut data = Vec::with_capacity(b * len * cells);
        for item in 0..b {
            let src = x.value().item(item);
            data.extend_from_slice(&src[start * cells..(start + len) * cells]);
        }
        let out = Tensor::from_vec(&[b, len, h, w], data)?;
        let inputs = [Some(x)];
        Ok(if self.wants(&inputs) {
            self.push(Op::NarrowChannels { start, total: c }, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Batch items `[start, start + len)`.
    pub fn narrow_batch(&mut self, x: &Var<F>, start: usize, len: usize) -> Result<Var<F>, NnError> {
        let (b, c, h, w) = x.dims4()?;
        if start + len > b || len == 0 {
            return Err(mismatch(format!("narrow_batch: [{start}, {}) of {b}", start + len)));
        }
        let stride = c * h * w;
        let data = x.value().data()[start * stride..(start + len) * stride].to_vec();
        let out = Tensor::from_vec(&[len, c, h, w], data)?;
        let inputs = [Some(x)];
        Ok(if self.wants(&inputs) {
            self.push(Op::NarrowBatch { start, total: b }, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Fused LSTM state update. `gates` holds pre-activations for the input,
    /// forget and output gates and the candidate, in that channel order
    /// (`4C` channels). Returns `[c, h]` stacked along channels (`2C`).
    pub fn lstm_pointwise(&mut self, gates: &Var<F>, c_prev: Option<&Var<F>>) -> Result<Var<F>, NnError> {
        let (b, c4, h, w) = gates.dims4()?;
        if c4 % 4 != 0 {
            return Err(mismatch(format!("lstm_pointwise: {c4} gate channels")));
        }
        let c = c4 / 4;
        if let Some(cp) = c_prev {
            if cp.shape() != [b, c, h, w] {
                return Err(mismatch(format!(
                    "lstm_pointwise: cell {:?} for gates {:?}",
                    cp.shape(),
                    gates.shape()
                )));
            }
        }
        let cells = h * w;
        let block = c * cells;
        let mut acts = Tensor::zeros(gates.shape());
        let mut tanh_c = Tensor::zeros(&[b, c, h, w]);
        let mut out = Tensor::zeros(&[b, 2 * c, h, w]);
        for item in 0..b {
            let gsrc = gates.value().item(item);
            let a = &mut acts.data_mut()[item * 4 * block..(item + 1) * 4 * block];
            for (j, (d, &v)) in a.iter_mut().zip(gsrc).enumerate() {
                *d = if j < 3 * block { sigmoid(v) } else { v.tanh() };
            }
            let (ig, rest) = a.split_at(block);
            let (fg, rest) = rest.split_at(block);
            let (og, cand) = rest.split_at(block);
            let cp = c_prev.map(|cp| cp.value().item(item));
            let tc = &mut tanh_c.data_mut()[item * block..(item + 1) * block];
            let o = &mut out.data_mut()[item * 2 * block..(item + 1) * 2 * block];
            let (cn, hn) = o.split_at_mut(block);
            for j in 0..block {
                let prev = cp.map_or(F::zero(), |cp| cp[j]);
                let cell = fg[j] * prev + ig[j] * cand[j];
                cn[j] = cell;
                tc[j] = cell.tanh();
                hn[j] = og[j] * tc[j];
            }
        }
        let inputs = [Some(gates), c_prev];
        Ok(if self.wants(&inputs) {
            let op = Op::LstmPointwise {
                acts,
                tanh_c,
                c_prev: c_prev.map(Var::rc),
            };
            self.push(op, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Shifts a time-major clip `(steps * B, C, H, W)` along time: output frame
    /// `t` is input frame `t + shift`, or zero when that frame does not exist.
    pub fn time_shift(&mut self, x: &Var<F>, steps: usize, shift: isize) -> Result<Var<F>, NnError> {
        let out = shift_frames(x.value(), steps, shift)?;
        let inputs = [Some(x)];
        Ok(if self.wants(&inputs) {
            self.push(Op::TimeShift { steps, shift }, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Element-wise product with a constant mask (dropout).
    pub fn mask(&mut self, x: &Var<F>, mask: Vec<F>) -> Result<Var<F>, NnError> {
        if mask.len() != x.value().len() {
            return Err(mismatch("mask: length differs from input".into()));
        }
        let mut out = x.value().clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let inputs = [Some(x)];
        Ok(if self.wants(&inputs) {
            self.push(Op::Mask { mask }, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// Mean per-pixel cross-entropy of softmax-normalized `scores` (B, K, H, W)
    /// against class ids `labels` (B * H * W, row-major).
    pub fn softmax_cross_entropy(&mut self, scores: &Var<F>, labels: &[u8]) -> Result<Var<F>, NnError> {
        let (b, k, h, w) = scores.dims4()?;
        let cells = h * w;
        if labels.len() != b * cells {
            return Err(mismatch(format!(
                "softmax_cross_entropy: {} labels for scores {:?}",
                labels.len(),
                scores.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(mismatch(format!("softmax_cross_entropy: label {bad} with {k} classes")));
        }
        let src = scores.value().data();
        let mut probs = Tensor::zeros(scores.shape());
        let mut total = 0.0f64;
        let mut column = vec![F::zero(); k];
        for item in 0..b {
            let base = item * k * cells;
            for p in 0..cells {
                let mut max = F::neg_infinity();
                for (cls, slot) in column.iter_mut().enumerate() {
                    *slot = src[base + cls * cells + p];
                    if *slot > max {
                        max = *slot;
                    }
                }
                let mut z = F::zero();
                for slot in column.iter_mut() {
                    *slot = (*slot - max).exp();
                    z += *slot;
                }
                let label = labels[item * cells + p] as usize;
                let pd = probs.data_mut();
                for (cls, &e) in column.iter().enumerate() {
                    pd[base + cls * cells + p] = e / z;
                }
                total += (z.ln() + max - src[base + label * cells + p]).as_f64();
            }
        }
        let out = Tensor::scalar(F::of(total / (b * cells) as f64));
        let inputs = [Some(scores)];
        Ok(if self.wants(&inputs) {
            let op = Op::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
            };
            self.push(op, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }

    /// `sum(x * weights)` as a scalar; a convenient probe loss.
    pub fn weighted_sum(&mut self, x: &Var<F>, weights: Tensor<F>) -> Result<Var<F>, NnError> {
        if weights.shape() != x.shape() {
            return Err(mismatch(format!("weighted_sum: {:?} vs {:?}", weights.shape(), x.shape())));
        }
        let total: F = x.value().data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let out = Tensor::scalar(total);
        let inputs = [Some(x)];
        Ok(if self.wants(&inputs) {
            self.push(Op::WeightedSum { weights: Arc::new(weights) }, &inputs, out)
        } else {
            Self::untracked(out)
        })
    }
}

fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

fn shift_frames<F: Float>(x: &Tensor<F>, steps: usize, shift: isize) -> Result<Tensor<F>, NnError> {
    let (tb, c, h, w) = x.dims4()?;
    if steps == 0 || tb % steps != 0 {
        return Err(mismatch(format!("time_shift: batch {tb} is not a multiple of {steps} steps")));
    }
    let frame = tb / steps * c * h * w;
    let mut out = Tensor::zeros(x.shape());
    for t in 0..steps {
        let src = t as isize + shift;
        if src < 0 || src >= steps as isize {
            continue;
        }
        let src = src as usize;
        out.data_mut()[t * frame..(t + 1) * frame].copy_from_slice(&x.data()[src * frame..(src + 1) * frame]);
    }
    Ok(out)
}

fn sum_channels<F: Float>(g: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let (b, c, h, w) = g.dims4()?;
    let cells = h * w;
    let mut db = Tensor::zeros(&[c]);
    for item in 0..b {
        for ch in 0..c {
            let off = (item * c + ch) * cells;
            db.data_mut()[ch] += g.data()[off..off + cells].iter().copied().sum::<F>();
        }
    }
    Ok(db)
}

/// Input gradients of one recorded op, aligned with its input slots.
pub(super) fn backward<F: Float>(op: &Op<F>, g: &Tensor<F>, needs: &[bool]) -> Result<Vec<Option<Tensor<F>>>, NnError> {
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d { x, w } => {
            let (b, ci, h, wd) = x.dims4()?;
            let (co, _, k, _) = w.dims4()?;
            let geo = same_geometry(ci, h, wd, k);
            let cells = h * wd;
            let rows = geo.rows();
            let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
            let mut cols = vec![F::zero(); if k == 1 || dw.is_none() { 0 } else { rows * cells }];
            let mut dcols = vec![F::zero(); if dx.is_some() && k != 1 { rows * cells } else { 0 }];
            for item in 0..b {
                let gout = g.item(item);
                if let Some(dw) = dw.as_mut() {
                    let src = x.item(item);
                    let rhs: &[F] = if k == 1 {
                        src
                    } else {
                        im2col(src, &geo, &mut cols);
                        &cols
                    };
                    // dW += dY * cols^T
                    F::gemm(co, cells, rows, F::one(), gout, cells, 1, rhs, 1, cells, F::one(), dw.data_mut(), rows);
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx.data_mut()[item * ci * cells..(item + 1) * ci * cells];
                    if k == 1 {
                        F::gemm(rows, co, cells, F::one(), w.data(), 1, rows, gout, cells, 1, F::zero(), dst, cells);
                    } else {
                        F::gemm(rows, co, cells, F::one(), w.data(), 1, rows, gout, cells, 1, F::zero(), &mut dcols, cells);
                        col2im(&dcols, &geo, dst);
                    }
                }
            }
            let db = if needs.get(2).copied().unwrap_or(false) { Some(sum_channels(g)?) } else { None };
            vec![dx, dw, db]
        }
        Op::ConvTranspose2d { x, w, stride, pad } => {
            let (b, ci, h, wd) = x.dims4()?;
            let (_, co, k, _) = w.dims4()?;
            let (_, _, oh, ow) = g.dims4()?;
            let geo = Geometry {
                channels: co,
                img_h: oh,
                img_w: ow,
                k,
                stride: *stride,
                pad: *pad,
                grid_h: h,
                grid_w: wd,
            };
            let cells = h * wd;
            let rows = geo.rows();
            let mut dcols = vec![F::zero(); rows * cells];
            let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
            for item in 0..b {
                im2col(g.item(item), &geo, &mut dcols);
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx.data_mut()[item * ci * cells..(item + 1) * ci * cells];
                    F::gemm(ci, rows, cells, F::one(), w.data(), rows, 1, &dcols, cells, 1, F::zero(), dst, cells);
                }
                if let Some(dw) = dw.as_mut() {
                    F::gemm(ci, cells, rows, F::one(), x.item(item), cells, 1, &dcols, 1, cells, F::one(), dw.data_mut(), rows);
                }
            }
            let db = if needs.get(2).copied().unwrap_or(false) { Some(sum_channels(g)?) } else { None };
            vec![dx, dw, db]
        }
        Op::MaxPool2 { in_shape, argmax } => {
            let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
            let ocells = (h / 2) * (w / 2);
            let mut dx = Tensor::zeros(in_shape);
            for plane in 0..b * c {
                for o in 0..ocells {
                    let idx = plane * ocells + o;
                    dx.data_mut()[plane * h * w + argmax[idx] as usize] += g.data()[idx];
                }
            }
            vec![Some(dx)]
        }
        Op::BatchNorm {
            xhat,
            gamma,
            invstd,
            batch_stats,
        } => {
            let (b, c, h, w) = xhat.dims4()?;
            let cells = h * w;
            let n = F::of((b * cells) as f64);
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            for item in 0..b {
                for ch in 0..c {
                    let off = (item * c + ch) * cells;
                    let gs = &g.data()[off..off + cells];
                    let xs = &xhat.data()[off..off + cells];
                    dbeta.data_mut()[ch] += gs.iter().copied().sum::<F>();
                    dgamma.data_mut()[ch] += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<F>();
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(xhat.shape());
                for item in 0..b {
                    for ch in 0..c {
                        let off = (item * c + ch) * cells;
                        let scale = gamma.data()[ch] * invstd[ch];
                        let (sdy, sdyx) = (dbeta.data()[ch], dgamma.data()[ch]);
                        let gs = &g.data()[off..off + cells];
                        let xs = &xhat.data()[off..off + cells];
                        for ((d, &gy), &xh) in dx.data_mut()[off..off + cells].iter_mut().zip(gs).zip(xs) {
                            *d = if *batch_stats {
                                scale * (gy - sdy / n - xh * sdyx / n)
                            } else {
                                scale * gy
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        }
        Op::Relu { y } => {
            let mut dx = g.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                if v <= F::zero() {
                    *d = F::zero();
                }
            }
            vec![Some(dx)]
        }
        Op::Sigmoid { y } => {
            let mut dx = g.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= v * (F::one() - v);
            }
            vec![Some(dx)]
        }
        Op::Tanh { y } => {
            let mut dx = g.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= F::one() - v * v;
            }
            vec![Some(dx)]
        }
        Op::Add => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
        Op::ConcatChannels { widths } => {
            let (b, total, h, w) = g.dims4()?;
            let cells = h * w;
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (&wc, &need) in widths.iter().zip(needs) {
                if need {
                    let mut data = Vec::with_capacity(b * wc * cells);
                    for item in 0..b {
                        let off = (item * total + start) * cells;
                        data.extend_from_slice(&g.data()[off..off + wc * cells]);
                    }
                    out.push(Some(Tensor::from_vec(&[b, wc, h, w], data)?));
                } else {
                    out.push(None);
                }
                start += wc;
            }
            out
        }
        Op::NarrowChannels { start, total } => {
            let (b, len, h, w) = g.dims4()?;
            let cells = h * w;
            let mut dx = Tensor::zeros(&[b, *total, h, w]);
            for item in 0..b {
                let off = (item * total + start) * cells;
                dx.data_mut()[off..off + len * cells].copy_from_slice(g.item(item));
            }
            vec![Some(dx)]
        }
        Op::NarrowBatch { start, total } => {
            let (len, c, h, w) = g.dims4()?;
            let stride = c * h * w;
            let mut dx = Tensor::zeros(&[*total, c, h, w]);
            dx.data_mut()[start * stride..(start + len) * stride].copy_from_slice(g.data());
            vec![Some(dx)]
        }
        Op::LstmPointwise { acts, tanh_c, c_prev } => {
            let (b, c, h, w) = tanh_c.dims4()?;
            let block = c * h * w;
            let mut dgates = Tensor::zeros(acts.shape());
            let mut dprev = c_prev.as_ref().map(|cp| Tensor::zeros(cp.shape()));
            for item in 0..b {
                let a = &acts.data()[item * 4 * block..(item + 1) * 4 * block];
                let gi = &g.data()[item * 2 * block..(item + 1) * 2 * block];
                let (dc_out, dh) = gi.split_at(block);
                let tc = &tanh_c.data()[item * block..(item + 1) * block];
                let cp = c_prev.as_ref().map(|cp| cp.item(item));
                let dg = &mut dgates.data_mut()[item * 4 * block..(item + 1) * 4 * block];
                for j in 0..block {
                    let (i, f, o, cand) = (a[j], a[block + j], a[2 * block + j], a[3 * block + j]);
                    let dc = dc_out[j] + dh[j] * o * (F::one() - tc[j] * tc[j]);
                    let prev = cp.map_or(F::zero(), |cp| cp[j]);
                    dg[j] = dc * cand * i * (F::one() - i);
                    dg[block + j] = dc * prev * f * (F::one() - f);
                    dg[2 * block + j] = dh[j] * tc[j] * o * (F::one() - o);
                    dg[3 * block + j] = dc * i * (F::one() - cand * cand);
                    if let Some(dp) = dprev.as_mut() {
                        dp.data_mut()[item * block + j] = dc * f;
                    }
                }
            }
            vec![Some(dgates), dprev]
        }
        Op::TimeShift { steps, shift } => vec![Some(shift_frames(g, *steps, -shift)?)],
        Op::Mask { mask } => {
            let mut dx = g.clone();
            for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                *d *= m;
            }
            vec![Some(dx)]
        }
        Op::SoftmaxCrossEntropy { probs, labels } => {
            let (b, _, h, w) = probs.dims4()?;
            let cells = h * w;
            let k = probs.shape()[1];
            let scale = g.data()[0] / F::of((b * cells) as f64);
            let mut dx = probs.map(|p| p * scale);
            for item in 0..b {
                for p in 0..cells {
                    let label = labels[item * cells + p] as usize;
                    dx.data_mut()[item * k * cells + label * cells + p] -= scale;
                }
            }
            vec![Some(dx)]
        }
        Op::WeightedSum { weights } => {
            let s = g.data()[0];
            vec![Some(weights.map(|v| v * s))]
        }
    })
}
