//! Reverse-mode differentiation on a linear tape.
//!
//! Every forward operation appends a node holding its output value and
//! enough cached context (batch statistics, dropout masks, argmax indices)
//! to replay the backward pass. Node ids are indices into the tape, so the
//! recording order is already topological and the backward sweep is a
//! single reverse iteration. There is no graph optimization; correctness
//! and reproducibility take priority at this scale.
//!
//! Activation layouts:
//! - feature maps are `[batch, channels, length]`;
//! - dense activations are `[batch, features]`;
//! - per-example vectors (head outputs, losses) are `[batch]` or `[1]`.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub type NodeId = usize;

/// Forward-pass behaviour toggles.
///
/// `Train` uses batch statistics in batch norm and samples dropout masks.
/// `Eval` uses running statistics and disables dropout entirely.
/// `McDropout` keeps dropout stochastic while batch norm stays on running
/// statistics, so repeated passes differ only through the dropout masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    McDropout,
}

impl Mode {
    pub fn batch_stats(self) -> bool {
        self == Mode::Train
    }

    pub fn dropout_active(self) -> bool {
        self != Mode::Eval
    }
}

enum Op {
    Leaf {
        requires_grad: bool,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch_stats: bool,
    },
    Dropout {
        x: NodeId,
        mask: Vec<u8>,
        keep_scale: f64,
    },
    MaxPool1d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    SelectCol {
        x: NodeId,
        col: usize,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Sum {
        x: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    GnllLoss {
        mu: NodeId,
        log_var: NodeId,
        targets: Vec<f64>,
    },
    MseLoss {
        mu: NodeId,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    label: Option<String>,
}

/// Recording tape. Single-owner while recording; replayable backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Batch statistics captured by a train-mode batch norm, for the caller to
/// fold into its running averages.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, label: Option<String>) -> Result<NodeId> {
        if let Some(idx) = value.first_non_finite() {
            let path = label.unwrap_or_else(|| "unlabeled op".to_string());
            return Err(Error::NonFinite {
                path: format!("{path} (element {idx})"),
            });
        }
        self.nodes.push(Node { value, op, label });
        Ok(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { requires_grad },
            label: None,
        });
        self.nodes.len() - 1
    }

    pub fn relu(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.push(value, Op::Relu { x }, Some(label.to_string()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                label,
                format!(
                    "add operands {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b }, Some(label.to_string()))
    }

    /// 1-D cross-correlation over `[batch, in_channels, length]` input with
    /// `[out_channels, in_channels, kernel]` weights and zero padding.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        label: &str,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::shape(label, "stride must be >= 1".to_string()));
        }
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape(
                label,
                format!("conv1d expects 3-d input/weight, got {:?} and {:?}", xs, ws),
            ));
        }
        let (n, c_in, l) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(Error::shape(
                label,
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if l + 2 * padding < k {
            return Err(Error::shape(
                label,
                format!("kernel {k} does not fit padded length {}", l + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [c_out] {
                return Err(Error::shape(
                    label,
                    format!("bias shape {:?}, expected [{c_out}]", bs),
                ));
            }
        }
        let l_out = (l + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; n * c_out * l_out];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        if l == 1 && l_out == 1 && padding < k {
            // length-1 maps collapse to a matrix-vector product over
            // channels with the single in-range kernel tap
            let kk = padding; // only j = 0 is in range
            for bi in 0..n {
                let xrow = &xd[bi * c_in..][..c_in];
                for co in 0..c_out {
                    let mut acc = bd.as_ref().map_or(0.0, |b| b[co]);
                    let wrow = &wd[co * c_in * k..][..c_in * k];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        acc += wrow[ci * k + kk] * xv;
                    }
                    out[bi * c_out + co] = acc;
                }
            }
        } else {
            // kernel-major accumulation: for each weight tap, the (possibly
            // empty) range of output positions where it lands in the signal
            let tap_range = |kk: usize| -> Option<(usize, usize)> {
                let lo_min = padding.saturating_sub(kk).div_ceil(stride);
                let lo_max = ((l - 1 + padding).checked_sub(kk)? / stride).min(l_out - 1);
                (lo_min <= lo_max).then_some((lo_min, lo_max))
            };
            let ranges: Vec<Option<(usize, usize)>> = (0..k).map(tap_range).collect();
            for bi in 0..n {
                let x_base = bi * c_in * l;
                for co in 0..c_out {
                    let row = &mut out[(bi * c_out + co) * l_out..][..l_out];
                    if let Some(b) = &bd {
                        row.fill(b[co]);
                    }
                    for ci in 0..c_in {
                        let xrow = &xd[x_base + ci * l..][..l];
                        let wrow = &wd[(co * c_in + ci) * k..][..k];
                        for (kk, &wv) in wrow.iter().enumerate() {
                            let Some((lo_min, lo_max)) = ranges[kk] else {
                                continue;
                            };
                            let x_off = lo_min * stride + kk - padding;
                            if stride == 1 {
                                let span = lo_max - lo_min + 1;
                                let xs = &xrow[x_off..][..span];
                                let rs = &mut row[lo_min..][..span];
                                for (r, &xv) in rs.iter_mut().zip(xs) {
                                    *r += wv * xv;
                                }
                            } else {
                                for lo in lo_min..=lo_max {
                                    row[lo] += wv * xrow[x_off + (lo - lo_min) * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c_out, l_out], out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            Some(label.to_string()),
        )
    }

    /// Channel-wise batch normalization over `[batch, channels, length]`.
    ///
    /// In train mode the batch statistics (population variance over
    /// batch x length) are used and returned so the caller can update its
    /// running averages; in eval mode the provided running statistics are
    /// used directly.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        train: bool,
        label: &str,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(
                label,
                format!("batchnorm1d expects [batch, channels, length], got {:?}", xs),
            ));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        if train && n < 2 {
            return Err(Error::validation(format!(
                "{label}: batch norm in train mode needs a batch of at least 2, got {n}"
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(label, format!("gamma/beta must be [{c}]")));
        }
        let (mean, var) = if train {
            let m = (n * l) as f64;
            let xd = self.value(x).data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut sum = 0.0;
                for bi in 0..n {
                    let base = (bi * c + ci) * l;
                    for li in 0..l {
                        sum += xd[base + li];
                    }
                }
                mean[ci] = sum / m;
                let mut sq = 0.0;
                for bi in 0..n {
                    let base = (bi * c + ci) * l;
                    for li in 0..l {
                        let d = xd[base + li] - mean[ci];
                        sq += d * d;
                    }
                }
                var[ci] = sq / m;
            }
            (mean, var)
        } else {
            if running_mean.len() != c || running_var.len() != c {
                return Err(Error::shape(label, format!("running stats must be [{c}]")));
            }
            (running_mean.to_vec(), running_var.to_vec())
        };
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; n * c * l];
        for bi in 0..n {
            for ci in 0..c {
                // evaluated exactly as documented: (x - m) / sqrt(v + eps) * gamma + beta
                let denom = (var[ci] + eps).sqrt();
                let base = (bi * c + ci) * l;
                for li in 0..l {
                    out[base + li] = (xd[base + li] - mean[ci]) / denom * gd[ci] + bd[ci];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let value = Tensor::new(xs, out)?;
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats: train,
            },
            Some(label.to_string()),
        )?;
        Ok((id, stats))
    }

    /// Inverted dropout: zero each element with probability `p` and scale
    /// survivors by `1/(1-p)`, so eval mode is a pure identity.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut SplitMix64,
        label: &str,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::validation(format!(
                "{label}: dropout rate must satisfy 0 <= p < 1, got {p}"
            )));
        }
        if p == 0.0 || !mode.dropout_active() {
            // identity; no rng consumed
            let value = self.value(x).clone();
            return self.push(
                value,
                Op::Dropout {
                    x,
                    mask: vec![1; self.nodes[x].value.numel()],
                    keep_scale: 1.0,
                },
                Some(label.to_string()),
            );
        }
        let keep_scale = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mut mask = vec![0u8; n];
        for m in mask.iter_mut() {
            *m = (rng.next_f64() >= p) as u8;
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m == 1 { v * keep_scale } else { 0.0 })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(
            value,
            Op::Dropout {
                x,
                mask,
                keep_scale,
            },
            Some(label.to_string()),
        )
    }

    /// Max pooling over the length axis with negative-infinity padding.
    pub fn maxpool1d(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        padding: usize,
        label: &str,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(label, format!("maxpool1d expects 3-d, got {:?}", xs)));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        if l + 2 * padding < kernel {
            return Err(Error::shape(
                label,
                format!("kernel {kernel} does not fit padded length {}", l + 2 * padding),
            ));
        }
        let l_out = (l + 2 * padding - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * l_out];
        let mut argmax = vec![0usize; n * c * l_out];
        for bi in 0..n {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                for lo in 0..l_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for kk in 0..kernel {
                        let j = lo * stride + kk;
                        if j >= padding && j - padding < l {
                            let v = xd[base + j - padding];
                            if v > best {
                                best = v;
                                best_idx = base + j - padding;
                            }
                        }
                    }
                    out[(bi * c + ci) * l_out + lo] = best;
                    argmax[(bi * c + ci) * l_out + lo] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![n, c, l_out], out)?;
        self.push(value, Op::MaxPool1d { x, argmax }, Some(label.to_string()))
    }

    /// Mean over the length axis: `[batch, channels, length]` -> `[batch, channels]`.
    ///
    /// Works for any length, which is what lets one trained model score
    /// inputs of different durations.
    pub fn global_avg_pool(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(label, format!("pool expects 3-d, got {:?}", xs)));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for bi in 0..n {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                let mut sum = 0.0;
                for li in 0..l {
                    sum += xd[base + li];
                }
                out[bi * c + ci] = sum / l as f64;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::GlobalAvgPool { x }, Some(label.to_string()))
    }

    /// Fully connected layer: `[batch, f_in] x [f_out, f_in]^T + [f_out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: NodeId, label: &str) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                label,
                format!("dense got input {:?}, weight {:?}", xs, ws),
            ));
        }
        let (n, f_in) = (xs[0], xs[1]);
        let f_out = ws[0];
        if self.value(bias).shape() != [f_out] {
            return Err(Error::shape(label, format!("bias must be [{f_out}]")));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * f_out];
        for bi in 0..n {
            for fo in 0..f_out {
                let mut acc = bd[fo];
                for fi in 0..f_in {
                    acc += xd[bi * f_in + fi] * wd[fo * f_in + fi];
                }
                out[bi * f_out + fo] = acc;
            }
        }
        let value = Tensor::new(vec![n, f_out], out)?;
        self.push(value, Op::Dense { x, w, bias }, Some(label.to_string()))
    }

    /// Extract one column of a `[batch, features]` activation as `[batch]`.
    pub fn select_col(&mut self, x: NodeId, col: usize, label: &str) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || col >= xs[1] {
            return Err(Error::shape(
                label,
                format!("select_col {col} out of shape {:?}", xs),
            ));
        }
        let (n, f) = (xs[0], xs[1]);
        let data = (0..n).map(|bi| self.value(x).data()[bi * f + col]).collect();
        let value = Tensor::new(vec![n], data)?;
        self.push(value, Op::SelectCol { x, col }, Some(label.to_string()))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64, label: &str) -> Result<NodeId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.clamp(lo, hi))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(value, Op::Clamp { x, lo, hi }, Some(label.to_string()))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, Some(label.to_string()))
    }

    /// Inner product of two same-shape tensors, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(label, "dot operands differ in shape".to_string()));
        }
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        self.push(Tensor::scalar(total), Op::Dot { a, b }, Some(label.to_string()))
    }

    /// Batch-mean Gaussian negative log-likelihood
    /// `mean(0.5*log_var + (y - mu)^2 / (2*exp(log_var)))`.
    pub fn gnll_loss(&mut self, mu: NodeId, log_var: NodeId, targets: &[f64]) -> Result<NodeId> {
        let n = targets.len();
        if self.value(mu).shape() != [n] || self.value(log_var).shape() != [n] {
            return Err(Error::shape(
                "gnll_loss",
                format!("expected mu/log_var of shape [{n}]"),
            ));
        }
        let mud = self.value(mu).data();
        let lvd = self.value(log_var).data();
        let mut total = 0.0;
        for i in 0..n {
            let r = targets[i] - mud[i];
            let var = lvd[i].exp();
            total += 0.5 * lvd[i] + r * r / (2.0 * var);
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::GnllLoss {
                mu,
                log_var,
                targets: targets.to_vec(),
            },
            Some("gnll_loss".to_string()),
        )
    }

    /// Batch-mean squared error `mean((y - mu)^2)`.
    pub fn mse_loss(&mut self, mu: NodeId, targets: &[f64]) -> Result<NodeId> {
        let n = targets.len();
        if self.value(mu).shape() != [n] {
            return Err(Error::shape("mse_loss", format!("expected mu of shape [{n}]")));
        }
        let mud = self.value(mu).data();
        let mut total = 0.0;
        for i in 0..n {
            let r = targets[i] - mud[i];
            total += r * r;
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::MseLoss {
                mu,
                targets: targets.to_vec(),
            },
            Some("mse_loss".to_string()),
        )
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient slot per
    /// tape node; leaves that never influence the loss get `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // leaves that do not require gradients never receive accumulation
        let wants: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| !matches!(n.op, Op::Leaf { requires_grad: false }))
            .collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Relu { x } => {
                    let xd = self.value(*x).data();
                    let gx: Vec<f64> = gy
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&wants, &mut grads, *x, self.value(*x).shape(), gx);
                }
                Op::Add { a, b } => {
                    accumulate(&wants, &mut grads, *a, self.value(*a).shape(), gy.data().to_vec());
                    accumulate(&wants, &mut grads, *b, self.value(*b).shape(), gy.data().to_vec());
                }
                Op::Conv1d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    let xs = self.value(*x).shape();
                    let ws = self.value(*w).shape();
                    let (n, c_in, l) = (xs[0], xs[1], xs[2]);
                    let (c_out, _, k) = (ws[0], ws[1], ws[2]);
                    let l_out = (l + 2 * padding - k) / stride + 1;
                    let xd = self.value(*x).data();
                    let wd = self.value(*w).data();
                    let gyd = gy.data();
                    let mut gx = vec![0.0; n * c_in * l];
                    let mut gw = vec![0.0; c_out * c_in * k];
                    if l == 1 && l_out == 1 && *padding < k {
                        let kk = *padding;
                        for bi in 0..n {
                            let xrow = &xd[bi * c_in..][..c_in];
                            let gxrow = &mut gx[bi * c_in..][..c_in];
                            for co in 0..c_out {
                                let g = gyd[bi * c_out + co];
                                if g == 0.0 {
                                    continue;
                                }
                                let wbase = co * c_in * k;
                                for ci in 0..c_in {
                                    gxrow[ci] += g * wd[wbase + ci * k + kk];
                                    gw[wbase + ci * k + kk] += g * xrow[ci];
                                }
                            }
                        }
                    } else {
                        let taps: Vec<(usize, usize, usize)> = (0..l_out)
                            .map(|lo| {
                                let k_lo = padding.saturating_sub(lo * stride);
                                let k_hi = (l + padding - lo * stride).min(k);
                                (k_lo, k_hi, lo * stride + k_lo - padding)
                            })
                            .collect();
                        for bi in 0..n {
                            for co in 0..c_out {
                                for (lo, &(k_lo, k_hi, x_start)) in taps.iter().enumerate() {
                                    let g = gyd[(bi * c_out + co) * l_out + lo];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        let base_x = (bi * c_in + ci) * l + x_start;
                                        let base_w = (co * c_in + ci) * k + k_lo;
                                        let span = k_hi - k_lo;
                                        for t in 0..span {
                                            gx[base_x + t] += g * wd[base_w + t];
                                            gw[base_w + t] += g * xd[base_x + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let mut gb = vec![0.0; c_out];
                        for bi in 0..n {
                            for co in 0..c_out {
                                for lo in 0..l_out {
                                    gb[co] += gyd[(bi * c_out + co) * l_out + lo];
                                }
                            }
                        }
                        accumulate(&wants, &mut grads, *b, &[c_out], gb);
                    }
                    accumulate(&wants, &mut grads, *x, xs, gx);
                    accumulate(&wants, &mut grads, *w, ws, gw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    batch_stats,
                } => {
                    let xs = self.value(*x).shape();
                    let (n, c, l) = (xs[0], xs[1], xs[2]);
                    let m = (n * l) as f64;
                    let xd = self.value(*x).data();
                    let gd = self.value(*gamma).data();
                    let gyd = gy.data();
                    let mut gx = vec![0.0; n * c * l];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for ci in 0..c {
                        let inv = 1.0 / (var[ci] + eps).sqrt();
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for bi in 0..n {
                            let base = (bi * c + ci) * l;
                            for li in 0..l {
                                let xhat = (xd[base + li] - mean[ci]) * inv;
                                let g = gyd[base + li];
                                sum_gy += g;
                                sum_gy_xhat += g * xhat;
                            }
                        }
                        ggamma[ci] = sum_gy_xhat;
                        gbeta[ci] = sum_gy;
                        if *batch_stats {
                            let mean_gy = sum_gy / m;
                            let mean_gy_xhat = sum_gy_xhat / m;
                            for bi in 0..n {
                                let base = (bi * c + ci) * l;
                                for li in 0..l {
                                    let xhat = (xd[base + li] - mean[ci]) * inv;
                                    gx[base + li] = gd[ci]
                                        * inv
                                        * (gyd[base + li] - mean_gy - xhat * mean_gy_xhat);
                                }
                            }
                        } else {
                            for bi in 0..n {
                                let base = (bi * c + ci) * l;
                                for li in 0..l {
                                    gx[base + li] = gyd[base + li] * gd[ci] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&wants, &mut grads, *x, xs, gx);
                    accumulate(&wants, &mut grads, *gamma, &[c], ggamma);
                    accumulate(&wants, &mut grads, *beta, &[c], gbeta);
                }
                Op::Dropout {
                    x,
                    mask,
                    keep_scale,
                } => {
                    let gx: Vec<f64> = gy
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m == 1 { g * keep_scale } else { 0.0 })
                        .collect();
                    accumulate(&wants, &mut grads, *x, self.value(*x).shape(), gx);
                }
                Op::MaxPool1d { x, argmax } => {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (g, &src) in gy.data().iter().zip(argmax) {
                        gx[src] += g;
                    }
                    accumulate(&wants, &mut grads, *x, self.value(*x).shape(), gx);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.value(*x).shape();
                    let (n, c, l) = (xs[0], xs[1], xs[2]);
                    let gyd = gy.data();
                    let mut gx = vec![0.0; n * c * l];
                    for bi in 0..n {
                        for ci in 0..c {
                            let g = gyd[bi * c + ci] / l as f64;
                            let base = (bi * c + ci) * l;
                            for li in 0..l {
                                gx[base + li] = g;
                            }
                        }
                    }
                    accumulate(&wants, &mut grads, *x, xs, gx);
                }
                Op::Dense { x, w, bias } => {
                    let xs = self.value(*x).shape();
                    let ws = self.value(*w).shape();
                    let (n, f_in) = (xs[0], xs[1]);
                    let f_out = ws[0];
                    let xd = self.value(*x).data();
                    let wd = self.value(*w).data();
                    let gyd = gy.data();
                    let mut gx = vec![0.0; n * f_in];
                    let mut gw = vec![0.0; f_out * f_in];
                    let mut gb = vec![0.0; f_out];
                    for bi in 0..n {
                        for fo in 0..f_out {
                            let g = gyd[bi * f_out + fo];
                            gb[fo] += g;
                            for fi in 0..f_in {
                                gx[bi * f_in + fi] += g * wd[fo * f_in + fi];
                                gw[fo * f_in + fi] += g * xd[bi * f_in + fi];
                            }
                        }
                    }
                    accumulate(&wants, &mut grads, *x, xs, gx);
                    accumulate(&wants, &mut grads, *w, ws, gw);
                    accumulate(&wants, &mut grads, *bias, &[f_out], gb);
                }
                Op::SelectCol { x, col } => {
                    let xs = self.value(*x).shape();
                    let (n, f) = (xs[0], xs[1]);
                    let mut gx = vec![0.0; n * f];
                    for bi in 0..n {
                        gx[bi * f + col] = gy.data()[bi];
                    }
                    accumulate(&wants, &mut grads, *x, xs, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xd = self.value(*x).data();
                    let gx: Vec<f64> = gy
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { 0.0 })
                        .collect();
                    accumulate(&wants, &mut grads, *x, self.value(*x).shape(), gx);
                }
                Op::Sum { x } => {
                    let g = gy.data()[0];
                    let gx = vec![g; self.value(*x).numel()];
                    accumulate(&wants, &mut grads, *x, self.value(*x).shape(), gx);
                }
                Op::Dot { a, b } => {
                    let g = gy.data()[0];
                    let ga: Vec<f64> = self.value(*b).data().iter().map(|&v| g * v).collect();
                    let gb: Vec<f64> = self.value(*a).data().iter().map(|&v| g * v).collect();
                    accumulate(&wants, &mut grads, *a, self.value(*a).shape(), ga);
                    accumulate(&wants, &mut grads, *b, self.value(*b).shape(), gb);
                }
                Op::GnllLoss {
                    mu,
                    log_var,
                    targets,
                } => {
                    let g = gy.data()[0];
                    let n = targets.len() as f64;
                    let mud = self.value(*mu).data();
                    let lvd = self.value(*log_var).data();
                    let mut gmu = vec![0.0; targets.len()];
                    let mut glv = vec![0.0; targets.len()];
                    for i in 0..targets.len() {
                        let r = targets[i] - mud[i];
                        let var = lvd[i].exp();
                        gmu[i] = g * (mud[i] - targets[i]) / var / n;
                        glv[i] = g * 0.5 * (1.0 - r * r / var) / n;
                    }
                    accumulate(&wants, &mut grads, *mu, &[targets.len()], gmu);
                    accumulate(&wants, &mut grads, *log_var, &[targets.len()], glv);
                }
                Op::MseLoss { mu, targets } => {
                    let g = gy.data()[0];
                    let n = targets.len() as f64;
                    let mud = self.value(*mu).data();
                    let gmu: Vec<f64> = (0..targets.len())
                        .map(|i| g * 2.0 * (mud[i] - targets[i]) / n)
                        .collect();
                    accumulate(&wants, &mut grads, *mu, &[targets.len()], gmu);
                }
            }
        }
        Ok(grads)
    }

    /// Gradient for a single leaf after [`Tape::backward`]; zeros if the
    /// leaf never reached the loss.
    pub fn leaf_grad(&self, grads: &[Option<Tensor>], leaf: NodeId) -> Tensor {
        match &grads[leaf] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(leaf).shape().to_vec()),
        }
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.nodes[id].label.as_deref()
    }
}

fn accumulate(
    wants: &[bool],
    grads: &mut [Option<Tensor>],
    id: NodeId,
    shape: &[usize],
    delta: Vec<f64>,
) {
    if !wants[id] {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape"));
        }
    }
}
