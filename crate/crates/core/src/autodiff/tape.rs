//! The tape: forward op execution with recorded backward steps.
//!
//! Ops append nodes in execution order; `backward` walks the record in
//! reverse, accumulating exact reverse-mode gradients. Values are f64
//! throughout. Broadcasting is restricted to leading-axis expansion: the
//! smaller operand's shape must be a suffix of the larger's. Anything
//! else is a `ShapeMismatch`, on purpose.

use super::params::ParamSet;
use super::tensor::{gemm_rm, Tensor};
use super::AdError;
use rand::Rng;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Input,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Transpose {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout {
        a: Var,
        mask: Tensor,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatLast {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor,
        pos_weight: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Per-variable gradients produced by one backward pass.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        value.assert_finite("op");
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Untracked input (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, false)
    }

    /// Tracked input; gradients are available from [`Grads`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true)
    }

    /// Tracked input bound to a parameter slot; `backward_into`
    /// accumulates its gradient into the set.
    pub fn param(&mut self, set: &ParamSet, idx: usize) -> Var {
        let v = self.leaf(set.params[idx].value.clone());
        self.bindings.push((v, idx));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (batch_a, m, ka) = self.value(a).matrix_split()?;
        let (batch_b, kb, p) = self.value(b).matrix_split()?;
        if ka != kb {
            return Err(AdError::ShapeMismatch(format!(
                "matmul inner dims {ka} vs {kb} (shapes {:?} x {:?})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (batch, case) = if batch_a == batch_b {
            (batch_a.to_vec(), MatmulBatch::Pairwise)
        } else if batch_a.is_empty() {
            (batch_b.to_vec(), MatmulBatch::SharedA)
        } else if batch_b.is_empty() {
            (batch_a.to_vec(), MatmulBatch::SharedB)
        } else {
            return Err(AdError::ShapeMismatch(format!(
                "matmul batch dims {batch_a:?} vs {batch_b:?}"
            )));
        };
        let nb: usize = batch.iter().product();
        let mut shape = batch;
        shape.extend_from_slice(&[m, p]);
        let mut out = Tensor::zeros(&shape);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let ov = out.data_mut();
            for i in 0..nb {
                let as_ = match case {
                    MatmulBatch::SharedA => av,
                    _ => &av[i * m * ka..(i + 1) * m * ka],
                };
                let bs = match case {
                    MatmulBatch::SharedB => bv,
                    _ => &bv[i * ka * p..(i + 1) * ka * p],
                };
                gemm_rm(
                    m,
                    ka,
                    p,
                    1.0,
                    as_,
                    false,
                    bs,
                    false,
                    0.0,
                    &mut ov[i * m * p..(i + 1) * m * p],
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.elementwise(a, b, |x, y| x + y, "add")
            .map(|(out, needs)| self.push(Op::Add { a, b }, out, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.elementwise(a, b, |x, y| x - y, "sub")
            .map(|(out, needs)| self.push(Op::Sub { a, b }, out, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.elementwise(a, b, |x, y| x * y, "mul")
            .map(|(out, needs)| self.push(Op::Mul { a, b }, out, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let needs = self.needs(a);
        self.push(Op::Scale { a, c }, out, needs)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        let out = transpose_last(self.value(a))?;
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose { a }, out, needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(Op::Relu { a }, out, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(stable_sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid { a }, out, needs)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let t = self.value(a);
        if t.rank() < 1 {
            return Err(AdError::ShapeMismatch("softmax needs rank >= 1".into()));
        }
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a }, out, needs))
    }

    /// Per-last-axis normalization with learnable gain and bias
    /// (both shaped like the last axis).
    pub fn layer_norm(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, AdError> {
        let t = self.value(a);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| AdError::ShapeMismatch("layer_norm needs rank >= 1".into()))?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(AdError::ShapeMismatch(format!(
                "layer_norm gain/bias must have shape [{d}]"
            )));
        }
        let rows = t.numel() / d;
        let mut xhat = Tensor::zeros(t.shape());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(t.shape());
        {
            let x = t.data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            let xh = xhat.data_mut();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std.push(istd);
                for j in 0..d {
                    xh[r * d + j] = (row[j] - mean) * istd;
                }
            }
            let ov = out.data_mut();
            for r in 0..rows {
                for j in 0..d {
                    ov[r * d + j] = xh[r * d + j] * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            needs,
        ))
    }

    /// Inverted dropout: in training, zero with probability `rate` and
    /// scale survivors by 1/(1-rate); in eval, the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var, AdError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AdError::ShapeMismatch(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            let out = self.value(a).clone();
            let mask = Tensor::filled(out.shape(), 1.0);
            let needs = self.needs(a);
            return Ok(self.push(Op::Dropout { a, mask }, out, needs));
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(a).shape().to_vec();
        let mask_data: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(&shape, mask_data)?;
        let out_data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .collect();
        let out = Tensor::from_vec(&shape, out_data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Dropout { a, mask }, out, needs))
    }

    /// Row gather from a [N x d] table; backward scatter-adds.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, AdError> {
        let t = self.value(table);
        let (batch, n, d) = t.matrix_split()?;
        if !batch.is_empty() {
            return Err(AdError::ShapeMismatch(
                "embedding table must be 2-D".into(),
            ));
        }
        for &id in ids {
            if id >= n {
                return Err(AdError::IndexOutOfRange { index: id, len: n });
            }
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
            needs,
        ))
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.is_empty() {
            return Err(AdError::ShapeMismatch("concat of nothing".into()));
        }
        let lead = self.value(parts[0]).shape()
            [..self.value(parts[0]).rank().saturating_sub(1)]
            .to_vec();
        let mut d_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(AdError::ShapeMismatch(format!(
                    "concat leading dims differ: {:?} vs {:?}",
                    &s[..s.len() - 1],
                    lead
                )));
            }
            d_total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut shape = lead;
        shape.push(d_total);
        let mut out = Tensor::zeros(&shape);
        {
            let ov = out.data_mut();
            let mut col = 0;
            for &p in parts {
                let t = self.value(p);
                let d = *t.shape().last().unwrap();
                for r in 0..rows {
                    ov[r * d_total + col..r * d_total + col + d]
                        .copy_from_slice(&t.data()[r * d..(r + 1) * d]);
                }
                col += d;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            out,
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let out = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape { a }, out, needs))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        let needs = self.needs(a);
        self.push(Op::MeanAll { a }, out, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let needs = self.needs(a);
        self.push(Op::SumAll { a }, out, needs)
    }

    /// Mean over elements of
    /// `pos_weight * y * softplus(-x) + (1 - y) * softplus(x)`,
    /// evaluated in the log-sum-exp stable form.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &Tensor,
        pos_weight: f64,
    ) -> Result<Var, AdError> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(AdError::ShapeMismatch(format!(
                "bce shapes {:?} vs {:?}",
                x.shape(),
                targets.shape()
            )));
        }
        let n = x.numel() as f64;
        let mut acc = 0.0;
        for (&xi, &yi) in x.data().iter().zip(targets.data()) {
            debug_assert!(yi == 0.0 || yi == 1.0, "targets must be binary");
            acc += pos_weight * yi * softplus(-xi) + (1.0 - yi) * softplus(xi);
        }
        let out = Tensor::scalar(acc / n);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
                pos_weight,
            },
            out,
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar loss; returns per-variable grads.
    pub fn backward(&mut self, loss: Var) -> Result<Grads, AdError> {
        if !self.value(loss).is_scalar() {
            return Err(AdError::NotScalarLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dout) = grads[id].take() else {
                continue;
            };
            self.backstep(id, &dout, &mut grads);
            grads[id] = Some(dout);
        }
        Ok(Grads(grads))
    }

    /// Backward pass that accumulates bound parameter gradients into the
    /// set (+=, so two passes without zeroing double the grads).
    pub fn backward_into(&mut self, loss: Var, set: &mut ParamSet) -> Result<(), AdError> {
        let grads = self.backward(loss)?;
        for &(var, idx) in &self.bindings {
            if let Some(g) = grads.get(var) {
                accumulate(&mut set.params[idx].grad, g, 1.0);
            }
        }
        Ok(())
    }

    fn backstep(&self, id: usize, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_grad = |slot: &mut Option<Tensor>, shape: &[usize], f: &mut dyn FnMut(&mut Tensor)| {
            let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
            f(g);
        };
        match &self.nodes[id].op {
            Op::Input => {}
            Op::Matmul { a, b } => {
                let (batch_a, m, k) = self.value(*a).matrix_split().unwrap();
                let (batch_b, _, p) = self.value(*b).matrix_split().unwrap();
                let nb: usize = dout.numel() / (m * p);
                let shared_a = batch_a.is_empty() && !batch_b.is_empty();
                let shared_b = batch_b.is_empty() && !batch_a.is_empty();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let dv = dout.data();
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        let gd = g.data_mut();
                        for i in 0..nb {
                            let dc = &dv[i * m * p..(i + 1) * m * p];
                            let bs = if shared_b {
                                bv
                            } else {
                                &bv[i * k * p..(i + 1) * k * p]
                            };
                            let ga = if shared_a {
                                &mut gd[..]
                            } else {
                                &mut gd[i * m * k..(i + 1) * m * k]
                            };
                            // dA += dC * B^T
                            gemm_rm(m, p, k, 1.0, dc, false, bs, true, 1.0, ga);
                        }
                    });
                }
                if self.needs(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    add_grad(&mut grads[b.0], &shape, &mut |g| {
                        let gd = g.data_mut();
                        for i in 0..nb {
                            let dc = &dv[i * m * p..(i + 1) * m * p];
                            let as_ = if shared_a {
                                av
                            } else {
                                &av[i * m * k..(i + 1) * m * k]
                            };
                            let gb = if shared_b {
                                &mut gd[..]
                            } else {
                                &mut gd[i * k * p..(i + 1) * k * p]
                            };
                            // dB += A^T * dC
                            gemm_rm(k, m, p, 1.0, as_, true, dc, false, 1.0, gb);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.binary_backward(*a, *b, dout, grads, |_, _| 1.0, |_, _| 1.0);
            }
            Op::Sub { a, b } => {
                self.binary_backward(*a, *b, dout, grads, |_, _| 1.0, |_, _| -1.0);
            }
            Op::Mul { a, b } => {
                self.binary_backward(*a, *b, dout, grads, |_, bv| bv, |av, _| av);
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let c = *c;
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        for (gi, di) in g.data_mut().iter_mut().zip(dout.data()) {
                            *gi += c * di;
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let dt = transpose_last(dout).unwrap();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        accumulate(g, &dt, 1.0);
                    });
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let x = self.value(*a).data();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        for ((gi, di), xi) in g.data_mut().iter_mut().zip(dout.data()).zip(x) {
                            if *xi > 0.0 {
                                *gi += di;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let y = self.nodes[id].value.data();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        for ((gi, di), yi) in g.data_mut().iter_mut().zip(dout.data()).zip(y) {
                            *gi += di * yi * (1.0 - yi);
                        }
                    });
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let s = self.nodes[id].value.data();
                    let d = *self.nodes[id].value.shape().last().unwrap();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        let gd = g.data_mut();
                        for r in 0..s.len() / d {
                            let srow = &s[r * d..(r + 1) * d];
                            let drow = &dout.data()[r * d..(r + 1) * d];
                            let dot: f64 = srow.iter().zip(drow).map(|(si, di)| si * di).sum();
                            for j in 0..d {
                                gd[r * d + j] += srow[j] * (drow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *xhat.shape().last().unwrap();
                let rows = xhat.numel() / d;
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    add_grad(&mut grads[gain.0], &[d], &mut |g| {
                        let gd = g.data_mut();
                        for r in 0..rows {
                            for j in 0..d {
                                gd[j] += dout.data()[r * d + j] * xhat.data()[r * d + j];
                            }
                        }
                    });
                }
                if self.needs(*bias) {
                    add_grad(&mut grads[bias.0], &[d], &mut |g| {
                        let gd = g.data_mut();
                        for r in 0..rows {
                            for j in 0..d {
                                gd[j] += dout.data()[r * d + j];
                            }
                        }
                    });
                }
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        let gd = g.data_mut();
                        for r in 0..rows {
                            let mut mean_dg = 0.0;
                            let mut mean_dgx = 0.0;
                            for j in 0..d {
                                let dg = dout.data()[r * d + j] * gv[j];
                                mean_dg += dg;
                                mean_dgx += dg * xhat.data()[r * d + j];
                            }
                            mean_dg /= d as f64;
                            mean_dgx /= d as f64;
                            for j in 0..d {
                                let dg = dout.data()[r * d + j] * gv[j];
                                gd[r * d + j] += inv_std[r]
                                    * (dg - mean_dg - xhat.data()[r * d + j] * mean_dgx);
                            }
                        }
                    });
                }
            }
            Op::Dropout { a, mask } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        for ((gi, di), mi) in
                            g.data_mut().iter_mut().zip(dout.data()).zip(mask.data())
                        {
                            *gi += di * mi;
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    add_grad(&mut grads[table.0], &shape, &mut |g| {
                        let gd = g.data_mut();
                        for (r, &id_) in ids.iter().enumerate() {
                            for j in 0..d {
                                gd[id_ * d + j] += dout.data()[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatLast { parts } => {
                let d_total = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.numel() / d_total;
                let mut col = 0;
                for &p in parts {
                    let d = *self.value(p).shape().last().unwrap();
                    if self.needs(p) {
                        let shape = self.value(p).shape().to_vec();
                        add_grad(&mut grads[p.0], &shape, &mut |g| {
                            let gd = g.data_mut();
                            for r in 0..rows {
                                for j in 0..d {
                                    gd[r * d + j] += dout.data()[r * d_total + col + j];
                                }
                            }
                        });
                    }
                    col += d;
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        for (gi, di) in g.data_mut().iter_mut().zip(dout.data()) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let n = self.value(*a).numel() as f64;
                    let d = dout.scalar_value() / n;
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        for gi in g.data_mut() {
                            *gi += d;
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let d = dout.scalar_value();
                    add_grad(&mut grads[a.0], &shape, &mut |g| {
                        for gi in g.data_mut() {
                            *gi += d;
                        }
                    });
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => {
                if self.needs(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let x = self.value(*logits).data();
                    let n = x.len() as f64;
                    let d = dout.scalar_value();
                    let pw = *pos_weight;
                    add_grad(&mut grads[logits.0], &shape, &mut |g| {
                        for ((gi, &xi), &yi) in g.data_mut().iter_mut().zip(x).zip(targets.data())
                        {
                            let grad = (1.0 - yi) * stable_sigmoid(xi)
                                - pw * yi * stable_sigmoid(-xi);
                            *gi += d * grad / n;
                        }
                    });
                }
            }
        }
    }

    /// Shared backward for add/sub/mul: per-element coefficients as
    /// functions of (a_value, b_value), with suffix-broadcast reduction.
    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        dout: &Tensor,
        grads: &mut [Option<Tensor>],
        coeff_a: impl Fn(f64, f64) -> f64,
        coeff_b: impl Fn(f64, f64) -> f64,
    ) {
        let av = self.value(a);
        let bv = self.value(b);
        let (big_is_a, small) = if av.numel() >= bv.numel() { (true, bv) } else { (false, av) };
        let small_n = small.numel();
        let ad = av.data();
        let bd = bv.data();
        let dd = dout.data();

        if self.needs(a) {
            let g = grads[a.0].get_or_insert_with(|| Tensor::zeros(av.shape()));
            let gd = g.data_mut();
            if big_is_a || av.numel() == bv.numel() {
                for i in 0..dd.len() {
                    gd[i] += dd[i] * coeff_a(ad[i], bd[i % bd.len()]);
                }
            } else {
                // a is the broadcast (smaller) side: reduce over leading reps.
                for i in 0..dd.len() {
                    gd[i % small_n] += dd[i] * coeff_a(ad[i % small_n], bd[i]);
                }
            }
        }
        if self.needs(b) {
            let g = grads[b.0].get_or_insert_with(|| Tensor::zeros(bv.shape()));
            let gd = g.data_mut();
            if big_is_a && av.numel() != bv.numel() {
                for i in 0..dd.len() {
                    gd[i % small_n] += dd[i] * coeff_b(ad[i], bd[i % small_n]);
                }
            } else {
                for i in 0..dd.len() {
                    gd[i] += dd[i] * coeff_b(ad[i % ad.len()], bd[i]);
                }
            }
        }
    }

    fn elementwise(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        what: &str,
    ) -> Result<(Tensor, bool), AdError> {
        let av = self.value(a);
        let bv = self.value(b);
        let (big, small) = if av.numel() >= bv.numel() {
            (av, bv)
        } else {
            (bv, av)
        };
        if !suffix_broadcastable(big.shape(), small.shape()) {
            return Err(AdError::ShapeMismatch(format!(
                "{what}: shapes {:?} and {:?} (only leading-axis broadcast allowed)",
                av.shape(),
                bv.shape()
            )));
        }
        let n = big.numel();
        let sn = small.numel().max(1);
        let mut out = Tensor::zeros(big.shape());
        {
            let ov = out.data_mut();
            let ad = av.data();
            let bd = bv.data();
            for i in 0..n {
                let x = ad[i % ad.len().max(1)];
                let y = bd[i % bd.len().max(1)];
                ov[i] = f(x, y);
            }
            let _ = sn;
        }
        Ok((out, self.needs(a) || self.needs(b)))
    }
}

enum MatmulBatch {
    Pairwise,
    SharedA,
    SharedB,
}

fn suffix_broadcastable(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == small[..]
}

fn transpose_last(t: &Tensor) -> Result<Tensor, AdError> {
    let (batch, m, n) = t.matrix_split()?;
    let nb: usize = batch.iter().product();
    let mut shape = batch.to_vec();
    shape.extend_from_slice(&[n, m]);
    let mut out = Tensor::zeros(&shape);
    {
        let ov = out.data_mut();
        let iv = t.data();
        for b in 0..nb {
            let src = &iv[b * m * n..(b + 1) * m * n];
            let dst = &mut ov[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn accumulate(dst: &mut Tensor, src: &Tensor, scale: f64) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * s;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
