//! Minimal reverse-mode differentiation tape and SGD-with-momentum, sized for
//! the knowledge-distillation loop: the tape supports exactly the primitives
//! the model needs, records every forward value, and can replay the recorded
//! program — in f32 for bitwise reproduction, or in f64 with perturbed leaves
//! for central finite-difference gradient checks.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tensor};

/// A trainable (or frozen) tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    /// When false the parameter behaves as a constant: its gradient is
    /// identically zero after any backward pass and the optimizer skips it.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        let mut p = Self::new(value);
        p.trainable = false;
        p
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
        self.grad = Tensor::zeros(self.value.shape().to_vec());
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape().to_vec());
    }
}

/// Handle to a value recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Constant leaf (activations, masks, teacher probabilities).
    Input,
    /// Trainable leaf; `key` identifies the parameter slot in the model's
    /// canonical enumeration order.
    Param { key: usize, trainable: bool },
    MatMul,
    /// Product over the leading batch dimension; with `transpose_b` the
    /// second operand is `[B, N, K]` and the op computes `a · bᵀ`.
    BatchMatMul { transpose_b: bool },
    /// Broadcast a `[N]` bias over the rows of a `[..., N]` tensor.
    BiasAdd,
    Add,
    Scale { factor: f32 },
    /// out[i] = in[indices[i]]; backward scatter-adds, so repeated indices
    /// (broadcasts) and permutations are both covered.
    Gather {
        indices: Arc<Vec<u32>>,
        out_shape: Vec<usize>,
    },
    LayerNorm { eps: f32 },
    Softmax,
    Gelu,
    Relu,
    Square,
    /// Mean over fixed-size groups of rows: `[G·group, C] -> [G, C]`.
    MeanPool { group: usize },
    Sum,
    /// KL(teacher ‖ softmax(logits / T)), averaged over rows. The teacher
    /// distribution is a captured constant.
    KdLoss {
        teacher: Arc<Tensor>,
        temperature: f32,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    value: Tensor,
}

/// Recorded forward program plus per-node values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_grads: HashMap<usize, Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, inputs, value });
        ValueId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Input, vec![], value)
    }

    pub fn param(&mut self, key: usize, p: &Parameter) -> ValueId {
        self.push(
            Op::Param {
                key,
                trainable: p.trainable,
            },
            vec![],
            p.value.clone(),
        )
    }

    fn record(&mut self, op: Op, inputs: Vec<ValueId>) -> Result<ValueId> {
        let in_views: Vec<(&[f32], &[usize])> = inputs
            .iter()
            .map(|id| {
                let t = &self.nodes[id.0].value;
                (t.data(), t.shape())
            })
            .collect();
        let (data, shape) = eval_op::<f32>(&op, &in_views)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(op, inputs, value))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::MatMul, vec![a, b])
    }

    pub fn batch_matmul(&mut self, a: ValueId, b: ValueId, transpose_b: bool) -> Result<ValueId> {
        self.record(Op::BatchMatMul { transpose_b }, vec![a, b])
    }

    pub fn bias_add(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        self.record(Op::BiasAdd, vec![x, bias])
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::Add, vec![a, b])
    }

    pub fn scale(&mut self, x: ValueId, factor: f32) -> Result<ValueId> {
        self.record(Op::Scale { factor }, vec![x])
    }

    pub fn gather(
        &mut self,
        x: ValueId,
        indices: Arc<Vec<u32>>,
        out_shape: Vec<usize>,
    ) -> Result<ValueId> {
        self.record(Op::Gather { indices, out_shape }, vec![x])
    }

    pub fn layernorm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f32,
    ) -> Result<ValueId> {
        self.record(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }

    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Softmax, vec![x])
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Gelu, vec![x])
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Relu, vec![x])
    }

    pub fn square(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Square, vec![x])
    }

    pub fn mean_pool(&mut self, x: ValueId, group: usize) -> Result<ValueId> {
        self.record(Op::MeanPool { group }, vec![x])
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Sum, vec![x])
    }

    pub fn kd_loss(
        &mut self,
        logits: ValueId,
        teacher: Arc<Tensor>,
        temperature: f32,
    ) -> Result<ValueId> {
        self.record(
            Op::KdLoss {
                teacher,
                temperature,
            },
            vec![logits],
        )
    }

    /// Reverse pass. Populates per-parameter gradients for every trainable
    /// `Param` leaf reachable from `loss`; frozen leaves keep a zero
    /// gradient by construction.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidParameter(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: clone light metadata, read sibling values.
            let (op, inputs) = {
                let n = &self.nodes[i];
                (n.op.clone(), n.inputs.clone())
            };
            match &op {
                Op::Input => {}
                Op::Param { key, trainable } => {
                    if *trainable {
                        let slot = self
                            .param_grads
                            .entry(*key)
                            .or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape().to_vec()));
                        for (s, gv) in slot.data_mut().iter_mut().zip(&g) {
                            *s += gv;
                        }
                    }
                }
                _ => {
                    let input_grads = self.backward_op(&op, &inputs, i, &g)?;
                    for (id, ig) in inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            match &mut grads[id.0] {
                                Some(acc) => {
                                    for (a, v) in acc.iter_mut().zip(&ig) {
                                        *a += v;
                                    }
                                }
                                slot => *slot = Some(ig),
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_op(
        &self,
        op: &Op,
        inputs: &[ValueId],
        node: usize,
        g: &[f32],
    ) -> Result<Vec<Option<Vec<f32>>>> {
        let val = |id: ValueId| &self.nodes[id.0].value;
        let out = &self.nodes[node].value;
        Ok(match op {
            Op::Input | Op::Param { .. } => vec![],
            Op::MatMul => {
                let a = val(inputs[0]);
                let b = val(inputs[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut da = vec![0.0f32; m * k];
                tensor::batch_matmul_kernel(g, b.data(), 1, m, n, k, true, &mut da);
                let mut db = vec![0.0f32; k * n];
                matmul_ta_kernel(a.data(), g, m, k, n, &mut db);
                vec![Some(da), Some(db)]
            }
            Op::BatchMatMul { transpose_b } => {
                let a = val(inputs[0]);
                let b = val(inputs[1]);
                let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = if *transpose_b {
                    b.shape()[1]
                } else {
                    b.shape()[2]
                };
                let mut da = vec![0.0f32; bs * m * k];
                let mut db = vec![0.0f32; b.len()];
                if *transpose_b {
                    // c = a·bᵀ: da = g·b ; db = gᵀ·a
                    tensor::batch_matmul_kernel(g, b.data(), bs, m, n, k, false, &mut da);
                    batch_matmul_ta_kernel(g, a.data(), bs, m, n, k, &mut db);
                } else {
                    // c = a·b: da = g·bᵀ ; db = aᵀ·g
                    tensor::batch_matmul_kernel(g, b.data(), bs, m, n, k, true, &mut da);
                    batch_matmul_ta_kernel(a.data(), g, bs, m, k, n, &mut db);
                }
                vec![Some(da), Some(db)]
            }
            Op::BiasAdd => {
                let n = val(inputs[1]).len();
                let mut dbias = vec![0.0f32; n];
                for row in g.chunks(n) {
                    for (d, v) in dbias.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![Some(g.to_vec()), Some(dbias)]
            }
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Scale { factor } => {
                vec![Some(g.iter().map(|v| v * factor).collect())]
            }
            Op::Gather { indices, .. } => {
                let mut dx = vec![0.0f32; val(inputs[0]).len()];
                for (&idx, gv) in indices.iter().zip(g) {
                    dx[idx as usize] += gv;
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { eps } => {
                let x = val(inputs[0]);
                let gamma = val(inputs[1]);
                let c = gamma.len();
                let rows = x.len() / c;
                let mut dx = vec![0.0f32; x.len()];
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for r in 0..rows {
                    let xr = &x.data()[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f32>() / c as f32;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f32> = xr.iter().map(|v| (v - mean) * inv_std).collect();
                    let h: Vec<f32> = gr
                        .iter()
                        .zip(gamma.data())
                        .map(|(gv, gam)| gv * gam)
                        .collect();
                    let m1 = h.iter().sum::<f32>() / c as f32;
                    let m2 = h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                    for j in 0..c {
                        dx[r * c + j] = (h[j] - m1 - xhat[j] * m2) * inv_std;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Softmax => {
                let y = out;
                let c = *y.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for (r, (yr, gr)) in y.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::Gelu => {
                let x = val(inputs[0]);
                let dx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let phi = 0.5 * (1.0 + libm::erff(v / std::f32::consts::SQRT_2));
                        let pdf = (-0.5 * v * v).exp() / (2.0 * std::f32::consts::PI).sqrt();
                        gv * (phi + v * pdf)
                    })
                    .collect();
                vec![Some(dx)]
            }
            Op::Relu => {
                // Subgradient 0 at exactly 0.
                let x = val(inputs[0]);
                let dx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }
            Op::Square => {
                let x = val(inputs[0]);
                let dx = x.data().iter().zip(g).map(|(&v, gv)| 2.0 * v * gv).collect();
                vec![Some(dx)]
            }
            Op::MeanPool { group } => {
                let x = val(inputs[0]);
                let c = *x.shape().last().unwrap();
                let inv = 1.0 / *group as f32;
                let mut dx = vec![0.0f32; x.len()];
                for (r, d) in dx.chunks_mut(c).enumerate() {
                    let gr = &g[(r / group) * c..(r / group + 1) * c];
                    for (dv, gv) in d.iter_mut().zip(gr) {
                        *dv = gv * inv;
                    }
                }
                vec![Some(dx)]
            }
            Op::Sum => {
                let n = val(inputs[0]).len();
                vec![Some(vec![g[0]; n])]
            }
            Op::KdLoss {
                teacher,
                temperature,
            } => {
                let z = val(inputs[0]);
                let k = *z.shape().last().unwrap();
                let rows = z.len() / k;
                let t = *temperature;
                let mut dz = vec![0.0f32; z.len()];
                let coeff = g[0] / (rows as f32 * t);
                for r in 0..rows {
                    let zr = &z.data()[r * k..(r + 1) * k];
                    let pr = &teacher.data()[r * k..(r + 1) * k];
                    let ps = softmax_row_scaled(zr, t);
                    for j in 0..k {
                        dz[r * k + j] = coeff * (ps[j] - pr[j]);
                    }
                }
                vec![Some(dz)]
            }
        })
    }

    /// Gradient accumulated into parameter slot `key`, if any.
    pub fn param_grad(&self, key: usize) -> Option<&Tensor> {
        self.param_grads.get(&key)
    }

    pub fn loss_value(&self, loss: ValueId) -> f32 {
        self.nodes[loss.0].value.data()[0]
    }

    /// Re-execute the recorded program in f32 and return every node value.
    /// Used to assert that replaying the same inputs reproduces the forward
    /// bitwise.
    pub fn replay_f32(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Input | Op::Param { .. } => node.value.clone(),
                _ => {
                    let in_views: Vec<(&[f32], &[usize])> = node
                        .inputs
                        .iter()
                        .map(|id| {
                            let t = &values[id.0];
                            (t.data(), t.shape())
                        })
                        .collect();
                    let (data, shape) = eval_op::<f32>(&node.op, &in_views)?;
                    Tensor::new(shape, data)?
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Replay the program in f64, adding `delta` to one element of every
    /// `Param` leaf carrying `key`, and return the value of `target`.
    pub fn replay_f64(
        &self,
        target: ValueId,
        key: usize,
        elem: usize,
        delta: f64,
    ) -> Result<f64> {
        let mut values: Vec<(Vec<f64>, Vec<usize>)> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Input => (
                    node.value.data().iter().map(|&v| v as f64).collect(),
                    node.value.shape().to_vec(),
                ),
                Op::Param { key: k, .. } => {
                    let mut data: Vec<f64> =
                        node.value.data().iter().map(|&v| v as f64).collect();
                    if k == key {
                        data[elem] += delta;
                    }
                    (data, node.value.shape().to_vec())
                }
                _ => {
                    let in_views: Vec<(&[f64], &[usize])> = node
                        .inputs
                        .iter()
                        .map(|id| {
                            let (d, s) = &values[id.0];
                            (d.as_slice(), s.as_slice())
                        })
                        .collect();
                    eval_op::<f64>(&node.op, &in_views)?
                }
            };
            values.push(value);
        }
        Ok(values[target.0].0[0])
    }

    /// Parameter keys present on the tape, with shape and trainability.
    pub fn param_slots(&self) -> Vec<(usize, Vec<usize>, bool)> {
        let mut seen = HashMap::new();
        for node in &self.nodes {
            if let Op::Param { key, trainable } = node.op {
                seen.entry(key)
                    .or_insert((key, node.value.shape().to_vec(), trainable));
            }
        }
        let mut out: Vec<_> = seen.into_values().collect();
        out.sort_by_key(|(k, _, _)| *k);
        out
    }
}

fn softmax_row_scaled(z: &[f32], t: f32) -> Vec<f32> {
    let scaled: Vec<f32> = z.iter().map(|&v| v / t).collect();
    let max = scaled.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `out[p][q] = Σ_r x[r][p] · y[r][q]` (xᵀ·y), ascending r.
fn matmul_ta_kernel(x: &[f32], y: &[f32], rows: usize, p: usize, q: usize, out: &mut [f32]) {
    for r in 0..rows {
        let xr = &x[r * p..(r + 1) * p];
        let yr = &y[r * q..(r + 1) * q];
        for (i, &xv) in xr.iter().enumerate() {
            let orow = &mut out[i * q..(i + 1) * q];
            for (o, &yv) in orow.iter_mut().zip(yr) {
                *o += xv * yv;
            }
        }
    }
}

/// Batched xᵀ·y: x `[B, R, P]`, y `[B, R, Q]` -> out `[B, P, Q]`.
fn batch_matmul_ta_kernel(
    x: &[f32],
    y: &[f32],
    batch: usize,
    rows: usize,
    p: usize,
    q: usize,
    out: &mut [f32],
) {
    for bi in 0..batch {
        matmul_ta_kernel(
            &x[bi * rows * p..(bi + 1) * rows * p],
            &y[bi * rows * q..(bi + 1) * rows * q],
            rows,
            p,
            q,
            &mut out[bi * p * q..(bi + 1) * p * q],
        );
    }
}

/// Single forward evaluator shared by tape construction (f32) and replay
/// (f32/f64): the one place each primitive's arithmetic is written down.
fn eval_op<T: Real>(op: &Op, inputs: &[(&[T], &[usize])]) -> Result<(Vec<T>, Vec<usize>)> {
    match op {
        Op::Input | Op::Param { .. } => Err(Error::Unsupported(
            "leaf nodes are not re-evaluated".into(),
        )),
        Op::MatMul => {
            let (a, sa) = inputs[0];
            let (b, sb) = inputs[1];
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::ShapeMismatch {
                    op: "tape matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![T::ZERO; m * n];
            tensor::matmul_kernel(a, b, m, k, n, &mut out);
            Ok((out, vec![m, n]))
        }
        Op::BatchMatMul { transpose_b } => {
            let (a, sa) = inputs[0];
            let (b, sb) = inputs[1];
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(Error::ShapeMismatch {
                    op: "tape batch_matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *transpose_b { sb[1] } else { sb[2] };
            let inner_ok = if *transpose_b { sb[2] == k } else { sb[1] == k };
            if !inner_ok {
                return Err(Error::ShapeMismatch {
                    op: "tape batch_matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let mut out = vec![T::ZERO; bs * m * n];
            tensor::batch_matmul_kernel(a, b, bs, m, k, n, *transpose_b, &mut out);
            Ok((out, vec![bs, m, n]))
        }
        Op::BiasAdd => {
            let (x, sx) = inputs[0];
            let (bias, sb) = inputs[1];
            let n = *sx.last().unwrap_or(&0);
            if sb.len() != 1 || sb[0] != n {
                return Err(Error::ShapeMismatch {
                    op: "tape bias_add",
                    lhs: sx.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks(n) {
                for (v, b) in row.iter().zip(bias) {
                    out.push(*v + *b);
                }
            }
            Ok((out, sx.to_vec()))
        }
        Op::Add => {
            let (a, sa) = inputs[0];
            let (b, sb) = inputs[1];
            if sa != sb {
                return Err(Error::ShapeMismatch {
                    op: "tape add",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            Ok((
                a.iter().zip(b).map(|(x, y)| *x + *y).collect(),
                sa.to_vec(),
            ))
        }
        Op::Scale { factor } => {
            let (x, sx) = inputs[0];
            let f = T::from_f32(*factor);
            Ok((x.iter().map(|&v| v * f).collect(), sx.to_vec()))
        }
        Op::Gather { indices, out_shape } => {
            let (x, _) = inputs[0];
            let out: Vec<T> = indices.iter().map(|&i| x[i as usize]).collect();
            let expected: usize = out_shape.iter().product();
            if out.len() != expected {
                return Err(Error::ShapeMismatch {
                    op: "tape gather",
                    lhs: vec![out.len()],
                    rhs: out_shape.clone(),
                });
            }
            Ok((out, out_shape.clone()))
        }
        Op::LayerNorm { eps } => {
            let (x, sx) = inputs[0];
            let (gamma, sg) = inputs[1];
            let (beta, _) = inputs[2];
            let c = *sx.last().unwrap_or(&0);
            if sg != [c] {
                return Err(Error::ShapeMismatch {
                    op: "tape layernorm",
                    lhs: sx.to_vec(),
                    rhs: sg.to_vec(),
                });
            }
            let mut out = vec![T::ZERO; x.len()];
            tensor::layernorm_kernel(x, gamma, beta, T::from_f32(*eps), c, &mut out);
            Ok((out, sx.to_vec()))
        }
        Op::Softmax => {
            let (x, sx) = inputs[0];
            let c = *sx.last().unwrap_or(&0);
            let mut out = vec![T::ZERO; x.len()];
            tensor::softmax_kernel(x, c, &mut out);
            Ok((out, sx.to_vec()))
        }
        Op::Gelu => {
            let (x, sx) = inputs[0];
            Ok((
                x.iter().map(|&v| tensor::gelu_value(v)).collect(),
                sx.to_vec(),
            ))
        }
        Op::Relu => {
            let (x, sx) = inputs[0];
            Ok((
                x.iter().map(|&v| tensor::relu_value(v)).collect(),
                sx.to_vec(),
            ))
        }
        Op::Square => {
            let (x, sx) = inputs[0];
            Ok((x.iter().map(|&v| v * v).collect(), sx.to_vec()))
        }
        Op::MeanPool { group } => {
            let (x, sx) = inputs[0];
            let c = *sx.last().unwrap_or(&0);
            let rows = x.len() / c;
            if *group == 0 || rows % group != 0 {
                return Err(Error::InvalidParameter(format!(
                    "mean_pool group {group} does not divide {rows} rows"
                )));
            }
            let groups = rows / group;
            let inv = T::ONE / T::from_usize(*group);
            let mut out = vec![T::ZERO; groups * c];
            for (r, row) in x.chunks(c).enumerate() {
                let orow = &mut out[(r / group) * c..(r / group + 1) * c];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = *o + v * inv;
                }
            }
            Ok((out, vec![groups, c]))
        }
        Op::Sum => {
            let (x, _) = inputs[0];
            let mut acc = T::ZERO;
            for &v in x {
                acc = acc + v;
            }
            Ok((vec![acc], vec![]))
        }
        Op::KdLoss {
            teacher,
            temperature,
        } => {
            let (z, sz) = inputs[0];
            if sz.len() != 2 || teacher.shape() != sz {
                return Err(Error::ShapeMismatch {
                    op: "tape kd_loss",
                    lhs: sz.to_vec(),
                    rhs: teacher.shape().to_vec(),
                });
            }
            let k = sz[1];
            let rows = sz[0];
            let t = T::from_f32(*temperature);
            let mut total = T::ZERO;
            for r in 0..rows {
                let zr = &z[r * k..(r + 1) * k];
                let pr = &teacher.data()[r * k..(r + 1) * k];
                // log-softmax of z/T, stabilized
                let mut max = zr[0] / t;
                for &v in &zr[1..] {
                    let v = v / t;
                    if v > max {
                        max = v;
                    }
                }
                let mut lse = T::ZERO;
                for &v in zr {
                    lse = lse + (v / t - max).exp();
                }
                let lse = lse.ln() + max;
                for (j, &v) in zr.iter().enumerate() {
                    let p = T::from_f32(pr[j]);
                    if p > T::ZERO {
                        let log_ps = v / t - lse;
                        total = total + p * (p.ln() - log_ps);
                    }
                }
            }
            Ok((vec![total / T::from_usize(rows)], vec![]))
        }
    }
}

/// Build a tape with `build`, run the reverse pass, and hand back the loss
/// value together with the tape (which now carries per-parameter gradients).
pub fn forward_backward<F>(build: F) -> Result<(f32, Tape)>
where
    F: FnOnce(&mut Tape) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(loss)?;
    Ok((tape.loss_value(loss), tape))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub key: usize,
    pub max_rel_err: f64,
    pub frozen: bool,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Compare every tape gradient against central finite differences computed
/// by an f64 replay of the same program.
///
/// `denom_floor` guards the relative error against near-zero gradients:
/// rel = |g − fd| / max(|g|, |fd|, floor).
pub fn grad_check(
    tape: &Tape,
    loss: ValueId,
    h: f64,
    tolerance: f64,
    denom_floor: f64,
) -> Result<GradCheckReport> {
    let mut per_param = Vec::new();
    for (key, shape, trainable) in tape.param_slots() {
        let n: usize = shape.iter().product();
        if !trainable {
            // Freeze semantics: the reported gradient is exactly zero.
            let g_is_zero = tape
                .param_grad(key)
                .map(|g| g.data().iter().all(|&v| v == 0.0))
                .unwrap_or(true);
            per_param.push(ParamCheck {
                key,
                max_rel_err: if g_is_zero { 0.0 } else { f64::INFINITY },
                frozen: true,
                checked: 0,
            });
            continue;
        }
        let zero;
        let grad = match tape.param_grad(key) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(shape.clone());
                &zero
            }
        };
        let mut max_rel = 0.0f64;
        for elem in 0..n {
            let plus = tape.replay_f64(loss, key, elem, h)?;
            let minus = tape.replay_f64(loss, key, elem, -h)?;
            let fd = (plus - minus) / (2.0 * h);
            let got = grad.data()[elem] as f64;
            let denom = got.abs().max(fd.abs()).max(denom_floor);
            max_rel = max_rel.max((got - fd).abs() / denom);
        }
        per_param.push(ParamCheck {
            key,
            max_rel_err: max_rel,
            frozen: false,
            checked: n,
        });
    }
    let pass = per_param.iter().all(|p| p.max_rel_err < tolerance);
    Ok(GradCheckReport {
        per_param,
        tolerance,
        pass,
    })
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
}

impl SgdConfig {
    pub fn new(learning_rate: f32, momentum: f32) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be > 0, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
        })
    }
}

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub struct SgdMomentum {
    cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    /// One update over a fixed parameter enumeration. The slice order must
    /// be stable across steps; velocity buffers are keyed by position.
    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        if self.velocity.len() != params.len() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let lr = self.cfg.learning_rate;
            let mu = self.cfg.momentum;
            for ((vv, gv), pv) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data_mut().iter_mut())
            {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Random values bounded away from zero, for kink-free ReLU checks.
    fn rng_tensor_offset(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| {
            let v: f32 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    #[test]
    fn sum_of_param_gives_unit_gradients() {
        let p = Parameter::new(rng_tensor(vec![3, 4], 1));
        let (_, tape) = forward_backward(|t| {
            let x = t.param(0, &p);
            t.sum(x)
        })
        .unwrap();
        let g = tape.param_grad(0).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kd_loss_of_identical_distributions_is_zero() {
        let logits = rng_tensor(vec![4, 10], 2);
        let teacher = Arc::new(crate::tensor::softmax_lastdim(&logits));
        let p = Parameter::new(logits);
        let (loss, tape) = forward_backward(|t| {
            let z = t.param(0, &p);
            t.kd_loss(z, teacher.clone(), 1.0)
        })
        .unwrap();
        assert!(loss.abs() < 1e-6, "loss = {loss}");
        let g = tape.param_grad(0).unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn kd_loss_handles_one_hot_teacher() {
        // One-hot teacher turns the KD loss into plain cross-entropy.
        let logits = rng_tensor(vec![3, 5], 3);
        let mut onehot = Tensor::zeros(vec![3, 5]);
        for r in 0..3 {
            onehot.data_mut()[r * 5 + r] = 1.0;
        }
        let p = Parameter::new(logits.clone());
        let (loss, _) = forward_backward(|t| {
            let z = t.param(0, &p);
            t.kd_loss(z, Arc::new(onehot), 1.0)
        })
        .unwrap();
        // Oracle: mean of -log softmax(z)[label]
        let probs = crate::tensor::softmax_lastdim(&logits);
        let want: f32 = (0..3)
            .map(|r| -probs.data()[r * 5 + r].ln())
            .sum::<f32>()
            / 3.0;
        assert!((loss - want).abs() < 1e-5, "loss={loss} want={want}");
    }

    /// One focused finite-difference check per primitive.
    #[test]
    fn every_primitive_matches_finite_differences() {
        type Build = fn(&mut Tape, &Parameter) -> Result<ValueId>;
        let cases: Vec<(&str, Vec<usize>, bool, Build)> = vec![
            ("matmul", vec![3, 4], false, |t, p| {
                let x = t.param(0, p);
                let w = t.input(rng_tensor(vec![4, 2], 101));
                let y = t.matmul(x, w)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("matmul_rhs", vec![4, 2], false, |t, p| {
                let a = t.input(rng_tensor(vec![3, 4], 102));
                let w = t.param(0, p);
                let y = t.matmul(a, w)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("batch_matmul", vec![2, 3, 4], false, |t, p| {
                let a = t.param(0, p);
                let b = t.input(rng_tensor(vec![2, 4, 5], 103));
                let y = t.batch_matmul(a, b, false)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("batch_matmul_tb", vec![2, 5, 4], false, |t, p| {
                let a = t.input(rng_tensor(vec![2, 3, 4], 104));
                let b = t.param(0, p);
                let y = t.batch_matmul(a, b, true)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("bias_add", vec![4], false, |t, p| {
                let x = t.input(rng_tensor(vec![3, 4], 105));
                let b = t.param(0, p);
                let y = t.bias_add(x, b)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("add_scale", vec![3, 4], false, |t, p| {
                let x = t.param(0, p);
                let c = t.input(rng_tensor(vec![3, 4], 106));
                let y = t.add(x, c)?;
                let y = t.scale(y, 0.7)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("gather", vec![6], false, |t, p| {
                let x = t.param(0, p);
                let idx = Arc::new(vec![5u32, 0, 3, 3, 1]);
                let y = t.gather(x, idx, vec![5])?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("layernorm", vec![3, 6], false, |t, p| {
                let x = t.param(0, p);
                let g = t.input(rng_tensor(vec![6], 107));
                let b = t.input(rng_tensor(vec![6], 108));
                let y = t.layernorm(x, g, b, 1e-5)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("layernorm_params", vec![6], false, |t, p| {
                let x = t.input(rng_tensor(vec![3, 6], 109));
                let g = t.param(0, p);
                let b = t.input(rng_tensor(vec![6], 110));
                let y = t.layernorm(x, g, b, 1e-5)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("softmax", vec![3, 5], false, |t, p| {
                let x = t.param(0, p);
                let y = t.softmax(x)?;
                let c = t.input(rng_tensor(vec![3, 5], 111));
                let y = t.add(y, c)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("gelu", vec![4, 3], false, |t, p| {
                let x = t.param(0, p);
                let y = t.gelu(x)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("relu", vec![4, 3], true, |t, p| {
                let x = t.param(0, p);
                let y = t.relu(x)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("mean_pool", vec![6, 4], false, |t, p| {
                let x = t.param(0, p);
                let y = t.mean_pool(x, 3)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("kd_loss", vec![4, 7], false, |t, p| {
                let z = t.param(0, p);
                let teacher =
                    Arc::new(crate::tensor::softmax_lastdim(&rng_tensor(vec![4, 7], 112)));
                t.kd_loss(z, teacher, 2.0)
            }),
        ];

        for (name, shape, offset, build) in cases {
            let value = if offset {
                rng_tensor_offset(shape, 200)
            } else {
                rng_tensor(shape, 201)
            };
            let p = Parameter::new(value);
            let mut tape = Tape::new();
            let loss = build(&mut tape, &p).unwrap();
            tape.backward(loss).unwrap();
            let report = grad_check(&tape, loss, 1e-3, 1e-3, 1e-2).unwrap();
            assert!(
                report.pass,
                "{name}: worst rel err {}",
                report.worst()
            );
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let w1 = Parameter::new(rng_tensor(vec![6, 8], 301));
        let b1 = Parameter::new(rng_tensor(vec![8], 302));
        let w2 = Parameter::new(rng_tensor(vec![8, 4], 303));
        let b2 = Parameter::new(rng_tensor(vec![4], 304));
        let x = rng_tensor(vec![5, 6], 305);
        let target = crate::tensor::softmax_lastdim(&rng_tensor(vec![5, 4], 306));

        let mut tape = Tape::new();
        let xin = tape.input(x);
        let w1id = tape.param(0, &w1);
        let b1id = tape.param(1, &b1);
        let w2id = tape.param(2, &w2);
        let b2id = tape.param(3, &b2);
        let h = tape.matmul(xin, w1id).unwrap();
        let h = tape.bias_add(h, b1id).unwrap();
        let h = tape.gelu(h).unwrap();
        let z = tape.matmul(h, w2id).unwrap();
        let z = tape.bias_add(z, b2id).unwrap();
        let loss = tape.kd_loss(z, Arc::new(target), 1.0).unwrap();
        tape.backward(loss).unwrap();

        let report = grad_check(&tape, loss, 1e-3, 1e-3, 1e-2).unwrap();
        assert!(report.pass, "worst rel err {}", report.worst());
    }

    #[test]
    fn linear_layer_squared_loss_is_tight() {
        // Squared loss is quadratic, so central differences are exact up to
        // roundoff and the comparison can be held to 1e-6.
        let w = Parameter::new(rng_tensor(vec![4, 3], 401));
        let x = rng_tensor(vec![5, 4], 402);
        let y = rng_tensor(vec![5, 3], 403);

        let mut tape = Tape::new();
        let xin = tape.input(x);
        let wid = tape.param(0, &w);
        let pred = tape.matmul(xin, wid).unwrap();
        let yin = tape.input(y);
        let neg = tape.scale(yin, -1.0).unwrap();
        let diff = tape.add(pred, neg).unwrap();
        let sq = tape.square(diff).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();

        let report = grad_check(&tape, loss, 1e-3, 1e-6, 1e-2).unwrap();
        assert!(report.pass, "worst rel err {}", report.worst());
    }

    #[test]
    fn frozen_parameter_reports_exactly_zero_gradient() {
        let mut p = Parameter::new(rng_tensor(vec![4], 501));
        p.freeze();
        let q = Parameter::new(rng_tensor(vec![4], 502));
        let (_, tape) = forward_backward(|t| {
            let a = t.param(0, &p);
            let b = t.param(1, &q);
            let s = t.add(a, b)?;
            let s2 = t.square(s)?;
            t.sum(s2)
        })
        .unwrap();
        assert!(tape.param_grad(0).is_none());
        assert!(tape.param_grad(1).is_some());
        let report = grad_check(&tape, ValueId(tape.len() - 1), 1e-3, 1e-3, 1e-2).unwrap();
        let frozen = report.per_param.iter().find(|p| p.key == 0).unwrap();
        assert!(frozen.frozen && frozen.max_rel_err == 0.0);
    }

    #[test]
    fn replay_f32_reproduces_forward_bitwise() {
        let p = Parameter::new(rng_tensor(vec![4, 4], 601));
        let mut tape = Tape::new();
        let x = tape.input(rng_tensor(vec![2, 4], 602));
        let w = tape.param(0, &p);
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.softmax(h).unwrap();
        let _ = tape.sum(h).unwrap();

        let replayed = tape.replay_f32().unwrap();
        for i in 0..tape.len() {
            let a = tape.value(ValueId(i));
            let b = &replayed[i];
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn sgd_momentum_hand_arithmetic() {
        let mut p = Parameter::new(Tensor::scalar(1.0));
        p.grad = Tensor::scalar(1.0);
        let mut opt = SgdMomentum::new(SgdConfig::new(0.1, 0.9).unwrap());
        opt.step(&mut [&mut p]);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        p.grad = Tensor::scalar(1.0);
        opt.step(&mut [&mut p]);
        assert!((p.value.data()[0] - 0.71).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_grad_and_zero_momentum() {
        let mut p = Parameter::new(Tensor::scalar(2.5));
        let mut opt = SgdMomentum::new(SgdConfig::new(0.1, 0.9).unwrap());
        opt.step(&mut [&mut p]);
        assert_eq!(p.value.data()[0], 2.5);

        let mut q = Parameter::new(Tensor::scalar(1.0));
        q.grad = Tensor::scalar(0.5);
        let mut vanilla = SgdMomentum::new(SgdConfig::new(0.2, 0.0).unwrap());
        vanilla.step(&mut [&mut q]);
        assert!((q.value.data()[0] - (1.0 - 0.2 * 0.5)).abs() < 1e-7);
    }

    #[test]
    fn frozen_parameter_is_invariant_under_steps() {
        let mut p = Parameter::new(Tensor::scalar(3.0));
        p.grad = Tensor::scalar(10.0);
        p.trainable = false;
        let mut opt = SgdMomentum::new(SgdConfig::new(0.5, 0.9).unwrap());
        for _ in 0..5 {
            opt.step(&mut [&mut p]);
        }
        assert_eq!(p.value.data()[0], 3.0);
    }

    #[test]
    fn sgd_config_validates_ranges() {
        assert!(SgdConfig::new(0.0, 0.9).is_err());
        assert!(SgdConfig::new(0.1, 1.0).is_err());
        assert!(SgdConfig::new(0.1, -0.1).is_err());
        assert!(SgdConfig::new(0.1, 0.0).is_ok());
    }
}
