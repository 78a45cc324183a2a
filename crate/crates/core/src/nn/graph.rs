use super::tensor::{Scalar, Tensor};
use super::{shape_err, NnError, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const ROTARY_BASE: f64 = 10_000.0;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// The input packs queries, keys and values as `[batch * seq, 3 * d_model]`.
/// Keys at or beyond `lengths[b]` are never attended to; query rows beyond
/// the length produce zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    pub lengths: Vec<usize>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        qkv: Var,
        spec: AttentionSpec,
        probs: Vec<F>,
    },
    Rotary {
        qkv: Var,
        seq: usize,
        heads: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros when the node was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<F> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, F::zero());
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        let b = bv.data();
        for row in out.chunks_mut(b.len()) {
            for (o, &bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    /// Matrix product plus a broadcast bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape(), out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape(), out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return shape_err(
                "layer_norm",
                format!("{:?} with gamma {:?} beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            );
        }
        let rows = xv.rows();
        let inv_c = F::of(1.0 / c as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut out = vec![F::zero(); rows * c];
        let mut xhat = vec![F::zero(); rows * c];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Gelu(x), ng))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return shape_err("embedding", format!("table shape {:?}", tv.shape()));
        }
        if ids.is_empty() {
            return shape_err("embedding", "no ids");
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NnError::Domain(format!("token id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let ng = self.needs(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if rows.is_empty() {
            return shape_err("gather_rows", "no rows selected");
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return shape_err("gather_rows", format!("row {r} of {n}"));
            }
            out.extend_from_slice(xv.row(r));
        }
        let t = Tensor::new(&[rows.len(), c], out)?;
        let ng = self.needs(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Rotary position encoding applied to the query and key thirds of a
    /// packed `[batch * seq, 3 * d_model]` projection. Values pass through.
    pub fn rotary(&mut self, qkv: Var, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(qkv);
        let d3 = xv.cols();
        if d3 % 3 != 0 || (d3 / 3) % heads != 0 || (d3 / 3 / heads) % 2 != 0 || xv.rows() % seq != 0 {
            return shape_err("rotary", format!("{:?} seq {seq} heads {heads}", xv.shape()));
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, d3 / 3, seq, heads, false);
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(qkv);
        Ok(self.push(t, Op::Rotary { qkv, seq, heads }, ng))
    }

    /// Fused scaled dot-product multi-head attention.
    pub fn attention(&mut self, qkv: Var, spec: AttentionSpec) -> Result<Var> {
        let xv = self.value(qkv);
        let AttentionSpec {
            batch,
            seq,
            heads,
            causal,
            ref lengths,
        } = spec;
        if xv.shape().len() != 2 || xv.rows() != batch * seq || xv.cols() % 3 != 0 {
            return shape_err(
                "attention",
                format!("{:?} for batch {batch} seq {seq}", xv.shape()),
            );
        }
        let d = xv.cols() / 3;
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", format!("d_model {d} not divisible by {heads} heads"));
        }
        if lengths.len() != batch || lengths.iter().any(|&l| l > seq) {
            return shape_err("attention", format!("lengths {lengths:?} for seq {seq}"));
        }
        let hd = d / heads;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let x = xv.data();
        let mut out = vec![F::zero(); batch * seq * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut scores = vec![F::zero(); seq];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..len {
                    let jmax = if causal { i + 1 } else { len };
                    let qrow = (b * seq + i) * 3 * d + h * hd;
                    let q = &x[qrow..qrow + hd];
                    for j in 0..jmax {
                        let krow = (b * seq + j) * 3 * d + d + h * hd;
                        scores[j] = dot(q, &x[krow..krow + hd]) * scale;
                    }
                    softmax_in_place(&mut scores[..jmax]);
                    let orow = (b * seq + i) * d + h * hd;
                    let o = &mut out[orow..orow + hd];
                    for j in 0..jmax {
                        let p = scores[j];
                        probs[pbase + i * seq + j] = p;
                        let vrow = (b * seq + j) * 3 * d + 2 * d + h * hd;
                        for (oc, &vc) in o.iter_mut().zip(&x[vrow..vrow + hd]) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[batch * seq, d], out)?;
        let ng = self.needs(qkv);
        Ok(self.push(t, Op::Attention { qkv, spec, probs }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (loss, probs) = cross_entropy_forward(lv, targets)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(F::of(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar node. Clears any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                let slot = &mut self.nodes[v.0].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(cg).for_each(|(a, c)| *a += c),
                    None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    F::gemm(m, n, k, g, false, bv.data(), true, &mut ga, F::zero());
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    F::gemm(k, m, n, av.data(), true, g, false, &mut gb, F::zero());
                    out.push((*b, gb));
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.needs(*bias) {
                    let c = self.value(*bias).len();
                    let mut gb = vec![F::zero(); c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let c = gv.len();
                let rows = rstd.len();
                if self.needs(*x) {
                    let inv_c = F::of(1.0 / c as f64);
                    let mut gx = vec![F::zero(); rows * c];
                    for r in 0..rows {
                        let gy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            let dxh = gy[j] * gv[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dx = mean_dx * inv_c;
                        for j in 0..c {
                            let dxh = gy[j] * gv[j];
                            gx[r * c + j] = rstd[r] * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) {
                    let mut gg = vec![F::zero(); c];
                    for (gy, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                    out.push((*gamma, gg));
                }
                if self.needs(*beta) {
                    let mut gb = vec![F::zero(); c];
                    for gy in g.chunks(c) {
                        gb.iter_mut().zip(gy).for_each(|(a, &r)| *a += r);
                    }
                    out.push((*beta, gb));
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    out.push((*x, g.iter().zip(xv).map(|(&gi, &v)| gi * gelu_grad(v)).collect()));
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut gx = vec![F::zero(); y.len()];
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut gt = vec![F::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &s)| *a += s);
                    }
                    out.push((*table, gt));
                }
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = vec![F::zero(); xv.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(a, &s)| *a += s);
                    }
                    out.push((*x, gx));
                }
            }
            Op::Rotary { qkv, seq, heads } => {
                if self.needs(*qkv) {
                    let d = self.value(*qkv).cols() / 3;
                    let mut gx = g.to_vec();
                    rotate(&mut gx, d, *seq, *heads, true);
                    out.push((*qkv, gx));
                }
            }
            Op::Attention { qkv, spec, probs } => {
                if self.needs(*qkv) {
                    out.push((*qkv, attention_backward(self.value(*qkv).data(), spec, probs, g)));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let c = self.value(*logits).cols();
                    let scale = g[0] * F::of(1.0 / targets.len() as f64);
                    let mut gl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * c + t] = gl[r * c + t] - scale;
                    }
                    out.push((*logits, gl));
                }
            }
        }
        out
    }
}

fn attention_backward<F: Scalar>(x: &[F], spec: &AttentionSpec, probs: &[F], g: &[F]) -> Vec<F> {
    let AttentionSpec {
        batch,
        seq,
        heads,
        causal,
        ref lengths,
    } = *spec;
    let d = x.len() / (batch * seq * 3);
    let hd = d / heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut gx = vec![F::zero(); x.len()];
    let mut dp = vec![F::zero(); seq];
    for b in 0..batch {
        let len = lengths[b];
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..len {
                let jmax = if causal { i + 1 } else { len };
                let grow = (b * seq + i) * d + h * hd;
                let go = &g[grow..grow + hd];
                let p = &probs[pbase + i * seq..pbase + i * seq + jmax];
                let mut s = F::zero();
                for j in 0..jmax {
                    let vrow = (b * seq + j) * 3 * d + 2 * d + h * hd;
                    dp[j] = dot(go, &x[vrow..vrow + hd]);
                    s += p[j] * dp[j];
                    let pj = p[j];
                    for (gv, &goc) in gx[vrow..vrow + hd].iter_mut().zip(go) {
                        *gv += pj * goc;
                    }
                }
                let qrow = (b * seq + i) * 3 * d + h * hd;
                for j in 0..jmax {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let krow = (b * seq + j) * 3 * d + d + h * hd;
                    for c in 0..hd {
                        let kc = x[krow + c];
                        let qc = x[qrow + c];
                        gx[qrow + c] += ds * kc;
                        gx[krow + c] += ds * qc;
                    }
                }
            }
        }
    }
    gx
}

fn rotate<F: Scalar>(x: &mut [F], d: usize, seq: usize, heads: usize, inverse: bool) {
    let hd = d / heads;
    let half = hd / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| ROTARY_BASE.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    for (r, row) in x.chunks_mut(3 * d).enumerate() {
        let pos = (r % seq) as f64;
        for (i, &f) in inv_freq.iter().enumerate() {
            let (sin, cos) = (pos * f).sin_cos();
            let (sin, cos) = (F::of(if inverse { -sin } else { sin }), F::of(cos));
            for part in 0..2 {
                for h in 0..heads {
                    let base = part * d + h * hd + 2 * i;
                    let (a, b) = (row[base], row[base + 1]);
                    row[base] = a * cos - b * sin;
                    row[base + 1] = a * sin + b * cos;
                }
            }
        }
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// Loss and softmax probabilities for a `[rows, classes]` logits tensor.
pub(crate) fn cross_entropy_forward<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
) -> Result<(f64, Vec<F>)> {
    let c = logits.cols();
    let rows = logits.rows();
    if targets.len() != rows || rows == 0 {
        return shape_err(
            "cross_entropy",
            format!("{rows} rows of logits vs {} targets", targets.len()),
        );
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(NnError::Domain(format!("target {t} outside [0, {c})")));
    }
    if !logits.is_finite() {
        return Err(NnError::NonFinite("cross_entropy logits"));
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0f64;
    for (r, row) in probs.chunks_mut(c).enumerate() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = 0.0f64;
        for v in row.iter() {
            sum += (*v - max).as_f64().exp();
        }
        let lse = max.as_f64() + sum.ln();
        total += lse - row[targets[r]].as_f64();
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v = F::of((*v - max).as_f64().exp() * inv);
        }
    }
    Ok((total / rows as f64, probs))
}

/// Mean cross-entropy of `logits` (`[rows, classes]`) against `targets`.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<f64> {
    cross_entropy_forward(logits, targets).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 256]);
        let l = cross_entropy(&logits, &[0, 17, 255]).unwrap();
        assert_relative_eq!(l, 256f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(l, 5.5452, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut logits = Tensor::<f64>::zeros(&[1, 4]);
        logits.data_mut()[2] = 1e6;
        assert!(cross_entropy(&logits, &[2]).unwrap() < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // -ln(e^3 / (e^1 + e^2 + e^3)) evaluated by hand
        let logits = Tensor::new(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert_relative_eq!(cross_entropy(&logits, &[2]).unwrap(), 0.40761, epsilon = 1e-5);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Tensor::new(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert!(matches!(cross_entropy(&logits, &[3]), Err(NnError::Domain(_))));
        let bad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(cross_entropy(&bad, &[0]), Err(NnError::NonFinite(_))));
    }

    #[test]
    fn graph_cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = g.cross_entropy(x, &[2]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        assert_relative_eq!(grad[0], 1f64.exp() / z, epsilon = 1e-12);
        assert_relative_eq!(grad[2], 3f64.exp() / z - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn attention_ignores_keys_past_length() {
        let mut g = Graph::<f64>::new();
        let seq = 3;
        let d = 2;
        let data: Vec<f64> = (0..seq * 3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut padded = data.clone();
        for v in &mut padded[2 * 3 * d..] {
            *v = 99.0;
        }
        let spec = AttentionSpec {
            batch: 1,
            seq,
            heads: 1,
            causal: false,
            lengths: vec![2],
        };
        let a = g.constant(Tensor::new(&[seq, 3 * d], data).unwrap());
        let b = g.constant(Tensor::new(&[seq, 3 * d], padded).unwrap());
        let oa = g.attention(a, spec.clone()).unwrap();
        let ob = g.attention(b, spec).unwrap();
        assert_eq!(&g.value(oa).data()[..2 * d], &g.value(ob).data()[..2 * d]);
        assert!(g.value(ob).data()[2 * d..].iter().all(|&v| v == 0.0));
    }
}
