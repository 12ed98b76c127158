use rand::{Rng, RngCore};

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Packs several sequences row-wise into one matrix.
///
/// Attention never crosses a segment boundary, and a row whose key flag is
/// false is never attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    segments: Vec<(usize, usize)>,
    key_valid: Vec<bool>,
}

impl SeqLayout {
    pub fn new(lengths: &[usize]) -> Self {
        let rows = lengths.iter().sum();
        Self::with_key_mask(lengths, vec![true; rows]).expect("mask length matches")
    }

    pub fn with_key_mask(lengths: &[usize], key_valid: Vec<bool>) -> Result<Self> {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, len));
            start += len;
        }
        if start != key_valid.len() {
            return Err(Error::ShapeMismatch {
                op: "seq_layout",
                lhs: vec![start],
                rhs: vec![key_valid.len()],
            });
        }
        Ok(Self { segments, key_valid })
    }

    pub fn rows(&self) -> usize {
        self.key_valid.len()
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    /// Whether row `i` of a segment may attend to row `j` of the same segment.
    pub fn allowed(&self, start: usize, i: usize, j: usize) -> bool {
        j <= i && self.key_valid[start + j]
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Sum {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<T>,
        keep: Option<Vec<T>>,
    },
    Dropout {
        a: Var,
        keep: Vec<T>,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Inputs always precede the operations that use them, so walking the nodes
/// backwards visits them in reverse topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + T::lit(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

fn matrix(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to a leaf or parameter.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = matrix(self.value(a), "matmul")?;
        let (br, bc) = matrix(self.value(b), "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            T::zero(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    /// Adds a `[n]` bias to every row of `a: [m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = matrix(self.value(a), "add_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { a, bias }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale { a, factor }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::Gelu { a }, needs)
    }

    /// Row-wise normalization to zero mean and unit variance, then `gain`
    /// and `bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        for v in [gain, bias] {
            if self.value(v).shape() != [cols] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let eps = T::lit(eps);
        let n = T::from_usize(cols).unwrap();
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Softmax along `axis`, shifted by the maximum for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (x[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, outer, len, inner }, needs))
    }

    /// Rows of `table: [V×H]` selected by `ids`, giving `[ids.len()×H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, h) = matrix(self.value(table), "embedding")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&t[id * h..(id + 1) * h]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), h], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, h) = matrix(self.value(a), "gather_rows")?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange { index: r, extent: n });
            }
            out.extend_from_slice(&src[r * h..(r + 1) * h]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), h], out)?,
            Op::GatherRows { a, rows: rows.to_vec() },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let (n, classes) = matrix(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, classes],
                rhs: vec![targets.len()],
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * classes];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= classes {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    extent: classes,
                });
            }
            let row = &x[r * classes..(r + 1) * classes];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cross_entropy logits"));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
            total += log_z - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::NoContributingPositions);
        }
        let loss = total / T::from_usize(count).unwrap();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            needs,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// the survivors by `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut dyn RngCore) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = keep_mask::<T>(self.value(a).len(), p, rng);
        let data = self.value(a).data().iter().zip(&keep).map(|(&x, &m)| x * m).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::Dropout { a, keep }, needs)
    }

    /// Multi-head scaled dot-product attention with causal and key masking.
    ///
    /// `q`, `k` and `v` are `[rows×H]`; head `h` uses columns
    /// `h*H/heads..(h+1)*H/heads`. Masked scores are set to `-inf` before the
    /// softmax. When `dropout` is given, attention weights are dropped after
    /// normalization.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        heads: usize,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let (rows, width) = matrix(self.value(q), "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, width] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: vec![rows, width],
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if rows != layout.rows() {
            return Err(Error::ShapeMismatch {
                op: "attention layout",
                lhs: vec![rows],
                rhs: vec![layout.rows()],
            });
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        let dk = width / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let prob_len: usize = layout.segments.iter().map(|&(_, l)| heads * l * l).sum();
        let mut probs = vec![T::zero(); prob_len];
        let mut out = vec![T::zero(); rows * width];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut offset = 0;
        for &(start, len) in &layout.segments {
            for h in 0..heads {
                let qh = copy_block(qd, width, start, len, h * dk, dk);
                let kh = copy_block(kd, width, start, len, h * dk, dk);
                let p = &mut probs[offset..offset + len * len];
                T::gemm(len, dk, len, &qh, false, &kh, true, p, T::zero());
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut max = T::neg_infinity();
                    for (j, s) in row.iter_mut().enumerate() {
                        if layout.allowed(start, i, j) {
                            *s *= scale;
                            max = max.max(*s);
                        } else {
                            *s = T::neg_infinity();
                        }
                    }
                    if max == T::neg_infinity() {
                        row.iter_mut().for_each(|s| *s = T::zero());
                        continue;
                    }
                    let mut total = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                offset += len * len;
            }
        }
        let keep = dropout
            .filter(|(p, _)| *p > 0.0)
            .map(|(p, rng)| keep_mask::<T>(prob_len, p, rng));
        let mut offset = 0;
        for &(start, len) in &layout.segments {
            for h in 0..heads {
                let vh = copy_block(vd, width, start, len, h * dk, dk);
                let mut p = probs[offset..offset + len * len].to_vec();
                if let Some(keep) = &keep {
                    add_mask(&mut p, &keep[offset..offset + len * len]);
                }
                let mut oh = vec![T::zero(); len * dk];
                T::gemm(len, len, dk, &p, false, &vh, false, &mut oh, T::zero());
                scatter_block(&mut out, width, start, len, h * dk, dk, &oh);
                offset += len * len;
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
                keep,
            },
            needs,
        ))
    }

    /// Attention weights recorded by an attention node, per segment and head.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from a scalar `loss` and adds parameter gradients into
    /// `store`. Gradients accumulate across calls until the store is zeroed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_inputs(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                store.accumulate(*id, g);
            }
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss`, keeping gradients of leaves and
    /// parameters readable through [`Tape::grad`].
    pub fn backward_inputs(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).matrix_dims();
                let n = node.value.shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    // ga += g · op(b)ᵀ
                    T::gemm(m, n, k, g, false, bv, !*trans_b, ga, T::one());
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    if *trans_b {
                        T::gemm(n, m, k, g, true, av, false, gb, T::one());
                    } else {
                        T::gemm(k, m, n, av, true, g, false, gb, T::one());
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(&self.nodes, grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d += gi * *factor;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *d += gi * gelu_parts(x).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gain).len();
                let gv = self.value(*gain).data().to_vec();
                if let Some(gg) = slot(&self.nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *bias) {
                    for grow in g.chunks(cols) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    let n = T::from_usize(cols).unwrap();
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let d = grow[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hrow[c];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for c in 0..cols {
                            let d = grow[c] * gv[c];
                            gx[r * cols + c] += rstd[r] * (d - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: T = (0..*len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..*len {
                                ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = self.value(*table).shape()[1];
                if let Some(gt) = slot(&self.nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let h = node.value.shape()[1];
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * h..(r + 1) * h], &g[i * h..(i + 1) * h]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let classes = self.value(*logits).shape()[1];
                let factor = g[0] / T::from_usize(*count).unwrap();
                if let Some(gl) = slot(&self.nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gl[r * classes + c] += factor * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for ((d, &gi), &m) in ga.iter_mut().zip(g).zip(keep) {
                        *d += gi * m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
                keep,
            } => {
                self.attention_backward(node, g, (*q, *k, *v), layout, *heads, probs, keep.as_deref(), grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<T>,
        g: &[T],
        (q, k, v): (Var, Var, Var),
        layout: &SeqLayout,
        heads: usize,
        probs: &[T],
        keep: Option<&[T]>,
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = node.value.shape()[1];
        let rows = node.value.shape()[0];
        let dk = width / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); rows * width];
        let mut gk = vec![T::zero(); rows * width];
        let mut gv = vec![T::zero(); rows * width];
        let mut offset = 0;
        for &(start, len) in &layout.segments {
            for h in 0..heads {
                let p = &probs[offset..offset + len * len];
                let mask = keep.map(|m| &m[offset..offset + len * len]);
                let go = copy_block(g, width, start, len, h * dk, dk);
                let qh = copy_block(qd, width, start, len, h * dk, dk);
                let kh = copy_block(kd, width, start, len, h * dk, dk);
                let vh = copy_block(vd, width, start, len, h * dk, dk);
                let mut dropped = p.to_vec();
                if let Some(m) = mask {
                    add_mask(&mut dropped, m);
                }
                // dV = Pᵀ·dO
                let mut dv = vec![T::zero(); len * dk];
                T::gemm(len, len, dk, &dropped, true, &go, false, &mut dv, T::zero());
                // dP = dO·Vᵀ
                let mut dp = vec![T::zero(); len * len];
                T::gemm(len, dk, len, &go, false, &vh, true, &mut dp, T::zero());
                if let Some(m) = mask {
                    add_mask(&mut dp, m);
                }
                // dS = P ⊙ (dP - rowsum(P ⊙ dP)), then the 1/sqrt(dk) scale
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pi) in dr.iter_mut().zip(pr) {
                        *d = pi * (*d - dot) * scale;
                    }
                }
                let mut dq = vec![T::zero(); len * dk];
                T::gemm(len, len, dk, &dp, false, &kh, false, &mut dq, T::zero());
                let mut dkh = vec![T::zero(); len * dk];
                T::gemm(len, len, dk, &dp, true, &qh, false, &mut dkh, T::zero());
                scatter_block(&mut gq, width, start, len, h * dk, dk, &dq);
                scatter_block(&mut gk, width, start, len, h * dk, dk, &dkh);
                scatter_block(&mut gv, width, start, len, h * dk, dk, &dv);
                offset += len * len;
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                let len = self.nodes[var.0].value.len();
                add_into(grads[var.0].get_or_insert_with(|| vec![T::zero(); len]), &local);
            }
        }
    }
}

fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn keep_mask<T: Scalar>(n: usize, p: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let scale = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
        .collect()
}

fn add_mask<T: Scalar>(values: &mut [T], mask: &[T]) {
    for (v, &m) in values.iter_mut().zip(mask) {
        *v *= m;
    }
}

fn copy_block<T: Scalar>(src: &[T], width: usize, row0: usize, rows: usize, col0: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in row0..row0 + rows {
        out.extend_from_slice(&src[r * width + col0..r * width + col0 + cols]);
    }
    out
}

fn scatter_block<T: Scalar>(
    dst: &mut [T],
    width: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    src: &[T],
) {
    for r in 0..rows {
        let d = &mut dst[(row0 + r) * width + col0..(row0 + r) * width + col0 + cols];
        add_into(d, &src[r * cols..(r + 1) * cols]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = tape.constant(t(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c).data(), [3.0, 7.0]);
        let eye = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let same = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(a).data());
        match tape.matmul(c, a) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => assert_eq!((lhs, rhs), (vec![2, 1], vec![2, 2])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), [0.5, 0.5]);
        let big = tape.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let s = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s).data(), [0.5, 0.5]);
        let a = tape.constant(t(&[&[0.3, -1.2, 2.0], &[5.0, 5.5, -3.0]]));
        let shifted = tape.constant(t(&[&[7.3, 5.8, 9.0], &[12.0, 12.5, 4.0]]));
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(shifted, 1).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-9);
        }
        let cols = tape.softmax(a, 0).unwrap();
        let v = tape.value(cols).data();
        for j in 0..3 {
            assert!((v[j] + v[3 + j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[2.5, 2.5, 2.5, 2.5]]));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let x = tape.constant(t(&[&[1.0, -2.0, 0.5, 9.0]]));
        let b = tape.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 4.0;
        assert!((mean - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_ignored() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 40]));
        let loss = tape.cross_entropy(logits, &[1, 5, 39], Some(39)).unwrap();
        assert!((tape.value(loss).item() - 40f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(logits, &[39, 39, 39], Some(39)),
            Err(Error::NoContributingPositions)
        ));
        assert!(matches!(
            tape.cross_entropy(logits, &[1, 2, 40], None),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(tape.embedding(table, &[0, 4]).is_err());
    }

    #[test]
    fn gelu_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn sum_of_product_gradient() {
        let mut store = ParamStore::new();
        let wid = store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, wid);
        let x = tape.constant(Tensor::new(vec![3], vec![3.0, 4.0, -5.0]).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(wid).grad.as_ref().unwrap().data(), [3.0, 4.0, -5.0]);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(wid).grad.as_ref().unwrap().data(), [6.0, 8.0, -10.0]);
        assert!(matches!(tape.backward(prod, &mut store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = tape.constant(Tensor::new(vec![5, 4], data).unwrap());
        let layout = SeqLayout::with_key_mask(&[3, 2], vec![true, false, true, true, true]).unwrap();
        let out = tape.attention(x, x, x, &layout, 2, None).unwrap();
        let p = tape.attention_weights(out).unwrap();
        // first segment: 2 heads × 3×3, then 2 heads × 2×2
        for h in 0..2 {
            let block = &p[h * 9..(h + 1) * 9];
            for i in 0..3 {
                let row = &block[i * 3..(i + 1) * 3];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(row[1], 0.0, "masked key");
                assert!(row[i + 1..].iter().all(|&v| v == 0.0), "future key");
            }
        }
        assert_eq!(p.len(), 2 * 9 + 2 * 4);
    }
}
