use rand::RngCore;

use super::tape::Op;
use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Added to the variance inside [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Sigmoid outputs are clamped to `[SIGMOID_FLOOR, 1 - SIGMOID_FLOOR]`.
pub const SIGMOID_FLOOR: f64 = 1e-7;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` (laid out as `shape`) into the layout with axes `a` and `b`
/// swapped.
fn swap_axes<T: Float>(data: &[T], shape: &[usize], a: usize, b: usize) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let mut src_strides = in_strides.clone();
    src_strides.swap(a, b);

    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    'outer: loop {
        let base: usize = (0..rank - 1).map(|i| index[i] * src_strides[i]).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance all but the innermost axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break 'outer;
            }
            ax -= 1;
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<'p, T: Float> Tape<'p, T> {
    /// Standard 2-d matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product of `[batch×m×k]` with `[batch×k×n]`, or with
    /// `[batch×n×k]` transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(
                "batch_matmul",
                format!("cannot multiply {sa:?} by {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `[d]` bias to every row of `[..×d]`; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} factors for {:?}", factors.len(), self.shape(x)),
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulConst { x, factors }, &[x]))
    }

    /// Zeroes every row (last-axis vector) whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let d = self.value(x).last_dim();
        if keep.len() * d != self.value(x).len() {
            return Err(Error::shape(
                "mask_rows",
                format!("{} row flags for {:?}", keep.len(), self.shape(x)),
            ));
        }
        let factors = keep
            .iter()
            .flat_map(|&k| std::iter::repeat(if k { T::one() } else { T::zero() }).take(d))
            .collect();
        self.mul_const(x, factors)
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. Masked positions are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} entries for {:?}", mask.len(), xv.shape()),
            ));
        }
        let n = xv.last_dim();
        let mut out = vec![T::zero(); xv.len()];
        for (row, ((xs, ms), os)) in xv
            .data()
            .chunks(n)
            .zip(mask.chunks(n))
            .zip(out.chunks_mut(n))
            .enumerate()
        {
            let max = xs
                .iter()
                .zip(ms)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(Error::FullyMasked { row })?;
            let mut total = T::zero();
            for ((o, &v), &m) in os.iter_mut().zip(xs).zip(ms) {
                if m {
                    *o = (v - max).exp();
                    total = total + *o;
                }
            }
            for o in os.iter_mut() {
                *o = *o / total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::MaskedSoftmax { x }, &[x]))
    }

    /// Per-row standardization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last axis of {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    self.shape(x)
                ),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normalized.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {slope} outside (0, 1)")));
        }
        let slope = T::of(slope);
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope });
        Ok(self.push(value, Op::LeakyRelu { x, slope }, &[x]))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0; otherwise each
    /// element is kept with probability `1 - rate` and scaled by
    /// `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        // integer threshold keeps the mask platform independent
        let threshold = (rate * 4_294_967_296.0) as u64;
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let factors = (0..self.value(x).len())
            .map(|_| {
                if u64::from(rng.next_u32()) >= threshold {
                    keep_scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.mul_const(x, factors)
    }

    /// Logistic function clamped to `[1e-7, 1 - 1e-7]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::of(SIGMOID_FLOOR);
        let hi = T::of(1.0 - SIGMOID_FLOOR);
        let xv = self.value(x);
        let mut live = Vec::with_capacity(xv.len());
        let data = xv
            .data()
            .iter()
            .map(|&v| {
                let s = T::one() / (T::one() + (-v).exp());
                if s < lo {
                    live.push(false);
                    lo
                } else if s > hi {
                    live.push(false);
                    hi
                } else {
                    live.push(true);
                    s
                }
            })
            .collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push(value, Op::Sigmoid { x, live }, &[x])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with leading axes {lead:?}", s),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(*first).len() / widths[0];
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Row lookup `table[ids]` from a 2-d table; out-of-range ids name
    /// `column` in the error.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], column: &str) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table shape {ts:?} is not 2-d")));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Lookup {
                column: column.to_string(),
                id: bad,
                size: rows,
            });
        }
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty id list"));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// One output row per bag: the mean of the table rows listed in the bag,
    /// or zeros for an empty bag. Rows are accumulated in ascending id order,
    /// so the result does not depend on the order ids are listed in.
    pub fn bag_mean(&mut self, table: Var, bags: &[Vec<usize>], column: &str) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::shape("bag_mean", format!("table shape {ts:?} is not 2-d")));
        }
        let (rows, d) = (ts[0], ts[1]);
        if bags.is_empty() {
            return Err(Error::shape("bag_mean", "no bags"));
        }
        let mut terms = Vec::new();
        for (b, bag) in bags.iter().enumerate() {
            if let Some(&bad) = bag.iter().find(|&&i| i >= rows) {
                return Err(Error::Lookup {
                    column: column.to_string(),
                    id: bad,
                    size: rows,
                });
            }
            let mut sorted = bag.clone();
            sorted.sort_unstable();
            let inv_n = T::one() / T::of(sorted.len() as f64);
            let mut i = 0;
            while i < sorted.len() {
                let id = sorted[i];
                let mut j = i;
                while j < sorted.len() && sorted[j] == id {
                    j += 1;
                }
                terms.push((b, id, T::of((j - i) as f64) * inv_n));
                i = j;
            }
        }
        let tv = self.value(table);
        let mut data = vec![T::zero(); bags.len() * d];
        for &(b, id, w) in &terms {
            for (o, &v) in data[b * d..(b + 1) * d].iter_mut().zip(tv.row(id)) {
                *o = *o + w * v;
            }
        }
        let value = Tensor::new(vec![bags.len(), d], data)?;
        Ok(self.push(value, Op::BagMean { table, terms }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({a}, {b}) out of range for {shape:?}"),
            ));
        }
        if a == b {
            return Ok(x);
        }
        let (data, out_shape) = swap_axes(self.value(x).data(), &shape, a, b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Transpose { x, axes: (a, b) }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} probabilities vs {} labels", pv.len(), labels.len()),
            ));
        }
        let n = T::of(labels.len() as f64);
        let total: T = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            .sum();
        let value = Tensor::scalar(-total / n);
        Ok(self.push(
            value,
            Op::BinaryCrossEntropy {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        ))
    }

    pub(super) fn propagate(
        &self,
        idx: usize,
        up: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let g = up.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                self.accumulate(grads, *a, || {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, self.value(*b).data(), true, T::zero(), &mut d);
                    Tensor { shape: vec![m, k], data: d }
                });
                self.accumulate(grads, *b, || {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, g, false, T::zero(), &mut d);
                    Tensor { shape: vec![k, n], data: d }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, || {
                    let mut d = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // C = A·B  => dA = dC·Bᵀ ; C = A·Bᵀ => dA = dC·B
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            T::zero(),
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                    Tensor { shape: sa.clone(), data: d }
                });
                self.accumulate(grads, *b, || {
                    let mut d = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let ga = &g[i * m * n..(i + 1) * m * n];
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n×k) = dCᵀ·A
                            T::gemm(n, m, k, ga, true, aa, false, T::zero(), out);
                        } else {
                            // dB (k×n) = Aᵀ·dC
                            T::gemm(k, m, n, aa, true, ga, false, T::zero(), out);
                        }
                    }
                    Tensor { shape: sb.clone(), data: d }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, || up.clone());
                self.accumulate(grads, *b, || up.clone());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, || up.clone());
                self.accumulate(grads, *bias, || {
                    let d = up.last_dim();
                    let mut acc = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::vector(acc)
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, || up.map(|v| v * *factor));
            }
            Op::MulConst { x, factors } => {
                self.accumulate(grads, *x, || Tensor {
                    shape: up.shape().to_vec(),
                    data: g.iter().zip(factors).map(|(&v, &f)| v * f).collect(),
                });
            }
            Op::MaskedSoftmax { x } => {
                self.accumulate(grads, *x, || {
                    let s = self.nodes[idx].value.data();
                    let n = up.last_dim();
                    let mut d = Vec::with_capacity(s.len());
                    for (sr, gr) in s.chunks(n).zip(g.chunks(n)) {
                        let dot: T = sr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        d.extend(sr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                    }
                    Tensor { shape: up.shape().to_vec(), data: d }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = up.last_dim();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *x, || {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, nr), &is) in g.chunks(d).zip(normalized.chunks(d)).zip(inv_std) {
                        let dn: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dn: T = dn.iter().copied().sum();
                        let sum_dn_n: T = dn.iter().zip(nr).map(|(&a, &b)| a * b).sum();
                        dx.extend(
                            dn.iter()
                                .zip(nr)
                                .map(|(&a, &b)| is * (a - inv_d * sum_dn - b * inv_d * sum_dn_n)),
                        );
                    }
                    Tensor { shape: up.shape().to_vec(), data: dx }
                });
                self.accumulate(grads, *gain, || {
                    let mut acc = vec![T::zero(); d];
                    for (gr, nr) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            acc[j] = acc[j] + gr[j] * nr[j];
                        }
                    }
                    Tensor::vector(acc)
                });
                self.accumulate(grads, *bias, || {
                    let mut acc = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            acc[j] = acc[j] + gr[j];
                        }
                    }
                    Tensor::vector(acc)
                });
            }
            Op::LeakyRelu { x, slope } => {
                self.accumulate(grads, *x, || Tensor {
                    shape: up.shape().to_vec(),
                    data: g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| if v >= T::zero() { d } else { d * *slope })
                        .collect(),
                });
            }
            Op::Sigmoid { x, live } => {
                let s = self.nodes[idx].value.data();
                self.accumulate(grads, *x, || Tensor {
                    shape: up.shape().to_vec(),
                    data: g
                        .iter()
                        .zip(s)
                        .zip(live)
                        .map(|((&d, &p), &l)| if l { d * p * (T::one() - p) } else { T::zero() })
                        .collect(),
                });
            }
            Op::Concat { parts } => {
                let total = up.last_dim();
                let rows = up.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    self.accumulate(grads, *p, || {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        Tensor { shape: self.shape(*p).to_vec(), data: d }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                self.accumulate(grads, *table, || {
                    let mut d = Tensor::zeros(self.shape(*table));
                    let w = up.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d.data[id * w..(id + 1) * w];
                        for (a, &v) in dst.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *a = *a + v;
                        }
                    }
                    d
                });
            }
            Op::BagMean { table, terms } => {
                self.accumulate(grads, *table, || {
                    let mut d = Tensor::zeros(self.shape(*table));
                    let w = up.last_dim();
                    for &(b, id, wt) in terms {
                        let dst = &mut d.data[id * w..(id + 1) * w];
                        for (a, &v) in dst.iter_mut().zip(&g[b * w..(b + 1) * w]) {
                            *a = *a + wt * v;
                        }
                    }
                    d
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, || Tensor {
                    shape: self.shape(*x).to_vec(),
                    data: g.to_vec(),
                });
            }
            Op::Transpose { x, axes } => {
                self.accumulate(grads, *x, || {
                    let (data, shape) = swap_axes(g, up.shape(), axes.0, axes.1);
                    Tensor { shape, data }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, || Tensor::full(self.shape(*x), g[0]));
            }
            Op::BinaryCrossEntropy { p, labels } => {
                let n = T::of(labels.len() as f64);
                self.accumulate(grads, *p, || Tensor {
                    shape: self.shape(*p).to_vec(),
                    data: self
                        .value(*p)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&q, &y)| g[0] * (q - y) / (q * (T::one() - q)) / n)
                        .collect(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(t2(&[&[1.0, 2.0]]));
        let col = tape.constant(t2(&[&[3.0], &[4.0]]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_descriptive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = tape.masked_softmax(x, &[true; 3]).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let y = tape.constant(Tensor::vector(vec![0.7, 0.7]));
        let s = tape.masked_softmax(y, &[true, false]).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);

        let z = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.masked_softmax(z, &[true; 3]).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &v) in tape.value(s).data().iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_row_is_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.masked_softmax(x, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 1 }));
    }

    #[test]
    fn layer_norm_limits() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let y = tape.layer_norm(c, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-3 && (v[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![2.0, -1.0]));
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -0.01]);
        assert!(tape.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0, 1e4, -1e4]));
        let y = tape.sigmoid(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.731059).abs() < 1e-5);
        assert_eq!(v[2], 1.0 - 1e-7);
        assert_eq!(v[3], 1e-7);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![1.0; 16]));
        assert_eq!(tape.dropout(x, 0.2, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, Mode::Eval, &mut rng).is_err());
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn gather_concat_transpose() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param_owned("t", t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let rows = tape.gather_rows(table, &[0, 0], "item_id").unwrap();
        assert_eq!(tape.value(rows).data(), &[1.0, 2.0, 1.0, 2.0]);
        let err = tape.gather_rows(table, &[2], "item_id").unwrap_err();
        assert!(err.to_string().contains("item_id"));

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let m = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mt = tape.transpose(m, 0, 1).unwrap();
        assert_eq!(tape.shape(mt), &[3, 2]);
        assert_eq!(tape.value(mt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gather_backward_scatter_adds() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param_owned("t", t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let rows = tape.gather_rows(table, &[0, 0], "t").unwrap();
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("t").unwrap().data(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn bag_mean_is_order_free() {
        let mut tape = Tape::<f32>::new();
        let table = tape.constant(
            Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.1, 0.7, 0.3, 0.9, 1.3, 0.2]).unwrap(),
        );
        let a = tape.bag_mean(table, &[vec![1, 2, 3, 2], vec![]], "t").unwrap();
        let b = tape.bag_mean(table, &[vec![2, 3, 2, 1], vec![]], "t").unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        assert_eq!(&tape.value(a).data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones_and_tape_is_single_use() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param_owned("x", Tensor::zeros(&[2, 3]));
        let unused = tape.param_owned("unused", Tensor::ones(&[4]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap(), &Tensor::ones(&[2, 3]));
        assert_eq!(g.get("unused").unwrap(), &Tensor::zeros(&[4]));
        let _ = unused;
        assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param_owned("x", Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn sigmoid_gradient_closed_form() {
        // loss = sigmoid(w·x) with fixed x
        let x = [0.3, -1.2, 0.8];
        let w = [0.5, 0.25, -0.75];
        let mut tape = Tape::<f64>::new();
        let wv = tape.param_owned("w", Tensor::new(vec![1, 3], w.to_vec()).unwrap());
        let xv = tape.constant(Tensor::new(vec![3, 1], x.to_vec()).unwrap());
        let z = tape.matmul(wv, xv).unwrap();
        let p = tape.sigmoid(z);
        let g = tape.backward(p).unwrap();
        let zs: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        let s = 1.0 / (1.0 + (-zs).exp());
        for (gi, xi) in g.get("w").unwrap().data().iter().zip(&x) {
            assert!((gi - s * (1.0 - s) * xi).abs() < 1e-12);
        }
    }
}
