//! Differentiable primitives. Each op computes its forward value eagerly,
//! snapshots whatever it needs for the backward rule, and registers a
//! closure that adds this node's gradient contribution into its parents.

use rand::Rng;

use crate::error::{Error, Result};

use super::Tensor;

/// `out = a @ b`, plain row-major triple loop in i,k,j order so the innermost
/// loop runs over contiguous memory in both `b` and `out`.
pub(crate) fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out = a @ b^T` where `a` is m x k and `b` is n x k.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `out = a^T @ b` where `a` is k x m and `b` is k x n.
fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tensor {
    /// Matrix product. `self` is m x k, `rhs` is k x n.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape();
        let (k2, n) = rhs.shape();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let a = self.value();
        let b = rhs.value();
        let out = mm(&a, m, k, &b, n);
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                // dA = G @ B^T, dB = A^T @ G
                pa.accumulate_grad(&mm_nt(g, m, n, &b, k));
                pb.accumulate_grad(&mm_tn(&a, m, k, g, n));
            }),
        ))
    }

    /// Elementwise sum. When `rhs` is 1 x n and `self` is m x n, the row is
    /// broadcast down every row of `self` (bias addition); the broadcast
    /// gradient is the column-wise sum.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, n) = self.shape();
        let (rm, rn) = rhs.shape();
        let a = self.value();
        let b = rhs.value();
        let (pa, pb) = (self.clone(), rhs.clone());
        if rm == m && rn == n {
            let out = a.iter().zip(&b).map(|(&x, &y)| x + y).collect();
            Ok(Tensor::new_node(
                m,
                n,
                out,
                vec![self.clone(), rhs.clone()],
                Box::new(move |g| {
                    pa.accumulate_grad(g);
                    pb.accumulate_grad(g);
                }),
            ))
        } else if rm == 1 && rn == n {
            let mut out = a;
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(&b) {
                    *o += bv;
                }
            }
            Ok(Tensor::new_node(
                m,
                n,
                out,
                vec![self.clone(), rhs.clone()],
                Box::new(move |g| {
                    pa.accumulate_grad(g);
                    let mut colsum = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (c, &gv) in colsum.iter_mut().zip(row) {
                            *c += gv;
                        }
                    }
                    pb.accumulate_grad(&colsum);
                }),
            ))
        } else {
            Err(Error::Shape {
                op: "add",
                lhs: (m, n),
                rhs: (rm, rn),
            })
        }
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, n) = self.shape();
        if rhs.shape() != (m, n) {
            return Err(Error::Shape {
                op: "sub",
                lhs: (m, n),
                rhs: rhs.shape(),
            });
        }
        let a = self.value();
        let b = rhs.value();
        let out = a.iter().zip(&b).map(|(&x, &y)| x - y).collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                pb.accumulate_grad(&neg);
            }),
        ))
    }

    /// Hadamard product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, n) = self.shape();
        if rhs.shape() != (m, n) {
            return Err(Error::Shape {
                op: "elementwise_mul",
                lhs: (m, n),
                rhs: rhs.shape(),
            });
        }
        let a = self.value();
        let b = rhs.value();
        let out = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().zip(&b).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(&a).map(|(&gv, &av)| gv * av).collect();
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            }),
        ))
    }

    /// Multiply every element by a plain scalar.
    pub fn scale(&self, c: f64) -> Tensor {
        let (m, n) = self.shape();
        let out = self.value().iter().map(|&x| x * c).collect();
        let pa = self.clone();
        Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().map(|&v| v * c).collect();
                pa.accumulate_grad(&da);
            }),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.shape();
        let a = self.value();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        let pa = self.clone();
        Tensor::new_node(
            n,
            m,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                pa.accumulate_grad(&da);
            }),
        )
    }

    /// Concatenate along the last (column) dimension; all parts need the same
    /// row count.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let m = parts[0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            if p.rows() != m {
                return Err(Error::Shape {
                    op: "concat_lastdim",
                    lhs: (m, total),
                    rhs: p.shape(),
                });
            }
            widths.push(p.cols());
            total += p.cols();
        }
        let values: Vec<Vec<f64>> = parts.iter().map(|p| p.value()).collect();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let orow = &mut out[i * total..(i + 1) * total];
            let mut off = 0;
            for (v, &w) in values.iter().zip(&widths) {
                orow[off..off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let back_handles = handles.clone();
        let back_widths = widths.clone();
        Ok(Tensor::new_node(
            m,
            total,
            out,
            handles,
            Box::new(move |g| {
                let mut off = 0;
                for (p, &w) in back_handles.iter().zip(&back_widths) {
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    p.accumulate_grad(&dp);
                    off += w;
                }
            }),
        ))
    }

    /// Stack along the row dimension; all parts need the same column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat_rows of zero tensors");
        let n = parts[0].cols();
        let mut heights = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            if p.cols() != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: (total, n),
                    rhs: p.shape(),
                });
            }
            heights.push(p.rows());
            total += p.rows();
        }
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(&p.value());
        }
        let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let back_handles = handles.clone();
        let back_heights = heights.clone();
        Ok(Tensor::new_node(
            total,
            n,
            out,
            handles,
            Box::new(move |g| {
                let mut off = 0;
                for (p, &h) in back_handles.iter().zip(&back_heights) {
                    p.accumulate_grad(&g[off * n..(off + h) * n]);
                    off += h;
                }
            }),
        ))
    }

    /// Columns `start..end` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.shape();
        if start > end || end > n {
            return Err(Error::Index {
                op: "slice_cols",
                index: end,
                len: n,
            });
        }
        let w = end - start;
        let a = self.value();
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&a[i * n + start..i * n + end]);
        }
        let pa = self.clone();
        Ok(Tensor::new_node(
            m,
            w,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                pa.accumulate_grad(&da);
            }),
        ))
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.shape();
        if start > end || end > m {
            return Err(Error::Index {
                op: "slice_rows",
                index: end,
                len: m,
            });
        }
        let h = end - start;
        let out = self.value()[start * n..end * n].to_vec();
        let pa = self.clone();
        Ok(Tensor::new_node(
            h,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; m * n];
                da[start * n..end * n].copy_from_slice(g);
                pa.accumulate_grad(&da);
            }),
        ))
    }

    /// Row-wise softmax with max-subtraction, so additive masks of
    /// [`super::MASK_BLOCK`] underflow to exactly zero weight.
    pub fn softmax_rows(&self) -> Tensor {
        let (m, n) = self.shape();
        let a = self.value();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let y = out.clone();
        let pa = self.clone();
        Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                // dx = y * (g - <g, y>) per row
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in da[i * n..(i + 1) * n].iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - dot);
                    }
                }
                pa.accumulate_grad(&da);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let (m, n) = self.shape();
        let a = self.value();
        let out = a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let pa = self.clone();
        Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&a)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                pa.accumulate_grad(&da);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let (m, n) = self.shape();
        let out: Vec<f64> = self
            .value()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let y = out.clone();
        let pa = self.clone();
        Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&y)
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                pa.accumulate_grad(&da);
            }),
        )
    }

    /// Gather rows of `self` by index: row t of the result is row `ids[t]`.
    /// Doubles as the embedding lookup (table = `self`) and as a row gather
    /// on activations; the gradient scatter-adds back into the picked rows.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.shape();
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding_lookup",
                    index: id,
                    len: v,
                });
            }
        }
        let table = self.value();
        let m = ids.len();
        let mut out = vec![0.0; m * d];
        for (t, &id) in ids.iter().enumerate() {
            out[t * d..(t + 1) * d].copy_from_slice(&table[id * d..(id + 1) * d]);
        }
        let ids_owned = ids.to_vec();
        let pa = self.clone();
        Ok(Tensor::new_node(
            m,
            d,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; v * d];
                for (t, &id) in ids_owned.iter().enumerate() {
                    for (dst, &gv) in da[id * d..(id + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d])
                    {
                        *dst += gv;
                    }
                }
                pa.accumulate_grad(&da);
            }),
        ))
    }

    /// Per-row layer normalization with learned scale/shift (both 1 x n).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.shape();
        if gamma.shape() != (1, n) {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: (m, n),
                rhs: gamma.shape(),
            });
        }
        if beta.shape() != (1, n) {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: (m, n),
                rhs: beta.shape(),
            });
        }
        let a = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[i * n + j] = xh;
                out[i * n + j] = gv[j] * xh + bv[j];
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let nf = n as f64;
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let xrow = &xhat[i * n..(i + 1) * n];
                    let inv = inv_std[i];
                    // dxhat = g * gamma; fold its mean and its xhat-weighted
                    // mean back out of each coordinate.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = grow[j] * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xrow[j];
                    }
                    for j in 0..n {
                        let dxh = grow[j] * gv[j];
                        dx[i * n + j] =
                            inv * (dxh - sum_dxhat / nf - xrow[j] * sum_dxhat_xhat / nf);
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dbeta);
            }),
        ))
    }

    /// Negative log-softmax of a 1 x n logit row at `target`, as a 1 x 1 loss.
    pub fn cross_entropy_from_logits(&self, target: usize) -> Result<Tensor> {
        let (m, n) = self.shape();
        if m != 1 {
            return Err(Error::Shape {
                op: "cross_entropy_from_logits",
                lhs: (m, n),
                rhs: (1, n),
            });
        }
        if target >= n {
            return Err(Error::Index {
                op: "cross_entropy_from_logits",
                index: target,
                len: n,
            });
        }
        let logits = self.value();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let loss = max + sum.ln() - logits[target];
        let pa = self.clone();
        Ok(Tensor::new_node(
            1,
            1,
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let gs = g[0];
                let mut da: Vec<f64> = probs.iter().map(|&p| gs * p).collect();
                da[target] -= gs;
                pa.accumulate_grad(&da);
            }),
        ))
    }

    /// Sum of all elements as a 1 x 1 tensor.
    pub fn sum(&self) -> Tensor {
        let (m, n) = self.shape();
        let total: f64 = self.value().iter().sum();
        let pa = self.clone();
        Tensor::new_node(
            1,
            1,
            vec![total],
            vec![self.clone()],
            Box::new(move |g| {
                let da = vec![g[0]; m * n];
                pa.accumulate_grad(&da);
            }),
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// scales survivors by `1/(1-p)`. Only called in training mode.
    pub fn dropout(&self, p: f64, rng: &mut dyn rand::RngCore) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0, 1)");
        if p == 0.0 {
            return self.clone();
        }
        let (m, n) = self.shape();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value()
            .iter()
            .zip(&mask)
            .map(|(&x, &mk)| x * mk)
            .collect();
        let pa = self.clone();
        Tensor::new_node(
            m,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().zip(&mask).map(|(&gv, &mk)| gv * mk).collect();
                pa.accumulate_grad(&da);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::autodiff::{set_precision, Precision, Tensor, MASK_BLOCK};
    use crate::error::Error;

    fn f64_mode() {
        set_precision(Precision::F64);
    }

    #[test]
    fn matmul_forward_and_grads() {
        f64_mode();
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value(), vec![19.0, 22.0, 43.0, 50.0]);
        c.sum().backward().unwrap();
        // dA = ones @ B^T, dB = A^T @ ones
        assert_eq!(a.grad(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn add_broadcasts_bias_row() {
        f64_mode();
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(1, 2, vec![10.0, 20.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.value(), vec![11.0, 22.0, 13.0, 24.0]);
        c.sum().backward().unwrap();
        assert_eq!(a.grad(), vec![1.0; 4]);
        // Broadcast gradient is the column-wise sum.
        assert_eq!(b.grad(), vec![2.0, 2.0]);
    }

    #[test]
    fn add_rejects_other_shapes() {
        let a = Tensor::zeros(2, 2);
        let b = Tensor::zeros(2, 1);
        assert!(matches!(a.add(&b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn sub_and_mul_grads() {
        f64_mode();
        let a = Tensor::from_vec(1, 2, vec![3.0, 5.0]);
        let b = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let d = a.sub(&b).unwrap();
        assert_eq!(d.value(), vec![2.0, 3.0]);
        d.sum().backward().unwrap();
        assert_eq!(a.grad(), vec![1.0, 1.0]);
        assert_eq!(b.grad(), vec![-1.0, -1.0]);

        let x = Tensor::from_vec(1, 2, vec![3.0, 5.0]);
        let y = Tensor::from_vec(1, 2, vec![4.0, 6.0]);
        let p = x.mul(&y).unwrap();
        assert_eq!(p.value(), vec![12.0, 30.0]);
        p.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![4.0, 6.0]);
        assert_eq!(y.grad(), vec![3.0, 5.0]);
    }

    #[test]
    fn scale_scales_values_and_grads() {
        f64_mode();
        let x = Tensor::from_vec(1, 2, vec![1.0, -2.0]);
        let y = x.scale(3.0);
        assert_eq!(y.value(), vec![3.0, -6.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![3.0, 3.0]);
    }

    #[test]
    fn transpose_routes_grads_back() {
        f64_mode();
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = x.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.value(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        // Pick out t[2][0] = x[0][2]; its gradient must land at (0, 2).
        let picked = t.slice_rows(2, 3).unwrap().slice_cols(0, 1).unwrap();
        picked.backward().unwrap();
        assert_eq!(x.grad(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_cols_then_slice_is_identity() {
        f64_mode();
        let x = Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = x.slice_cols(0, 2).unwrap();
        let right = x.slice_cols(2, 4).unwrap();
        let back = Tensor::concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back.value(), x.value());

        let mid = x.slice_cols(1, 3).unwrap();
        mid.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_rows_splits_grads_by_part() {
        f64_mode();
        let a = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let b = Tensor::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), (3, 2));
        assert_eq!(c.value(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        c.slice_rows(1, 2).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad(), vec![0.0, 0.0]);
        assert_eq!(b.grad(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_out_of_range() {
        let x = Tensor::zeros(2, 3);
        assert!(matches!(
            x.slice_cols(1, 4),
            Err(Error::Index { op: "slice_cols", .. })
        ));
        assert!(matches!(
            x.slice_rows(0, 3),
            Err(Error::Index { op: "slice_rows", .. })
        ));
    }

    #[test]
    fn softmax_rows_and_grad() {
        f64_mode();
        let x = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        let y = x.softmax_rows();
        assert_eq!(y.value(), vec![0.5, 0.5]);
        // Upstream gradient [1, 0]: dx = y * (g - <g, y>).
        y.slice_cols(0, 1).unwrap().backward().unwrap();
        let g = x.grad();
        assert!((g[0] - 0.25).abs() < 1e-15);
        assert!((g[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_underflows_to_exact_zero() {
        f64_mode();
        let x = Tensor::from_vec(1, 3, vec![1.0, MASK_BLOCK, 2.0]);
        let y = x.softmax_rows().value();
        assert_eq!(y[1], 0.0);
        assert!((y[0] + y[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_zeroes_negative_grads() {
        f64_mode();
        let x = Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]);
        let y = x.relu();
        assert_eq!(y.value(), vec![0.0, 0.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        f64_mode();
        let x = Tensor::from_vec(1, 1, vec![0.0]);
        let y = x.sigmoid();
        assert_eq!(y.value(), vec![0.5]);
        y.backward().unwrap();
        assert_eq!(x.grad(), vec![0.25]);
    }

    #[test]
    fn embedding_lookup_accumulates_duplicate_rows() {
        f64_mode();
        let table = Tensor::from_vec(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let picked = table.embedding_lookup(&[1, 1, 2]).unwrap();
        assert_eq!(picked.value(), vec![2.0, 3.0, 2.0, 3.0, 4.0, 5.0]);
        picked.sum().backward().unwrap();
        assert_eq!(table.grad(), vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_lookup_rejects_bad_id() {
        let table = Tensor::zeros(3, 2);
        assert!(matches!(
            table.embedding_lookup(&[3]),
            Err(Error::Index { op: "embedding_lookup", .. })
        ));
    }

    #[test]
    fn layer_norm_normalizes_each_row() {
        f64_mode();
        let x = Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = Tensor::from_vec(1, 4, vec![2.0; 4]);
        let beta = Tensor::from_vec(1, 4, vec![1.0; 4]);
        let y = x.layer_norm(&gamma, &beta, 0.0).unwrap();
        // mean 2.5, population var 1.25
        let inv = 1.0 / 1.25f64.sqrt();
        let want: Vec<f64> = [-1.5, -0.5, 0.5, 1.5]
            .iter()
            .map(|d| 2.0 * d * inv + 1.0)
            .collect();
        for (got, want) in y.value().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_sum_is_insensitive_to_input() {
        // With gamma = 1 the output sums to beta's sum no matter the input,
        // so d(sum)/dx must vanish; dgamma picks up xhat and dbeta the count.
        f64_mode();
        let x = Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = Tensor::full(1, 4, 1.0);
        let beta = Tensor::zeros(1, 4);
        let y = x.layer_norm(&gamma, &beta, 0.0).unwrap();
        y.sum().backward().unwrap();
        for g in x.grad() {
            assert!(g.abs() < 1e-12);
        }
        let inv = 1.0 / 1.25f64.sqrt();
        for (g, d) in gamma.grad().iter().zip([-1.5, -0.5, 0.5, 1.5]) {
            assert!((g - d * inv).abs() < 1e-12);
        }
        assert_eq!(beta.grad(), vec![1.0; 4]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        f64_mode();
        let x = Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let loss = x.cross_entropy_from_logits(1).unwrap();
        assert!((loss.item() - 3.0f64.ln()).abs() < 1e-15);
        loss.backward().unwrap();
        // dlogits = softmax - onehot(target)
        let g = x.grad();
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g[1] + 2.0 / 3.0).abs() < 1e-15);
        assert!((g[2] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_target_and_shape() {
        let x = Tensor::zeros(1, 3);
        assert!(matches!(
            x.cross_entropy_from_logits(3),
            Err(Error::Index { .. })
        ));
        let m = Tensor::zeros(2, 3);
        assert!(matches!(
            m.cross_entropy_from_logits(0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sum_grad_is_ones() {
        f64_mode();
        let x = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let s = x.sum();
        assert_eq!(s.item(), 10.0);
        s.backward().unwrap();
        assert_eq!(x.grad(), vec![1.0; 4]);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        f64_mode();
        let x = Tensor::scalar(3.0);
        let y = x.add(&x).unwrap();
        assert_eq!(y.item(), 6.0);
        y.backward().unwrap();
        assert_eq!(x.grad(), vec![2.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let x = Tensor::zeros(2, 2);
        assert!(matches!(x.backward(), Err(Error::NotScalar { rows: 2, cols: 2 })));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        f64_mode();
        let x = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = x.dropout(0.0, &mut rng);
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn dropout_scales_survivors_and_masks_grads() {
        f64_mode();
        let n = 64;
        let x = Tensor::from_vec(1, n, vec![1.0; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = x.dropout(0.5, &mut rng);
        let v = y.value();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        assert!(v.iter().any(|&e| e == 0.0));
        assert!(v.iter().any(|&e| e == 2.0));
        y.sum().backward().unwrap();
        for (g, e) in x.grad().iter().zip(&v) {
            assert_eq!(*g, *e);
        }
    }

    #[test]
    fn f32_precision_rounds_stored_values() {
        set_precision(Precision::F32);
        let x = Tensor::from_vec(1, 1, vec![0.1]);
        assert_eq!(x.value()[0], 0.1f32 as f64);
        set_precision(Precision::F64);
        let y = Tensor::from_vec(1, 1, vec![0.1]);
        assert_eq!(y.value()[0], 0.1);
    }
}
