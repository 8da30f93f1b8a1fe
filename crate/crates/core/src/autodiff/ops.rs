//! Differentiable primitive operations on [`Var`].

use std::sync::Arc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{broadcast_zip, sum_to_shape, MatMut, MatRef, Scalar, Tensor};

#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip("add", &a, &b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                vec![
                    mask[0].then(|| sum_to_shape(g, &sa)),
                    mask[1].then(|| sum_to_shape(g, &sb)),
                ]
            }),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip("sub", &a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                vec![
                    mask[0].then(|| sum_to_shape(g, &sa)),
                    mask[1].then(|| sum_to_shape(&g.map(|x| -x), &sb)),
                ]
            }),
        ))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip("mul", &a, &b, |x, y| x * y)?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                let ga = mask[0].then(|| {
                    let full = broadcast_zip("mul", g, &b, |x, y| x * y).expect("broadcast checked in forward");
                    sum_to_shape(&full, a.shape())
                });
                let gb = mask[1].then(|| {
                    let full = broadcast_zip("mul", g, &a, |x, y| x * y).expect("broadcast checked in forward");
                    sum_to_shape(&full, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = Arc::new(broadcast_zip("div", &a, &b, |x, y| x / y)?);
        let out_saved = out.clone();
        Ok(self.tape.push(
            Arc::unwrap_or_clone(out),
            &[self, other],
            Box::new(move |g, mask| {
                let ga = mask[0].then(|| {
                    let full = broadcast_zip("div", g, &b, |x, y| x / y).expect("broadcast checked in forward");
                    sum_to_shape(&full, a.shape())
                });
                let gb = mask[1].then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let q = broadcast_zip("div", &out_saved, &b, |x, y| x / y).expect("broadcast checked in forward");
                    let full = broadcast_zip("mul", g, &q, |x, y| -x * y).expect("same shape");
                    sum_to_shape(&full, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Multiplication by a constant.
    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().scale(s);
        self.tape
            .push(out, &[self], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn exp(self) -> Var<'t, T> {
        let out = Arc::new(self.value().map(T::exp));
        let saved = out.clone();
        self.tape.push(
            Arc::unwrap_or_clone(out),
            &[self],
            Box::new(move |g, _| {
                let gx = broadcast_zip("exp", g, &saved, |x, y| x * y).expect("same shape");
                vec![Some(gx)]
            }),
        )
    }

    pub fn log(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(T::ln);
        self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let gx = broadcast_zip("log", g, &x, |gv, xv| gv / xv).expect("same shape");
                vec![Some(gx)]
            }),
        )
    }

    /// `x` where positive, `alpha * x` otherwise. The slope at exactly zero
    /// is `alpha`.
    pub fn leaky_relu(self, alpha: T) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { alpha * v });
        self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let gx = broadcast_zip(
                    "leaky_relu",
                    g,
                    &x,
                    |gv, xv| if xv > T::zero() { gv } else { alpha * gv },
                )
                .expect("same shape");
                vec![Some(gx)]
            }),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum_axis({axis}) on shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let src = x.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
            }),
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = Tensor::clone(&x).reshape(shape)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(orig.clone()).expect("numel preserved"))]),
        ))
    }

    /// Flattens all axes after the first.
    pub fn flatten(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape([n, rest])
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose2()?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.transpose2().expect("rank 2"))]),
        ))
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            T::one(),
            MatRef::new(a.data(), m, k),
            MatRef::new(b.data(), k, n),
            T::zero(),
            MatMut::new(&mut out, m, n),
        );
        let out = Tensor::new([m, n], out)?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                let gm = MatRef::new(g.data(), m, n);
                let ga = mask[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        T::one(),
                        gm,
                        MatRef::new(b.data(), k, n).t(),
                        T::zero(),
                        MatMut::new(&mut ga, m, k),
                    );
                    Tensor::new([m, k], ga).expect("shape")
                });
                let gb = mask[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        T::one(),
                        MatRef::new(a.data(), m, k).t(),
                        gm,
                        T::zero(),
                        MatMut::new(&mut gb, k, n),
                    );
                    Tensor::new([k, n], gb).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map `x·Wᵀ + b` with `x: [M, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = &bias {
            let bv = b.value();
            if bv.shape() != [n] {
                return Err(Error::shape("linear bias", bv.shape(), &[n]));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            T::one(),
            MatRef::new(x.data(), m, k),
            MatRef::new(w.data(), n, k).t(),
            T::one(),
            MatMut::new(&mut out, m, n),
        );
        let out = Tensor::new([m, n], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.push(
            out,
            &parents,
            Box::new(move |g, mask| {
                let gm = MatRef::new(g.data(), m, n);
                let gx = mask[0].then(|| {
                    let mut gx = vec![T::zero(); m * k];
                    T::gemm(
                        T::one(),
                        gm,
                        MatRef::new(w.data(), n, k),
                        T::zero(),
                        MatMut::new(&mut gx, m, k),
                    );
                    Tensor::new([m, k], gx).expect("shape")
                });
                let gw = mask[1].then(|| {
                    let mut gw = vec![T::zero(); n * k];
                    T::gemm(
                        T::one(),
                        gm.t(),
                        MatRef::new(x.data(), m, k),
                        T::zero(),
                        MatMut::new(&mut gw, n, k),
                    );
                    Tensor::new([n, k], gw).expect("shape")
                });
                let mut grads = vec![gx, gw];
                if mask.len() == 3 {
                    grads.push(mask[2].then(|| {
                        let mut gb = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::new([n], gb).expect("shape")
                    }));
                }
                grads
            }),
        ))
    }

    /// Euclidean norm over the last axis, keeping it with extent 1. The
    /// gradient at a zero vector is taken as zero.
    pub fn norm_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let Some(&c) = shape.last() else {
            return Err(Error::invalid("norm_last on a rank-0 tensor"));
        };
        if c == 0 {
            return Err(Error::invalid("norm_last over an empty axis"));
        }
        let norms: Vec<T> = x
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank >= 1") = 1;
        let out = Tensor::new(out_shape, norms.clone())?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); x.numel()];
                for (r, (row, dst)) in x.data().chunks(c).zip(gx.chunks_mut(c)).enumerate() {
                    let nrm = norms[r];
                    if nrm > T::zero() {
                        let s = g.data()[r] / nrm;
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d = s * v;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
            }),
        ))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || start > end || end > x.shape()[1] {
            return Err(Error::invalid(format!(
                "slice_cols({start}, {end}) on shape {:?}",
                x.shape()
            )));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for row in x.data().chunks(cols) {
            out.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new([rows, w], out)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); rows * cols];
                for (dst, src) in gx.chunks_mut(cols).zip(g.data().chunks(w)) {
                    dst[start..end].copy_from_slice(src);
                }
                vec![Some(Tensor::new([rows, cols], gx).expect("shape"))]
            }),
        ))
    }

    /// `[N, C, H, W]` → `[N·H·W, C]`: one row per spatial position.
    pub fn channels_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::invalid(format!(
                "channels_last expects rank 4, got {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        let src = x.data();
        for b in 0..n {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    out[(b * hw + p) * c + ch] = v;
                }
            }
        }
        let out = Tensor::new([n * hw, c], out)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        let plane = &mut gx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (p, d) in plane.iter_mut().enumerate() {
                            *d = gd[(b * hw + p) * c + ch];
                        }
                    }
                }
                vec![Some(Tensor::new([n, c, h, w], gx).expect("shape"))]
            }),
        ))
    }

    /// Negated Euclidean distance between every row of `self: [N, C]` and
    /// every row of `other: [K, C]`, giving `[N, K]`. Gradients at
    /// coincident points are zero.
    pub fn neg_pairwise_distance(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::shape("pairwise_distance", a.shape(), b.shape()));
        }
        let (n, k, c) = (a.shape()[0], b.shape()[0], a.shape()[1]);
        let dist: Vec<T> = pairwise_sq_distance(a.data(), b.data(), n, k, c)
            .into_iter()
            .map(|d| d.sqrt())
            .collect();
        let out = Tensor::new([n, k], dist.iter().map(|&d| -d).collect())?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                let mut ga = vec![T::zero(); n * c];
                let mut gb = vec![T::zero(); k * c];
                for i in 0..n {
                    for j in 0..k {
                        let d = dist[i * k + j];
                        if d <= T::zero() {
                            continue;
                        }
                        // d(-‖a-b‖)/da = -(a-b)/‖a-b‖
                        let s = -g.data()[i * k + j] / d;
                        for q in 0..c {
                            let diff = a.data()[i * c + q] - b.data()[j * c + q];
                            ga[i * c + q] += s * diff;
                            gb[j * c + q] -= s * diff;
                        }
                    }
                }
                vec![
                    mask[0].then(|| Tensor::new([n, c], ga).expect("shape")),
                    mask[1].then(|| Tensor::new([k, c], gb).expect("shape")),
                ]
            }),
        ))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Cosine similarity between every row of `self: [N, C]` and every row
    /// of `other: [K, C]`, giving `[N, K]`.
    ///
    /// The norm product is clamped below by `eps`, so a zero row scores 0
    /// against everything and scaling either argument by a power of two
    /// leaves the result bit-identical.
    pub fn cosine_similarity(self, other: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
        }
        let (n, k, c) = (a.shape()[0], b.shape()[0], a.shape()[1]);
        let row_norms = |t: &Tensor<T>| -> Vec<T> {
            t.data()
                .chunks(c.max(1))
                .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect()
        };
        let (na, nb) = (row_norms(&a), row_norms(&b));
        let mut dots = vec![T::zero(); n * k];
        T::gemm(
            T::one(),
            MatRef::new(a.data(), n, c),
            MatRef::new(b.data(), k, c).t(),
            T::zero(),
            MatMut::new(&mut dots, n, k),
        );
        let mut denom = vec![T::zero(); n * k];
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            for j in 0..k {
                let d = (na[i] * nb[j]).max(eps);
                denom[i * k + j] = d;
                out[i * k + j] = dots[i * k + j] / d;
            }
        }
        let cos = out.clone();
        let out = Tensor::new([n, k], out)?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                let gd = g.data();
                let mut ga = vec![T::zero(); n * c];
                let mut gb = vec![T::zero(); k * c];
                for i in 0..n {
                    let ra = &a.data()[i * c..(i + 1) * c];
                    for j in 0..k {
                        let idx = i * k + j;
                        let gv = gd[idx];
                        if gv == T::zero() {
                            continue;
                        }
                        let rb = &b.data()[j * c..(j + 1) * c];
                        let d = denom[idx];
                        let clamped = na[i] * nb[j] < eps;
                        // unclamped: d cos/da = b/(|a||b|) - cos·a/|a|²
                        let (sa, sb) = if clamped || na[i] == T::zero() || nb[j] == T::zero() {
                            (T::zero(), T::zero())
                        } else {
                            (cos[idx] / (na[i] * na[i]), cos[idx] / (nb[j] * nb[j]))
                        };
                        let inv = gv / d;
                        if mask[0] {
                            for q in 0..c {
                                ga[i * c + q] += inv * rb[q] - gv * sa * ra[q];
                            }
                        }
                        if mask[1] {
                            for q in 0..c {
                                gb[j * c + q] += inv * ra[q] - gv * sb * rb[q];
                            }
                        }
                    }
                }
                vec![
                    mask[0].then(|| Tensor::new([n, c], ga).expect("shape")),
                    mask[1].then(|| Tensor::new([k, c], gb).expect("shape")),
                ]
            }),
        ))
    }

    /// Sums `[G·R, C]` over the `R` rows of each of `groups` groups, giving
    /// `[G, C]`.
    ///
    /// Every output entry is accumulated in ascending value order, so the
    /// result is bit-identical under any reordering of rows within a group.
    pub fn group_sum(self, groups: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || groups == 0 || !x.shape()[0].is_multiple_of(groups) {
            return Err(Error::invalid(format!("group_sum({groups}) on shape {:?}", x.shape())));
        }
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let per = rows / groups;
        let src = x.data();
        let mut out = vec![T::zero(); groups * c];
        let mut buf = Vec::with_capacity(per);
        for gi in 0..groups {
            for ch in 0..c {
                buf.clear();
                buf.extend((0..per).map(|r| src[(gi * per + r) * c + ch]));
                buf.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap_or(std::cmp::Ordering::Equal));
                out[gi * c + ch] = buf.iter().fold(T::zero(), |acc, &v| acc + v);
            }
        }
        let out = Tensor::new([groups, c], out)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); rows * c];
                for (r, dst) in gx.chunks_mut(c).enumerate() {
                    dst.copy_from_slice(&g.data()[(r / per) * c..(r / per + 1) * c]);
                }
                vec![Some(Tensor::new([rows, c], gx).expect("shape"))]
            }),
        ))
    }
}

/// Squared Euclidean distances between rows of `a: [n, c]` and `b: [k, c]`,
/// computed directly (no expansion trick) so equal rows give exactly zero.
pub fn pairwise_sq_distance<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let ra = &a[i * c..(i + 1) * c];
        for j in 0..k {
            let rb = &b[j * c..(j + 1) * c];
            out.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum());
        }
    }
    out
}
