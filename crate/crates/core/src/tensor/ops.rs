//! Forward ops and their adjoints.
//!
//! Shapes are checked eagerly; violations panic with both shapes in the
//! message. All layouts are row-major, so `reshape` is a relabelling and
//! `concat`/`narrow` move contiguous blocks.

use std::rc::Rc;

use super::Tensor;
use crate::rng::Rng64;
use crate::scalar::Scalar;

// ── raw matmul kernels ──────────────────────────────────────────────

/// C = A[m,k] · B[k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    }
}

/// C = A[m,k] · B[n,k]ᵀ
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// C = A[p,m]ᵀ · B[p,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], p: usize, m: usize, n: usize, out: &mut [S]) {
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == S::zero() {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    }
}

fn batch_count(shape: &[usize]) -> usize {
    shape[..shape.len() - 2].iter().product()
}

// ── broadcasting helpers ────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "broadcast: incompatible shapes {a:?} and {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Flat index into a tensor of `shape` for the element that broadcasts to
/// position `coords` of the output.
fn bcast_index(coords: &[usize], shape: &[usize]) -> usize {
    let offset = coords.len() - shape.len();
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        let c = if shape[d] == 1 { 0 } else { coords[offset + d] };
        idx += c * stride;
        stride *= shape[d];
    }
    idx
}

fn for_each_coord(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; shape.len()];
    for flat in 0..numel {
        f(flat, &coords);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

/// Sums `grad` (laid out as `from`) down to `to` (broadcast-reduce).
fn reduce_to_shape<S: Scalar>(grad: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    if from == to {
        return grad.to_vec();
    }
    let to_numel: usize = to.iter().product();
    // Fast path: `to` is a trailing suffix of `from`.
    if to.len() <= from.len() && from[from.len() - to.len()..] == *to {
        let mut out = vec![S::zero(); to_numel];
        for chunk in grad.chunks_exact(to_numel) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o = *o + g;
            }
        }
        return out;
    }
    let mut out = vec![S::zero(); to_numel];
    for_each_coord(from, |flat, coords| {
        let ti = bcast_index(coords, to);
        out[ti] = out[ti] + grad[flat];
    });
    out
}

fn is_suffix(outer: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= outer.len() && outer[outer.len() - suffix.len()..] == *suffix
}

impl<S: Scalar> Tensor<S> {
    // ── matmul ──────────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// The right operand is either 2-D (shared across batches) or carries
    /// identical leading dimensions.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        let (ash, bsh) = (self.shape().to_vec(), rhs.shape().to_vec());
        assert!(
            ash.len() >= 2 && bsh.len() >= 2,
            "matmul: operands must be at least 2-D, got {ash:?} and {bsh:?}"
        );
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(
            k, bk,
            "matmul: inner dimensions disagree: lhs shape {ash:?}, rhs shape {bsh:?}"
        );
        let shared_rhs = bsh.len() == 2;
        if !shared_rhs {
            assert_eq!(
                ash[..ash.len() - 2],
                bsh[..bsh.len() - 2],
                "matmul: batch dimensions disagree: lhs shape {ash:?}, rhs shape {bsh:?}"
            );
        }
        let batches = batch_count(&ash);
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); batches * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..batches {
                let boff = if shared_rhs { 0 } else { bi * k * n };
                mm_nn(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[boff..boff + k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let (lhs, rhs_h) = (self.clone(), rhs.clone());
        Tensor::record("matmul", out, out_shape, vec![self.clone(), rhs.clone()], move |g| {
            let a = lhs.data();
            let b = rhs_h.data();
            if lhs.requires_grad() {
                lhs.accum_grad_with(a.len(), |da| {
                    for bi in 0..batches {
                        let boff = if shared_rhs { 0 } else { bi * k * n };
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b[boff..boff + k * n],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
            }
            if rhs_h.requires_grad() {
                rhs_h.accum_grad_with(b.len(), |db| {
                    for bi in 0..batches {
                        let boff = if shared_rhs { 0 } else { bi * k * n };
                        mm_tn(
                            &a[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[boff..boff + k * n],
                        );
                    }
                });
            }
        })
    }

    /// Batched `A · Bᵀ`: `[.., m, k] x [.., n, k] -> [.., m, n]`.
    pub fn matmul_nt(&self, rhs: &Tensor<S>) -> Tensor<S> {
        let (ash, bsh) = (self.shape().to_vec(), rhs.shape().to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2);
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (n, bk) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(
            k, bk,
            "matmul_nt: inner dimensions disagree: lhs shape {ash:?}, rhs shape {bsh:?}"
        );
        let shared_rhs = bsh.len() == 2;
        if !shared_rhs {
            assert_eq!(
                ash[..ash.len() - 2],
                bsh[..bsh.len() - 2],
                "matmul_nt: batch dimensions disagree: lhs shape {ash:?}, rhs shape {bsh:?}"
            );
        }
        let batches = batch_count(&ash);
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); batches * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..batches {
                let boff = if shared_rhs { 0 } else { bi * n * k };
                mm_nt(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[boff..boff + n * k],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let (lhs, rhs_h) = (self.clone(), rhs.clone());
        Tensor::record("matmul_nt", out, out_shape, vec![self.clone(), rhs.clone()], move |g| {
            let a = lhs.data();
            let b = rhs_h.data();
            if lhs.requires_grad() {
                lhs.accum_grad_with(a.len(), |da| {
                    for bi in 0..batches {
                        let boff = if shared_rhs { 0 } else { bi * n * k };
                        mm_nn(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b[boff..boff + n * k],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
            }
            if rhs_h.requires_grad() {
                rhs_h.accum_grad_with(b.len(), |db| {
                    for bi in 0..batches {
                        let boff = if shared_rhs { 0 } else { bi * n * k };
                        mm_tn(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &a[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut db[boff..boff + n * k],
                        );
                    }
                });
            }
        })
    }

    // ── elementwise and broadcast ───────────────────────────────────

    pub fn add(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.binary(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.binary(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.binary(rhs, "mul", |a, b| a * b)
    }

    fn binary(&self, rhs: &Tensor<S>, op: &'static str, f: fn(S, S) -> S) -> Tensor<S> {
        let ash = self.shape().to_vec();
        let bsh = rhs.shape().to_vec();
        let out_shape = broadcast_shape(&ash, &bsh);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![S::zero(); numel];
        {
            let a = self.data();
            let b = rhs.data();
            if ash == bsh {
                for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *o = f(x, y);
                }
            } else if out_shape == ash && is_suffix(&ash, &bsh) {
                let bl = b.len();
                for (ci, chunk) in a.chunks_exact(bl).enumerate() {
                    for (j, (&x, &y)) in chunk.iter().zip(b.iter()).enumerate() {
                        out[ci * bl + j] = f(x, y);
                    }
                }
            } else {
                for_each_coord(&out_shape, |flat, coords| {
                    out[flat] = f(a[bcast_index(coords, &ash)], b[bcast_index(coords, &bsh)]);
                });
            }
        }
        let (lhs, rhs_h) = (self.clone(), rhs.clone());
        let osh = out_shape.clone();
        Tensor::record(op, out, out_shape, vec![self.clone(), rhs.clone()], move |g| {
            // d(a+b) = (g, g); d(a-b) = (g, -g); d(a*b) = (g*b, g*a)
            if lhs.requires_grad() {
                let contrib: Vec<S> = match op {
                    "add" | "sub" => g.to_vec(),
                    _ => {
                        let b = rhs_h.data();
                        if osh == *rhs_h.shape() {
                            g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect()
                        } else {
                            let mut c = vec![S::zero(); g.len()];
                            for_each_coord(&osh, |flat, coords| {
                                c[flat] = g[flat] * b[bcast_index(coords, rhs_h.shape())];
                            });
                            c
                        }
                    }
                };
                let reduced = reduce_to_shape(&contrib, &osh, lhs.shape());
                lhs.accum_grad_with(lhs.numel(), |buf| {
                    for (o, &v) in buf.iter_mut().zip(&reduced) {
                        *o = *o + v;
                    }
                });
            }
            if rhs_h.requires_grad() {
                let contrib: Vec<S> = match op {
                    "add" => g.to_vec(),
                    "sub" => g.iter().map(|&v| -v).collect(),
                    _ => {
                        let a = lhs.data();
                        if osh == *lhs.shape() {
                            g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect()
                        } else {
                            let mut c = vec![S::zero(); g.len()];
                            for_each_coord(&osh, |flat, coords| {
                                c[flat] = g[flat] * a[bcast_index(coords, lhs.shape())];
                            });
                            c
                        }
                    }
                };
                let reduced = reduce_to_shape(&contrib, &osh, rhs_h.shape());
                rhs_h.accum_grad_with(rhs_h.numel(), |buf| {
                    for (o, &v) in buf.iter_mut().zip(&reduced) {
                        *o = *o + v;
                    }
                });
            }
        })
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v * c).collect();
        let parent = self.clone();
        Tensor::record("scale", out, self.shape().to_vec(), vec![self.clone()], move |g| {
            parent.accum_grad_with(parent.numel(), |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o = *o + gv * c;
                }
            });
        })
    }

    pub fn relu(&self) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v.max(S::zero())).collect();
        let parent = self.clone();
        Tensor::record("relu", out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = parent.data();
            parent.accum_grad_with(x.len(), |buf| {
                for i in 0..buf.len() {
                    if x[i] > S::zero() {
                        buf[i] = buf[i] + g[i];
                    }
                }
            });
        })
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<S> {
        let s: S = self.data().iter().copied().sum();
        let parent = self.clone();
        Tensor::record("sum_all", vec![s], vec![1], vec![self.clone()], move |g| {
            let gv = g[0];
            parent.accum_grad_with(parent.numel(), |buf| {
                for o in buf.iter_mut() {
                    *o = *o + gv;
                }
            });
        })
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.numel() as f64);
        let s: S = self.data().iter().copied().sum();
        let parent = self.clone();
        Tensor::record("mean_all", vec![s / n], vec![1], vec![self.clone()], move |g| {
            let gv = g[0] / n;
            parent.accum_grad_with(parent.numel(), |buf| {
                for o in buf.iter_mut() {
                    *o = *o + gv;
                }
            });
        })
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&self, axis: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "mean_axis: axis {axis} out of range for {shape:?}");
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let inv = S::one() / S::from_f64(axis_len as f64);
        let mut out = vec![S::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for a in 0..axis_len {
                    let base = (o * axis_len + a) * inner;
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + x[base + i] * inv;
                    }
                }
            }
        }
        let parent = self.clone();
        Tensor::record("mean_axis", out, out_shape, vec![self.clone()], move |g| {
            parent.accum_grad_with(parent.numel(), |buf| {
                for o in 0..outer {
                    for a in 0..axis_len {
                        let base = (o * axis_len + a) * inner;
                        for i in 0..inner {
                            buf[base + i] = buf[base + i] + g[o * inner + i] * inv;
                        }
                    }
                }
            });
        })
    }

    // ── softmax family ──────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Tensor<S> {
        self.softmax_inner(axis, None)
    }

    /// Softmax over the last axis with some keys excluded. Masked positions
    /// produce exactly zero and receive zero gradient. Rows with no
    /// unmasked key are a contract violation.
    pub fn softmax_masked(&self, mask: &[bool]) -> Tensor<S> {
        assert_eq!(
            mask.len(),
            self.numel(),
            "softmax_masked: mask length {} vs tensor numel {}",
            mask.len(),
            self.numel()
        );
        self.softmax_inner(self.shape().len() - 1, Some(mask))
    }

    fn softmax_inner(&self, axis: usize, mask: Option<&[bool]>) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![S::zero(); self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * axis_len + a) * inner + i;
                    let live = |a: usize| mask.map_or(true, |m| m[at(a)]);
                    let mut mx = S::neg_infinity();
                    for a in 0..axis_len {
                        if live(a) {
                            mx = mx.max(x[at(a)]);
                        }
                    }
                    assert!(
                        mx > S::neg_infinity(),
                        "softmax: all keys masked for a row (axis length {axis_len})"
                    );
                    let mut denom = S::zero();
                    for a in 0..axis_len {
                        if live(a) {
                            let e = (x[at(a)] - mx).exp();
                            out[at(a)] = e;
                            denom = denom + e;
                        }
                    }
                    for a in 0..axis_len {
                        if live(a) {
                            out[at(a)] = out[at(a)] / denom;
                        }
                    }
                }
            }
        }
        let parent = self.clone();
        let saved = out.clone();
        Tensor::record("softmax", out, shape, vec![self.clone()], move |g| {
            // dx = s * (g - <g, s>) per lane; masked entries stay zero.
            parent.accum_grad_with(parent.numel(), |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * axis_len + a) * inner + i;
                        let mut dot = S::zero();
                        for a in 0..axis_len {
                            dot = dot + g[at(a)] * saved[at(a)];
                        }
                        for a in 0..axis_len {
                            let idx = at(a);
                            buf[idx] = buf[idx] + saved[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        })
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Tensor<S> {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("layer_norm: scalar input");
        assert_eq!(
            gain.shape(),
            &[d],
            "layer_norm: gain shape {:?} vs feature width {d}",
            gain.shape()
        );
        assert_eq!(
            bias.shape(),
            &[d],
            "layer_norm: bias shape {:?} vs feature width {d}",
            bias.shape()
        );
        let rows = self.numel() / d;
        let mut out = vec![S::zero(); self.numel()];
        let mut inv_stds = vec![S::zero(); rows];
        let mut xhat = vec![S::zero(); self.numel()];
        {
            let x = self.data();
            let gw = gain.data();
            let bw = bias.data();
            let dn = S::from_f64(d as f64);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                let inv = S::one() / (var + eps).sqrt();
                inv_stds[r] = inv;
                for j in 0..d {
                    let xh = (row[j] - mean) * inv;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * gw[j] + bw[j];
                }
            }
        }
        let (xp, gp, bp) = (self.clone(), gain.clone(), bias.clone());
        Tensor::record(
            "layer_norm",
            out,
            shape,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let gw = gp.data();
                let dn = S::from_f64(d as f64);
                if gp.requires_grad() {
                    gp.accum_grad_with(d, |buf| {
                        for r in 0..rows {
                            for j in 0..d {
                                buf[j] = buf[j] + g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if bp.requires_grad() {
                    bp.accum_grad_with(d, |buf| {
                        for r in 0..rows {
                            for j in 0..d {
                                buf[j] = buf[j] + g[r * d + j];
                            }
                        }
                    });
                }
                if xp.requires_grad() {
                    xp.accum_grad_with(rows * d, |buf| {
                        for r in 0..rows {
                            let mut dxhat = vec![S::zero(); d];
                            let mut sum_dxhat = S::zero();
                            let mut sum_dxhat_xhat = S::zero();
                            for j in 0..d {
                                let v = g[r * d + j] * gw[j];
                                dxhat[j] = v;
                                sum_dxhat = sum_dxhat + v;
                                sum_dxhat_xhat = sum_dxhat_xhat + v * xhat[r * d + j];
                            }
                            let inv = inv_stds[r];
                            for j in 0..d {
                                let term = dn * dxhat[j] - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat;
                                buf[r * d + j] = buf[r * d + j] + inv / dn * term;
                            }
                        }
                    });
                }
            },
        )
    }

    // ── lookups and losses ──────────────────────────────────────────

    /// Row lookup into an embedding table `[rows, width]`.
    pub fn embedding(&self, ids: &[u32]) -> Tensor<S> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "embedding: table must be 2-D, got {shape:?}");
        let (rows, width) = (shape[0], shape[1]);
        for &id in ids {
            assert!(
                (id as usize) < rows,
                "embedding: id {id} out of range for table with {rows} rows"
            );
        }
        let mut out = vec![S::zero(); ids.len() * width];
        {
            let t = self.data();
            for (i, &id) in ids.iter().enumerate() {
                out[i * width..(i + 1) * width]
                    .copy_from_slice(&t[id as usize * width..(id as usize + 1) * width]);
            }
        }
        let parent = self.clone();
        let ids_owned: Vec<u32> = ids.to_vec();
        let n = ids.len();
        Tensor::record("embedding", out, vec![n, width], vec![self.clone()], move |g| {
            parent.accum_grad_with(rows * width, |buf| {
                for (i, &id) in ids_owned.iter().enumerate() {
                    let dst = &mut buf[id as usize * width..(id as usize + 1) * width];
                    for (o, &gv) in dst.iter_mut().zip(&g[i * width..(i + 1) * width]) {
                        *o = *o + gv;
                    }
                }
            });
        })
    }

    /// Mean token-level cross entropy over non-ignored positions.
    /// `self` is `[n, classes]`, `targets` has length `n`; positions whose
    /// target equals `ignore_index` contribute nothing.
    pub fn cross_entropy(&self, targets: &[u32], ignore_index: u32) -> Tensor<S> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "cross_entropy: logits must be 2-D, got {shape:?}");
        let (n, classes) = (shape[0], shape[1]);
        assert_eq!(
            targets.len(),
            n,
            "cross_entropy: {} targets for {} logit rows",
            targets.len(),
            n
        );
        let live: Vec<usize> = (0..n).filter(|&i| targets[i] != ignore_index).collect();
        assert!(
            !live.is_empty(),
            "cross_entropy: all-padding batch (no non-ignored targets)"
        );
        for &i in &live {
            assert!(
                (targets[i] as usize) < classes,
                "cross_entropy: target {} out of range for {} classes",
                targets[i],
                classes
            );
        }
        let count = S::from_f64(live.len() as f64);
        let mut loss = S::zero();
        {
            let x = self.data();
            for &i in &live {
                let row = &x[i * classes..(i + 1) * classes];
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln() + mx;
                loss = loss - (row[targets[i] as usize] - lse);
            }
        }
        loss = loss / count;
        let parent = self.clone();
        let targets_owned: Vec<u32> = targets.to_vec();
        Tensor::record("cross_entropy", vec![loss], vec![1], vec![self.clone()], move |g| {
            let x = parent.data();
            let g0 = g[0];
            parent.accum_grad_with(n * classes, |buf| {
                for i in 0..n {
                    if targets_owned[i] == ignore_index {
                        continue;
                    }
                    let row = &x[i * classes..(i + 1) * classes];
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let denom: S = row.iter().map(|&v| (v - mx).exp()).sum();
                    for c in 0..classes {
                        let p = (row[c] - mx).exp() / denom;
                        let y = if c == targets_owned[i] as usize { S::one() } else { S::zero() };
                        buf[i * classes + c] = buf[i * classes + c] + g0 * (p - y) / count;
                    }
                }
            });
        })
    }

    // ── shape manipulation ──────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Tensor<S> {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape: cannot view shape {:?} as {new_shape:?}",
            self.shape()
        );
        let parent = self.clone();
        Tensor::record(
            "reshape",
            self.to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            move |g| {
                parent.accum_grad_with(parent.numel(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
            },
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "narrow: axis {axis} out of range for {shape:?}");
        assert!(
            start + len <= shape[axis],
            "narrow: range {start}..{} exceeds axis {axis} of {shape:?}",
            start + len
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![S::zero(); outer * len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let src = (o * axis_len + start) * inner;
                let dst = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
            }
        }
        let parent = self.clone();
        Tensor::record("narrow", out, out_shape, vec![self.clone()], move |g| {
            parent.accum_grad_with(outer * axis_len * inner, |buf| {
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        buf[dst + j] = buf[dst + j] + g[src + j];
                    }
                }
            });
        })
    }

    /// Axis permutation: output axis `j` is input axis `perm[j]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert_eq!(perm.len(), shape.len(), "permute: perm {perm:?} vs shape {shape:?}");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "permute: invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; shape.len()];
        for d in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let map_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![S::zero(); self.numel()];
        let mut src_indices = vec![0usize; self.numel()];
        {
            let x = self.data();
            for_each_coord(&out_shape, |flat, coords| {
                let src: usize = coords.iter().zip(&map_strides).map(|(&c, &s)| c * s).sum();
                out[flat] = x[src];
                src_indices[flat] = src;
            });
        }
        let parent = self.clone();
        Tensor::record("permute", out, out_shape, vec![self.clone()], move |g| {
            parent.accum_grad_with(parent.numel(), |buf| {
                for (flat, &src) in src_indices.iter().enumerate() {
                    buf[src] = buf[src] + g[flat];
                }
            });
        })
    }

    /// Appends a new trailing axis of size `k`, repeating each element:
    /// `[..]` becomes `[.., k]`.
    pub fn expand_last(&self, k: usize) -> Tensor<S> {
        assert!(k > 0, "expand_last: k must be positive");
        let mut out_shape = self.shape().to_vec();
        out_shape.push(k);
        let mut out = vec![S::zero(); self.numel() * k];
        {
            let x = self.data();
            for (i, &v) in x.iter().enumerate() {
                out[i * k..(i + 1) * k].fill(v);
            }
        }
        let parent = self.clone();
        Tensor::record("expand_last", out, out_shape, vec![self.clone()], move |g| {
            parent.accum_grad_with(parent.numel(), |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    let mut acc = S::zero();
                    for j in 0..k {
                        acc = acc + g[i * k + j];
                    }
                    *o = *o + acc;
                }
            });
        })
    }

    /// Arbitrary index gather: `out[i] = self[indices[i]]` over flat indices.
    /// The index map is shared via `Rc` so callers can precompute it once.
    pub fn gather(&self, indices: Rc<Vec<usize>>, out_shape: &[usize]) -> Tensor<S> {
        let numel: usize = out_shape.iter().product();
        assert_eq!(
            indices.len(),
            numel,
            "gather: {} indices vs output shape {out_shape:?}",
            indices.len()
        );
        let src_len = self.numel();
        let mut out = vec![S::zero(); numel];
        {
            let x = self.data();
            for (o, &idx) in out.iter_mut().zip(indices.iter()) {
                debug_assert!(idx < src_len);
                *o = x[idx];
            }
        }
        let parent = self.clone();
        let idx = Rc::clone(&indices);
        Tensor::record("gather", out, out_shape.to_vec(), vec![self.clone()], move |g| {
            parent.accum_grad_with(src_len, |buf| {
                for (flat, &src) in idx.iter().enumerate() {
                    buf[src] = buf[src] + g[flat];
                }
            });
        })
    }

    /// Inverted dropout: keeps each element with probability `1-p` and
    /// rescales by `1/(1-p)`. `p == 0` is the identity (and draws nothing
    /// from the generator).
    pub fn dropout(&self, p: f64, rng: &mut Rng64) -> Tensor<S> {
        assert!((0.0..1.0).contains(&p), "dropout: rate {p} outside [0,1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let scale = S::from_f64(1.0 / keep);
        let mask: Vec<bool> = (0..self.numel()).map(|_| rng.coin(keep)).collect();
        let out: Vec<S> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * scale } else { S::zero() })
            .collect();
        let parent = self.clone();
        Tensor::record("dropout", out, self.shape().to_vec(), vec![self.clone()], move |g| {
            parent.accum_grad_with(parent.numel(), |buf| {
                for i in 0..buf.len() {
                    if mask[i] {
                        buf[i] = buf[i] + g[i] * scale;
                    }
                }
            });
        })
    }

    /// Row-wise argmax over the last axis (not differentiable).
    pub fn argmax_last(&self) -> Vec<usize> {
        let d = *self.shape().last().unwrap();
        self.data()
            .chunks_exact(d)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Concatenates tensors along `axis`. All other dimensions must agree.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Tensor<S> {
    assert!(!parts.is_empty(), "concat: no tensors given");
    let first = parts[0].shape().to_vec();
    assert!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
    for p in parts {
        let sh = p.shape();
        assert_eq!(sh.len(), first.len(), "concat: rank mismatch {sh:?} vs {first:?}");
        for (d, (&a, &b)) in sh.iter().zip(&first).enumerate() {
            assert!(
                d == axis || a == b,
                "concat: shapes {sh:?} and {first:?} differ off-axis"
            );
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let axis_total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let mut out = vec![S::zero(); outer * axis_total * inner];
    {
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            let mut dst = o * axis_total * inner;
            for (p, d) in parts.iter().zip(&datas) {
                let alen = p.shape()[axis];
                let src = o * alen * inner;
                out[dst..dst + alen * inner].copy_from_slice(&d[src..src + alen * inner]);
                dst += alen * inner;
            }
        }
    }
    let handles: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
    let parents = handles.clone();
    Tensor::record("concat", out, out_shape, parents, move |g| {
        for (pi, p) in handles.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let alen = p.shape()[axis];
            let before: usize = handles[..pi].iter().map(|q| q.shape()[axis]).sum();
            p.accum_grad_with(p.numel(), |buf| {
                for o in 0..outer {
                    let src = (o * axis_total + before) * inner;
                    let dst = o * alen * inner;
                    for j in 0..alen * inner {
                        buf[dst + j] = buf[dst + j] + g[src + j];
                    }
                }
            });
        }
    })
}
