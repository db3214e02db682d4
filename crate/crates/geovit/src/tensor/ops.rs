//! Tensor operations and their backward rules. Every op that touches a
//! tracked input records a node; untracked inputs stay off the tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{BackwardFn, NodeRef, Tape};
use crate::tensor::{dims_product, strides, Tensor};

/// True when `suffix` matches the trailing dimensions of `shape` (rank-0
/// matches anything).
fn is_suffix(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

/// Finds the common tape of the tracked parents, or None when all parents
/// are untracked. Mixing tensors from two tapes is a contract violation.
fn common_tape<T: Scalar>(
    op: &'static str,
    parents: &[&Tensor<T>],
) -> Result<Option<(Tape<T>, Vec<Option<usize>>)>> {
    let mut tape: Option<Tape<T>> = None;
    let mut ids = Vec::with_capacity(parents.len());
    for p in parents {
        match p.node_ref() {
            None => ids.push(None),
            Some(nr) => {
                if let Some(t) = &tape {
                    if !Tape::ptr_eq(t, &nr.tape) {
                        return Err(Error::contract(format!(
                            "{op}: operands recorded on different tapes"
                        )));
                    }
                } else {
                    tape = Some(nr.tape.clone());
                }
                ids.push(Some(nr.id));
            }
        }
    }
    Ok(tape.map(|t| (t, ids)))
}

fn attach<T: Scalar>(
    out: Tensor<T>,
    op: &'static str,
    tape: Tape<T>,
    ids: Vec<Option<usize>>,
    backward: BackwardFn<T>,
) -> Tensor<T> {
    let inputs: Vec<usize> = ids.into_iter().flatten().collect();
    let id = tape.record(op, inputs, out.numel(), backward);
    out.with_node(NodeRef { tape, id })
}

/// Aligns two operands for an elementwise op: equal shapes pass through,
/// otherwise the operand whose shape is a trailing suffix of the other is
/// broadcast up. Anything else is a shape error.
fn align_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.shape() == b.shape() {
        Ok((a.clone(), b.clone()))
    } else if is_suffix(b.shape(), a.shape()) {
        Ok((a.clone(), b.broadcast_to(a.shape())?))
    } else if is_suffix(a.shape(), b.shape()) {
        Ok((a.broadcast_to(b.shape())?, b.clone()))
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

mod kernels {
    use crate::scalar::Scalar;

    /// out += a x b for row-major a [m,k], b [k,n], out [m,n]. The caller
    /// zeroes `out` for a plain product; repeated calls accumulate, which the
    /// backward pass uses to sum over broadcast batches. The i-k-j loop keeps
    /// the inner loop reduction-free so it autovectorizes.
    pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }

    pub fn transpose2d<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * cols);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }
}

fn permute_raw<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut coords = vec![0usize; rank];
    for _ in 0..data.len() {
        let mut src = 0;
        for d in 0..rank {
            src += coords[d] * in_strides[perm[d]];
        }
        out.push(data[src]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = align_binary(self, rhs, "add")?;
        let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_data(a.shape().to_vec(), data);
        let Some((tape, ids)) = common_tape("add", &[&a, &b])? else {
            return Ok(out);
        };
        let tracked: Vec<bool> = ids.iter().map(Option::is_some).collect();
        let backward: BackwardFn<T> = Box::new(move |up| {
            tracked
                .iter()
                .filter(|&&t| t)
                .map(|_| up.to_vec())
                .collect()
        });
        Ok(attach(out, "add", tape, ids, backward))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = align_binary(self, rhs, "sub")?;
        let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_data(a.shape().to_vec(), data);
        let Some((tape, ids)) = common_tape("sub", &[&a, &b])? else {
            return Ok(out);
        };
        let (ta, tb) = (ids[0].is_some(), ids[1].is_some());
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut gs = Vec::with_capacity(2);
            if ta {
                gs.push(up.to_vec());
            }
            if tb {
                gs.push(up.iter().map(|&v| -v).collect());
            }
            gs
        });
        Ok(attach(out, "sub", tape, ids, backward))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = align_binary(self, rhs, "mul")?;
        let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_data(a.shape().to_vec(), data);
        let Some((tape, ids)) = common_tape("mul", &[&a, &b])? else {
            return Ok(out);
        };
        let (ta, tb) = (ids[0].is_some(), ids[1].is_some());
        let a_data = ta.then(|| b.data_arc());
        let b_data = tb.then(|| a.data_arc());
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut gs = Vec::with_capacity(2);
            if let Some(bv) = &a_data {
                gs.push(up.iter().zip(bv.iter()).map(|(&u, &v)| u * v).collect());
            }
            if let Some(av) = &b_data {
                gs.push(up.iter().zip(av.iter()).map(|(&u, &v)| u * v).collect());
            }
            gs
        });
        Ok(attach(out, "mul", tape, ids, backward))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let c = T::from_f64(factor);
        let data: Vec<T> = self.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_data(self.shape().to_vec(), data);
        let Some(nr) = self.node_ref() else { return out };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let backward: BackwardFn<T> =
            Box::new(move |up| vec![up.iter().map(|&v| v * c).collect()]);
        attach(out, "scale", tape, ids, backward)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    /// Repeats this tensor until it fills `target`; this tensor's shape must
    /// be a trailing suffix of `target`. The backward rule sums the repeats.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        if self.shape() == target {
            return Ok(self.clone());
        }
        if !is_suffix(self.shape(), target) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
        let n = self.numel();
        let total = dims_product(target);
        let rep = total / n;
        let mut data = Vec::with_capacity(total);
        for _ in 0..rep {
            data.extend_from_slice(self.data());
        }
        let out = Tensor::from_data(target.to_vec(), data);
        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut g = vec![T::zero(); n];
            for chunk in up.chunks_exact(n) {
                for (a, &b) in g.iter_mut().zip(chunk) {
                    *a = *a + b;
                }
            }
            vec![g]
        });
        Ok(attach(out, "broadcast_to", tape, ids, backward))
    }

    /// Matrix product. Accepts [m,k]x[k,n], batched [b,m,k]x[b,k,n], and the
    /// mixed forms where one operand is shared across the batch.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (ar, br) = (self.rank(), rhs.rank());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if !matches!((ar, br), (2, 2) | (3, 3) | (3, 2) | (2, 3)) {
            return Err(mismatch());
        }
        let a_batched = ar == 3;
        let b_batched = br == 3;
        let (m, ka) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (kb, n) = (rhs.shape()[br - 2], rhs.shape()[br - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        if a_batched && b_batched && self.shape()[0] != rhs.shape()[0] {
            return Err(mismatch());
        }
        let k = ka;
        let batch = if a_batched {
            self.shape()[0]
        } else if b_batched {
            rhs.shape()[0]
        } else {
            1
        };

        let a_buf = self.data_arc();
        let b_buf = rhs.data_arc();
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_off = if a_batched { bi * m * k } else { 0 };
            let b_off = if b_batched { bi * k * n } else { 0 };
            kernels::matmul_nn(
                &a_buf[a_off..a_off + m * k],
                &b_buf[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape = if a_batched || b_batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let out = Tensor::from_data(out_shape, data);

        let Some((tape, ids)) = common_tape("matmul", &[self, rhs])? else {
            return Ok(out);
        };
        let (ta, tb) = (ids[0].is_some(), ids[1].is_some());
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut gs = Vec::with_capacity(2);
            if ta {
                // dA = dC x B^T per batch, summed when A is shared
                let mut da = vec![T::zero(); a_buf.len()];
                for bi in 0..batch {
                    let b_off = if b_batched { bi * k * n } else { 0 };
                    let bt = kernels::transpose2d(&b_buf[b_off..b_off + k * n], k, n);
                    let a_off = if a_batched { bi * m * k } else { 0 };
                    kernels::matmul_nn(
                        &up[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        m,
                        n,
                        k,
                        &mut da[a_off..a_off + m * k],
                    );
                }
                gs.push(da);
            }
            if tb {
                // dB = A^T x dC per batch, summed when B is shared
                let mut db = vec![T::zero(); b_buf.len()];
                for bi in 0..batch {
                    let a_off = if a_batched { bi * m * k } else { 0 };
                    let at = kernels::transpose2d(&a_buf[a_off..a_off + m * k], m, k);
                    let b_off = if b_batched { bi * k * n } else { 0 };
                    kernels::matmul_nn(
                        &at,
                        &up[bi * m * n..(bi + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut db[b_off..b_off + k * n],
                    );
                }
                gs.push(db);
            }
            gs
        });
        Ok(attach(out, "matmul", tape, ids, backward))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        if new_shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "reshape: dimensions must be positive, got {new_shape:?}"
            )));
        }
        if dims_product(new_shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let mut out = self.detach();
        out.shape = new_shape.to_vec();
        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let backward: BackwardFn<T> = Box::new(move |up| vec![up.to_vec()]);
        Ok(attach(out, "reshape", tape, ids, backward))
    }

    /// Reorders axes: output axis `d` takes input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| {
                if p >= rank || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::contract(format!(
                "permute: {perm:?} is not a permutation of axes for rank {rank}"
            )));
        }
        let (out_shape, data) = permute_raw(self.data(), self.shape(), perm);
        let out = Tensor::from_data(out_shape.clone(), data);
        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let mut inverse = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inverse[p] = d;
        }
        let backward: BackwardFn<T> =
            Box::new(move |up| vec![permute_raw(up, &out_shape, &inverse).1]);
        Ok(attach(out, "permute", tape, ids, backward))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::contract(format!(
                "transpose: needs rank >= 2, got shape {:?}",
                self.shape()
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other dimensions must match.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat: needs at least one input"));
        };
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::contract(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        for p in parts {
            let same = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let outer = dims_product(&first.shape()[..axis]);
        let inner = dims_product(&first.shape()[axis + 1..]);
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;

        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let base = o * len * inner;
                data.extend_from_slice(&p.data()[base..base + len * inner]);
            }
        }
        let out = Tensor::from_data(out_shape, data);

        let Some((tape, ids)) = common_tape("concat", parts)? else {
            return Ok(out);
        };
        let tracked: Vec<bool> = ids.iter().map(Option::is_some).collect();
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &len in &lens {
            offsets.push(acc);
            acc += len;
        }
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut gs = Vec::new();
            for (j, &len) in lens.iter().enumerate() {
                if !tracked[j] {
                    continue;
                }
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * total + offsets[j]) * inner;
                    g.extend_from_slice(&up[base..base + len * inner]);
                }
                gs.push(g);
            }
            gs
        });
        Ok(attach(out, "concat", tape, ids, backward))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::contract(format!(
                "slice: axis {axis} out of range for rank {rank}"
            )));
        }
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::contract(format!(
                "slice: range {start}..{} out of bounds for axis of size {dim}",
                start + len
            )));
        }
        let outer = dims_product(&self.shape()[..axis]);
        let inner = dims_product(&self.shape()[axis + 1..]);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;

        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let out = Tensor::from_data(out_shape, data);

        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let total = self.numel();
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut g = vec![T::zero(); total];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&up[src..src + len * inner]);
            }
            vec![g]
        });
        Ok(attach(out, "slice", tape, ids, backward))
    }

    /// Sum over every element down to a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let total = self
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let out = Tensor::scalar(total);
        let Some(nr) = self.node_ref() else { return out };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |up| vec![vec![up[0]; n]]);
        attach(out, "sum_all", tape, ids, backward)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, dropping it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::contract(format!(
                "sum_axis: axis {axis} out of range for rank {rank}"
            )));
        }
        let len = self.shape()[axis];
        let outer = dims_product(&self.shape()[..axis]);
        let inner = dims_product(&self.shape()[axis + 1..]);
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);

        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] = data[dst + i] + self.data()[base + i];
                }
            }
        }
        let out = Tensor::from_data(out_shape, data);

        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut g = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    g.extend_from_slice(&up[o * inner..(o + 1) * inner]);
                }
            }
            vec![g]
        });
        Ok(attach(out, "sum_axis", tape, ids, backward))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::contract(format!(
                "mean_axis: axis {axis} out of range for rank {}",
                self.rank()
            )))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::contract(format!(
                "softmax: axis {axis} out of range for rank {rank}"
            )));
        }
        let len = self.shape()[axis];
        let outer = dims_product(&self.shape()[..axis]);
        let inner = dims_product(&self.shape()[axis + 1..]);

        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = x[idx(0)];
                for j in 1..len {
                    if x[idx(j)] > mx {
                        mx = x[idx(j)];
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[idx(j)] = data[idx(j)] / sum;
                }
            }
        }
        let out = Tensor::from_data(self.shape().to_vec(), data);

        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let y = out.data_arc();
        let backward: BackwardFn<T> = Box::new(move |up| {
            // dx_j = y_j * (up_j - sum_k up_k y_k) per lane
            let mut g = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot = dot + up[idx(j)] * y[idx(j)];
                    }
                    for j in 0..len {
                        g[idx(j)] = y[idx(j)] * (up[idx(j)] - dot);
                    }
                }
            }
            vec![g]
        });
        Ok(attach(out, "softmax", tape, ids, backward))
    }

    /// log(softmax(x)) along `axis`, computed via a log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::contract(format!(
                "log_softmax: axis {axis} out of range for rank {rank}"
            )));
        }
        let len = self.shape()[axis];
        let outer = dims_product(&self.shape()[..axis]);
        let inner = dims_product(&self.shape()[axis + 1..]);

        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = x[idx(0)];
                for j in 1..len {
                    if x[idx(j)] > mx {
                        mx = x[idx(j)];
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    sum = sum + (x[idx(j)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for j in 0..len {
                    data[idx(j)] = x[idx(j)] - lse;
                }
            }
        }
        let out = Tensor::from_data(self.shape().to_vec(), data);

        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let y = out.data_arc();
        let backward: BackwardFn<T> = Box::new(move |up| {
            // dx_j = up_j - exp(y_j) * sum_k up_k per lane
            let mut g = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let mut s = T::zero();
                    for j in 0..len {
                        s = s + up[idx(j)];
                    }
                    for j in 0..len {
                        g[idx(j)] = up[idx(j)] - y[idx(j)].exp() * s;
                    }
                }
            }
            vec![g]
        });
        Ok(attach(out, "log_softmax", tape, ids, backward))
    }

    /// Normalizes over the last axis to zero mean and unit variance, then
    /// applies the learned affine pair: `y = gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(Error::contract("layer_norm: input must have rank >= 1"));
        }
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let d = self.shape()[self.rank() - 1];
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let epst = T::from_f64(eps);
        let dt = T::from_f64(d as f64);

        let mut xhat = vec![T::zero(); x.len()];
        let mut inv = vec![T::zero(); rows];
        let mut data = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dt;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dt;
            let iv = T::one() / (var + epst).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let xh = (row[j] - mean) * iv;
                xhat[r * d + j] = xh;
                data[r * d + j] = g[j] * xh + b[j];
            }
        }
        let out = Tensor::from_data(self.shape().to_vec(), data);

        let Some((tape, ids)) = common_tape("layer_norm", &[self, gamma, beta])? else {
            return Ok(out);
        };
        let (tx, tg, tb) = (ids[0].is_some(), ids[1].is_some(), ids[2].is_some());
        let xhat = Arc::new(xhat);
        let inv = Arc::new(inv);
        let gamma_buf = gamma.data_arc();
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut gs = Vec::with_capacity(3);
            if tx {
                let mut dx = vec![T::zero(); xhat.len()];
                for r in 0..rows {
                    let base = r * d;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dxh = up[base + j] * gamma_buf[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[base + j];
                    }
                    m1 = m1 / dt;
                    m2 = m2 / dt;
                    for j in 0..d {
                        let dxh = up[base + j] * gamma_buf[j];
                        dx[base + j] = inv[r] * (dxh - m1 - xhat[base + j] * m2);
                    }
                }
                gs.push(dx);
            }
            if tg {
                let mut dg = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] = dg[j] + up[r * d + j] * xhat[r * d + j];
                    }
                }
                gs.push(dg);
            }
            if tb {
                let mut db = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        db[j] = db[j] + up[r * d + j];
                    }
                }
                gs.push(db);
            }
            gs
        });
        Ok(attach(out, "layer_norm", tape, ids, backward))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let sqrt_2_over_pi = T::from_f64(0.797_884_560_802_865_4);
        let coef = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| {
                let inner = sqrt_2_over_pi * (v + coef * v * v * v);
                half * v * (T::one() + inner.tanh())
            })
            .collect();
        let out = Tensor::from_data(self.shape().to_vec(), data);
        let Some(nr) = self.node_ref() else { return out };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let x = self.data_arc();
        let three = T::from_f64(3.0);
        let backward: BackwardFn<T> = Box::new(move |up| {
            let g = up
                .iter()
                .zip(x.iter())
                .map(|(&u, &v)| {
                    let t = (sqrt_2_over_pi * (v + coef * v * v * v)).tanh();
                    let dgdx = sqrt_2_over_pi * (T::one() + three * coef * v * v);
                    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * dgdx;
                    u * dy
                })
                .collect();
            vec![g]
        });
        attach(out, "gelu", tape, ids, backward)
    }

    /// Splits an image [bands, H, W] into non-overlapping `patch x patch`
    /// tiles and flattens each tile band-major, producing
    /// [(H/patch)*(W/patch), patch*patch*bands] tokens in row-major tile
    /// order. H and W must be divisible by `patch`.
    pub fn extract_patches(&self, patch: usize) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return Err(Error::contract(format!(
                "extract_patches: expected [bands, H, W], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::config(format!(
                "extract_patches: image {h}x{w} not divisible into {patch}x{patch} tiles"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let tokens = gh * gw;
        let feat = patch * patch * c;

        let mut map = Vec::with_capacity(tokens * feat);
        for py in 0..gh {
            for px in 0..gw {
                for b in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            map.push(b * h * w + (py * patch + dy) * w + (px * patch + dx));
                        }
                    }
                }
            }
        }
        let x = self.data();
        let data: Vec<T> = map.iter().map(|&s| x[s]).collect();
        let out = Tensor::from_data(vec![tokens, feat], data);

        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let map = Arc::new(map);
        let total = self.numel();
        let backward: BackwardFn<T> = Box::new(move |up| {
            // the mapping is a bijection, so scatter without accumulation
            let mut g = vec![T::zero(); total];
            for (o, &s) in map.iter().enumerate() {
                g[s] = up[o];
            }
            vec![g]
        });
        Ok(attach(out, "extract_patches", tape, ids, backward))
    }

    /// Bilinear upsampling of [bands, H, W] by an integer factor, sampling
    /// with half-pixel centers (corners are not pinned).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return Err(Error::contract(format!(
                "upsample_bilinear: expected [bands, H, W], got {:?}",
                self.shape()
            )));
        }
        if factor == 0 {
            return Err(Error::config("upsample_bilinear: factor must be positive"));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);

        let table = |n: usize, on: usize| -> Vec<(usize, usize, T)> {
            (0..on)
                .map(|o| {
                    let src = ((o as f64 + 0.5) / factor as f64 - 0.5)
                        .clamp(0.0, (n - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n - 1);
                    (lo, hi, T::from_f64(src - lo as f64))
                })
                .collect()
        };
        let rows = Arc::new(table(h, oh));
        let cols = Arc::new(table(w, ow));

        let x = self.data();
        let mut data = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                let o_base = ch * oh * ow + oy * ow;
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let top = plane[y0 * w + x0]
                        + wx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                    let bot = plane[y1 * w + x0]
                        + wx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                    data[o_base + ox] = top + wy * (bot - top);
                }
            }
        }
        let out = Tensor::from_data(vec![c, oh, ow], data);

        let Some(nr) = self.node_ref() else { return Ok(out) };
        let tape = nr.tape.clone();
        let ids = vec![Some(nr.id)];
        let total = self.numel();
        let backward: BackwardFn<T> = Box::new(move |up| {
            let mut g = vec![T::zero(); total];
            for ch in 0..c {
                let g_plane = &mut g[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                    let o_base = ch * oh * ow + oy * ow;
                    for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                        let u = up[o_base + ox];
                        let one = T::one();
                        g_plane[y0 * w + x0] =
                            g_plane[y0 * w + x0] + u * (one - wy) * (one - wx);
                        g_plane[y0 * w + x1] = g_plane[y0 * w + x1] + u * (one - wy) * wx;
                        g_plane[y1 * w + x0] = g_plane[y1 * w + x0] + u * wy * (one - wx);
                        g_plane[y1 * w + x1] = g_plane[y1 * w + x1] + u * wy * wx;
                    }
                }
            }
            vec![g]
        });
        Ok(attach(out, "upsample_bilinear", tape, ids, backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tape};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims_product(shape))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_data(shape.to_vec(), data)
    }

    /// Central finite differences against the recorded backward pass. The
    /// scalar objective is a fixed random weighting of the op output so every
    /// output element influences the loss.
    fn fd_check<F>(inputs: &[Tensor<f64>], f: F)
    where
        F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    {
        let probe = f(inputs);
        let w = randt(probe.shape(), 0xC0FFEE);
        let lossf = |xs: &[Tensor<f64>]| f(xs).mul(&w).unwrap().sum_all().item().unwrap();

        let tape = Tape::new();
        let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.watch(t)).collect();
        let loss = f(&tracked).mul(&w).unwrap().sum_all();
        let grads = backward(&loss).unwrap();

        let h = 1e-5;
        for (i, x) in inputs.iter().enumerate() {
            let g = grads.wrt(&tracked[i]).expect("missing gradient");
            for j in 0..x.numel() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut dp = x.to_vec();
                let mut dm = x.to_vec();
                dp[j] += h;
                dm[j] -= h;
                plus[i] = Tensor::from_data(x.shape().to_vec(), dp);
                minus[i] = Tensor::from_data(x.shape().to_vec(), dm);
                let num = (lossf(&plus) - lossf(&minus)) / (2.0 * h);
                let ana = g.data()[j];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
                assert!(
                    rel < 1e-5,
                    "input {i} coord {j}: analytic {ana} vs numeric {num} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn add_and_mul_values() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 33.0, 44.0]);
        assert_eq!(a.mul(&b).unwrap().to_vec(), vec![10.0, 40.0, 90.0, 160.0]);
        assert_eq!(a.sub(&b).unwrap().to_vec(), vec![-9.0, -18.0, -27.0, -36.0]);
    }

    #[test]
    fn suffix_broadcast_add() {
        let a = Tensor::from_vec(vec![2, 3], vec![0.0, 0.0, 0.0, 10.0, 10.0, 10.0]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 11.0, 12.0, 13.0]);
        // scalar broadcasts anywhere, reversed order broadcasts the left side
        let s = Tensor::scalar(5.0);
        assert_eq!(s.add(&a).unwrap().shape(), &[2, 3]);
        // [2] is not a suffix of [2,3]
        let bad = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn matmul_2x2_oracle() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
        let v = Tensor::<f64>::zeros(&[3]);
        assert!(a.matmul(&v).is_err());
        let b1 = Tensor::<f64>::zeros(&[2, 3, 4]);
        let b2 = Tensor::<f64>::zeros(&[3, 4, 5]);
        assert!(b1.matmul(&b2).is_err());
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let a = randt(&[3, 2, 4], 1);
        let b = randt(&[3, 4, 5], 2);
        let c = a.matmul(&b).unwrap();
        for bi in 0..3 {
            let ai = a.slice(0, bi, 1).unwrap().reshape(&[2, 4]).unwrap();
            let bi_t = b.slice(0, bi, 1).unwrap().reshape(&[4, 5]).unwrap();
            let ci = ai.matmul(&bi_t).unwrap();
            let got = c.slice(0, bi, 1).unwrap().reshape(&[2, 5]).unwrap();
            assert!(ci.max_abs_diff(&got) < 1e-12);
        }
    }

    #[test]
    fn softmax_known_values() {
        let x = Tensor::from_vec(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);

        let u = Tensor::<f64>::zeros(&[5]).softmax(0).unwrap();
        for &v in u.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randt(&[4, 7], 3).scale(30.0);
        let y = x.softmax(1).unwrap();
        for r in 0..4 {
            let s: f64 = y.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant_and_monotone() {
        let x = randt(&[6], 4);
        let shifted = x.add(&Tensor::scalar(100.0)).unwrap();
        let y1 = x.softmax(0).unwrap();
        let y2 = shifted.softmax(0).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-12);
        // larger input, larger output
        for i in 0..6 {
            for j in 0..6 {
                if x.data()[i] > x.data()[j] {
                    assert!(y1.data()[i] > y1.data()[j]);
                }
            }
        }
    }

    #[test]
    fn log_softmax_uniform() {
        let y = Tensor::<f64>::zeros(&[4]).log_softmax(0).unwrap();
        for &v in y.data() {
            assert!((v + 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_invalid_axis() {
        assert!(Tensor::<f64>::zeros(&[3]).softmax(1).is_err());
        assert!(Tensor::<f64>::zeros(&[3]).log_softmax(2).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 3.0, -5.0, 5.0]).unwrap();
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        assert!((y.get(&[0, 0]) + 1.0).abs() < 1e-5);
        assert!((y.get(&[0, 1]) - 1.0).abs() < 1e-5);
        assert!((y.get(&[1, 0]) + 1.0).abs() < 1e-5);

        let gamma2 = Tensor::full(&[2], 2.0);
        let beta2 = Tensor::full(&[2], 1.0);
        let z = x.layer_norm(&gamma2, &beta2, 1e-12).unwrap();
        assert!((z.get(&[0, 0]) + 1.0).abs() < 1e-5); // 2*(-1)+1
        assert!((z.get(&[0, 1]) - 3.0).abs() < 1e-5); // 2*(+1)+1
    }

    #[test]
    fn layer_norm_validates() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(x.layer_norm(&g, &b, 1e-5).is_err());
        let g3 = Tensor::<f64>::ones(&[3]);
        assert!(x.layer_norm(&g3, &b, 0.0).is_err());
        assert!(x.layer_norm(&g3, &b, 1e-5).is_ok());
    }

    #[test]
    fn gelu_known_values() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![0.0, 1.0, 10.0]).unwrap();
        let y = x.gelu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841192).abs() < 1e-5);
        assert!((y.data()[2] - 10.0).abs() < 1e-6);
        let neg = Tensor::<f64>::from_vec(vec![1], vec![-10.0]).unwrap().gelu();
        assert!(neg.data()[0].abs() < 1e-6);
    }

    #[test]
    fn extract_patches_band_major_layout() {
        // 2 bands, 4x4 image, patch 2 -> 4 tokens of 8 features
        let data: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let img = Tensor::from_vec(vec![2, 4, 4], data).unwrap();
        let tok = img.extract_patches(2).unwrap();
        assert_eq!(tok.shape(), &[4, 8]);
        // token 0 = top-left patch: band0 {0,1,4,5}, band1 {16,17,20,21}
        assert_eq!(
            tok.data()[0..8],
            [0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]
        );
        // token 3 = bottom-right patch
        assert_eq!(
            tok.data()[24..32],
            [10.0, 11.0, 14.0, 15.0, 26.0, 27.0, 30.0, 31.0]
        );
    }

    #[test]
    fn extract_patches_sized_one_is_pixels() {
        let img = randt(&[3, 2, 2], 5);
        let tok = img.extract_patches(1).unwrap();
        assert_eq!(tok.shape(), &[4, 3]);
        for p in 0..4 {
            for b in 0..3 {
                assert_eq!(tok.get(&[p, b]), img.get(&[b, p / 2, p % 2]));
            }
        }
    }

    #[test]
    fn extract_patches_rejects_indivisible() {
        let img = Tensor::<f64>::zeros(&[1, 6, 6]);
        let err = img.extract_patches(4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn upsample_2x2_to_4x4_oracle() {
        let img = Tensor::<f64>::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = img.upsample_bilinear(2).unwrap();
        assert_eq!(up.shape(), &[1, 4, 4]);
        let expect = [
            1.0, 1.25, 1.75, 2.0, //
            1.5, 1.75, 2.25, 2.5, //
            2.5, 2.75, 3.25, 3.5, //
            3.0, 3.25, 3.75, 4.0,
        ];
        for (got, want) in up.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let img = Tensor::<f64>::full(&[2, 3, 3], 7.5);
        let up = img.upsample_bilinear(4).unwrap();
        for &v in up.data() {
            assert!((v - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = randt(&[2, 3], 6);
        let b = randt(&[2, 5], 7);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
        assert!(c.slice(1, 0, 3).unwrap().max_abs_diff(&a) < 1e-15);
        assert!(c.slice(1, 3, 5).unwrap().max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn concat_and_slice_validate() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 3]);
        assert!(Tensor::concat(&[&a, &b], 1).is_err());
        assert!(Tensor::concat(&[&a, &b], 0).is_ok());
        assert!(Tensor::<f64>::concat(&[], 0).is_err());
        assert!(a.slice(0, 1, 2).is_err());
        assert!(a.slice(2, 0, 1).is_err());
        assert!(a.slice(1, 0, 0).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = randt(&[2, 3, 4], 8);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-15);
        assert!(x.permute(&[0, 0, 1]).is_err());
        assert!(x.permute(&[0, 1]).is_err());
    }

    #[test]
    fn transpose_swaps_last_two() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = x.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(Tensor::<f64>::zeros(&[3]).transpose().is_err());
    }

    #[test]
    fn reductions_match_manual_sums() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(x.sum_all().item().unwrap(), 21.0);
        assert_eq!(x.mean_all().item().unwrap(), 3.5);
        assert_eq!(x.sum_axis(0).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().to_vec(), vec![6.0, 15.0]);
        assert_eq!(x.mean_axis(1).unwrap().to_vec(), vec![2.0, 5.0]);
        assert_eq!(x.sum_axis(1).unwrap().shape(), &[2]);
        assert!(x.sum_axis(2).is_err());
    }

    #[test]
    fn reshape_shares_and_validates() {
        let x = randt(&[2, 6], 9);
        let y = x.reshape(&[3, 4]).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(x.reshape(&[5, 2]).is_err());
        let s = x.sum_all().reshape(&[1, 1]).unwrap();
        assert_eq!(s.shape(), &[1, 1]);
    }

    #[test]
    fn broadcast_to_tiles_buffer() {
        let b = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let t = b.broadcast_to(&[3, 2]).unwrap();
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(b.broadcast_to(&[2, 3]).is_err());
    }

    // finite-difference checks, one per backward rule

    #[test]
    fn fd_elementwise() {
        fd_check(&[randt(&[2, 3], 10), randt(&[2, 3], 11)], |x| {
            x[0].add(&x[1]).unwrap()
        });
        fd_check(&[randt(&[2, 3], 12), randt(&[2, 3], 13)], |x| {
            x[0].sub(&x[1]).unwrap()
        });
        fd_check(&[randt(&[2, 3], 14), randt(&[2, 3], 15)], |x| {
            x[0].mul(&x[1]).unwrap()
        });
        fd_check(&[randt(&[4], 16)], |x| x[0].scale(-2.5));
        fd_check(&[randt(&[5], 17)], |x| x[0].gelu());
    }

    #[test]
    fn fd_broadcast_paths() {
        fd_check(&[randt(&[2, 3], 18), randt(&[3], 19)], |x| {
            x[0].add(&x[1]).unwrap()
        });
        fd_check(&[randt(&[3], 20), randt(&[2, 3], 21)], |x| {
            x[0].mul(&x[1]).unwrap()
        });
        fd_check(&[randt(&[2], 22)], |x| x[0].broadcast_to(&[4, 2]).unwrap());
        fd_check(&[randt(&[], 23), randt(&[2, 2], 24)], |x| {
            x[0].sub(&x[1]).unwrap()
        });
    }

    #[test]
    fn fd_matmul_all_forms() {
        fd_check(&[randt(&[3, 4], 25), randt(&[4, 2], 26)], |x| {
            x[0].matmul(&x[1]).unwrap()
        });
        fd_check(&[randt(&[2, 3, 4], 27), randt(&[2, 4, 2], 28)], |x| {
            x[0].matmul(&x[1]).unwrap()
        });
        fd_check(&[randt(&[2, 3, 4], 29), randt(&[4, 2], 30)], |x| {
            x[0].matmul(&x[1]).unwrap()
        });
        fd_check(&[randt(&[3, 4], 31), randt(&[2, 4, 2], 32)], |x| {
            x[0].matmul(&x[1]).unwrap()
        });
    }

    #[test]
    fn fd_shape_ops() {
        fd_check(&[randt(&[2, 6], 33)], |x| x[0].reshape(&[3, 4]).unwrap());
        fd_check(&[randt(&[2, 3, 4], 34)], |x| x[0].permute(&[2, 0, 1]).unwrap());
        fd_check(&[randt(&[3, 4], 35)], |x| x[0].transpose().unwrap());
        fd_check(&[randt(&[2, 3], 36), randt(&[2, 2], 37)], |x| {
            Tensor::concat(&[&x[0], &x[1]], 1).unwrap()
        });
        fd_check(&[randt(&[4, 3], 38), randt(&[2, 3], 39)], |x| {
            Tensor::concat(&[&x[0], &x[1]], 0).unwrap()
        });
        fd_check(&[randt(&[5, 3], 40)], |x| x[0].slice(0, 1, 3).unwrap());
        fd_check(&[randt(&[3, 6], 41)], |x| x[0].slice(1, 2, 2).unwrap());
    }

    #[test]
    fn fd_reductions() {
        fd_check(&[randt(&[3, 4], 42)], |x| x[0].sum_all());
        fd_check(&[randt(&[3, 4], 43)], |x| x[0].mean_all());
        fd_check(&[randt(&[3, 4], 44)], |x| x[0].sum_axis(0).unwrap());
        fd_check(&[randt(&[3, 4], 45)], |x| x[0].sum_axis(1).unwrap());
        fd_check(&[randt(&[2, 3, 4], 46)], |x| x[0].sum_axis(1).unwrap());
        fd_check(&[randt(&[3, 4], 47)], |x| x[0].mean_axis(1).unwrap());
    }

    #[test]
    fn fd_normalizers() {
        fd_check(&[randt(&[3, 5], 48)], |x| x[0].softmax(1).unwrap());
        fd_check(&[randt(&[3, 5], 49)], |x| x[0].softmax(0).unwrap());
        fd_check(&[randt(&[2, 3, 4], 50)], |x| x[0].softmax(1).unwrap());
        fd_check(&[randt(&[3, 5], 51)], |x| x[0].log_softmax(1).unwrap());
        fd_check(&[randt(&[2, 4], 52)], |x| x[0].log_softmax(0).unwrap());
        fd_check(
            &[randt(&[3, 4], 53), randt(&[4], 54), randt(&[4], 55)],
            |x| x[0].layer_norm(&x[1], &x[2], 1e-5).unwrap(),
        );
    }

    #[test]
    fn fd_spatial_ops() {
        fd_check(&[randt(&[2, 4, 4], 56)], |x| x[0].extract_patches(2).unwrap());
        fd_check(&[randt(&[1, 3, 3], 57)], |x| {
            x[0].upsample_bilinear(2).unwrap()
        });
        fd_check(&[randt(&[2, 2, 3], 58)], |x| {
            x[0].upsample_bilinear(3).unwrap()
        });
    }

    #[test]
    fn fd_composite_graph() {
        // a small end-to-end graph exercising fan-out and mixed ops
        fd_check(&[randt(&[4, 3], 59), randt(&[3, 3], 60)], |x| {
            let h = x[0].matmul(&x[1]).unwrap().gelu();
            let s = h.softmax(1).unwrap();
            h.mul(&s).unwrap().sum_axis(0).unwrap()
        });
    }

    #[test]
    fn forward_is_deterministic() {
        let a = randt(&[16, 16], 61);
        let b = randt(&[16, 16], 62);
        let r1 = a.matmul(&b).unwrap().softmax(1).unwrap();
        let r2 = a.matmul(&b).unwrap().softmax(1).unwrap();
        assert_eq!(r1.to_vec(), r2.to_vec());
    }
}
