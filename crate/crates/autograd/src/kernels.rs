//! Forward numeric kernels used by graph operations.

use crate::{Float, Tensor};

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn expand<F: Float>(x: &Tensor<F>, axis: usize, n: usize) -> Tensor<F> {
    let s = x.shape();
    assert!(axis <= s.len(), "expand axis {axis} out of range for {s:?}");
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis..].iter().product();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let row = &x.data()[o * inner..(o + 1) * inner];
        for _ in 0..n {
            out.extend_from_slice(row);
        }
    }
    let mut shape = s[..axis].to_vec();
    shape.push(n);
    shape.extend_from_slice(&s[axis..]);
    Tensor::new(shape, out)
}

pub(crate) fn sum_axis<F: Float>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![F::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

pub(crate) fn softmax<F: Float>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![F::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut m = F::neg_infinity();
            for j in 0..n {
                m = m.max(d[idx(j)]);
            }
            let mut s = F::zero();
            for j in 0..n {
                let e = (d[idx(j)] - m).exp();
                out[idx(j)] = e;
                s += e;
            }
            for j in 0..n {
                out[idx(j)] = out[idx(j)] / s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn transpose_last2<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape();
    assert!(s.len() >= 2, "transpose needs rank >= 2, got {s:?}");
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch: usize = s[..r - 2].iter().product();
    let d = x.data();
    let mut out = vec![F::zero(); d.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = d[base + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

/// Dimensions of `op(a) op(b)` for rank-2 or batched rank-3 operands.
pub(crate) fn gemm_dims(
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> (usize, usize, usize, usize) {
    assert_eq!(a.len(), b.len(), "gemm rank mismatch {a:?} vs {b:?}");
    assert!(a.len() == 2 || a.len() == 3, "gemm expects rank 2 or 3");
    let batch = if a.len() == 3 {
        assert_eq!(a[0], b[0], "gemm batch mismatch {a:?} vs {b:?}");
        a[0]
    } else {
        1
    };
    let r = a.len();
    let (m, ka) = if ta { (a[r - 1], a[r - 2]) } else { (a[r - 2], a[r - 1]) };
    let (kb, n) = if tb { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    assert_eq!(ka, kb, "gemm inner dimension mismatch {a:?} (t={ta}) vs {b:?} (t={tb})");
    (batch, m, ka, n)
}

pub(crate) fn gemm<F: Float>(a: &Tensor<F>, b: &Tensor<F>, ta: bool, tb: bool) -> Tensor<F> {
    let (batch, m, k, n) = gemm_dims(a.shape(), b.shape(), ta, tb);
    let mut out = vec![F::zero(); batch * m * n];
    // Row/column strides of op(a) (m x k) and op(b) (k x n) within one batch item.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for bi in 0..batch {
        let pa = &a.data()[bi * m * k..(bi + 1) * m * k];
        let pb = &b.data()[bi * k * n..(bi + 1) * k * n];
        let pc = &mut out[bi * m * n..(bi + 1) * m * n];
        // SAFETY: slices have exactly the extents described by the strides.
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                pa.as_ptr(),
                rsa,
                csa,
                pb.as_ptr(),
                rsb,
                csb,
                F::zero(),
                pc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let mut shape = if a.shape().len() == 3 { vec![batch] } else { vec![] };
    shape.push(m);
    shape.push(n);
    Tensor::new(shape, out)
}

pub(crate) fn concat_last<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let sa = a.shape();
    let sb = b.shape();
    assert_eq!(sa.len(), sb.len(), "concat rank mismatch");
    let r = sa.len();
    assert_eq!(sa[..r - 1], sb[..r - 1], "concat leading dims mismatch");
    let (da, db) = (sa[r - 1], sb[r - 1]);
    let rows = a.numel() / da.max(1);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..rows {
        out.extend_from_slice(&a.data()[i * da..(i + 1) * da]);
        out.extend_from_slice(&b.data()[i * db..(i + 1) * db]);
    }
    let mut shape = sa.to_vec();
    shape[r - 1] = da + db;
    Tensor::new(shape, out)
}

pub(crate) fn slice_last<F: Float>(x: &Tensor<F>, start: usize, len: usize) -> Tensor<F> {
    let s = x.shape();
    let r = s.len();
    let d = s[r - 1];
    assert!(start + len <= d, "slice {start}..{} out of range {d}", start + len);
    let rows = x.numel() / d.max(1);
    let mut out = Vec::with_capacity(rows * len);
    for i in 0..rows {
        out.extend_from_slice(&x.data()[i * d + start..i * d + start + len]);
    }
    let mut shape = s.to_vec();
    shape[r - 1] = len;
    Tensor::new(shape, out)
}

pub(crate) fn pad_last<F: Float>(x: &Tensor<F>, start: usize, total: usize) -> Tensor<F> {
    let s = x.shape();
    let r = s.len();
    let len = s[r - 1];
    assert!(start + len <= total, "pad target too small");
    let rows = x.numel() / len.max(1);
    let mut out = vec![F::zero(); rows * total];
    for i in 0..rows {
        out[i * total + start..i * total + start + len]
            .copy_from_slice(&x.data()[i * len..(i + 1) * len]);
    }
    let mut shape = s.to_vec();
    shape[r - 1] = total;
    Tensor::new(shape, out)
}

/// `(k, k, cin, cout)` to `(k, k, cout, cin)` with both spatial axes reversed.
pub(crate) fn flip_transpose<F: Float>(w: &Tensor<F>) -> Tensor<F> {
    let s = w.shape();
    assert_eq!(s.len(), 4, "conv kernel must be rank 4");
    let (kh, kw, ci, co) = (s[0], s[1], s[2], s[3]);
    let d = w.data();
    let mut out = vec![F::zero(); d.len()];
    for a in 0..kh {
        for b in 0..kw {
            for c in 0..ci {
                for o in 0..co {
                    let src = ((a * kw + b) * ci + c) * co + o;
                    let dst = (((kh - 1 - a) * kw + (kw - 1 - b)) * co + o) * ci + c;
                    out[dst] = d[src];
                }
            }
        }
    }
    Tensor::new(vec![kh, kw, co, ci], out)
}

/// Unfolds one `(h, w, c)` image into `(h*w, k*k*c)` patches with zero padding.
fn im2col<F: Float>(img: &[F], h: usize, w: usize, c: usize, k: usize, col: &mut [F]) {
    let p = (k - 1) / 2;
    let row_len = k * k * c;
    for i in 0..h {
        for j in 0..w {
            let dst = &mut col[(i * w + j) * row_len..(i * w + j + 1) * row_len];
            for a in 0..k {
                let y = i as isize + a as isize - p as isize;
                for b in 0..k {
                    let x = j as isize + b as isize - p as isize;
                    let off = (a * k + b) * c;
                    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                        dst[off..off + c].fill(F::zero());
                    } else {
                        let src = ((y as usize) * w + x as usize) * c;
                        dst[off..off + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> (usize, usize, usize, usize, usize, usize) {
    assert_eq!(x.len(), 4, "conv input must be (batch, h, w, c), got {x:?}");
    assert_eq!(w.len(), 4, "conv kernel must be (k, k, cin, cout), got {w:?}");
    assert_eq!(w[0], w[1], "square kernels only");
    assert_eq!(w[0] % 2, 1, "odd kernel size required for same padding");
    assert_eq!(x[3], w[2], "conv channel mismatch {x:?} vs {w:?}");
    (x[0], x[1], x[2], x[3], w[0], w[3])
}

/// Stride-1 same-padded cross-correlation over NHWC input.
pub(crate) fn conv2d<F: Float>(x: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
    let (n, h, wd, ci, k, co) = conv_dims(x.shape(), w.shape());
    let hw = h * wd;
    let row_len = k * k * ci;
    let mut col = vec![F::zero(); hw * row_len];
    let mut out = vec![F::zero(); n * hw * co];
    for b in 0..n {
        im2col(&x.data()[b * hw * ci..(b + 1) * hw * ci], h, wd, ci, k, &mut col);
        let dst = &mut out[b * hw * co..(b + 1) * hw * co];
        // SAFETY: col is (hw x row_len), w is (row_len x co), dst is (hw x co).
        unsafe {
            F::gemm(
                hw,
                row_len,
                co,
                F::one(),
                col.as_ptr(),
                row_len as isize,
                1,
                w.data().as_ptr(),
                co as isize,
                1,
                F::zero(),
                dst.as_mut_ptr(),
                co as isize,
                1,
            );
        }
    }
    Tensor::new(vec![n, h, wd, co], out)
}

/// Gradient of `conv2d(x, w)` with respect to `w`, given output gradient `g`.
pub(crate) fn conv_weight_grad<F: Float>(x: &Tensor<F>, g: &Tensor<F>, k: usize) -> Tensor<F> {
    let xs = x.shape();
    let gs = g.shape();
    assert_eq!(xs.len(), 4);
    assert_eq!(gs.len(), 4);
    assert_eq!(xs[..3], gs[..3], "conv weight grad spatial mismatch");
    let (n, h, wd, ci, co) = (xs[0], xs[1], xs[2], xs[3], gs[3]);
    let hw = h * wd;
    let row_len = k * k * ci;
    let mut col = vec![F::zero(); hw * row_len];
    let mut out = vec![F::zero(); row_len * co];
    for b in 0..n {
        im2col(&x.data()[b * hw * ci..(b + 1) * hw * ci], h, wd, ci, k, &mut col);
        let gb = &g.data()[b * hw * co..(b + 1) * hw * co];
        // SAFETY: colᵀ is (row_len x hw), gb is (hw x co), out is (row_len x co).
        unsafe {
            F::gemm(
                row_len,
                hw,
                co,
                F::one(),
                col.as_ptr(),
                1,
                row_len as isize,
                gb.as_ptr(),
                co as isize,
                1,
                F::one(),
                out.as_mut_ptr(),
                co as isize,
                1,
            );
        }
    }
    Tensor::new(vec![k, k, ci, co], out)
}
