//! Plain slice kernels shared by the tape's forward and backward rules.

use super::real::Real;

/// `(outer, len, inner)` split of a row-major shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// `a[m,k] = g[m,n] * b[k,n]^T`
pub(crate) fn matmul_bt<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `b[k,n] = a[m,k]^T * g[m,n]`
pub(crate) fn matmul_at<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gj) in orow.iter_mut().zip(grow) {
                *o = *o + aip * gj;
            }
        }
    }
    out
}

/// Reorders axes of a row-major array; `perm[i]` is the source axis of output axis `i`.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn flip<T: Real>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..len {
            let src = (o * len + i) * inner;
            let dst = (o * len + (len - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[inline]
    fn src(&self, y: usize, ky: usize, x: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (y + ky * self.dilation) as isize - self.padding as isize;
        let ix = (x + kx * self.dilation) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

/// Cross-correlation `[cin,h,w] x [cout,cin,kh,kw] -> [cout,oh,ow]`.
pub(crate) fn conv2d<T: Real>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.cout * g.oh * g.ow];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kv = kernel[((o * g.cin + c) * g.kh + ky) * g.kw + kx];
                    for y in 0..g.oh {
                        for x in 0..g.ow {
                            if let Some((iy, ix)) = g.src(y, ky, x, kx) {
                                out[(o * g.oh + y) * g.ow + x] =
                                    out[(o * g.oh + y) * g.ow + x] + kv * input[(c * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Real>(input: &[T], kernel: &[T], grad: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let mut gin = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kidx = ((o * g.cin + c) * g.kh + ky) * g.kw + kx;
                    let kv = kernel[kidx];
                    let mut acc = T::zero();
                    for y in 0..g.oh {
                        for x in 0..g.ow {
                            if let Some((iy, ix)) = g.src(y, ky, x, kx) {
                                let gy = grad[(o * g.oh + y) * g.ow + x];
                                let ii = (c * g.h + iy) * g.w + ix;
                                acc = acc + gy * input[ii];
                                gin[ii] = gin[ii] + gy * kv;
                            }
                        }
                    }
                    gk[kidx] = gk[kidx] + acc;
                }
            }
        }
    }
    (gin, gk)
}

/// Offsets of a dilated `k x k` window centred on a token, row-major over the window.
pub(crate) fn window_offsets(k: usize, dilation: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    let d = dilation as isize;
    let mut v = Vec::with_capacity(k * k);
    for ky in -r..=r {
        for kx in -r..=r {
            v.push((ky * d, kx * d));
        }
    }
    v
}

/// `[h,w,c] -> [h*w, k*k, c]` zero-padded dilated patches.
pub(crate) fn unfold<T: Real>(x: &[T], h: usize, w: usize, c: usize, offsets: &[(isize, isize)]) -> Vec<T> {
    let kk = offsets.len();
    let mut out = vec![T::zero(); h * w * kk * c];
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            for (j, &(dy, dx)) in offsets.iter().enumerate() {
                let rr = r as isize + dy;
                let cc = col as isize + dx;
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let src = (rr as usize * w + cc as usize) * c;
                let dst = (p * kk + j) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub(crate) fn unfold_backward<T: Real>(grad: &[T], h: usize, w: usize, c: usize, offsets: &[(isize, isize)]) -> Vec<T> {
    let kk = offsets.len();
    let mut gx = vec![T::zero(); h * w * c];
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            for (j, &(dy, dx)) in offsets.iter().enumerate() {
                let rr = r as isize + dy;
                let cc = col as isize + dx;
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let dst = (rr as usize * w + cc as usize) * c;
                let src = (p * kk + j) * c;
                for i in 0..c {
                    gx[dst + i] = gx[dst + i] + grad[src + i];
                }
            }
        }
    }
    gx
}
