//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat row-major slices; shape validation happens in the callers.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Spatial padding applied by [`conv2d`](super::Var::conv2d). Stride is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input size; out-of-range taps read zero.
    SameZero,
    /// Output keeps the input size; out-of-range taps mirror around the
    /// border pixel without repeating it (`-1 -> 1`).
    SameReflect,
    /// No padding; output is `input - kernel + 1`.
    Valid,
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size `m x k` and
/// `op(b)` of size `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above guarantee every index the strides can reach
    // lies inside the respective slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Number of batch items convolved per work unit. Fixed so that the order of
/// floating-point reductions never depends on the thread count.
const CONV_CHUNKS: usize = 4;

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    rows: Vec<isize>,
    cols: Vec<isize>,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], padding: Padding) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: if x.len() != 4 { x.to_vec() } else { k.to_vec() },
                reason: "expected rank-4 NCHW input and OIHW kernel".into(),
            });
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (o, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kc != c {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: k.to_vec() });
        }
        let (oh, ow, ph, pw) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::InvalidShape {
                        op: "conv2d",
                        shape: x.to_vec(),
                        reason: format!("kernel {kh}x{kw} larger than input"),
                    });
                }
                (h - kh + 1, w - kw + 1, 0, 0)
            }
            Padding::SameZero | Padding::SameReflect => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::InvalidShape {
                        op: "conv2d",
                        shape: k.to_vec(),
                        reason: "same padding needs odd kernel extents".into(),
                    });
                }
                let (ph, pw) = (kh / 2, kw / 2);
                if padding == Padding::SameReflect && (ph >= h || pw >= w) {
                    return Err(Error::InvalidShape {
                        op: "conv2d",
                        shape: x.to_vec(),
                        reason: format!("reflect padding {ph} needs spatial size > {ph}"),
                    });
                }
                (h, w, ph, pw)
            }
        };
        let reflect = padding == Padding::SameReflect;
        let map = |k: usize, out: usize, pad: usize, len: usize| -> Vec<isize> {
            let mut m = Vec::with_capacity(k * out);
            for ki in 0..k {
                for p in 0..out {
                    let mut s = p as isize + ki as isize - pad as isize;
                    let len = len as isize;
                    if reflect {
                        if s < 0 {
                            s = -s;
                        } else if s >= len {
                            s = 2 * (len - 1) - s;
                        }
                    } else if s < 0 || s >= len {
                        s = -1;
                    }
                    m.push(s);
                }
            }
            m
        };
        Ok(Self { n, c, h, w, o, kh, kw, oh, ow, rows: map(kh, oh, ph, h), cols: map(kw, ow, pw, w) })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn chunk_items(&self) -> usize {
        self.n.div_ceil(CONV_CHUNKS).max(1)
    }

    /// Writes item `x_item` into columns `[offset, offset + oh*ow)` of the
    /// `ckk x stride` matrix `cols`.
    fn im2col(&self, x_item: &[f64], cols: &mut [f64], stride: usize, offset: usize) {
        let plane = self.h * self.w;
        for ch in 0..self.c {
            let src = &x_item[ch * plane..(ch + 1) * plane];
            for ki in 0..self.kh {
                let rmap = &self.rows[ki * self.oh..(ki + 1) * self.oh];
                for kj in 0..self.kw {
                    let cmap = &self.cols[kj * self.ow..(kj + 1) * self.ow];
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * stride + offset..row * stride + offset + self.oh * self.ow];
                    for (oy, &sy) in rmap.iter().enumerate() {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if sy < 0 {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let srow = &src[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for (v, &sx) in line.iter_mut().zip(cmap) {
                            *v = if sx < 0 { 0.0 } else { srow[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], stride: usize, offset: usize, dx_item: &mut [f64]) {
        let plane = self.h * self.w;
        for ch in 0..self.c {
            let dst = &mut dx_item[ch * plane..(ch + 1) * plane];
            for ki in 0..self.kh {
                let rmap = &self.rows[ki * self.oh..(ki + 1) * self.oh];
                for kj in 0..self.kw {
                    let cmap = &self.cols[kj * self.ow..(kj + 1) * self.ow];
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * stride + offset..row * stride + offset + self.oh * self.ow];
                    for (oy, &sy) in rmap.iter().enumerate() {
                        if sy < 0 {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * self.w..(sy as usize + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (&v, &sx) in line.iter().zip(cmap) {
                            if sx >= 0 {
                                drow[sx as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let in_item = g.c * g.h * g.w;
    let ohw = g.oh * g.ow;
    let out_item = g.o * ohw;
    let per = g.chunk_items();
    let mut out = vec![0.0; g.n * out_item];
    out.par_chunks_mut(per * out_item).zip(x.par_chunks(per * in_item)).for_each(|(out_chunk, x_chunk)| {
        let nb = x_chunk.len() / in_item;
        let k = nb * ohw;
        let mut cols = vec![0.0; g.ckk() * k];
        for i in 0..nb {
            g.im2col(&x_chunk[i * in_item..(i + 1) * in_item], &mut cols, k, i * ohw);
        }
        let mut y = vec![0.0; g.o * k];
        gemm(g.o, g.ckk(), k, w, false, &cols, false, 0.0, &mut y);
        for i in 0..nb {
            for oc in 0..g.o {
                out_chunk[i * out_item + oc * ohw..i * out_item + (oc + 1) * ohw]
                    .copy_from_slice(&y[oc * k + i * ohw..oc * k + (i + 1) * ohw]);
            }
        }
    });
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_item = g.c * g.h * g.w;
    let ohw = g.oh * g.ow;
    let out_item = g.o * ohw;
    let per = g.chunk_items();
    let ckk = g.ckk();
    let mut dx = if need_dx { vec![0.0; g.n * in_item] } else { Vec::new() };

    let work = |x_chunk: &[f64], dy_chunk: &[f64], dx_chunk: Option<&mut [f64]>| -> Option<Vec<f64>> {
        let nb = x_chunk.len() / in_item;
        let k = nb * ohw;
        let mut dyc = vec![0.0; g.o * k];
        for i in 0..nb {
            for oc in 0..g.o {
                dyc[oc * k + i * ohw..oc * k + (i + 1) * ohw]
                    .copy_from_slice(&dy_chunk[i * out_item + oc * ohw..i * out_item + (oc + 1) * ohw]);
            }
        }
        let mut dw_part = None;
        if need_dw {
            let mut cols = vec![0.0; ckk * k];
            for i in 0..nb {
                g.im2col(&x_chunk[i * in_item..(i + 1) * in_item], &mut cols, k, i * ohw);
            }
            let mut dw = vec![0.0; g.o * ckk];
            gemm(g.o, k, ckk, &dyc, false, &cols, true, 0.0, &mut dw);
            dw_part = Some(dw);
        }
        if let Some(dx_chunk) = dx_chunk {
            let mut dcols = vec![0.0; ckk * k];
            gemm(ckk, g.o, k, w, true, &dyc, false, 0.0, &mut dcols);
            for i in 0..nb {
                g.col2im(&dcols, k, i * ohw, &mut dx_chunk[i * in_item..(i + 1) * in_item]);
            }
        }
        dw_part
    };

    let parts: Vec<Option<Vec<f64>>> = if need_dx {
        dx.par_chunks_mut(per * in_item)
            .zip(x.par_chunks(per * in_item).zip(dy.par_chunks(per * out_item)))
            .map(|(dxc, (xc, dyc))| work(xc, dyc, Some(dxc)))
            .collect()
    } else {
        x.par_chunks(per * in_item).zip(dy.par_chunks(per * out_item)).map(|(xc, dyc)| work(xc, dyc, None)).collect()
    };

    let dw = if need_dw {
        let mut acc = vec![0.0; g.o * ckk];
        for p in parts.into_iter().flatten() {
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        Some(acc)
    } else {
        None
    };
    (need_dx.then_some(dx), dw)
}

/// For each element of an array with `shape`, the flat index of the element
/// it reduces into when `axes` are summed away.
pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    let numel: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            out_strides[d] = s;
            s *= shape[d];
        }
    }
    let mut map = vec![0usize; numel];
    let mut coords = vec![0usize; shape.len()];
    for slot in map.iter_mut() {
        *slot = coords.iter().zip(&out_strides).map(|(c, s)| c * s).sum();
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    (out_shape, map)
}

/// 2x2 space-to-channel permutation on NCHW data: output channel
/// `4c + 2dy + dx` at `(i, j)` holds input channel `c` at `(2i+dy, 2j+dx)`.
pub(crate) fn squeeze2x2(shape: &[usize], x: &[f64], inverse: bool) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = ((b * c + ch) * h + 2 * i + dy) * w + 2 * j + dx;
                            let oc = 4 * ch + 2 * dy + dx;
                            let dst = ((b * 4 * c + oc) * h2 + i) * w2 + j;
                            if inverse {
                                out[src] = x[dst];
                            } else {
                                out[dst] = x[src];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
