//! Forward kernels for the closed primitive set. The tape calls these and
//! adds the matching backward rules.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(a: &Tensor) -> Tensor {
    a.map(|x| x * sigmoid(x))
}

pub fn reduce_mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.mean())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.numel() as f64;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(Tensor::scalar(s / n))
}

/// Splits `[.., k] x [k, n]` into `(m, k, n)` and the output shape `[.., n]`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    if a.is_empty() || b.len() != 2 || a[a.len() - 1] != b[0] {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a, b)));
    }
    let k = b[0];
    let n = b[1];
    let m: usize = a[..a.len() - 1].iter().product();
    let mut out = a[..a.len() - 1].to_vec();
    out.push(n);
    Ok((m, k, n, out))
}

/// `a` is treated as `[m, k]` with all leading dims flattened; `b` is `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, shape) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose keeps element count")
}

/// Geometry of a 3x3 / stride 1 / same-padding convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvDims {
    pub(crate) fn check(x: &[usize], w: &[usize], b: &[usize]) -> Result<Self> {
        let ok = x.len() == 3 && w.len() == 2 && b.len() == 1 && w[1] == 9 * x[2] && b[0] == w[0];
        if !ok {
            return Err(shape_err(
                "conv2d_3x3_same",
                format!("input {:?}, kernel {:?}, bias {:?}", x, w, b),
            ));
        }
        Ok(Self {
            h: x[0],
            w: x[1],
            c_in: x[2],
            c_out: w[0],
        })
    }

    pub(crate) fn patch_len(&self) -> usize {
        9 * self.c_in
    }

    /// Gathers the zero-padded 3x3 neighbourhood of `(y, x)` into `patch`.
    pub(crate) fn gather(&self, input: &[f64], y: usize, x: usize, patch: &mut [f64]) {
        let c = self.c_in;
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut patch[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                let sy = y as isize + ky as isize - 1;
                let sx = x as isize + kx as isize - 1;
                if sy < 0 || sx < 0 || sy >= self.h as isize || sx >= self.w as isize {
                    dst.fill(0.0);
                } else {
                    let off = (sy as usize * self.w + sx as usize) * c;
                    dst.copy_from_slice(&input[off..off + c]);
                }
            }
        }
    }

    /// Adds `patch` back onto the padded neighbourhood of `(y, x)`.
    pub(crate) fn scatter(&self, grad_input: &mut [f64], y: usize, x: usize, patch: &[f64]) {
        let c = self.c_in;
        for ky in 0..3 {
            for kx in 0..3 {
                let sy = y as isize + ky as isize - 1;
                let sx = x as isize + kx as isize - 1;
                if sy < 0 || sx < 0 || sy >= self.h as isize || sx >= self.w as isize {
                    continue;
                }
                let off = (sy as usize * self.w + sx as usize) * c;
                let src = &patch[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                for (g, &p) in grad_input[off..off + c].iter_mut().zip(src) {
                    *g += p;
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
///
/// `x` is `[H, W, c_in]`, `weight` is `[c_out, 9 * c_in]`, `bias` is `[c_out]`.
pub fn conv2d_3x3_same(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dims = ConvDims::check(x.shape(), weight.shape(), bias.shape())?;
    let plen = dims.patch_len();
    let (wd, bd) = (weight.data(), bias.data());
    let mut patch = vec![0.0; plen];
    let mut out = vec![0.0; dims.h * dims.w * dims.c_out];
    for y in 0..dims.h {
        for xx in 0..dims.w {
            dims.gather(x.data(), y, xx, &mut patch);
            let o = &mut out[(y * dims.w + xx) * dims.c_out..(y * dims.w + xx + 1) * dims.c_out];
            for (co, ov) in o.iter_mut().enumerate() {
                let wrow = &wd[co * plen..(co + 1) * plen];
                let dot: f64 = wrow.iter().zip(&patch).map(|(a, b)| a * b).sum();
                *ov = bd[co] + dot;
            }
        }
    }
    Tensor::new(vec![dims.h, dims.w, dims.c_out], out)
}
