//! Define-by-run reverse-mode tape.
//!
//! Every primitive application appends a node holding its output value.
//! Nodes are only ever appended, so inputs always precede their consumers
//! and a single reverse sweep over the node list is a valid backward pass.

use super::ops::{self, ConvDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var },
    Silu(Var),
    ReduceMean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = ops::scale(self.value(a), c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv2d_3x3_same(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = ops::silu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let out = ops::reduce_mean(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::ReduceMean(a), rg)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mse(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively when
    /// a value feeds several consumers.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, || g.clone());
                    self.accumulate(&mut grads, b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, || g.clone());
                    self.accumulate(&mut grads, b, || g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    self.accumulate(&mut grads, a, || ops::mul(&g, bv).expect("shapes checked forward"));
                    self.accumulate(&mut grads, b, || ops::mul(&g, av).expect("shapes checked forward"));
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, a, || g.map(|v| v * c));
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k, n, _) = ops::matmul_dims(av.shape(), bv.shape())?;
                    self.accumulate(&mut grads, a, || {
                        let g2 = Tensor::new(vec![m, n], g.data().to_vec()).expect("matmul grad");
                        let da = ops::matmul(&g2, &ops::transpose2(bv)).expect("matmul grad");
                        da.reshape(av.shape()).expect("matmul grad")
                    });
                    self.accumulate(&mut grads, b, || {
                        let a2 = Tensor::new(vec![m, k], av.data().to_vec()).expect("matmul grad");
                        let g2 = Tensor::new(vec![m, n], g.data().to_vec()).expect("matmul grad");
                        ops::matmul(&ops::transpose2(&a2), &g2).expect("matmul grad")
                    });
                }
                Op::Conv2d { x, w, b } => {
                    let (gx, gw, gb) = self.conv_backward(x, w, b, &g)?;
                    self.accumulate(&mut grads, x, || gx);
                    self.accumulate(&mut grads, w, || gw);
                    self.accumulate(&mut grads, b, || gb);
                }
                Op::Silu(a) => {
                    let av = self.value(a);
                    self.accumulate(&mut grads, a, || {
                        av.zip_map(&g, "silu", |x, gv| {
                            let s = ops::sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .expect("silu grad")
                    });
                }
                Op::ReduceMean(a) => {
                    let av = self.value(a);
                    let n = av.numel() as f64;
                    let gv = g.item() / n;
                    self.accumulate(&mut grads, a, || Tensor::full(av.shape(), gv));
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let c = 2.0 * g.item() / av.numel() as f64;
                    let diff = ops::sub(av, bv)?;
                    self.accumulate(&mut grads, a, || diff.map(|d| c * d));
                    self.accumulate(&mut grads, b, || diff.map(|d| -c * d));
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = g();
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let dims = ConvDims::check(xv.shape(), wv.shape(), bv.shape())?;
        let plen = dims.patch_len();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut gx = vec![0.0; xv.numel()];
        let mut gw = vec![0.0; wv.numel()];
        let mut gb = vec![0.0; bv.numel()];
        let mut patch = vec![0.0; plen];
        let mut gpatch = vec![0.0; plen];
        let wd = wv.data();
        for y in 0..dims.h {
            for xx in 0..dims.w {
                let go = &g.data()[(y * dims.w + xx) * dims.c_out..(y * dims.w + xx + 1) * dims.c_out];
                for (gbv, &gv) in gb.iter_mut().zip(go) {
                    *gbv += gv;
                }
                if need_w {
                    dims.gather(xv.data(), y, xx, &mut patch);
                    for (co, &gv) in go.iter().enumerate() {
                        let row = &mut gw[co * plen..(co + 1) * plen];
                        for (r, &p) in row.iter_mut().zip(&patch) {
                            *r += gv * p;
                        }
                    }
                }
                if need_x {
                    gpatch.fill(0.0);
                    for (co, &gv) in go.iter().enumerate() {
                        let wrow = &wd[co * plen..(co + 1) * plen];
                        for (gp, &wv) in gpatch.iter_mut().zip(wrow) {
                            *gp += gv * wv;
                        }
                    }
                    dims.scatter(&mut gx, y, xx, &gpatch);
                }
            }
        }
        Ok((
            Tensor::new(xv.shape().to_vec(), gx)?,
            Tensor::new(wv.shape().to_vec(), gw)?,
            Tensor::new(bv.shape().to_vec(), gb)?,
        ))
    }
}
