//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Each recorded node keeps its value
//! and, when any input needs a gradient, a closure mapping the node's output
//! gradient to gradients for its parents. [`Tape::backward`] walks the
//! records once in reverse order and consumes the tape.

use crate::error::{DicError, Result};
use crate::flops;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Element, Tensor};
use crate::winograd;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity used throughout the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

type GradVec<T> = Option<Vec<T>>;
type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[&Tensor<T>]) -> Vec<GradVec<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    cleared: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a variable. Leaves that required a gradient but were not
    /// reached by the loss get zeros; untracked values return `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), cleared: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record and saved intermediate. Backward is an error afterwards.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.cleared = true;
    }

    /// Records an input value. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, requires_grad, leaf: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: impl FnOnce(&Tensor<T>, &[&Tensor<T>]) -> Vec<GradVec<T>> + 'static) -> Var {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
            leaf: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. Consumes the recorded graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.cleared || loss.0 >= self.nodes.len() {
            return Err(DicError::TapeCleared);
        }
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(DicError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let Some(backward) = self.nodes[i].backward.take() else {
                grads[i] = Some(g);
                continue;
            };
            let node = &self.nodes[i];
            let gt = Tensor::new(node.value.shape().to_vec(), g)?;
            let parent_vals: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = backward(&gt, &parent_vals);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients are no longer needed once propagated.
            grads[i] = None;
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !(node.leaf && node.requires_grad) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        self.clear();
        Ok(Gradients { grads: out })
    }

    // ---- ops ---------------------------------------------------------------

    /// 3×3 cross-correlation, zero padding 1, stride 1 or 2.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let [_, cin, h, w] = self.value(x).dims4("conv3x3")?;
        let ws = self.shape(weight);
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
            return Err(DicError::shape("conv3x3", format!("weight {ws:?} for input channels {cin}")));
        }
        match stride {
            1 => {}
            2 if h % 2 == 0 && w % 2 == 0 => {}
            2 => return Err(DicError::shape("conv3x3", format!("stride 2 needs even H, W; got {h}×{w}"))),
            s => return Err(DicError::shape("conv3x3", format!("stride must be 1 or 2, got {s}"))),
        }
        self.conv2d(x, weight, bias, stride, 1)
    }

    /// General square-kernel convolution. Kernel size comes from the weight.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(x).dims4("conv2d")?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(DicError::shape("conv2d", format!("weight {ws:?} for input channels {cin}")));
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(DicError::shape("conv2d", format!("kernel {k} larger than padded input {h}×{w}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(DicError::shape("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let g = ConvGeom { n, cin, h, w, cout, k, stride, pad };
        let (ho, wo) = g.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &g,
        );
        flops::record(|c| {
            if k == 3 && stride == 1 {
                c.conv3x3_s1 += g.macs()
            } else {
                c.conv_other += g.macs()
            }
        });
        let need_dx = self.requires_grad(x);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(Tensor::new(vec![n, cout, ho, wo], out)?, &parents, move |gy, vals| {
            let (dx, dw, db) = kernels::conv2d_backward(vals[0].data(), vals[1].data(), gy.data(), &g, need_dx);
            let mut v = vec![dx, Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        }))
    }

    /// Forward-only Winograd F(2×2, 3×3) convolution (stride 1, padding 1).
    pub fn winograd_conv3x3(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        if self.requires_grad(x) || self.requires_grad(weight) || bias.is_some_and(|b| self.requires_grad(b)) {
            return Err(DicError::Unsupported("backward through the Winograd path".into()));
        }
        let out = winograd::winograd_conv3x3(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let [n, cin, h, w] = self.value(x).dims4("winograd_conv3x3")?;
        let cout = out.shape()[1];
        flops::record(|c| c.conv3x3_s1 += (n * cout * h * w * cin * 9) as u64);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, &parents, |_, _| unreachable!("winograd nodes never require grad")))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims @ [_, c, _, _] = self.value(x).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(DicError::shape("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(DicError::shape("group_norm", format!("affine parameters must have shape [{c}]")));
        }
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            dims,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        flops::record(|cnt| cnt.elementwise += out.len() as u64);
        Ok(self.push(Tensor::new(dims.to_vec(), out)?, &[x, gamma, beta], move |gy, vals| {
            let (dx, dg, db) = kernels::group_norm_backward(vals[0].data(), dims, groups, vals[1].data(), &stats, gy.data());
            vec![Some(dx), Some(dg), Some(db)]
        }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(x),
            Activation::Silu => self.silu(x),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.pointwise(x, kernels::gelu, kernels::gelu_grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.pointwise(x, kernels::silu, kernels::silu_grad)
    }

    fn pointwise(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        flops::record(|c| c.elementwise += out.numel() as u64);
        self.push(out, &[x], move |gy, vals| {
            vec![Some(vals[0].data().iter().zip(gy.data()).map(|(&v, &g)| g * df(v)).collect())]
        })
    }

    /// Affine map over the last axis with weight `[dout, din]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let din = *xs.last().ok_or_else(|| DicError::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(DicError::shape("linear", format!("weight {ws:?} for input {xs:?}")));
        }
        let dout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(DicError::shape("linear", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let m = self.value(x).numel() / din;
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            m,
            din,
            dout,
        );
        flops::record(|c| c.linear += (m * din * dout) as u64);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(Tensor::new(shape, out)?, &parents, move |gy, vals| {
            let (dx, dw, db) = kernels::linear_backward(vals[0].data(), vals[1].data(), gy.data(), m, din, dout);
            let mut v = vec![Some(dx), Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(DicError::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = kernels::concat_channels(self.value(a).data(), ca, self.value(b).data(), cb, n, h * w);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], out)?, &[a, b], move |gy, _| {
            let (da, db) = kernels::split_channels(gy.data(), ca, cb, n, h * w);
            vec![Some(da), Some(db)]
        }))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest2x")?;
        let out = kernels::upsample_nearest2x(self.value(x).data(), n * c, h, w);
        Ok(self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out)?, &[x], move |gy, _| {
            vec![Some(kernels::upsample_nearest2x_backward(gy.data(), n * c, h, w))]
        }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let dims @ [n, c, h, w] = self.value(x).dims4("pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(DicError::shape("pixel_shuffle", format!("{c} channels not divisible by {}", r * r)));
        }
        let out = kernels::pixel_shuffle(self.value(x).data(), dims, r);
        Ok(self.push(Tensor::new(vec![n, c / (r * r), h * r, w * r], out)?, &[x], move |gy, _| {
            vec![Some(kernels::pixel_shuffle_backward(gy.data(), dims, r))]
        }))
    }

    /// Channel-wise affine conditioning: `x · (1 + scale) + shift`, with
    /// `scale` and `shift` shaped `[N, C]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("modulate")?;
        if self.shape(scale) != [n, c] || self.shape(shift) != [n, c] {
            return Err(DicError::shape(
                "modulate",
                format!("scale {:?} / shift {:?} for input {:?}", self.shape(scale), self.shape(shift), [n, c, h, w]),
            ));
        }
        let hw = h * w;
        let (xv, sv, bv) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::ZERO; xv.len()];
        for nc in 0..n * c {
            let (s, b) = (T::ONE + sv[nc], bv[nc]);
            for i in nc * hw..(nc + 1) * hw {
                out[i] = xv[i] * s + b;
            }
        }
        flops::record(|cnt| cnt.elementwise += out.len() as u64);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, &[x, scale, shift], move |gy, vals| {
            let (xv, sv, g) = (vals[0].data(), vals[1].data(), gy.data());
            let mut dx = vec![T::ZERO; xv.len()];
            let mut ds = vec![T::ZERO; n * c];
            let mut db = vec![T::ZERO; n * c];
            for nc in 0..n * c {
                let s = T::ONE + sv[nc];
                for i in nc * hw..(nc + 1) * hw {
                    dx[i] = g[i] * s;
                    ds[nc] += g[i] * xv[i];
                    db[nc] += g[i];
                }
            }
            vec![Some(dx), Some(ds), Some(db)]
        }))
    }

    /// Residual with a per-channel gate: `x + gate ⊙ branch`, gate `[N, C]`.
    pub fn gated_residual(&mut self, x: Var, gate: Var, branch: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("gated_residual")?;
        if self.shape(branch) != self.shape(x) || self.shape(gate) != [n, c] {
            return Err(DicError::shape(
                "gated_residual",
                format!("x {:?}, gate {:?}, branch {:?}", self.shape(x), self.shape(gate), self.shape(branch)),
            ));
        }
        let hw = h * w;
        let (xv, gv, uv) = (self.value(x).data(), self.value(gate).data(), self.value(branch).data());
        let mut out = vec![T::ZERO; xv.len()];
        for nc in 0..n * c {
            for i in nc * hw..(nc + 1) * hw {
                out[i] = xv[i] + gv[nc] * uv[i];
            }
        }
        flops::record(|cnt| cnt.elementwise += out.len() as u64);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, &[x, gate, branch], move |gy, vals| {
            let (gv, uv, g) = (vals[1].data(), vals[2].data(), gy.data());
            let mut dg = vec![T::ZERO; n * c];
            let mut du = vec![T::ZERO; g.len()];
            for nc in 0..n * c {
                for i in nc * hw..(nc + 1) * hw {
                    dg[nc] += g[i] * uv[i];
                    du[i] = g[i] * gv[nc];
                }
            }
            vec![Some(g.to_vec()), Some(dg), Some(du)]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |gy, _| vec![Some(gy.data().to_vec()), Some(gy.data().to_vec())]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        flops::record(|c| c.elementwise += out.numel() as u64);
        Ok(self.push(out, &[a, b], |gy, vals| {
            let g = gy.data();
            vec![
                Some(g.iter().zip(vals[1].data()).map(|(&g, &v)| g * v).collect()),
                Some(g.iter().zip(vals[0].data()).map(|(&g, &v)| g * v).collect()),
            ]
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = T::from_f64(s);
        let out = self.value(x).map(|v| v * st);
        self.push(out, &[x], move |gy, _| vec![Some(gy.data().iter().map(|&g| g * st).collect())])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let n = self.value(x).numel();
        self.push(Tensor::scalar(s), &[x], move |gy, _| vec![Some(vec![gy.data()[0]; n])])
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(DicError::shape("mse", format!("{:?} vs {:?}", self.shape(pred), self.shape(target))));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len();
        let total: f64 = p.iter().zip(t).map(|(&a, &b)| (a - b).to_f64().powi(2)).sum();
        let out = Tensor::scalar(T::from_f64(total / n as f64));
        Ok(self.push(out, &[pred, target], move |gy, vals| {
            let k = gy.data()[0] * T::from_f64(2.0 / n as f64);
            let d: Vec<T> = vals[0].data().iter().zip(vals[1].data()).map(|(&a, &b)| (a - b) * k).collect();
            let neg = d.iter().map(|&v| -v).collect();
            vec![Some(d), Some(neg)]
        }))
    }

    /// Row gather from a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(DicError::shape("embedding", format!("table must be rank 2, got {ts:?}")));
        }
        let (rows, dim) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DicError::index("embedding", format!("row {bad} of {rows}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let idx = indices.to_vec();
        Ok(self.push(Tensor::new(vec![indices.len(), dim], out)?, &[table], move |gy, _| {
            let mut d = vec![T::ZERO; rows * dim];
            for (r, &i) in idx.iter().enumerate() {
                for (a, &b) in d[i * dim..(i + 1) * dim].iter_mut().zip(&gy.data()[r * dim..(r + 1) * dim]) {
                    *a += b;
                }
            }
            vec![Some(d)]
        }))
    }
}
