//! Composite layers, both as graph recorders and as one-shot evaluations.

use super::{Graph, NetError, Result, Scalar, Tensor, Var};

/// Weights of an attention gate with `c` skip channels, `cg` gating channels
/// and an intermediate width `f_int`.
///
/// Shapes: `wx [f_int, c, 1, 1]`, `wg [f_int, cg, 1, 1]`, `bxg [f_int]`,
/// `psi [1, f_int, 1, 1]`, `bpsi [1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGateParams<T> {
    pub wx: Tensor<T>,
    pub wg: Tensor<T>,
    pub bxg: Tensor<T>,
    pub psi: Tensor<T>,
    pub bpsi: Tensor<T>,
}

impl<T: Scalar> AttentionGateParams<T> {
    pub fn zeros(c: usize, cg: usize, f_int: usize) -> Self {
        Self {
            wx: Tensor::zeros(&[f_int, c, 1, 1]),
            wg: Tensor::zeros(&[f_int, cg, 1, 1]),
            bxg: Tensor::zeros(&[f_int]),
            psi: Tensor::zeros(&[1, f_int, 1, 1]),
            bpsi: Tensor::zeros(&[1]),
        }
    }

    fn check(&self) -> Result<()> {
        let f_int = self.bxg.numel();
        let ok = f_int >= 1
            && self.wx.shape().len() == 4
            && self.wx.shape()[0] == f_int
            && self.wg.shape().len() == 4
            && self.wg.shape()[0] == f_int
            && self.psi.shape() == [1, f_int, 1, 1]
            && self.bpsi.shape() == [1];
        if ok {
            Ok(())
        } else {
            Err(NetError::ShapeMismatch("inconsistent attention gate parameters".into()))
        }
    }
}

/// Atrous pyramid: one 3x3 branch per rate, then a 1x1 fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct AsppParams<T> {
    pub rates: Vec<usize>,
    /// `(weight [C, C, 3, 3], bias [C])` per rate.
    pub branches: Vec<(Tensor<T>, Tensor<T>)>,
    /// `[C, C * rates, 1, 1]`.
    pub fuse_weight: Tensor<T>,
    pub fuse_bias: Tensor<T>,
}

/// Graph handles for a gate's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub wx: Var,
    pub wg: Var,
    pub bxg: Var,
    pub psi: Var,
    pub bpsi: Var,
}

/// Graph handles for a pyramid's parameters.
#[derive(Debug, Clone)]
pub struct AsppVars {
    /// `(weight, bias, rate)` per branch.
    pub branches: Vec<(Var, Var, usize)>,
    pub fuse_weight: Var,
    pub fuse_bias: Var,
}

impl<T: Scalar> Graph<T> {
    /// Returns the gated skip features and the attention map.
    pub fn attention_gate(&mut self, x: Var, g: Var, p: &GateVars) -> Result<(Var, Var)> {
        let (_, xh, xw) = self.value(x)?.dims3()?;
        let (_, gh, gw) = self.value(g)?.dims3()?;
        if (xh, xw) != (gh, gw) {
            return Err(NetError::ShapeMismatch(format!(
                "gate inputs {xh}x{xw} and {gh}x{gw}"
            )));
        }
        let ax = self.conv2d(x, p.wx, None, 1)?;
        let ag = self.conv2d(g, p.wg, Some(p.bxg), 1)?;
        let s = self.add(ax, ag)?;
        let r = self.relu(s)?;
        let q = self.conv2d(r, p.psi, Some(p.bpsi), 1)?;
        let alpha = self.sigmoid(q)?;
        let out = self.gate(x, alpha)?;
        Ok((out, alpha))
    }

    pub fn aspp(&mut self, x: Var, p: &AsppVars) -> Result<Var> {
        let mut outs = Vec::with_capacity(p.branches.len());
        for &(w, b, rate) in &p.branches {
            outs.push(self.conv2d(x, w, Some(b), rate)?);
        }
        let cat = self.concat(&outs)?;
        self.conv2d(cat, p.fuse_weight, Some(p.fuse_bias), 1)
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, dilation: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, dilation)?;
    Ok(g.value(y)?.clone())
}

pub fn transposed_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.transposed_conv2d(xv, wv, bv)?;
    Ok(g.value(y)?.clone())
}

pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.max_pool2(xv)?;
    Ok(g.value(y)?.clone())
}

/// Returns `alpha * x` with `alpha` broadcast over channels.
pub fn attention_gate<T: Scalar>(x: &Tensor<T>, gating: &Tensor<T>, p: &AttentionGateParams<T>) -> Result<Tensor<T>> {
    p.check()?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gv = g.input(gating.clone());
    let vars = GateVars {
        wx: g.input(p.wx.clone()),
        wg: g.input(p.wg.clone()),
        bxg: g.input(p.bxg.clone()),
        psi: g.input(p.psi.clone()),
        bpsi: g.input(p.bpsi.clone()),
    };
    let (y, _) = g.attention_gate(xv, gv, &vars)?;
    Ok(g.value(y)?.clone())
}

pub fn aspp<T: Scalar>(x: &Tensor<T>, p: &AsppParams<T>) -> Result<Tensor<T>> {
    if p.rates.is_empty() || p.rates.len() != p.branches.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} rates for {} branches",
            p.rates.len(),
            p.branches.len()
        )));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let branches = p
        .branches
        .iter()
        .zip(&p.rates)
        .map(|((w, b), &r)| (g.input(w.clone()), g.input(b.clone()), r))
        .collect();
    let vars = AsppVars {
        branches,
        fuse_weight: g.input(p.fuse_weight.clone()),
        fuse_bias: g.input(p.fuse_bias.clone()),
    };
    let y = g.aspp(xv, &vars)?;
    Ok(g.value(y)?.clone())
}
