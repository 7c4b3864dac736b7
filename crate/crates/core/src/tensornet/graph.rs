//! Tape of recorded operations and reverse-mode differentiation over it.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{NetError, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(String),
    Conv { x: Var, w: Var, b: Option<Var>, dilation: usize },
    TConv { x: Var, w: Var, b: Option<Var> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Gate { x: Var, alpha: Var },
    Dropout { x: Var, mask: Vec<T> },
    Scale { x: Var, factor: T },
    WeightedSum { x: Var, weights: Vec<T> },
    Bce { pred: Var, target: Vec<T>, eps: T },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations as they are evaluated so gradients can be pulled back
/// from any scalar node.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<String, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a named parameter; parameters registered more than once
    /// have their contributions summed.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    /// Gradient with respect to any recorded node. `None` when the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(msg: String) -> NetError {
    NetError::ShapeMismatch(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(NetError::NoRecordedGraph)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    /// Constant input; gradients flow into it but it is not a parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(name.to_string()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let wv = self.value(w)?;
        let (c, h, wd) = xv.dims3()?;
        let [f, wc, kh, kw] = wv.shape()[..] else {
            return Err(shape_err(format!("kernel must be [F, C, k, k], got {:?}", wv.shape())));
        };
        if wc != c || kh != kw || kh % 2 == 0 || dilation == 0 {
            return Err(shape_err(format!(
                "kernel {:?} (dilation {dilation}) does not fit input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let bias = match b {
            Some(b) => {
                let bv = self.value(b)?;
                if bv.shape() != [f] {
                    return Err(shape_err(format!("bias {:?} for {f} filters", bv.shape())));
                }
                Some(bv.data())
            }
            None => None,
        };
        let geom = ConvGeom { c_in: c, c_out: f, h, w: wd, k: kh, dilation };
        let out = kernels::conv2d_forward(xv.data(), wv.data(), bias, geom);
        let value = Tensor::new(&[f, h, wd], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, dilation }))
    }

    /// 2x2 stride-2 transposed convolution with kernel `[C_in, F, 2, 2]`.
    pub fn transposed_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x)?;
        let wv = self.value(w)?;
        let (c, h, wd) = xv.dims3()?;
        let [wc, f, 2, 2] = wv.shape()[..] else {
            return Err(shape_err(format!("kernel must be [C, F, 2, 2], got {:?}", wv.shape())));
        };
        if wc != c {
            return Err(shape_err(format!("kernel {:?} for input {:?}", wv.shape(), xv.shape())));
        }
        let bias = match b {
            Some(b) => {
                let bv = self.value(b)?;
                if bv.shape() != [f] {
                    return Err(shape_err(format!("bias {:?} for {f} filters", bv.shape())));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = kernels::tconv_forward(xv.data(), wv.data(), bias, (c, f, h, wd));
        let value = Tensor::new(&[f, 2 * h, 2 * wd], out)?;
        Ok(self.push(value, Op::TConv { x, w, b }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let (c, h, w) = xv.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NetError::OddDimension { h, w });
        }
        let (out, argmax) = kernels::max_pool_forward(xv.data(), (c, h, w));
        let value = Tensor::new(&[c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x)?.map(|v| v.max(T::zero()));
        Ok(self.push(value, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x)?.map(sigmoid);
        Ok(self.push(value, Op::Sigmoid(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Stacks rank-3 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let (_, h, w) = self.value(*first)?.dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p)?;
            let (c, ph, pw) = pv.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err(format!("concat {:?} with {h}x{w}", pv.shape())));
            }
            channels += c;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(&[channels, h, w], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Multiplies every channel of `x` by the single-channel map `alpha`.
    pub fn gate(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (xv, av) = (self.value(x)?, self.value(alpha)?);
        let (_, h, w) = xv.dims3()?;
        if av.shape() != [1, h, w] {
            return Err(shape_err(format!("gate {:?} by {:?}", xv.shape(), av.shape())));
        }
        let hw = h * w;
        let data = xv
            .data()
            .chunks(hw)
            .flat_map(|plane| plane.iter().zip(av.data()).map(|(&p, &a)| p * a))
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::Gate { x, alpha }))
    }

    /// Elementwise product with a fixed mask, typically zeros and the
    /// inverted keep scale.
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x)?;
        if mask.len() != xv.numel() {
            return Err(shape_err(format!("dropout mask of {} for {:?}", mask.len(), xv.shape())));
        }
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x)?.map(|v| v * factor);
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    /// Scalar `sum(x * weights)`.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let s = self.value(x)?.dot(weights)?;
        let weights = weights.data().to_vec();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let pv = self.value(pred)?;
        if pv.shape() != target.shape() {
            return Err(shape_err(format!("bce {:?} vs {:?}", pv.shape(), target.shape())));
        }
        let loss = bce_value(pv.data(), target.data(), eps);
        let target = target.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target, eps }))
    }

    /// Pulls gradients back from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_impl(loss, true)
    }

    /// Like [`Graph::backward`] but only parameter gradients are kept.
    pub fn param_gradients(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_impl(loss, false)
    }

    fn backward_impl(&self, loss: Var, keep_nodes: bool) -> Result<Gradients<T>> {
        let lv = self.value(loss)?;
        if lv.numel() != 1 {
            return Err(shape_err(format!("loss must be a scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut kept: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match params.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => {
                        params.insert(name.clone(), Tensor::new(node.value.shape(), g.clone())?);
                    }
                },
                Op::Conv { x, w, b, dilation } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (c, h, wd) = xv.dims3()?;
                    let s = wv.shape();
                    let geom = ConvGeom { c_in: c, c_out: s[0], h, w: wd, k: s[2], dilation: *dilation };
                    let (gx, gw, gb) = kernels::conv2d_backward(xv.data(), wv.data(), &g, geom);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::TConv { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (c, h, wd) = xv.dims3()?;
                    let f = wv.shape()[1];
                    let (gx, gw, gb) = kernels::tconv_backward(xv.data(), wv.data(), &g, (c, f, h, wd));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        gx[src] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.numel();
                        accumulate(&mut grads, *p, g[start..start + n].to_vec());
                        start += n;
                    }
                }
                Op::Gate { x, alpha } => {
                    let xv = &self.nodes[x.0].value;
                    let av = &self.nodes[alpha.0].value;
                    let hw = av.numel();
                    let mut ga = vec![T::zero(); hw];
                    let mut gx = Vec::with_capacity(g.len());
                    for (gplane, xplane) in g.chunks(hw).zip(xv.data().chunks(hw)) {
                        for (((&gv, &xval), &a), gav) in gplane.iter().zip(xplane).zip(av.data()).zip(&mut ga) {
                            gx.push(gv * a);
                            *gav += gv * xval;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *alpha, ga);
                }
                Op::Dropout { x, mask } => {
                    let gx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale { x, factor } => {
                    let gx = g.iter().map(|&gv| gv * *factor).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedSum { x, weights } => {
                    let gx = weights.iter().map(|&wv| wv * g[0]).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Bce { pred, target, eps } => {
                    let pv = self.nodes[pred.0].value.data();
                    let gx = bce_grad(pv, target, *eps).into_iter().map(|v| v * g[0]).collect();
                    accumulate(&mut grads, *pred, gx);
                }
            }
            if keep_nodes {
                kept[i] = Some(Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(Gradients { params, nodes: kept })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Kept strictly inside (0, 1) even where the exact value rounds to 0 or 1.
#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    y.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

pub(crate) fn bce_value<T: Scalar>(pred: &[T], target: &[T], eps: T) -> T {
    let hi = T::one() - eps;
    let mut acc = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        let p = p.max(eps).min(hi).to_f64();
        let t = t.to_f64();
        acc += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    T::from_f64(-acc / pred.len() as f64)
}

/// Zero where the clamp was active.
pub(crate) fn bce_grad<T: Scalar>(pred: &[T], target: &[T], eps: T) -> Vec<T> {
    let hi = T::one() - eps;
    let n = T::from_f64(pred.len() as f64);
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            if p < eps || p > hi {
                T::zero()
            } else {
                (p - t) / (p * (T::one() - p)) / n
            }
        })
        .collect()
}
