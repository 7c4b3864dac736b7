//! Encoder/decoder network with attention-gated skips and an atrous pyramid
//! in the bottleneck.

use super::{AsppVars, GateVars, Graph, NetError, ParamStore, Result, Scalar, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    /// Number of encoder levels above the bottleneck.
    pub depth: usize,
    pub bottleneck_channels: usize,
    pub aspp_rates: Vec<usize>,
    /// One rate per encoder level, then one for the bottleneck.
    pub dropout: Vec<f64>,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            base_channels: 16,
            depth: 3,
            bottleneck_channels: 128,
            aspp_rates: vec![1, 2, 4, 8, 16],
            dropout: vec![0.1, 0.1, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl UNetConfig {
    /// Config for a given width and depth: bottleneck at `base << depth`,
    /// dropout 0.1 in the shallower half of the levels and 0.2 below.
    pub fn scaled(base_channels: usize, depth: usize, aspp_rates: Vec<usize>, seed: u64) -> Self {
        Self {
            input_channels: 2,
            base_channels,
            depth,
            bottleneck_channels: base_channels << depth,
            aspp_rates,
            dropout: (0..=depth).map(|i| if i < depth.div_ceil(2) { 0.1 } else { 0.2 }).collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.input_channels == 0 || self.base_channels == 0 || self.bottleneck_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.depth == 0 || self.depth > 16 {
            return bad(format!("depth {} out of range", self.depth));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad(format!("dilation rates {:?} must be nonempty and positive", self.aspp_rates));
        }
        if self.dropout.len() != self.depth + 1 {
            return bad(format!(
                "{} dropout rates for {} levels",
                self.dropout.len(),
                self.depth + 1
            ));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return bad(format!("dropout rates {:?} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Channels at encoder level `l` (1-based).
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels << (l - 1)
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from this seed.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    /// `None` for biases, which start at zero.
    fan_in: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    specs: Vec<ParamSpec>,
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(len: usize, p: f64, seed: u64, level: usize) -> Vec<T> {
    let mut rng = SplitMix64::derived(seed, level as u64);
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.next_f64() >= p { keep } else { T::zero() })
        .collect()
}

fn layer_specs(cfg: &UNetConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut conv = |name: &str, f: usize, c: usize, k: usize, bias: bool| {
        specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![f, c, k, k],
            fan_in: Some(c * k * k),
        });
        if bias {
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![f],
                fan_in: None,
            });
        }
    };
    let mut prev = cfg.input_channels;
    for l in 1..=cfg.depth {
        let c = cfg.level_channels(l);
        conv(&format!("enc{l}.conv1"), c, prev, 3, true);
        conv(&format!("enc{l}.conv2"), c, c, 3, true);
        prev = c;
    }
    let bn = cfg.bottleneck_channels;
    conv("bottleneck.conv_in", bn, prev, 3, true);
    for i in 0..cfg.aspp_rates.len() {
        conv(&format!("aspp.branch{i}"), bn, bn, 3, true);
    }
    conv("aspp.fuse", bn, bn * cfg.aspp_rates.len(), 1, true);
    conv("bottleneck.conv_out", bn, bn, 3, true);

    let mut below = bn;
    for l in (1..=cfg.depth).rev() {
        let c = cfg.level_channels(l);
        let f_int = (c / 2).max(1);
        specs.push(ParamSpec {
            name: format!("dec{l}.up.weight"),
            shape: vec![below, c, 2, 2],
            fan_in: Some(below),
        });
        specs.push(ParamSpec {
            name: format!("dec{l}.up.bias"),
            shape: vec![c],
            fan_in: None,
        });
        for (name, shape, fan_in) in [
            ("wx", vec![f_int, c, 1, 1], Some(c)),
            ("wg", vec![f_int, c, 1, 1], Some(c)),
            ("bxg", vec![f_int], None),
            ("psi", vec![1, f_int, 1, 1], Some(f_int)),
            ("bpsi", vec![1], None),
        ] {
            specs.push(ParamSpec {
                name: format!("dec{l}.gate.{name}"),
                shape,
                fan_in,
            });
        }
        let mut conv = |name: String, f: usize, cin: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![f, cin, 3, 3],
                fan_in: Some(cin * 9),
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![f],
                fan_in: None,
            });
        };
        conv(format!("dec{l}.conv1"), c, 2 * c);
        conv(format!("dec{l}.conv2"), c, c);
        below = c;
    }
    specs.push(ParamSpec {
        name: "head.weight".into(),
        shape: vec![1, cfg.base_channels, 1, 1],
        fan_in: Some(cfg.base_channels),
    });
    specs.push(ParamSpec {
        name: "head.bias".into(),
        shape: vec![1],
        fan_in: None,
    });
    specs
}

/// Builds the network description and its He-uniform initialised weights.
pub fn build_unet<T: Scalar>(cfg: &UNetConfig) -> Result<(UNet, ParamStore<T>)> {
    let net = UNet::new(cfg)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut store = ParamStore::new();
    for spec in &net.specs {
        let n: usize = spec.shape.iter().product();
        let data = match spec.fan_in {
            Some(fan_in) => {
                let a = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.uniform(-a, a))).collect()
            }
            None => vec![T::zero(); n],
        };
        store.insert(&spec.name, Tensor::new(&spec.shape, data)?)?;
    }
    Ok((net, store))
}

impl UNet {
    /// Network description without weights.
    pub fn new(cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            specs: layer_specs(cfg),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Parameter names and shapes in construction order.
    pub fn param_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.specs.iter().map(|s| (s.name.as_str(), s.shape.as_slice()))
    }

    /// Checks that `store` holds exactly this network's parameters.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.specs.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} parameters, network needs {}",
                store.len(),
                self.specs.len()
            )));
        }
        for s in &self.specs {
            let v = store.value(&s.name)?;
            if v.shape() != s.shape.as_slice() {
                return Err(NetError::ShapeMismatch(format!("{}: {:?} vs {:?}", s.name, v.shape(), s.shape)));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.cfg.size_multiple();
        match shape {
            [c, h, w] if *c == self.cfg.input_channels && h % m == 0 && w % m == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(NetError::ShapeMismatch(format!(
                "input {shape:?}: need [{}, H, W] with H, W multiples of {m}",
                self.cfg.input_channels
            ))),
        }
    }

    /// Records a forward pass on `g` and returns the probability map node.
    pub fn record<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g.value(x)?.shape())?;
        let p = |g: &mut Graph<T>, name: String| -> Result<Var> {
            let v = params.value(&name)?.clone();
            Ok(g.param(&name, v))
        };
        let dropout = |g: &mut Graph<T>, x: Var, level: usize| -> Result<Var> {
            let rate = self.cfg.dropout[level];
            match mode {
                Mode::Train { seed } if rate > 0.0 => {
                    let mask = dropout_mask(g.value(x)?.numel(), rate, seed, level);
                    g.dropout(x, mask)
                }
                _ => Ok(x),
            }
        };
        let conv = |g: &mut Graph<T>, x: Var, name: &str, dilation: usize| -> Result<Var> {
            let w = p(g, format!("{name}.weight"))?;
            let b = p(g, format!("{name}.bias"))?;
            g.conv2d(x, w, Some(b), dilation)
        };

        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for l in 1..=self.cfg.depth {
            let a = conv(g, h, &format!("enc{l}.conv1"), 1)?;
            let a = g.relu(a)?;
            let a = conv(g, a, &format!("enc{l}.conv2"), 1)?;
            let a = g.relu(a)?;
            let a = dropout(g, a, l - 1)?;
            skips.push(a);
            h = g.max_pool2(a)?;
        }

        let a = conv(g, h, "bottleneck.conv_in", 1)?;
        let a = g.relu(a)?;
        let mut branches = Vec::with_capacity(self.cfg.aspp_rates.len());
        for (i, &rate) in self.cfg.aspp_rates.iter().enumerate() {
            let w = p(g, format!("aspp.branch{i}.weight"))?;
            let b = p(g, format!("aspp.branch{i}.bias"))?;
            branches.push((w, b, rate));
        }
        let aspp = AsppVars {
            branches,
            fuse_weight: p(g, "aspp.fuse.weight".into())?,
            fuse_bias: p(g, "aspp.fuse.bias".into())?,
        };
        let a = g.aspp(a, &aspp)?;
        let a = conv(g, a, "bottleneck.conv_out", 1)?;
        let a = g.relu(a)?;
        h = dropout(g, a, self.cfg.depth)?;

        for l in (1..=self.cfg.depth).rev() {
            let w = p(g, format!("dec{l}.up.weight"))?;
            let b = p(g, format!("dec{l}.up.bias"))?;
            let up = g.transposed_conv2d(h, w, Some(b))?;
            let gate = GateVars {
                wx: p(g, format!("dec{l}.gate.wx"))?,
                wg: p(g, format!("dec{l}.gate.wg"))?,
                bxg: p(g, format!("dec{l}.gate.bxg"))?,
                psi: p(g, format!("dec{l}.gate.psi"))?,
                bpsi: p(g, format!("dec{l}.gate.bpsi"))?,
            };
            let (gated, _) = g.attention_gate(skips[l - 1], up, &gate)?;
            let cat = g.concat(&[gated, up])?;
            let a = conv(g, cat, &format!("dec{l}.conv1"), 1)?;
            let a = g.relu(a)?;
            let a = conv(g, a, &format!("dec{l}.conv2"), 1)?;
            h = g.relu(a)?;
        }

        let logits = conv(g, h, "head", 1)?;
        g.sigmoid(logits)
    }

    /// Probability map `[1, H, W]` for a `[C, H, W]` input.
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.record(&mut g, params, xv, mode)?;
        Ok(g.value(y)?.clone())
    }
}
