use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::tensor::{Scalar, ShapeError, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {0} is missing")]
    MissingParam(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Resolution levels including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub gate: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            in_channels: 4,
            num_classes: 4,
            gate: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 2 {
            return Err(ModelError::Config(format!(
                "depth {} must be at least 2",
                self.depth
            )));
        }
        if self.depth > 12 {
            return Err(ModelError::Config(format!(
                "depth {} is unreasonably large",
                self.depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of a gate's intermediate features for a skip tensor with `c` channels.
    pub fn gate_channels(c: usize) -> usize {
        (c / 2).max(1)
    }

    /// Spatial dims must halve cleanly at every pooling step.
    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<(), ModelError> {
        let factor = 1usize << (self.depth - 1);
        if dims.iter().any(|&d| d == 0 || d % factor != 0) {
            return Err(ModelError::Config(format!(
                "spatial dims {dims:?} are not divisible by {factor} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs feeding each output unit; zero for biases.
    pub fan_in: usize,
}

fn push_conv(specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin, k, k, k],
        fan_in: cin * k * k * k,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![cout],
        fan_in: 0,
    });
}

/// Every parameter of the network, in initialization and storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let mut cin = cfg.in_channels;
    for l in 0..cfg.depth - 1 {
        let c = cfg.channels(l);
        push_conv(&mut s, &format!("enc{l}.conv1"), cin, c, 3);
        push_conv(&mut s, &format!("enc{l}.conv2"), c, c, 3);
        cin = c;
    }
    let cb = cfg.channels(cfg.depth - 1);
    push_conv(&mut s, "bottleneck.conv1", cin, cb, 3);
    push_conv(&mut s, "bottleneck.conv2", cb, cb, 3);
    for l in (0..cfg.depth - 1).rev() {
        let (c, cg) = (cfg.channels(l), cfg.channels(l + 1));
        if cfg.gate {
            let inter = ModelConfig::gate_channels(c);
            push_conv(&mut s, &format!("dec{l}.gate.wx"), c, inter, 2);
            push_conv(&mut s, &format!("dec{l}.gate.wg"), cg, inter, 1);
            push_conv(&mut s, &format!("dec{l}.gate.psi"), inter, 1, 1);
        }
        push_conv(&mut s, &format!("dec{l}.conv1"), cg + c, c, 3);
        push_conv(&mut s, &format!("dec{l}.conv2"), c, c, 3);
    }
    push_conv(&mut s, "head", cfg.channels(0), cfg.num_classes, 1);
    s
}

/// Network parameters with stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

impl UNet {
    /// He-uniform weights and zero biases drawn from a generator seeded by `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let specs = param_specs(&cfg);
        let params = specs
            .iter()
            .map(|s| {
                if s.fan_in == 0 {
                    Tensor::zeros(s.shape.clone())
                } else {
                    let bound = (6.0 / s.fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(s.shape.clone(), |_| rng.gen_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self {
            config: cfg,
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
        })
    }

    /// Reassembles a model from named tensors, checking them against `cfg`.
    pub fn from_params(
        cfg: ModelConfig,
        named: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if named.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == &spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            names.push(spec.name.clone());
            params.push(t.clone());
        }
        Ok(Self {
            config: cfg,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `g`, as variables when `trainable`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = p.cast::<T>();
                if trainable {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams {
            names: self.names.clone(),
            vars,
        }
    }

    /// Class probabilities `(N, num_classes, D, H, W)` for a batch `(N, in_channels, D, H, W)`.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = forward_graph(&self.config, &mut g, &params, x)?;
        Ok(g.value(out).clone())
    }
}

/// Graph handles of a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn new(names: Vec<String>, vars: Vec<Var>) -> Self {
        Self { names, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn conv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, ModelError> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        Ok(g.conv3d(x, w, Some(b), stride, pad)?)
    }

    fn double_conv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var, ModelError> {
        let h = self.conv(g, &format!("{prefix}.conv1"), x, 1, 1)?;
        let h = g.relu(h);
        let h = self.conv(g, &format!("{prefix}.conv2"), h, 1, 1)?;
        Ok(g.relu(h))
    }

    pub fn gate(&self, prefix: &str) -> Result<GateParams, ModelError> {
        let p = |s: &str| self.get(&format!("{prefix}.{s}"));
        Ok(GateParams {
            wx: p("wx.weight")?,
            bx: p("wx.bias")?,
            wg: p("wg.weight")?,
            bg: p("wg.bias")?,
            psi: p("psi.weight")?,
            psi_bias: p("psi.bias")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub wx: Var,
    pub bx: Var,
    pub wg: Var,
    pub bg: Var,
    pub psi: Var,
    pub psi_bias: Var,
}

/// Single-channel attention coefficients for `x` at its own resolution.
pub fn gate_coefficients<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gating: Var,
    p: &GateParams,
) -> Result<Var, ShapeError> {
    let xs = g.value(x).dims5("attention_gate")?;
    let gs = g.value(gating).dims5("attention_gate")?;
    if xs[0] != gs[0] || (2..5).any(|a| xs[a] != 2 * gs[a]) {
        return Err(ShapeError::Incompatible {
            op: "attention_gate",
            lhs: xs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    let theta = g.conv3d(x, p.wx, Some(p.bx), 2, 0)?;
    let phi = g.conv3d(gating, p.wg, Some(p.bg), 1, 0)?;
    let sum = g.add(theta, phi)?;
    let act = g.relu(sum);
    let logits = g.conv3d(act, p.psi, Some(p.psi_bias), 1, 0)?;
    let a = g.sigmoid(logits);
    g.resize_trilinear(a, [xs[2], xs[3], xs[4]])
}

/// Skip tensor `x` reweighted by coefficients computed from `x` and the
/// next-coarser tensor `gating` (half of x's spatial resolution).
pub fn attention_gate<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gating: Var,
    p: &GateParams,
) -> Result<Var, ShapeError> {
    let alpha = gate_coefficients(g, x, gating, p)?;
    g.mul_broadcast(x, alpha)
}

/// Records the whole network on `g` and returns the softmax output.
pub fn forward_graph<T: Scalar>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    params: &BoundParams,
    input: Var,
) -> Result<Var, ModelError> {
    let shape = g.value(input).dims5("unet_forward")?;
    if shape[1] != cfg.in_channels {
        return Err(ModelError::Shape(ShapeError::Incompatible {
            op: "unet_forward",
            lhs: vec![cfg.in_channels],
            rhs: shape.to_vec(),
        }));
    }
    cfg.check_input_dims([shape[2], shape[3], shape[4]])?;

    let mut skips = Vec::with_capacity(cfg.depth - 1);
    let mut h = input;
    for l in 0..cfg.depth - 1 {
        let e = params.double_conv(g, &format!("enc{l}"), h)?;
        skips.push(e);
        h = g.maxpool3d(e, 2, 2)?;
    }
    h = params.double_conv(g, "bottleneck", h)?;
    for l in (0..cfg.depth - 1).rev() {
        let skip = skips[l];
        let up = g.upsample_trilinear(h, 2)?;
        let skip = if cfg.gate {
            let gp = params.gate(&format!("dec{l}.gate"))?;
            attention_gate(g, skip, h, &gp)?
        } else {
            skip
        };
        let cat = g.concat_channels(up, skip)?;
        h = params.double_conv(g, &format!("dec{l}"), cat)?;
    }
    let logits = params.conv(g, "head", h, 1, 0)?;
    Ok(g.softmax_channels(logits)?)
}
