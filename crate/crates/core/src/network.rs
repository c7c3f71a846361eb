//! Hierarchical illuminant estimation networks.
//!
//! ```text
//! image ──ReWU(3→16)──GAP──────────────────────────────┐
//!   └─conv 3x3/2, 32─relu─ReWU─GAP─────────────────────┤
//!        └─conv 3x3, 32─relu─ReWU─GAP──────────────────┤ concat
//!             └─conv 3x3, 64─relu─ReWU─GAP─────────────┘   │
//!                                    fc ─ fc ─ fc ─ 3 ─ softmax   (illuminant)
//!                                    fc ─ fc ─ fc ─ 1 ─ sigmoid   (confidence)
//! ```
//!
//! The number of convolution levels is the hierarchy count (1 to 3). Every
//! feature map is tapped by its own reweight unit; the reweighted maps are
//! pooled and concatenated, so the concatenated length depends only on the
//! channel counts (35, 67 or 131) and not on the input size.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rewu::{self, Normalization, ReWUParams, ReWUVars};
use crate::rng::{self, Rng};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// Convolution widths of the three levels.
pub const CONV_CHANNELS: [usize; 3] = [32, 32, 64];
/// Constraint count of the reweight unit on the input image.
pub const INPUT_REWU_KERNELS: usize = 16;
/// Standard deviation of the fully-connected initializer.
pub const FC_INIT_STD: f64 = 0.01;
pub const DEFAULT_DROPOUT: f64 = 0.2;
/// Input size used at desk scale; the networks accept any size.
pub const DESK_INPUT_SIZE: usize = 64;
pub const FULL_SCALE_INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub hierarchy: usize,
    /// Side of the square patches fed to the network.
    pub input_size: usize,
    pub with_confidence_branch: bool,
    pub dropout_rate: f64,
}

impl NetworkSpec {
    pub fn new(hierarchy: usize, with_confidence_branch: bool) -> Result<Self> {
        let spec = NetworkSpec {
            hierarchy,
            input_size: DESK_INPUT_SIZE,
            with_confidence_branch,
            dropout_rate: DEFAULT_DROPOUT,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.hierarchy) {
            return Err(Error::contract(
                "NetworkSpec",
                format!("hierarchy must be 1, 2 or 3, got {}", self.hierarchy),
            ));
        }
        if self.input_size < 2 {
            return Err(Error::contract("NetworkSpec", "input size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::contract("NetworkSpec", "dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn conv_channels(&self) -> &'static [usize] {
        &CONV_CHANNELS[..self.hierarchy]
    }

    /// Hidden widths of both fully-connected branches.
    pub fn fc_widths(&self) -> [usize; 3] {
        match self.hierarchy {
            1 => [64, 32, 16],
            2 => [128, 64, 32],
            _ => [256, 128, 64],
        }
    }

    /// Length of the pooled, concatenated activation vector.
    pub fn concat_len(&self) -> usize {
        3 + self.conv_channels().iter().sum::<usize>()
    }

    /// Ordered parameter names and shapes.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let push_rewu = |out: &mut Vec<(String, Vec<usize>)>, level: usize, c: usize, k: usize| {
            out.push((format!("rewu{level}.kernel"), vec![1, 1, c, k]));
            out.push((format!("rewu{level}.thresholds"), vec![k]));
            out.push((format!("rewu{level}.alpha"), vec![1]));
        };
        push_rewu(&mut out, 0, 3, INPUT_REWU_KERNELS);
        let mut cin = 3;
        for (i, &c) in self.conv_channels().iter().enumerate() {
            let level = i + 1;
            out.push((format!("conv{level}.kernel"), vec![3, 3, cin, c]));
            out.push((format!("conv{level}.bias"), vec![c]));
            push_rewu(&mut out, level, c, c);
            cin = c;
        }
        let mut branch = |prefix: &str, outputs: usize| {
            let mut n = self.concat_len();
            for (i, &m) in self.fc_widths().iter().enumerate() {
                out.push((format!("{prefix}.fc{}.weight", i + 1), vec![n, m]));
                out.push((format!("{prefix}.fc{}.bias", i + 1), vec![m]));
                n = m;
            }
            out.push((format!("{prefix}.out.weight"), vec![n, outputs]));
            out.push((format!("{prefix}.out.bias"), vec![outputs]));
        };
        branch("illum", 3);
        if self.with_confidence_branch {
            branch("conf", 1);
        }
        out
    }

    /// Bytes identifying the architecture. Input size and dropout rate do
    /// not change the parameter set and are left out.
    pub fn canonical_encoding(&self) -> Vec<u8> {
        let mut b = Vec::from(&b"rewu-net/1"[..]);
        b.push(self.hierarchy as u8);
        b.extend_from_slice(&(INPUT_REWU_KERNELS as u32).to_le_bytes());
        for c in self.conv_channels() {
            b.extend_from_slice(&(*c as u32).to_le_bytes());
        }
        for w in self.fc_widths() {
            b.extend_from_slice(&(w as u32).to_le_bytes());
        }
        b.push(self.with_confidence_branch as u8);
        b
    }

    /// FNV-1a hash of [`Self::canonical_encoding`].
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(&self.canonical_encoding())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Number of trainable scalars of a network built from `spec`.
pub fn count_parameters(spec: &NetworkSpec) -> usize {
    spec.layer_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Parameters of one network, in [`NetworkSpec::layer_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    spec: NetworkSpec,
    params: Vec<NamedTensor>,
}

impl NetworkWeights {
    /// Checks that `params` matches the spec's layers name by name and shape
    /// by shape.
    pub fn from_parts(spec: NetworkSpec, params: Vec<NamedTensor>) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_shapes();
        if layers.len() != params.len() {
            return Err(Error::SpecMismatch(format!(
                "spec has {} parameter tensors, got {}",
                layers.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layers.iter().zip(&params) {
            if *name != p.name {
                return Err(Error::SpecMismatch(format!(
                    "expected parameter {name}, got {}",
                    p.name
                )));
            }
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::shape("NetworkWeights", shape, p.tensor.shape()));
            }
        }
        Ok(NetworkWeights { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameters of the reweight unit at `level` (0 is the input image).
    pub fn rewu(&self, level: usize) -> Option<ReWUParams> {
        Some(ReWUParams {
            kernel: self.get(&format!("rewu{level}.kernel"))?.clone(),
            thresholds: self.get(&format!("rewu{level}.thresholds"))?.clone(),
            alpha: self.get(&format!("rewu{level}.alpha"))?.item(),
        })
    }

    pub fn set_spec_input_size(&mut self, input_size: usize) {
        self.spec.input_size = input_size;
    }
}

/// Whether a parameter belongs to the confidence branch.
pub fn is_confidence_param(name: &str) -> bool {
    name.starts_with("conf.")
}

/// Random initial weights: reweight units per [`rewu::init_rewu`],
/// fan-in scaled normal convolution kernels, small normal fully-connected
/// weights, zero biases.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkWeights> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut params = Vec::new();
    let normal = |rng: &mut Rng, shape: &[usize], std: f64| {
        Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    };
    let add_rewu = |params: &mut Vec<NamedTensor>, rng: &mut Rng, level: usize, c: usize, k: usize| {
        let p = rewu::init_rewu_from(c, k, rng)?;
        params.push(NamedTensor {
            name: format!("rewu{level}.kernel"),
            tensor: p.kernel,
        });
        params.push(NamedTensor {
            name: format!("rewu{level}.thresholds"),
            tensor: p.thresholds,
        });
        params.push(NamedTensor {
            name: format!("rewu{level}.alpha"),
            tensor: Tensor::scalar(p.alpha),
        });
        Ok::<_, Error>(())
    };

    add_rewu(&mut params, &mut rng, 0, 3, INPUT_REWU_KERNELS)?;
    let mut cin = 3;
    for (i, &c) in spec.conv_channels().iter().enumerate() {
        let level = i + 1;
        let std = libm::sqrt(2.0 / (9 * cin) as f64);
        params.push(NamedTensor {
            name: format!("conv{level}.kernel"),
            tensor: normal(&mut rng, &[3, 3, cin, c], std),
        });
        params.push(NamedTensor {
            name: format!("conv{level}.bias"),
            tensor: Tensor::zeros(&[c]),
        });
        add_rewu(&mut params, &mut rng, level, c, c)?;
        cin = c;
    }
    let layers = spec.layer_shapes();
    for (name, shape) in layers.iter().skip(params.len()) {
        let tensor = if name.ends_with(".weight") {
            normal(&mut rng, shape, FC_INIT_STD)
        } else {
            Tensor::zeros(shape)
        };
        params.push(NamedTensor {
            name: name.clone(),
            tensor,
        });
    }
    NetworkWeights::from_parts(spec.clone(), params)
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Everything outside the confidence branch is frozen.
    ConfidenceOnly,
    Nothing,
}

impl Trainable {
    fn allows(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::ConfidenceOnly => is_confidence_param(name),
            Trainable::Nothing => false,
        }
    }
}

/// Forward mode. Dropout is only active in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// Tape handles produced by [`forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    /// l1-normalized illuminant estimate (softmax output).
    pub illuminant: Var,
    /// Confidence in (0, 1), when the spec has the branch.
    pub confidence: Option<Var>,
    /// One handle per parameter, in weight order.
    pub params: Vec<Var>,
    /// Reweighting maps, level 0 first.
    pub reweight_maps: Vec<Var>,
    pub concat: Var,
}

fn fc_branch(
    tape: &mut Tape,
    mut x: Var,
    vars: &[Var],
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let layers = vars.len() / 2;
    for l in 0..layers {
        x = tape.fully_connected(x, vars[2 * l], vars[2 * l + 1])?;
        if l + 1 < layers {
            x = tape.relu(x);
            if let Mode::Train(rng) = mode {
                if dropout > 0.0 {
                    x = tape.dropout(x, dropout, rng)?;
                }
            }
        }
    }
    Ok(x)
}

/// Records a full forward pass of `weights` on `image` (`H x W x 3`).
pub fn forward_graph(
    tape: &mut Tape,
    weights: &NetworkWeights,
    image: &Tensor,
    mode: Mode<'_>,
    trainable: Trainable,
) -> Result<ForwardGraph> {
    let params: Vec<Var> = weights
        .params
        .iter()
        .map(|p| tape.leaf(p.tensor.clone(), trainable.allows(&p.name)))
        .collect();
    let input = tape.constant(image.clone());
    forward_on(tape, &weights.spec, &params, input, mode)
}

/// Forward pass over parameters already on the tape, one handle per entry
/// of [`NetworkSpec::layer_shapes`].
pub fn forward_on(
    tape: &mut Tape,
    spec: &NetworkSpec,
    params: &[Var],
    image: Var,
    mut mode: Mode<'_>,
) -> Result<ForwardGraph> {
    let (_, _, c) = tape.value(image).dims3()?;
    if c != 3 {
        return Err(Error::contract(
            "forward",
            format!("image must have 3 channels, got {c}"),
        ));
    }
    let layers = spec.layer_shapes();
    if layers.len() != params.len() {
        return Err(Error::SpecMismatch(format!(
            "spec has {} parameter tensors, got {}",
            layers.len(),
            params.len()
        )));
    }
    for ((name, shape), v) in layers.iter().zip(params) {
        if tape.value(*v).shape() != shape.as_slice() {
            return Err(Error::SpecMismatch(format!("{name}: expected shape {shape:?}, got {:?}", tape.value(*v).shape())));
        }
    }
    let var = |name: &str| {
        params[layers
            .iter()
            .position(|(n, _)| n == name)
            .expect("layer names come from the spec")]
    };
    let rewu_vars = |level: usize| ReWUVars {
        kernel: var(&format!("rewu{level}.kernel")),
        thresholds: var(&format!("rewu{level}.thresholds")),
        alpha: var(&format!("rewu{level}.alpha")),
    };

    let mut feature = image;
    let mut pooled = Vec::new();
    let mut reweight_maps = Vec::new();
    let out = rewu::rewu_graph(tape, feature, rewu_vars(0), Normalization::Channel)?;
    pooled.push(tape.global_average_pool(out.reweighted)?);
    reweight_maps.push(out.weights);
    for level in 1..=spec.hierarchy {
        let stride = if level == 1 { 2 } else { 1 };
        let kernel = var(&format!("conv{level}.kernel"));
        let bias = var(&format!("conv{level}.bias"));
        let conv = tape.conv2d(feature, kernel, bias, stride, Padding::Same)?;
        feature = tape.relu(conv);
        let out = rewu::rewu_graph(tape, feature, rewu_vars(level), Normalization::Channel)?;
        pooled.push(tape.global_average_pool(out.reweighted)?);
        reweight_maps.push(out.weights);
    }
    let concat = tape.concat(&pooled);

    let branch_vars = |prefix: &str| -> Vec<Var> {
        layers
            .iter()
            .zip(params)
            .filter(|((name, _), _)| name.starts_with(prefix))
            .map(|(_, v)| *v)
            .collect()
    };
    let illum_vars = branch_vars("illum.");
    let logits = fc_branch(tape, concat, &illum_vars, spec.dropout_rate, &mut mode)?;
    let illuminant = tape.softmax(logits);
    let confidence = if spec.with_confidence_branch {
        let conf_vars = branch_vars("conf.");
        let logit = fc_branch(tape, concat, &conf_vars, spec.dropout_rate, &mut mode)?;
        Some(tape.sigmoid(logit))
    } else {
        None
    };
    Ok(ForwardGraph {
        illuminant,
        confidence,
        params: params.to_vec(),
        reweight_maps,
        concat,
    })
}

/// Output of an untracked forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub illuminant: [f64; 3],
    pub confidence: Option<f64>,
}

pub fn forward(weights: &NetworkWeights, image: &Tensor, mode: Mode<'_>) -> Result<Estimate> {
    let mut tape = Tape::new();
    let g = forward_graph(&mut tape, weights, image, mode, Trainable::Nothing)?;
    let l = tape.value(g.illuminant).data();
    Ok(Estimate {
        illuminant: [l[0], l[1], l[2]],
        confidence: g.confidence.map(|c| tape.value(c).item()),
    })
}

/// Reweighting maps of every level for inspection, level 0 first.
pub fn reweight_maps(weights: &NetworkWeights, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let g = forward_graph(&mut tape, weights, image, Mode::Eval, Trainable::Nothing)?;
    Ok(g.reweight_maps.iter().map(|v| tape.value(*v).clone()).collect())
}
