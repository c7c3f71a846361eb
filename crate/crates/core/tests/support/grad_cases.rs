// Finite-difference cases for every tape operation, the reweight unit and a
// full 1-hierarchy network. Shared with the acceptance target.

use rand::Rng as _;
use rand_distr::StandardNormal;
use reweight_core::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use reweight_core::network::{self, Mode, NetworkSpec};
use reweight_core::rewu::{self, Normalization, ReWUVars};
use reweight_core::rng::{self, Rng};
use reweight_core::tape::{Padding, Tape, Var};
use reweight_core::{Result, Tensor};

fn normal(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.sample::<f64, _>(StandardNormal))
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn simplex(r: &mut Rng) -> Tensor {
    let v: Vec<f64> = (0..3).map(|_| r.random_range(0.1..1.0)).collect();
    let s: f64 = v.iter().sum();
    Tensor::vector(&v.iter().map(|x| x / s).collect::<Vec<_>>())
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
    pub max_per_input: Option<usize>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: Build) -> Case {
    Case {
        name,
        inputs,
        build,
        max_per_input: None,
    }
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut r = rng::seeded(seed);
    let r = &mut r;
    let mut out = vec![
        case(
            "conv2d same stride 1",
            vec![normal(r, &[5, 6, 2]), normal(r, &[3, 3, 2, 3]), normal(r, &[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, Padding::Same)),
        ),
        case(
            "conv2d same stride 2",
            vec![normal(r, &[7, 6, 3]), normal(r, &[3, 3, 3, 2]), normal(r, &[2])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, Padding::Same)),
        ),
        case(
            "conv2d valid",
            vec![normal(r, &[5, 5, 2]), normal(r, &[3, 2, 2, 2]), normal(r, &[2])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, Padding::Valid)),
        ),
        case("relu", vec![normal(r, &[4, 4, 2])], Box::new(|t, v| Ok(t.relu(v[0])))),
        case("min_channel", vec![normal(r, &[3, 4, 5])], Box::new(|t, v| t.min_channel(v[0]))),
        case(
            "hadamard",
            vec![normal(r, &[3, 3, 4]), normal(r, &[3, 3, 4])],
            Box::new(|t, v| t.hadamard(v[0], v[1])),
        ),
        case(
            "hadamard broadcast",
            vec![normal(r, &[3, 3, 4]), normal(r, &[3, 3, 1])],
            Box::new(|t, v| t.hadamard(v[0], v[1])),
        ),
        case(
            "add_channelwise",
            vec![normal(r, &[3, 2, 4]), normal(r, &[4])],
            Box::new(|t, v| t.add_channelwise(v[0], v[1])),
        ),
        case(
            "scale",
            vec![normal(r, &[3, 3, 2]), normal(r, &[1])],
            Box::new(|t, v| t.scale(v[0], v[1])),
        ),
        case(
            "channel_normalize",
            vec![normal(r, &[3, 3, 5])],
            Box::new(|t, v| t.channel_normalize(v[0], rewu::CHANNEL_NORM_EPS)),
        ),
        case(
            "global_average_pool",
            vec![normal(r, &[4, 3, 5])],
            Box::new(|t, v| t.global_average_pool(v[0])),
        ),
        case(
            "fully_connected",
            vec![normal(r, &[6]), normal(r, &[6, 4]), normal(r, &[4])],
            Box::new(|t, v| t.fully_connected(v[0], v[1], v[2])),
        ),
        case("softmax", vec![normal(r, &[5])], Box::new(|t, v| Ok(t.softmax(v[0])))),
        case("sigmoid", vec![normal(r, &[5])], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        case(
            "concat",
            vec![normal(r, &[3]), normal(r, &[2, 2, 1]), normal(r, &[4])],
            Box::new(|t, v| Ok(t.concat(v))),
        ),
        case(
            "dropout",
            vec![normal(r, &[12])],
            Box::new(move |t, v| t.dropout(v[0], 0.3, &mut rng::seeded(seed))),
        ),
        case("sum", vec![normal(r, &[2, 3, 2])], Box::new(|t, v| Ok(t.sum(v[0])))),
        case(
            "mse",
            vec![simplex(r), simplex(r)],
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
        case(
            "task_loss",
            vec![simplex(r), simplex(r), uniform(r, &[1], 0.1, 1.0)],
            Box::new(|t, v| t.task_loss(v[0], v[1], v[2])),
        ),
        case(
            "neg_log",
            vec![uniform(r, &[1], 0.05, 1.0)],
            Box::new(|t, v| t.neg_log(v[0])),
        ),
        case(
            "add_scaled",
            vec![normal(r, &[4]), normal(r, &[4])],
            Box::new(|t, v| t.add_scaled(v[0], v[1], 0.37)),
        ),
        case(
            "cosine_loss",
            vec![uniform(r, &[3], 0.1, 1.0), uniform(r, &[3], 0.1, 1.0)],
            Box::new(|t, v| t.cosine_loss(v[0], v[1])),
        ),
    ];

    // total loss through the confidence logit
    let lambda = r.random_range(0.01..1.0);
    out.push(case(
        "total loss via confidence logit",
        vec![simplex(r), simplex(r), normal(r, &[1])],
        Box::new(move |t, v| {
            let c = t.sigmoid(v[2]);
            let task = t.task_loss(v[0], v[1], c)?;
            let reg = t.neg_log(c)?;
            t.add_scaled(task, reg, lambda)
        }),
    ));

    let rewu_params = rewu::init_rewu_from(4, 6, r).unwrap();
    out.push(case(
        "reweight unit",
        vec![
            uniform(r, &[5, 5, 4], 0.0, 1.0),
            rewu_params.kernel,
            rewu_params.thresholds,
            Tensor::scalar(rewu_params.alpha),
        ],
        Box::new(|t, v| {
            let vars = ReWUVars {
                kernel: v[1],
                thresholds: v[2],
                alpha: v[3],
            };
            Ok(rewu::rewu_graph(t, v[0], vars, Normalization::Channel)?.reweighted)
        }),
    ));

    out.push(network_case(seed, r));
    out
}

/// Whole 1-hierarchy network plus MSE against a random illuminant, with
/// respect to the image and every parameter.
fn network_case(seed: u64, r: &mut Rng) -> Case {
    let spec = NetworkSpec::new(1, false).unwrap();
    let mut weights = network::build_network(&spec, seed).unwrap();
    // Trained networks have non-trivial FC weights; the 0.01 initializer
    // makes the softmax nearly flat, so widen it for a sharper check.
    for p in weights.params_mut() {
        if p.name.starts_with("illum.") {
            p.tensor = normal(r, p.tensor.shape()).map(|x| 0.3 * x);
        }
    }
    let image = uniform(r, &[16, 16, 3], 0.05, 1.0);
    let target = simplex(r);
    let mut inputs = vec![image];
    inputs.extend(weights.params().iter().map(|p| p.tensor.clone()));
    Case {
        name: "1-hierarchy network + mse",
        inputs,
        build: Box::new(move |t, v| {
            let g = network::forward_on(t, &spec, &v[1..], v[0], Mode::Eval)?;
            let target = t.constant(target.clone());
            t.mse(g.illuminant, target)
        }),
        max_per_input: Some(24),
    }
}

pub fn run(case: &Case, seed: u64) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig {
        max_per_input: case.max_per_input,
        seed,
        ..GradCheckConfig::default()
    };
    check_gradients(&case.inputs, &cfg, |t, v| (case.build)(t, v))
}
