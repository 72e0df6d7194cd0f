//! Gradcheck registry: every differentiable operator plus the end-to-end
//! tiny encoder, decoder and two-step attention graphs.
//!
//! Finite differences are only meaningful away from relu kinks, sorting
//! ties and degenerate batch statistics, so case constructors redraw their
//! inputs (deterministically, keyed on the seed) until the recorded graph
//! is healthy. That selects checkable points; it never touches the
//! gradients being checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{
    gradcheck, random_tensor, AutogradError, BnMode, BnStats, Graph, GradcheckReport, Tensor,
    TensorId,
};
use crate::model::{BoundParams, ModelConfig, SedModel};
use crate::pooling::{init_two_step_params, two_step_forward, TWO_STEP_PARAM_NAMES};

type CaseFn = Box<dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId, AutogradError> + Send + Sync>;

pub struct RegistryCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub case: CaseFn,
}

const RELU_MARGIN: f64 = 2e-4;
const BN_VAR_FLOOR: f64 = 1e-3;
const TIE_MARGIN: f64 = 1e-3;

fn sub_seed(seed: u64, attempt: u64) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(attempt.wrapping_mul(0xD1B54A32D192ED03) | 1)
}

/// Tensor whose elements stay at least `margin` away from zero.
fn off_kink_tensor(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin.copysign(if *v == 0.0 { 1.0 } else { *v });
        }
    }
    t
}

/// Tensor with pairwise-distinct values so argmax/sorting is stable under
/// the probe step.
fn distinct_tensor(shape: &[usize], seed: u64) -> Tensor {
    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt));
        let t = random_tensor(shape, &mut rng);
        let mut sorted: Vec<f64> = t.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[1] - w[0] > TIE_MARGIN) {
            return t;
        }
    }
    unreachable!()
}

fn randomize_model(model: &mut SedModel, rng: &mut ChaCha8Rng) {
    for (name, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v = if name.ends_with(".bias") {
                rng.gen_range(0.05..0.3)
            } else if name.ends_with(".gamma") {
                rng.gen_range(0.7..1.3)
            } else if name.ends_with(".beta") {
                rng.gen_range(-0.3..0.3)
            } else {
                rng.gen_range(-0.5..0.5)
            };
        }
    }
}

/// Conv biases directly in front of a train-mode batchnorm have an
/// identically zero gradient (the mean subtraction cancels any uniform
/// channel shift), so finite differences of them measure pure roundoff.
/// End-to-end cases keep them constant; the conv2d op case covers bias
/// gradients where they are meaningful.
fn bn_fed_bias(name: &str) -> bool {
    name.contains(".block") && name.contains(".conv") && name.ends_with(".bias")
}

/// Rebuilds the binding for a full store from probed ids plus constant
/// leaves for the skipped parameters.
fn bind_probed(
    g: &mut Graph,
    model: &SedModel,
    probed: &[TensorId],
) -> BoundParams {
    let mut ids = Vec::with_capacity(model.params.len());
    let mut next = 0;
    for (name, value) in model.params.iter() {
        if bn_fed_bias(name) {
            ids.push(g.leaf(value, false));
        } else {
            ids.push(probed[next]);
            next += 1;
        }
    }
    BoundParams { ids }
}

fn probed_inputs(model: &SedModel, head: Tensor) -> Vec<Tensor> {
    let mut inputs = vec![head];
    inputs.extend(
        model
            .params
            .iter()
            .filter(|(name, _)| !bn_fed_bias(name))
            .map(|(_, t)| t.clone()),
    );
    inputs
}

/// Tiny encoder case with inputs and parameters redrawn until the forward
/// pass is finite-difference checkable.
fn encoder_case(seed: u64) -> RegistryCase {
    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt));
        let mut model = SedModel::init(ModelConfig::tiny(2, 16), 0);
        randomize_model(&mut model, &mut rng);
        let x = random_tensor(&[1, 1, 16, 16], &mut rng);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, false);
        let xid = g.leaf(&x, false);
        let mut probe = model.clone();
        if probe.encoder_forward(&mut g, &bound, xid, BnMode::Train).is_err() {
            continue;
        }
        let health = g.fd_health();
        if health.relu_margin < RELU_MARGIN || health.min_bn_var < BN_VAR_FLOOR {
            continue;
        }
        let inputs = probed_inputs(&model, x);
        return RegistryCase {
            name: "encoder_tiny",
            inputs,
            case: Box::new(move |g, ids| {
                let mut m = model.clone();
                let bound = bind_probed(g, &m, &ids[1..]);
                m.encoder_forward(g, &bound, ids[0], BnMode::Train)
                    .map_err(|e| AutogradError::ShapeMismatch { op: "encoder", detail: e.to_string() })
            }),
        };
    }
    unreachable!()
}

fn decoder_case(seed: u64) -> RegistryCase {
    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt));
        let mut model = SedModel::init(ModelConfig::tiny(2, 16), 0);
        randomize_model(&mut model, &mut rng);
        let z = random_tensor(&[1, 2, 1, 2], &mut rng);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, false);
        let zid = g.leaf(&z, false);
        let mut probe = model.clone();
        if probe.decoder_forward(&mut g, &bound, zid, BnMode::Train).is_err() {
            continue;
        }
        let health = g.fd_health();
        if health.relu_margin < RELU_MARGIN || health.min_bn_var < BN_VAR_FLOOR {
            continue;
        }
        let inputs = probed_inputs(&model, z);
        return RegistryCase {
            name: "decoder_tiny",
            inputs,
            case: Box::new(move |g, ids| {
                let mut m = model.clone();
                let bound = bind_probed(g, &m, &ids[1..]);
                m.decoder_forward(g, &bound, ids[0], BnMode::Train)
                    .map_err(|e| AutogradError::ShapeMismatch { op: "decoder", detail: e.to_string() })
            }),
        };
    }
    unreachable!()
}

fn two_step_case(seed: u64) -> RegistryCase {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let c = 2;
    let mut store = init_two_step_params(c, &mut rng);
    for name in TWO_STEP_PARAM_NAMES {
        let shape = store.get(name).shape().to_vec();
        store.set(name, random_tensor(&shape, &mut rng));
    }
    let mut inputs = vec![random_tensor(&[1, c, 3, 4], &mut rng)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    RegistryCase {
        name: "two_step_attention",
        inputs,
        case: Box::new(move |g, ids| {
            let bound = BoundParams::from_ids(&ids[1..]);
            two_step_forward(g, &store, &bound, ids[0])
                .map(|(p, _)| p)
                .map_err(|e| AutogradError::ShapeMismatch { op: "two_step", detail: e.to_string() })
        }),
    }
}

/// All registered cases for one seed.
pub fn registry(seed: u64) -> Vec<RegistryCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<RegistryCase> = Vec::new();

    cases.push(RegistryCase {
        name: "add",
        inputs: vec![random_tensor(&[3, 4], &mut rng), random_tensor(&[3, 4], &mut rng)],
        case: Box::new(|g, ids| g.add(ids[0], ids[1])),
    });
    cases.push(RegistryCase {
        name: "scale",
        inputs: vec![random_tensor(&[2, 5], &mut rng)],
        case: Box::new(|g, ids| Ok(g.scale(ids[0], -2.5))),
    });
    cases.push(RegistryCase {
        name: "mul",
        inputs: vec![random_tensor(&[4, 3], &mut rng), random_tensor(&[4, 3], &mut rng)],
        case: Box::new(|g, ids| g.mul(ids[0], ids[1])),
    });
    cases.push(RegistryCase {
        name: "relu",
        inputs: vec![off_kink_tensor(&[3, 5], 0.05, &mut rng)],
        case: Box::new(|g, ids| Ok(g.relu(ids[0]))),
    });
    cases.push(RegistryCase {
        name: "sigmoid",
        inputs: vec![random_tensor(&[3, 5], &mut rng)],
        case: Box::new(|g, ids| Ok(g.sigmoid(ids[0]))),
    });
    cases.push(RegistryCase {
        name: "conv2d_pad0",
        inputs: vec![
            random_tensor(&[2, 2, 5, 5], &mut rng),
            random_tensor(&[3, 2, 3, 3], &mut rng),
            random_tensor(&[3], &mut rng),
        ],
        case: Box::new(|g, ids| g.conv2d(ids[0], ids[1], ids[2], (0, 0))),
    });
    cases.push(RegistryCase {
        name: "conv2d_pad1",
        inputs: vec![
            random_tensor(&[1, 2, 5, 5], &mut rng),
            random_tensor(&[3, 2, 3, 3], &mut rng),
            random_tensor(&[3], &mut rng),
        ],
        case: Box::new(|g, ids| g.conv2d(ids[0], ids[1], ids[2], (1, 1))),
    });
    cases.push(RegistryCase {
        name: "batchnorm2d_train",
        inputs: vec![
            random_tensor(&[2, 3, 4, 4], &mut rng),
            random_tensor(&[3], &mut rng),
            random_tensor(&[3], &mut rng),
        ],
        case: Box::new(|g, ids| {
            let mut stats = BnStats::new(3);
            g.batchnorm2d(ids[0], ids[1], ids[2], BnMode::Train, &mut stats)
        }),
    });
    cases.push(RegistryCase {
        name: "batchnorm2d_eval",
        inputs: vec![
            random_tensor(&[2, 3, 4, 4], &mut rng),
            random_tensor(&[3], &mut rng),
            random_tensor(&[3], &mut rng),
        ],
        case: Box::new(|g, ids| {
            let mut stats = BnStats::new(3);
            stats.running_mean = vec![0.1, -0.2, 0.3];
            stats.running_var = vec![0.9, 1.1, 0.7];
            stats.initialized = true;
            g.batchnorm2d(ids[0], ids[1], ids[2], BnMode::Eval, &mut stats)
        }),
    });
    cases.push(RegistryCase {
        name: "avgpool2d",
        inputs: vec![random_tensor(&[2, 2, 4, 6], &mut rng)],
        case: Box::new(|g, ids| g.avgpool2d(ids[0])),
    });
    cases.push(RegistryCase {
        name: "upsample2x",
        inputs: vec![random_tensor(&[2, 2, 3, 4], &mut rng)],
        case: Box::new(|g, ids| g.upsample2x(ids[0])),
    });
    cases.push(RegistryCase {
        name: "linear",
        inputs: vec![
            random_tensor(&[5, 3], &mut rng),
            random_tensor(&[4, 3], &mut rng),
            random_tensor(&[4], &mut rng),
        ],
        case: Box::new(|g, ids| g.linear(ids[0], ids[1], ids[2])),
    });
    cases.push(RegistryCase {
        name: "softmax_along",
        inputs: vec![random_tensor(&[3, 4, 2], &mut rng)],
        case: Box::new(|g, ids| g.softmax_along(ids[0], 1)),
    });
    cases.push(RegistryCase {
        name: "sum_along",
        inputs: vec![random_tensor(&[3, 4, 2], &mut rng)],
        case: Box::new(|g, ids| g.sum_along(ids[0], 2)),
    });
    cases.push(RegistryCase {
        name: "permute",
        inputs: vec![random_tensor(&[2, 3, 4], &mut rng)],
        case: Box::new(|g, ids| g.permute(ids[0], &[2, 0, 1])),
    });
    cases.push(RegistryCase {
        name: "reshape",
        inputs: vec![random_tensor(&[2, 6], &mut rng)],
        case: Box::new(|g, ids| g.reshape(ids[0], &[3, 4])),
    });
    let bce_target = Tensor::new(&[6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).expect("fixed");
    let bce_pred = Tensor::new(&[6], (0..6).map(|_| rng.gen_range(0.1..0.9)).collect()).expect("fixed");
    cases.push(RegistryCase {
        name: "bce_loss",
        inputs: vec![bce_pred],
        case: Box::new(move |g, ids| {
            let t = g.leaf(&bce_target, false);
            g.bce_loss(ids[0], t)
        }),
    });
    cases.push(RegistryCase {
        name: "mse_loss",
        inputs: vec![random_tensor(&[3, 4], &mut rng), random_tensor(&[3, 4], &mut rng)],
        case: Box::new(|g, ids| g.mse_loss(ids[0], ids[1])),
    });
    cases.push(RegistryCase {
        name: "gmp2d",
        inputs: vec![distinct_tensor(&[1, 2, 3, 3], seed ^ 0x5bd1)],
        case: Box::new(|g, ids| g.gmp2d(ids[0])),
    });
    cases.push(RegistryCase {
        name: "gwrp2d",
        inputs: vec![distinct_tensor(&[1, 2, 3, 3], seed ^ 0xa5e3)],
        case: Box::new(|g, ids| g.gwrp2d(ids[0], 0.8)),
    });
    cases.push(two_step_case(seed));
    cases.push(encoder_case(seed));
    cases.push(decoder_case(seed));
    cases
}

/// Runs the whole registry at one seed.
pub fn run_registry(seed: u64) -> Result<Vec<GradcheckReport>, AutogradError> {
    registry(seed)
        .into_iter()
        .map(|c| gradcheck(c.name, &c.inputs, &c.case, seed))
        .collect()
}
