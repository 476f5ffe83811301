//! Finite-difference gradient checks and forward-pass invariants, runnable
//! from the command line on any build.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::Query;
use crate::models::{ForwardOptions, Model, ModelConfig, ModelKind};
use crate::tensor::gradcheck::{numeric_gradient, relative_error};
use crate::tensor::{Tape, Tensor, Var};

/// Largest norm-wise relative error allowed for a single operation.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Largest relative error for a whole model's forward pass and loss.
pub const MODEL_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least 0.03 apart and 0.015 away from zero, in a random order,
/// keeping max-pool ties and the ReLU kink out of reach of the
/// finite-difference step.
fn separated(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let half = (n / 2) as isize;
    let mut vals: Vec<f32> = (0..n as isize)
        .map(|i| (i - half) as f32 * 0.04 + 0.02 + rng.random_range(-0.005..0.005))
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape product")
}

/// One input of a checked expression: its value and the step used for it.
struct Input {
    value: Tensor,
    step: f32,
}

/// Builds `Σ r ⊙ op(inputs)` (or the op's own scalar) on a fresh tape.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var> + 'a;

fn projected_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> crate::Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let w = tape.constant(weights.clone().reshape(tape.shape(out))?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Worst relative error over all inputs of one expression.
fn check_expression(inputs: &[Input], build: &Build<'_>, rng: &mut impl Rng) -> crate::Result<f64> {
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|i| tape.param(i.value.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).numel()
    };
    let weights = uniform(rng, &[out_len], -1.0, 1.0);
    let eval = |values: &[&Tensor]| -> crate::Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param((*v).clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = projected_loss(&mut tape, out, &weights)?;
        tape.backward(loss)?;
        let grads = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
        Ok((tape.value(loss).data()[0] as f64, grads))
    };
    let values: Vec<&Tensor> = inputs.iter().map(|i| &i.value).collect();
    let (_, analytic) = eval(&values)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(
            |probe| {
                let mut vals = values.clone();
                vals[k] = probe;
                eval(&vals).map(|(l, _)| l).unwrap_or(f64::NAN)
            },
            &input.value,
            input.step,
        );
        let err = relative_error(analytic[k].data(), numeric.data());
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(worst)
}

fn run_trials(
    name: &str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Input>, Box<Build<'static>>),
) -> CheckOutcome {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (inputs, build) = make(rng);
        match check_expression(&inputs, build.as_ref(), rng) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CheckOutcome::new(name, false, format!("trial {t}: {e}")),
        }
    }
    CheckOutcome::new(
        name,
        worst <= OP_TOLERANCE,
        format!("{trials} trials, worst relative error {worst:.2e} (limit {OP_TOLERANCE:.0e})"),
    )
}

const SMOOTH: f32 = 1e-2;
const KINKED: f32 = 1e-3;

fn inp(value: Tensor, step: f32) -> Input {
    Input { value, step }
}

/// Gradient checks of every differentiable tape operation, `trials` random
/// cases each.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.push(run_trials("conv2d", trials, &mut rng, |r| {
        let (n, c, k) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let ksize = *[1usize, 3].choose(r).expect("non-empty");
        let stride = r.random_range(1..3);
        let pad = if ksize == 3 { r.random_range(0..2) } else { 0 };
        // spatial extent chosen so the strided windows tile exactly
        let out_side = r.random_range(2..5);
        let side = (out_side - 1) * stride + ksize - 2 * pad;
        let inputs = vec![
            inp(uniform(r, &[n, c, side, side], -1.0, 1.0), SMOOTH),
            inp(uniform(r, &[k, c, ksize, ksize], -1.0, 1.0), SMOOTH),
            inp(uniform(r, &[k], -1.0, 1.0), SMOOTH),
        ];
        (inputs, Box::new(move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)))
    }));
    out.push(run_trials("maxpool2d", trials, &mut rng, |r| {
        let (n, c, s) = (r.random_range(1..3), r.random_range(1..3), 2 * r.random_range(1..4));
        (vec![inp(separated(r, &[n, c, s, s]), KINKED)], Box::new(|t: &mut Tape, v: &[Var]| t.maxpool2d(v[0], 2, 2)))
    }));
    out.push(run_trials("fully_connected", trials, &mut rng, |r| {
        let (n, d, e) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..6));
        let inputs = vec![
            inp(uniform(r, &[n, d], -1.0, 1.0), SMOOTH),
            inp(uniform(r, &[d, e], -1.0, 1.0), SMOOTH),
            inp(uniform(r, &[e], -1.0, 1.0), SMOOTH),
        ];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.fully_connected(v[0], v[1], Some(v[2]))))
    }));
    out.push(run_trials("relu", trials, &mut rng, |r| {
        let shape = [r.random_range(1..3), r.random_range(1..4), 3, 3];
        (vec![inp(separated(r, &shape), KINKED)], Box::new(|t: &mut Tape, v: &[Var]| Ok(t.relu(v[0]))))
    }));
    out.push(run_trials("sigmoid", trials, &mut rng, |r| {
        let shape = [r.random_range(1..3), r.random_range(1..4), 3, 3];
        (vec![inp(uniform(r, &shape, -4.0, 4.0), SMOOTH)], Box::new(|t: &mut Tape, v: &[Var]| Ok(t.sigmoid(v[0]))))
    }));
    out.push(run_trials("spatial_softmax", trials, &mut rng, |r| {
        let s = r.random_range(1..5);
        let shape = [r.random_range(1..3), 1, s, s + 1];
        (vec![inp(uniform(r, &shape, -3.0, 3.0), SMOOTH)], Box::new(|t: &mut Tape, v: &[Var]| t.spatial_softmax(v[0])))
    }));
    out.push(run_trials("channel_softmax", trials, &mut rng, |r| {
        let shape: Vec<usize> = if r.random_bool(0.5) {
            vec![r.random_range(1..4), r.random_range(2..6)]
        } else {
            vec![r.random_range(1..3), r.random_range(2..5), 2, 3]
        };
        (vec![inp(uniform(r, &shape, -3.0, 3.0), SMOOTH)], Box::new(|t: &mut Tape, v: &[Var]| t.channel_softmax(v[0])))
    }));
    out.push(run_trials("attend", trials, &mut rng, |r| {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let inputs = vec![
            inp(uniform(r, &[n, c, h, w], -1.0, 1.0), SMOOTH),
            inp(uniform(r, &[n, 1, h, w], 0.0, 1.0), SMOOTH),
        ];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.attend(v[0], v[1])))
    }));
    out.push(run_trials("spatial_sum", trials, &mut rng, |r| {
        let shape = [r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
        (vec![inp(uniform(r, &shape, -1.0, 1.0), SMOOTH)], Box::new(|t: &mut Tape, v: &[Var]| t.spatial_sum(v[0])))
    }));
    out.push(run_trials("add_channel_bias", trials, &mut rng, |r| {
        let (n, c) = (r.random_range(1..3), r.random_range(1..4));
        let inputs = vec![
            inp(uniform(r, &[n, c, 2, 3], -1.0, 1.0), SMOOTH),
            inp(uniform(r, &[n, c], -1.0, 1.0), SMOOTH),
        ];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.add_channel_bias(v[0], v[1])))
    }));
    out.push(run_trials("mul", trials, &mut rng, |r| {
        let shape = [r.random_range(1..3), r.random_range(1..4), 2, 2];
        let inputs = vec![inp(uniform(r, &shape, -1.0, 1.0), SMOOTH), inp(uniform(r, &shape, -1.0, 1.0), SMOOTH)];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1])))
    }));
    out.push(run_trials("sum", trials, &mut rng, |r| {
        let shape = [r.random_range(1..4), r.random_range(1..4)];
        (vec![inp(uniform(r, &shape, -1.0, 1.0), SMOOTH)], Box::new(|t: &mut Tape, v: &[Var]| Ok(t.sum(v[0]))))
    }));
    out.push(run_trials("softmax_cross_entropy", trials, &mut rng, |r| {
        let (n, k) = (r.random_range(1..5), r.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        (
            vec![inp(uniform(r, &[n, k], -3.0, 3.0), SMOOTH)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &labels)),
        )
    }));
    out.push(run_trials("nll_of_probability (after channel_softmax)", trials, &mut rng, |r| {
        let (n, k) = (r.random_range(1..5), r.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        (
            vec![inp(uniform(r, &[n, k], -3.0, 3.0), SMOOTH)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let p = t.channel_softmax(v[0])?;
                t.nll_of_probability(p, &labels)
            }),
        )
    }));
    out
}

/// Small PAN-CTX on 16×16 inputs: 4 blocks of 4 channels.
pub fn toy_config(num_blocks: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(ModelKind::PanCtx).with_input_size(16);
    cfg.num_blocks = num_blocks;
    cfg.attention_layers = (1..=num_blocks).collect();
    cfg.channels = 4;
    cfg.hidden_dim = 4;
    cfg
}

/// Finite differences of the full forward pass and loss with respect to every
/// parameter of a toy PAN-CTX.
pub fn model_gradient_check(cfg: &ModelConfig, seed: u64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(cfg, seed)?;
    let n = 2;
    let images = uniform(&mut rng, &[n, cfg.in_channels, cfg.input_size, cfg.input_size], 0.0, 1.0);
    let queries: Vec<Query> = (0..n).map(|_| Query::new(rng.random_range(0..10)).expect("digit")).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_colors)).collect();
    let loss_of = |m: &Model| -> crate::Result<(f64, Vec<Vec<f32>>)> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let fwd = m.forward(&mut tape, x, &queries, ForwardOptions::default())?;
        let loss = m.loss(&mut tape, &fwd, &labels)?;
        tape.backward(loss)?;
        let grads = fwd.params.iter().map(|&p| tape.grad_tensor(p).into_data()).collect();
        Ok((tape.value(loss).data()[0] as f64, grads))
    };
    let (_, analytic) = loss_of(&model)?;
    let mut flat_a = Vec::new();
    let mut flat_n = Vec::new();
    for (k, a) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(
            |probe| {
                let mut m = model.clone();
                *m.tensors_mut()[k] = probe.clone();
                loss_of(&m).map(|(l, _)| l).unwrap_or(f64::NAN)
            },
            model.tensors()[k],
            crate::tensor::gradcheck::DEFAULT_STEP,
        );
        flat_a.extend_from_slice(a);
        flat_n.extend_from_slice(numeric.data());
    }
    Ok(relative_error(&flat_a, &flat_n))
}

fn model_check_outcome(num_blocks: usize, seed: u64) -> CheckOutcome {
    let cfg = toy_config(num_blocks);
    let name = format!("PAN_CTX forward+loss, 16×16 input, {num_blocks} blocks");
    match model_gradient_check(&cfg, seed) {
        Ok(e) => CheckOutcome::new(name, e <= MODEL_TOLERANCE, format!("relative error {e:.2e} (limit {MODEL_TOLERANCE:.0e})")),
        Err(e) => CheckOutcome::new(name, false, e.to_string()),
    }
}

pub fn model_gradient_suite(seed: u64) -> Vec<CheckOutcome> {
    vec![model_check_outcome(4, seed), model_check_outcome(3, seed ^ 1)]
}

fn random_batch(rng: &mut impl Rng, n: usize, size: usize) -> (Tensor, Vec<Query>) {
    let images = uniform(rng, &[n, 3, size, size], 0.0, 1.0);
    let queries = (0..n).map(|_| Query::new(rng.random_range(0..10)).expect("digit")).collect();
    (images, queries)
}

/// Normalisation and identity properties of the forward pass.
pub fn invariant_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = rng.random_range(1..8);
        let scale = *[1.0f32, 10.0, 80.0].choose(&mut rng).expect("non-empty");
        let x = uniform(&mut rng, &[2, 1, s, s + 2], -scale, scale);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.spatial_softmax(v).expect("4-D");
        for plane in tape.value(y).data().chunks(s * (s + 2)) {
            let sum: f64 = plane.iter().map(|&p| p as f64).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    out.push(CheckOutcome::new(
        "spatial_softmax sums to 1",
        worst <= 1e-5,
        format!("100 random maps, worst |Σα − 1| = {worst:.2e}"),
    ));

    let f = uniform(&mut rng, &[3, 4, 5, 6], -10.0, 10.0);
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let ones = tape.constant(Tensor::ones(&[3, 1, 5, 6]));
    let g = tape.attend(fv, ones).expect("shapes agree");
    let identical = tape.value(g).data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    out.push(CheckOutcome::new("attend(f, 1) == f", identical, "bitwise comparison on 360 values".into()));

    let size = 32;
    let san_cfg = ModelConfig::new(ModelKind::San).with_input_size(size);
    let mut pan_cfg = ModelConfig::new(ModelKind::Pan).with_input_size(size);
    pan_cfg.attention_layers = vec![4];
    pan_cfg.context_radius = 0;
    let (images, queries) = random_batch(&mut rng, 4, size);
    let equal = (|| -> crate::Result<bool> {
        let san = Model::init(&san_cfg, seed)?;
        let pan = Model::init(&pan_cfg, seed)?;
        let a = san.infer(&images, &queries)?;
        let b = pan.infer(&images, &queries)?;
        Ok(a == b)
    })();
    out.push(match equal {
        Ok(eq) => CheckOutcome::new("PAN with only the final head equals SAN", eq, "bitwise comparison of logits, probabilities and maps".into()),
        Err(e) => CheckOutcome::new("PAN with only the final head equals SAN", false, e.to_string()),
    });

    let han = (|| -> crate::Result<f64> {
        let model = Model::init(&ModelConfig::new(ModelKind::Han).with_input_size(size), seed)?;
        let r = model.infer(&images, &queries)?;
        Ok(r.probabilities
            .data()
            .chunks(5)
            .map(|row| (row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max))
    })();
    out.push(match han {
        Ok(w) => CheckOutcome::new("HAN output rows sum to 1", w <= 1e-5, format!("worst |Σp − 1| = {w:.2e}")),
        Err(e) => CheckOutcome::new("HAN output rows sum to 1", false, e.to_string()),
    });
    out
}

/// Everything the `selftest` subcommand runs.
pub fn run_all(trials: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut out = gradient_suite(trials, seed);
    out.extend(model_gradient_suite(seed));
    out.extend(invariant_suite(seed));
    out
}
