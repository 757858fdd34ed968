//! Finite-difference verification of the autodiff engine: per primitive op
//! on random inputs, and through the complete training objective of a model
//! with its sampling noise frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    finite_diff_check, BinaryKind, FiniteDiffReport, OpKind, ReduceKind, Tape, Tensor, UnaryKind,
};
use crate::data::{gen_synthetic, MultimodalBatch, SyntheticConfig};
use crate::losses::{
    div_loss, recon_loss, stat_loss, task_loss, total_loss, uni_loss, LossTerms, LossWeights, ReconReduction,
    TaskLossKind,
};
use crate::model::{init_model, ForwardMode, ModelConfig, ModelParams};
use crate::trainer::TrainError;

/// Every op kind exercised by [`op_gradcheck`], with a label.
pub fn op_catalog() -> Vec<OpKind> {
    use UnaryKind as U;
    let mut ops: Vec<OpKind> = [
        U::Neg,
        U::Tanh,
        U::Relu,
        U::Sigmoid,
        U::Sqrt,
        U::Log,
        U::Exp,
        U::Softplus,
        U::Abs,
        U::Square,
    ]
    .into_iter()
    .map(OpKind::Unary)
    .collect();
    ops.extend(
        [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div]
            .into_iter()
            .map(OpKind::Binary),
    );
    ops.push(OpKind::MatMul);
    ops.push(OpKind::ConcatLast);
    for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Variance] {
        for axis in 0..3 {
            for keepdim in [false, true] {
                ops.push(OpKind::Reduce { kind, axis, keepdim });
            }
        }
    }
    ops.extend([
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::SquaredError,
        OpKind::Scale(-1.7),
        OpKind::AddScalar(0.3),
        OpKind::Reshape(vec![0]),
    ]);
    ops
}

/// Random value away from the kinks and poles of the op under test.
fn draw(rng: &mut ChaCha8Rng, positive: bool) -> f64 {
    let mag = rng.random_range(0.1..2.0);
    if positive || rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, positive: bool) -> Tensor {
    Tensor::from_fn(shape, |_| draw(rng, positive))
}

/// Checks one op on random inputs of a random shape. The scalar objective is
/// `sum(op(x) * w)` for a fixed random `w`, so every output element
/// contributes a distinct weight. The second operand of a broadcasting
/// binary op is randomly given a broadcast shape.
pub fn op_gradcheck(kind: &OpKind, seed: u64, h: f64, tol: f64) -> FiniteDiffReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, l, d) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let positive = matches!(kind, OpKind::Unary(UnaryKind::Sqrt | UnaryKind::Log));
    let x = rand_tensor(&[b, l, d], &mut rng, positive);
    let mut inputs = vec![x];
    let mut kind = kind.clone();
    match &kind {
        OpKind::Binary(bk) => {
            let shape: Vec<usize> = match rng.random_range(0..3) {
                0 => vec![b, l, d],
                1 => vec![d],
                _ => vec![l, 1],
            };
            inputs.push(rand_tensor(&shape, &mut rng, *bk == BinaryKind::Div));
        }
        OpKind::MatMul => {
            let n = rng.random_range(1..4);
            inputs.push(rand_tensor(&[d, n], &mut rng, false));
        }
        OpKind::ConcatLast => {
            let e = rng.random_range(1..4);
            inputs.push(rand_tensor(&[b, l, e], &mut rng, false));
        }
        OpKind::SquaredError => inputs.push(rand_tensor(&[b, l, d], &mut rng, false)),
        OpKind::Reshape(_) => kind = OpKind::Reshape(vec![b * l, d]),
        _ => {}
    }

    let forward = |tape: &mut Tape, vars: &[crate::autodiff::Var], w: &Tensor| {
        let y = tape.apply(&kind, vars).expect("valid op inputs");
        let wv = tape.constant(w.clone());
        let prod = tape.mul(y, wv).expect("same shape");
        tape.sum_all(prod)
    };
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = tape.apply(&kind, &vars).expect("valid op inputs");
        tape.shape(y).to_vec()
    };
    let w = rand_tensor(&out_shape, &mut rng, false);

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = forward(&mut tape, &vars, &w);
    let grads = tape.backward(loss).expect("scalar loss");
    for (t, v) in inputs.iter_mut().zip(&vars) {
        t.set_grad(grads.get_or_zeros(*v, t.len())).expect("matching length");
    }
    finite_diff_check(
        |ts| {
            let mut tape = Tape::new();
            let vars: Vec<_> = ts.iter().map(|t| tape.constant(t.clone())).collect();
            let l = forward(&mut tape, &vars, &w);
            tape.scalar(l)
        },
        &inputs,
        h,
        tol,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub task_loss: TaskLossKind,
    pub recon_reduction: ReconReduction,
    pub batch_size: usize,
    pub h: f64,
    pub tol: f64,
}

impl GradcheckSettings {
    /// Default objective on the given model.
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            weights: LossWeights::default(),
            task_loss: TaskLossKind::default(),
            recon_reduction: ReconReduction::default(),
            batch_size: 2,
            h: 1e-5,
            tol: 1e-4,
        }
    }

    /// A model small enough to check many seeds quickly.
    pub fn tiny() -> Self {
        Self::new(ModelConfig {
            d_t: 3,
            d_a: 3,
            d_v: 2,
            d_latent: 3,
            d_fusion: 4,
            d_hidden: 4,
            seq_len: 3,
            ..ModelConfig::default()
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelGradcheck {
    pub seed: u64,
    /// Jitter draw that met the kink margin.
    pub attempt: u64,
    pub kink_margin: f64,
    pub loss: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub params: Vec<ParamCheck>,
}

fn objective(
    params: &ModelParams,
    batch: &MultimodalBatch,
    s: &GradcheckSettings,
    noise_seed: u64,
    tape: &mut Tape,
    vars: &[crate::autodiff::Var],
) -> Result<crate::autodiff::Var, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut mode = ForwardMode {
        rng: Some(&mut rng),
        dropout: false,
        sample_noise: true,
        ame: true,
    };
    let out = params.forward(tape, vars, batch, &mut mode)?;
    let y = tape.constant(Tensor::new(vec![batch.len()], batch.labels.clone())?);
    let terms = LossTerms {
        task: task_loss(tape, out.y_hat, y, s.task_loss)?,
        recon: recon_loss(tape, out.audio, out.a_hat, out.visual, out.v_hat, s.recon_reduction)?,
        uni: uni_loss(tape, out.y_uni_t, out.y_uni_a, out.y_uni_v, y, s.task_loss)?,
        div: div_loss(tape, out.var_a, out.var_v)?,
        stat: stat_loss(tape, out.audio, out.visual, out.mu_a, out.var_a, out.mu_v, out.var_v)?,
    };
    Ok(total_loss(tape, &terms, &s.weights)?)
}

/// Smallest distance from a ReLU or absolute-value kink accepted for a
/// check point. Central differences straddling a kink measure an average
/// of the two one-sided slopes, not the derivative.
pub const KINK_MARGIN: f64 = 1e-3;

/// Attempts at finding a point with the required kink margin.
pub const MAX_POINT_ATTEMPTS: u64 = 64;

/// Moves every parameter by a random offset in `[-0.1, 0.1)`. Freshly
/// initialized biases are exactly zero, which together with exact zeros in
/// min-max normalized inputs places ReLU pre-activations on the kink.
fn jitter(params: &mut ModelParams, seed: u64, attempt: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt + 1);
    for p in params.params_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Full-objective check for one seed: the seed draws the parameters, a
/// synthetic batch and the (then frozen) reparameterization noise. The
/// parameters are jittered, redrawing the jitter until every ReLU and
/// absolute-value input is at least [`KINK_MARGIN`] from zero; a
/// perturbation of size `h` then cannot cross a kink.
pub fn model_gradcheck(s: &GradcheckSettings, seed: u64) -> Result<ModelGradcheck, TrainError> {
    let m = &s.model;
    let data = gen_synthetic(&SyntheticConfig {
        n_samples: s.batch_size,
        seq_len: m.seq_len,
        d_t: m.d_t,
        d_a: m.d_a,
        d_v: m.d_v,
        seed,
        ..SyntheticConfig::default()
    })?;
    let picked: Vec<_> = data.samples.iter().collect();
    let batch = MultimodalBatch::from_samples(&data, &picked).normalized();
    let base = init_model(m, seed)?;
    let noise_seed = seed ^ 0x5EED;

    let mut found = None;
    for attempt in 0..MAX_POINT_ATTEMPTS {
        let mut params = base.clone();
        jitter(&mut params, seed, attempt);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let loss_var = objective(&params, &batch, s, noise_seed, &mut tape, &vars)?;
        let margin = tape.kink_margin();
        if margin >= KINK_MARGIN {
            let loss = tape.scalar(loss_var);
            let grads = tape.backward(loss_var)?;
            params.assign_grads(&grads, &vars);
            found = Some((params, loss, attempt, margin));
            break;
        }
    }
    let Some((params, loss, attempt, kink_margin)) = found else {
        return Err(TrainError::InvalidConfig(format!(
            "gradcheck seed {seed}: no point with kink margin {KINK_MARGIN} in {MAX_POINT_ATTEMPTS} attempts"
        )));
    };

    let mut probe = params.clone();
    let report = finite_diff_check(
        |ts| {
            probe.set_values(ts).expect("same shapes");
            let mut tape = Tape::new();
            let vars = probe.bind_frozen(&mut tape);
            match objective(&probe, &batch, s, noise_seed, &mut tape, &vars) {
                Ok(v) => tape.scalar(v),
                Err(_) => f64::NAN,
            }
        },
        &params.tensors(),
        s.h,
        s.tol,
    );
    Ok(ModelGradcheck {
        seed,
        attempt,
        kink_margin,
        loss,
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
        params: report
            .entries
            .iter()
            .zip(params.params())
            .map(|(e, p)| ParamCheck {
                name: p.name.clone(),
                max_rel_err: e.max_rel_err,
                max_abs_err: e.max_abs_err,
                flagged: e.flagged,
            })
            .collect(),
    })
}
