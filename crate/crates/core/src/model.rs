//! The multimodal regression network.
//!
//! Acoustic and visual streams go through adaptive modality encoders that
//! predict a per-token mean and variance and sample a latent with the
//! reparameterization trick. The two latents are fused, projected to the text
//! width and added to the text stream as a residual shift. The shifted text
//! sequence is layer-normalized, mean-pooled and regressed by the task head.
//! Decoders reconstruct the raw acoustic/visual inputs from the latents and
//! three unimodal heads regress the label from each stream on its own.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::data::MultimodalBatch;

/// Added to the variance before the square root of the reparameterization.
pub const VAR_EPS: f64 = 1e-6;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("batch does not match the model: {0}")]
    BatchMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Gated multimodal unit.
    #[default]
    Gated,
    /// Concatenate latents and run a two-layer MLP.
    ConcatMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub d_latent: usize,
    pub d_fusion: usize,
    /// Width of every hidden layer (encoder trunks, decoders, heads, text stub).
    pub d_hidden: usize,
    pub seq_len: usize,
    /// Residual weight of the multimodal shift.
    pub beta: f64,
    pub dropout_encoder: f64,
    pub dropout_classifier: f64,
    pub fusion_kind: FusionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 16,
            d_a: 8,
            d_v: 8,
            d_latent: 16,
            d_fusion: 32,
            d_hidden: 16,
            seq_len: 8,
            beta: 1.0,
            dropout_encoder: 0.1,
            dropout_classifier: 0.1,
            fusion_kind: FusionKind::Gated,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("d_t", self.d_t),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("d_latent", self.d_latent),
            ("d_fusion", self.d_fusion),
            ("d_hidden", self.d_hidden),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.beta.is_finite() {
            return Err(ModelError::InvalidConfig("beta must be finite".into()));
        }
        for (name, p) in [
            ("dropout_encoder", self.dropout_encoder),
            ("dropout_classifier", self.dropout_classifier),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Disjoint parameter groups. `EncA` and `EncV` are the targets of gradient
/// modulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextStub,
    EncA,
    EncV,
    Fusion,
    TaskHead,
    DecA,
    DecV,
    UniHeads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::TextStub,
        ParamGroup::EncA,
        ParamGroup::EncV,
        ParamGroup::Fusion,
        ParamGroup::TaskHead,
        ParamGroup::DecA,
        ParamGroup::DecV,
        ParamGroup::UniHeads,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextStubIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub pos: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderIdx {
    pub w1: usize,
    pub b1: usize,
    pub w_mu: usize,
    pub b_mu: usize,
    pub w_var: usize,
    pub b_var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionIdx {
    Gated {
        w_gate: usize,
        b_gate: usize,
        w_a: usize,
        w_v: usize,
    },
    ConcatMlp {
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIdx {
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub text: TextStubIdx,
    pub enc_a: EncoderIdx,
    pub enc_v: EncoderIdx,
    pub fusion: FusionIdx,
    /// Projection of the fused sequence to the text width (fusion group).
    pub w_proj: usize,
    pub head: HeadIdx,
    pub dec_a: DecoderIdx,
    pub dec_v: DecoderIdx,
    pub uni_t: LinearIdx,
    pub uni_a: LinearIdx,
    pub uni_v: LinearIdx,
}

/// Named parameter registry partitioned into [`ParamGroup`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: &str, group: ParamGroup, tensor: Tensor) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            group,
            tensor,
        });
        self.params.len() - 1
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn weight(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(self.rng));
        self.push(name, group, t)
    }

    fn bias(&mut self, name: &str, group: ParamGroup, n: usize) -> usize {
        self.push(name, group, Tensor::zeros(&[n]))
    }

    fn encoder(&mut self, prefix: &str, group: ParamGroup, d_in: usize, cfg: &ModelConfig) -> EncoderIdx {
        EncoderIdx {
            w1: self.weight(&format!("{prefix}.w1"), group, d_in, cfg.d_hidden),
            b1: self.bias(&format!("{prefix}.b1"), group, cfg.d_hidden),
            w_mu: self.weight(&format!("{prefix}.w_mu"), group, cfg.d_hidden, cfg.d_latent),
            b_mu: self.bias(&format!("{prefix}.b_mu"), group, cfg.d_latent),
            w_var: self.weight(&format!("{prefix}.w_var"), group, cfg.d_hidden, cfg.d_latent),
            b_var: self.bias(&format!("{prefix}.b_var"), group, cfg.d_latent),
        }
    }

    fn decoder(&mut self, prefix: &str, group: ParamGroup, d_out: usize, cfg: &ModelConfig) -> DecoderIdx {
        DecoderIdx {
            w1: self.weight(&format!("{prefix}.w1"), group, cfg.d_latent, cfg.d_hidden),
            b1: self.bias(&format!("{prefix}.b1"), group, cfg.d_hidden),
            w2: self.weight(&format!("{prefix}.w2"), group, cfg.d_hidden, d_out),
            b2: self.bias(&format!("{prefix}.b2"), group, d_out),
        }
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, d_in: usize) -> LinearIdx {
        LinearIdx {
            w: self.weight(&format!("{prefix}.w"), group, d_in, 1),
            b: self.bias(&format!("{prefix}.b"), group, 1),
        }
    }
}

impl ModelParams {
    /// Fresh parameters drawn deterministically from `rng`.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        use ParamGroup as G;
        let text = TextStubIdx {
            w1: b.weight("text_stub.w1", G::TextStub, c.d_t, c.d_hidden),
            b1: b.bias("text_stub.b1", G::TextStub, c.d_hidden),
            w2: b.weight("text_stub.w2", G::TextStub, c.d_hidden, c.d_t),
            b2: b.bias("text_stub.b2", G::TextStub, c.d_t),
            pos: b.push("text_stub.pos", G::TextStub, Tensor::zeros(&[c.seq_len, c.d_t])),
        };
        let enc_a = b.encoder("enc_a", G::EncA, c.d_a, c);
        let enc_v = b.encoder("enc_v", G::EncV, c.d_v, c);
        let fusion = match c.fusion_kind {
            FusionKind::Gated => FusionIdx::Gated {
                w_gate: b.weight("fusion.w_gate", G::Fusion, 2 * c.d_latent, c.d_fusion),
                b_gate: b.bias("fusion.b_gate", G::Fusion, c.d_fusion),
                w_a: b.weight("fusion.w_a", G::Fusion, c.d_latent, c.d_fusion),
                w_v: b.weight("fusion.w_v", G::Fusion, c.d_latent, c.d_fusion),
            },
            FusionKind::ConcatMlp => FusionIdx::ConcatMlp {
                w1: b.weight("fusion.w1", G::Fusion, 2 * c.d_latent, c.d_hidden),
                b1: b.bias("fusion.b1", G::Fusion, c.d_hidden),
                w2: b.weight("fusion.w2", G::Fusion, c.d_hidden, c.d_fusion),
                b2: b.bias("fusion.b2", G::Fusion, c.d_fusion),
            },
        };
        let w_proj = b.weight("fusion.w_proj", G::Fusion, c.d_fusion, c.d_t);
        let head = HeadIdx {
            ln_gain: b.push("task_head.ln_gain", G::TaskHead, Tensor::ones(&[c.d_t])),
            ln_bias: b.bias("task_head.ln_bias", G::TaskHead, c.d_t),
            w1: b.weight("task_head.w1", G::TaskHead, c.d_t, c.d_hidden),
            b1: b.bias("task_head.b1", G::TaskHead, c.d_hidden),
            w2: b.weight("task_head.w2", G::TaskHead, c.d_hidden, 1),
            b2: b.bias("task_head.b2", G::TaskHead, 1),
        };
        let dec_a = b.decoder("dec_a", G::DecA, c.d_a, c);
        let dec_v = b.decoder("dec_v", G::DecV, c.d_v, c);
        let uni_t = b.linear("uni.t", G::UniHeads, c.d_t);
        let uni_a = b.linear("uni.a", G::UniHeads, c.d_latent);
        let uni_v = b.linear("uni.v", G::UniHeads, c.d_latent);
        Ok(Self {
            config: config.clone(),
            params: b.params,
            layout: Layout {
                text,
                enc_a,
                enc_v,
                fusion,
                w_proj,
                head,
                dec_a,
                dec_v,
                uni_t,
                uni_a,
                uni_v,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i].tensor)
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    pub fn group_tensors(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor)> {
        self.group(group).map(|p| (p.name.as_str(), &p.tensor))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Replaces every tensor's values; shapes must agree.
    pub fn set_values(&mut self, values: &[Tensor]) -> Result<(), ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::BatchMismatch(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.tensor.shape() != v.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "set_values",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                }
                .into());
            }
            p.tensor.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.tensor)).collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect()
    }

    /// Copies gradients into each tensor's grad slot; unreachable parameters
    /// receive zeros.
    pub fn assign_grads(&mut self, grads: &Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let g = grads.get_or_zeros(v, p.tensor.len());
            p.tensor.set_grad(g).expect("gradient length matches parameter");
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Full forward pass over a batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &MultimodalBatch,
        mode: &mut ForwardMode<'_>,
    ) -> Result<ForwardOutputs, ModelError> {
        let c = &self.config;
        let l = &self.layout;
        let bsz = batch.len();
        check_dims(batch.text.shape(), bsz, c.seq_len, c.d_t, "text")?;
        check_dims(batch.audio.shape(), bsz, c.seq_len, c.d_a, "audio")?;
        check_dims(batch.visual.shape(), bsz, c.seq_len, c.d_v, "visual")?;

        let t_raw = tape.constant(batch.text.clone());
        let a = tape.constant(batch.audio.clone());
        let v = tape.constant(batch.visual.clone());
        let pool = PoolMask::new(tape, &batch.lengths, c.seq_len);

        let p_enc = c.dropout_encoder;
        let p_cls = c.dropout_classifier;

        let text = text_stub_forward(tape, t_raw, &TextStubVars::bind(&l.text, vars), |tape, x| {
            mode.dropout(tape, x, p_enc)
        })?;

        let enc_a = EncoderVars::bind(&l.enc_a, vars);
        let enc_v = EncoderVars::bind(&l.enc_v, vars);
        let latent_shape = [bsz, c.seq_len, c.d_latent];
        let noise_a = mode.noise(tape, &latent_shape);
        let (mu_a, var_a, z_a) =
            ame_forward(tape, a, &enc_a, noise_a, |tape, x| mode.dropout(tape, x, p_enc))?;
        let noise_v = mode.noise(tape, &latent_shape);
        let (mu_v, var_v, z_v) =
            ame_forward(tape, v, &enc_v, noise_v, |tape, x| mode.dropout(tape, x, p_enc))?;

        // Without adaptive encoding the latent is the deterministic mean and
        // the variance head receives no gradient.
        let (var_a, var_v, z_a, z_v) = if mode.ame {
            (var_a, var_v, z_a, z_v)
        } else {
            (tape.detach(var_a), tape.detach(var_v), mu_a, mu_v)
        };

        let f_av = match l.fusion {
            FusionIdx::Gated {
                w_gate,
                b_gate,
                w_a,
                w_v,
            } => gated_fuse(
                tape,
                z_a,
                z_v,
                &GatedFusionVars {
                    w_gate: vars[w_gate],
                    b_gate: vars[b_gate],
                    w_a: vars[w_a],
                    w_v: vars[w_v],
                },
            )?,
            FusionIdx::ConcatMlp { w1, b1, w2, b2 } => {
                concat_mlp_fuse(tape, z_a, z_v, vars[w1], vars[b1], vars[w2], vars[b2])?
            }
        };
        let (p_av, h) = residual_inject(tape, text, f_av, c.beta, vars[l.w_proj])?;
        let y_hat = predict_head(tape, h, &HeadVars::bind(&l.head, vars), &pool, |tape, x| {
            mode.dropout(tape, x, p_cls)
        })?;

        let a_hat = reconstruct(tape, z_a, &DecoderVars::bind(&l.dec_a, vars))?;
        let v_hat = reconstruct(tape, z_v, &DecoderVars::bind(&l.dec_v, vars))?;

        let y_uni_t = unimodal_predict(tape, text, vars[l.uni_t.w], vars[l.uni_t.b], &pool)?;
        let y_uni_a = unimodal_predict(tape, z_a, vars[l.uni_a.w], vars[l.uni_a.b], &pool)?;
        let y_uni_v = unimodal_predict(tape, z_v, vars[l.uni_v.w], vars[l.uni_v.b], &pool)?;

        Ok(ForwardOutputs {
            text,
            audio: a,
            visual: v,
            mu_a,
            var_a,
            mu_v,
            var_v,
            z_a,
            z_v,
            f_av,
            p_av,
            h,
            y_hat,
            a_hat,
            v_hat,
            y_uni_t,
            y_uni_a,
            y_uni_v,
        })
    }
}

fn check_dims(shape: &[usize], b: usize, l: usize, d: usize, what: &str) -> Result<(), ModelError> {
    if shape != [b, l, d] {
        return Err(ModelError::BatchMismatch(format!(
            "{what} block has shape {shape:?}, model expects {:?}",
            [b, l, d]
        )));
    }
    Ok(())
}

/// Randomness used by one forward pass. `rng == None` gives the
/// deterministic inference path: no dropout and `Z = mu`.
pub struct ForwardMode<'r> {
    pub rng: Option<&'r mut ChaCha8Rng>,
    pub dropout: bool,
    pub sample_noise: bool,
    /// Adaptive modality encoding. When off, `Z = mu` and the variance head
    /// is detached.
    pub ame: bool,
}

impl<'r> ForwardMode<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng, ame: bool) -> Self {
        Self {
            rng: Some(rng),
            dropout: true,
            sample_noise: ame,
            ame,
        }
    }

    pub fn eval(ame: bool) -> Self {
        Self {
            rng: None,
            dropout: false,
            sample_noise: false,
            ame,
        }
    }

    fn noise(&mut self, tape: &mut Tape, shape: &[usize]) -> Option<Var> {
        if !(self.sample_noise && self.ame) {
            return None;
        }
        let rng = self.rng.as_deref_mut()?;
        let t = Tensor::from_fn(shape, |_| StandardNormal.sample(rng));
        Some(tape.constant(t))
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var, AutodiffError> {
        if !self.dropout || p == 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - p;
        let mask = Tensor::from_fn(tape.shape(x), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

/// Handles to every intermediate of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// Text stub output `T`, `B x L x d_t`.
    pub text: Var,
    /// Acoustic input as seen by the model, `B x L x d_a`.
    pub audio: Var,
    pub visual: Var,
    pub mu_a: Var,
    pub var_a: Var,
    pub mu_v: Var,
    pub var_v: Var,
    pub z_a: Var,
    pub z_v: Var,
    pub f_av: Var,
    pub p_av: Var,
    pub h: Var,
    /// `B`
    pub y_hat: Var,
    pub a_hat: Var,
    pub v_hat: Var,
    pub y_uni_t: Var,
    pub y_uni_a: Var,
    pub y_uni_v: Var,
}

/// Mean pooling over the sequence axis, optionally excluding padding.
pub struct PoolMask {
    /// `(B x L x 1 mask, B x 1 lengths)`; `None` when no sample is padded.
    masked: Option<(Var, Var)>,
}

impl PoolMask {
    pub fn new(tape: &mut Tape, lengths: &[usize], seq_len: usize) -> Self {
        if lengths.iter().all(|&n| n >= seq_len) {
            return Self { masked: None };
        }
        let b = lengths.len();
        let mask = Tensor::from_fn(&[b, seq_len, 1], |i| {
            let (s, t) = (i / seq_len, i % seq_len);
            if t < lengths[s].max(1) {
                1.0
            } else {
                0.0
            }
        });
        let counts = Tensor::from_fn(&[b, 1], |s| lengths[s].clamp(1, seq_len) as f64);
        let m = tape.constant(mask);
        let n = tape.constant(counts);
        Self {
            masked: Some((m, n)),
        }
    }

    pub fn none() -> Self {
        Self { masked: None }
    }

    /// `B x L x d -> B x d`
    pub fn pool(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        match self.masked {
            None => tape.mean_axis(x, 1, false),
            Some((mask, counts)) => {
                let xm = tape.mul(x, mask)?;
                let s = tape.sum_axis(xm, 1, false)?;
                tape.div(s, counts)
            }
        }
    }
}

/// `x . w + b`
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextStubVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub pos: Var,
}

impl TextStubVars {
    fn bind(idx: &TextStubIdx, vars: &[Var]) -> Self {
        Self {
            w1: vars[idx.w1],
            b1: vars[idx.b1],
            w2: vars[idx.w2],
            b2: vars[idx.b2],
            pos: vars[idx.pos],
        }
    }
}

/// Per-token MLP plus a learned positional bias, `B x L x d_t -> B x L x d_t`.
pub fn text_stub_forward(
    tape: &mut Tape,
    t_raw: Var,
    p: &TextStubVars,
    mut dropout: impl FnMut(&mut Tape, Var) -> Result<Var, AutodiffError>,
) -> Result<Var, AutodiffError> {
    let h = linear(tape, t_raw, p.w1, Some(p.b1))?;
    let h = tape.relu(h);
    let h = dropout(tape, h)?;
    let y = linear(tape, h, p.w2, Some(p.b2))?;
    tape.add(y, p.pos)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_var: Var,
    pub b_var: Var,
}

impl EncoderVars {
    fn bind(idx: &EncoderIdx, vars: &[Var]) -> Self {
        Self {
            w1: vars[idx.w1],
            b1: vars[idx.b1],
            w_mu: vars[idx.w_mu],
            b_mu: vars[idx.b_mu],
            w_var: vars[idx.w_var],
            b_var: vars[idx.b_var],
        }
    }
}

/// Adaptive modality encoding: a shared trunk with a mean head and a
/// softplus variance head, then `Z = mu + noise * sqrt(var + 1e-6)`.
/// With `noise == None` the latent is the mean.
pub fn ame_forward(
    tape: &mut Tape,
    x: Var,
    p: &EncoderVars,
    noise: Option<Var>,
    mut dropout: impl FnMut(&mut Tape, Var) -> Result<Var, AutodiffError>,
) -> Result<(Var, Var, Var), AutodiffError> {
    let h = linear(tape, x, p.w1, Some(p.b1))?;
    let h = tape.relu(h);
    let h = dropout(tape, h)?;
    let mu = linear(tape, h, p.w_mu, Some(p.b_mu))?;
    let pre = linear(tape, h, p.w_var, Some(p.b_var))?;
    let var = tape.softplus(pre);
    let z = reparameterize(tape, mu, var, noise)?;
    Ok((mu, var, z))
}

/// `Z = mu + noise * sqrt(var + 1e-6)`.
pub fn reparameterize(tape: &mut Tape, mu: Var, var: Var, noise: Option<Var>) -> Result<Var, AutodiffError> {
    match noise {
        None => Ok(mu),
        Some(eps) => {
            let shifted = tape.add_scalar(var, VAR_EPS);
            let std = tape.sqrt(shifted)?;
            let scaled = tape.mul(eps, std)?;
            tape.add(mu, scaled)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatedFusionVars {
    pub w_gate: Var,
    pub b_gate: Var,
    pub w_a: Var,
    pub w_v: Var,
}

/// `g = sigmoid([Za; Zv] Wg + bg)`, `F = g * tanh(Za Wa) + (1 - g) * tanh(Zv Wv)`.
pub fn gated_fuse(tape: &mut Tape, z_a: Var, z_v: Var, p: &GatedFusionVars) -> Result<Var, AutodiffError> {
    let cat = tape.concat_last(z_a, z_v)?;
    let gate_pre = linear(tape, cat, p.w_gate, Some(p.b_gate))?;
    let g = tape.sigmoid(gate_pre);
    let ha = tape.matmul(z_a, p.w_a)?;
    let ha = tape.tanh(ha);
    let hv = tape.matmul(z_v, p.w_v)?;
    let hv = tape.tanh(hv);
    // g*ha + (1-g)*hv = hv + g*(ha - hv)
    let diff = tape.sub(ha, hv)?;
    let gated = tape.mul(g, diff)?;
    tape.add(hv, gated)
}

/// `F = tanh(relu([Za; Zv] W1 + b1) W2 + b2)`.
pub fn concat_mlp_fuse(
    tape: &mut Tape,
    z_a: Var,
    z_v: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, AutodiffError> {
    let cat = tape.concat_last(z_a, z_v)?;
    let h = linear(tape, cat, w1, Some(b1))?;
    let h = tape.relu(h);
    let y = linear(tape, h, w2, Some(b2))?;
    Ok(tape.tanh(y))
}

/// `P = tanh(F Wp)`, `H = T + beta * P`. Returns `(P, H)`.
pub fn residual_inject(
    tape: &mut Tape,
    text: Var,
    f_av: Var,
    beta: f64,
    w_proj: Var,
) -> Result<(Var, Var), AutodiffError> {
    let proj = tape.matmul(f_av, w_proj)?;
    let p_av = tape.tanh(proj);
    if beta == 0.0 {
        // keeps H bit-identical to T
        return Ok((p_av, text));
    }
    let shift = tape.scale(p_av, beta);
    let h = tape.add(text, shift)?;
    Ok((p_av, h))
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadVars {
    fn bind(idx: &HeadIdx, vars: &[Var]) -> Self {
        Self {
            ln_gain: vars[idx.ln_gain],
            ln_bias: vars[idx.ln_bias],
            w1: vars[idx.w1],
            b1: vars[idx.b1],
            w2: vars[idx.w2],
            b2: vars[idx.b2],
        }
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
    let axis = tape.last_axis(x);
    let mean = tape.mean_axis(x, axis, true)?;
    let centered = tape.sub(x, mean)?;
    let var = tape.variance_axis(x, axis, true)?;
    let var = tape.add_scalar(var, LN_EPS);
    let std = tape.sqrt(var)?;
    let normed = tape.div(centered, std)?;
    let scaled = tape.mul(normed, gain)?;
    tape.add(scaled, bias)
}

/// Layer norm over features, mean-pool over the sequence, two-layer head.
/// `B x L x d_t -> B`.
pub fn predict_head(
    tape: &mut Tape,
    h: Var,
    p: &HeadVars,
    pool: &PoolMask,
    mut dropout: impl FnMut(&mut Tape, Var) -> Result<Var, AutodiffError>,
) -> Result<Var, AutodiffError> {
    let normed = layer_norm(tape, h, p.ln_gain, p.ln_bias)?;
    let pooled = pool.pool(tape, normed)?;
    let pooled = dropout(tape, pooled)?;
    let hidden = linear(tape, pooled, p.w1, Some(p.b1))?;
    let hidden = tape.relu(hidden);
    let hidden = dropout(tape, hidden)?;
    let out = linear(tape, hidden, p.w2, Some(p.b2))?;
    let b = tape.shape(out)[0];
    tape.reshape(out, &[b])
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DecoderVars {
    fn bind(idx: &DecoderIdx, vars: &[Var]) -> Self {
        Self {
            w1: vars[idx.w1],
            b1: vars[idx.b1],
            w2: vars[idx.w2],
            b2: vars[idx.b2],
        }
    }
}

/// Two-layer MLP decoder, `B x L x d_latent -> B x L x d_m`.
pub fn reconstruct(tape: &mut Tape, z: Var, p: &DecoderVars) -> Result<Var, AutodiffError> {
    let h = linear(tape, z, p.w1, Some(p.b1))?;
    let h = tape.relu(h);
    linear(tape, h, p.w2, Some(p.b2))
}

/// Mean-pool over the sequence then a linear head. `B x L x d -> B`.
pub fn unimodal_predict(tape: &mut Tape, x: Var, w: Var, b: Var, pool: &PoolMask) -> Result<Var, AutodiffError> {
    let pooled = pool.pool(tape, x)?;
    let y = linear(tape, pooled, w, Some(b))?;
    let n = tape.shape(y)[0];
    tape.reshape(y, &[n])
}

/// Draws a seeded model.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(config, &mut rng)
}
