//! The two-branch fusion module: per-modality pre-encoders and selective
//! projections around a single state-transition matrix shared by both
//! branches' discretizations.
//!
//! Sharing A is the fusion mechanism: in one backward pass its gradient
//! buffer accumulates contributions from every modality, which
//! `shared_grad_decomposition_check` verifies directly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::ops::softplus_inverse;
use crate::params::Parameterized;
use crate::ssm::{shared_a_log_init, DiscretizeMode};
use crate::tensor::Tensor;

// ── Parameter containers ─────────────────────────────────────────────

/// Plain linear layer parameters (weight [Din, Dout], bias [Dout]).
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn new<R: Rng>(din: usize, dout: usize, rng: &mut R) -> Self {
        LinearParams {
            w: Tensor::randn(&[din, dout], 1.0 / (din as f64).sqrt(), rng),
            b: Tensor::zeros(&[dout]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LinearVars {
        LinearVars {
            w: g.param(&self.w),
            b: g.param(&self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

/// Two linear layers with a smooth nonlinearity between them.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn new<R: Rng>(din: usize, hidden: usize, dout: usize, rng: &mut R) -> Self {
        MlpParams {
            w1: Tensor::randn(&[din, hidden], 1.0 / (din as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, dout], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[dout]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.linear(x, self.w1, Some(self.b1))?;
        let h = g.gelu(h);
        g.linear(h, self.w2, Some(self.b2))
    }
}

/// The Δ projection: full rank by default, optionally a low-rank factor pair.
#[derive(Debug, Clone)]
pub enum DeltaProj {
    Full(Tensor),
    LowRank { down: Tensor, up: Tensor },
}

impl DeltaProj {
    fn new<R: Rng>(d: usize, rank: Option<usize>, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        match rank {
            None => DeltaProj::Full(Tensor::randn(&[d, d], std, rng)),
            Some(r) => DeltaProj::LowRank {
                down: Tensor::randn(&[d, r], std, rng),
                up: Tensor::randn(&[r, d], 1.0 / (r as f64).sqrt(), rng),
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum DeltaProjVars {
    Full(Var),
    LowRank { down: Var, up: Var },
}

/// Per-stage, per-branch selective projections. The B and C projections
/// carry no bias: zero input must give zero B and C.
#[derive(Debug, Clone)]
pub struct SelectiveParams {
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub delta_proj: DeltaProj,
    pub b_delta: Tensor,
    pub delta_base: Tensor,
}

impl SelectiveParams {
    pub fn new<R: Rng>(cfg: &TrainConfig, rng: &mut R) -> Self {
        let (d, n) = (cfg.d_model, cfg.n_state);
        let std = 1.0 / (d as f64).sqrt();
        let delta_proj = DeltaProj::new(d, cfg.delta_rank, rng);
        // softplus(delta_base) log-uniform in [1e-3, 1e-1]
        let (lo, hi) = ((1e-3_f64).ln(), (1e-1_f64).ln());
        let mut base = vec![0.0; d];
        for v in &mut base {
            let target = (rng.gen::<f64>() * (hi - lo) + lo).exp();
            *v = softplus_inverse(target);
        }
        SelectiveParams {
            w_b: Tensor::randn(&[d, n], std, rng),
            w_c: Tensor::randn(&[d, n], std, rng),
            delta_proj,
            b_delta: Tensor::zeros(&[d]),
            delta_base: Tensor::new(vec![d], base).unwrap(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> SelectiveVars {
        SelectiveVars {
            w_b: g.param(&self.w_b),
            w_c: g.param(&self.w_c),
            delta_proj: match &self.delta_proj {
                DeltaProj::Full(w) => DeltaProjVars::Full(g.param(w)),
                DeltaProj::LowRank { down, up } => DeltaProjVars::LowRank {
                    down: g.param(down),
                    up: g.param(up),
                },
            },
            b_delta: g.param(&self.b_delta),
            delta_base: g.param(&self.delta_base),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w_b"), &self.w_b));
        out.push((format!("{prefix}.w_c"), &self.w_c));
        match &self.delta_proj {
            DeltaProj::Full(w) => out.push((format!("{prefix}.w_delta"), w)),
            DeltaProj::LowRank { down, up } => {
                out.push((format!("{prefix}.w_delta_down"), down));
                out.push((format!("{prefix}.w_delta_up"), up));
            }
        }
        out.push((format!("{prefix}.b_delta"), &self.b_delta));
        out.push((format!("{prefix}.delta_base"), &self.delta_base));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w_b"), &mut self.w_b));
        out.push((format!("{prefix}.w_c"), &mut self.w_c));
        match &mut self.delta_proj {
            DeltaProj::Full(w) => out.push((format!("{prefix}.w_delta"), w)),
            DeltaProj::LowRank { down, up } => {
                out.push((format!("{prefix}.w_delta_down"), down));
                out.push((format!("{prefix}.w_delta_up"), up));
            }
        }
        out.push((format!("{prefix}.b_delta"), &mut self.b_delta));
        out.push((format!("{prefix}.delta_base"), &mut self.delta_base));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelectiveVars {
    pub w_b: Var,
    pub w_c: Var,
    delta_proj: DeltaProjVars,
    pub b_delta: Var,
    pub delta_base: Var,
}

/// Pre-encoder parameters: MLP projection followed by a depthwise conv.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub mlp: MlpParams,
    pub conv_kernel: Tensor,
}

impl EncoderParams {
    pub fn new<R: Rng>(din: usize, d: usize, conv_k: usize, rng: &mut R) -> Self {
        EncoderParams {
            mlp: MlpParams::new(din, d, d, rng),
            conv_kernel: Tensor::randn(&[d, conv_k], 1.0 / (conv_k as f64).sqrt(), rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> EncoderVars {
        EncoderVars {
            mlp: self.mlp.bind(g),
            conv_kernel: g.param(&self.conv_kernel),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.mlp_w1"), &self.mlp.w1));
        out.push((format!("{prefix}.mlp_b1"), &self.mlp.b1));
        out.push((format!("{prefix}.mlp_w2"), &self.mlp.w2));
        out.push((format!("{prefix}.mlp_b2"), &self.mlp.b2));
        out.push((format!("{prefix}.conv_kernel"), &self.conv_kernel));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.mlp_w1"), &mut self.mlp.w1));
        out.push((format!("{prefix}.mlp_b1"), &mut self.mlp.b1));
        out.push((format!("{prefix}.mlp_w2"), &mut self.mlp.w2));
        out.push((format!("{prefix}.mlp_b2"), &mut self.mlp.b2));
        out.push((format!("{prefix}.conv_kernel"), &mut self.conv_kernel));
    }

    pub fn var_list(vars: &EncoderVars, out: &mut Vec<Var>) {
        out.extend([
            vars.mlp.w1,
            vars.mlp.b1,
            vars.mlp.w2,
            vars.mlp.b2,
            vars.conv_kernel,
        ]);
    }
}

/// One modality branch: pre-encoder plus the stage-0 selective projections.
/// No tensor here is shared across branches.
#[derive(Debug, Clone)]
pub struct SsmBranchParams {
    pub encoder: EncoderParams,
    pub select: SelectiveParams,
}

impl SsmBranchParams {
    pub fn new<R: Rng>(din: usize, cfg: &TrainConfig, rng: &mut R) -> Self {
        SsmBranchParams {
            encoder: EncoderParams::new(din, cfg.d_model, cfg.conv_k, rng),
            select: SelectiveParams::new(cfg, rng),
        }
    }

    pub fn bind_encoder(&self, g: &mut Graph) -> EncoderVars {
        self.encoder.bind(g)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub mlp: MlpVars,
    pub conv_kernel: Var,
}

/// The state-transition matrix shared by every branch, stored as ln(−A) so
/// gradient steps cannot push an entry out of the stable (negative) range.
#[derive(Debug, Clone)]
pub struct SharedA {
    pub a_log: Tensor,
}

impl SharedA {
    pub fn new(d: usize, n: usize) -> Self {
        SharedA {
            a_log: shared_a_log_init(d, n),
        }
    }

    /// Materialized A = −exp(a_log); strictly negative by construction.
    pub fn values(&self) -> Tensor {
        let data = self.a_log.iter().map(|v| -v.exp()).collect();
        Tensor::new(self.a_log.shape().to_vec(), data).unwrap()
    }
}

/// An additional stacked stage: its own A and selective projections per
/// branch, applied to the previous stage's output sequences.
#[derive(Debug, Clone)]
pub struct FusionStage {
    pub shared_a: SharedA,
    pub a_log_t_separate: Option<Tensor>,
    pub select_v: SelectiveParams,
    pub select_t: SelectiveParams,
}

/// Which branch, if any, sees a detached copy of A (gradient path cut).
/// Used by the gradient-decomposition diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetachA {
    Neither,
    VBranch,
    TBranch,
}

/// The full module: two modality branches around shared transition
/// matrices, plus the verb/noun classification heads.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub branch_v: SsmBranchParams,
    pub branch_t: SsmBranchParams,
    pub shared_a: SharedA,
    pub a_log_t_separate: Option<Tensor>,
    pub extra_stages: Vec<FusionStage>,
    pub head_verb: LinearParams,
    pub head_noun: LinearParams,
    pub ablation_separate_a: bool,
    pub mode: DiscretizeMode,
}

impl FusionBlock {
    pub fn new(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, n) = (cfg.d_model, cfg.n_state);
        let separate = matches!(cfg.ablation, crate::config::Ablation::SeparateA);
        let mode = if cfg.euler_discretization {
            DiscretizeMode::Euler
        } else {
            DiscretizeMode::ExactZoh
        };
        let branch_v = SsmBranchParams::new(cfg.d_raw, cfg, rng);
        let branch_t = SsmBranchParams::new(cfg.d_raw, cfg, rng);
        let mut extra_stages = Vec::new();
        for _ in 1..cfg.depth {
            extra_stages.push(FusionStage {
                shared_a: SharedA::new(d, n),
                a_log_t_separate: separate.then(|| shared_a_log_init(d, n)),
                select_v: SelectiveParams::new(cfg, rng),
                select_t: SelectiveParams::new(cfg, rng),
            });
        }
        Ok(FusionBlock {
            branch_v,
            branch_t,
            shared_a: SharedA::new(d, n),
            a_log_t_separate: separate.then(|| shared_a_log_init(d, n)),
            extra_stages,
            head_verb: LinearParams::new(d, cfg.verb_vocab, rng),
            head_noun: LinearParams::new(d, cfg.noun_vocab, rng),
            ablation_separate_a: separate,
            mode,
        })
    }

    pub fn d_model(&self) -> usize {
        self.shared_a.a_log.shape()[0]
    }

    pub fn n_state(&self) -> usize {
        self.shared_a.a_log.shape()[1]
    }

    /// Bind every parameter into the graph. When A is shared and not
    /// detached, both branches receive the *same* graph node for A, so its
    /// gradient accumulates across branches in one backward pass.
    pub fn bind(&self, g: &mut Graph, detach: DetachA) -> BlockVars {
        let enc_v = self.branch_v.bind_encoder(g);
        let enc_t = self.branch_t.bind_encoder(g);
        let stage0 = bind_stage(
            g,
            &self.shared_a,
            self.a_log_t_separate.as_ref(),
            &self.branch_v.select,
            &self.branch_t.select,
            detach,
        );
        let extra = self
            .extra_stages
            .iter()
            .map(|s| {
                bind_stage(
                    g,
                    &s.shared_a,
                    s.a_log_t_separate.as_ref(),
                    &s.select_v,
                    &s.select_t,
                    detach,
                )
            })
            .collect();
        BlockVars {
            enc_v,
            enc_t,
            stage0,
            extra,
            head_verb: self.head_verb.bind(g),
            head_noun: self.head_noun.bind(g),
            mode: self.mode,
        }
    }
}

fn bind_stage(
    g: &mut Graph,
    shared_a: &SharedA,
    a_log_t_separate: Option<&Tensor>,
    select_v: &SelectiveParams,
    select_t: &SelectiveParams,
    detach: DetachA,
) -> StageVars {
    let a_log = g.param(&shared_a.a_log);
    let exp_a = g.exp(a_log);
    let a = g.neg(exp_a);
    let detached_copy = |g: &mut Graph, a: Var| {
        let value = g.value(a).clone();
        g.constant(value)
    };
    let mut a_log_t = None;
    let (a_v, a_t) = match a_log_t_separate {
        Some(sep) => {
            let alt = g.param(sep);
            a_log_t = Some(alt);
            let e = g.exp(alt);
            let at = g.neg(e);
            (a, at)
        }
        None => match detach {
            DetachA::Neither => (a, a),
            DetachA::VBranch => (detached_copy(g, a), a),
            DetachA::TBranch => (a, detached_copy(g, a)),
        },
    };
    StageVars {
        a_log,
        a_log_t,
        a_shared: a,
        a_v,
        a_t,
        select_v: select_v.bind(g),
        select_t: select_t.bind(g),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    /// Leaf var of the log-parameterized shared A.
    pub a_log: Var,
    /// Leaf var of the separate T-branch A, present only in that ablation.
    pub a_log_t: Option<Var>,
    /// The materialized shared-A node (before any detaching), for gradient reads.
    pub a_shared: Var,
    pub a_v: Var,
    pub a_t: Var,
    pub select_v: SelectiveVars,
    pub select_t: SelectiveVars,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub enc_v: EncoderVars,
    pub enc_t: EncoderVars,
    pub stage0: StageVars,
    pub extra: Vec<StageVars>,
    pub head_verb: LinearVars,
    pub head_noun: LinearVars,
    pub mode: DiscretizeMode,
}

// ── Forward pieces ───────────────────────────────────────────────────

/// Eq.-style pre-encoder: depthwise conv over the MLP-projected sequence,
/// same-length zero padding.
pub fn encode_modality(g: &mut Graph, x: Var, enc: &EncoderVars) -> Result<Var> {
    let h = enc.mlp.forward(g, x)?;
    g.conv1d_depthwise(h, enc.conv_kernel)
}

/// Input-dependent projections of one branch:
/// B = x·W_B, C = x·W_C (bias-free), Δ = softplus(Δ_base + x·W_Δ + b_Δ).
pub fn project_selective(
    g: &mut Graph,
    x: Var,
    sel: &SelectiveVars,
) -> Result<(Var, Var, Var)> {
    let b_mat = g.linear(x, sel.w_b, None)?;
    let c_mat = g.linear(x, sel.w_c, None)?;
    let pre = match sel.delta_proj {
        DeltaProjVars::Full(w) => g.linear(x, w, Some(sel.b_delta))?,
        DeltaProjVars::LowRank { down, up } => {
            let h = g.linear(x, down, None)?;
            g.linear(h, up, Some(sel.b_delta))?
        }
    };
    let pre = g.bias_add(pre, sel.delta_base)?;
    let delta = g.softplus(pre);
    Ok((b_mat, c_mat, delta))
}

/// One branch's selective pipeline: project, discretize against A, scan.
/// Runs through the fused discretize-and-scan primitive.
pub fn branch_ssm(
    g: &mut Graph,
    x: Var,
    sel: &SelectiveVars,
    a: Var,
    mode: DiscretizeMode,
) -> Result<Var> {
    let (b_mat, c_mat, delta) = project_selective(g, x, sel)?;
    g.selective_ssm(a, b_mat, c_mat, delta, x, mode)
}

/// Run both modality sequences through every fusion stage. Inputs are the
/// already-encoded sequences [B, F, D] and [B, L, D]; per-modality lengths
/// are preserved.
pub fn fusion_forward(
    g: &mut Graph,
    vars: &BlockVars,
    x_v: Var,
    x_t: Var,
) -> Result<(Var, Var)> {
    let dv = *g.value(x_v).shape().last().unwrap();
    let dt = *g.value(x_t).shape().last().unwrap();
    if dv != dt {
        return Err(CoreError::Configuration(format!(
            "fusion_forward: modality widths differ ({} vs {})",
            dv, dt
        )));
    }
    let mut y_v = x_v;
    let mut y_t = x_t;
    for stage in std::iter::once(&vars.stage0).chain(vars.extra.iter()) {
        y_v = branch_ssm(g, y_v, &stage.select_v, stage.a_v, vars.mode)?;
        y_t = branch_ssm(g, y_t, &stage.select_t, stage.a_t, vars.mode)?;
    }
    Ok((y_v, y_t))
}

/// Mean over each modality's sequence axis, then elementwise sum. Pooling
/// first is what makes F ≠ L well-defined.
pub fn pool_and_sum(g: &mut Graph, y_v: Var, y_t: Var) -> Result<Var> {
    let pv = g.mean_axis(y_v, 1)?;
    let pt = g.mean_axis(y_t, 1)?;
    g.add(pv, pt)
}

// ── Shared-gradient diagnostic ───────────────────────────────────────

/// A batch of already-encoded modality inputs plus labels, as consumed by
/// the decomposition diagnostic.
#[derive(Debug, Clone)]
pub struct FusionBatch {
    pub x_v: Tensor,
    pub x_t: Tensor,
    pub verbs: Vec<usize>,
    pub nouns: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    /// Worst |full − (V-only + T-only)| over all A entries and stages.
    pub max_abs_dev: f64,
    /// Per-stage deviation, stage 0 first.
    pub per_stage: Vec<f64>,
}

fn a_grads_with_detach(
    block: &FusionBlock,
    batch: &FusionBatch,
    detach: DetachA,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars = block.bind(&mut g, detach);
    let x_v = g.input(&batch.x_v);
    let x_t = g.input(&batch.x_t);
    let (y_v, y_t) = fusion_forward(&mut g, &vars, x_v, x_t)?;
    let fused = pool_and_sum(&mut g, y_v, y_t)?;
    let verb_logits = g.linear(fused, vars.head_verb.w, Some(vars.head_verb.b))?;
    let noun_logits = g.linear(fused, vars.head_noun.w, Some(vars.head_noun.b))?;
    let lv = g.cross_entropy(verb_logits, &batch.verbs)?;
    let ln = g.cross_entropy(noun_logits, &batch.nouns)?;
    let loss = g.add(lv, ln)?;
    g.backward(loss)?;
    let stages = std::iter::once(&vars.stage0).chain(vars.extra.iter());
    Ok(stages
        .map(|s| {
            g.grad(s.a_shared)
                .map(|v| v.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(s.a_shared).numel()])
        })
        .collect())
}

/// Verify that the shared-A gradient with both branches live equals the sum
/// of the per-branch contributions obtained by detaching the other branch.
pub fn shared_grad_decomposition_check(
    block: &FusionBlock,
    batch: &FusionBatch,
) -> Result<DecompositionReport> {
    if block.ablation_separate_a {
        return Err(CoreError::Contract(
            "decomposition check requires a shared A (separate-A ablation active)".into(),
        ));
    }
    let full = a_grads_with_detach(block, batch, DetachA::Neither)?;
    let v_only = a_grads_with_detach(block, batch, DetachA::TBranch)?;
    let t_only = a_grads_with_detach(block, batch, DetachA::VBranch)?;
    let mut per_stage = Vec::with_capacity(full.len());
    for ((f, v), t) in full.iter().zip(&v_only).zip(&t_only) {
        let mut worst = 0.0f64;
        for ((fv, vv), tv) in f.iter().zip(v).zip(t) {
            worst = worst.max((fv - (vv + tv)).abs());
        }
        per_stage.push(worst);
    }
    let max_abs_dev = per_stage.iter().cloned().fold(0.0, f64::max);
    Ok(DecompositionReport {
        max_abs_dev,
        per_stage,
    })
}

// ── Parameter registry ───────────────────────────────────────────────

impl Parameterized for FusionBlock {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.branch_v.encoder.visit("encoder_v", &mut out);
        self.branch_t.encoder.visit("encoder_t", &mut out);
        out.push(("stage0.a_log".into(), &self.shared_a.a_log));
        if let Some(t) = &self.a_log_t_separate {
            out.push(("stage0.a_log_t".into(), t));
        }
        self.branch_v.select.visit("stage0.v", &mut out);
        self.branch_t.select.visit("stage0.t", &mut out);
        for (i, s) in self.extra_stages.iter().enumerate() {
            let k = i + 1;
            out.push((format!("stage{k}.a_log"), &s.shared_a.a_log));
            if let Some(t) = &s.a_log_t_separate {
                out.push((format!("stage{k}.a_log_t"), t));
            }
            s.select_v.visit(&format!("stage{k}.v"), &mut out);
            s.select_t.visit(&format!("stage{k}.t"), &mut out);
        }
        out.push(("head_verb.w".into(), &self.head_verb.w));
        out.push(("head_verb.b".into(), &self.head_verb.b));
        out.push(("head_noun.w".into(), &self.head_noun.w));
        out.push(("head_noun.b".into(), &self.head_noun.b));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.branch_v.encoder.visit_mut("encoder_v", &mut out);
        self.branch_t.encoder.visit_mut("encoder_t", &mut out);
        out.push(("stage0.a_log".into(), &mut self.shared_a.a_log));
        if let Some(t) = &mut self.a_log_t_separate {
            out.push(("stage0.a_log_t".into(), t));
        }
        self.branch_v.select.visit_mut("stage0.v", &mut out);
        self.branch_t.select.visit_mut("stage0.t", &mut out);
        for (i, s) in self.extra_stages.iter_mut().enumerate() {
            let k = i + 1;
            out.push((format!("stage{k}.a_log"), &mut s.shared_a.a_log));
            if let Some(t) = &mut s.a_log_t_separate {
                out.push((format!("stage{k}.a_log_t"), t));
            }
            s.select_v.visit_mut(&format!("stage{k}.v"), &mut out);
            s.select_t.visit_mut(&format!("stage{k}.t"), &mut out);
        }
        out.push(("head_verb.w".into(), &mut self.head_verb.w));
        out.push(("head_verb.b".into(), &mut self.head_verb.b));
        out.push(("head_noun.w".into(), &mut self.head_noun.w));
        out.push(("head_noun.b".into(), &mut self.head_noun.b));
        out
    }
}

/// Write gradients harvested from a bound graph back onto the block's
/// parameter tensors, in registry order.
pub fn harvest_block_grads(block: &mut FusionBlock, g: &Graph, vars: &BlockVars) {
    let var_list = block_var_list(vars);
    let mut params = block.params_mut();
    debug_assert_eq!(var_list.len(), params.len());
    for ((_, tensor), var) in params.iter_mut().zip(var_list) {
        if let Some(grad) = g.grad(var) {
            tensor.accumulate_grad(grad);
        }
    }
}

/// Selective-projection vars in registry order.
pub fn selective_var_list(sv: &SelectiveVars, out: &mut Vec<Var>) {
    out.push(sv.w_b);
    out.push(sv.w_c);
    match sv.delta_proj {
        DeltaProjVars::Full(w) => out.push(w),
        DeltaProjVars::LowRank { down, up } => {
            out.push(down);
            out.push(up);
        }
    }
    out.push(sv.b_delta);
    out.push(sv.delta_base);
}

/// Graph vars in the same order as the parameter registry.
pub fn block_var_list(vars: &BlockVars) -> Vec<Var> {
    let mut out = Vec::new();
    EncoderParams::var_list(&vars.enc_v, &mut out);
    EncoderParams::var_list(&vars.enc_t, &mut out);
    let stage = |s: &StageVars, out: &mut Vec<Var>| {
        out.push(s.a_log);
        if let Some(alt) = s.a_log_t {
            out.push(alt);
        }
        selective_var_list(&s.select_v, out);
        selective_var_list(&s.select_t, out);
    };
    stage(&vars.stage0, &mut out);
    for s in &vars.extra {
        stage(s, &mut out);
    }
    out.extend([
        vars.head_verb.w,
        vars.head_verb.b,
        vars.head_noun.w,
        vars.head_noun.b,
    ]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.d_raw = 4;
        cfg.d_model = 4;
        cfg.n_state = 3;
        cfg.conv_k = 3;
        cfg.verb_vocab = 3;
        cfg.noun_vocab = 4;
        cfg
    }

    fn block(cfg: &TrainConfig, seed: u64) -> FusionBlock {
        FusionBlock::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn encoder_identity_configuration_passes_input_through() {
        // Identity weights, zero biases, delta conv kernel. The smooth
        // nonlinearity is only the identity where it saturates, so probe
        // with inputs in [7, 9].
        let cfg = small_cfg();
        let mut b = block(&cfg, 0);
        let d = cfg.d_model;
        let eye = |t: &mut Tensor| {
            let n = t.shape()[0];
            let data = t.data_mut();
            data.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                data[i * n + i] = 1.0;
            }
        };
        eye(&mut b.branch_v.encoder.mlp.w1);
        eye(&mut b.branch_v.encoder.mlp.w2);
        b.branch_v.encoder.mlp.b1.data_mut().iter_mut().for_each(|v| *v = 0.0);
        b.branch_v.encoder.mlp.b2.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let kd = b.branch_v.encoder.conv_kernel.data_mut();
        kd.iter_mut().for_each(|v| *v = 0.0);
        for di in 0..d {
            kd[di * cfg.conv_k + 1] = 1.0;
        }

        let mut g = Graph::no_grad();
        let enc = b.branch_v.bind_encoder(&mut g);
        let x = Tensor::new(
            vec![1, 3, d],
            (0..3 * d).map(|i| 7.0 + (i as f64) / (3 * d) as f64).collect(),
        )
        .unwrap();
        let xv = g.input(&x);
        let y = encode_modality(&mut g, xv, &enc).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_preserves_shape() {
        let mut cfg = TrainConfig::default();
        cfg.d_raw = 64;
        cfg.d_model = 64;
        let b = block(&cfg, 1);
        let mut g = Graph::no_grad();
        let enc = b.branch_v.bind_encoder(&mut g);
        let x = g.input(&Tensor::zeros(&[2, 32, 64]));
        let y = encode_modality(&mut g, x, &enc).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 32, 64]);
    }

    #[test]
    fn project_selective_zero_input() {
        let cfg = small_cfg();
        let b = block(&cfg, 2);
        let mut g = Graph::no_grad();
        let vars = b.bind(&mut g, DetachA::Neither);
        let x = g.input(&Tensor::zeros(&[2, 5, cfg.d_model]));
        let (bm, cm, delta) = project_selective(&mut g, x, &vars.stage0.select_v).unwrap();
        assert!(g.value(bm).data().iter().all(|&v| v == 0.0));
        assert!(g.value(cm).data().iter().all(|&v| v == 0.0));
        // delta = softplus(delta_base) broadcast over positions
        let base = &b.branch_v.select.delta_base;
        for (pos, row) in g.value(delta).data().chunks(cfg.d_model).enumerate() {
            for (di, &v) in row.iter().enumerate() {
                let want = crate::ops::softplus_scalar(base.data()[di]);
                assert!((v - want).abs() < 1e-15, "pos {pos} ch {di}");
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn project_selective_ln2_at_zero_base() {
        let cfg = small_cfg();
        let mut b = block(&cfg, 3);
        b.branch_v.select.delta_base.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::no_grad();
        let vars = b.bind(&mut g, DetachA::Neither);
        let x = g.input(&Tensor::zeros(&[1, 2, cfg.d_model]));
        let (_, _, delta) = project_selective(&mut g, x, &vars.stage0.select_v).unwrap();
        for &v in g.value(delta).data() {
            assert!((v - LN2).abs() < 1e-15);
        }
    }

    #[test]
    fn project_selective_shapes() {
        let mut cfg = TrainConfig::default();
        cfg.d_raw = 64;
        cfg.d_model = 64;
        cfg.n_state = 16;
        let b = block(&cfg, 4);
        let mut g = Graph::no_grad();
        let vars = b.bind(&mut g, DetachA::Neither);
        let x = g.input(&Tensor::zeros(&[2, 24, 64]));
        let (bm, cm, delta) = project_selective(&mut g, x, &vars.stage0.select_t).unwrap();
        assert_eq!(g.value(bm).shape(), &[2, 24, 16]);
        assert_eq!(g.value(cm).shape(), &[2, 24, 16]);
        assert_eq!(g.value(delta).shape(), &[2, 24, 64]);
    }

    #[test]
    fn fusion_forward_shape_contract() {
        let mut cfg = TrainConfig::default();
        cfg.d_raw = 64;
        cfg.d_model = 64;
        cfg.n_state = 16;
        let b = block(&cfg, 5);
        let mut g = Graph::no_grad();
        let vars = b.bind(&mut g, DetachA::Neither);
        let xv = g.input(&Tensor::randn(&[2, 32, 64], 0.1, &mut ChaCha8Rng::seed_from_u64(6)));
        let xt = g.input(&Tensor::randn(&[2, 24, 64], 0.1, &mut ChaCha8Rng::seed_from_u64(7)));
        let (yv, yt) = fusion_forward(&mut g, &vars, xv, xt).unwrap();
        assert_eq!(g.value(yv).shape(), &[2, 32, 64]);
        assert_eq!(g.value(yt).shape(), &[2, 24, 64]);
    }

    #[test]
    fn fusion_forward_zero_inputs_zero_outputs() {
        let cfg = small_cfg();
        let b = block(&cfg, 8);
        let mut g = Graph::no_grad();
        let vars = b.bind(&mut g, DetachA::Neither);
        let xv = g.input(&Tensor::zeros(&[2, 6, cfg.d_model]));
        let xt = g.input(&Tensor::zeros(&[2, 4, cfg.d_model]));
        let (yv, yt) = fusion_forward(&mut g, &vars, xv, xt).unwrap();
        assert!(g.value(yv).data().iter().all(|&v| v == 0.0));
        assert!(g.value(yt).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_branches_give_identical_outputs() {
        let cfg = small_cfg();
        let mut b = block(&cfg, 9);
        b.branch_t.select = b.branch_v.select.clone();
        let mut g = Graph::no_grad();
        let vars = b.bind(&mut g, DetachA::Neither);
        let x = Tensor::randn(&[2, 5, cfg.d_model], 0.7, &mut ChaCha8Rng::seed_from_u64(10));
        let xv = g.input(&x);
        let xt = g.input(&x);
        let (yv, yt) = fusion_forward(&mut g, &vars, xv, xt).unwrap();
        assert_eq!(g.value(yv).data(), g.value(yt).data());
    }

    #[test]
    fn shared_a_is_one_node_for_both_branches() {
        let cfg = small_cfg();
        let b = block(&cfg, 11);
        let mut g = Graph::new();
        let vars = b.bind(&mut g, DetachA::Neither);
        assert_eq!(vars.stage0.a_v, vars.stage0.a_t);
        assert!(vars.stage0.a_log_t.is_none());
    }

    #[test]
    fn separate_ablation_uses_two_a_parameters() {
        let mut cfg = small_cfg();
        cfg.ablation = crate::config::Ablation::SeparateA;
        let b = block(&cfg, 12);
        assert!(b.ablation_separate_a);
        let mut g = Graph::new();
        let vars = b.bind(&mut g, DetachA::Neither);
        assert_ne!(vars.stage0.a_v, vars.stage0.a_t);
        assert!(vars.stage0.a_log_t.is_some());
    }

    #[test]
    fn pool_and_sum_constants() {
        let mut g = Graph::no_grad();
        let yv = g.input(&Tensor::full(&[2, 7, 3], 1.5));
        let yt = g.input(&Tensor::full(&[2, 4, 3], -0.25));
        let fused = pool_and_sum(&mut g, yv, yt).unwrap();
        assert_eq!(g.value(fused).shape(), &[2, 3]);
        for &v in g.value(fused).data() {
            assert!((v - 1.25).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_and_sum_length_one() {
        let mut g = Graph::no_grad();
        let a = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![10.0, 20.0]).unwrap();
        let yv = g.input(&a);
        let yt = g.input(&b);
        let fused = pool_and_sum(&mut g, yv, yt).unwrap();
        assert_eq!(g.value(fused).data(), &[13.0, 24.0]);
    }

    #[test]
    fn pool_and_sum_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let yv = Tensor::randn(&[3, 5, 4], 1.0, &mut rng);
        let yt = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
        let mut g = Graph::no_grad();
        let v = g.input(&yv);
        let t = g.input(&yt);
        let fused = pool_and_sum(&mut g, v, t).unwrap();
        for bi in 0..3 {
            for di in 0..4 {
                let mv: f64 = (0..5).map(|s| yv.data()[(bi * 5 + s) * 4 + di]).sum::<f64>() / 5.0;
                let mt: f64 = (0..2).map(|s| yt.data()[(bi * 2 + s) * 4 + di]).sum::<f64>() / 2.0;
                let got = g.value(fused).data()[bi * 4 + di];
                assert!((got - (mv + mt)).abs() <= 1e-12);
            }
        }
    }

    fn random_batch(cfg: &TrainConfig, seed: u64) -> FusionBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusionBatch {
            x_v: Tensor::randn(&[2, 5, cfg.d_model], 0.8, &mut rng),
            x_t: Tensor::randn(&[2, 4, cfg.d_model], 0.8, &mut rng),
            verbs: vec![0, 2],
            nouns: vec![1, 3],
        }
    }

    #[test]
    fn decomposition_holds_on_random_batch() {
        let cfg = small_cfg();
        let b = block(&cfg, 3);
        let batch = random_batch(&cfg, 3);
        let report = shared_grad_decomposition_check(&b, &batch).unwrap();
        assert!(report.max_abs_dev <= 1e-10, "dev {}", report.max_abs_dev);
    }

    #[test]
    fn decomposition_with_zero_v_input_matches_t_only() {
        let cfg = small_cfg();
        let b = block(&cfg, 14);
        let mut batch = random_batch(&cfg, 15);
        batch.x_v = Tensor::zeros(&[2, 5, cfg.d_model]);
        // the V branch contributes nothing: full grad equals T-only grad
        let full = a_grads_with_detach(&b, &batch, DetachA::Neither).unwrap();
        let t_only = a_grads_with_detach(&b, &batch, DetachA::VBranch).unwrap();
        for (f, t) in full[0].iter().zip(&t_only[0]) {
            assert!((f - t).abs() <= 1e-12);
        }
    }

    #[test]
    fn decomposition_refuses_separate_a() {
        let mut cfg = small_cfg();
        cfg.ablation = crate::config::Ablation::SeparateA;
        let b = block(&cfg, 16);
        let batch = random_batch(&cfg, 17);
        assert!(matches!(
            shared_grad_decomposition_check(&b, &batch),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn registry_and_var_list_align() {
        for ablation in [crate::config::Ablation::None, crate::config::Ablation::SeparateA] {
            let mut cfg = small_cfg();
            cfg.ablation = ablation;
            cfg.depth = 2;
            let b = block(&cfg, 18);
            let mut g = Graph::new();
            let vars = b.bind(&mut g, DetachA::Neither);
            let var_list = block_var_list(&vars);
            let params = b.params();
            assert_eq!(var_list.len(), params.len());
            for ((name, tensor), var) in params.iter().zip(&var_list) {
                assert_eq!(
                    tensor.shape(),
                    g.value(*var).shape(),
                    "registry mismatch at {name}"
                );
                assert_eq!(tensor.data(), g.value(*var).data(), "value mismatch at {name}");
            }
        }
    }
}
