//! Training loop, optimizer and evaluation.
//!
//! One batch: draw `τ ~ Beta(α, β)` and Gaussian noise per example, build
//! `A_τ`, run the policy, assemble `flow + λ1·task + λ2·smooth + λ3·topo`,
//! average over the batch, take one Adam step on the network weights and
//! push the mask along `−∇_M L` through [`project_mask`].
//!
//! Per-example gradients are computed on separate tapes and summed in a
//! fixed order, so results do not depend on scheduling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blockworld::{
    atp, d_phys, follow_relation, fusion_system, invariant_measure, violation_rate, ActionSequence,
    Episode, Observation, TaskId, WorldState, EPISODE_SCHEMA_VERSION,
};
use crate::error::{dim_err, Error, Result};
use crate::flow::{self, fusion_basis, integrate, IntegratorSpec, LossWeights};
use crate::fusion::FusionSystem;
use crate::numcore::{Rng, Tape, Tensor};
use crate::policy::{self, ModelConfig, PolicyParams};
use crate::topomask::{build_mask, project_mask, MaskMode, NormWeight, TopoMask};

/// Default pentagon tolerance of the trained mask.
pub const MASK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau_alpha: f64,
    pub tau_beta: f64,
    /// Step size of the projected mask update; `None` uses `lr`.
    pub eta_mask: Option<f64>,
    pub mask_project_every: usize,
    pub grad_clip: f64,
    pub eps_pd: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            epochs: 10,
            lambda1: 0.1,
            lambda2: 0.05,
            lambda3: 0.2,
            tau_alpha: 1.5,
            tau_beta: 1.0,
            eta_mask: None,
            mask_project_every: 1,
            grad_clip: 1.0,
            eps_pd: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch size of the original large-scale setup.
    pub fn paper_scale(mut self) -> Self {
        self.batch_size = 256;
        self
    }

    pub fn eta(&self) -> f64 {
        self.eta_mask.unwrap_or(self.lr)
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda1, self.lambda2, self.lambda3)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("tau_alpha", self.tau_alpha),
            ("tau_beta", self.tau_beta),
            ("grad_clip", self.grad_clip),
            ("eps_pd", self.eps_pd),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.eta().is_finite() && self.eta() >= 0.0) {
            return Err(Error::Domain(format!("eta_mask must be non-negative, got {}", self.eta())));
        }
        if self.batch_size == 0 || self.mask_project_every == 0 {
            return Err(Error::Domain("batch_size and mask_project_every must be at least 1".into()));
        }
        self.weights().map(|_| ())
    }
}

/// Bias-corrected adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(dim_err("adam", format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(dim_err("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One Adam update of `params` in place.
pub fn optimizer_step(params: &mut [Tensor], grads: &[Tensor], state: &mut Adam, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

/// Loss components of one example or averaged over many.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub flow: f64,
    pub task: f64,
    pub smooth: f64,
    pub topo: f64,
    pub total: f64,
}

impl LossParts {
    fn accumulate(&mut self, o: &LossParts, s: f64) {
        self.flow += s * o.flow;
        self.task += s * o.task;
        self.smooth += s * o.smooth;
        self.topo += s * o.topo;
        self.total += s * o.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossParts,
    pub mask_residual: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub mask_grad_norm_mean: f64,
    pub clipped_steps: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_params: usize,
    pub epochs: Vec<EpochStats>,
    /// Measured run time. Not serialized, so reports stay reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// Gradients and loss of one example.
pub struct ExampleGrad {
    pub loss: LossParts,
    pub params: Vec<Tensor>,
    pub mask: Tensor,
}

/// Everything a single training example needs beyond the weights.
pub struct ExampleInput<'a> {
    pub obs: &'a Observation,
    pub a: &'a Tensor,
    pub a_tau: &'a Tensor,
    pub u: &'a Tensor,
    pub tau: f64,
    pub weight: &'a NormWeight,
    pub basis: &'a Tensor,
}

/// Taped loss of one example with gradients for every parameter and for
/// the mask matrix.
pub fn example_grad(
    params: &PolicyParams,
    mask: &TopoMask,
    x: &ExampleInput<'_>,
    w: &LossWeights,
    cfg: &ModelConfig,
) -> Result<ExampleGrad> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let m = tape.leaf(mask.matrix().clone());
    let v = policy::forward_on(&mut tape, &p, m, mask, x.obs, x.a_tau, x.tau, cfg)?;
    let u = tape.leaf(x.u.clone());
    let diff = tape.sub(v, u)?;
    let a_tau = tape.leaf(x.a_tau.clone());
    let step = tape.scale(v, 1.0 - x.tau);
    let a_hat = tape.add(a_tau, step)?;

    let l_flow = flow::taped::flow(&mut tape, diff, x.weight)?;
    let l_task = flow::taped::task(&mut tape, a_hat, x.a)?;
    let l_smooth = flow::taped::smooth(&mut tape, a_hat)?;
    let l_topo = flow::taped::topo(&mut tape, diff, x.basis)?;
    let t1 = tape.scale(l_task, w.lambda1);
    let t2 = tape.scale(l_smooth, w.lambda2);
    let t3 = tape.scale(l_topo, w.lambda3);
    let s = tape.add(l_flow, t1)?;
    let s = tape.add(s, t2)?;
    let total = tape.add(s, t3)?;

    let val = |v| tape.value(v).data()[0];
    let loss = LossParts {
        flow: val(l_flow),
        task: val(l_task),
        smooth: val(l_smooth),
        topo: val(l_topo),
        total: val(total),
    };
    let g = tape.backward(total)?;
    Ok(ExampleGrad { loss, params: p.vars.iter().map(|v| g.wrt(*v)).collect(), mask: g.wrt(m) })
}

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(|t| t.dot(t)).sum::<f64>().sqrt()
}

/// The four model variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Mask fixed to all ones.
    NoTopology,
    /// Full model sampled with Euler-10 instead of RK4-4.
    NoRk4,
    /// One primitive spanning the whole horizon.
    NoHierarchy,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTopology, Variant::NoRk4, Variant::NoHierarchy];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTopology => "NT",
            Variant::NoRk4 => "NR",
            Variant::NoHierarchy => "NH",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if self == Variant::NoHierarchy {
            cfg.k = 1;
            cfg.m = cfg.h;
        }
        cfg
    }

    pub fn integrator(self) -> IntegratorSpec {
        match self {
            Variant::NoRk4 => IntegratorSpec::euler_10(),
            _ => IntegratorSpec::rk4_4(),
        }
    }

    /// Initial mask and whether training may move it.
    pub fn initial_mask(self, fs: &FusionSystem, mode: MaskMode) -> (TopoMask, bool) {
        match self {
            Variant::NoTopology => (TopoMask::ones(fs.n_types(), MASK_TOL, mode), false),
            _ => (build_mask(fs, MASK_TOL, mode), true),
        }
    }
}

/// Stateful training run; one call to [`Trainer::run_epoch`] per epoch.
///
/// The weights are only touched after a step's loss and gradients have been
/// checked finite, so after an error [`Trainer::params`] still holds the
/// last good state.
pub struct Trainer<'a> {
    data: &'a [Episode],
    cfg: TrainConfig,
    model: ModelConfig,
    weights: LossWeights,
    fs: FusionSystem,
    params: PolicyParams,
    mask: TopoMask,
    train_mask: bool,
    adam: Adam,
    rng: Rng,
    basis: Tensor,
    targets: Vec<Tensor>,
    report: TrainReport,
    batches_seen: usize,
    mask_grad_acc: Tensor,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a [Episode],
        cfg: TrainConfig,
        model: ModelConfig,
        fs: FusionSystem,
        mask: TopoMask,
        train_mask: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if let Some(ep) = data.iter().find(|e| e.schema_version != EPISODE_SCHEMA_VERSION) {
            return Err(Error::Contract(format!(
                "episode schema version {} does not match {EPISODE_SCHEMA_VERSION}",
                ep.schema_version
            )));
        }
        if let Some(ep) = data.iter().find(|e| e.actions.horizon() != model.h) {
            return Err(dim_err("train", format!("episode horizon {} vs model horizon {}", ep.actions.horizon(), model.h)));
        }
        if mask.n() != fs.n_types() {
            return Err(dim_err("train", format!("mask over {} types, fusion system over {}", mask.n(), fs.n_types())));
        }
        let mut rng = Rng::new(cfg.seed);
        let params = PolicyParams::init(&model, &mut rng)?;
        let adam = Adam::new(params.tensors());
        let report = TrainReport { n_params: params.n_params(), ..Default::default() };
        let n = mask.n();
        Ok(Self {
            data,
            weights: cfg.weights()?,
            basis: fusion_basis(model.k, model.m, model.d_a),
            targets: data.iter().map(|e| e.actions.to_tensor()).collect(),
            cfg,
            model,
            fs,
            params,
            mask,
            train_mask,
            adam,
            rng,
            report,
            batches_seen: 0,
            mask_grad_acc: Tensor::zeros(&[n, n]),
            started: Instant::now(),
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn mask(&self) -> &TopoMask {
        &self.mask
    }

    pub fn fusion(&self) -> &FusionSystem {
        &self.fs
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn epochs_done(&self) -> usize {
        self.report.epochs.len()
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.report.epochs.len();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        self.rng.shuffle(&mut order);

        let mut sum = LossParts::default();
        let (mut gn_sum, mut gn_max, mut mg_sum, mut clipped) = (0.0, 0.0f64, 0.0, 0);
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let (loss, grads, mask_grad) = self.batch_gradient(batch, epoch, step)?;
            sum.accumulate(&loss, batch.len() as f64);

            let mut grads = grads;
            let gn = global_norm(&grads);
            if !gn.is_finite() || !mask_grad.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            gn_sum += gn;
            gn_max = gn_max.max(gn);
            if gn > self.cfg.grad_clip {
                clipped += 1;
                let s = self.cfg.grad_clip / gn;
                grads.iter_mut().for_each(|g| *g = g.scale(s));
            }
            self.adam.step(self.params.tensors_mut(), &grads, self.cfg.lr)?;

            if self.train_mask {
                mg_sum += mask_grad.frobenius_norm();
                self.mask_grad_acc.axpy(1.0, &mask_grad)?;
                self.batches_seen += 1;
                if self.batches_seen.is_multiple_of(self.cfg.mask_project_every) {
                    let update = self.mask_grad_acc.scale(-1.0);
                    self.mask = project_mask(&self.mask, &self.fs, &update, self.cfg.eta())?;
                    self.mask_grad_acc = Tensor::zeros(self.mask.matrix().shape());
                }
            }
        }

        let residual = self.mask.residual(&self.fs)?;
        if self.train_mask && residual > self.mask.tol() {
            return Err(Error::ProjectionFailed { iters: 0, residual });
        }
        let n = self.data.len() as f64;
        let nb = batches.len() as f64;
        let mean = LossParts {
            flow: sum.flow / n,
            task: sum.task / n,
            smooth: sum.smooth / n,
            topo: sum.topo / n,
            total: sum.total / n,
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: mean,
            mask_residual: residual,
            grad_norm_mean: gn_sum / nb,
            grad_norm_max: gn_max,
            mask_grad_norm_mean: if self.train_mask { mg_sum / nb } else { 0.0 },
            clipped_steps: clipped,
            steps: batches.len(),
        };
        self.report.epochs.push(stats.clone());
        self.report.wall_clock_s = self.started.elapsed().as_secs_f64();
        Ok(stats)
    }

    /// Mean loss and gradients over one batch. Noise is drawn up front in
    /// batch order; the per-example work is then independent.
    fn batch_gradient(&mut self, batch: &[usize], epoch: usize, step: usize) -> Result<(LossParts, Vec<Tensor>, Tensor)> {
        let mut draws = Vec::with_capacity(batch.len());
        for &i in batch {
            let tau = flow::sample_tau(&mut self.rng, self.cfg.tau_alpha, self.cfg.tau_beta)?;
            let noisy = flow::noise_sample(&self.targets[i], tau, &mut self.rng)?;
            let u = flow::ot_target(&noisy, &self.targets[i])?;
            draws.push((i, noisy, u));
        }

        let scale = 1.0 / batch.len() as f64;
        let mut loss = LossParts::default();
        let mut grads: Vec<Tensor> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut mask_grad = Tensor::zeros(self.mask.matrix().shape());
        for (i, noisy, u) in &draws {
            let ep = &self.data[*i];
            let weight = NormWeight::for_sequence(&self.mask, &ep.actions.types(), self.model.d_a, self.cfg.eps_pd)?;
            let input = ExampleInput {
                obs: &ep.observation,
                a: &self.targets[*i],
                a_tau: &noisy.a_tau,
                u,
                tau: noisy.tau,
                weight: &weight,
                basis: &self.basis,
            };
            let g = example_grad(&self.params, &self.mask, &input, &self.weights, &self.model)?;
            if !g.loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss.accumulate(&g.loss, scale);
            for (acc, gi) in grads.iter_mut().zip(&g.params) {
                acc.axpy(scale, gi)?;
            }
            mask_grad.axpy(scale, &g.mask)?;
        }
        Ok((loss, grads, mask_grad))
    }

    pub fn finish(mut self) -> Trained {
        self.report.wall_clock_s = self.started.elapsed().as_secs_f64();
        Trained { params: self.params, mask: self.mask, fusion: self.fs, model: self.model, report: self.report }
    }
}

/// Output of a finished run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: PolicyParams,
    pub mask: TopoMask,
    pub fusion: FusionSystem,
    pub model: ModelConfig,
    pub report: TrainReport,
}

/// Trains a variant on the BlockWorld fusion system for `cfg.epochs` epochs.
pub fn train_variant(dataset: &[Episode], cfg: &TrainConfig, model: &ModelConfig, variant: Variant) -> Result<Trained> {
    let fs = fusion_system();
    let model = variant.model_config(model);
    let (mask, trainable) = variant.initial_mask(&fs, model.mask_mode);
    let mut t = Trainer::new(dataset, cfg.clone(), model, fs, mask, trainable)?;
    for _ in 0..cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

/// The full model.
pub fn train(dataset: &[Episode], cfg: &TrainConfig, model: &ModelConfig) -> Result<Trained> {
    train_variant(dataset, cfg, model, Variant::Full)
}

/// Mean flow loss over a fixed set of `(example, τ, ε)` draws from
/// `seed`. Comparing two parameter sets on the same draws removes the
/// sampling noise that dominates per-epoch training means.
#[allow(clippy::too_many_arguments)]
pub fn probe_flow_loss(
    params: &PolicyParams,
    mask: &TopoMask,
    model: &ModelConfig,
    data: &[Episode],
    n: usize,
    tau_prior: (f64, f64),
    eps_pd: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || n == 0 {
        return Err(Error::Contract("probe needs at least one example and one draw".into()));
    }
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let ep = &data[rng.below(data.len())];
        let a = ep.actions.to_tensor();
        let tau = flow::sample_tau(&mut rng, tau_prior.0, tau_prior.1)?;
        let noisy = flow::noise_sample(&a, tau, &mut rng)?;
        let u = flow::ot_target(&noisy, &a)?;
        let v = policy::forward(params, &ep.observation, &noisy.a_tau, noisy.tau, mask, model)?;
        let w = NormWeight::for_sequence(mask, &ep.actions.types(), model.d_a, eps_pd)?;
        total += flow::loss_flow(&v, &u, &w)?;
    }
    Ok(total / n as f64)
}

/// Generated sequence plus its raw continuous endpoint.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sequence: ActionSequence,
    pub raw: Tensor,
    pub fn_evals: usize,
}

/// Integrates the learned field from Gaussian noise and decodes token
/// types: each step takes the best-scoring type that is not a hard zero
/// of the mask after the previous one. Learned entries that reached zero
/// during training do not restrict decoding.
pub fn sample_sequence(
    params: &PolicyParams,
    mask: &TopoMask,
    cfg: &ModelConfig,
    obs: &Observation,
    integrator: &IntegratorSpec,
    rng: &mut Rng,
) -> Result<Sample> {
    let a0 = rng.gaussian(&[cfg.h, cfg.d_a]);
    let (raw, fn_evals) = integrate(|a, tau| policy::forward(params, obs, a, tau, mask, cfg), &a0, integrator)?;
    let sequence = ActionSequence::decode(&raw, cfg.k, cfg.m, |p, n| !mask.is_forbidden(p, n), |_, _| true)?;
    Ok(Sample { sequence, raw, fn_evals })
}

/// Consecutive type pairs that never occur legally.
pub fn transition_violations(seq: &ActionSequence) -> usize {
    let follow = follow_relation();
    let t = seq.types();
    t.windows(2).filter(|w| !follow[w[0]][w[1]]).count()
}

/// Per-task evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskId,
    pub n_episodes: usize,
    pub atp_mean: f64,
    pub violation_rate: f64,
    pub d_phys_mean: f64,
    pub transition_violations: usize,
    /// Mean fraction of steps at which no object is held twice and the
    /// stage counter has not decreased.
    pub invariant_ok: f64,
    pub fn_evals: usize,
    #[serde(skip)]
    pub wall_ms: f64,
}

fn invariant_ok(seq: &ActionSequence, start: &WorldState) -> f64 {
    let prof = invariant_measure(seq, start);
    if prof.rows() == 0 {
        return 1.0;
    }
    let mut prev_stage = start.stage_counter as f64;
    let mut ok = 0;
    for r in 0..prof.rows() {
        let row = prof.row(r);
        if row[1] <= 1.0 && row[2] >= prev_stage {
            ok += 1;
        }
        prev_stage = row[2];
    }
    ok as f64 / prof.rows() as f64
}

/// Scores already-generated sequences for one task.
pub fn score_sequences(task: TaskId, runs: &[(WorldState, ActionSequence)], fn_evals: usize, wall_ms: f64) -> TaskMetrics {
    let n = runs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&WorldState, &ActionSequence) -> f64| runs.iter().map(|(s, q)| f(s, q)).sum::<f64>() / n;
    TaskMetrics {
        task,
        n_episodes: runs.len(),
        atp_mean: mean(&|s, q| atp(q, s, task)),
        violation_rate: mean(&|s, q| violation_rate(q, s)),
        d_phys_mean: mean(&|s, q| d_phys(q, s)),
        transition_violations: runs.iter().map(|(_, q)| transition_violations(q)).sum(),
        invariant_ok: mean(&|s, q| invariant_ok(q, s)),
        fn_evals,
        wall_ms,
    }
}

/// Samples `n_episodes` sequences per task from fresh start states and
/// scores them against the oracle. Start states and noise come from
/// per-task streams of `seed`, so every variant sees the same episodes.
pub fn evaluate(
    params: &PolicyParams,
    mask: &TopoMask,
    cfg: &ModelConfig,
    tasks: &[TaskId],
    n_episodes: usize,
    integrator: &IntegratorSpec,
    seed: u64,
) -> Result<Vec<TaskMetrics>> {
    let mut out = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let mut env_rng = Rng::stream(seed, 2 * task.index() as u64);
        let mut noise_rng = Rng::stream(seed, 2 * task.index() as u64 + 1);
        let mut runs = Vec::with_capacity(n_episodes);
        let mut evals = 0;
        let started = Instant::now();
        for _ in 0..n_episodes {
            let start = task.sample_start(&mut env_rng)?;
            let obs = start.observe(cfg.n_cameras);
            let s = sample_sequence(params, mask, cfg, &obs, integrator, &mut noise_rng)?;
            evals = s.fn_evals;
            runs.push((start, s.sequence));
        }
        let wall_ms = started.elapsed().as_secs_f64() * 1e3 / n_episodes.max(1) as f64;
        out.push(score_sequences(task, &runs, evals, wall_ms));
    }
    Ok(out)
}
