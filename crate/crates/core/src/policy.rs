//! The vector-field network `v_θ(A_τ, o, τ)`.
//!
//! Tokens are laid out as `[vision (one per camera) | language | state |
//! H actions]`, each linearly embedded to `d_model`. Action tokens see
//! `[A_τ row | τ]`, and learned positional embeddings are added to them.
//! Each layer applies masked multi-head attention and a tanh feed-forward
//! block, both with residual connections; there is no normalisation layer.
//! A linear head maps the action rows back to `d_a`.
//!
//! The attention mask is blockwise causal over `[vision+language | state |
//! action]`, combined with the token-type mask expanded over the action
//! positions. Positions are typed by the argmax of the one-hot block of
//! `A_τ`.

use serde::{Deserialize, Serialize};

use crate::attention::{blockwise_structural_mask, multi_head, SeqMask};
use crate::blockworld::{ActionSequence, ActionToken, Observation, TaskId, GRID, N_TYPES, PROPRIO_DIM, STEP_DIM};
use crate::error::{dim_err, Error, Result};
use crate::numcore::{Rng, Tape, Tensor, Var};
use crate::topomask::{MaskMode, TopoMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_a: usize,
    pub h: usize,
    pub k: usize,
    pub m: usize,
    pub n_cameras: usize,
    pub mask_mode: MaskMode,
    pub time_conditioning: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            d_a: STEP_DIM,
            h: 20,
            k: 4,
            m: 5,
            n_cameras: 1,
            mask_mode: MaskMode::Hard,
            time_conditioning: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k * self.m != self.h {
            return Err(Error::Partition { h: self.h, k: self.k, m: self.m });
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Domain(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.d_a != STEP_DIM {
            return Err(Error::Domain(format!("d_a must be {STEP_DIM} for this environment, got {}", self.d_a)));
        }
        if self.n_cameras == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Domain("n_cameras, d_model and d_ff must be positive".into()));
        }
        Ok(())
    }

    /// `[vision + language, state, actions]` block sizes.
    pub fn layout(&self) -> [usize; 3] {
        [self.n_cameras + 1, 1, self.h]
    }

    pub fn n_tokens(&self) -> usize {
        self.n_cameras + 2 + self.h
    }

    pub fn action_offset(&self) -> usize {
        self.n_cameras + 2
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("vis_w".to_string(), vec![GRID * GRID, d]),
            ("vis_b".into(), vec![1, d]),
            ("lang".into(), vec![TaskId::ALL.len(), d]),
            ("state_w".into(), vec![PROPRIO_DIM, d]),
            ("state_b".into(), vec![1, d]),
            ("act_w".into(), vec![self.d_a + 1, d]),
            ("act_b".into(), vec![1, d]),
            ("pos".into(), vec![self.h, d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ff1_w", vec![d, f]),
                ("ff1_b", vec![1, f]),
                ("ff2_w", vec![f, d]),
                ("ff2_b", vec![1, d]),
            ] {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.push(("head_w".into(), vec![d, self.d_a]));
        out.push(("head_b".into(), vec![1, self.d_a]));
        out
    }
}

/// Named learnable arrays, in the order of [`ModelConfig::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl PolicyParams {
    /// Weights `N(0, 0.02²)`, biases zero, output head zero.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (names, tensors) = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("_b") || name.starts_with("head") {
                    Tensor::zeros(&shape)
                } else {
                    rng.gaussian(&shape).scale(0.02)
                };
                (name, t)
            })
            .unzip();
        Ok(Self { names, tensors })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (names, tensors) = cfg.param_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).unzip();
        Ok(Self { names, tensors })
    }

    /// Rebuilds from named arrays, checking them against `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let want = cfg.param_shapes();
        if want.len() != named.len() {
            return Err(Error::Checkpoint(format!("expected {} parameter arrays, found {}", want.len(), named.len())));
        }
        for ((wn, ws), (n, t)) in want.iter().zip(&named) {
            if wn != n || ws.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter {n} {:?} does not match {wn} {ws:?}", t.shape())));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every array as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }
}

/// Tape handles for a [`PolicyParams`], same order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

const VIS_W: usize = 0;
const VIS_B: usize = 1;
const LANG: usize = 2;
const STATE_W: usize = 3;
const STATE_B: usize = 4;
const ACT_W: usize = 5;
const ACT_B: usize = 6;
const POS: usize = 7;
const PER_LAYER: usize = 8;

/// Token type of each action row: argmax of its one-hot block.
pub fn action_types(a: &Tensor) -> Vec<usize> {
    (0..a.rows())
        .map(|r| {
            let row = &a.row(r)[..N_TYPES];
            (0..N_TYPES).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

fn check_inputs(obs: &Observation, a_tau: &Tensor, cfg: &ModelConfig) -> Result<()> {
    if a_tau.shape() != [cfg.h, cfg.d_a] {
        return Err(dim_err("encode", format!("A_tau {:?}, expected [{}, {}]", a_tau.shape(), cfg.h, cfg.d_a)));
    }
    if obs.n_cameras != cfg.n_cameras || obs.grid_features.len() != cfg.n_cameras * GRID * GRID {
        return Err(dim_err(
            "encode",
            format!("{} cameras with {} grid cells, model expects {}", obs.n_cameras, obs.grid_features.len(), cfg.n_cameras),
        ));
    }
    if obs.task_token >= TaskId::ALL.len() {
        return Err(Error::Domain(format!("task token {} out of range", obs.task_token)));
    }
    Ok(())
}

/// Token embeddings `[T × d_model]` recorded on the tape, without
/// positional embeddings.
pub fn encode_on(tape: &mut Tape, p: &Bound, obs: &Observation, a_tau: &Tensor, tau: f64, cfg: &ModelConfig) -> Result<Var> {
    check_inputs(obs, a_tau, cfg)?;
    let grid = tape.leaf(Tensor::new(vec![cfg.n_cameras, GRID * GRID], obs.grid_features.clone())?);
    let vis = tape.matmul(grid, p.vars[VIS_W])?;
    let vis = tape.add_row_bias(vis, p.vars[VIS_B])?;
    let lang = tape.gather_rows(p.vars[LANG], &[obs.task_token])?;
    let q = tape.leaf(Tensor::new(vec![1, PROPRIO_DIM], obs.proprio.to_vec())?);
    let state = tape.matmul(q, p.vars[STATE_W])?;
    let state = tape.add_row_bias(state, p.vars[STATE_B])?;
    let t_feat = if cfg.time_conditioning { tau } else { 0.0 };
    let x = Tensor::from_fn(cfg.h, cfg.d_a + 1, |r, c| if c < cfg.d_a { a_tau.get(r, c) } else { t_feat });
    let x = tape.leaf(x);
    let act = tape.matmul(x, p.vars[ACT_W])?;
    let act = tape.add_row_bias(act, p.vars[ACT_B])?;
    tape.concat_rows(&[vis, lang, state, act])
}

/// `v_θ` recorded on the tape. `m` is the mask leaf holding
/// `mask.matrix()`; its gradient is the mask gradient.
#[allow(clippy::too_many_arguments)]
pub fn forward_on(
    tape: &mut Tape,
    p: &Bound,
    m: Var,
    mask: &TopoMask,
    obs: &Observation,
    a_tau: &Tensor,
    tau: f64,
    cfg: &ModelConfig,
) -> Result<Var> {
    let structural = blockwise_structural_mask(&cfg.layout());
    let mask = mask.clone().with_mode(cfg.mask_mode);
    let seq = SeqMask::expand(&mask, &structural, cfg.action_offset(), &action_types(a_tau))?;
    forward_seq(tape, p, m, &seq, obs, a_tau, tau, cfg)
}

/// [`forward_on`] with an explicit sequence-level mask.
#[allow(clippy::too_many_arguments)]
pub fn forward_seq(
    tape: &mut Tape,
    p: &Bound,
    m: Var,
    seq: &SeqMask,
    obs: &Observation,
    a_tau: &Tensor,
    tau: f64,
    cfg: &ModelConfig,
) -> Result<Var> {
    let x = encode_on(tape, p, obs, a_tau, tau, cfg)?;
    let off = cfg.action_offset();
    let pad = tape.leaf(Tensor::zeros(&[off, cfg.d_model]));
    let pos = tape.concat_rows(&[pad, p.vars[POS]])?;
    let mut x = tape.add(x, pos)?;
    for l in 0..cfg.n_layers {
        let w = |i: usize| p.vars[POS + 1 + l * PER_LAYER + i];
        let att = multi_head(tape, x, w(0), w(1), w(2), w(3), cfg.n_heads, m, seq)?;
        x = tape.add(x, att)?;
        let h = tape.matmul(x, w(4))?;
        let h = tape.add_row_bias(h, w(5))?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, w(6))?;
        let h = tape.add_row_bias(h, w(7))?;
        x = tape.add(x, h)?;
    }
    let rows: Vec<usize> = (off..off + cfg.h).collect();
    let act = tape.gather_rows(x, &rows)?;
    let head = p.vars.len() - 2;
    let out = tape.matmul(act, p.vars[head])?;
    tape.add_row_bias(out, p.vars[head + 1])
}

pub fn encode(params: &PolicyParams, obs: &Observation, a_tau: &Tensor, tau: f64, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = encode_on(&mut tape, &p, obs, a_tau, tau, cfg)?;
    Ok(tape.value(x).clone())
}

/// `v_θ(A_τ, o, τ)` as an `H × d_a` tensor.
pub fn forward(
    params: &PolicyParams,
    obs: &Observation,
    a_tau: &Tensor,
    tau: f64,
    mask: &TopoMask,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let m = tape.leaf(mask.matrix().clone());
    let out = forward_on(&mut tape, &p, m, mask, obs, a_tau, tau, cfg)?;
    Ok(tape.value(out).clone())
}

/// Contiguous runs of `m` tokens.
pub fn split_primitives(seq: &ActionSequence, k: usize, m: usize) -> Result<Vec<Vec<ActionToken>>> {
    let h = seq.tokens.len();
    if k == 0 || m == 0 || k * m != h {
        return Err(Error::Partition { h, k, m });
    }
    Ok(seq.tokens.chunks(m).map(<[ActionToken]>::to_vec).collect())
}
