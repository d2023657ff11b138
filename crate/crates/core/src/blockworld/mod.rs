//! BlockWorld: a tabletop manipulation toy with a deterministic
//! feasibility oracle.
//!
//! Objects live on the unit square. A single gripper can approach a point,
//! grasp the nearest free object in reach, lift it, move it, place it
//! (optionally on another object), release it, or push an object along
//! the table. Every action is checked by [`oracle_step`]; illegal actions
//! leave the world untouched and report which rule they broke.
//!
//! Action sequences are what the policy generates. For the flow model each
//! step is encoded as `[one-hot token type (8) | params (4)]`.

mod metrics;
mod oracle;
mod tasks;

pub use metrics::{atp, d_phys, invariant_measure, repair, violation_rate, RepairReport};
pub use oracle::{
    continuation_relation, follow_relation, fusion_system, oracle_step, replay, Mode, StepOutcome,
    Violation,
};
pub use tasks::{script_demo, DemoShape, Stage, TaskId, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;

/// Dimension of the continuous parameter vector of one action.
pub const PARAM_DIM: usize = 4;
/// Number of discrete token types.
pub const N_TYPES: usize = 8;
/// Width of one encoded action step.
pub const STEP_DIM: usize = N_TYPES + PARAM_DIM;

/// Occupancy grid side length per virtual camera.
pub const GRID: usize = 8;
/// Proprioceptive vector: gripper x, y, lifted flag, holding flag.
pub const PROPRIO_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenType {
    Approach,
    Grasp,
    Lift,
    Move,
    Place,
    Release,
    Push,
    Noop,
}

impl TokenType {
    pub const ALL: [TokenType; N_TYPES] = [
        TokenType::Approach,
        TokenType::Grasp,
        TokenType::Lift,
        TokenType::Move,
        TokenType::Place,
        TokenType::Release,
        TokenType::Push,
        TokenType::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenType::Approach => "approach",
            TokenType::Grasp => "grasp",
            TokenType::Lift => "lift",
            TokenType::Move => "move",
            TokenType::Place => "place",
            TokenType::Release => "release",
            TokenType::Push => "push",
            TokenType::Noop => "noop",
        }
    }

    /// Per-dimension `(lo, hi)` parameter bounds. `None` means unbounded.
    ///
    /// Dimension meaning: `p0, p1` are an absolute target (approach, move)
    /// or an offset (place, push); `p2` is grip width; `p3` a rotation.
    pub fn param_bounds(self) -> Option<[(f64, f64); PARAM_DIM]> {
        const FREE: (f64, f64) = (-2.0, 2.0);
        const UNIT: (f64, f64) = (0.0, 1.0);
        const ROT: (f64, f64) = (-1.0, 1.0);
        Some(match self {
            TokenType::Approach => [UNIT, UNIT, UNIT, ROT],
            TokenType::Grasp => [FREE, FREE, UNIT, ROT],
            TokenType::Lift => [FREE, FREE, FREE, ROT],
            TokenType::Move => [UNIT, UNIT, FREE, ROT],
            TokenType::Place => [(-0.1, 0.1), (-0.1, 0.1), FREE, ROT],
            TokenType::Release => [FREE, FREE, UNIT, ROT],
            TokenType::Push => [(-0.3, 0.3), (-0.3, 0.3), FREE, ROT],
            TokenType::Noop => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionToken {
    #[serde(rename = "type")]
    pub kind: TokenType,
    pub params: [f64; PARAM_DIM],
}

impl ActionToken {
    pub fn new(kind: TokenType, params: [f64; PARAM_DIM]) -> Self {
        Self { kind, params }
    }

    pub fn noop() -> Self {
        Self::new(TokenType::Noop, [0.0; PARAM_DIM])
    }

    pub fn params_in_bounds(&self) -> bool {
        match self.kind.param_bounds() {
            None => self.params.iter().all(|p| p.is_finite()),
            Some(b) => self
                .params
                .iter()
                .zip(b)
                .all(|(p, (lo, hi))| p.is_finite() && *p >= lo && *p <= hi),
        }
    }

    /// Parameters clamped into this type's bounds, and the L2 distance moved.
    pub fn clamped(&self) -> (ActionToken, f64) {
        let Some(bounds) = self.kind.param_bounds() else {
            return (self.clone(), 0.0);
        };
        let mut out = self.clone();
        let mut d2 = 0.0;
        for (p, (lo, hi)) in out.params.iter_mut().zip(bounds) {
            let c = if p.is_finite() { p.clamp(lo, hi) } else { lo };
            let d = if p.is_finite() { *p - c } else { 0.0 };
            d2 += d * d;
            *p = c;
        }
        (out, d2.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub pos: [f64; 2],
    pub theta: f64,
    /// Object this one rests on, if stacked.
    pub on: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperPose {
    pub pos: [f64; 2],
    pub lifted: bool,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub task: TaskId,
    pub objects: Vec<ObjectPose>,
    pub gripper: GripperPose,
    pub held: Option<usize>,
    pub stage_counter: usize,
}

impl WorldState {
    /// Objects that may be grasped or pushed: nothing rests on them.
    pub fn top_is_free(&self, obj: usize) -> bool {
        !self.objects.iter().any(|o| o.on == Some(obj))
    }

    pub fn held_count(&self) -> usize {
        usize::from(self.held.is_some())
    }

    /// Observation as seen by the policy.
    pub fn observe(&self, n_cameras: usize) -> Observation {
        let mut grid_features = Vec::with_capacity(n_cameras * GRID * GRID);
        for cam in 0..n_cameras {
            // each extra camera samples the table with a small shift
            let shift = cam as f64 / (GRID * n_cameras.max(1)) as f64;
            let mut g = vec![0.0; GRID * GRID];
            for o in &self.objects {
                let cx = (((o.pos[0] + shift) * GRID as f64) as usize).min(GRID - 1);
                let cy = (((o.pos[1] + shift) * GRID as f64) as usize).min(GRID - 1);
                g[cy * GRID + cx] = 1.0;
            }
            grid_features.extend(g);
        }
        Observation {
            n_cameras,
            grid_features,
            task_token: self.task.index(),
            proprio: [
                self.gripper.pos[0],
                self.gripper.pos[1],
                f64::from(u8::from(self.gripper.lifted)),
                self.held_count() as f64,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub n_cameras: usize,
    /// `n_cameras` flattened `GRID×GRID` occupancy grids, entries in {0, 1}.
    pub grid_features: Vec<f64>,
    pub task_token: usize,
    pub proprio: [f64; PROPRIO_DIM],
}

impl Observation {
    pub fn camera(&self, cam: usize) -> &[f64] {
        &self.grid_features[cam * GRID * GRID..(cam + 1) * GRID * GRID]
    }
}

/// Horizon-`H` action sequence partitioned into `k` primitives of length `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub tokens: Vec<ActionToken>,
    pub k: usize,
    pub m: usize,
}

impl ActionSequence {
    pub fn new(tokens: Vec<ActionToken>, k: usize, m: usize) -> Result<Self> {
        if k == 0 || m == 0 || k * m != tokens.len() {
            return Err(Error::Partition { h: tokens.len(), k, m });
        }
        Ok(Self { tokens, k, m })
    }

    /// Pad `tokens` with noops to `k·m`.
    pub fn padded(mut tokens: Vec<ActionToken>, k: usize, m: usize) -> Result<Self> {
        if tokens.len() > k * m {
            return Err(Error::Partition { h: tokens.len(), k, m });
        }
        tokens.resize(k * m, ActionToken::noop());
        Self::new(tokens, k, m)
    }

    pub fn horizon(&self) -> usize {
        self.tokens.len()
    }

    pub fn types(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.kind.index()).collect()
    }

    /// `H × STEP_DIM` encoding: one-hot type followed by the parameters.
    pub fn to_tensor(&self) -> Tensor {
        let h = self.tokens.len();
        let mut t = Tensor::zeros(&[h, STEP_DIM]);
        for (i, tok) in self.tokens.iter().enumerate() {
            t.set(i, tok.kind.index(), 1.0);
            for (j, p) in tok.params.iter().enumerate() {
                t.set(i, N_TYPES + j, *p);
            }
        }
        t
    }

    /// Decode an `H × STEP_DIM` tensor. Each step takes the highest-scoring
    /// type among those `allowed(prev, next)` permits after the previous
    /// decoded type. The first step is unconstrained. If no type is
    /// permitted, `fallback(prev)` is consulted instead.
    pub fn decode(
        x: &Tensor,
        k: usize,
        m: usize,
        allowed: impl Fn(usize, usize) -> bool,
        fallback: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        if x.cols() != STEP_DIM {
            return Err(dim_err("decode", format!("expected {STEP_DIM} columns, got {}", x.cols())));
        }
        let mut tokens = Vec::with_capacity(x.rows());
        let mut prev: Option<usize> = None;
        for i in 0..x.rows() {
            let row = x.row(i);
            let pick = |ok: &dyn Fn(usize) -> bool| {
                (0..N_TYPES)
                    .filter(|j| ok(*j))
                    .fold(None, |best: Option<usize>, j| match best {
                        Some(b) if row[b] >= row[j] => Some(b),
                        _ => Some(j),
                    })
            };
            let choice = match prev {
                None => pick(&|_| true),
                Some(p) => pick(&|j| allowed(p, j)).or_else(|| pick(&|j| fallback(p, j))),
            }
            .unwrap_or(TokenType::Noop.index());
            let mut params = [0.0; PARAM_DIM];
            params.copy_from_slice(&row[N_TYPES..]);
            tokens.push(ActionToken::new(TokenType::ALL[choice], params));
            prev = Some(choice);
        }
        Self::new(tokens, k, m)
    }

    pub fn decode_unconstrained(x: &Tensor, k: usize, m: usize) -> Result<Self> {
        Self::decode(x, k, m, |_, _| true, |_, _| true)
    }
}

/// One recorded oracle step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub legal: bool,
    pub reason: Option<Violation>,
    pub state: WorldState,
}

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub schema_version: u32,
    pub task_id: TaskId,
    pub start: WorldState,
    pub observation: Observation,
    pub actions: ActionSequence,
    pub oracle_trace: Vec<TraceStep>,
}

impl Episode {
    pub fn all_legal(&self) -> bool {
        self.oracle_trace.iter().all(|s| s.legal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let toks = vec![
            ActionToken::new(TokenType::Approach, [0.2, 0.3, 0.5, 0.0]),
            ActionToken::new(TokenType::Grasp, [0.0, 0.0, 0.4, 0.0]),
        ];
        let seq = ActionSequence::padded(toks, 2, 2).unwrap();
        let back = ActionSequence::decode_unconstrained(&seq.to_tensor(), 2, 2).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn constrained_decode_skips_disallowed() {
        let mut x = Tensor::zeros(&[2, STEP_DIM]);
        x.set(0, TokenType::Lift.index(), 1.0);
        x.set(1, TokenType::Lift.index(), 1.0);
        x.set(1, TokenType::Move.index(), 0.5);
        let lift = TokenType::Lift.index();
        let seq = ActionSequence::decode(&x, 1, 2, |p, n| !(p == lift && n == lift), |_, _| true)
            .unwrap();
        assert_eq!(seq.tokens[1].kind, TokenType::Move);
    }

    #[test]
    fn partition_mismatch() {
        assert!(matches!(
            ActionSequence::new(vec![ActionToken::noop(); 5], 2, 2),
            Err(Error::Partition { .. })
        ));
    }

    #[test]
    fn clamping_cost() {
        let t = ActionToken::new(TokenType::Approach, [1.3, 0.5, 0.5, 0.0]);
        let (c, cost) = t.clamped();
        assert_eq!(c.params[0], 1.0);
        assert!((cost - 0.3).abs() < 1e-12);
        assert!(c.params_in_bounds());
    }
}
