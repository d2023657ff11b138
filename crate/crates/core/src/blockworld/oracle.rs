use serde::{Deserialize, Serialize};

use super::{ActionSequence, ActionToken, TokenType, TraceStep, WorldState, N_TYPES};
use crate::fusion::FusionSystem;

/// Distance within which the gripper can grasp or push an object.
pub const REACH: f64 = 0.12;
/// A placed object rests on another if their centres are this close.
pub const STACK_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    ParamOutOfBounds,
    ApproachWhileHolding,
    GraspWhileHolding,
    GraspNothingInReach,
    LiftWithoutGrasp,
    LiftWhileLifted,
    MoveWithoutGrasp,
    MoveWithoutLift,
    PlaceWithoutGrasp,
    PlaceWithoutLift,
    PlaceOutOfBounds,
    ReleaseWithoutGrasp,
    PushWhileHolding,
    PushNothingInReach,
    PushOutOfBounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub legal: bool,
    pub reason: Option<Violation>,
}

fn in_table(p: [f64; 2]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Nearest free-topped object within reach of the gripper (ties: lower index).
fn reachable_object(s: &WorldState) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in s.objects.iter().enumerate() {
        if s.held == Some(i) || !s.top_is_free(i) {
            continue;
        }
        let d = dist(o.pos, s.gripper.pos);
        if d <= REACH && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Object (other than `except`) that something set down at `p` rests on.
fn support_at(s: &WorldState, p: [f64; 2], except: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in s.objects.iter().enumerate() {
        if i == except || !s.top_is_free(i) {
            continue;
        }
        let d = dist(o.pos, p);
        if d <= STACK_RADIUS && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

fn set_down(s: &mut WorldState, obj: usize, p: [f64; 2]) {
    let support = support_at(s, p, obj);
    let at = support.map_or(p, |i| s.objects[i].pos);
    let o = &mut s.objects[obj];
    o.pos = at;
    o.on = support;
    s.gripper.pos = at;
    s.gripper.lifted = false;
}

/// Apply one action. Illegal actions return the input state unchanged.
pub fn oracle_step(state: &WorldState, action: &ActionToken) -> StepOutcome {
    let reject = |v: Violation| StepOutcome { state: state.clone(), legal: false, reason: Some(v) };
    if !action.params_in_bounds() {
        return reject(Violation::ParamOutOfBounds);
    }
    let p = action.params;
    let mut s = state.clone();
    match action.kind {
        TokenType::Noop => {}
        TokenType::Approach => {
            if s.held.is_some() {
                return reject(Violation::ApproachWhileHolding);
            }
            s.gripper.pos = [p[0], p[1]];
            s.gripper.width = p[2];
        }
        TokenType::Grasp => {
            if s.held.is_some() {
                return reject(Violation::GraspWhileHolding);
            }
            let Some(obj) = reachable_object(&s) else {
                return reject(Violation::GraspNothingInReach);
            };
            s.held = Some(obj);
            s.gripper.width = p[2];
            let o = &mut s.objects[obj];
            o.on = None;
            o.pos = s.gripper.pos;
        }
        TokenType::Lift => {
            if s.held.is_none() {
                return reject(Violation::LiftWithoutGrasp);
            }
            if s.gripper.lifted {
                return reject(Violation::LiftWhileLifted);
            }
            s.gripper.lifted = true;
        }
        TokenType::Move => {
            let Some(obj) = s.held else {
                return reject(Violation::MoveWithoutGrasp);
            };
            if !s.gripper.lifted {
                return reject(Violation::MoveWithoutLift);
            }
            s.gripper.pos = [p[0], p[1]];
            let o = &mut s.objects[obj];
            o.pos = s.gripper.pos;
            o.theta += 0.5 * p[3];
        }
        TokenType::Place => {
            let Some(obj) = s.held else {
                return reject(Violation::PlaceWithoutGrasp);
            };
            if !s.gripper.lifted {
                return reject(Violation::PlaceWithoutLift);
            }
            let target = [s.gripper.pos[0] + p[0], s.gripper.pos[1] + p[1]];
            if !in_table(target) {
                return reject(Violation::PlaceOutOfBounds);
            }
            set_down(&mut s, obj, target);
        }
        TokenType::Release => {
            let Some(obj) = s.held else {
                return reject(Violation::ReleaseWithoutGrasp);
            };
            if s.gripper.lifted {
                // dropped where the gripper is
                let at = s.gripper.pos;
                set_down(&mut s, obj, at);
            }
            s.held = None;
            s.gripper.width = p[2];
        }
        TokenType::Push => {
            if s.held.is_some() {
                return reject(Violation::PushWhileHolding);
            }
            let Some(obj) = reachable_object(&s) else {
                return reject(Violation::PushNothingInReach);
            };
            let o = &s.objects[obj];
            let target = [o.pos[0] + p[0], o.pos[1] + p[1]];
            if !in_table(target) {
                return reject(Violation::PushOutOfBounds);
            }
            let o = &mut s.objects[obj];
            o.pos = target;
            o.on = None;
            s.gripper.pos = target;
        }
    }
    s.stage_counter = s.task.spec().advance(&s);
    StepOutcome { state: s, legal: true, reason: None }
}

/// Replay a sequence from `start`, recording every step.
pub fn replay(start: &WorldState, seq: &ActionSequence) -> Vec<TraceStep> {
    let mut s = start.clone();
    seq.tokens
        .iter()
        .map(|a| {
            let out = oracle_step(&s, a);
            s = out.state.clone();
            TraceStep { legal: out.legal, reason: out.reason, state: out.state }
        })
        .collect()
}

/// Abstract gripper mode. Legality of every token type depends only on
/// the mode, which makes the transition relation finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Empty gripper, nothing graspable in reach.
    EmptyFar,
    /// Empty gripper, a free object in reach.
    EmptyNear,
    HoldingDown,
    HoldingLifted,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::EmptyFar, Mode::EmptyNear, Mode::HoldingDown, Mode::HoldingLifted];

    pub fn of(s: &WorldState) -> Mode {
        match (s.held.is_some(), s.gripper.lifted) {
            (true, true) => Mode::HoldingLifted,
            (true, false) => Mode::HoldingDown,
            _ if reachable_object(s).is_some() => Mode::EmptyNear,
            _ => Mode::EmptyFar,
        }
    }

    pub fn permits(self, t: TokenType) -> bool {
        use TokenType::*;
        match self {
            Mode::EmptyFar => matches!(t, Approach | Noop),
            Mode::EmptyNear => matches!(t, Approach | Grasp | Push | Noop),
            Mode::HoldingDown => matches!(t, Lift | Release | Noop),
            Mode::HoldingLifted => matches!(t, Move | Place | Release | Noop),
        }
    }

    /// Modes a legal `t` can lead to from `self`.
    pub fn successors(self, t: TokenType) -> Vec<Mode> {
        use TokenType::*;
        if !self.permits(t) {
            return Vec::new();
        }
        match t {
            Noop => vec![self],
            Approach => vec![Mode::EmptyFar, Mode::EmptyNear],
            Grasp | Place => vec![Mode::HoldingDown],
            Lift | Move => vec![Mode::HoldingLifted],
            Release | Push => vec![Mode::EmptyNear],
        }
    }
}

/// `follow[i][j]`: some state exists in which `j` legally follows `i`.
pub fn follow_relation() -> [[bool; N_TYPES]; N_TYPES] {
    let mut rel = [[false; N_TYPES]; N_TYPES];
    for mode in Mode::ALL {
        for a in TokenType::ALL {
            for next in mode.successors(a) {
                for b in TokenType::ALL {
                    if next.permits(b) {
                        rel[a.index()][b.index()] = true;
                    }
                }
            }
        }
    }
    rel
}

/// `cont[a][b][c]`: `c` is a valid continuation of the pair `(a, b)`.
///
/// A triple counts if some state runs `a, b, c` legally. The noop is
/// legal everywhere and is always a continuation, so every pair has at
/// least one.
pub fn continuation_relation() -> Vec<Vec<Vec<bool>>> {
    let mut rel = vec![vec![vec![false; N_TYPES]; N_TYPES]; N_TYPES];
    for mode in Mode::ALL {
        for a in TokenType::ALL {
            for m1 in mode.successors(a) {
                for b in TokenType::ALL {
                    for m2 in m1.successors(b) {
                        for c in TokenType::ALL {
                            if m2.permits(c) {
                                rel[a.index()][b.index()][c.index()] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    for row in rel.iter_mut() {
        for cell in row.iter_mut() {
            cell[TokenType::Noop.index()] = true;
        }
    }
    rel
}

/// The fusion system whose mask is exactly BlockWorld's follow relation.
pub fn fusion_system() -> FusionSystem {
    let follow = follow_relation();
    let legal: Vec<Vec<bool>> = follow.iter().map(|r| r.to_vec()).collect();
    FusionSystem::from_relations(&legal, &continuation_relation())
        .expect("BlockWorld relations satisfy the fusion invariants")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{GripperPose, ObjectPose, TaskId};

    pub(crate) fn world(objs: &[[f64; 2]]) -> WorldState {
        WorldState {
            task: TaskId::Stack2,
            objects: objs.iter().map(|p| ObjectPose { pos: *p, theta: 0.0, on: None }).collect(),
            gripper: GripperPose { pos: [0.5, 0.95], lifted: false, width: 1.0 },
            held: None,
            stage_counter: 0,
        }
    }

    fn tok(t: TokenType, p: [f64; 4]) -> ActionToken {
        ActionToken::new(t, p)
    }

    #[test]
    fn lift_with_empty_gripper() {
        let s = world(&[[0.2, 0.2]]);
        let out = oracle_step(&s, &tok(TokenType::Lift, [0.0; 4]));
        assert!(!out.legal);
        assert_eq!(out.reason, Some(Violation::LiftWithoutGrasp));
        assert_eq!(out.state, s);
    }

    #[test]
    fn noop_is_always_legal() {
        let mut s = world(&[[0.2, 0.2]]);
        s.held = Some(0);
        s.gripper.lifted = true;
        s.stage_counter = s.task.spec().advance(&s);
        let out = oracle_step(&s, &tok(TokenType::Noop, [9.0; 4]));
        assert!(out.legal);
        assert_eq!(out.state, s);
    }

    #[test]
    fn approach_grasp_lift() {
        let s = world(&[[0.2, 0.2], [0.7, 0.3]]);
        let a = oracle_step(&s, &tok(TokenType::Approach, [0.21, 0.2, 1.0, 0.0]));
        assert!(a.legal);
        let g = oracle_step(&a.state, &tok(TokenType::Grasp, [0.0, 0.0, 0.3, 0.0]));
        assert!(g.legal);
        assert_eq!(g.state.held, Some(0));
        assert_eq!(g.state.objects[0].pos, g.state.gripper.pos);
        let l = oracle_step(&g.state, &tok(TokenType::Lift, [0.0; 4]));
        assert!(l.legal);
        assert!(l.state.gripper.lifted);
    }

    #[test]
    fn stepping_is_deterministic() {
        let s = world(&[[0.2, 0.2], [0.7, 0.3]]);
        let a = tok(TokenType::Approach, [0.7, 0.31, 1.0, 0.0]);
        assert_eq!(oracle_step(&s, &a), oracle_step(&s, &a));
    }

    #[test]
    fn out_of_bounds_params_are_illegal() {
        let s = world(&[[0.2, 0.2]]);
        let out = oracle_step(&s, &tok(TokenType::Approach, [1.5, 0.2, 0.5, 0.0]));
        assert_eq!(out.reason, Some(Violation::ParamOutOfBounds));
    }

    #[test]
    fn follow_relation_examples() {
        let f = follow_relation();
        use TokenType::*;
        assert!(f[Grasp.index()][Lift.index()]);
        assert!(!f[Lift.index()][Grasp.index()]);
        assert!(!f[Grasp.index()][Grasp.index()]);
        assert!(TokenType::ALL.iter().all(|t| f[t.index()][Noop.index()]));
        assert!(TokenType::ALL.iter().all(|t| f[Noop.index()][t.index()]));
    }
}
