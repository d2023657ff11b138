//! Task definitions and the scripted demonstration planner.
//!
//! Tasks are declared in small text files (`crates/core/tasks/*.task`):
//!
//! ```text
//! name = stack-2
//! objects = 2
//! region = x_lo x_hi y_lo y_hi     # where objects are initially placed
//! min_separation = 0.3
//! stage = held 0                   # stages complete strictly in order
//! ```
//!
//! Stage predicates: `held i`, `lifted i`, `on i j`, `released-on i j`,
//! `at i x y tol`, `outside i x_lo x_hi y_lo y_hi`.

use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::oracle::replay;
use super::{
    ActionSequence, ActionToken, Episode, GripperPose, ObjectPose, TokenType, WorldState,
    EPISODE_SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "stack-2")]
    Stack2,
    #[serde(rename = "sort-3")]
    Sort3,
    #[serde(rename = "clear-table")]
    ClearTable,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Stack2, TaskId::Sort3, TaskId::ClearTable];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Stack2 => "stack-2",
            TaskId::Sort3 => "sort-3",
            TaskId::ClearTable => "clear-table",
        }
    }

    pub fn spec(self) -> &'static TaskSpec {
        static SPECS: OnceLock<Vec<TaskSpec>> = OnceLock::new();
        let specs = SPECS.get_or_init(|| {
            [
                include_str!("../../tasks/stack-2.task"),
                include_str!("../../tasks/sort-3.task"),
                include_str!("../../tasks/clear-table.task"),
            ]
            .iter()
            .map(|src| TaskSpec::parse(src).expect("bundled task specs parse"))
            .collect()
        });
        &specs[self.index()]
    }

    /// Random initial layout satisfying the task's placement constraints.
    pub fn sample_start(self, rng: &mut Rng) -> Result<WorldState> {
        let spec = self.spec();
        let [x0, x1, y0, y1] = spec.region;
        for _ in 0..1000 {
            let mut pts: Vec<[f64; 2]> = Vec::with_capacity(spec.objects);
            for _ in 0..spec.objects {
                pts.push([rng.uniform_range(x0, x1), rng.uniform_range(y0, y1)]);
            }
            let separated = pts.iter().enumerate().all(|(i, a)| {
                pts[i + 1..].iter().all(|b| {
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= spec.min_separation
                })
            });
            if !separated {
                continue;
            }
            pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
            return Ok(WorldState {
                task: self,
                objects: pts
                    .into_iter()
                    .map(|pos| ObjectPose { pos, theta: 0.0, on: None })
                    .collect(),
                gripper: GripperPose { pos: [0.5, 0.95], lifted: false, width: 0.9 },
                held: None,
                stage_counter: 0,
            });
        }
        Err(Error::PlannerFailed(1000))
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Held(usize),
    Lifted(usize),
    On(usize, usize),
    ReleasedOn(usize, usize),
    At { obj: usize, pos: [f64; 2], tol: f64 },
    Outside { obj: usize, region: [f64; 4] },
}

impl Stage {
    pub fn holds(&self, s: &WorldState) -> bool {
        let free = |i: usize| s.held != Some(i);
        match *self {
            Stage::Held(i) => s.held == Some(i),
            Stage::Lifted(i) => s.held == Some(i) && s.gripper.lifted,
            Stage::On(i, j) => s.objects[i].on == Some(j),
            Stage::ReleasedOn(i, j) => s.objects[i].on == Some(j) && free(i),
            Stage::At { obj, pos, tol } => {
                let p = s.objects[obj].pos;
                free(obj) && ((p[0] - pos[0]).powi(2) + (p[1] - pos[1]).powi(2)).sqrt() <= tol
            }
            Stage::Outside { obj, region: [x0, x1, y0, y1] } => {
                let p = s.objects[obj].pos;
                free(obj) && !(p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub objects: usize,
    pub region: [f64; 4],
    pub min_separation: f64,
    pub stages: Vec<Stage>,
}

impl TaskSpec {
    pub fn parse(src: &str) -> Result<Self> {
        let mut name = None;
        let mut objects = None;
        let mut region = None;
        let mut min_separation = 0.0;
        let mut stages = Vec::new();
        for (n, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let value = value.trim();
            let nums = |v: &str| -> Result<Vec<f64>> {
                v.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad number `{t}`: {e}"))))
                    .collect()
            };
            match key.trim() {
                "name" => name = Some(value.to_string()),
                "objects" => {
                    objects = Some(value.parse().map_err(|e| err(format!("objects: {e}")))?)
                }
                "region" => {
                    let v = nums(value)?;
                    region = Some(
                        <[f64; 4]>::try_from(v).map_err(|_| err("region needs 4 numbers".into()))?,
                    );
                }
                "min_separation" => {
                    min_separation = value.parse().map_err(|e| err(format!("min_separation: {e}")))?
                }
                "stage" => {
                    let (kind, rest) = value.split_once(' ').unwrap_or((value, ""));
                    let v = nums(rest)?;
                    let idx = |k: usize| v[k] as usize;
                    let want = |k: usize| {
                        if v.len() == k {
                            Ok(())
                        } else {
                            Err(err(format!("stage `{kind}` takes {k} arguments")))
                        }
                    };
                    stages.push(match kind {
                        "held" => want(1).map(|_| Stage::Held(idx(0)))?,
                        "lifted" => want(1).map(|_| Stage::Lifted(idx(0)))?,
                        "on" => want(2).map(|_| Stage::On(idx(0), idx(1)))?,
                        "released-on" => want(2).map(|_| Stage::ReleasedOn(idx(0), idx(1)))?,
                        "at" => want(4)
                            .map(|_| Stage::At { obj: idx(0), pos: [v[1], v[2]], tol: v[3] })?,
                        "outside" => want(5).map(|_| Stage::Outside {
                            obj: idx(0),
                            region: [v[1], v[2], v[3], v[4]],
                        })?,
                        other => return Err(err(format!("unknown stage kind `{other}`"))),
                    });
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Parse { line: 0, msg: format!("missing `{k}`") };
        let spec = TaskSpec {
            name: name.ok_or_else(|| missing("name"))?,
            objects: objects.ok_or_else(|| missing("objects"))?,
            region: region.ok_or_else(|| missing("region"))?,
            min_separation,
            stages,
        };
        let bad_obj = spec.stages.iter().any(|s| match *s {
            Stage::Held(i) | Stage::Lifted(i) => i >= spec.objects,
            Stage::On(i, j) | Stage::ReleasedOn(i, j) => i >= spec.objects || j >= spec.objects,
            Stage::At { obj, .. } | Stage::Outside { obj, .. } => obj >= spec.objects,
        });
        if bad_obj {
            return Err(Error::Parse { line: 0, msg: "stage refers to a missing object".into() });
        }
        Ok(spec)
    }

    pub fn total_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage counter after the stages that now hold, in order.
    pub fn advance(&self, s: &WorldState) -> usize {
        let mut c = s.stage_counter;
        while c < self.stages.len() && self.stages[c].holds(s) {
            c += 1;
        }
        c
    }
}

/// Horizon layout and camera count for generated episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoShape {
    pub k: usize,
    pub m: usize,
    pub n_cameras: usize,
}

impl Default for DemoShape {
    fn default() -> Self {
        Self { k: 4, m: 5, n_cameras: 1 }
    }
}

const OPEN: f64 = 0.9;
const CLOSED: f64 = 0.3;
const PUSH: f64 = 0.28;

fn plan(task: TaskId, start: &WorldState) -> Vec<ActionToken> {
    use TokenType::*;
    let t = ActionToken::new;
    let pick_and_carry = |from: [f64; 2], to: [f64; 2]| {
        vec![
            t(Approach, [from[0], from[1], OPEN, 0.0]),
            t(Grasp, [0.0, 0.0, CLOSED, 0.0]),
            t(Lift, [0.0; 4]),
            t(Move, [to[0], to[1], 0.0, 0.0]),
            t(Place, [0.0, 0.0, 0.0, 0.0]),
            t(Release, [0.0, 0.0, OPEN, 0.0]),
        ]
    };
    let spec = task.spec();
    match task {
        TaskId::Stack2 => pick_and_carry(start.objects[0].pos, start.objects[1].pos),
        TaskId::Sort3 => spec
            .stages
            .iter()
            .flat_map(|st| match *st {
                Stage::At { obj, pos, .. } => pick_and_carry(start.objects[obj].pos, pos),
                _ => Vec::new(),
            })
            .collect(),
        TaskId::ClearTable => start
            .objects
            .iter()
            .flat_map(|o| {
                let dx = if o.pos[0] < 0.5 { -PUSH } else { PUSH };
                vec![t(Approach, [o.pos[0], o.pos[1], OPEN, 0.0]), t(Push, [dx, 0.0, 0.0, 0.0])]
            })
            .collect(),
    }
}

/// Scripted demonstration with Gaussian jitter `jitter_sigma` on every
/// non-noop parameter. Layouts whose jittered plan fails the oracle are
/// resampled, up to 100 times.
pub fn script_demo(
    task: TaskId,
    rng: &mut Rng,
    jitter_sigma: f64,
    shape: DemoShape,
) -> Result<Episode> {
    const RETRIES: usize = 100;
    for _ in 0..RETRIES {
        let start = task.sample_start(rng)?;
        let mut tokens = plan(task, &start);
        for tok in tokens.iter_mut().filter(|t| t.kind != TokenType::Noop) {
            for p in tok.params.iter_mut() {
                *p += jitter_sigma * rng.normal();
            }
        }
        let actions = ActionSequence::padded(tokens, shape.k, shape.m)?;
        let trace = replay(&start, &actions);
        let done = trace.last().map_or(0, |s| s.state.stage_counter);
        if trace.iter().all(|s| s.legal) && done == task.spec().total_stages() {
            return Ok(Episode {
                schema_version: EPISODE_SCHEMA_VERSION,
                task_id: task,
                observation: start.observe(shape.n_cameras),
                start,
                actions,
                oracle_trace: trace,
            });
        }
    }
    Err(Error::PlannerFailed(RETRIES))
}
