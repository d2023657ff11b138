use super::oracle::{oracle_step, replay};
use super::{ActionSequence, ActionToken, TaskId, TokenType, WorldState};
use crate::numcore::Tensor;

/// Fraction of steps the oracle rejects.
pub fn violation_rate(seq: &ActionSequence, start: &WorldState) -> f64 {
    let trace = replay(start, seq);
    if trace.is_empty() {
        return 0.0;
    }
    trace.iter().filter(|s| !s.legal).count() as f64 / trace.len() as f64
}

/// Result of greedy repair.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairReport {
    pub repaired: ActionSequence,
    pub substitutions: usize,
    pub clamp_cost: f64,
}

impl RepairReport {
    pub fn cost(&self) -> f64 {
        self.substitutions as f64 + self.clamp_cost
    }
}

/// Substitution candidates in tie-break order. A substitution costs 1
/// plus its clamping distance; the noop needs no clamping, so it is
/// never beaten and the later entries only matter for ties.
const SUBSTITUTION_ORDER: [TokenType; 8] = [
    TokenType::Noop,
    TokenType::Approach,
    TokenType::Grasp,
    TokenType::Lift,
    TokenType::Move,
    TokenType::Place,
    TokenType::Release,
    TokenType::Push,
];

/// Greedy first-violation-first repair. Each illegal step is fixed either
/// by clamping its parameters into bounds (cost: L2 distance moved, used
/// when below 1 and sufficient) or by substituting a legal token (cost 1
/// plus clamping). This is an upper bound on the true minimal repair.
pub fn repair(seq: &ActionSequence, start: &WorldState) -> RepairReport {
    let mut s = start.clone();
    let mut tokens = Vec::with_capacity(seq.tokens.len());
    let mut substitutions = 0;
    let mut clamp_cost = 0.0;
    for tok in &seq.tokens {
        let out = oracle_step(&s, tok);
        if out.legal {
            s = out.state;
            tokens.push(tok.clone());
            continue;
        }
        let (clamped, cc) = tok.clamped();
        if cc > 0.0 && cc < 1.0 {
            let out = oracle_step(&s, &clamped);
            if out.legal {
                s = out.state;
                clamp_cost += cc;
                tokens.push(clamped);
                continue;
            }
        }
        let mut best: Option<(f64, ActionToken, WorldState)> = None;
        for kind in SUBSTITUTION_ORDER {
            let (cand, cc) = ActionToken::new(kind, tok.params).clamped();
            if best.as_ref().is_some_and(|(c, _, _)| *c <= cc) {
                continue;
            }
            let out = oracle_step(&s, &cand);
            if out.legal {
                best = Some((cc, cand, out.state));
            }
        }
        let (cc, cand, next) = best.expect("noop is legal in every state");
        substitutions += 1;
        clamp_cost += cc;
        s = next;
        tokens.push(cand);
    }
    RepairReport {
        repaired: ActionSequence { tokens, k: seq.k, m: seq.m },
        substitutions,
        clamp_cost,
    }
}

/// Distance to the feasible set: cost of [`repair`].
pub fn d_phys(seq: &ActionSequence, start: &WorldState) -> f64 {
    repair(seq, start).cost()
}

/// Per-step conserved quantities after each step, as an `H × 3` tensor:
/// objects on the table, objects held (0 or 1), completed stages.
pub fn invariant_measure(seq: &ActionSequence, start: &WorldState) -> Tensor {
    let trace = replay(start, seq);
    let rows: Vec<Vec<f64>> = trace
        .iter()
        .map(|t| {
            let on_table = t
                .state
                .objects
                .iter()
                .filter(|o| (0.0..=1.0).contains(&o.pos[0]) && (0.0..=1.0).contains(&o.pos[1]))
                .count();
            vec![on_table as f64, t.state.held_count() as f64, t.state.stage_counter as f64]
        })
        .collect();
    if rows.is_empty() {
        return Tensor::zeros(&[0, 3]);
    }
    Tensor::from_rows(&rows).expect("rows have equal length")
}

/// Average task progress: completed stages over total stages after
/// replay. Illegal steps are skipped.
pub fn atp(seq: &ActionSequence, start: &WorldState, task: TaskId) -> f64 {
    let mut s = start.clone();
    s.task = task;
    let trace = replay(&s, seq);
    let done = trace.last().map_or(s.stage_counter, |t| t.state.stage_counter);
    done as f64 / task.spec().total_stages() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{script_demo, DemoShape};
    use crate::numcore::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn demo(task: TaskId, seed: u64) -> crate::blockworld::Episode {
        script_demo(task, &mut Rng::new(seed), 0.01, DemoShape::default()).unwrap()
    }

    fn tok(t: TokenType) -> ActionToken {
        ActionToken::new(t, [0.0; 4])
    }

    #[test]
    fn demos_have_no_violations() {
        for task in TaskId::ALL {
            let ep = demo(task, 1);
            assert_eq!(violation_rate(&ep.actions, &ep.start), 0.0);
            assert_eq!(d_phys(&ep.actions, &ep.start), 0.0);
            assert_eq!(atp(&ep.actions, &ep.start, task), 1.0);
        }
    }

    #[test]
    fn all_lift_from_empty_gripper() {
        let ep = demo(TaskId::Stack2, 2);
        let seq = ActionSequence::new(vec![tok(TokenType::Lift); 20], 4, 5).unwrap();
        assert_eq!(violation_rate(&seq, &ep.start), 1.0);
    }

    #[test]
    fn one_illegal_step_in_twenty() {
        let ep = demo(TaskId::Stack2, 3);
        let mut seq = ep.actions.clone();
        // a second lift right after the first is rejected
        seq.tokens.insert(3, tok(TokenType::Lift));
        seq.tokens.pop();
        assert_eq!(violation_rate(&seq, &ep.start), 0.05);
        // one substitution with in-bound params
        assert_eq!(d_phys(&seq, &ep.start), 1.0);
        let fixed = repair(&seq, &ep.start).repaired;
        assert_eq!(violation_rate(&fixed, &ep.start), 0.0);
    }

    #[test]
    fn noop_sequence_has_zero_progress_and_constant_invariants() {
        let ep = demo(TaskId::Stack2, 4);
        let seq = ActionSequence::new(vec![ActionToken::noop(); 20], 4, 5).unwrap();
        assert_eq!(atp(&seq, &ep.start, TaskId::Stack2), 0.0);
        let inv = invariant_measure(&seq, &ep.start);
        for r in 0..20 {
            assert_eq!(inv.row(r), inv.row(0));
        }
    }

    #[test]
    fn held_count_profile() {
        let ep = demo(TaskId::Stack2, 5);
        let mut toks = ep.actions.tokens[..3].to_vec(); // approach, grasp, lift
        toks.push(tok(TokenType::Release));
        let seq = ActionSequence::new(toks, 1, 4).unwrap();
        let inv = invariant_measure(&seq, &ep.start);
        let held: Vec<f64> = (0..4).map(|r| inv.get(r, 1)).collect();
        assert_eq!(held, vec![0.0, 1.0, 1.0, 0.0]);
        let objs: Vec<f64> = (0..4).map(|r| inv.get(r, 0)).collect();
        assert!(objs.iter().all(|o| *o == 2.0));
    }

    #[test]
    fn half_of_stack_two() {
        let ep = demo(TaskId::Stack2, 6);
        let mut toks = ep.actions.tokens[..3].to_vec();
        toks.push(ActionToken::noop());
        let seq = ActionSequence::new(toks, 1, 4).unwrap();
        assert_eq!(atp(&seq, &ep.start, TaskId::Stack2), 0.5);
    }

    #[test]
    fn clamping_repair_is_cheaper_than_substitution() {
        let ep = demo(TaskId::Sort3, 7);
        let mut seq = ep.actions.clone();
        seq.tokens[3].params[0] = 1.05; // move target just off the table
        let r = repair(&seq, &ep.start);
        assert_eq!(r.substitutions, 0);
        assert!(r.cost() > 0.0 && r.cost() < 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn zero_distance_iff_no_violations(seed in 0u64..10_000, flips in proptest::collection::vec((0usize..20, 0usize..8), 0..4)) {
            let task = TaskId::ALL[(seed % 3) as usize];
            let ep = demo(task, seed);
            let mut seq = ep.actions.clone();
            for (pos, ty) in flips {
                seq.tokens[pos].kind = TokenType::ALL[ty];
            }
            let v = violation_rate(&seq, &ep.start);
            let d = d_phys(&seq, &ep.start);
            prop_assert_eq!(d == 0.0, v == 0.0);
        }

        #[test]
        fn legal_suffix_never_increases_distance(seed in 0u64..10_000, pos in 0usize..10, ty in 0usize..8) {
            let ep = demo(TaskId::Sort3, seed);
            let mut prefix = ep.actions.tokens[..10].to_vec();
            prefix[pos].kind = TokenType::ALL[ty];
            let short = ActionSequence::new(prefix.clone(), 1, 10).unwrap();
            let before = d_phys(&short, &ep.start);
            // a suffix that replays legally after the repaired prefix
            let rep_end = replay(&ep.start, &repair(&short, &ep.start).repaired)
                .last().unwrap().state.clone();
            let mut suffix = Vec::new();
            let mut s = rep_end;
            for cand in &ep.actions.tokens[10..] {
                let out = oracle_step(&s, cand);
                if out.legal {
                    s = out.state;
                    suffix.push(cand.clone());
                }
            }
            let mut full = prefix;
            full.extend(suffix);
            let n = full.len();
            let long = ActionSequence::new(full, 1, n).unwrap();
            prop_assert!(d_phys(&long, &ep.start) <= before);
        }
    }
}
