//! Property battery shared by the proptest target and the acceptance gate.

#![allow(dead_code)]

use contrastnet::augment::{eda_augment, EdaParams};
use contrastnet::corpus::TokenId;
use contrastnet::encoder::{encode, EncoderParams};
use contrastnet::eval::{nn_predict, proto_predict};
use contrastnet::gradcheck::{
    adjoint_trial_error, random_ntxent_case, random_supcon_case, ADJOINT_TOLERANCE,
};
use contrastnet::losses::{anneal_alpha, ntxent_loss, supcon_loss, LossConfig};
use contrastnet::seeded_rng;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;

pub struct Invariant {
    pub name: &'static str,
    pub cases: u32,
    /// Listed by the acceptance gate's invariant criterion.
    pub gated: bool,
    check: fn(&mut TestRunner) -> Result<(), String>,
}

impl Invariant {
    /// Runs the property on a deterministic runner; returns the case count.
    pub fn run(&self) -> Result<u32, String> {
        let config = Config {
            cases: self.cases,
            failure_persistence: None,
            ..Config::default()
        };
        let mut runner =
            TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
        (self.check)(&mut runner).map_err(|e| format!("{}: {e}", self.name))?;
        Ok(self.cases)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg.into()))
    }
}

fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut seeded_rng(seed, 7));
    p
}

fn scaled(m: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    m.iter()
        .map(|r| r.iter().map(|x| x * s).collect())
        .collect()
}

fn supcon_permutation(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(any::<u64>(), any::<u64>(), 0.1f64..4.0),
            |(seed, pseed, s)| {
                let case = random_supcon_case(&mut seeded_rng(seed, 0));
                let reps = scaled(&case.reps, s);
                let base = supcon_loss(&reps, &case.labels, case.tau).unwrap();
                let p = permutation(reps.len(), pseed);
                let preps: Vec<_> = p.iter().map(|&i| reps[i].clone()).collect();
                let plabels: Vec<_> = p.iter().map(|&i| case.labels[i]).collect();
                let moved = supcon_loss(&preps, &plabels, case.tau).unwrap();
                ensure(close(base.value, moved.value, 1e-12), "value changed")?;
                for (slot, &i) in p.iter().enumerate() {
                    for (a, b) in moved.grads[slot].iter().zip(&base.grads[i]) {
                        ensure(
                            close(*a, *b, 1e-10),
                            "gradient did not follow the permutation",
                        )?;
                    }
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

fn ntxent_permutation(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(any::<u64>(), any::<u64>(), 0.1f64..4.0),
            |(seed, pseed, s)| {
                let case = random_ntxent_case(&mut seeded_rng(seed, 0));
                let (o, v) = (scaled(&case.originals, s), scaled(&case.views, s));
                let base = ntxent_loss(&o, &v, case.tau).unwrap().value;
                let p = permutation(o.len(), pseed);
                let po: Vec<_> = p.iter().map(|&i| o[i].clone()).collect();
                let pv: Vec<_> = p.iter().map(|&i| v[i].clone()).collect();
                ensure(
                    close(base, ntxent_loss(&po, &pv, case.tau).unwrap().value, 1e-12),
                    "pair order",
                )?;
                ensure(
                    close(base, ntxent_loss(&v, &o, case.tau).unwrap().value, 1e-12),
                    "side swap",
                )
            },
        )
        .map_err(|e| e.to_string())
}

fn supcon_relabeling(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&(any::<u64>(), any::<u64>()), |(seed, salt)| {
            let case = random_supcon_case(&mut seeded_rng(seed, 0));
            let base = supcon_loss(&case.reps, &case.labels, case.tau).unwrap();
            let renamed: Vec<String> = case
                .labels
                .iter()
                .map(|l| format!("class-{}", (*l as u64).wrapping_mul(2654435761) ^ salt))
                .collect();
            let other = supcon_loss(&case.reps, &renamed, case.tau).unwrap();
            ensure(
                base.value.to_bits() == other.value.to_bits(),
                "value changed",
            )?;
            ensure(base.grads == other.grads, "gradients changed")
        })
        .map_err(|e| e.to_string())
}

fn support_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..10, 1usize..8).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(-1.0f64..1.0, d),
        )
    })
}

fn nn_scale_invariance(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(support_strategy(), 1e-3f64..1e3),
            |((support, query), c)| {
                let labels: Vec<usize> = (0..support.len()).collect();
                let mut scores: Vec<f64> = support
                    .iter()
                    .map(|s| s.iter().zip(&query).map(|(a, b)| a * b).sum())
                    .collect();
                scores.sort_by(|a, b| b.total_cmp(a));
                // near-ties can legitimately flip under rounding
                prop_assume!(scores.len() < 2 || scores[0] - scores[1] > 1e-9);
                let before = *nn_predict(&support, &labels, &query).unwrap();
                let after = *nn_predict(&scaled(&support, c), &labels, &query).unwrap();
                ensure(before == after, format!("scale {c} moved the argmax"))
            },
        )
        .map_err(|e| e.to_string())
}

fn tie_break(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(support_strategy(), any::<u64>()),
            |((mut support, query), seed)| {
                prop_assume!(support.len() >= 2 && query.iter().any(|x| *x != 0.0));
                let p = permutation(support.len(), seed);
                let (i, j) = (p[0].min(p[1]), p[0].max(p[1]));
                // two identical supports strictly ahead of every other
                let winner: Vec<f64> = query.iter().map(|x| x * 100.0).collect();
                support[i] = winner.clone();
                support[j] = winner;
                let labels: Vec<usize> = (0..support.len()).collect();
                let first = *nn_predict(&support, &labels, &query).unwrap();
                ensure(first == i, format!("nn picked {first}, expected {i}"))?;
                ensure(
                    *nn_predict(&support, &labels, &query).unwrap() == first,
                    "nondeterministic",
                )?;
                // equal prototypes: the class seen first wins
                let mut twin = support.clone();
                twin.swap(0, i);
                twin.swap(1, j);
                let twin_labels: Vec<usize> = (0..twin.len()).collect();
                ensure(
                    *proto_predict(&twin[..2], &twin_labels[..2], &query).unwrap() == 0,
                    "proto tie",
                )
            },
        )
        .map_err(|e| e.to_string())
}

fn losses_nonnegative(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&(any::<u64>(), -3.0f64..3.0), |(seed, log_scale)| {
            let s = 10f64.powf(log_scale);
            let mut rng = seeded_rng(seed, 0);
            let sc = random_supcon_case(&mut rng);
            let nt = random_ntxent_case(&mut rng);
            let a = supcon_loss(&scaled(&sc.reps, s), &sc.labels, sc.tau)
                .unwrap()
                .value;
            let b = ntxent_loss(&scaled(&nt.originals, s), &scaled(&nt.views, s), nt.tau)
                .unwrap()
                .value;
            ensure(a.is_finite() && a >= 0.0, format!("supcon {a}"))?;
            ensure(b.is_finite() && b >= 0.0, format!("ntxent {b}"))
        })
        .map_err(|e| e.to_string())
}

fn adjoint(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&any::<u64>(), |seed| {
            let err = adjoint_trial_error(&mut seeded_rng(seed, 0));
            ensure(err <= ADJOINT_TOLERANCE, format!("relative error {err:e}"))
        })
        .map_err(|e| e.to_string())
}

fn token_strategy() -> impl Strategy<Value = (Vec<f64>, usize, Vec<TokenId>)> {
    (1usize..6, 2usize..6).prop_flat_map(|(buckets, dim)| {
        (
            prop::collection::vec(-2.0f64..2.0, buckets * dim),
            Just(dim),
            prop::collection::vec(0..buckets as TokenId, 1..12),
        )
    })
}

fn encoder_order_and_linearity(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(
            &(token_strategy(), any::<u64>()),
            |((table, dim, tokens), seed)| {
                let buckets = table.len() / dim;
                let params = EncoderParams::from_table(table.clone(), buckets, dim).unwrap();
                let rep = encode(&params, &tokens).unwrap();
                let mut shuffled = tokens.clone();
                shuffled.shuffle(&mut seeded_rng(seed, 0));
                let other = encode(&params, &shuffled).unwrap();
                for (a, b) in rep.iter().zip(&other) {
                    ensure(close(*a, *b, 1e-12), "order changed the representation")?;
                }
                let doubled = EncoderParams::from_table(
                    table.iter().map(|x| 2.0 * x).collect(),
                    buckets,
                    dim,
                )
                .unwrap();
                let twice = encode(&doubled, &tokens).unwrap();
                ensure(
                    twice.iter().zip(&rep).all(|(a, b)| *a == 2.0 * b),
                    "not linear in the table",
                )
            },
        )
        .map_err(|e| e.to_string())
}

fn eda_bounds(runner: &mut TestRunner) -> Result<(), String> {
    let params = (0usize..3, 0.0f64..=1.0, 0usize..3).prop_map(|(s, p, i)| EdaParams {
        swap_count: s,
        delete_prob: p,
        insert_count: i,
    });
    runner
        .run(
            &(prop::collection::vec(0u32..50, 1..20), params, any::<u64>()),
            |(tokens, params, seed)| {
                let view = eda_augment(&tokens, &params, &mut seeded_rng(seed, 0)).unwrap();
                ensure(!view.is_empty(), "empty view")?;
                ensure(view.len() <= tokens.len() + params.insert_count, "too long")?;
                ensure(view.iter().all(|t| tokens.contains(t)), "invented a token")
            },
        )
        .map_err(|e| e.to_string())
}

fn anneal_schedule(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&(1u64..10_000, 0.0f64..1.0), |(total, frac)| {
            let cfg = LossConfig::default();
            let step = ((total as f64) * frac) as u64;
            let a = anneal_alpha(step, total, &cfg).unwrap();
            let b = anneal_alpha((step + 1).min(total), total, &cfg).unwrap();
            ensure(a >= b, "not monotone")?;
            ensure((cfg.alpha_floor..=cfg.alpha0).contains(&a), "out of range")?;
            ensure(
                anneal_alpha(total, total, &cfg).unwrap() == cfg.alpha_floor,
                "floor",
            )
        })
        .map_err(|e| e.to_string())
}

pub fn battery() -> Vec<Invariant> {
    let gated = |name, cases, check| Invariant {
        name,
        cases,
        gated: true,
        check,
    };
    let extra = |name, cases, check| Invariant {
        name,
        cases,
        gated: false,
        check,
    };
    vec![
        gated("supcon_permutation", 200, supcon_permutation),
        gated("ntxent_permutation", 200, ntxent_permutation),
        gated("supcon_relabeling", 150, supcon_relabeling),
        gated("nn_scale_invariance", 200, nn_scale_invariance),
        gated("tie_break", 150, tie_break),
        gated("losses_nonnegative", 200, losses_nonnegative),
        gated("encoder_adjoint", 200, adjoint),
        extra(
            "encoder_order_and_linearity",
            200,
            encoder_order_and_linearity,
        ),
        extra("eda_bounds", 200, eda_bounds),
        extra("anneal_schedule", 200, anneal_schedule),
    ]
}
