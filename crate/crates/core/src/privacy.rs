//! Executable audits that a server's view is independent of the desired
//! index.
//!
//! The private permutation π and signs σ act on wire views; two views leak
//! nothing relative to each other iff they lie in the same orbit of that
//! action. [`canonicalize`] computes the orbit representative (positions
//! relabeled by first appearance, each position's first sign normalized to
//! plus), giving three complementary checks:
//!
//! - [`structural_audit`]: canonical views coincide across all desired
//!   indices, for every server — exhaustive over the plan, per configuration.
//! - [`enumeration_audit`]: for tiny parameters, enumerate *all* (π, σ)
//!   choices and compare the full view multisets across desired indices.
//! - [`sampled_audit`]: statistical comparison of sampled wire digests, with
//!   a deliberately leaky build ([`Mutation::LeakSign`]) as the negative
//!   control that the test must reject.
//!
//! [`reference_witnesses`] carries the explicit two-server, four-message
//! relabeling maps between desired indices, verified term-for-term.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::cached_plan;
use crate::planner::{Mutation, PlanError, Randomizer, WireQuery};
use crate::server::ServerError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("view mismatch at server {server} between desired indices {a} and {b}")]
    ViewMismatch { server: usize, a: usize, b: usize },
    #[error("enumeration requires {required} views, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u64 },
    #[error("witness mismatch: {0}")]
    WitnessMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuditOutcome {
    Pass,
    Reject { statistic: f64, threshold: f64, detail: String },
    Inconclusive,
}

pub const DEFAULT_ENUMERATION_BUDGET: u64 = 10_000;

/// Orbit representative of a wire view under the (π, σ) action: positions
/// relabeled in order of first appearance, signs rescaled so each position's
/// first occurrence is positive. Message indices and ordering are untouched.
pub fn canonicalize(queries: &[WireQuery]) -> Vec<WireQuery> {
    let mut seen: HashMap<u64, (u64, i8)> = HashMap::new();
    let mut next = 1u64;
    queries
        .iter()
        .map(|q| WireQuery {
            terms: q
                .terms
                .iter()
                .map(|&(msg, pos, sign)| {
                    let (label, first) = *seen.entry(pos).or_insert_with(|| {
                        let e = (next, sign);
                        next += 1;
                        e
                    });
                    (msg, label, sign * first)
                })
                .collect(),
        })
        .collect()
}

/// Checks that every server's canonical view is identical for every desired
/// index — the exact statement that the view carries no information about it.
pub fn structural_audit(n: usize, m: usize, p: u64) -> Result<(), PrivacyError> {
    if n < 2 {
        // A single server sees the whole (fixed) download either way.
        return Ok(());
    }
    let reference = canonical_views(1, n, m, p)?;
    for theta in 2..=m {
        let views = canonical_views(theta, n, m, p)?;
        for server in 1..=n {
            if views[server - 1] != reference[server - 1] {
                return Err(PrivacyError::ViewMismatch {
                    server,
                    a: 1,
                    b: theta,
                });
            }
        }
    }
    Ok(())
}

fn canonical_views(
    theta: usize,
    n: usize,
    m: usize,
    p: u64,
) -> Result<Vec<Vec<WireQuery>>, PrivacyError> {
    let plan = cached_plan(theta, n, m, p)?;
    let wire = plan.to_wire(&Randomizer::identity(plan.l), Mutation::None);
    Ok(wire.iter().map(|qs| canonicalize(qs)).collect())
}

fn permutations(l: u64) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    let mut items: Vec<u64> = (1..=l).collect();
    heap_permute(&mut items, l as usize, &mut out);
    out
}

fn heap_permute(items: &mut Vec<u64>, k: usize, out: &mut Vec<Vec<u64>>) {
    if k <= 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Exhaustive check for tiny parameters: over *every* choice of (π, σ), the
/// multiset of wire views each server can receive is identical for all
/// desired indices. The required view count must fit in `budget`.
pub fn enumeration_audit(n: usize, m: usize, p: u64, budget: u64) -> Result<(), PrivacyError> {
    if n < 2 {
        return Ok(());
    }
    let l = (n as u64).pow(m as u32);
    let sigma_count: u128 = if p == 2 { 1 } else { 1u128 << l };
    let factorial: u128 = (1..=l as u128).product();
    let required = factorial.saturating_mul(sigma_count);
    if required > budget as u128 {
        return Err(PrivacyError::BudgetExceeded { required, budget });
    }
    let perms = permutations(l);
    let sigmas: Vec<Vec<i8>> = if p == 2 {
        vec![vec![1; l as usize]]
    } else {
        (0..1u64 << l)
            .map(|bits| {
                (0..l)
                    .map(|i| if bits >> i & 1 == 1 { -1 } else { 1 })
                    .collect()
            })
            .collect()
    };
    // Multiset of views per server, per desired index.
    let mut reference: Option<Vec<HashMap<Vec<WireQuery>, u64>>> = None;
    for theta in 1..=m {
        let plan = cached_plan(theta, n, m, p)?;
        let mut multisets: Vec<HashMap<Vec<WireQuery>, u64>> = vec![HashMap::new(); n];
        for pi in &perms {
            for sigma in &sigmas {
                let randomizer = Randomizer {
                    pi: pi.clone(),
                    sigma: sigma.clone(),
                };
                let wire = plan.to_wire(&randomizer, Mutation::None);
                for (s, view) in wire.into_iter().enumerate() {
                    *multisets[s].entry(view).or_insert(0) += 1;
                }
            }
        }
        match &reference {
            None => reference = Some(multisets),
            Some(reference) => {
                for server in 1..=n {
                    if multisets[server - 1] != reference[server - 1] {
                        return Err(PrivacyError::ViewMismatch {
                            server,
                            a: 1,
                            b: theta,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Digest of a wire view for the statistical audit: the sign bits of the
/// first six terms at server 1. Structured (not hashed) so that a sign leak
/// shows up as a collapsed bucket, not as noise.
fn sign_digest(view: &[WireQuery]) -> usize {
    let mut bucket = 0usize;
    let mut taken = 0;
    'outer: for q in view {
        for &(_, _, sign) in &q.terms {
            if sign < 0 {
                bucket |= 1 << taken;
            }
            taken += 1;
            if taken == 6 {
                break 'outer;
            }
        }
    }
    bucket
}

/// Two-sample statistical comparison of wire digests between two desired
/// indices, over freshly sampled randomizers. Honest builds must pass; the
/// sign-leaking mutant must be rejected at a five-sigma threshold.
pub fn sampled_audit(
    n: usize,
    m: usize,
    p: u64,
    theta_a: usize,
    theta_b: usize,
    samples: u64,
    mutation: Mutation,
    seed: u64,
) -> Result<AuditOutcome, PrivacyError> {
    if samples == 0 {
        return Ok(AuditOutcome::Inconclusive);
    }
    if theta_a == 0 || theta_a > m || theta_b == 0 || theta_b > m {
        return Err(PrivacyError::InvalidArgument("desired index out of range".into()));
    }
    let counts_for = |theta: usize, stream: u64| -> Result<Vec<u64>, PrivacyError> {
        let plan = cached_plan(theta, n, m, p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
        let mut counts = vec![0u64; 64];
        for _ in 0..samples {
            let randomizer = Randomizer::sample(rng.random(), plan.l, p);
            let wire = plan.to_wire(&randomizer, mutation);
            counts[sign_digest(&wire[0])] += 1;
        }
        Ok(counts)
    };
    let a = counts_for(theta_a, 0x5eed_0001)?;
    let b = counts_for(theta_b, 0x5eed_0002)?;

    // Per-bucket total-variation guard.
    let na = samples as f64;
    let nb = samples as f64;
    let tv_limit = 3.0 / na.sqrt();
    for (i, (&ca, &cb)) in a.iter().zip(b.iter()).enumerate() {
        let diff = (ca as f64 / na - cb as f64 / nb).abs();
        if diff > tv_limit {
            return Ok(AuditOutcome::Reject {
                statistic: diff,
                threshold: tv_limit,
                detail: format!("bucket {i} frequency differs by {diff:.4}"),
            });
        }
    }

    // Two-sample chi-square over occupied buckets.
    let occupied: Vec<usize> = (0..64).filter(|&i| a[i] + b[i] > 0).collect();
    if occupied.len() <= 1 {
        return Ok(AuditOutcome::Pass);
    }
    let k1 = (nb / na).sqrt();
    let k2 = (na / nb).sqrt();
    let stat: f64 = occupied
        .iter()
        .map(|&i| {
            let d = k1 * a[i] as f64 - k2 * b[i] as f64;
            d * d / (a[i] + b[i]) as f64
        })
        .sum();
    let df = (occupied.len() - 1) as f64;
    let threshold = df + 5.0 * (2.0 * df).sqrt();
    if stat > threshold {
        return Ok(AuditOutcome::Reject {
            statistic: stat,
            threshold,
            detail: format!("chi-square over {} buckets", occupied.len()),
        });
    }
    Ok(AuditOutcome::Pass)
}

/// Checks that a server's answers are a deterministic function of the
/// request bytes alone: byte-identical sessions against independently
/// constructed engines produce byte-identical responses.
pub fn answer_obliviousness_audit(
    raw_matrix: &crate::gf::Matrix,
    store: &crate::model::DatasetStore,
    n: usize,
    ctx: crate::gf::FieldContext,
) -> Result<(), PrivacyError> {
    use crate::server::ServerEngine;
    use crate::wire::{request_to_bytes, Request};
    let engine_a = ServerEngine::new(raw_matrix, store, n, ctx)?;
    let engine_b = ServerEngine::new(raw_matrix, store, n, ctx)?;
    let m = {
        // Message count after normalization equals the raw row count.
        raw_matrix.rows()
    };
    let k = raw_matrix.cols();
    for theta in 1..=m {
        let plan = cached_plan(theta, n, m, ctx.modulus())?;
        let wire = plan.to_wire(&Randomizer::sample(theta as u64, plan.l, ctx.modulus()), Mutation::None);
        for server in 1..=n {
            let req = Request {
                p_low: ctx.modulus() as u32,
                n: n as u16,
                k: k as u16,
                m: m as u16,
                l: store.symbols_per_message(),
                queries: wire[server - 1].clone(),
            };
            let bytes = request_to_bytes(&req);
            let replay = crate::wire::request_from_bytes(&bytes)?;
            let ra = engine_a.answer(&replay)?;
            let rb = engine_b.answer(&replay)?;
            let ra2 = engine_a.answer(&replay)?;
            if ra != rb || ra != ra2 {
                return Err(PrivacyError::WitnessMismatch(format!(
                    "answers diverge for server {server}"
                )));
            }
        }
    }
    Ok(())
}

/// An explicit relabeling (π with sign flips τ) carrying one desired index's
/// wire view onto another's, term for term.
#[derive(Debug, Clone)]
pub struct RelabelWitness {
    pub theta_from: usize,
    pub theta_to: usize,
    pub server: usize,
    /// Position map entries (from, to); positions absent here map to
    /// themselves.
    pub map: Vec<(u64, u64)>,
    /// Positions whose private sign flips.
    pub flips: Vec<u64>,
}

/// The two-server, four-message witnesses mapping each desired index's view
/// onto the view for index 1.
pub fn reference_witnesses() -> Vec<RelabelWitness> {
    let w = |theta: usize, server: usize, map: &[(u64, u64)], flips: &[u64]| RelabelWitness {
        theta_from: theta,
        theta_to: 1,
        server,
        map: map.to_vec(),
        flips: flips.to_vec(),
    };
    vec![
        w(
            2,
            1,
            &[(3, 2), (2, 3), (7, 9), (9, 7), (10, 8), (8, 10), (15, 14), (14, 15)],
            &[6, 12, 13],
        ),
        w(
            2,
            2,
            &[(6, 1), (1, 6), (12, 4), (4, 12), (13, 5), (5, 13), (16, 11), (11, 16)],
            &[3, 9, 10],
        ),
        w(
            3,
            1,
            &[
                (3, 2),
                (4, 3),
                (2, 4),
                (7, 9),
                (6, 7),
                (9, 6),
                (10, 8),
                (11, 10),
                (8, 11),
                (14, 15),
                (13, 14),
                (15, 13),
            ],
            &[8, 12],
        ),
        w(
            3,
            2,
            &[
                (7, 6),
                (6, 1),
                (1, 7),
                (4, 12),
                (3, 4),
                (12, 3),
                (14, 13),
                (13, 5),
                (5, 14),
                (11, 16),
                (10, 11),
                (16, 10),
            ],
            &[5, 9],
        ),
        w(
            4,
            1,
            &[
                (3, 2),
                (4, 3),
                (5, 4),
                (2, 5),
                (6, 8),
                (7, 10),
                (8, 11),
                (9, 6),
                (10, 7),
                (11, 9),
                (14, 15),
                (13, 14),
                (12, 13),
                (15, 12),
            ],
            &[],
        ),
        w(
            4,
            2,
            &[
                (6, 1),
                (7, 6),
                (8, 7),
                (1, 8),
                (3, 5),
                (4, 13),
                (5, 14),
                (12, 3),
                (13, 4),
                (14, 12),
                (11, 16),
                (10, 11),
                (9, 10),
                (16, 9),
            ],
            &[],
        ),
    ]
}

/// Verifies a witness against the actual plans: applying (π, τ) to the
/// source view must reproduce the target view exactly.
pub fn verify_witness(witness: &RelabelWitness, p: u64) -> Result<(), PrivacyError> {
    let n = 2;
    let m = 4;
    let map: HashMap<u64, u64> = witness.map.iter().copied().collect();
    let plan_from = cached_plan(witness.theta_from, n, m, p)?;
    let plan_to = cached_plan(witness.theta_to, n, m, p)?;
    let from = plan_from.to_wire(&Randomizer::identity(plan_from.l), Mutation::None);
    let to = plan_to.to_wire(&Randomizer::identity(plan_to.l), Mutation::None);
    let mapped: Vec<WireQuery> = from[witness.server - 1]
        .iter()
        .map(|q| WireQuery {
            terms: q
                .terms
                .iter()
                .map(|&(msg, pos, sign)| {
                    let new_pos = *map.get(&pos).unwrap_or(&pos);
                    let flip = if witness.flips.contains(&pos) { -1 } else { 1 };
                    (msg, new_pos, sign * flip)
                })
                .collect(),
        })
        .collect();
    if mapped != to[witness.server - 1] {
        return Err(PrivacyError::WitnessMismatch(format!(
            "server {} map from index {} to {} fails",
            witness.server, witness.theta_from, witness.theta_to
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonicalize_relabels_and_normalizes() {
        let view = vec![
            WireQuery {
                terms: vec![(1, 9, -1)],
            },
            WireQuery {
                terms: vec![(1, 4, 1), (2, 9, 1)],
            },
        ];
        let canon = canonicalize(&view);
        assert_eq!(
            canon,
            vec![
                WireQuery {
                    terms: vec![(1, 1, 1)]
                },
                WireQuery {
                    terms: vec![(1, 2, 1), (2, 1, -1)]
                },
            ]
        );
    }

    #[test]
    fn structural_audit_passes_small_grid() {
        for (n, m) in [(2usize, 4usize), (2, 2), (3, 3), (4, 2), (2, 1)] {
            structural_audit(n, m, 65537).unwrap();
            structural_audit(n, m, 2).unwrap();
        }
    }

    #[test]
    fn enumeration_audit_covers_the_tiny_case() {
        enumeration_audit(2, 2, 65537, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert!(matches!(
            enumeration_audit(2, 3, 65537, DEFAULT_ENUMERATION_BUDGET),
            Err(PrivacyError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn reference_witnesses_verify() {
        for w in reference_witnesses() {
            verify_witness(&w, 65537).unwrap();
        }
    }

    #[test]
    fn sampled_audit_accepts_honest_and_rejects_leak() {
        let honest = sampled_audit(2, 4, 65537, 1, 3, 2000, Mutation::None, 7).unwrap();
        assert_eq!(honest, AuditOutcome::Pass);
        let leaky = sampled_audit(2, 4, 65537, 1, 3, 2000, Mutation::LeakSign, 7).unwrap();
        assert!(matches!(leaky, AuditOutcome::Reject { .. }), "{leaky:?}");
        assert_eq!(
            sampled_audit(2, 4, 65537, 1, 2, 0, Mutation::None, 7).unwrap(),
            AuditOutcome::Inconclusive
        );
    }

    #[test]
    fn answers_are_oblivious() {
        use crate::gf::{FieldContext, Matrix};
        use crate::model::generate_datasets;
        let ctx = FieldContext::new(65537).unwrap();
        let raw = Matrix::from_rows(&[
            vec![1, 0],
            vec![0, 1],
            vec![3, 5],
            vec![7, 11],
        ])
        .unwrap();
        let store = generate_datasets(5, 2, 16, &ctx).unwrap();
        answer_obliviousness_audit(&raw, &store, 2, ctx).unwrap();
    }

    proptest! {
        // Canonicalization is a true quotient: any private (π, σ) draw leaves
        // the canonical view untouched.
        #[test]
        fn canonical_view_is_randomizer_invariant(seed in 0u64..500, theta in 1usize..5) {
            let plan = cached_plan(theta, 2, 4, 65537).unwrap();
            let identity = plan.to_wire(&Randomizer::identity(plan.l), Mutation::None);
            let randomized =
                plan.to_wire(&Randomizer::sample(seed, plan.l, 65537), Mutation::None);
            for s in 0..2 {
                prop_assert_eq!(canonicalize(&randomized[s]), canonicalize(&identity[s]));
            }
        }
    }
}
