//! Closed-form rates and measured-vs-theory reporting.
//!
//! Rates that are rational in (N, K, M) are computed exactly over
//! `Ratio<i128>`; entropy-weighted rates for messages of unequal size are
//! `f64`. [`report`] compares a finished retrieval's measured download rate
//! against the theoretical optimum.

use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::client::Transcript;

pub type Rational = Ratio<i128>;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid entropy profile: {0}")]
    InvalidProfile(String),
}

/// Optimal download rate for retrieving one of arbitrarily many linear
/// combinations of K datasets from N servers:
/// (1 + 1/N + ... + 1/N^(K-1))^-1.
pub fn pc_capacity(n: usize, k: usize) -> Rational {
    assert!(n >= 1 && k >= 1);
    let n = Rational::from_integer(n as i128);
    let mut sum = Rational::zero();
    let mut term = Rational::one();
    for _ in 0..k {
        sum += term;
        term /= n;
    }
    sum.recip()
}

/// Optimal download rate when the M combinations are themselves the stored
/// records (independent messages): (1 + 1/N + ... + 1/N^(M-1))^-1. Strictly
/// below [`pc_capacity`] whenever M > K, which is the gap the dependency-aware
/// download compression closes.
pub fn independent_messages_rate(n: usize, m: usize) -> Rational {
    pc_capacity(n, m)
}

/// Limit of [`pc_capacity`] as the number of datasets grows: 1 - 1/N.
pub fn asymptotic_capacity(n: usize) -> Rational {
    assert!(n >= 1);
    Rational::one() - Rational::new(1, n as i128)
}

/// Entropies (in any common unit) of a two-message ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyProfile {
    pub h1: f64,
    pub h2: f64,
    pub joint: f64,
}

/// Optimal rate for privately retrieving one of two dependent messages of
/// unequal size from N servers: N * H_small / (H_joint + (N-1) * H_large),
/// where the rate counts the smaller message's entropy per downloaded symbol.
pub fn two_message_capacity(n: usize, profile: EntropyProfile) -> Result<f64, AnalysisError> {
    if n < 1 {
        return Err(AnalysisError::InvalidArgument("need at least one server".into()));
    }
    let (large, small) = if profile.h1 >= profile.h2 {
        (profile.h1, profile.h2)
    } else {
        (profile.h2, profile.h1)
    };
    if small <= 0.0 || !small.is_finite() || !large.is_finite() || !profile.joint.is_finite() {
        return Err(AnalysisError::InvalidProfile(
            "entropies must be positive and finite".into(),
        ));
    }
    if profile.joint < large {
        return Err(AnalysisError::InvalidProfile(
            "joint entropy below a marginal".into(),
        ));
    }
    Ok(n as f64 * small / (profile.joint + (n as f64 - 1.0) * large))
}

/// Achievable rate for many messages of unequal entropy:
/// (H_min / H_max) * (1 - 1/N). Matches the asymptotic capacity when all
/// entropies are equal.
pub fn general_achievable_rate(n: usize, entropies: &[f64]) -> Result<f64, AnalysisError> {
    if n < 2 {
        return Err(AnalysisError::InvalidArgument("need at least two servers".into()));
    }
    if entropies.is_empty() {
        return Err(AnalysisError::InvalidProfile("no entropies given".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &h in entropies {
        if h <= 0.0 || !h.is_finite() {
            return Err(AnalysisError::InvalidProfile(
                "entropies must be positive and finite".into(),
            ));
        }
        min = min.min(h);
        max = max.max(h);
    }
    Ok(min / max * (1.0 - 1.0 / n as f64))
}

/// Measured rate of a retrieval against the closed forms.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub p: u64,
    pub l_total: u64,
    pub download_total: u64,
    /// Desired symbols per downloaded symbol, exact.
    pub measured_num: i128,
    pub measured_den: i128,
    pub capacity_num: i128,
    pub capacity_den: i128,
    /// Rate a dependency-blind retrieval of one of M messages would get.
    pub independent_num: i128,
    pub independent_den: i128,
    /// True when the measured rate equals the optimum exactly.
    pub optimal: bool,
    pub measured: f64,
    pub capacity: f64,
}

pub fn report(t: &Transcript) -> Result<RateReport, AnalysisError> {
    if t.download_total == 0 {
        return Err(AnalysisError::InvalidArgument("empty download".into()));
    }
    let measured = Rational::new(t.l_total as i128, t.download_total as i128);
    let capacity = pc_capacity(t.n, t.k);
    let independent = independent_messages_rate(t.n, t.m);
    Ok(RateReport {
        n: t.n,
        k: t.k,
        m: t.m,
        p: t.p,
        l_total: t.l_total,
        download_total: t.download_total,
        measured_num: *measured.numer(),
        measured_den: *measured.denom(),
        capacity_num: *capacity.numer(),
        capacity_den: *capacity.denom(),
        independent_num: *independent.numer(),
        independent_den: *independent.denom(),
        optimal: measured == capacity,
        measured: ratio_f64(measured),
        capacity: ratio_f64(capacity),
    })
}

fn ratio_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl RateReport {
    pub fn render_text(&self) -> String {
        format!(
            "servers N          : {}\n\
             datasets K         : {}\n\
             combinations M     : {}\n\
             store length L     : {}\n\
             downloaded symbols : {}\n\
             measured rate      : {}/{} ({:.6})\n\
             optimal rate       : {}/{} ({:.6})\n\
             no-compression rate: {}/{}\n\
             optimal            : {}\n",
            self.n,
            self.k,
            self.m,
            self.l_total,
            self.download_total,
            self.measured_num,
            self.measured_den,
            self.measured,
            self.capacity_num,
            self.capacity_den,
            self.capacity,
            self.independent_num,
            self.independent_den,
            if self.optimal { "yes" } else { "no" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::redundancy::download_count;

    #[test]
    fn capacity_closed_forms() {
        assert_eq!(pc_capacity(2, 2), Rational::new(2, 3));
        assert_eq!(pc_capacity(2, 4), Rational::new(8, 15));
        assert_eq!(pc_capacity(1, 3), Rational::new(1, 3));
        // Rearranged form: (N-1) N^(K-1) / (N^K - 1).
        for n in 2..=5i128 {
            for k in 1..=8u32 {
                let expect = Rational::new((n - 1) * n.pow(k - 1), n.pow(k) - 1);
                assert_eq!(pc_capacity(n as usize, k as usize), expect);
            }
        }
    }

    #[test]
    fn download_count_matches_the_capacity() {
        // Total download * capacity = useful symbols (N^M), for every
        // parameter choice: the scheme meets the optimum exactly.
        for n in 2..=5usize {
            for k in 1..=8usize {
                for m in k..=8usize {
                    let d = download_count(n, m, k) as i128;
                    let l = (n as i128).pow(m as u32);
                    assert_eq!(
                        Rational::new(l, d),
                        pc_capacity(n, k),
                        "N={n}, K={k}, M={m}"
                    );
                }
            }
        }
    }

    #[test]
    fn dependency_awareness_strictly_helps() {
        for n in 2..=4usize {
            for k in 1..=4usize {
                for m in k + 1..=k + 4 {
                    assert!(independent_messages_rate(n, m) < pc_capacity(n, k));
                }
            }
        }
        assert_eq!(independent_messages_rate(2, 4), Rational::new(8, 15));
    }

    #[test]
    fn asymptotics() {
        assert_eq!(asymptotic_capacity(2), Rational::new(1, 2));
        // Capacity decreases in K toward the limit.
        for n in 2..=4usize {
            let mut prev = pc_capacity(n, 1);
            for k in 2..=12 {
                let cur = pc_capacity(n, k);
                assert!(cur < prev);
                assert!(cur > asymptotic_capacity(n));
                prev = cur;
            }
        }
    }

    #[test]
    fn two_message_rates() {
        // Equal sizes recover the two-dataset capacity.
        let eq = EntropyProfile {
            h1: 1.0,
            h2: 1.0,
            joint: 2.0,
        };
        let got = two_message_capacity(2, eq).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
        // Marginal order must not matter.
        let a = EntropyProfile {
            h1: 3.0,
            h2: 1.0,
            joint: 3.5,
        };
        let b = EntropyProfile {
            h1: 1.0,
            h2: 3.0,
            joint: 3.5,
        };
        assert_eq!(
            two_message_capacity(3, a).unwrap(),
            two_message_capacity(3, b).unwrap()
        );
        // Joint below a marginal is impossible.
        let bad = EntropyProfile {
            h1: 2.0,
            h2: 1.0,
            joint: 1.5,
        };
        assert!(matches!(
            two_message_capacity(2, bad),
            Err(AnalysisError::InvalidProfile(_))
        ));
    }

    #[test]
    fn general_rate_bounds() {
        let equal = general_achievable_rate(2, &[1.0, 1.0, 1.0]).unwrap();
        assert!((equal - 0.5).abs() < 1e-12);
        let skew = general_achievable_rate(2, &[1.0, 4.0]).unwrap();
        assert!((skew - 0.125).abs() < 1e-12);
        assert!(general_achievable_rate(2, &[]).is_err());
        assert!(general_achievable_rate(2, &[0.0]).is_err());
    }

    #[test]
    fn report_flags_optimality() {
        let t = Transcript {
            n: 2,
            k: 2,
            m: 4,
            p: 65537,
            l_total: 16,
            rounds: 1,
            queries_sent_total: 30,
            download_total: 24,
            per_server_download: 12,
            uncompressed: false,
            transport: "in-process".into(),
        };
        let r = report(&t).unwrap();
        assert!(r.optimal);
        assert_eq!((r.measured_num, r.measured_den), (2, 3));
        let text = r.render_text();
        assert!(text.contains("optimal            : yes"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"optimal\":true"));
    }
}
