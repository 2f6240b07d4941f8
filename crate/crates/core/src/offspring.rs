//! Finitely supported offspring laws.
//!
//! An [`OffspringDist`] is validated once at construction and then carries
//! its derived constants: mean, smallest positive support point, mass at
//! zero, extinction probability and the trap-regime tag.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the total mass of a user-supplied pmf.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Default stopping tolerance for the extinction fixed-point iteration.
pub const EXTINCTION_TOL: f64 = 1e-12;
const EXTINCTION_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OffspringError {
    #[error("offspring pmf is empty")]
    Empty,
    #[error("negative or non-finite mass {mass} at k = {k}")]
    BadMass { k: u32, mass: f64 },
    #[error("pmf sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("fixed-point iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("extinction probability is zero; the extinction-conditioned law is undefined")]
    NoExtinction,
    #[error("law is not supercritical (mean {0})")]
    NotSupercritical(f64),
    #[error("no traps under this law: rho = 0")]
    NoTraps,
    #[error("truncation level k = {k} is below the minimal positive offspring count {m}")]
    TruncationBelowMin { k: u32, m: u32 },
    #[error("extinct-size generating function diverges at x = {x} (generation {generation} exceeded x_o = {x_o})")]
    SizeGfDiverges { x: f64, generation: usize, x_o: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, OffspringError>;

/// Which trap mechanism the law produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseTag {
    /// P(Z=1) > 0 and P(Z=0) = 0: degree-one pipes.
    Case1a,
    /// P(Z=0) > 0: pipes whose side branches are leaves.
    Case1b,
    /// P(Z >= 2) = 1: no pipes, only m-ary regions.
    Case2,
}

#[derive(Serialize, Deserialize)]
struct PmfJson {
    pmf: BTreeMap<u32, f64>,
}

/// A validated offspring law with its derived constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PmfJson", into = "PmfJson")]
pub struct OffspringDist {
    pmf: BTreeMap<u32, f64>,
    support: Vec<u32>,
    cdf: Vec<f64>,
    mean: f64,
    min_support: u32,
    p_zero: f64,
    q: f64,
    case: CaseTag,
}

impl TryFrom<PmfJson> for OffspringDist {
    type Error = OffspringError;
    fn try_from(value: PmfJson) -> Result<Self> {
        Self::new(value.pmf)
    }
}

impl From<OffspringDist> for PmfJson {
    fn from(d: OffspringDist) -> Self {
        PmfJson { pmf: d.pmf }
    }
}

impl OffspringDist {
    /// Validates `pmf` and computes every derived field.
    ///
    /// Entries are kept exactly as given (including explicit zeros) so the
    /// JSON form round-trips unchanged.
    pub fn new(pmf: BTreeMap<u32, f64>) -> Result<Self> {
        if pmf.is_empty() {
            return Err(OffspringError::Empty);
        }
        for (&k, &p) in &pmf {
            if !(p.is_finite() && p >= 0.0) {
                return Err(OffspringError::BadMass { k, mass: p });
            }
        }
        let total: f64 = pmf.values().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(OffspringError::NotNormalized(total));
        }
        let (support, masses): (Vec<u32>, Vec<f64>) = pmf
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .map(|(&k, &p)| (k, p))
            .unzip();
        let mut acc = 0.0;
        let cdf = masses
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        let mean = pmf.iter().map(|(&k, &p)| k as f64 * p).sum();
        let min_support = support.iter().copied().find(|&k| k > 0).unwrap_or(0);
        let p_zero = pmf.get(&0).copied().unwrap_or(0.0);
        let p_one = pmf.get(&1).copied().unwrap_or(0.0);
        let case = if p_zero > 0.0 {
            CaseTag::Case1b
        } else if p_one > 0.0 {
            CaseTag::Case1a
        } else {
            CaseTag::Case2
        };
        let mut dist = OffspringDist {
            pmf,
            support,
            cdf,
            mean,
            min_support,
            p_zero,
            q: 1.0,
            case,
        };
        dist.q = dist.extinction_prob(EXTINCTION_TOL)?;
        Ok(dist)
    }

    /// Builds a law from `(k, p_k)` pairs.
    pub fn from_pairs(pairs: &[(u32, f64)]) -> Result<Self> {
        let mut pmf = BTreeMap::new();
        for &(k, p) in pairs {
            *pmf.entry(k).or_insert(0.0) += p;
        }
        Self::new(pmf)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pmf maps always serialize")
    }

    pub fn pmf(&self) -> &BTreeMap<u32, f64> {
        &self.pmf
    }

    /// P(Z = k).
    pub fn p(&self, k: u32) -> f64 {
        self.pmf.get(&k).copied().unwrap_or(0.0)
    }

    /// Support points with positive mass, ascending.
    pub fn support(&self) -> &[u32] {
        &self.support
    }

    pub fn max_support(&self) -> u32 {
        *self
            .support
            .last()
            .expect("validated pmf has positive mass")
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Smallest k > 0 with positive mass (0 if the law is a point mass at 0).
    pub fn min_support(&self) -> u32 {
        self.min_support
    }

    pub fn p_zero(&self) -> f64 {
        self.p_zero
    }

    pub fn extinction_q(&self) -> f64 {
        self.q
    }

    pub fn case_tag(&self) -> CaseTag {
        self.case
    }

    pub fn is_supercritical(&self) -> bool {
        self.mean > 1.0
    }

    /// f(x) = sum p_k x^k.
    pub fn pgf(&self, x: f64) -> f64 {
        self.pmf.iter().map(|(&k, &p)| p * x.powi(k as i32)).sum()
    }

    /// f'(x).
    pub fn pgf_deriv(&self, x: f64) -> f64 {
        self.pmf
            .iter()
            .filter(|(&k, _)| k > 0)
            .map(|(&k, &p)| p * k as f64 * x.powi(k as i32 - 1))
            .sum()
    }

    /// Smallest fixed point of the pgf in [0, 1].
    ///
    /// Non-supercritical laws return 1 and laws without mass at zero return
    /// 0 without iterating; otherwise x <- f(x) is iterated from 0, which
    /// increases monotonically to the smallest root.
    pub fn extinction_prob(&self, tol: f64) -> Result<f64> {
        if !(tol > 0.0) {
            return Err(OffspringError::InvalidArgument(format!(
                "tol must be positive, got {tol}"
            )));
        }
        if self.mean <= 1.0 {
            return Ok(1.0);
        }
        if self.p_zero == 0.0 {
            return Ok(0.0);
        }
        let mut x = 0.0;
        for _ in 0..EXTINCTION_MAX_ITER {
            let next = self.pgf(x);
            if (next - x).abs() < tol {
                return Ok(next);
            }
            x = next;
        }
        Err(OffspringError::NoConvergence(EXTINCTION_MAX_ITER))
    }

    /// The law conditioned on extinction: p'_k = p_k q^(k-1).
    pub fn dual(&self) -> Result<Self> {
        if self.q == 0.0 {
            return Err(OffspringError::NoExtinction);
        }
        if self.q == 1.0 {
            return Ok(self.clone());
        }
        let q = self.q;
        let raw: BTreeMap<u32, f64> = self
            .pmf
            .iter()
            .map(|(&k, &p)| (k, p * q.powi(k as i32 - 1)))
            .collect();
        // The fixed-point tolerance leaves a residual of order 1e-12 in the total.
        let total: f64 = raw.values().sum();
        Self::new(raw.into_iter().map(|(k, p)| (k, p / total)).collect())
    }

    /// Draws one offspring count.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c <= u);
        self.support[i.min(self.support.len() - 1)]
    }

    /// Generating function of the total size of the first `n_gens`
    /// generations of a tree conditioned to die out.
    ///
    /// F_0(x) = x and F_n(x) = x h(F_{n-1}(x)) with h the pgf of the dual
    /// law. When the dual law has mass above 1, x/h(x) has a unique maximiser
    /// x_o on (1, inf); for x < x_o/h(x_o) every F_n(x) stays below x_o.
    pub fn extinct_size_gf(&self, x: f64, n_gens: usize) -> Result<SizeGf> {
        if !(x >= 0.0 && x.is_finite()) {
            return Err(OffspringError::InvalidArgument(format!(
                "x must be finite and >= 0, got {x}"
            )));
        }
        let dual = self.dual()?;
        let witness = dual.size_gf_witness();
        let x_o = witness.map_or(f64::INFINITY, |w| w.0);
        let certified = witness.is_some_and(|(_, bound)| x < bound);
        let mut f = x;
        for generation in 1..=n_gens {
            f = x * dual.pgf(f);
            if (!certified && f > x_o) || !f.is_finite() {
                return Err(OffspringError::SizeGfDiverges { x, generation, x_o });
            }
        }
        Ok(SizeGf {
            value: f,
            x_o: witness.map(|w| w.0),
            radius_bound: witness.map(|w| w.1),
            certified,
        })
    }

    /// (x_o, x_o / h(x_o)) for this law taken as h, if x/h(x) has an interior maximum.
    ///
    /// x/h(x) is maximal where h(x) = x h'(x); phi(x) = h(x) - x h'(x) is
    /// decreasing on x > 0, so the root is bracketed and bisected.
    fn size_gf_witness(&self) -> Option<(f64, f64)> {
        if self.max_support() < 2 {
            return None;
        }
        let phi = |x: f64| self.pgf(x) - x * self.pgf_deriv(x);
        let mut lo = 1.0;
        if phi(lo) <= 0.0 {
            return Some((1.0, 1.0 / self.pgf(1.0)));
        }
        let mut hi = 2.0;
        while phi(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x_o = lo;
        Some((x_o, x_o / self.pgf(x_o)))
    }

    /// Trap constants for truncation level `k`.
    pub fn trap_constants(&self, k: u32) -> Result<TrapConstants> {
        if !self.is_supercritical() {
            return Err(OffspringError::NotSupercritical(self.mean));
        }
        let m = self.min_support;
        if k < m {
            return Err(OffspringError::TruncationBelowMin { k, m });
        }
        let rho = match self.case {
            CaseTag::Case1a => self.p(1),
            CaseTag::Case1b => self.p(m) * m as f64 * self.p_zero.powi(m as i32 - 1),
            CaseTag::Case2 => 0.0,
        };
        if rho == 0.0 {
            return Err(OffspringError::NoTraps);
        }
        Ok(TrapConstants {
            rho,
            sigma: (1.0 / self.mean).ln() / rho.ln(),
            k,
            mu_tilde_k: self.truncated_mean(k),
        })
    }

    /// sum_{j=1}^{k} P(Z = j) j.
    pub fn truncated_mean(&self, k: u32) -> f64 {
        self.pmf.range(1..=k).map(|(&j, &p)| j as f64 * p).sum()
    }
}

/// Value of the extinct-size generating function with its radius certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeGf {
    pub value: f64,
    /// Maximiser of x/h(x), when it exists.
    pub x_o: Option<f64>,
    /// x_o / h(x_o): arguments below this keep every F_n under x_o.
    pub radius_bound: Option<f64>,
    /// Whether `x` lies below `radius_bound`.
    pub certified: bool,
}

/// Constants governing the depth of the deepest traps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapConstants {
    /// Probability that a vertex starts a trap of length one more than its child's.
    pub rho: f64,
    /// log(1/mu) / log(rho).
    pub sigma: f64,
    pub k: u32,
    /// sum_{j=1}^{k} P(Z = j) j.
    pub mu_tilde_k: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(pairs: &[(u32, f64)]) -> OffspringDist {
        OffspringDist::from_pairs(pairs).unwrap()
    }

    #[test]
    fn derived_fields() {
        let a = d(&[(1, 0.5), (2, 0.5)]);
        assert_eq!(
            (a.mean(), a.min_support(), a.case_tag()),
            (1.5, 1, CaseTag::Case1a)
        );
        let b = d(&[(0, 0.25), (2, 0.75)]);
        assert_eq!(
            (b.mean(), b.min_support(), b.case_tag()),
            (1.5, 2, CaseTag::Case1b)
        );
        let c = d(&[(2, 0.5), (3, 0.5)]);
        assert_eq!(
            (c.mean(), c.min_support(), c.case_tag()),
            (2.5, 2, CaseTag::Case2)
        );
    }

    #[test]
    fn rejects_bad_pmfs() {
        assert_eq!(
            OffspringDist::new(BTreeMap::new()),
            Err(OffspringError::Empty)
        );
        assert!(matches!(
            OffspringDist::from_pairs(&[(0, -0.1), (1, 1.1)]),
            Err(OffspringError::BadMass { .. })
        ));
        assert!(matches!(
            OffspringDist::from_pairs(&[(0, 0.5), (1, 0.4)]),
            Err(OffspringError::NotNormalized(_))
        ));
        assert!(OffspringDist::from_pairs(&[(0, 0.5), (1, 0.5 + 5e-10)]).is_ok());
    }

    #[test]
    fn pgf_values() {
        let b = d(&[(0, 0.25), (2, 0.75)]);
        assert_eq!(b.pgf(0.5), 0.4375);
        assert!((b.pgf(1.0) - 1.0).abs() < 1e-15);
        assert!((b.pgf(b.extinction_q()) - b.extinction_q()).abs() < 1e-10);
    }

    #[test]
    fn extinction_examples() {
        assert!((d(&[(0, 0.25), (2, 0.75)]).extinction_q() - 1.0 / 3.0).abs() < 1e-10);
        assert_eq!(d(&[(2, 0.5), (3, 0.5)]).extinction_q(), 0.0);
        assert_eq!(d(&[(0, 0.6), (2, 0.4)]).extinction_q(), 1.0);
        assert!(d(&[(0, 0.25), (2, 0.75)]).extinction_prob(0.0).is_err());
    }

    #[test]
    fn dual_examples() {
        let dual = d(&[(0, 0.25), (2, 0.75)]).dual().unwrap();
        assert!((dual.p(0) - 0.75).abs() < 1e-10);
        assert!((dual.p(2) - 0.25).abs() < 1e-10);
        assert!((dual.mean() - 0.5).abs() < 1e-10);
        let sub = d(&[(0, 0.6), (2, 0.4)]);
        assert_eq!(sub.dual().unwrap().pmf(), sub.pmf());
        assert_eq!(d(&[(2, 1.0)]).dual(), Err(OffspringError::NoExtinction));
    }

    #[test]
    fn size_gf_examples() {
        let b = d(&[(0, 0.25), (2, 0.75)]);
        for n in [0, 1, 5, 40] {
            assert!((b.extinct_size_gf(1.0, n).unwrap().value - 1.0).abs() < 1e-12);
        }
        assert_eq!(b.extinct_size_gf(1.05, 0).unwrap().value, 1.05);
        // Dual h(x) = 0.75 + 0.25 x^2: x_o = sqrt(3), bound = x_o / h(x_o) = 1/sqrt(3) * 2 = 1.1547.
        let r = b.extinct_size_gf(1.01, 2000).unwrap();
        let x_o = r.x_o.unwrap();
        assert!((x_o - 3f64.sqrt()).abs() < 1e-9);
        assert!((r.radius_bound.unwrap() - 2.0 / 3f64.sqrt()).abs() < 1e-9);
        assert!(r.certified && r.value <= x_o);
        let mut prev = 0.0;
        for n in 0..60 {
            let v = b.extinct_size_gf(1.01, n).unwrap().value;
            assert!(v >= prev);
            prev = v;
        }
        assert!(matches!(
            b.extinct_size_gf(1.5, 200),
            Err(OffspringError::SizeGfDiverges { .. })
        ));
    }

    #[test]
    fn trap_constant_examples() {
        let a = d(&[(1, 0.5), (2, 0.5)]);
        let t = a.trap_constants(2).unwrap();
        assert_eq!(t.rho, 0.5);
        assert!((t.sigma - (1.0f64 / 1.5).ln() / 0.5f64.ln()).abs() < 1e-15);
        assert!((t.sigma - 0.585).abs() < 1e-3);
        assert_eq!(a.trap_constants(1).unwrap().mu_tilde_k, 0.5);
        let b = d(&[(0, 0.25), (2, 0.75)]);
        assert!((b.trap_constants(2).unwrap().rho - 0.375).abs() < 1e-15);
        assert_eq!(
            d(&[(2, 0.5), (3, 0.5)]).trap_constants(3),
            Err(OffspringError::NoTraps)
        );
        assert!(matches!(
            b.trap_constants(1),
            Err(OffspringError::TruncationBelowMin { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"pmf":{"0":0.25,"2":0.75}}"#;
        let b = OffspringDist::from_json(text).unwrap();
        assert_eq!(b.to_json(), text);
        assert!(OffspringDist::from_json(r#"{"pmf":{"0":0.5}}"#).is_err());
    }
}
