//! Moments accountant for composed subsampled Gaussian mechanisms.
//!
//! Each DPSGD step is a Gaussian mechanism with noise multiplier `sigma`
//! applied to a batch drawn at sampling rate `q`. Its integer-order log
//! moments are computed exactly from the binomial expansion, composed by
//! addition across steps, and converted to an `(epsilon, delta)` guarantee
//! with `epsilon = min_order rdp(order) + ln(1/delta) / (order - 1)`.
//!
//! Epsilon values from this conversion are valid upper bounds; newer
//! conversions can give smaller numbers for the same ledger.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Amplification assumption for batches of size L drawn from N examples.
pub const SAMPLED_GAUSSIAN: &str = "sampled-Gaussian, q=L/N";
/// Tag for ledgers produced with independent noise on every example.
pub const PER_EXAMPLE_NOISE: &str = "per-example-noise (non-standard), q=L/N";

/// Smallest and largest moment orders tracked by default.
pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 256;

/// Integer orders 2..=256.
pub fn default_orders() -> Vec<f64> {
    (MIN_ORDER..=MAX_ORDER).map(f64::from).collect()
}

/// `steps` applications of the sampled Gaussian at `(q, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

impl LedgerEntry {
    pub fn new(q: f64, sigma: f64, steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Accountant(format!("sampling rate {q} outside [0, 1]")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Accountant(format!("noise multiplier {sigma} must be positive")));
        }
        Ok(Self { q, sigma, steps })
    }
}

/// Record of every private step taken, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
    pub assumption: String,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new(SAMPLED_GAUSSIAN)
    }
}

impl PrivacyLedger {
    pub fn new(assumption: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            assumption: assumption.into(),
        }
    }

    /// Ledger of `steps` identical steps.
    pub fn uniform(q: f64, sigma: f64, steps: u64) -> Result<Self> {
        let mut ledger = Self::default();
        ledger.record(LedgerEntry::new(q, sigma, steps)?);
        Ok(ledger)
    }

    /// Appends an entry, merging it into the last one when `(q, sigma)` match.
    pub fn record(&mut self, entry: LedgerEntry) {
        if entry.steps == 0 {
            return;
        }
        match self.entries.last_mut() {
            Some(last) if last.q == entry.q && last.sigma == entry.sigma => last.steps += entry.steps,
            _ => self.entries.push(entry),
        }
    }

    pub fn extend(&mut self, other: &PrivacyLedger) {
        for &e in &other.entries {
            self.record(e);
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_steps(&self) -> u64 {
        self.entries.iter().map(|e| e.steps).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Cumulative Rényi divergence bound per order.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
}

impl RdpCurve {
    pub fn zeros(orders: &[f64]) -> Self {
        Self {
            orders: orders.to_vec(),
            rdp: vec![0.0; orders.len()],
        }
    }

    /// Elementwise sum; both curves must share their orders.
    pub fn add(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::Accountant("curves have different orders".into()));
        }
        Ok(RdpCurve {
            orders: self.orders.clone(),
            rdp: self.rdp.iter().zip(&other.rdp).map(|(a, b)| a + b).collect(),
        })
    }
}

// ln(e^c - 1) for c > 0.
fn ln_expm1(c: f64) -> f64 {
    if c > 50.0 {
        c + (-(-c).exp()).ln_1p()
    } else {
        c.exp_m1().ln()
    }
}

// ln(1 + e^x)
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().fold(0.0, |acc, &t| acc + (t - m).exp()).ln()
}

fn integer_order(order: f64) -> Result<u64> {
    if !order.is_finite() || order.fract() != 0.0 || order < 2.0 {
        return Err(Error::Accountant(format!("order {order} must be an integer >= 2")));
    }
    Ok(order as u64)
}

/// Per-step Rényi divergence of order `order` for the sampled Gaussian
/// mechanism `(1-q) N(0, sigma^2) + q N(1, sigma^2)` against `N(0, sigma^2)`.
///
/// The moment `A = E_P[(Q/P)^order]` expands binomially into
/// `sum_j C(order, j) q^j (1-q)^(order-j) exp(j(j-1) / (2 sigma^2))`.
/// The `j = 0, 1` terms sum with the rest of the binomial weights to one, so
/// `A - 1` is a sum of positive terms `... * expm1(j(j-1)/(2 sigma^2))` over
/// `j >= 2`, evaluated with log-sum-exp. The result is `ln(A) / (order - 1)`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, order: f64) -> Result<f64> {
    let lambda = integer_order(order)?;
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(Error::Accountant(format!("sampling rate {q} outside [0, 1]")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Accountant(format!("noise multiplier {sigma} must be positive")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(order / (2.0 * sigma * sigma));
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut terms = Vec::with_capacity(lambda as usize);
    let mut ln_binom = 0.0;
    for j in 1..=lambda {
        // C(l, j) = C(l, j-1) * (l - j + 1) / j
        ln_binom += ((lambda - j + 1) as f64).ln() - (j as f64).ln();
        if j < 2 {
            continue;
        }
        let jf = j as f64;
        let exponent = jf * (jf - 1.0) * inv_two_var;
        terms.push(ln_binom + jf * ln_q + (lambda - j) as f64 * ln_1mq + ln_expm1(exponent));
    }
    let ln_a = softplus(log_sum_exp(&terms));
    Ok(ln_a / (order - 1.0))
}

/// Composes a ledger by summing per-step bounds, weighted by step counts.
pub fn compose(ledger: &PrivacyLedger, orders: &[f64]) -> Result<RdpCurve> {
    for &o in orders {
        integer_order(o)?;
    }
    let rdp = orders
        .par_iter()
        .map(|&order| {
            let mut total = 0.0;
            for e in ledger.entries() {
                total += e.steps as f64 * rdp_subsampled_gaussian(e.q, e.sigma, order)?;
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RdpCurve {
        orders: orders.to_vec(),
        rdp,
    })
}

/// `(epsilon, order)` minimizing `rdp + ln(1/delta)/(order - 1)`; ties go
/// to the smaller order. A curve that is identically zero describes a
/// mechanism that reveals nothing and yields `epsilon = 0`.
pub fn epsilon(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Accountant(format!("delta {delta} outside (0, 1)")));
    }
    if curve.orders.is_empty() || curve.orders.len() != curve.rdp.len() {
        return Err(Error::Accountant("empty RDP curve".into()));
    }
    if curve.rdp.iter().all(|&r| r == 0.0) {
        return Ok((0.0, curve.orders[0]));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&order, &rdp) in curve.orders.iter().zip(&curve.rdp) {
        let eps = rdp + log_inv_delta / (order - 1.0);
        if eps < best.0 {
            best = (eps, order);
        }
    }
    Ok(best)
}

/// Epsilon for a ledger on the default order grid.
pub fn ledger_epsilon(ledger: &PrivacyLedger, delta: f64) -> Result<(f64, f64)> {
    epsilon(&compose(ledger, &default_orders())?, delta)
}

/// Per-contributor epsilon when one person supplies up to `gamma` records.
pub fn group_rescale(epsilon: f64, gamma: u64) -> Result<f64> {
    if gamma < 1 {
        return Err(Error::Accountant("gamma must be at least 1".into()));
    }
    Ok(epsilon / gamma as f64)
}

pub const CALIBRATION_SIGMA_MIN: f64 = 1e-2;
pub const CALIBRATION_SIGMA_MAX: f64 = 1e3;
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;

/// Smallest noise multiplier (to within 1e-3) whose `T` steps at rate `q`
/// stay within `target_epsilon` at `delta`. Bisects on `[1e-2, 1e3]`.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(Error::Accountant("target epsilon must be positive".into()));
    }
    let orders = default_orders();
    let eps_at = |sigma: f64| -> Result<f64> {
        let ledger = PrivacyLedger::uniform(q, sigma, steps)?;
        Ok(epsilon(&compose(&ledger, &orders)?, delta)?.0)
    };
    let mut lo = CALIBRATION_SIGMA_MIN;
    let mut hi = CALIBRATION_SIGMA_MAX;
    if eps_at(hi)? > target_epsilon {
        return Err(Error::EpsilonUnreachable);
    }
    if eps_at(lo)? <= target_epsilon {
        return Ok(lo);
    }
    while hi - lo > CALIBRATION_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// One line of the epsilon report: `delta=.. epsilon=.. order=.. gamma=.. epsilon_group=..`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonReport {
    pub delta: f64,
    pub epsilon: f64,
    pub order: f64,
    pub gamma: u64,
    pub epsilon_group: f64,
}

impl EpsilonReport {
    pub fn for_ledger(ledger: &PrivacyLedger, delta: f64, gamma: u64) -> Result<Self> {
        let (eps, order) = ledger_epsilon(ledger, delta)?;
        Ok(Self {
            delta,
            epsilon: eps,
            order,
            gamma,
            epsilon_group: group_rescale(eps, gamma)?,
        })
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::format("epsilon report", line.to_string());
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        Ok(Self {
            delta: get("delta")?.parse().map_err(|_| bad())?,
            epsilon: get("epsilon")?.parse().map_err(|_| bad())?,
            order: get("order")?.parse().map_err(|_| bad())?,
            gamma: get("gamma")?.parse().map_err(|_| bad())?,
            epsilon_group: get("epsilon_group")?.parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for EpsilonReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "delta={} epsilon={} order={} gamma={} epsilon_group={}",
            self.delta, self.epsilon, self.order, self.gamma, self.epsilon_group
        )
    }
}
