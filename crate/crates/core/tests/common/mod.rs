//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the library's math. Each oracle is a separate
//! implementation of the same definition, written for accuracy rather
//! than speed.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use dplm::experiment::{synthetic, ExperimentConfig};

// ---------------------------------------------------------------------------
// double-double arithmetic

/// Unevaluated sum `hi + lo` carrying about 32 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    #[inline]
    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    #[inline]
    pub fn sub(self, y: Dd) -> Dd {
        self.add(y.neg())
    }

    #[inline]
    pub fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * y.lo + self.lo * y.hi));
        Dd { hi, lo }
    }

    /// Exact scaling by a power of two.
    pub fn scale(self, s: f64) -> Dd {
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self.sub(y.mul(Dd::from_f64(q1)));
        let q2 = r.hi / y.hi;
        let r = r.sub(y.mul(Dd::from_f64(q2)));
        let q3 = r.hi / y.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::from_f64(q3))
    }

    pub fn is_positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        // r = (x - k ln2) / 1024, |r| < 3.4e-4
        let r = self.sub(LN2.mul(Dd::from_f64(k))).scale(1.0 / 1024.0);
        // expm1(r) by Taylor series
        let mut term = r;
        let mut sum = r;
        for n in 2..=14 {
            term = term.mul(r).div(Dd::from_f64(n as f64));
            sum = sum.add(term);
        }
        // expm1(2r) = 2 expm1(r) + expm1(r)^2
        for _ in 0..10 {
            sum = sum.scale(2.0).add(sum.mul(sum));
        }
        Dd::ONE.add(sum).scale(2f64.powi(k as i32))
    }

    pub fn ln(self) -> Dd {
        // Newton on exp(y) = x
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y.add(self.mul(y.neg().exp())).sub(Dd::ONE);
        }
        y
    }
}

// ---------------------------------------------------------------------------
// finite-difference gradient oracle

/// Cross-entropy loss of the feedforward LM, evaluated in double-double.
///
/// Parameter order: embedding `[V][d]`, then per hidden layer a `[fan_in][fan_out]`
/// weight and a bias, then the output weight and bias.
pub fn dd_loss(theta: &[Dd], context: &[usize], target: usize, vocab: usize, dim: usize, hidden: &[usize]) -> Dd {
    let mut x: Vec<Dd> = Vec::with_capacity(context.len() * dim);
    for &id in context {
        x.extend_from_slice(&theta[id * dim..(id + 1) * dim]);
    }
    let mut offset = vocab * dim;
    let mut widths = hidden.to_vec();
    widths.push(vocab);
    for (l, &n) in widths.iter().enumerate() {
        let m = x.len();
        let w = &theta[offset..offset + m * n];
        let b = &theta[offset + m * n..offset + m * n + n];
        offset += m * n + n;
        let mut out: Vec<Dd> = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (o, v) in out.iter_mut().enumerate() {
                *v = v.add(xi.mul(w[i * n + o]));
            }
        }
        if l + 1 < widths.len() {
            for v in &mut out {
                if !v.is_positive() {
                    *v = Dd::ZERO;
                }
            }
        }
        x = out;
    }
    assert_eq!(offset, theta.len(), "parameter count mismatch");
    let m = x.iter().map(|z| z.hi).fold(f64::NEG_INFINITY, f64::max);
    let m = Dd::from_f64(m);
    let mut s = Dd::ZERO;
    for z in &x {
        s = s.add(z.sub(m).exp());
    }
    m.add(s.ln()).sub(x[target])
}

/// Central differences `(f(θ+h e_i) - f(θ-h e_i)) / 2h` with the loss in
/// double-double, so the estimate carries no cancellation error.
pub fn dd_central_differences(
    values: &[f64],
    context: &[usize],
    target: usize,
    vocab: usize,
    dim: usize,
    hidden: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut theta: Vec<Dd> = values.iter().map(|&v| Dd::from_f64(v)).collect();
    let hd = Dd::from_f64(h);
    let two_h = Dd::from_f64(2.0 * h);
    (0..values.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig.add(hd);
            let up = dd_loss(&theta, context, target, vocab, dim, hidden);
            theta[i] = orig.sub(hd);
            let down = dd_loss(&theta, context, target, vocab, dim, hidden);
            theta[i] = orig;
            up.sub(down).div(two_h).to_f64()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// adaptive Gauss-Kronrod quadrature

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7]
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = 0.0;
    let mut g = 0.0;
    for (j, (&x, &w)) in XGK.iter().zip(&WGK).enumerate() {
        let fx = if x == 0.0 { f(c) } else { f(c - h * x) + f(c + h * x) };
        k += w * fx;
        if j % 2 == 1 {
            g += WG[j / 2] * fx;
        }
    }
    Panel {
        a,
        b,
        value: k * h,
        err: ((k - g) * h).abs(),
    }
}

/// Adaptive G7/K15 integration of `f` over `[a, b]`, bisecting the panel
/// with the largest error estimate until the summed estimate is below
/// `rel_tol * |I| + abs_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, rel_tol: f64, abs_tol: f64) -> f64 {
    let mut heap = BinaryHeap::new();
    let w = (b - a) / panels as f64;
    for i in 0..panels {
        let lo = a + w * i as f64;
        let hi = if i + 1 == panels { b } else { lo + w };
        heap.push(gk15(&f, lo, hi));
    }
    for _ in 0..200_000 {
        let (value, err) = heap.iter().fold((0.0, 0.0), |(v, e), p| (v + p.value, e + p.err));
        if err <= rel_tol * value.abs() + abs_tol {
            break;
        }
        let worst = heap.pop().expect("nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        heap.push(gk15(&f, worst.a, mid));
        heap.push(gk15(&f, mid, worst.b));
    }
    let mut parts: Vec<f64> = heap.into_iter().map(|p| p.value).collect();
    parts.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    parts.iter().sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln E_{x~N(0,σ²)}[(1 - q + q exp((2x-1)/2σ²))^λ]` by quadrature, and the
/// Rényi divergence `ln A / (λ - 1)`.
pub fn quadrature_rdp(q: f64, sigma: f64, order: f64) -> f64 {
    let s2 = sigma * sigma;
    let norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_density = |x: f64| -x * x / (2.0 * s2) + norm;
    let u = |x: f64| (2.0 * x - 1.0) / (2.0 * s2);
    // mass sits near 0 (no-sample branch) and near λ (all-sample branch)
    let a = -20.0 * sigma - 1.0;
    let b = order + 20.0 * sigma + 1.0;

    // log form: shift by the peak of the integrand
    let log_f = |x: f64| log_density(x) + order * log_add_exp((1.0 - q).ln(), q.ln() + u(x));
    let peak = (0..=20_000)
        .map(|i| log_f(a + (b - a) * i as f64 / 20_000.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled = integrate(|x| (log_f(x) - peak).exp(), a, b, 400, 1e-13, 0.0);
    let log_a = peak + scaled.ln();

    if log_a > 1.0 {
        return log_a / (order - 1.0);
    }
    // near A = 1 integrate A - 1 directly
    let g = |x: f64| log_density(x).exp() * (order * (q * u(x).exp_m1()).ln_1p()).exp_m1();
    let mass = integrate(|x| g(x).abs(), a, b, 400, 1e-10, 0.0);
    let a_minus_1 = integrate(g, a, b, 400, 1e-11, 1e-17 * mass);
    a_minus_1.ln_1p() / (order - 1.0)
}

/// `min_λ λ/(2σ²) + ln(1/δ)/(λ-1)` over the integer orders 2..=256: the
/// unsubsampled Gaussian mechanism applied once.
pub fn gaussian_epsilon(sigma: f64, delta: f64) -> f64 {
    let mut best = f64::INFINITY;
    for lambda in 2..=256u32 {
        let l = lambda as f64;
        let eps = l / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (l - 1.0);
        if eps < best {
            best = eps;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// fixtures

/// Desk-scale run of the training schema on a synthetic corpus pair.
pub fn desk_config(seed: u64, dir: &Path) -> ExperimentConfig {
    let (public, private) = synthetic::corpus_pair(&synthetic::SyntheticSpec {
        seed,
        ..Default::default()
    });
    std::fs::create_dir_all(dir).unwrap();
    dplm::corpus::write_corpus(dir.join("public.txt"), &public).unwrap();
    dplm::corpus::write_corpus(dir.join("private.txt"), &private).unwrap();

    let mut c = ExperimentConfig::for_preset("small").unwrap();
    c.public_corpus = dir.join("public.txt");
    c.private_corpus = dir.join("private.txt");
    c.output_dir = dir.join("out");
    c.preset = "custom".into();
    c.hidden = vec![64, 32, 16];
    c.embedding_dim = 16;
    c.seed = seed;
    c.split_seed = seed;
    for t in [&mut c.pretrain, &mut c.finetune, &mut c.private] {
        t.batch_size = 32;
        t.epochs = 5;
        t.seed += seed * 10;
    }
    c.private.learning_rate = 0.5;
    c.privacy.sigma = 0.1;
    c.privacy.clip_norm = 1.0;
    c.privacy.delta = 1e-5;
    c.dp_scratch = true;
    c.eval_interval = 100;
    c
}
