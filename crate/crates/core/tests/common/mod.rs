//! Reference implementations shared by the integration tests. Nothing here
//! calls into the numeric paths it is used to check.

#![allow(dead_code)]

use num_bigint::{BigInt, Sign};
use num_traits::{One, Signed, ToPrimitive, Zero};

use dpft_core::grad::{batch_loss, materialized_per_example_grads, Batch};
use dpft_core::LinearHead;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fractional bits of [`Fixed`]. Enough headroom for `q^64` at `q = 1e-4`.
const FRAC: u64 = 1152;

/// Signed binary fixed point with [`FRAC`] fractional bits and an unbounded
/// integer part.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fixed(BigInt);

impl Fixed {
    pub fn zero() -> Self {
        Fixed(BigInt::zero())
    }

    pub fn one() -> Self {
        Fixed(BigInt::one() << FRAC)
    }

    pub fn from_int(v: impl Into<BigInt>) -> Self {
        Fixed(v.into() << FRAC)
    }

    /// Exact conversion of a finite double.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite());
        if x == 0.0 {
            return Self::zero();
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), exp - 1075)
        };
        let m = BigInt::from(mant) * sign;
        let shift = e + FRAC as i64;
        if shift >= 0 {
            Fixed(m << shift as u64)
        } else {
            Fixed(m >> (-shift) as u64)
        }
    }

    pub fn to_f64(&self) -> f64 {
        let v = &self.0;
        if v.is_zero() {
            return 0.0;
        }
        let neg = v.sign() == Sign::Minus;
        let a = v.abs();
        let bits = a.bits();
        let (top, shift) = if bits > 64 {
            ((&a >> (bits - 64)).to_u64().unwrap(), bits as i64 - 64)
        } else {
            (a.to_u64().unwrap(), 0)
        };
        let r = top as f64 * 2f64.powi((shift - FRAC as i64) as i32);
        if neg {
            -r
        } else {
            r
        }
    }

    pub fn add(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 + &o.0)
    }

    pub fn sub(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 - &o.0)
    }

    pub fn mul(&self, o: &Fixed) -> Fixed {
        Fixed((&self.0 * &o.0) >> FRAC)
    }

    pub fn mul_int(&self, k: &BigInt) -> Fixed {
        Fixed(&self.0 * k)
    }

    pub fn div(&self, o: &Fixed) -> Fixed {
        Fixed((&self.0 << FRAC) / &o.0)
    }

    pub fn div_int(&self, k: i64) -> Fixed {
        Fixed(&self.0 / k)
    }

    fn shr(&self, s: u64) -> Fixed {
        Fixed(&self.0 >> s)
    }

    pub fn is_negative(&self) -> bool {
        self.0.sign() == Sign::Minus
    }

    /// `e^x` by halving, Taylor series, and repeated squaring.
    pub fn exp(&self) -> Fixed {
        if self.is_negative() {
            return Fixed::one().div(&Fixed(-self.0.clone()).exp());
        }
        // Halve until the argument is below 2^-12.
        let int_bits = (self.0.bits() as i64 - FRAC as i64).max(0) as u64;
        let s = int_bits + 12;
        let y = self.shr(s);
        let mut sum = Fixed::one();
        let mut term = Fixed::one();
        let mut k = 1i64;
        loop {
            term = term.mul(&y).div_int(k);
            if term.0.is_zero() {
                break;
            }
            sum = sum.add(&term);
            k += 1;
        }
        for _ in 0..s {
            sum = sum.mul(&sum);
        }
        sum
    }

    /// Natural log of a positive value via `2·atanh((m-1)/(m+1))`.
    pub fn ln(&self) -> Fixed {
        assert!(self.0.sign() == Sign::Plus, "ln of non-positive value");
        // self = m · 2^e with m in [1, 2).
        let e = self.0.bits() as i64 - 1 - FRAC as i64;
        let m = if e >= 0 {
            Fixed(&self.0 >> e as u64)
        } else {
            Fixed(&self.0 << (-e) as u64)
        };
        let ln_m = atanh_series(&m.sub(&Fixed::one()).div(&m.add(&Fixed::one())));
        let ln2 = atanh_series(&Fixed::one().div(&Fixed::from_int(3)));
        ln_m.add(&ln2.mul_int(&BigInt::from(e)))
    }
}

/// `2·atanh(y) = 2·Σ y^(2i+1)/(2i+1)`.
fn atanh_series(y: &Fixed) -> Fixed {
    let y2 = y.mul(y);
    let mut power = y.clone();
    let mut sum = Fixed::zero();
    let mut i = 0i64;
    loop {
        let term = power.div_int(2 * i + 1);
        if term.0.is_zero() {
            break;
        }
        sum = sum.add(&term);
        power = power.mul(&y2);
        i += 1;
    }
    sum.add(&sum)
}

fn binomial_row(n: u32) -> Vec<BigInt> {
    let mut row = vec![BigInt::one()];
    for k in 1..=n {
        let prev = row[(k - 1) as usize].clone();
        row.push(prev * BigInt::from(n - k + 1) / BigInt::from(k));
    }
    row
}

/// Subsampled-Gaussian RDP at integer `alpha` by direct summation of
/// `Σ C(α,k)(1-q)^(α-k) q^k exp(k(k-1)/(2σ²))` in fixed point.
pub struct RdpOracle {
    q: Fixed,
    one_minus_q: Fixed,
    exp_terms: Vec<Fixed>,
}

impl RdpOracle {
    pub fn new(q: f64, sigma: f64, max_alpha: u32) -> Self {
        let qf = Fixed::from_f64(q);
        let s = Fixed::from_f64(sigma);
        let two_var = s.mul(&s).add(&s.mul(&s));
        let exp_terms = (0..=max_alpha)
            .map(|k| {
                let kk = BigInt::from(k) * BigInt::from(k.saturating_sub(1));
                Fixed::from_int(kk).div(&two_var).exp()
            })
            .collect();
        RdpOracle {
            one_minus_q: Fixed::one().sub(&qf),
            q: qf,
            exp_terms,
        }
    }

    pub fn rdp(&self, alpha: u32) -> f64 {
        let binom = binomial_row(alpha);
        let mut q_pow = vec![Fixed::one()];
        let mut r_pow = vec![Fixed::one()];
        for _ in 0..alpha {
            q_pow.push(q_pow.last().unwrap().mul(&self.q));
            r_pow.push(r_pow.last().unwrap().mul(&self.one_minus_q));
        }
        let mut sum = Fixed::zero();
        for k in 0..=alpha as usize {
            let term = q_pow[k]
                .mul(&r_pow[alpha as usize - k])
                .mul(&self.exp_terms[k])
                .mul_int(&binom[k]);
            sum = sum.add(&term);
        }
        sum.ln().to_f64() / f64::from(alpha - 1)
    }
}

/// `(ε, α*)` over integer orders for the plain Gaussian mechanism with
/// `steps` compositions, scanning every order in `orders`.
pub fn gaussian_eps_scan(sigma: f64, steps: u64, delta: f64, orders: &[u32]) -> (f64, u32) {
    let mut best = (f64::INFINITY, 0);
    for &a in orders {
        let af = f64::from(a);
        let eps = steps as f64 * af / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (af - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    best
}

/// Continuous-order Gaussian-mechanism epsilon: `min_{α>1} α/(2σ²) + ln(1/δ)/(α-1)`,
/// minimised in closed form at `α = 1 + σ·sqrt(2 ln(1/δ))`.
pub fn gaussian_eps_continuous(sigma: f64, delta: f64) -> f64 {
    let l = (1.0 / delta).ln();
    let a = 1.0 + sigma * (2.0 * l).sqrt();
    a / (2.0 * sigma * sigma) + l / (a - 1.0)
}

/// Bisection for the `σ` at which [`gaussian_eps_continuous`] hits `eps`.
pub fn gaussian_sigma_continuous(eps: f64, delta: f64) -> f64 {
    let (mut lo, mut hi) = (1e-3, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gaussian_eps_continuous(mid, delta) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Naive sigmoid cross-entropy `−Σ_j [y_j ln σ(z_j) + (1−y_j) ln(1−σ(z_j))]`
/// evaluated in fixed point.
pub fn naive_example_loss_extended(logits: &[f64], label: usize) -> f64 {
    let mut total = Fixed::zero();
    for (j, &z) in logits.iter().enumerate() {
        let e = Fixed::from_f64(-z).exp();
        let p = Fixed::one().div(&Fixed::one().add(&e));
        let term = if j == label { p.ln() } else { Fixed::one().sub(&p).ln() };
        total = total.sub(&term);
    }
    total.to_f64()
}

/// Per-example gradient of one example, written out directly:
/// `dW[j][c] = (sigmoid(z_j) − y_j)·f_c`, `db[j] = sigmoid(z_j) − y_j`.
pub fn naive_example_grad(w: &[f64], b: &[f64], f: &[f64], label: usize) -> (Vec<f64>, Vec<f64>) {
    let k = b.len();
    let d = f.len();
    let mut gw = vec![0.0; k * d];
    let mut gb = vec![0.0; k];
    for j in 0..k {
        let mut z = b[j];
        for c in 0..d {
            z += w[j * d + c] * f[c];
        }
        let p = 1.0 / (1.0 + (-z).exp());
        let u = p - if j == label { 1.0 } else { 0.0 };
        gb[j] = u;
        for c in 0..d {
            gw[j * d + c] = u * f[c];
        }
    }
    (gw, gb)
}

/// Clip each naive per-example gradient to `clip` and sum, one example at a time.
pub fn brute_force_clipped_sum(
    w: &[f64],
    b: &[f64],
    features: &[f64],
    labels: &[u16],
    clip: f64,
) -> (Vec<f64>, Vec<f64>) {
    let k = b.len();
    let d = features.len() / labels.len();
    let mut sw = vec![0.0; k * d];
    let mut sb = vec![0.0; k];
    for (i, &y) in labels.iter().enumerate() {
        let (gw, gb) = naive_example_grad(w, b, &features[i * d..(i + 1) * d], usize::from(y));
        let norm = gw.iter().chain(&gb).map(|x| x * x).sum::<f64>().sqrt();
        let s = if norm > clip { clip / norm } else { 1.0 };
        for (a, g) in sw.iter_mut().zip(&gw) {
            *a += s * g;
        }
        for (a, g) in sb.iter_mut().zip(&gb) {
            *a += s * g;
        }
    }
    (sw, sb)
}

/// Naive matrix-vector logits.
pub fn naive_logits(w: &[f64], b: &[f64], f: &[f64]) -> Vec<f64> {
    let d = f.len();
    (0..b.len())
        .map(|j| {
            let mut z = b[j];
            for c in 0..d {
                z += w[j * d + c] * f[c];
            }
            z
        })
        .collect()
}

/// Random problem instance for gradient tests.
pub struct Instance {
    pub k: usize,
    pub d: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub features: Vec<f64>,
    pub labels: Vec<u16>,
}

impl Instance {
    pub fn random(seed: u64, max_n: usize, max_d: usize, max_k: usize, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=max_n);
        let d = rng.gen_range(1..=max_d);
        let k = rng.gen_range(1..=max_k);
        Self::fill(&mut rng, n, d, k, scale)
    }

    pub fn with_shape(seed: u64, n: usize, d: usize, k: usize, scale: f64) -> Self {
        Self::fill(&mut ChaCha8Rng::seed_from_u64(seed), n, d, k, scale)
    }

    fn fill(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize, scale: f64) -> Self {
        let w = (0..k * d).map(|_| rng.gen_range(-scale..scale)).collect();
        let b = (0..k).map(|_| rng.gen_range(-scale..scale)).collect();
        let features = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..k) as u16).collect();
        Instance {
            k,
            d,
            w,
            b,
            features,
            labels,
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

pub fn rel_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn total_loss(inst: &Instance, w: &[f64], b: &[f64]) -> f64 {
    let head = LinearHead::new(inst.k, inst.d, w.to_vec(), b.to_vec()).unwrap();
    let batch = Batch::new(&inst.features, &inst.labels, inst.d).unwrap();
    batch_loss(&head, &batch).unwrap() * inst.n() as f64
}

/// Largest per-coordinate disagreement between the summed materialized
/// gradients and central differences of `n · mean loss` at step 1e-4.
/// Coordinates are compared relative to `max(|g|, 1e-3)`: below that the
/// truncation error of the difference quotient (order h²·f''') dominates.
pub fn finite_difference_error(inst: &Instance) -> f64 {
    let h = 1e-4;
    let head = LinearHead::new(inst.k, inst.d, inst.w.clone(), inst.b.clone()).unwrap();
    let batch = Batch::new(&inst.features, &inst.labels, inst.d).unwrap();
    let grads = materialized_per_example_grads(&head, &batch).unwrap();
    let mut gw = vec![0.0; inst.k * inst.d];
    let mut gb = vec![0.0; inst.k];
    for (w, b) in &grads {
        gw.iter_mut().zip(w).for_each(|(a, x)| *a += x);
        gb.iter_mut().zip(b).for_each(|(a, x)| *a += x);
    }
    let mut worst = 0.0_f64;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / analytic.abs().max(1e-3));
    };
    for idx in 0..gw.len() {
        let mut w = inst.w.clone();
        w[idx] += h;
        let plus = total_loss(inst, &w, &inst.b);
        w[idx] -= 2.0 * h;
        let minus = total_loss(inst, &w, &inst.b);
        check(gw[idx], plus, minus);
    }
    for idx in 0..gb.len() {
        let mut b = inst.b.clone();
        b[idx] += h;
        let plus = total_loss(inst, &inst.w, &b);
        b[idx] -= 2.0 * h;
        let minus = total_loss(inst, &inst.w, &b);
        check(gb[idx], plus, minus);
    }
    worst
}
