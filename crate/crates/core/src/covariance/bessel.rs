//! Modified Bessel functions of the second kind.
//!
//! `K_0` and `K_1` come from the ascending series for `x <= 2` and Steed's
//! continued fraction (Temme's CF2) above that; `K_2` follows by recurrence.
//! Arbitrary real order goes through the integral
//! `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt` with the trapezoidal rule,
//! which converges geometrically for this integrand but costs a few hundred
//! exponentials per call.

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const SERIES_LIMIT: f64 = 2.0;

/// `(K_0(x), K_1(x))` for `x > 0`.
pub fn bessel_k0_k1(x: f64) -> (f64, f64) {
    debug_assert!(x > 0.0);
    if x <= SERIES_LIMIT {
        k0_k1_series(x)
    } else {
        let (k0s, k1s) = k0_k1_scaled_cf2(x);
        let e = (-x).exp();
        (k0s * e, k1s * e)
    }
}

/// `K_2(x)` for `x > 0`.
pub fn bessel_k2(x: f64) -> f64 {
    let (k0, k1) = bessel_k0_k1(x);
    k0 + 2.0 / x * k1
}

/// `x^2 K_2(x) / 2`, the Matérn nu = 2 shape written in its own argument; equals 1 at 0.
pub fn matern_nu2_shape(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x <= SERIES_LIMIT {
        let (k0, k1) = k0_k1_series(x);
        0.5 * x * x * k0 + x * k1
    } else {
        let (k0s, k1s) = k0_k1_scaled_cf2(x);
        (0.5 * x * x * k0s + x * k1s) * (-x).exp()
    }
}

fn k0_k1_series(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let log_half = (0.5 * x).ln();
    // K0 = -(ln(x/2) + gamma) I0 + sum_{k>=1} H_k q^k / (k!)^2
    // K1 = 1/x + ln(x/2) I1 - (x/4) sum_{k>=0} (psi(k+1) + psi(k+2)) q^k / (k! (k+1)!)
    let mut i0 = 1.0;
    let mut k0_tail = 0.0;
    let mut term0 = 1.0; // q^k / (k!)^2
    let mut term1 = 1.0; // q^k / (k! (k+1)!)
    let mut i1_sum = 1.0;
    let mut harmonic = 0.0;
    let mut psi_sum = -2.0 * EULER_GAMMA + 1.0; // psi(1) + psi(2)
    let mut k1_tail = psi_sum;
    for k in 1..60 {
        let kf = k as f64;
        term0 *= q / (kf * kf);
        term1 *= q / (kf * (kf + 1.0));
        harmonic += 1.0 / kf;
        psi_sum += 1.0 / kf + 1.0 / (kf + 1.0);
        i0 += term0;
        k0_tail += harmonic * term0;
        i1_sum += term1;
        k1_tail += psi_sum * term1;
        if term0 < 1e-18 * i0 && term1 < 1e-18 * i1_sum {
            break;
        }
    }
    let k0 = -(log_half + EULER_GAMMA) * i0 + k0_tail;
    let i1 = 0.5 * x * i1_sum;
    let k1 = 1.0 / x + log_half * i1 - 0.25 * x * k1_tail;
    (k0, k1)
}

/// `(e^x K_0(x), e^x K_1(x))` from Steed's algorithm, valid for `x >= 2`.
fn k0_k1_scaled_cf2(x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 {
            break;
        }
    }
    h *= a1;
    let k0 = (std::f64::consts::PI / (2.0 * x)).sqrt() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

/// `K_nu(x)` for real `nu` and `x > 0`.
///
/// Integer orders 0, 1, 2 use the dedicated routines; other orders integrate.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let nu = nu.abs();
    if nu == 0.0 {
        return bessel_k0_k1(x).0;
    }
    if nu == 1.0 {
        return bessel_k0_k1(x).1;
    }
    if nu == 2.0 {
        return bessel_k2(x);
    }
    bessel_k_scaled_integral(nu, x) * (-x).exp()
}

/// `e^x K_nu(x)` by trapezoidal quadrature of the cosh representation.
fn bessel_k_scaled_integral(nu: f64, x: f64) -> f64 {
    const STEP: f64 = 0.02;
    // Integrand exp(-x (cosh t - 1)) cosh(nu t) peaks near asinh(nu / x).
    let peak = (nu / x).asinh();
    let mut sum = 0.5; // t = 0 endpoint, weight 1/2
    let mut t = STEP;
    loop {
        let log_term = -x * (t.cosh() - 1.0) + nu * t + (0.5 * (1.0 + (-2.0 * nu * t).exp())).ln();
        let term = log_term.exp();
        sum += term;
        if t > peak && term < 1e-17 * sum {
            break;
        }
        t += STEP;
        if t > 800.0 {
            break;
        }
    }
    sum * STEP
}
