//! Orthogonal-polynomial least squares and the quadratic ReLU replacement.
//!
//! The network activation is the fixed quadratic
//! `p(x) = 4/(3πa)·x² + x/2 + a/(2π)`, which keeps every forward and backward
//! quantity a polynomial in the encrypted shares. The least-squares machinery
//! (Legendre basis on an arbitrary interval, Simpson quadrature) is exposed
//! alongside it so the activation can be compared with the true L2 projection
//! of ReLU, which has different coefficients.

use std::f64::consts::PI;

use thiserror::Error;

/// Highest Legendre degree supported by [`legendre`] and [`least_squares_fit`].
pub const MAX_DEGREE: usize = 10;

/// Default number of Simpson panels.
pub const DEFAULT_PANELS: usize = 2048;

/// Lower bound for the fitted activation scale.
pub const MIN_SCALE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("degree {0} exceeds the supported maximum of {MAX_DEGREE}")]
    DegreeTooHigh(usize),
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("simpson quadrature needs a positive even panel count, got {0}")]
    OddPanels(usize),
    #[error("activation scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),
    #[error("cannot fit a scale parameter from an empty sample set")]
    EmptySamples,
}

pub type Result<T> = std::result::Result<T, PolyError>;

/// Closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(PolyError::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// The symmetric interval `[-r, r]`.
    pub fn symmetric(r: f64) -> Result<Self> {
        Self::new(-r, r)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

/// Monomial coefficients, index = degree.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs(Vec<f64>);

impl PolyCoeffs {
    pub fn new(coeffs: Vec<f64>) -> Option<Self> {
        if coeffs.is_empty() {
            None
        } else {
            Some(Self(coeffs))
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn degree(&self) -> usize {
        self.0.len() - 1
    }

    /// Horner evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Legendre polynomial `P_k(x)` by the three-term recurrence
/// `(n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}`.
pub fn legendre(k: usize, x: f64) -> Result<f64> {
    if k > MAX_DEGREE {
        return Err(PolyError::DegreeTooHigh(k));
    }
    if !x.is_finite() {
        return Err(PolyError::NonFinite("legendre argument"));
    }
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return Ok(prev);
    }
    for n in 1..k {
        let n = n as f64;
        let next = ((2.0 * n + 1.0) * x * cur - n * prev) / (n + 1.0);
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Monomial coefficients of `P_k` on `[-1, 1]`.
pub fn legendre_coeffs(k: usize) -> Result<PolyCoeffs> {
    if k > MAX_DEGREE {
        return Err(PolyError::DegreeTooHigh(k));
    }
    let mut prev = vec![1.0];
    let mut cur = vec![0.0, 1.0];
    if k == 0 {
        return Ok(PolyCoeffs(prev));
    }
    for n in 1..k {
        let nf = n as f64;
        let mut next = vec![0.0; n + 2];
        for (i, &c) in cur.iter().enumerate() {
            next[i + 1] += (2.0 * nf + 1.0) * c;
        }
        for (i, &c) in prev.iter().enumerate() {
            next[i] -= nf * c;
        }
        next.iter_mut().for_each(|c| *c /= nf + 1.0);
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(PolyCoeffs(cur))
}

/// Composite Simpson rule of `h` over `iv` with `panels` subintervals.
pub fn simpson<F: Fn(f64) -> f64>(h: F, iv: Interval, panels: usize) -> Result<f64> {
    if panels == 0 || panels % 2 == 1 {
        return Err(PolyError::OddPanels(panels));
    }
    let step = (iv.hi - iv.lo) / panels as f64;
    let mut sum = h(iv.lo) + h(iv.hi);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * h(iv.lo + step * i as f64);
    }
    let value = sum * step / 3.0;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(PolyError::NonFinite("quadrature"))
    }
}

/// `<f, g> = ∫ f(x) g(x) dx` over `iv` (unit weight), composite Simpson with
/// `n_quad` panels.
pub fn inner_product<F, G>(f: F, g: G, iv: Interval, n_quad: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    simpson(|x| f(x) * g(x), iv, n_quad)
}

/// Simpson integration with the interval split at 0 when it straddles it, so a
/// kink at the origin (ReLU) lands on a panel boundary.
fn integrate_split_at_zero<F: Fn(f64) -> f64>(h: F, iv: Interval, panels: usize) -> Result<f64> {
    if iv.lo < 0.0 && iv.hi > 0.0 {
        let left = simpson(&h, Interval::new(iv.lo, 0.0)?, panels)?;
        let right = simpson(&h, Interval::new(0.0, iv.hi)?, panels)?;
        Ok(left + right)
    } else {
        simpson(h, iv, panels)
    }
}

/// Unit-weight L2 projection of `f` onto polynomials of degree `≤ degree` over
/// `iv`, via the shifted Legendre basis `Ψ_i(x) = P_i((x - c)/s)`:
/// `b_i = <f, Ψ_i> / <Ψ_i, Ψ_i>` with `<Ψ_i, Ψ_i> = 2s/(2i+1)`, then expanded
/// to monomials in `x`.
pub fn least_squares_fit<F: Fn(f64) -> f64>(f: F, degree: usize, iv: Interval) -> Result<PolyCoeffs> {
    if degree > MAX_DEGREE {
        return Err(PolyError::DegreeTooHigh(degree));
    }
    let c = iv.midpoint();
    let s = iv.half_width();
    let mut monomial = vec![0.0; degree + 1];
    for i in 0..=degree {
        let basis = legendre_coeffs(i)?;
        let shifted = |x: f64| basis.eval((x - c) / s);
        let num = integrate_split_at_zero(|x| f(x) * shifted(x), iv, DEFAULT_PANELS)?;
        let norm = 2.0 * s / (2 * i + 1) as f64;
        let b = num / norm;
        if !b.is_finite() {
            return Err(PolyError::NonFinite("projection coefficient"));
        }
        for (k, coef) in compose_affine(&basis, c, s).into_iter().enumerate() {
            monomial[k] += b * coef;
        }
    }
    Ok(PolyCoeffs(monomial))
}

/// Monomial coefficients in `x` of `q((x - c)/s)`.
fn compose_affine(q: &PolyCoeffs, c: f64, s: f64) -> Vec<f64> {
    let n = q.degree();
    let mut out = vec![0.0; n + 1];
    // ((x - c)/s)^k = s^-k Σ_j C(k,j) x^j (-c)^(k-j)
    for (k, &qk) in q.as_slice().iter().enumerate() {
        if qk == 0.0 {
            continue;
        }
        let scale = qk / s.powi(k as i32);
        let mut binom = 1.0;
        for (j, o) in out.iter_mut().enumerate().take(k + 1) {
            *o += scale * binom * (-c).powi((k - j) as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    out
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Squared L2 distance between `f` and a polynomial over `iv`.
pub fn l2_error_sq<F: Fn(f64) -> f64>(f: F, p: &PolyCoeffs, iv: Interval) -> Result<f64> {
    integrate_split_at_zero(|x| (f(x) - p.eval(x)).powi(2), iv, DEFAULT_PANELS)
}

/// Quadratic ReLU replacement `p(x) = 4/(3πa)·x² + x/2 + a/(2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadActivation {
    a: f64,
}

impl QuadActivation {
    pub fn new(a: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(PolyError::InvalidScale(a));
        }
        Ok(Self { a })
    }

    pub fn scale(&self) -> f64 {
        self.a
    }

    /// `(c0, c1, c2)` of `c2·x² + c1·x + c0`.
    pub fn coefficients(&self) -> [f64; 3] {
        [self.a / (2.0 * PI), 0.5, 4.0 / (3.0 * PI * self.a)]
    }

    pub fn as_poly(&self) -> PolyCoeffs {
        PolyCoeffs(self.coefficients().to_vec())
    }

    /// Quadratic coefficient `4/(3πa)`.
    pub fn quad_coeff(&self) -> f64 {
        4.0 / (3.0 * PI * self.a)
    }

    pub fn apply(&self, x: f64) -> f64 {
        let [c0, c1, c2] = self.coefficients();
        (c2 * x + c1) * x + c0
    }

    /// `p'(x) = 8/(3πa)·x + 1/2`.
    pub fn deriv(&self, x: f64) -> f64 {
        2.0 * self.quad_coeff() * x + 0.5
    }
}

/// `act(q, x)`; rejects non-finite input.
pub fn act(q: QuadActivation, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(PolyError::NonFinite("activation input"));
    }
    Ok(q.apply(x))
}

/// `act_deriv(q, x)`; rejects non-finite input.
pub fn act_deriv(q: QuadActivation, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(PolyError::NonFinite("activation input"));
    }
    Ok(q.deriv(x))
}

/// Symmetric-range rule: `a = max(|min|, |max|)` over the observed
/// pre-activations, floored at [`MIN_SCALE`].
pub fn fit_scale_param(samples: &[f64]) -> Result<QuadActivation> {
    if samples.is_empty() {
        return Err(PolyError::EmptySamples);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in samples {
        if !s.is_finite() {
            return Err(PolyError::NonFinite("scale sample"));
        }
        lo = lo.min(s);
        hi = hi.max(s);
    }
    QuadActivation::new(lo.abs().max(hi.abs()).max(MIN_SCALE))
}
