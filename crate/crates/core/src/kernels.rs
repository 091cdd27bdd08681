//! Radial interaction kernels and the equilibrium quantities derived from them.
//!
//! Every force in the model has the form `g(|w|) w` for a radial kernel `g`.
//! Kernels come from a closed set of analytic families so that scenarios stay
//! serializable and the adjoint can differentiate them exactly.

use serde::{Deserialize, Serialize};

use crate::error::{HerdError, Result};

/// Lower end of the geometric bracket search.
pub const BRACKET_MIN: f64 = 1e-3;
/// Upper end of the geometric bracket search.
pub const BRACKET_MAX: f64 = 1e3;
/// Residual tolerance of the root finders.
pub const ROOT_TOL: f64 = 1e-12;
/// Value reported for the potential once the radius is treated as singular.
pub const SATURATED_POTENTIAL: f64 = 1e13;
/// Radii below `SINGULAR_FRACTION * r_p` are reported as singular.
pub const SINGULAR_FRACTION: f64 = 1e-9;

const BRACKET_GROWTH: f64 = 1.05;

/// A radial kernel `r -> g(r)` drawn from a small family of closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Kernel {
    /// `g(r) = value`
    Constant { value: f64 },
    /// `g(r) = coeff / r^power`
    InversePower { coeff: f64, power: f64 },
    /// `g(r) = coeff_a / r^power_a - coeff_b / r^power_b`
    InversePowerDifference {
        coeff_a: f64,
        power_a: f64,
        coeff_b: f64,
        power_b: f64,
    },
}

impl Kernel {
    pub const ZERO: Kernel = Kernel::Constant { value: 0.0 };

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Kernel::Constant { value } => value,
            Kernel::InversePower { coeff, power } => coeff * r.powf(-power),
            Kernel::InversePowerDifference {
                coeff_a,
                power_a,
                coeff_b,
                power_b,
            } => coeff_a * r.powf(-power_a) - coeff_b * r.powf(-power_b),
        }
    }

    /// `g'(r)`
    #[inline]
    pub fn deriv(&self, r: f64) -> f64 {
        match *self {
            Kernel::Constant { .. } => 0.0,
            Kernel::InversePower { coeff, power } => -coeff * power * r.powf(-power - 1.0),
            Kernel::InversePowerDifference {
                coeff_a,
                power_a,
                coeff_b,
                power_b,
            } => {
                -coeff_a * power_a * r.powf(-power_a - 1.0)
                    + coeff_b * power_b * r.powf(-power_b - 1.0)
            }
        }
    }

    /// `lim_{r -> inf} g(r)`
    pub fn limit_at_infinity(&self) -> f64 {
        match *self {
            Kernel::Constant { value } => value,
            _ => 0.0,
        }
    }

    /// True when the kernel stays bounded as `r -> 0`.
    pub fn is_bounded(&self) -> bool {
        match *self {
            Kernel::Constant { .. } => true,
            Kernel::InversePower { coeff, .. } => coeff == 0.0,
            Kernel::InversePowerDifference {
                coeff_a, coeff_b, ..
            } => coeff_a == 0.0 && coeff_b == 0.0,
        }
    }

    fn check_powers(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Kernel::Constant { value } => value.is_finite(),
            Kernel::InversePower { coeff, power } => coeff.is_finite() && power > 0.0,
            Kernel::InversePowerDifference {
                coeff_a,
                power_a,
                coeff_b,
                power_b,
            } => coeff_a.is_finite() && coeff_b.is_finite() && power_a > 0.0 && power_b > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HerdError::KernelInvalid(format!(
                "{name}: coefficients must be finite and powers positive"
            )))
        }
    }
}

/// The four interaction kernels of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    /// Driver pursuit kernel.
    pub f_d: Kernel,
    /// Evader repulsion kernel.
    pub f_e: Kernel,
    /// Driver-driver kernel.
    pub psi_d: Kernel,
    /// Evader-evader kernel.
    pub psi_e: Kernel,
}

impl Default for KernelSet {
    /// `f_d = 1`, `f_e = 1/r^2`, `psi_d = 1/(2 r^4)`,
    /// `psi_e = 10 (0.1^2/r^2 - 0.1^4/r^4)`.
    fn default() -> Self {
        Self {
            f_d: Kernel::Constant { value: 1.0 },
            f_e: Kernel::InversePower {
                coeff: 1.0,
                power: 2.0,
            },
            psi_d: Kernel::InversePower {
                coeff: 0.5,
                power: 4.0,
            },
            psi_e: Kernel::InversePowerDifference {
                coeff_a: 0.1,
                power_a: 2.0,
                coeff_b: 1e-3,
                power_b: 4.0,
            },
        }
    }
}

impl KernelSet {
    /// `lim_{r -> inf} f_d(r)`.
    pub fn gamma_m(&self) -> f64 {
        self.f_d.limit_at_infinity()
    }

    /// `f(r) = f_d(r) - f_e(r)` without domain checks.
    #[inline]
    pub fn relative_force(&self, r: f64) -> f64 {
        self.f_d.eval(r) - self.f_e.eval(r)
    }

    /// `f(r) = f_d(r) - f_e(r)`.
    pub fn eval_relative_force(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(HerdError::Domain { r });
        }
        let f = self.relative_force(r);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(HerdError::Domain { r })
        }
    }

    /// Unique sign change of `f`, located by a geometric bracket scan and bisection.
    pub fn solve_rp(&self) -> Result<f64> {
        let f = |r: f64| self.relative_force(r);
        let mut lo = BRACKET_MIN;
        if !(f(lo) < 0.0) {
            return Err(HerdError::KernelInvalid(format!(
                "f(r) = f_d - f_e is not negative at r = {BRACKET_MIN}; no pursuit radius"
            )));
        }
        while lo < BRACKET_MAX {
            let hi = (lo * BRACKET_GROWTH).min(BRACKET_MAX);
            let f_hi = f(hi);
            if f_hi >= 0.0 {
                return Ok(bisect(f, lo, hi, 0.0));
            }
            lo = hi;
        }
        Err(HerdError::KernelInvalid(format!(
            "f(r) = f_d - f_e has no sign change in [{BRACKET_MIN}, {BRACKET_MAX}]"
        )))
    }

    /// Radius of the circumvention orbit: `f(r_c) = (kappa_c / nu)^2`, `r_c >= r_p`.
    pub fn solve_rc(&self, kappa_c: f64, nu: f64) -> Result<f64> {
        if !(nu > 0.0) {
            return Err(HerdError::Validation(format!(
                "friction must be positive, got {nu}"
            )));
        }
        let limit = nu * self.gamma_m().max(0.0).sqrt();
        if !(kappa_c.abs() < limit) {
            return Err(HerdError::NoOrbit { kappa_c, limit });
        }
        let r_p = self.solve_rp()?;
        let level = (kappa_c / nu).powi(2);
        if level == 0.0 {
            return Ok(r_p);
        }
        let g = |r: f64| self.relative_force(r) - level;
        let mut lo = r_p;
        while lo < BRACKET_MAX {
            let hi = (lo * BRACKET_GROWTH).min(BRACKET_MAX);
            if g(hi) >= 0.0 {
                return Ok(bisect(g, lo, hi, 0.0));
            }
            lo = hi;
        }
        Err(HerdError::NoOrbit { kappa_c, limit })
    }

    /// Evaluator for `P(r) = int_{r_p}^{r} s f(s) ds` with `r_p` resolved once.
    pub fn potential_fn(&self) -> Result<PotentialFn> {
        Ok(PotentialFn {
            kernels: *self,
            r_p: self.solve_rp()?,
        })
    }

    /// `P(r)`; see [`PotentialFn::eval`].
    pub fn potential(&self, r: f64) -> Result<Potential> {
        Ok(self.potential_fn()?.eval(r))
    }

    /// Checks the kernel invariants on a sampling grid.
    pub fn validate(&self) -> Result<()> {
        self.f_d.check_powers("f_d")?;
        self.f_e.check_powers("f_e")?;
        self.psi_d.check_powers("psi_d")?;
        self.psi_e.check_powers("psi_e")?;
        if !self.f_d.is_bounded() {
            return Err(HerdError::KernelInvalid("f_d must be bounded".into()));
        }
        if !(self.gamma_m() > 0.0) {
            return Err(HerdError::KernelInvalid(
                "f_d must have a positive limit gamma_m at infinity".into(),
            ));
        }
        for r in sample_grid() {
            let fd = self.f_d.eval(r);
            let fe = self.f_e.eval(r);
            if !(fd >= 0.0) {
                return Err(HerdError::KernelInvalid(format!(
                    "f_d({r}) = {fd} is negative"
                )));
            }
            if !(fe >= 0.0 && fe.is_finite()) {
                return Err(HerdError::KernelInvalid(format!(
                    "f_e({r}) = {fe} must be finite and nonnegative"
                )));
            }
        }
        if self.f_e.eval(1e6).abs() > 1e-6 {
            return Err(HerdError::KernelInvalid(
                "f_e must vanish at infinity".into(),
            ));
        }
        let r_p = self.solve_rp()?;
        for r in sample_grid() {
            let f = self.relative_force(r);
            let bad = if r < r_p * (1.0 - 1e-9) {
                f >= 0.0
            } else if r > r_p * (1.0 + 1e-9) {
                f < 0.0
            } else {
                false
            };
            if bad {
                return Err(HerdError::KernelInvalid(format!(
                    "f violates the sign pattern at r = {r} (r_p = {r_p})"
                )));
            }
        }
        let slope = self.f_d.deriv(r_p) - self.f_e.deriv(r_p);
        if !(slope > 0.0) {
            return Err(HerdError::KernelInvalid(format!(
                "f'(r_p) = {slope} must be positive"
            )));
        }
        Ok(())
    }
}

fn sample_grid() -> impl Iterator<Item = f64> {
    (0..=600).map(|k| BRACKET_MIN * 10f64.powf(k as f64 * 6.0 / 600.0))
}

/// Bisection on a bracket with `g(lo) < level <= g(hi)` for an increasing crossing.
fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, level: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = g(mid) - level;
        if v.abs() < ROOT_TOL * 1e-3 || mid == lo || mid == hi {
            return mid;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Value of the radial potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Potential {
    pub value: f64,
    /// Set when `r` is too close to zero; `value` is then [`SATURATED_POTENTIAL`].
    pub singular: bool,
}

/// `P(r) = int_{r_p}^{r} s f(s) ds`, evaluated by adaptive Simpson quadrature.
#[derive(Debug, Clone, Copy)]
pub struct PotentialFn {
    kernels: KernelSet,
    r_p: f64,
}

impl PotentialFn {
    pub fn r_p(&self) -> f64 {
        self.r_p
    }

    pub fn eval(&self, r: f64) -> Potential {
        let saturated = Potential {
            value: SATURATED_POTENTIAL,
            singular: true,
        };
        if !(r > SINGULAR_FRACTION * self.r_p) {
            return saturated;
        }
        let k = self.kernels;
        let integrand = |s: f64| s * k.relative_force(s);
        let value = adaptive_simpson(&integrand, self.r_p, r, 1e-13);
        if value.is_finite() && value < SATURATED_POTENTIAL {
            Potential {
                value,
                singular: false,
            }
        } else {
            saturated
        }
    }
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    // Split at powers of two away from the origin so the singular end is resolved
    // by many short panels rather than one deep recursion.
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut total = 0.0;
    let mut left = lo;
    while left < hi {
        let right = (left * 2.0).min(hi);
        total += simpson_panel(f, left, right, tol);
        left = right;
    }
    sign * total
}

fn simpson_panel(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
