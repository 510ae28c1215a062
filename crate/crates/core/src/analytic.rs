//! Series solution for a plane wave scattered by an elastic spherical shell,
//! with the spherical special functions it needs. Time convention e^{-i w t}.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Spherical Bessel functions j_0..=j_n at `x` (Miller's downward recurrence).
pub fn spherical_bessel_j_all<T: Real>(n: usize, x: T) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); n + 1];
    if x == T::zero() {
        out[0] = T::one();
        return Ok(out);
    }
    if !(x > T::zero()) || !x.is_finite() {
        return Err(Error::Overflow { order: n, x: x.to_f64_lossy() });
    }
    let xf = x.to_f64_lossy();
    let start = n + 20 + (xf.abs() as usize) + (40.0 * (n as f64 + 1.0)).sqrt() as usize;
    let mut f_next = T::zero();
    let mut f = T::min_positive_value().sqrt();
    let mut norm = T::zero();
    let big = T::max_value().sqrt();
    let mut vals = vec![T::zero(); start + 1];
    vals[start] = f;
    for k in (1..=start).rev() {
        let kf = T::from_usize_lossy(k);
        let f_prev = (T::lit(2.0) * kf + T::one()) / x * f - f_next;
        f_next = f;
        f = f_prev;
        vals[k - 1] = f;
        if f.abs() > big {
            let s = T::one() / big;
            for v in vals[k - 1..].iter_mut() {
                *v *= s;
            }
            f *= s;
            f_next *= s;
        }
    }
    for (k, &v) in vals.iter().enumerate() {
        norm += (T::lit(2.0) * T::from_usize_lossy(k) + T::one()) * v * v;
    }
    // sum (2k+1) j_k^2 = 1, with the sign fixed by j_0
    let mut scale = T::one() / norm.sqrt();
    let j0 = x.sin() / x;
    if (j0 * vals[0]) < T::zero() {
        scale = -scale;
    }
    for k in 0..=n {
        out[k] = vals[k] * scale;
    }
    Ok(out)
}

/// Spherical Bessel functions of the second kind y_0..=y_n (upward recurrence).
pub fn spherical_bessel_y_all<T: Real>(n: usize, x: T) -> Result<Vec<T>> {
    if !(x > T::zero()) {
        return Err(Error::Overflow { order: n, x: x.to_f64_lossy() });
    }
    let mut out = Vec::with_capacity(n + 1);
    let (s, c) = x.sin_cos();
    out.push(-c / x);
    if n >= 1 {
        out.push(-c / (x * x) - s / x);
    }
    for k in 1..n {
        let kf = T::from_usize_lossy(k);
        let v = (T::lit(2.0) * kf + T::one()) / x * out[k] - out[k - 1];
        if !v.is_finite() {
            return Err(Error::Overflow { order: k + 1, x: x.to_f64_lossy() });
        }
        out.push(v);
    }
    Ok(out)
}

/// Spherical Hankel functions of the first kind h_n = j_n + i y_n, orders 0..=n.
pub fn spherical_hankel1_all<T: Real>(n: usize, x: T) -> Result<Vec<Complex<T>>> {
    let j = spherical_bessel_j_all(n, x)?;
    let y = spherical_bessel_y_all(n, x)?;
    Ok(j.into_iter().zip(y).map(|(a, b)| Complex::new(a, b)).collect())
}

/// Derivatives from f_n' = f_{n-1} - (n+1)/x f_n (and f_0' = -f_1).
/// `f` must hold orders 0..=n+1; returns orders 0..=n.
pub fn derivatives<T: Real, F>(f: &[F], x: T) -> Vec<F>
where
    F: Copy + std::ops::Sub<Output = F> + std::ops::Mul<T, Output = F> + std::ops::Neg<Output = F>,
{
    let n = f.len() - 1;
    let mut d = Vec::with_capacity(n);
    for k in 0..n {
        if k == 0 {
            d.push(-f[1]);
        } else {
            d.push(f[k - 1] - f[k] * (T::from_usize_lossy(k + 1) / x));
        }
    }
    d
}

pub fn spherical_bessel_j<T: Real>(n: usize, x: T) -> Result<T> {
    Ok(spherical_bessel_j_all(n, x)?[n])
}

pub fn spherical_bessel_y<T: Real>(n: usize, x: T) -> Result<T> {
    Ok(spherical_bessel_y_all(n, x)?[n])
}

pub fn spherical_hankel1<T: Real>(n: usize, x: T) -> Result<Complex<T>> {
    Ok(spherical_hankel1_all(n, x)?[n])
}

pub fn spherical_bessel_j_prime<T: Real>(n: usize, x: T) -> Result<T> {
    let j = spherical_bessel_j_all(n + 1, x)?;
    Ok(derivatives(&j, x)[n])
}

pub fn spherical_bessel_y_prime<T: Real>(n: usize, x: T) -> Result<T> {
    let y = spherical_bessel_y_all(n + 1, x)?;
    Ok(derivatives(&y, x)[n])
}

pub fn spherical_hankel1_prime<T: Real>(n: usize, x: T) -> Result<Complex<T>> {
    let h = spherical_hankel1_all(n + 1, x)?;
    Ok(derivatives(&h, x)[n])
}

/// Legendre polynomials P_0..=P_n at `x`.
pub fn legendre_p_all<T: Real>(n: usize, x: T) -> Vec<T> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(T::one());
    if n >= 1 {
        p.push(x);
    }
    for k in 1..n {
        let kf = T::from_usize_lossy(k);
        let v = ((T::lit(2.0) * kf + T::one()) * x * p[k] - kf * p[k - 1]) / (kf + T::one());
        p.push(v);
    }
    p
}

pub fn legendre_p<T: Real>(n: usize, x: T) -> T {
    legendre_p_all(n, x)[n]
}

/// Which length enters the shell formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthConvention {
    /// Use the radius a/2 (the classical derivation).
    #[default]
    Radius,
    /// Use the diameter a literally.
    Diameter,
}

/// Which part of the series to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesMode {
    /// Incident plus rigid-sphere scattered field.
    Rigid,
    /// Field radiated by the shell vibration only.
    Elastic,
    /// Incident, rigid scattered and radiated fields.
    Total,
}

#[derive(Clone, Copy, Debug)]
pub struct SphereScatterParams<T> {
    /// Sphere diameter (m).
    pub a: T,
    /// Shell thickness (m).
    pub h: T,
    pub rho_f: T,
    /// Fluid sound speed (m/s).
    pub c: T,
    pub rho_s: T,
    pub e: T,
    pub nu: T,
    /// Incident amplitude (Pa).
    pub p0: T,
    /// Wavenumber (1/m).
    pub k: T,
    pub length: LengthConvention,
    /// First mode of the sums (0 or 1).
    pub first_mode: usize,
}

impl SphereScatterParams<f64> {
    /// Steel shell in water, unit diameter, at normalised wavenumber `ka`.
    pub fn steel_in_water(ka: f64, h: f64) -> Self {
        Self {
            a: 1.0,
            h,
            rho_f: 1000.0,
            c: 1482.0,
            rho_s: 7860.0,
            e: 210e9,
            nu: 0.3,
            p0: 1.0,
            k: ka,
            length: LengthConvention::Radius,
            first_mode: 0,
        }
    }
}

impl<T: Real> SphereScatterParams<T> {
    /// Length used inside the shell and scattering formulas.
    pub fn formula_length(&self) -> T {
        match self.length {
            LengthConvention::Radius => self.a / T::lit(2.0),
            LengthConvention::Diameter => self.a,
        }
    }

    pub fn omega(&self) -> T {
        self.k * self.c
    }

    pub fn c_p(&self) -> T {
        compressional_speed(self.e, self.nu, self.rho_s)
    }

    /// Dimensionless driving frequency.
    pub fn big_omega(&self) -> T {
        self.omega() * self.formula_length() / self.c_p()
    }

    pub fn beta2(&self) -> T {
        let l = self.formula_length();
        self.h * self.h / (T::lit(12.0) * l * l)
    }

    /// ka with the convention's length (the Hankel argument at the surface).
    pub fn ka(&self) -> T {
        self.k * self.formula_length()
    }

    pub fn default_truncation(&self) -> usize {
        (self.k * self.a).ceil().to_usize().unwrap_or(0) + 40
    }

    fn validate(&self) -> Result<()> {
        let pos = [self.a, self.h, self.rho_f, self.c, self.rho_s, self.e, self.k];
        if pos.iter().any(|v| !(*v > T::zero())) || !(self.nu >= T::zero() && self.nu < T::one()) {
            return Err(Error::Unphysical { n: 0, msg: "parameters must be positive with 0 <= nu < 1".into() });
        }
        Ok(())
    }
}

/// c_p = sqrt(E / ((1 - nu^2) rho_s)).
pub fn compressional_speed<T: Real>(e: T, nu: T, rho_s: T) -> T {
    (e / ((T::one() - nu * nu) * rho_s)).sqrt()
}

/// Coefficients (b, c) of the quadratic w^2 - b w + c = 0 in w = Omega^2.
pub fn natural_frequency_quadratic<T: Real>(n: usize, nu: T, beta2: T) -> (T, T) {
    let l = T::from_usize_lossy(n * (n + 1));
    let one = T::one();
    let b = one + T::lit(3.0) * nu + l - beta2 * (one - nu - l * l - nu * l);
    let c = (l - T::lit(2.0)) * (one - nu * nu)
        + beta2 * (l * l * l - T::lit(4.0) * l * l + l * (T::lit(5.0) - nu * nu) - T::lit(2.0) * (one - nu * nu));
    (b, c)
}

/// Roots Omega^2 of the quadratic, ascending, by the stable formula.
pub fn natural_frequency_squares<T: Real>(n: usize, nu: T, beta2: T) -> Result<(T, T)> {
    let (b, c) = natural_frequency_quadratic(n, nu, beta2);
    let disc = b * b - T::lit(4.0) * c;
    if disc < T::zero() {
        return Err(Error::Unphysical { n, msg: format!("negative discriminant {}", disc.to_f64_lossy()) });
    }
    let q = (b + disc.sqrt()) / T::lit(2.0);
    let r1 = if q != T::zero() { c / q } else { T::zero() };
    Ok(if r1 <= q { (r1, q) } else { (q, r1) })
}

/// Dimensionless natural frequencies (Omega_n^(1), Omega_n^(2)).
pub fn natural_frequencies<T: Real>(n: usize, params: &SphereScatterParams<T>) -> Result<(T, T)> {
    let (w1, w2) = natural_frequency_squares(n, params.nu, params.beta2())?;
    let tol = T::lit(64.0) * T::epsilon() * w2.abs();
    let fix = |w: T| if w < T::zero() && -w <= tol { T::zero() } else { w };
    let (w1, w2) = (fix(w1), fix(w2));
    if w1 < T::zero() {
        return Err(Error::Unphysical { n, msg: format!("negative root Omega^2 = {}", w1.to_f64_lossy()) });
    }
    Ok((w1.sqrt(), w2.sqrt()))
}

/// In-vacuo modal impedance Z_n and specific acoustic impedance z_n.
pub fn modal_impedances<T: Real>(n: usize, params: &SphereScatterParams<T>) -> Result<(Complex<T>, Complex<T>)> {
    params.validate()?;
    let x = params.ka();
    let h = spherical_hankel1_all(n + 1, x)?;
    let hp = derivatives(&h, x);
    Ok((in_vacuo_impedance(n, params)?, specific_impedance(params, h[n], hp[n])?))
}

fn specific_impedance<T: Real>(p: &SphereScatterParams<T>, h: Complex<T>, hp: Complex<T>) -> Result<Complex<T>> {
    if hp.norm() == T::zero() {
        return Err(Error::ImpedancePole { n: 0 });
    }
    Ok(Complex::new(T::zero(), p.rho_f * p.c) * h / hp)
}

fn in_vacuo_impedance<T: Real>(n: usize, p: &SphereScatterParams<T>) -> Result<Complex<T>> {
    let om = p.big_omega();
    let w = om * om;
    let beta2 = p.beta2();
    let (b, c) = natural_frequency_quadratic(n, p.nu, beta2);
    let pole = (T::one() + beta2) * (p.nu + T::from_usize_lossy(n * (n + 1)) - T::one());
    // numerator (w - w1)(w - w2) = w^2 - b w + c
    let ratio = if n == 0 {
        // the pole cancels one root exactly
        w - (b - pole)
    } else {
        let den = w - pole;
        if den.abs() <= T::lit(1e3) * T::epsilon() * (w.abs() + pole.abs()) {
            return Err(Error::ImpedancePole { n });
        }
        (w * w - b * w + c) / den
    };
    let pref = p.rho_s * p.c_p() / om * (p.h / p.formula_length());
    Ok(Complex::new(T::zero(), -pref * ratio))
}

/// Per-mode coefficients of the outgoing series p = sum c_n P_n(cos t) h_n(k r).
#[derive(Clone, Debug)]
pub struct SeriesCoefficients<T> {
    pub params: SphereScatterParams<T>,
    pub rigid: Vec<Complex<T>>,
    pub elastic: Vec<Complex<T>>,
}

impl<T: Real> SeriesCoefficients<T> {
    pub fn new(params: &SphereScatterParams<T>, n_trunc: usize) -> Result<Self> {
        params.validate()?;
        let x = params.ka();
        let h = spherical_hankel1_all(n_trunc + 1, x)?;
        let j = spherical_bessel_j_all(n_trunc + 1, x)?;
        let hp = derivatives(&h, x);
        let jp = derivatives(&j, x);
        let mut rigid = Vec::with_capacity(n_trunc + 1);
        let mut elastic = Vec::with_capacity(n_trunc + 1);
        let mut i_n = Complex::new(T::one(), T::zero());
        let i = Complex::new(T::zero(), T::one());
        for n in 0..=n_trunc {
            let f = i_n * (T::lit(2.0) * T::from_usize_lossy(n) + T::one()) * params.p0;
            if n < params.first_mode {
                rigid.push(Complex::new(T::zero(), T::zero()));
                elastic.push(Complex::new(T::zero(), T::zero()));
            } else {
                rigid.push(-f * jp[n] / hp[n]);
                let zz = in_vacuo_impedance(n, params)? + specific_impedance(params, h[n], hp[n])?;
                let d = zz * (hp[n] * x) * (hp[n] * x);
                if d.norm() == T::zero() {
                    return Err(Error::ImpedancePole { n });
                }
                elastic.push(f * (params.rho_f * params.c) / d);
            }
            i_n = i_n * i;
        }
        Ok(Self { params: *params, rigid, elastic })
    }

    /// Series value at radius `r` and polar angle `theta` from the incidence axis.
    pub fn pressure(&self, r: T, theta: T, mode: SeriesMode) -> Result<Complex<T>> {
        let n_trunc = self.rigid.len() - 1;
        let kr = self.params.k * r;
        let h = spherical_hankel1_all(n_trunc, kr)?;
        let p = legendre_p_all(n_trunc, theta.cos());
        let mut sum = Complex::new(T::zero(), T::zero());
        let mut small = 0usize;
        let mut last = T::zero();
        for n in 0..=n_trunc {
            let c = match mode {
                SeriesMode::Rigid => self.rigid[n],
                SeriesMode::Elastic => self.elastic[n],
                SeriesMode::Total => self.rigid[n] + self.elastic[n],
            };
            let term = c * h[n] * p[n];
            sum += term;
            last = term.norm();
            if n >= self.params.first_mode + 2 && last <= T::lit(1e-12) * sum.norm() {
                small += 1;
                if small >= 3 {
                    let inc = match mode {
                        SeriesMode::Elastic => Complex::new(T::zero(), T::zero()),
                        _ => Complex::from_polar(self.params.p0, kr * theta.cos()),
                    };
                    return Ok(sum + inc);
                }
            } else {
                small = 0;
            }
        }
        Err(Error::SeriesNotConverged { n_trunc, last: last.to_f64_lossy() })
    }
}

/// Series pressure at (r, theta); `theta` is measured from the incidence direction.
pub fn sphere_pressure<T: Real>(
    params: &SphereScatterParams<T>,
    r: T,
    theta: T,
    mode: SeriesMode,
    n_trunc: usize,
) -> Result<Complex<T>> {
    SeriesCoefficients::new(params, n_trunc)?.pressure(r, theta, mode)
}
