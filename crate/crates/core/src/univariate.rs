//! Taylor coefficients of the scalar functions the expression language and
//! the saturating penalties need, generated by recurrences.

use crate::power_series::SeriesError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnivariateFn {
    Sin,
    Cos,
    Exp,
    Tanh,
    Cosh,
    Ln,
    /// `ln(cosh(t))`
    LnCosh,
    /// `∫₀ʷ atanh(s) ds = w·atanh(w) + ½ ln(1 − w²)`
    AtanhIntegral,
}

impl UnivariateFn {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Exp => "exp",
            Self::Tanh => "tanh",
            Self::Cosh => "cosh",
            Self::Ln => "ln",
            Self::LnCosh => "lncosh",
            Self::AtanhIntegral => "atanh_integral",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Sin => x.sin(),
            Self::Cos => x.cos(),
            Self::Exp => x.exp(),
            Self::Tanh => x.tanh(),
            Self::Cosh => x.cosh(),
            Self::Ln => x.ln(),
            Self::LnCosh => ln_cosh(x),
            Self::AtanhIntegral => atanh_integral(x),
        }
    }

    /// Coefficients `a_0..=a_order` of `f(center + t) = Σ a_j t^j`.
    pub fn taylor(self, center: f64, order: usize) -> Result<Vec<f64>, SeriesError> {
        if !center.is_finite() {
            return Err(SeriesError::Domain(format!(
                "{} expanded about {center}",
                self.name()
            )));
        }
        let coeffs = match self {
            Self::Sin | Self::Cos => {
                let (s, c) = center.sin_cos();
                // derivative cycle starting at f(center)
                let cycle = if self == Self::Sin {
                    [s, c, -s, -c]
                } else {
                    [c, -s, -c, s]
                };
                let mut inv_fact = 1.0;
                (0..=order)
                    .map(|j| {
                        if j > 0 {
                            inv_fact /= j as f64;
                        }
                        cycle[j % 4] * inv_fact
                    })
                    .collect()
            }
            Self::Exp => {
                let mut a = Vec::with_capacity(order + 1);
                let mut term = center.exp();
                for j in 0..=order {
                    if j > 0 {
                        term /= j as f64;
                    }
                    a.push(term);
                }
                a
            }
            Self::Cosh => {
                let (ch, sh) = (center.cosh(), center.sinh());
                let mut inv_fact = 1.0;
                (0..=order)
                    .map(|j| {
                        if j > 0 {
                            inv_fact /= j as f64;
                        }
                        if j % 2 == 0 {
                            ch * inv_fact
                        } else {
                            sh * inv_fact
                        }
                    })
                    .collect()
            }
            Self::Tanh => tanh_coeffs(center, order),
            Self::LnCosh => {
                let t = tanh_coeffs(center, order);
                integrate(ln_cosh(center), &t, order)
            }
            Self::Ln => {
                if center <= 0.0 {
                    return Err(SeriesError::Domain(format!(
                        "ln expanded about non-positive value {center}"
                    )));
                }
                let mut a = vec![center.ln()];
                let mut pow = 1.0;
                for j in 1..=order {
                    pow /= center;
                    let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                    a.push(sign * pow / j as f64);
                }
                a
            }
            Self::AtanhIntegral => {
                if center.abs() >= 1.0 {
                    return Err(SeriesError::Domain(format!(
                        "atanh integral expanded about {center}, outside (-1, 1)"
                    )));
                }
                // 1/(1 − (c+t)²) as the reciprocal of d(t) = d0 + d1 t + d2 t²
                let d0 = 1.0 - center * center;
                let d1 = -2.0 * center;
                let d2 = -1.0;
                let mut recip = vec![0.0; order + 1];
                for j in 0..=order {
                    let mut acc = if j == 0 { 1.0 } else { 0.0 };
                    if j >= 1 {
                        acc -= d1 * recip[j - 1];
                    }
                    if j >= 2 {
                        acc -= d2 * recip[j - 2];
                    }
                    recip[j] = acc / d0;
                }
                let atanh = integrate(center.atanh(), &recip, order);
                integrate(Self::AtanhIntegral.eval(center), &atanh, order)
            }
        };
        Ok(coeffs)
    }
}

fn ln_cosh(x: f64) -> f64 {
    // stable for large |x|: ln cosh x = |x| + ln(1 + e^{-2|x|}) − ln 2
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `w·atanh(w) + ½ ln(1 − w²) = ½[(1+w) ln(1+w) + (1−w) ln(1−w)]`, finite
/// (`ln 2`) at `|w| = 1` and NaN beyond.
fn atanh_integral(w: f64) -> f64 {
    let a = w.abs();
    if a > 1.0 {
        return f64::NAN;
    }
    if a < 0.3 {
        // Σ w^{2j} / (2j(2j−1)) avoids the cancellation near zero
        let w2 = w * w;
        let mut pow = w2;
        let mut acc = 0.0;
        for j in 1..=24 {
            let d = (2 * j) as f64;
            acc += pow / (d * (d - 1.0));
            pow *= w2;
        }
        return acc;
    }
    let lower = if a == 1.0 { 0.0 } else { (1.0 - a) * (-a).ln_1p() };
    0.5 * ((1.0 + a) * a.ln_1p() + lower)
}

/// Tanh about `center`, from `y' = 1 − y²`.
fn tanh_coeffs(center: f64, order: usize) -> Vec<f64> {
    let mut y = vec![0.0; order + 1];
    y[0] = center.tanh();
    for j in 0..order {
        let conv: f64 = (0..=j).map(|i| y[i] * y[j - i]).sum();
        let rhs = if j == 0 { 1.0 - conv } else { -conv };
        y[j + 1] = rhs / (j + 1) as f64;
    }
    y
}

/// Antiderivative coefficients with the given constant term, truncated.
fn integrate(constant: f64, derivative: &[f64], order: usize) -> Vec<f64> {
    let mut a = Vec::with_capacity(order + 1);
    a.push(constant);
    for j in 1..=order {
        a.push(derivative[j - 1] / j as f64);
    }
    a
}

/// Per-channel `ψ(v) = ln(cosh(c·v))/c²` coefficients; `ψ' = tanh(c·v)/c`.
pub fn saturating_psi(gain: f64, order: usize) -> Vec<f64> {
    let base = lncosh_at_zero(order);
    let mut scale = 1.0 / (gain * gain);
    base.iter()
        .map(|&b| {
            let v = b * scale;
            scale *= gain;
            v
        })
        .collect()
}

fn lncosh_at_zero(order: usize) -> Vec<f64> {
    UnivariateFn::LnCosh
        .taylor(0.0, order)
        .expect("expansion about zero is always in domain")
}
