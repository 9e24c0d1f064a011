//! Time-dependent Lyapunov weights W(t,x) and their drift audits.
//!
//! A weight is e^{eps t^alpha P(x)} for a radial profile P: either the
//! smoothed power |x|_*^beta or the exponential radial integral. The drift
//! condition under audit is (d/dt + A) W <= h(t) W with h(t) = C t^p
//! integrable on (0,1); all evaluations run on log W, so W itself is never
//! formed.

use crate::coefficients::{directions, CoefficientField, Family, RadialProfile};
use crate::error::{CoreError, Result};
use crate::report::MarginReport;
use serde::{Deserialize, Serialize};

/// Which weight family a spec realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    /// log W = eps t^alpha |x|_*^beta
    PolyExp,
    /// log W = eps t^alpha int_0^{|x|_*} e^{tau^beta/2} dtau
    ExpIntegral,
}

/// A concrete Lyapunov weight, admissibility-checked against the field it
/// will be audited on. Weights on model fields carry the field's growth
/// parameters; the rate-exponent formulas need them.
#[derive(Debug, Clone)]
pub struct LyapunovSpec {
    pub kind: WeightKind,
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    profile: RadialProfile,
    /// (m, s) of the linked model family, when there is one.
    linked: Option<(f64, f64)>,
}

impl LyapunovSpec {
    /// eps = 0 is allowed and degenerates to W = 1; the admissibility gates
    /// on (alpha, beta) still apply so that downstream formulas are defined.
    pub fn new(
        kind: WeightKind,
        eps: f64,
        alpha: f64,
        beta: f64,
        field: &CoefficientField,
    ) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(CoreError::invalid("eps", "eps >= 0"));
        }
        if !(alpha > 0.0) {
            return Err(CoreError::invalid("alpha", "alpha > 0"));
        }
        let linked = match (&field.family, kind) {
            (Family::PolynomialIsotropic { m, s }, WeightKind::PolyExp) => {
                if !(beta > (2.0 - m).max(0.0)) {
                    return Err(CoreError::invalid("beta", "beta > max(2-m, 0)"));
                }
                if !(alpha > beta / (beta + m - 2.0)) {
                    return Err(CoreError::invalid("alpha", "alpha > beta/(beta+m-2)"));
                }
                Some((*m, *s))
            }
            (Family::ExponentialIsotropic { m, s }, WeightKind::ExpIntegral) => {
                if !(0.5 * m + 1.0 <= beta && beta <= *m) {
                    return Err(CoreError::invalid("beta", "m/2 + 1 <= beta <= m"));
                }
                if !(alpha > (2.0 * beta + m - 2.0) / (2.0 * m)) {
                    return Err(CoreError::invalid(
                        "alpha",
                        "alpha > (2*beta + m - 2)/(2m)",
                    ));
                }
                Some((*m, *s))
            }
            (Family::PolynomialIsotropic { .. }, WeightKind::ExpIntegral)
            | (Family::ExponentialIsotropic { .. }, WeightKind::PolyExp) => {
                return Err(CoreError::Incompatible(
                    "weight family does not match the coefficient family".into(),
                ));
            }
            // identity and custom fields carry no growth exponents; any
            // positive beta is accepted and the audits decide the rest
            _ => {
                if !(beta > 0.0) {
                    return Err(CoreError::invalid("beta", "beta > 0"));
                }
                None
            }
        };
        let profile = match kind {
            WeightKind::PolyExp => RadialProfile::power(beta)?,
            WeightKind::ExpIntegral => RadialProfile::integral(beta)?,
        };
        Ok(LyapunovSpec {
            kind,
            eps,
            alpha,
            beta,
            profile,
            linked,
        })
    }

    pub fn linked_params(&self) -> Option<(f64, f64)> {
        self.linked
    }

    /// log W(t, x); t = 0 gives exactly 0.
    pub fn log_w(&self, t: f64, x: &[f64]) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        self.eps * t.powf(self.alpha) * self.profile.value(x)
    }

    fn ratio_parts(&self, t: f64, x: &[f64]) -> RatioParts {
        let p = self.profile.value(x);
        let grad = self.profile.grad(x);
        let lap = self.profile.laplacian(x);
        let ta = t.powf(self.alpha);
        let scale = self.eps * ta;
        RatioParts {
            dt: self.eps * self.alpha * t.powf(self.alpha - 1.0) * p,
            grad: grad.iter().map(|g| scale * g).collect(),
            lap: scale * lap,
        }
    }

    /// Admissible open interval for the auxiliary exponent gamma.
    pub fn gamma_interval(&self) -> Result<(f64, f64)> {
        let (m, _) = self.linked.ok_or_else(|| {
            CoreError::Incompatible("rate exponents require a linked model family".into())
        })?;
        Ok(match self.kind {
            WeightKind::PolyExp => (
                1.0 / (self.beta + m - 2.0),
                (self.alpha + 1.0) / (2.0 * self.beta + m - 2.0),
            ),
            WeightKind::ExpIntegral => (
                1.0 / m,
                (self.alpha + 1.0) / (self.beta + 1.5 * m - 1.0),
            ),
        })
    }

    pub fn default_gamma(&self) -> Result<f64> {
        let (lo, hi) = self.gamma_interval()?;
        Ok(0.5 * (lo + hi))
    }

    /// Rate exponent p for a given gamma.
    pub fn rate_exponent(&self, gamma: f64) -> Result<f64> {
        let (lo, hi) = self.gamma_interval()?;
        if !(gamma > lo && gamma < hi) {
            return Err(CoreError::invalid(
                "gamma",
                "gamma inside its admissible open interval",
            ));
        }
        let (m, _) = self.linked.unwrap();
        Ok(match self.kind {
            WeightKind::PolyExp => self.alpha - gamma * (2.0 * self.beta + m - 2.0),
            WeightKind::ExpIntegral => self.alpha - gamma * (self.beta + 1.5 * m - 1.0),
        })
    }
}

struct RatioParts {
    dt: f64,
    grad: Vec<f64>,
    lap: f64,
}

/// Integrable rate h(t) = C t^p bounding the Lyapunov drift on (0,1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateFunction {
    pub c: f64,
    pub p: f64,
    pub gamma: f64,
}

impl RateFunction {
    pub fn new(c: f64, p: f64, gamma: f64) -> Result<Self> {
        if !(c >= 0.0) {
            return Err(CoreError::invalid("C", "C >= 0"));
        }
        if !(p > -1.0) {
            return Err(CoreError::invalid("p", "p > -1 (integrable rate)"));
        }
        Ok(RateFunction { c, p, gamma })
    }

    pub fn h(&self, t: f64) -> f64 {
        self.c * t.powf(self.p)
    }

    pub fn with_c(&self, c: f64) -> Self {
        RateFunction { c, ..*self }
    }
}

/// exp(int_0^1 h) = exp(C/(p+1)): the kernel-weight budget constant.
pub fn xi_budget(rate: &RateFunction) -> Result<f64> {
    if !(rate.p > -1.0) {
        return Err(CoreError::invalid("p", "p > -1 (integrable rate)"));
    }
    Ok((rate.c / (rate.p + 1.0)).exp())
}

pub type DriftField<'a> = &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync);

/// (d/dt + A) W / W at (t, x), assembled from closed-form derivatives of
/// log W: dt(logW) + q lap(logW) + q |grad logW|^2 + G . grad logW - V.
/// An optional drift vector field is added to G.
pub fn apply_l_ratio_with_drift(
    spec: &LyapunovSpec,
    field: &CoefficientField,
    t: f64,
    x: &[f64],
    drift: Option<DriftField>,
) -> Result<f64> {
    let parts = spec.ratio_parts(t, x);
    let q = field.q_scalar(x)?;
    let v = field.eval_v(x)?;
    let mut g = field.eval_g(x)?;
    if let Some(f) = drift {
        for (gi, fi) in g.iter_mut().zip(f(x)) {
            *gi += fi;
        }
    }
    let gsq: f64 = parts.grad.iter().map(|w| w * w).sum();
    let gdot: f64 = g.iter().zip(&parts.grad).map(|(a, b)| a * b).sum();
    Ok(parts.dt + q * parts.lap + q * gsq + gdot - v)
}

pub fn apply_l_ratio(
    spec: &LyapunovSpec,
    field: &CoefficientField,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    apply_l_ratio_with_drift(spec, field, t, x, None)
}

/// (d/dt + eta Laplace - V) W / W: the comparison form of the drift
/// condition, with the diffusion flattened to eta I and no divergence term.
pub fn apply_eta_ratio(
    spec: &LyapunovSpec,
    field: &CoefficientField,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let parts = spec.ratio_parts(t, x);
    let v = field.eval_v(x)?;
    let gsq: f64 = parts.grad.iter().map(|w| w * w).sum();
    Ok(parts.dt + field.eta * (parts.lap + gsq) - v)
}

/// Audit grid over (t, x): t linear in [t_min, 1 - t_min], x radial along
/// axis and diagonal rays up to r_audit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuditGrid {
    pub t_min: f64,
    pub nt: usize,
    pub r_audit: f64,
    pub nx: usize,
}

impl Default for AuditGrid {
    fn default() -> Self {
        AuditGrid {
            t_min: 1e-3,
            nt: 24,
            r_audit: 6.0,
            nx: 48,
        }
    }
}

impl AuditGrid {
    pub fn refined(&self, factor: usize) -> Self {
        AuditGrid {
            nt: self.nt * factor,
            nx: self.nx * factor,
            ..*self
        }
    }

    fn nodes(&self, d: usize) -> Vec<(f64, Vec<f64>)> {
        let dirs = directions(d);
        let mut out = Vec::new();
        for i in 0..self.nt {
            let t = self.t_min
                + (1.0 - 2.0 * self.t_min) * i as f64 / (self.nt.max(2) - 1) as f64;
            for j in 0..=self.nx {
                let r = self.r_audit * j as f64 / self.nx as f64;
                for dir in &dirs {
                    out.push((t, dir.iter().map(|&c| c * r).collect()));
                    if r == 0.0 {
                        break;
                    }
                }
            }
        }
        out
    }

    fn descriptor(&self, d: usize) -> String {
        format!(
            "t in [{}, {}] x{} nodes, |x| <= {} x{} nodes, d={}",
            self.t_min,
            1.0 - self.t_min,
            self.nt,
            self.r_audit,
            self.nx,
            d
        )
    }
}

/// Check both drift inequalities against h(t) on the grid. Margins are
/// h(t) - ratio; worst_point is [t, x...].
pub fn audit_lyapunov(
    spec: &LyapunovSpec,
    field: &CoefficientField,
    rate: &RateFunction,
    grid: &AuditGrid,
) -> Result<MarginReport> {
    let mut samples = Vec::new();
    for (t, x) in grid.nodes(field.d) {
        let h = rate.h(t);
        let l = apply_l_ratio(spec, field, t, &x)?;
        let e = apply_eta_ratio(spec, field, t, &x)?;
        let mut point = vec![t];
        point.extend_from_slice(&x);
        samples.push((point, h - l.max(e)));
    }
    MarginReport::from_samples(samples, grid.descriptor(field.d))
        .ok_or_else(|| CoreError::EmptySamples("empty audit grid".into()))
}

/// Smallest C (times a 1.25 safety factor) such that both drift ratios are
/// below C t^p on the calibration grid. Specs without a linked model family
/// calibrate a constant rate (p = 0).
pub fn calibrate_rate(
    spec: &LyapunovSpec,
    field: &CoefficientField,
    gamma: f64,
    grid: &AuditGrid,
) -> Result<RateFunction> {
    let p = if spec.linked_params().is_some() {
        spec.rate_exponent(gamma)?
    } else {
        0.0
    };
    if !(p > -1.0) {
        return Err(CoreError::invalid("p", "p > -1 (integrable rate)"));
    }
    let mut c_min: f64 = 0.0;
    for (t, x) in grid.nodes(field.d) {
        let l = apply_l_ratio(spec, field, t, &x)?;
        let e = apply_eta_ratio(spec, field, t, &x)?;
        c_min = c_min.max(l.max(e) / t.powf(p));
    }
    RateFunction::new(1.25 * c_min, p, gamma)
}

/// Radial decay proxy for the model drift conditions on polynomial fields:
/// |x|^{1-beta-m} (G.x/|x| - V/(eps beta |x|^{beta-1})) along a ray. With
/// the canonical envelope beta this converges to m|x|^{-beta} - 1/(eps beta),
/// strictly below -1 for large |x| when eps beta < 1.
pub fn limsup_proxy(spec: &LyapunovSpec, field: &CoefficientField, r: f64) -> Result<f64> {
    if !(r >= 1.0) {
        return Err(CoreError::invalid("r", "r >= 1 (asymptotic regime)"));
    }
    let (m, _) = spec.linked_params().ok_or_else(|| {
        CoreError::Incompatible("limsup proxy requires a linked model family".into())
    })?;
    let mut x = vec![0.0; field.d];
    x[0] = r;
    let g = field.eval_g(&x)?;
    let v = field.eval_v(&x)?;
    let radial_g = g[0];
    Ok(r.powf(1.0 - spec.beta - m)
        * (radial_g - v / (spec.eps * spec.beta * r.powf(spec.beta - 1.0))))
}

/// Radius beyond which the proxy is guaranteed below -1 for the polynomial
/// model: solves m K^{-beta} = 1/(eps beta) - 1.
pub fn proxy_threshold(spec: &LyapunovSpec) -> Result<f64> {
    let (m, _) = spec.linked_params().ok_or_else(|| {
        CoreError::Incompatible("limsup proxy requires a linked model family".into())
    })?;
    let eb = spec.eps * spec.beta;
    if !(eb > 0.0 && eb < 1.0) {
        return Err(CoreError::invalid("eps*beta", "0 < eps*beta < 1"));
    }
    Ok((m * eb / (1.0 - eb)).powf(1.0 / spec.beta).max(1.0))
}

/// Admissible parameter region for a model family, as used by the kernel
/// envelopes: the canonical beta, the open alpha lower bound, the eps-chain
/// cap, and the beta interval where one exists.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParamRegion {
    pub kind: WeightKind,
    pub beta: f64,
    pub beta_interval: (f64, f64),
    pub alpha_min: f64,
    /// Upper bound for the whole eps chain (polynomial family only).
    pub eps_sup: Option<f64>,
}

pub fn admissible_params(field: &CoefficientField) -> Result<ParamRegion> {
    match &field.family {
        Family::PolynomialIsotropic { m, s } => {
            let beta = 0.5 * (s - m + 2.0);
            Ok(ParamRegion {
                kind: WeightKind::PolyExp,
                beta,
                beta_interval: ((2.0 - m).max(0.0), f64::INFINITY),
                alpha_min: beta / (beta + m - 2.0),
                eps_sup: Some(1.0 / beta),
            })
        }
        Family::ExponentialIsotropic { m, s } => {
            let lo = 0.5 * m + 1.0;
            let hi = *m;
            let beta = 0.5 * (lo + hi);
            let _ = s;
            Ok(ParamRegion {
                kind: WeightKind::ExpIntegral,
                beta,
                beta_interval: (lo, hi),
                alpha_min: (2.0 * beta + m - 2.0) / (2.0 * m),
                eps_sup: None,
            })
        }
        _ => Err(CoreError::Incompatible(
            "parameter regions are defined for the model families only".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientField;
    use approx::assert_relative_eq;

    fn poly44() -> CoefficientField {
        CoefficientField::polynomial(4.0, 4.0, 2).unwrap()
    }

    fn poly44_spec() -> LyapunovSpec {
        LyapunovSpec::new(WeightKind::PolyExp, 0.3, 0.5, 1.0, &poly44()).unwrap()
    }

    #[test]
    fn log_w_closed_form_values() {
        let f1 = CoefficientField::polynomial(4.0, 4.0, 1).unwrap();
        let spec = LyapunovSpec::new(WeightKind::PolyExp, 0.5, 0.5, 1.0, &f1).unwrap();
        assert_relative_eq!(spec.log_w(1.0, &[2.0]), 1.0, max_relative = 1e-14);
        assert_eq!(spec.log_w(0.0, &[2.0]), 0.0);

        let fe = CoefficientField::exponential(2.0, 3.0, 1).unwrap();
        let spec = LyapunovSpec::new(WeightKind::ExpIntegral, 1.0, 2.0, 2.0, &fe).unwrap();
        assert_relative_eq!(
            spec.log_w(1.0, &[1.0]),
            1.194957661911128,
            max_relative = 1e-9
        );
    }

    #[test]
    fn l_ratio_matches_hand_expansion_on_free_field() {
        // Q = I, V = 0, log W = eps t^alpha x^2:
        // ratio = eps alpha t^{alpha-1} x^2 + 2 eps t^alpha + 4 eps^2 t^{2alpha} x^2
        let f = CoefficientField::identity(1).unwrap();
        let (eps, alpha) = (0.4, 0.7);
        let spec = LyapunovSpec::new(WeightKind::PolyExp, eps, alpha, 2.0, &f).unwrap();
        let (t, x) = (0.5f64, 2.0f64);
        let expect = eps * alpha * t.powf(alpha - 1.0) * x * x
            + 2.0 * eps * t.powf(alpha)
            + 4.0 * eps * eps * t.powf(2.0 * alpha) * x * x;
        let got = apply_l_ratio(&spec, &f, t, &[x]).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-13);
        // eta ratio coincides on the free field
        let eta = apply_eta_ratio(&spec, &f, t, &[x]).unwrap();
        assert_relative_eq!(eta, expect, max_relative = 1e-13);
    }

    #[test]
    fn eps_zero_degenerates_to_minus_potential() {
        let f = poly44();
        let spec = LyapunovSpec::new(WeightKind::PolyExp, 0.0, 0.5, 1.0, &f).unwrap();
        let got = apply_l_ratio(&spec, &f, 0.5, &[3.0, 0.0]).unwrap();
        assert_relative_eq!(got, -81.0, max_relative = 1e-14);
    }

    #[test]
    fn ratios_match_finite_differences_of_log_w() {
        // second-order differences of log W reproduce every derivative the
        // closed forms use; agreement to 1e-5 relative on a fixed audit set
        let cases: Vec<(CoefficientField, LyapunovSpec)> = vec![
            (poly44(), poly44_spec()),
            {
                let f = CoefficientField::exponential(2.0, 3.0, 2).unwrap();
                let s = LyapunovSpec::new(WeightKind::ExpIntegral, 0.3, 1.5, 2.0, &f).unwrap();
                (f, s)
            },
        ];
        for (f, spec) in &cases {
            for &(t, x0, x1) in &[
                (0.5, 3.0, 0.0),
                (0.5, 0.4, 0.3),
                (0.25, 1.5, -1.0),
                (0.75, 2.0, 2.0),
            ] {
                let x = [x0, x1];
                let ht = 1e-6 * t;
                let hx = 1e-5;
                // the radial integral carries 1e-10 relative quadrature noise;
                // second differences need a step above that noise floor
                let hl = 3e-3;
                let dt = (spec.log_w(t + ht, &x) - spec.log_w(t - ht, &x)) / (2.0 * ht);
                let mut grad = [0.0; 2];
                let mut lap = 0.0;
                for j in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += hx;
                    xm[j] -= hx;
                    grad[j] = (spec.log_w(t, &xp) - spec.log_w(t, &xm)) / (2.0 * hx);
                    let mut lp = x;
                    let mut lm = x;
                    lp[j] += hl;
                    lm[j] -= hl;
                    lap += (spec.log_w(t, &lp) - 2.0 * spec.log_w(t, &x)
                        + spec.log_w(t, &lm))
                        / (hl * hl);
                }
                let q = f.q_scalar(&x).unwrap();
                let v = f.eval_v(&x).unwrap();
                let g = f.eval_g(&x).unwrap();
                let gsq: f64 = grad.iter().map(|w| w * w).sum();
                let gdot: f64 = g.iter().zip(&grad).map(|(a, b)| a * b).sum();
                let fd_l = dt + q * lap + q * gsq + gdot - v;
                let fd_eta = dt + f.eta * (lap + gsq) - v;
                let l = apply_l_ratio(spec, f, t, &x).unwrap();
                let e = apply_eta_ratio(spec, f, t, &x).unwrap();
                assert_relative_eq!(l, fd_l, max_relative = 1e-5, epsilon = 1e-7);
                assert_relative_eq!(e, fd_eta, max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn drift_hook_adds_inner_product_with_gradient() {
        let f = poly44();
        let spec = poly44_spec();
        let (t, x) = (0.5, [2.0, 1.0]);
        let base = apply_l_ratio(&spec, &f, t, &x).unwrap();
        let drift = |_: &[f64]| vec![1.5, -0.5];
        let with = apply_l_ratio_with_drift(&spec, &f, t, &x, Some(&drift)).unwrap();
        // extra term is F . grad log W with grad log W = eps t^a * 2 phi' x
        let gl = spec.eps * t.powf(spec.alpha); // beta = 1: grad factor = u^{-1/2}
        let u: f64 = 5.0;
        let grad = [gl * x[0] / u.sqrt(), gl * x[1] / u.sqrt()];
        let expect = base + 1.5 * grad[0] - 0.5 * grad[1];
        assert_relative_eq!(with, expect, max_relative = 1e-12);
    }

    #[test]
    fn weight_ordering_and_monotonicity() {
        let f = poly44();
        let chain: Vec<LyapunovSpec> = [0.3, 0.5, 0.7]
            .iter()
            .map(|&e| LyapunovSpec::new(WeightKind::PolyExp, e, 0.5, 1.0, &f).unwrap())
            .collect();
        for &t in &[0.1, 0.5, 0.9] {
            for i in 0..10 {
                let x = [0.4 * i as f64, 0.2 * i as f64];
                let logs: Vec<f64> = chain.iter().map(|s| s.log_w(t, &x)).collect();
                assert!(logs[0] <= logs[1] && logs[1] <= logs[2]);
                assert!(logs[0] >= 0.0, "W >= 1 always");
            }
        }
        // strict growth in t and |x| beyond the unit ball
        let s = &chain[0];
        assert!(s.log_w(0.3, &[2.0, 0.0]) < s.log_w(0.6, &[2.0, 0.0]));
        assert!(s.log_w(0.5, &[1.5, 0.0]) < s.log_w(0.5, &[2.5, 0.0]));
    }

    #[test]
    fn admissibility_gates() {
        let f = poly44();
        // alpha at the open bound beta/(beta+m-2) = 1/3 is rejected
        assert!(LyapunovSpec::new(WeightKind::PolyExp, 0.3, 1.0 / 3.0, 1.0, &f).is_err());
        // beta gate for m < 2: beta must exceed 2 - m
        let flow = CoefficientField::polynomial(1.5, 1.0, 1).unwrap();
        let err =
            LyapunovSpec::new(WeightKind::PolyExp, 0.3, 0.9, 0.3, &flow).unwrap_err();
        assert!(err.to_string().contains("max(2-m, 0)"), "{err}");
        // family mismatch
        let fe = CoefficientField::exponential(2.0, 3.0, 1).unwrap();
        assert!(LyapunovSpec::new(WeightKind::PolyExp, 0.3, 0.5, 1.0, &fe).is_err());
        // exponential beta interval
        let err = LyapunovSpec::new(WeightKind::ExpIntegral, 0.3, 1.5, 1.5, &fe).unwrap_err();
        assert!(err.to_string().contains("m/2 + 1 <= beta <= m"), "{err}");
    }

    #[test]
    fn parameter_region_examples() {
        let r = admissible_params(&poly44()).unwrap();
        assert_eq!(r.beta, 1.0);
        assert_relative_eq!(r.alpha_min, 1.0 / 3.0, max_relative = 1e-15);
        assert_eq!(r.eps_sup, Some(1.0));

        let fe = CoefficientField::exponential(2.0, 3.0, 1).unwrap();
        let r = admissible_params(&fe).unwrap();
        assert_eq!(r.beta_interval, (2.0, 2.0));
        assert_eq!(r.beta, 2.0);
        assert_relative_eq!(r.alpha_min, 1.0, max_relative = 1e-15);

        assert!(admissible_params(&CoefficientField::identity(1).unwrap()).is_err());
    }

    #[test]
    fn gamma_interval_and_rate_exponent() {
        let spec = poly44_spec();
        let (lo, hi) = spec.gamma_interval().unwrap();
        assert_relative_eq!(lo, 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(hi, 0.375, max_relative = 1e-15);
        let g = spec.default_gamma().unwrap();
        assert_relative_eq!(g, (1.0 / 3.0 + 0.375) / 2.0, max_relative = 1e-15);
        let p = spec.rate_exponent(g).unwrap();
        assert!(p > -1.0 && p < 0.0, "p = {p}");
        // gamma outside the open interval is rejected
        assert!(spec.rate_exponent(0.375).is_err());
        assert!(spec.rate_exponent(1.0).is_err());
    }

    #[test]
    fn xi_budget_closed_forms() {
        let r = RateFunction::new(2.0, 0.0, 0.5).unwrap();
        assert_relative_eq!(xi_budget(&r).unwrap(), 2f64.exp(), max_relative = 1e-14);
        let r = RateFunction::new(0.0, 0.0, 0.5).unwrap();
        assert_eq!(xi_budget(&r).unwrap(), 1.0);
        let r = RateFunction::new(1.0, -0.5, 0.5).unwrap();
        assert_relative_eq!(xi_budget(&r).unwrap(), 2f64.exp(), max_relative = 1e-14);
        assert!(RateFunction::new(1.0, -1.0, 0.5).is_err());
    }

    #[test]
    fn calibration_is_zero_for_trivial_weight_on_free_field() {
        let f = CoefficientField::identity(2).unwrap();
        let spec = LyapunovSpec::new(WeightKind::PolyExp, 0.0, 0.5, 2.0, &f).unwrap();
        let rate = calibrate_rate(&spec, &f, 0.5, &AuditGrid::default()).unwrap();
        assert_eq!(rate.c, 0.0);
        assert_eq!(xi_budget(&rate).unwrap(), 1.0);
    }

    #[test]
    fn calibrated_rate_passes_audit_and_zero_rate_fails() {
        let f = poly44();
        let spec = poly44_spec();
        let gamma = spec.default_gamma().unwrap();
        let grid = AuditGrid {
            nt: 12,
            nx: 24,
            ..AuditGrid::default()
        };
        let rate = calibrate_rate(&spec, &f, gamma, &grid).unwrap();
        assert!(rate.c.is_finite() && rate.c > 0.0);
        let rep = audit_lyapunov(&spec, &f, &rate, &grid).unwrap();
        assert!(rep.verdict.is_pass(), "worst margin {}", rep.worst_margin);

        // C = 0 with a nontrivial weight on a potential-free field must fail:
        // the time-derivative term is strictly positive
        let free = CoefficientField::identity(1).unwrap();
        let s = LyapunovSpec::new(WeightKind::PolyExp, 0.3, 0.5, 2.0, &free).unwrap();
        let zero = RateFunction::new(0.0, 0.0, 0.5).unwrap();
        let rep = audit_lyapunov(&s, &free, &zero, &AuditGrid::default()).unwrap();
        assert!(!rep.verdict.is_pass());
        assert!(rep.worst_margin < 0.0);
    }

    #[test]
    fn calibration_stable_under_refinement() {
        let f = poly44();
        let spec = poly44_spec();
        let gamma = spec.default_gamma().unwrap();
        let grid = AuditGrid {
            nt: 12,
            nx: 24,
            ..AuditGrid::default()
        };
        let c0 = calibrate_rate(&spec, &f, gamma, &grid).unwrap().c;
        let c1 = calibrate_rate(&spec, &f, gamma, &grid.refined(2)).unwrap().c;
        assert!((c1 - c0).abs() / c0 < 0.05, "c0 = {c0}, c1 = {c1}");
    }

    #[test]
    fn exponential_family_calibration_is_finite() {
        let f = CoefficientField::exponential(2.0, 3.0, 1).unwrap();
        let spec = LyapunovSpec::new(WeightKind::ExpIntegral, 0.3, 1.5, 2.0, &f).unwrap();
        let rate = calibrate_rate(&spec, &f, 0.6, &AuditGrid {
            nt: 8,
            nx: 16,
            ..AuditGrid::default()
        })
        .unwrap();
        assert!(rate.c.is_finite());
        assert!(rate.p > -1.0);
    }

    #[test]
    fn limsup_proxy_below_minus_one_past_threshold() {
        let f = CoefficientField::polynomial(4.0, 4.0, 1).unwrap();
        let spec = LyapunovSpec::new(WeightKind::PolyExp, 0.3, 0.5, 1.0, &f).unwrap();
        let k = proxy_threshold(&spec).unwrap();
        let proxy = limsup_proxy(&spec, &f, 2.0 * k).unwrap();
        assert!(proxy < -1.0, "proxy {proxy} at r = {}", 2.0 * k);
        // closed-form cross-check: m r^{-beta} - 1/(eps beta)
        let r = 2.0 * k;
        let expect = 4.0 * r.powf(-1.0) - 1.0 / (0.3 * 1.0);
        assert_relative_eq!(proxy, expect, max_relative = 1e-12);
    }
}
