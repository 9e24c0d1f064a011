//! Small least-squares helpers shared by the audit modules.

/// Ordinary least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Largest positive residual y_i - fit(x_i); signed, so a perfectly
    /// dominated data set reports a non-positive value.
    pub max_residual: f64,
    /// Root-mean-square residual.
    pub rms_residual: f64,
}

/// Fit a line through `(x, y)` pairs. Panics on fewer than two points or a
/// degenerate abscissa spread; callers validate their sample sets first.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "line fit needs at least two points");
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
    }
    assert!(sxx > 0.0, "degenerate abscissae in line fit");
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let mut max_residual = f64::NEG_INFINITY;
    let mut ss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let r = y - (intercept + slope * x);
        max_residual = max_residual.max(r);
        ss += r * r;
    }
    LineFit {
        slope,
        intercept,
        max_residual,
        rms_residual: (ss / n).sqrt(),
    }
}

/// Slope of log(y) against log(x); the power-law exponent of y ~ x^p.
pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> LineFit {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_line(&lx, &ly)
}
