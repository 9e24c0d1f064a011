//! Shared report types emitted by the audit routines.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_pass(self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Pass => write!(f, "pass"),
            Verdict::Fail => write!(f, "fail"),
        }
    }
}

/// Outcome of a pointwise inequality audit over a sample grid.
///
/// `worst_point` carries the coordinates of the argmin margin; for audits over
/// space-time grids the first entry is the time. `worst_margin` is signed:
/// non-negative means the inequality held everywhere sampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginReport {
    pub verdict: Verdict,
    pub worst_point: Vec<f64>,
    pub worst_margin: f64,
    pub grid_descriptor: String,
}

impl MarginReport {
    pub fn new(worst_point: Vec<f64>, worst_margin: f64, grid_descriptor: String) -> Self {
        MarginReport {
            verdict: Verdict::from_bool(worst_margin >= 0.0),
            worst_point,
            worst_margin,
            grid_descriptor,
        }
    }

    /// Fold a stream of (point, margin) samples into a report.
    pub fn from_samples<I>(samples: I, grid_descriptor: String) -> Option<Self>
    where
        I: IntoIterator<Item = (Vec<f64>, f64)>,
    {
        let mut worst: Option<(Vec<f64>, f64)> = None;
        for (pt, margin) in samples {
            match &worst {
                Some((_, m)) if *m <= margin => {}
                _ => worst = Some((pt, margin)),
            }
        }
        worst.map(|(pt, m)| MarginReport::new(pt, m, grid_descriptor))
    }
}
