//! Experiment configuration: TOML schema, validation, and the resolved-config
//! hash that every artifact embeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use schrokernel_core::{admissible_params, CoefficientField, EvolverConfig, WeightKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for the randomized probe profiles.
    #[serde(default)]
    pub seed: u64,
    pub field: FieldBlock,
    #[serde(default)]
    pub discretization: DiscretizationBlock,
    #[serde(default)]
    pub lyapunov: LyapunovBlock,
    #[serde(default)]
    pub bounds: BoundsBlock,
    #[serde(default)]
    pub spectral: SpectralBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldBlock {
    /// One of "poly", "exp", "identity". Custom fields carry closures and
    /// can only be driven through the library API.
    pub family: String,
    pub m: Option<f64>,
    pub s: Option<f64>,
    #[serde(default = "one_usize")]
    pub d: usize,
    /// Ellipticity floor recorded on the field; the built-in families all
    /// satisfy q >= 1, so the floor may only be lowered.
    #[serde(default = "one_f64")]
    pub eta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscretizationBlock {
    pub rho: f64,
    pub h: f64,
    pub tau: f64,
    /// "be", "be-extrapolated", or "crank-nicolson".
    pub scheme: String,
    /// Holdout refinement: the verification mesh is (rho * r, h / r).
    pub rho_refinement: f64,
}

impl Default for DiscretizationBlock {
    fn default() -> Self {
        DiscretizationBlock {
            rho: 6.0,
            h: 0.05,
            tau: 2.5e-3,
            scheme: "be-extrapolated".into(),
            rho_refinement: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovBlock {
    /// Ascending weight strengths; audits that need a single weight use the
    /// first entry, the three-weight hypothesis audit needs all three.
    pub eps: Vec<f64>,
    pub alpha: f64,
    /// Radial growth exponent; omitted means the family canonical value.
    pub beta: Option<f64>,
    /// Rate-exponent knob; omitted means the midpoint of its open interval.
    pub gamma: Option<f64>,
    /// Drift threshold the radial decay proxy is compared against.
    pub lambda: f64,
    /// Comparison-weight strength; must exceed the last chain entry.
    pub eps_z: Option<f64>,
    /// Asserted bound for the comparison-weight drift audit; omitted means
    /// the audit only checks finiteness.
    pub drift_bound: Option<f64>,
}

impl Default for LyapunovBlock {
    fn default() -> Self {
        LyapunovBlock {
            eps: vec![0.3, 0.5, 0.7],
            alpha: 0.5,
            beta: None,
            gamma: None,
            lambda: 1.0,
            eps_z: None,
            drift_bound: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsBlock {
    pub k: f64,
    pub calibration_times: Vec<f64>,
    pub holdout_times: Vec<f64>,
}

impl Default for BoundsBlock {
    fn default() -> Self {
        BoundsBlock {
            k: 4.0,
            calibration_times: vec![0.5, 1.0],
            holdout_times: vec![0.25, 0.75],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralBlock {
    pub count: usize,
    /// Domain radii for the saturation check; empty skips it.
    pub rho_list: Vec<f64>,
    /// Ground-state envelope fit; needs rho > 2 so the window 1 <= |x| <=
    /// rho/2 is non-degenerate.
    pub decay: bool,
    /// Envelope abscissa: "power" (|x|^p) or "integral" (radial profile of
    /// the exponential family).
    pub decay_shape: String,
    pub decay_power: f64,
}

impl Default for SpectralBlock {
    fn default() -> Self {
        SpectralBlock {
            count: 5,
            rho_list: Vec::new(),
            decay: true,
            decay_shape: "power".into(),
            decay_power: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: "out".into() }
    }
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply command-line overrides; the hash is taken after resolution so
    /// that artifacts record what actually ran.
    pub fn resolved(mut self, out: Option<&Path>, seed: Option<u64>) -> Self {
        if let Some(dir) = out {
            self.output.dir = dir.to_path_buf();
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    /// Hash of the resolved configuration; identical configs hash equal
    /// regardless of TOML formatting.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Structural checks shared by every pipeline; the per-module parameter
    /// gates run later, inside the library constructors.
    pub fn validate(&self) -> Result<()> {
        match self.field.family.as_str() {
            "poly" | "exp" => {
                if self.field.m.is_none() || self.field.s.is_none() {
                    bail!("field family \"{}\" requires m and s", self.field.family);
                }
            }
            "identity" => {}
            "custom" => {
                bail!("custom fields carry closures and can only be driven through the library API")
            }
            other => bail!("unknown field family \"{other}\" (expected poly, exp, or identity)"),
        }
        if !(self.field.eta > 0.0 && self.field.eta <= 1.0) {
            bail!("invalid parameter eta: requires 0 < eta <= 1 (built-in families have q >= 1)");
        }
        let d = &self.discretization;
        if !(d.rho > 0.0) || !(d.h > 0.0) || !(d.tau > 0.0) {
            bail!("invalid discretization: requires rho > 0, h > 0, tau > 0");
        }
        if !(d.rho_refinement >= 1.0) {
            bail!("invalid parameter rho_refinement: requires rho_refinement >= 1");
        }
        self.evolver()?;
        let eps = &self.lyapunov.eps;
        if eps.is_empty() || eps.len() > 3 || eps.len() == 2 {
            bail!("invalid parameter eps: requires one entry or an ascending chain of three");
        }
        if eps.iter().any(|e| !(*e > 0.0)) || eps.windows(2).any(|w| !(w[0] < w[1])) {
            bail!("invalid parameter eps: requires 0 < eps_0 < eps_1 < eps_2");
        }
        if let Some(ez) = self.lyapunov.eps_z {
            if !(ez > *eps.last().unwrap()) {
                bail!("invalid parameter eps_z: requires eps_z > the last eps entry");
            }
        }
        for (name, times) in [
            ("calibration_times", &self.bounds.calibration_times),
            ("holdout_times", &self.bounds.holdout_times),
        ] {
            if times.is_empty() {
                bail!("invalid parameter {name}: requires at least one time");
            }
            if times.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
                bail!("invalid parameter {name}: requires t in (0, 1]");
            }
        }
        if self.spectral.count == 0 {
            bail!("invalid parameter count: requires count >= 1");
        }
        if !(self.spectral.decay_power > 0.0) {
            bail!("invalid parameter decay_power: requires decay_power > 0");
        }
        if !matches!(self.spectral.decay_shape.as_str(), "power" | "integral") {
            bail!(
                "unknown decay_shape \"{}\" (expected power or integral)",
                self.spectral.decay_shape
            );
        }
        Ok(())
    }

    pub fn build_field(&self) -> Result<CoefficientField> {
        let f = &self.field;
        let mut field = match f.family.as_str() {
            "poly" => CoefficientField::polynomial(f.m.unwrap(), f.s.unwrap(), f.d)?,
            "exp" => CoefficientField::exponential(f.m.unwrap(), f.s.unwrap(), f.d)?,
            "identity" => match f.s {
                Some(s) => CoefficientField::identity_with_potential(f.d, s)?,
                None => CoefficientField::identity(f.d)?,
            },
            other => bail!("unknown field family \"{other}\""),
        };
        field.eta = f.eta;
        Ok(field)
    }

    pub fn evolver(&self) -> Result<EvolverConfig> {
        let d = &self.discretization;
        Ok(match d.scheme.as_str() {
            "be" => EvolverConfig::backward_euler(d.tau),
            "be-extrapolated" => EvolverConfig::extrapolated(d.tau),
            "crank-nicolson" => EvolverConfig::crank_nicolson(d.tau),
            other => bail!(
                "unknown scheme \"{other}\" (expected be, be-extrapolated, or crank-nicolson)"
            ),
        })
    }

    /// Weight kind and growth exponent: the family canonical pair unless the
    /// config pins beta explicitly.
    pub fn weight_shape(&self, field: &CoefficientField) -> Result<(WeightKind, f64)> {
        match admissible_params(field) {
            Ok(region) => Ok((region.kind, self.lyapunov.beta.unwrap_or(region.beta))),
            Err(_) => match self.lyapunov.beta {
                Some(beta) => Ok((WeightKind::PolyExp, beta)),
                None => bail!(
                    "field family \"{}\" has no canonical weight; set lyapunov.beta",
                    self.field.family
                ),
            },
        }
    }

    pub fn eps_chain(&self) -> Result<[f64; 3]> {
        let eps = &self.lyapunov.eps;
        if eps.len() != 3 {
            bail!("invalid parameter eps: this audit requires the full chain eps_0 < eps_1 < eps_2");
        }
        Ok([eps[0], eps[1], eps[2]])
    }
}
