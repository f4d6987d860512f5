//! Experiment configuration and run manifests.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::galerkin::GalerkinProblem;
use crate::mesh::{build_mesh, Geometry, Mesh};
use crate::nonlinear::{LinearSolverConfig, NonlinearConfig};
use crate::postproc::Probe;
use crate::precond::PreconditionerSpec;
use crate::random_field::{KlMethod, StochasticViscosity, ViscosityParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Galerkin,
    Mc,
    Collocation,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "galerkin" => Ok(Method::Galerkin),
            "mc" => Ok(Method::Mc),
            "collocation" => Ok(Method::Collocation),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

fn default_geometry() -> Geometry {
    Geometry::obstacle_channel()
}

fn default_nx() -> usize {
    96
}

fn default_ny() -> usize {
    16
}

fn default_re() -> f64 {
    100.0
}

fn default_dim() -> usize {
    2
}

fn default_degree() -> usize {
    3
}

fn default_method() -> Method {
    Method::Galerkin
}

fn default_precond() -> String {
    "ahgs".into()
}

fn default_mc_samples() -> usize {
    1000
}

fn default_level() -> usize {
    4
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment. Physical parameters are nondimensional with mean
/// viscosity `1/re`; correlation lengths default to a quarter of the
/// domain extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_geometry")]
    pub geometry: Geometry,
    #[serde(default = "default_nx")]
    pub nx: usize,
    #[serde(default = "default_ny")]
    pub ny: usize,
    #[serde(default = "default_re")]
    pub re: f64,
    #[serde(default)]
    pub cov: f64,
    /// Stochastic dimension `N`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Solution degree `P`; the viscosity uses `2P`.
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub lx: Option<f64>,
    #[serde(default)]
    pub ly: Option<f64>,
    #[serde(default)]
    pub kl_method: KlMethod,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_precond")]
    pub preconditioner: String,
    #[serde(default)]
    pub truncation: Option<usize>,
    #[serde(default)]
    pub nonlinear: Option<NonlinearConfig>,
    #[serde(default)]
    pub probes: Vec<Probe>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_level")]
    pub smolyak_level: usize,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.re > 0.0) || !self.re.is_finite() {
            return Err(Error::Config(format!("Reynolds number must be positive, got {}", self.re)));
        }
        if !(0.0..=2.0).contains(&self.cov) {
            return Err(Error::Config(format!("coefficient of variation {} out of range [0, 2]", self.cov)));
        }
        if self.dim == 0 {
            return Err(Error::Config("stochastic dimension must be at least 1".into()));
        }
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Config("mesh needs at least 2 x 2 cells".into()));
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("Monte Carlo needs at least two samples".into()));
        }
        if self.smolyak_level == 0 {
            return Err(Error::Config("Smolyak level must be at least 1".into()));
        }
        self.precond_spec()?;
        self.nonlinear_config()?.validate()?;
        for l in [self.lx, self.ly].into_iter().flatten() {
            if !(l > 0.0) {
                return Err(Error::Config(format!("correlation length must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn mean_viscosity(&self) -> f64 {
        1.0 / self.re
    }

    pub fn coefficient_degree(&self) -> usize {
        2 * self.degree
    }

    pub fn correlation_lengths(&self) -> (f64, f64) {
        let b = self.geometry.bounds();
        (
            self.lx.unwrap_or(0.25 * (b.x1 - b.x0)),
            self.ly.unwrap_or(0.25 * (b.y1 - b.y0)),
        )
    }

    pub fn precond_spec(&self) -> Result<PreconditionerSpec> {
        let spec: PreconditionerSpec = self.preconditioner.parse()?;
        Ok(match self.truncation {
            Some(lt) => spec.with_truncation(lt),
            None => spec,
        })
    }

    /// The explicit nonlinear settings, or defaults with the Picard count
    /// chosen from the Reynolds number.
    pub fn nonlinear_config(&self) -> Result<NonlinearConfig> {
        let mut cfg = self.nonlinear.unwrap_or(NonlinearConfig {
            n_picard: NonlinearConfig::default_picard_steps(self.re),
            ..NonlinearConfig::default()
        });
        if self.nonlinear.is_none() || self.nonlinear.is_some_and(|n| n.linear == LinearSolverConfig::default()) {
            cfg.linear.precond = self.precond_spec()?;
        }
        Ok(cfg)
    }

    pub fn viscosity_params(&self) -> ViscosityParams {
        let (lx, ly) = self.correlation_lengths();
        ViscosityParams {
            mean: self.mean_viscosity(),
            cov: self.cov,
            lx,
            ly,
            dim: self.dim,
            degree: self.coefficient_degree(),
            kl_method: self.kl_method,
        }
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        build_mesh(&self.geometry, self.nx, self.ny)
    }

    /// Mesh, FE space, viscosity and Galerkin problem.
    pub fn setup(&self) -> Result<Setup> {
        let mesh = Arc::new(self.build_mesh()?);
        let visc = StochasticViscosity::lognormal(&mesh, &self.viscosity_params())?;
        let space = Arc::new(FemSpace::new(mesh.clone()));
        let problem = GalerkinProblem::new(space.clone(), &visc, self.degree)?;
        Ok(Setup {
            mesh,
            space,
            visc,
            problem,
        })
    }
}

pub struct Setup {
    pub mesh: Arc<Mesh>,
    pub space: Arc<FemSpace>,
    pub visc: StochasticViscosity,
    pub problem: GalerkinProblem,
}

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub package: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub resolved_nonlinear: NonlinearConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            resolved_nonlinear: config.nonlinear_config()?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precond::PrecondKind;

    #[test]
    fn defaults_are_the_desk_scale_obstacle() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!((c.nx, c.ny, c.dim, c.degree), (96, 16, 2, 3));
        assert_eq!(c.coefficient_degree(), 6);
        assert_eq!(c.correlation_lengths(), (3.0, 0.5));
        assert_eq!(c.mean_viscosity(), 0.01);
        assert_eq!(c.nonlinear_config().unwrap().n_picard, 6);
        let hot = ExperimentConfig { re: 300.0, ..c };
        assert_eq!(hot.nonlinear_config().unwrap().n_picard, 20);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = ExperimentConfig {
            preconditioner: "ilu".into(),
            ..ExperimentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let neg = ExperimentConfig {
            re: -1.0,
            ..ExperimentConfig::default()
        };
        assert!(neg.validate().is_err());
        assert!(ExperimentConfig::load(Path::new("/nonexistent/cfg.json")).is_err());
    }

    #[test]
    fn roundtrip_and_precond() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"geometry": {"kind": "cavity"}, "nx": 8, "ny": 8, "cov": 0.3, "preconditioner": "bgs", "truncation": 2,
                "probes": [{"x": 0.1, "y": 0.2, "field": "ux"}], "method": "collocation"}"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.method, Method::Collocation);
        let spec = c.precond_spec().unwrap();
        assert_eq!((spec.kind, spec.truncation), (PrecondKind::Bgs, Some(2)));
        assert_eq!(c.nonlinear_config().unwrap().linear.precond, spec);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
