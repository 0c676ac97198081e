//! Experiment configuration files (TOML).
//!
//! ```toml
//! schema_version = 1
//!
//! [lattice]
//! dimension = 1
//! shape = [2]
//!
//! [potential]
//! kind = "kac"        # or "gaussian"
//! nu = 0.05
//!
//! [grid]
//! half_width = 6.0
//! points_per_site = 33
//!
//! [[observables]]
//! name = "x0"
//! kind = "coordinate"
//! site = 0
//! ```
//!
//! Observables come in the kinds `coordinate {site}`, `coordinate_square
//! {site}`, `linear {sites, coefficients}`, `bump {sites, center, a}` and
//! `constant {value}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, DEFAULT_MEMORY_BUDGET, DEFAULT_STENCIL_ORDER};
use crate::lattice::{build_lattice, LatticeSpec};
use crate::oracle::{McmcConfig, DEFAULT_FD_STEP};
use crate::potential::{gaussian_potential, kac_potential, Observable, PotentialModel};
use crate::witten::SolverConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub dimension: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSection {
    Gaussian,
    Kac { nu: f64 },
}

fn default_stencil_order() -> usize {
    DEFAULT_STENCIL_ORDER
}
fn default_budget_mib() -> u64 {
    DEFAULT_MEMORY_BUDGET / (1024 * 1024)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub half_width: f64,
    pub points_per_site: usize,
    #[serde(default = "default_stencil_order")]
    pub stencil_order: usize,
    #[serde(default = "default_budget_mib")]
    pub memory_budget_mib: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableSpec {
    Coordinate { site: usize },
    CoordinateSquare { site: usize },
    Linear { sites: Vec<usize>, coefficients: Vec<f64> },
    Bump { sites: Vec<usize>, center: Vec<f64>, a: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedObservable {
    pub name: String,
    #[serde(flatten)]
    pub spec: ObservableSpec,
}

fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default)]
    pub mcmc: Option<McmcConfig>,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            mcmc: None,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayMethod {
    #[default]
    Hs,
    Mcmc,
}

/// Command-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Observable used by `solve`, `weighted`, `taylor` and `check`.
    pub observable: Option<String>,
    /// Name pairs for `cov`; all pairs of observables if empty.
    pub pairs: Vec<(String, String)>,
    /// Three names for `npoint`.
    pub triple: Vec<String>,
    pub kappa: f64,
    pub order_k: usize,
    pub n_max: usize,
    pub t: f64,
    pub fixed_site: usize,
    pub decay_method: DecayMethod,
    /// Grid of decay rates scanned by the three-point envelope fit.
    pub kappa1_grid: Vec<f64>,
    /// `epsilon` of the finite-difference check of `w`.
    pub w_epsilon: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            observable: None,
            pairs: vec![],
            triple: vec![],
            kappa: 0.2,
            order_k: 1,
            n_max: 4,
            t: 0.0,
            fixed_site: 0,
            decay_method: DecayMethod::Hs,
            kappa1_grid: (1..=40).map(|k| 0.1 * k as f64).collect(),
            w_epsilon: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub lattice: LatticeSection,
    pub potential: PotentialSection,
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub observables: Vec<NamedObservable>,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub params: Params,
}

/// A validated configuration together with the objects it describes.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub lattice: LatticeSpec,
    pub model: PotentialModel,
    pub observables: BTreeMap<String, Observable>,
    /// Observable names in file order.
    pub order: Vec<String>,
}

/// Parses TOML; errors carry the dotted path of the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        Error::Config(format!("config::parse at `{path}`: {msg}"))
    })?;
    Ok(cfg)
}

fn cfg_err(field: &str, e: Error) -> Error {
    Error::Config(format!("config::validate at `{field}`: {e}"))
}

impl ExperimentConfig {
    /// Resolves every section and cross-reference.
    pub fn build(self) -> Result<Experiment> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config::validate at `schema_version`: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        let lattice = build_lattice(self.lattice.dimension, &self.lattice.shape).map_err(|e| cfg_err("lattice", e))?;
        let model = match self.potential {
            PotentialSection::Gaussian => gaussian_potential(&lattice),
            PotentialSection::Kac { nu } => kac_potential(&lattice, nu).map_err(|e| cfg_err("potential.nu", e))?,
        };
        self.solver.validate().map_err(|e| cfg_err("solver", e))?;
        if let Some(m) = &self.oracle.mcmc {
            m.validate().map_err(|e| cfg_err("oracle.mcmc", e))?;
        }
        if !(self.oracle.fd_step > 0.0) {
            return Err(Error::Config("config::validate at `oracle.fd_step`: must be positive".into()));
        }
        let mut observables = BTreeMap::new();
        let mut order = vec![];
        for (i, o) in self.observables.iter().enumerate() {
            let field = format!("observables[{i}]");
            let obs = match &o.spec {
                ObservableSpec::Coordinate { site } => Observable::coordinate(&lattice, *site),
                ObservableSpec::CoordinateSquare { site } => Observable::coordinate_square(&lattice, *site),
                ObservableSpec::Linear { sites, coefficients } => Observable::linear(&lattice, sites, coefficients),
                ObservableSpec::Bump { sites, center, a } => Observable::bump(&lattice, sites, center, *a),
                ObservableSpec::Constant { value } => Ok(Observable::constant(&lattice, *value)),
            }
            .map_err(|e| cfg_err(&field, e))?;
            if observables.insert(o.name.clone(), obs).is_some() {
                return Err(Error::Config(format!(
                    "config::validate at `{field}.name`: duplicate observable `{}`",
                    o.name
                )));
            }
            order.push(o.name.clone());
        }
        let known = |name: &str, field: &str| -> Result<()> {
            if observables.contains_key(name) {
                Ok(())
            } else {
                Err(Error::Config(format!("config::validate at `{field}`: unknown observable `{name}`")))
            }
        };
        let p = &self.params;
        if let Some(name) = &p.observable {
            known(name, "params.observable")?;
        }
        for (i, (a, b)) in p.pairs.iter().enumerate() {
            known(a, &format!("params.pairs[{i}]"))?;
            known(b, &format!("params.pairs[{i}]"))?;
        }
        for (i, a) in p.triple.iter().enumerate() {
            known(a, &format!("params.triple[{i}]"))?;
        }
        if !p.triple.is_empty() && p.triple.len() != 3 {
            return Err(Error::Config("config::validate at `params.triple`: expects three names".into()));
        }
        if p.fixed_site >= lattice.len() {
            return Err(Error::Config(format!(
                "config::validate at `params.fixed_site`: site {} outside lattice of {} sites",
                p.fixed_site,
                lattice.len()
            )));
        }
        if !(p.kappa >= 0.0) {
            return Err(Error::Config("config::validate at `params.kappa`: must be >= 0".into()));
        }
        if !(1..=3).contains(&p.order_k) {
            return Err(Error::Config("config::validate at `params.order_k`: must be 1, 2 or 3".into()));
        }
        if !(1..=4).contains(&p.n_max) {
            return Err(Error::Config("config::validate at `params.n_max`: must lie in 1..=4".into()));
        }
        if !(p.w_epsilon > 0.0) || !p.t.is_finite() {
            return Err(Error::Config("config::validate at `params`: t must be finite and w_epsilon positive".into()));
        }
        Ok(Experiment {
            config: self,
            lattice,
            model,
            observables,
            order,
        })
    }
}

impl Experiment {
    pub fn grid(&self) -> Result<GridSpec> {
        let g = self
            .config
            .grid
            .as_ref()
            .ok_or_else(|| Error::Config("config::validate at `grid`: section required by this command".into()))?;
        GridSpec::new(
            &self.lattice,
            g.half_width,
            g.points_per_site,
            g.stencil_order,
            g.memory_budget_mib * 1024 * 1024,
        )
        .map_err(|e| cfg_err("grid", e))
    }

    pub fn observable(&self, name: &str) -> Result<&Observable> {
        self.observables
            .get(name)
            .ok_or_else(|| Error::Config(format!("config: unknown observable `{name}`")))
    }

    /// The observable named in `params.observable`.
    pub fn primary_observable(&self) -> Result<(&str, &Observable)> {
        let name = self
            .config
            .params
            .observable
            .as_deref()
            .ok_or_else(|| Error::Config("config::validate at `params.observable`: required by this command".into()))?;
        Ok((name, self.observable(name)?))
    }

    pub fn mcmc(&self) -> Result<&McmcConfig> {
        self.config
            .oracle
            .mcmc
            .as_ref()
            .ok_or_else(|| Error::Config("config::validate at `oracle.mcmc`: section required by this command".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
schema_version = 1
[lattice]
dimension = 1
shape = [2]
[potential]
kind = "kac"
nu = 0.05
[grid]
half_width = 6.0
points_per_site = 17
[[observables]]
name = "x0"
kind = "coordinate"
site = 0
[[observables]]
name = "b"
kind = "bump"
sites = [0, 1]
center = [0.0, 0.0]
a = 0.5
[params]
observable = "x0"
pairs = [["x0", "b"]]
"#;

    #[test]
    fn parses_and_builds() {
        let e = parse_config(GOOD).unwrap().build().unwrap();
        assert_eq!(e.order, vec!["x0", "b"]);
        assert_eq!(e.grid().unwrap().total_points(), 289);
        assert_eq!(e.primary_observable().unwrap().0, "x0");
        assert!(e.mcmc().is_err());
    }

    #[test]
    fn missing_section_names_field() {
        let text = GOOD.replace("[potential]\nkind = \"kac\"\nnu = 0.05\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("potential"), "{err}");
        let text = GOOD.replace("site = 0", "site = \"zero\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("observables"), "{err}");
    }

    #[test]
    fn bad_references_rejected() {
        let text = GOOD.replace("observable = \"x0\"", "observable = \"nope\"");
        let err = parse_config(&text).unwrap().build().unwrap_err().to_string();
        assert!(err.contains("params.observable"), "{err}");
        let text = GOOD.replace("site = 0", "site = 7");
        assert!(parse_config(&text).unwrap().build().is_err());
    }
}
