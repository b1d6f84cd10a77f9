//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use irrvis::calibration::CalibrationOptions;
use irrvis::data::{ModelMatrixSpec, Schema};
use irrvis::gee::{Link, MarginalModelSpec, Variance};
use irrvis::inference::{AnalysisConfig, Resampling, WeightChoice};
use irrvis::simlab::{Estimator, OutcomeKind, Scenario, ScenarioConfig};
use irrvis::weights::{BalanceSpec, OutcomeTransform};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: Option<PathBuf>,
    pub data: Option<DataSection>,
    pub model: Option<ModelSection>,
    pub analysis: Option<AnalysisSection>,
    pub calibration: Option<CalibrationSection>,
    pub simulation: Option<SimulationSection>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    #[serde(default)]
    pub columns: ColumnsSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnsSection {
    pub patient_id: Option<String>,
    pub start: Option<String>,
    pub end: Option<String>,
    pub at_risk: Option<String>,
    pub visit: Option<String>,
    pub outcome: Option<String>,
    pub covariates: Option<Vec<String>>,
}

impl ColumnsSection {
    pub fn schema(&self) -> Schema {
        let d = Schema::default();
        Schema {
            patient_id: self.patient_id.clone().unwrap_or(d.patient_id),
            start: self.start.clone().unwrap_or(d.start),
            end: self.end.clone().unwrap_or(d.end),
            at_risk: self.at_risk.clone().unwrap_or(d.at_risk),
            visit: self.visit.clone().unwrap_or(d.visit),
            outcome: self.outcome.clone().unwrap_or(d.outcome),
            covariates: self.covariates.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LinkName {
    #[default]
    Identity,
    Log,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum VarianceName {
    #[default]
    Constant,
    Poisson,
    NegativeBinomial,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TransformName {
    #[default]
    Identity,
    Log1p,
}

impl From<TransformName> for OutcomeTransform {
    fn from(t: TransformName) -> Self {
        match t {
            TransformName::Identity => OutcomeTransform::Identity,
            TransformName::Log1p => OutcomeTransform::Log1p,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Terms of the visit intensity model.
    pub zspec: Vec<String>,
    /// Balance terms; defaults to the intercept plus `zspec`.
    pub hspec: Option<Vec<String>>,
    /// Terms of the marginal outcome model.
    pub xspec: Vec<String>,
    #[serde(default)]
    pub link: LinkName,
    #[serde(default)]
    pub variance: VarianceName,
    /// Negative binomial dispersion; required with that variance.
    pub theta: Option<f64>,
    #[serde(default)]
    pub transform: TransformName,
}

impl ModelSection {
    pub fn zspec(&self) -> Result<ModelMatrixSpec> {
        ModelMatrixSpec::parse(&self.zspec).context("model.zspec")
    }

    pub fn hspec(&self) -> Result<BalanceSpec> {
        let terms = match &self.hspec {
            Some(h) => h.clone(),
            None => std::iter::once("1".to_string()).chain(self.zspec.iter().cloned()).collect(),
        };
        BalanceSpec::parse(&terms).context("model.hspec")
    }

    pub fn marginal(&self) -> Result<MarginalModelSpec> {
        let link = match self.link {
            LinkName::Identity => Link::Identity,
            LinkName::Log => Link::Log,
        };
        let variance = match (self.variance, self.theta) {
            (VarianceName::Constant, None) => Variance::Constant,
            (VarianceName::Poisson, None) => Variance::Poisson,
            (VarianceName::NegativeBinomial, Some(theta)) => Variance::NegativeBinomial(theta),
            (VarianceName::NegativeBinomial, None) => bail!("model.theta is required with variance = \"negative_binomial\""),
            (_, Some(_)) => bail!("model.theta is only allowed with variance = \"negative_binomial\""),
        };
        let xspec = ModelMatrixSpec::parse(&self.xspec).context("model.xspec")?;
        Ok(MarginalModelSpec::new(xspec, link, variance)?)
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum WeightKindName {
    #[default]
    None,
    Mle,
    Balancing,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingName {
    #[default]
    None,
    Jackknife,
    Bootstrap,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default)]
    pub weight_kind: WeightKindName,
    #[serde(default = "default_grid")]
    pub phi_grid: Vec<f64>,
    /// Single `phi` for the weights command; defaults to the first grid value.
    pub phi: Option<f64>,
    #[serde(default)]
    pub resampling: ResamplingName,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_replicates: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            weight_kind: WeightKindName::None,
            phi_grid: default_grid(),
            phi: None,
            resampling: ResamplingName::None,
            bootstrap_replicates: default_bootstrap(),
        }
    }
}

fn default_grid() -> Vec<f64> {
    vec![0.0]
}

fn default_bootstrap() -> usize {
    200
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    /// Target `rho^2`; defaults to the observed covariates' partial `rho^2`.
    pub target: Option<f64>,
    pub spline_df: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeName {
    #[default]
    Continuous,
    Count,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub outcome: OutcomeName,
    pub gamma_z: f64,
    #[serde(default)]
    pub phi_true: f64,
    pub n: usize,
    pub scenario: String,
    pub n_reps: usize,
    pub limiting_n: Option<usize>,
    pub estimators: Option<Vec<String>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid configuration: {}", e.message().trim_end()))
    }

    fn data(&self) -> Result<&DataSection> {
        self.data.as_ref().context("configuration is missing the [data] section")
    }

    fn model(&self) -> Result<&ModelSection> {
        self.model.as_ref().context("configuration is missing the [model] section")
    }

    pub fn input_path(&self, base: &Path) -> Result<PathBuf> {
        Ok(base.join(&self.data()?.path))
    }

    pub fn schema(&self) -> Result<Schema> {
        Ok(self.data()?.columns.schema())
    }

    pub fn analysis_config(&self) -> Result<AnalysisConfig> {
        let model = self.model()?;
        let analysis = self.analysis.clone().unwrap_or_default();
        let kind = match analysis.weight_kind {
            WeightKindName::None => WeightChoice::None,
            WeightKindName::Mle => WeightChoice::Mle,
            WeightKindName::Balancing => WeightChoice::Balancing,
        };
        let mut cfg = AnalysisConfig::new(kind, model.zspec()?, model.marginal()?);
        cfg.hspec = Some(model.hspec()?);
        cfg.transform = model.transform.into();
        cfg.phi_grid = analysis.phi_grid.clone();
        cfg.resampling = match analysis.resampling {
            ResamplingName::None => Resampling::None,
            ResamplingName::Jackknife => Resampling::Jackknife,
            ResamplingName::Bootstrap => Resampling::Bootstrap {
                replicates: analysis.bootstrap_replicates,
                seed: self.seed,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `phi` of the weights command.
    pub fn single_phi(&self) -> f64 {
        let analysis = self.analysis.clone().unwrap_or_default();
        analysis.phi.or(analysis.phi_grid.first().copied()).unwrap_or(0.0)
    }

    pub fn calibration_options(&self) -> Result<CalibrationOptions> {
        let model = self.model()?;
        let section = self.calibration.clone().unwrap_or_default();
        let mut opts = CalibrationOptions {
            transform: model.transform.into(),
            target: section.target,
            ..CalibrationOptions::default()
        };
        if let Some(df) = section.spline_df {
            if df < 1 {
                bail!("calibration.spline_df must be at least 1");
            }
            opts.time_spline_df = df;
        }
        if let Some(t) = opts.target {
            if !(0.0..1.0).contains(&t) {
                bail!("calibration.target must lie in [0, 1), got {t}");
            }
        }
        Ok(opts)
    }

    pub fn zspec(&self) -> Result<ModelMatrixSpec> {
        self.model()?.zspec()
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let sim = self
            .simulation
            .as_ref()
            .context("configuration is missing the [simulation] section")?;
        let mut cfg = ScenarioConfig {
            outcome: match sim.outcome {
                OutcomeName::Continuous => OutcomeKind::Continuous,
                OutcomeName::Count => OutcomeKind::Count,
            },
            gamma_z: sim.gamma_z,
            phi_true: sim.phi_true,
            n: sim.n,
            scenario: sim.scenario.parse::<Scenario>()?,
            n_reps: sim.n_reps,
            seed: self.seed,
            ..ScenarioConfig::default()
        };
        if let Some(n) = sim.limiting_n {
            cfg.limiting_n = n;
        }
        if let Some(names) = &sim.estimators {
            cfg.estimators = names
                .iter()
                .map(|name| {
                    Estimator::ALL
                        .into_iter()
                        .find(|e| e.name() == name)
                        .with_context(|| format!("unknown estimator `{name}` in simulation.estimators"))
                })
                .collect::<Result<_>>()?;
            if cfg.estimators.is_empty() {
                bail!("simulation.estimators is empty");
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ANALYZE: &str = r#"
seed = 7
[data]
path = "visits.csv"
[model]
zspec = ["z1"]
xspec = ["1", "x"]
[analysis]
weight_kind = "balancing"
phi_grid = [0.0, 0.2]
"#;

    #[test]
    fn parses_analysis_config() {
        let cfg = RunConfig::parse(ANALYZE).unwrap();
        let a = cfg.analysis_config().unwrap();
        assert_eq!(a.weight_kind, WeightChoice::Balancing);
        assert_eq!(a.phi_grid, vec![0.0, 0.2]);
        assert_eq!(a.hspec.unwrap().terms.term_names(), vec!["1", "z1"]);
        assert_eq!(cfg.single_phi(), 0.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = ANALYZE.replace("weight_kind", "wieght_kind");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("wieght_kind"), "{err}");
    }

    #[test]
    fn theta_requires_negative_binomial() {
        let text = ANALYZE.replace("xspec = [\"1\", \"x\"]", "xspec = [\"1\"]\ntheta = 0.5");
        assert!(RunConfig::parse(&text).unwrap().analysis_config().is_err());
    }

    #[test]
    fn simulation_section() {
        let cfg = RunConfig::parse(
            "seed = 3\n[simulation]\ngamma_z = 0.5\nn = 50\nscenario = \"s2_noSF_transformedZ\"\nn_reps = 2\nestimators = [\"naive\"]\n",
        )
        .unwrap();
        let s = cfg.scenario_config().unwrap();
        assert_eq!(s.scenario, Scenario::S2);
        assert_eq!(s.seed, 3);
        assert_eq!(s.estimators, vec![Estimator::Naive]);
    }
}
