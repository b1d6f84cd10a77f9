use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use irrvis::calibration::calibrate;
use irrvis::cox::{fit_cox, CoxOptions};
use irrvis::data::{load_csv, Dataset};
use irrvis::inference::{analyze_once, sweep, Analysis, AnalysisConfig};
use irrvis::par::Execution;
use irrvis::simlab::run_study;
use irrvis::weights::{balance_report, write_balance_csv, write_weights_csv};

use crate::config::RunConfig;

/// A numerical failure that was reported after partial output was written.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Everything a command needs besides its own config section.
pub struct Run {
    pub command: &'static str,
    pub config: RunConfig,
    pub config_text: String,
    pub base_dir: PathBuf,
    pub output_dir: PathBuf,
    pub execution: Execution,
}

impl Run {
    pub fn load(command: &'static str, path: &Path, output: Option<PathBuf>, execution: Execution) -> Result<Self> {
        let config_text =
            fs::read_to_string(path).with_context(|| format!("cannot read configuration {}", path.display()))?;
        let config = RunConfig::parse(&config_text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let output_dir = match output {
            Some(o) => o,
            None => base_dir.join(
                config
                    .output_dir
                    .as_ref()
                    .context("no output directory: pass --output or set output_dir")?,
            ),
        };
        Ok(Self {
            command,
            config,
            config_text,
            base_dir,
            output_dir,
            execution,
        })
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self.config.input_path(&self.base_dir)?;
        let schema = self.config.schema()?;
        load_csv(&path, &schema).with_context(|| format!("cannot load {}", path.display()))
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.output_dir.join(name);
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    fn prepare_output(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("cannot create output directory {}", self.output_dir.display()))
    }

    /// Plain-text manifest with the exact configuration that produced the
    /// outputs next to it.
    fn write_manifest(&self) -> Result<()> {
        let digest = hex::encode(Sha256::digest(self.config_text.as_bytes()));
        let mut out = String::new();
        let _ = writeln!(out, "tool=irrvis {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "command={}", self.command);
        let _ = writeln!(out, "seed={}", self.config.seed);
        let _ = writeln!(out, "config_sha256={digest}");
        let _ = writeln!(out, "--- config ---");
        out.push_str(&self.config_text);
        let mut w = self.create("manifest.txt")?;
        w.write_all(out.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

fn phi_tag(phi: f64) -> String {
    format!("{phi}")
}

/// Weights, balance diagnostics and intensity coefficients for one `phi`.
fn write_phi_outputs(ctx: &Run, ds: &Dataset, cfg: &AnalysisConfig, analysis: &Analysis) -> Result<()> {
    let tag = phi_tag(analysis.phi);
    let mut w = ctx.create(&format!("weights_phi{tag}.csv"))?;
    write_weights_csv(ds, &analysis.weights, &mut w)?;
    w.flush()?;

    // Unweighted runs still get an intensity fit so balance can be reported.
    let diagnostic;
    let cox = match &analysis.cox {
        Some(c) => c,
        None => {
            diagnostic = fit_cox(ds, &cfg.zspec, &analysis.q, &CoxOptions::default())?;
            &diagnostic
        }
    };
    let mut wtr = csv::Writer::from_writer(ctx.create(&format!("cox_phi{tag}.csv"))?);
    wtr.write_record(["term", "estimate"])?;
    for (term, g) in cox.term_names.iter().zip(&cox.gamma_s) {
        wtr.write_record([term.clone(), g.to_string()])?;
    }
    wtr.flush()?;

    let hspec = cfg.hspec.as_ref().context("balance terms are missing")?;
    let rows = balance_report(ds, hspec, &analysis.weights, &analysis.q, &cox.breslow)?;
    let mut w = ctx.create(&format!("balance_phi{tag}.csv"))?;
    write_balance_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn analyze(ctx: &Run) -> Result<()> {
    let mut cfg = ctx.config.analysis_config()?;
    cfg.execution = ctx.execution;
    let ds = ctx.dataset()?;
    ctx.prepare_output()?;
    let result = sweep(&ds, &cfg)?;
    let mut w = ctx.create("sweep.csv")?;
    result.write_csv(&mut w)?;
    w.flush()?;
    let mut failed = Vec::new();
    for phi in &result.per_phi {
        match (&phi.analysis, &phi.error) {
            (Some(a), _) => write_phi_outputs(ctx, &ds, &cfg, a)?,
            (None, Some(e)) => failed.push(format!("phi = {}: {e}", phi.phi)),
            (None, None) => {}
        }
        if let Some(r) = &phi.resampling {
            for warning in &r.warnings {
                log::warn!("phi = {}: {warning}", phi.phi);
            }
        }
    }
    ctx.write_manifest()?;
    if !failed.is_empty() {
        return Err(NumericFailure(format!("analysis failed at {} grid value(s): {}", failed.len(), failed.join("; "))).into());
    }
    Ok(())
}

pub fn weights(ctx: &Run) -> Result<()> {
    let mut cfg = ctx.config.analysis_config()?;
    cfg.execution = ctx.execution;
    let phi = ctx.config.single_phi();
    let ds = ctx.dataset()?;
    ctx.prepare_output()?;
    let analysis = analyze_once(&ds, &cfg, phi)?;
    write_phi_outputs(ctx, &ds, &cfg, &analysis)?;
    let (lo, med, hi) = analysis.weights.summary();
    println!(
        "phi={phi} kind={} visits={} weight_min={lo} weight_median={med} weight_max={hi}",
        analysis.weights.kind.as_str(),
        analysis.weights.weights.len()
    );
    ctx.write_manifest()
}

pub fn calibrate_cmd(ctx: &Run) -> Result<()> {
    let opts = ctx.config.calibration_options()?;
    let zspec = ctx.config.zspec()?;
    let ds = ctx.dataset()?;
    ctx.prepare_output()?;
    let result = calibrate(&ds, &zspec, &opts)?;
    let mut w = ctx.create("calibration.csv")?;
    result.write_csv(&mut w)?;
    w.flush()?;
    let report = result.report();
    let mut w = ctx.create("calibration_report.txt")?;
    w.write_all(report.as_bytes())?;
    w.flush()?;
    for warning in &result.warnings {
        log::warn!("{warning}");
    }
    print!("{report}");
    ctx.write_manifest()
}

pub fn simulate(ctx: &Run) -> Result<()> {
    let mut cfg = ctx.config.scenario_config()?;
    cfg.execution = ctx.execution;
    ctx.prepare_output()?;
    let table = run_study(&cfg)?;
    let mut w = ctx.create("metrics.csv")?;
    table.write_csv(&mut w)?;
    w.flush()?;
    let mut w = ctx.create("replicates.csv")?;
    table.write_replicates_csv(&mut w)?;
    w.flush()?;
    let mut summary = String::new();
    let _ = writeln!(summary, "scenario={}", cfg.scenario);
    let _ = writeln!(summary, "n_reps={}", cfg.n_reps);
    let _ = writeln!(summary, "phi_weights={}", table.phi_weights);
    let _ = writeln!(summary, "balance_solves={}", table.balance_solves);
    let _ = writeln!(summary, "max_balance_residual={:e}", table.max_balance_residual);
    let mut w = ctx.create("summary.txt")?;
    w.write_all(summary.as_bytes())?;
    w.flush()?;
    print!("{summary}");
    ctx.write_manifest()
}
