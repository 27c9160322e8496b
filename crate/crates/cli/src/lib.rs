//! Flag and config-file handling for the `varflow` binary, plus the run
//! that turns a frame pair into flow artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use varflow::adapt::AdaptConfig;
use varflow::imaging::Image;
use varflow::metrics::{
    alpha_heatmap, colorize, mt_heatmap, read_flo, save_gray, save_rgb, write_flo, write_metrics_csv, Evaluation,
};
use varflow::pipeline::{estimate_flow, evaluate_against, load_pair, FlowParams, FlowResult, PipelineError};
use varflow::schwarz::write_increments_csv;

/// Every option as `(key, value name, help)`; keys double as config-file keys.
const OPTIONS: &[(&str, &str, &str)] = &[
    ("frame0", "PATH", "first frame (PNG, PGM or PPM)"),
    ("frame1", "PATH", "second frame"),
    ("sigma", "PX", "pre-smoothing scale [1.0]"),
    ("rho", "PX", "structure tensor integration scale [2.5]"),
    ("alpha", "A", "initial flow regularization [1000]"),
    ("lambda", "L", "illumination regularization [1000]"),
    ("illumination", "on|off", "solve for the illumination rate m_t [on]"),
    ("parts", "N", "number of Schwarz subdomains [4]"),
    ("overlap", "PX", "subdomain overlap in pixels [5]"),
    ("schwarz-iters", "K", "Schwarz iterations [10]"),
    ("workers", "W", "worker threads [available cores, at most parts]"),
    ("adapt", "on|off", "adapt alpha per element [on]"),
    ("kappa", "K", "alpha reduction factor [10]"),
    ("eta-threshold", "ETA", "relative indicator threshold [0.1]"),
    ("alpha-th", "A", "alpha floor [alpha / 100]"),
    ("adapt-iters", "N", "maximum number of alpha updates [10]"),
    ("ground-truth", "PATH", "reference .flo for AAE and EE"),
    ("out-flo", "PATH", "computed flow [flow.flo]"),
    ("out-png", "PATH", "color-coded flow [flow.png]"),
    ("out-increments", "PATH", "per-iteration increment log [increments.csv]"),
    ("out-metrics", "PATH", "metrics CSV, needs --ground-truth"),
    ("dump-alpha", "PATH", "final alpha heat map"),
    ("dump-mt", "PATH", "m_t heat map"),
    ("make-illum-fixture", "GAIN", "multiply frame 0 by GAIN (clamped) before solving"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frame0: Option<PathBuf>,
    pub frame1: Option<PathBuf>,
    pub sigma: f64,
    pub rho: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub illumination: bool,
    pub parts: usize,
    pub overlap: usize,
    pub schwarz_iters: usize,
    pub workers: Option<usize>,
    pub adapt: bool,
    pub kappa: f64,
    pub eta_threshold: f64,
    pub alpha_th: Option<f64>,
    pub adapt_iters: usize,
    pub ground_truth: Option<PathBuf>,
    pub out_flo: PathBuf,
    pub out_png: PathBuf,
    pub out_increments: PathBuf,
    pub out_metrics: Option<PathBuf>,
    pub dump_alpha: Option<PathBuf>,
    pub dump_mt: Option<PathBuf>,
    pub illum_gain: Option<f64>,
    /// Also run the other illumination model and report both metric rows.
    pub ablation: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = FlowParams::default();
        let a = AdaptConfig::default();
        Self {
            frame0: None,
            frame1: None,
            sigma: p.sigma,
            rho: p.rho,
            alpha: p.alpha0,
            lambda: p.lambda0,
            illumination: p.illumination,
            parts: p.parts,
            overlap: p.overlap,
            schwarz_iters: p.schwarz_iters,
            workers: None,
            adapt: true,
            kappa: a.kappa,
            eta_threshold: a.eta_threshold,
            alpha_th: None,
            adapt_iters: a.n_adapt,
            ground_truth: None,
            out_flo: "flow.flo".into(),
            out_png: "flow.png".into(),
            out_increments: "increments.csv".into(),
            out_metrics: None,
            dump_alpha: None,
            dump_mt: None,
            illum_gain: None,
            ablation: false,
        }
    }
}

fn cli_error(msg: String) -> PipelineError {
    PipelineError::new("cli.config", msg)
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value.parse().map_err(|_| cli_error(format!("invalid value {value:?} for {key}")))
}

fn switch(key: &str, value: &str) -> Result<bool, PipelineError> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(cli_error(format!("{key} expects on or off, got {value:?}"))),
    }
}

impl RunConfig {
    /// Sets one option from its textual value. Keys accept `_` for `-`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let path = || Some(PathBuf::from(value));
        match key.as_str() {
            "frame0" => self.frame0 = path(),
            "frame1" => self.frame1 = path(),
            "sigma" => self.sigma = number(&key, value)?,
            "rho" => self.rho = number(&key, value)?,
            "alpha" => self.alpha = number(&key, value)?,
            "lambda" => self.lambda = number(&key, value)?,
            "illumination" => self.illumination = switch(&key, value)?,
            "parts" => self.parts = number(&key, value)?,
            "overlap" => self.overlap = number(&key, value)?,
            "schwarz-iters" => self.schwarz_iters = number(&key, value)?,
            "workers" => self.workers = Some(number(&key, value)?),
            "adapt" => self.adapt = switch(&key, value)?,
            "kappa" => self.kappa = number(&key, value)?,
            "eta-threshold" => self.eta_threshold = number(&key, value)?,
            "alpha-th" => self.alpha_th = Some(number(&key, value)?),
            "adapt-iters" => self.adapt_iters = number(&key, value)?,
            "ground-truth" => self.ground_truth = path(),
            "out-flo" => self.out_flo = value.into(),
            "out-png" => self.out_png = value.into(),
            "out-increments" => self.out_increments = value.into(),
            "out-metrics" => self.out_metrics = path(),
            "dump-alpha" => self.dump_alpha = path(),
            "dump-mt" => self.dump_mt = path(),
            "make-illum-fixture" => self.illum_gain = Some(number(&key, value)?),
            "ablation" => self.ablation = switch(&key, value)?,
            _ => return Err(cli_error(format!("unknown option {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), PipelineError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| cli_error(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value).map_err(|e| cli_error(format!("line {}: {}", n + 1, e.source)))?;
        }
        Ok(())
    }

    pub fn flow_params(&self) -> FlowParams {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        FlowParams {
            sigma: self.sigma,
            rho: self.rho,
            alpha0: self.alpha,
            lambda0: self.lambda,
            illumination: self.illumination,
            parts: self.parts,
            overlap: self.overlap,
            schwarz_iters: self.schwarz_iters,
            workers: self.workers.unwrap_or_else(|| cores.min(self.parts.max(1))),
            adapt: self.adapt.then(|| AdaptConfig {
                kappa: self.kappa,
                eta_threshold: self.eta_threshold,
                alpha_th: self.alpha_th.unwrap_or(self.alpha / 100.0),
                n_adapt: self.adapt_iters,
            }),
            ..FlowParams::default()
        }
    }
}

pub fn command() -> Command {
    let mut cmd = Command::new("varflow")
        .about("Dense optical flow under varying illumination")
        .args_override_self(true)
        .arg(Arg::new("config").long("config").value_name("PATH").help("key = value file; flags override it"))
        .arg(
            Arg::new("ablation")
                .long("ablation")
                .action(ArgAction::SetTrue)
                .help("also solve with the other illumination setting and report both metric rows"),
        );
    for &(key, value_name, help) in OPTIONS {
        cmd = cmd.arg(Arg::new(key).long(key).value_name(value_name).help(help));
    }
    cmd
}

/// Config file first, then every flag given on the command line.
pub fn config_from_matches(m: &ArgMatches) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| cli_error(format!("{path}: {e}")))?;
        cfg.apply_file_text(&text)?;
    }
    for &(key, _, _) in OPTIONS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            cfg.set(key, m.get_one::<String>(key).expect("value present"))?;
        }
    }
    if m.get_flag("ablation") {
        cfg.ablation = true;
    }
    Ok(cfg)
}

fn label(illumination: bool) -> String {
    if illumination { "illumination_on" } else { "illumination_off" }.to_string()
}

#[derive(Debug)]
pub struct RunSummary {
    pub result: FlowResult,
    pub metrics: Vec<(String, Evaluation)>,
}

fn write_err<'a, E: std::error::Error + Send + Sync + 'static>(
    stage: &'static str,
    path: &'a Path,
) -> impl FnOnce(E) -> PipelineError + 'a {
    move |e| PipelineError::new(stage, format!("{}: {e}", path.display()))
}

pub fn run(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    let (Some(f0), Some(f1)) = (&cfg.frame0, &cfg.frame1) else {
        return Err(cli_error("both --frame0 and --frame1 are required".into()));
    };
    let (mut frame0, frame1): (Image, Image) = load_pair(f0, f1)?;
    if let Some(gain) = cfg.illum_gain {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(cli_error(format!("fixture gain must be positive, got {gain}")));
        }
        frame0 = frame0.scaled_clamped(gain);
    }
    let truth = match &cfg.ground_truth {
        Some(p) => Some(read_flo(p).map_err(write_err("metrics.read_flo", p))?),
        None => None,
    };
    let params = cfg.flow_params();
    let result = estimate_flow(&frame0, &frame1, &params)?;
    let mut metrics = Vec::new();
    if let Some(t) = &truth {
        metrics.push((label(cfg.illumination), evaluate_against(&result, t)?));
        if cfg.ablation {
            let other = FlowParams { illumination: !cfg.illumination, ..params };
            let r = estimate_flow(&frame0, &frame1, &other)?;
            metrics.push((label(!cfg.illumination), evaluate_against(&r, t)?));
        }
    }

    let (w, h) = (result.width, result.height);
    write_flo(&cfg.out_flo, &result.to_flo()).map_err(write_err("metrics.write_flo", &cfg.out_flo))?;
    save_rgb(&cfg.out_png, w, h, &colorize(&result.flow(), None))
        .map_err(write_err("metrics.save_rgb", &cfg.out_png))?;
    let inc =
        File::create(&cfg.out_increments).map_err(write_err("schwarz.write_increments_csv", &cfg.out_increments))?;
    write_increments_csv(BufWriter::new(inc), &result.increments)
        .map_err(write_err("schwarz.write_increments_csv", &cfg.out_increments))?;
    if let Some(p) = &cfg.out_metrics {
        if truth.is_none() {
            return Err(cli_error("--out-metrics needs --ground-truth".into()));
        }
        let f = File::create(p).map_err(write_err("metrics.write_metrics_csv", p))?;
        write_metrics_csv(BufWriter::new(f), Some("run"), &metrics)
            .map_err(write_err("metrics.write_metrics_csv", p))?;
    }
    if let Some(p) = &cfg.dump_alpha {
        save_gray(p, w - 1, h - 1, &alpha_heatmap(&result.reg, w, h)).map_err(write_err("metrics.save_gray", p))?;
    }
    if let Some(p) = &cfg.dump_mt {
        if result.mt().is_none() {
            return Err(cli_error("--dump-mt needs --illumination on".into()));
        }
        save_rgb(p, w, h, &mt_heatmap(&result.state)).map_err(write_err("metrics.save_rgb", p))?;
    }
    Ok(RunSummary { result, metrics })
}
