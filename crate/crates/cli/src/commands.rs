//! The six subcommands as library functions.
//!
//! Each writes its outputs plus a `manifest.json` into `out` and returns the
//! in-memory results so tests can inspect them without re-reading files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hipandas::degrade::{
    add_noise, downsample, simulate_observation, upsample, NoiseSpec, Observation, SpectralResponse,
};
use hipandas::io::{read_cube, read_pan, write_cube, write_pan};
use hipandas::metrics::{evaluate, psnr, MetricsReport, SSIM_WINDOW};
use hipandas::prior::{detail_map, energy_curve, noisy_detail_map};
use hipandas::train::{run_restoration_with, LossRecord, LossTrace, Restoration, TrainConfig};
use hipandas::HsiCube;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::phantom::{make_phantom, PhantomSpec};
use crate::preview::{default_bands, write_png};
use crate::{CliError, CliResult};

fn ensure_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes a phantom cube to `out/phantom.hicube`.
pub fn cmd_make_phantom(spec: &PhantomSpec, out: &Path) -> CliResult<HsiCube> {
    ensure_dir(out)?;
    let cube = make_phantom(spec)?;
    let path = out.join("phantom.hicube");
    write_cube(&cube, &path)?;
    let config = serde_json::json!({
        "height": spec.height, "width": spec.width, "bands": spec.bands, "rank": spec.rank, "seed": spec.seed,
    });
    let mut m = Manifest::new("make-phantom", config, Some(spec.seed));
    m.files.push(file_name(&path));
    m.write(out)?;
    Ok(cube)
}

/// The clean HR cube named by the config, if any.
pub fn load_hr(cfg: &ExperimentConfig) -> CliResult<Option<HsiCube>> {
    if let Some(path) = &cfg.hr {
        return Ok(Some(read_cube(path)?));
    }
    if let Some(p) = cfg.phantom {
        return Ok(Some(make_phantom(&p.into())?));
    }
    Ok(None)
}

fn require_hr(cfg: &ExperimentConfig, what: &str) -> CliResult<HsiCube> {
    load_hr(cfg)?.ok_or_else(|| CliError::Validation(format!("{what} needs `hr` or `phantom` in the config")))
}

fn spectral_response(cfg: &ExperimentConfig, bands: usize) -> CliResult<SpectralResponse> {
    match &cfg.spectral_response {
        None => Ok(SpectralResponse::uniform(bands)),
        Some(phi) if phi.bands() == bands => Ok(phi.clone()),
        Some(phi) => Err(CliError::Validation(format!(
            "spectral response has {} weights for a {bands}-band cube",
            phi.bands()
        ))),
    }
}

fn require_noise(cfg: &ExperimentConfig) -> CliResult<NoiseSpec> {
    cfg.noise
        .clone()
        .ok_or_else(|| CliError::Validation("config has no `noise` spec".into()))
}

/// Simulates `N`, `P`, `Q` from the configured HR cube; `seed` drives the noise.
pub fn cmd_simulate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> CliResult<Observation> {
    let mut cfg = cfg.clone();
    let mut noise = require_noise(&cfg)?;
    noise.seed = seed;
    cfg.noise = Some(noise.clone());
    cfg.validate()?;
    let hr = require_hr(&cfg, "simulate")?;
    let phi = spectral_response(&cfg, hr.bands())?;
    let obs = simulate_observation(&hr, cfg.scale, &phi, &noise)?;

    ensure_dir(out)?;
    write_cube(&obs.n, out.join("n.hicube"))?;
    write_pan(&obs.p, out.join("p.hicube"))?;
    write_pan(&obs.q, out.join("q.hicube"))?;
    let mut m = Manifest::new("simulate", serde_json::to_value(&cfg)?, Some(seed));
    m.files = vec!["n.hicube".into(), "p.hicube".into(), "q.hicube".into()];
    m.details = serde_json::json!({ "noise": noise, "scale": cfg.scale });
    m.write(out)?;
    Ok(obs)
}

/// Observation from files when configured, else simulated from the HR cube.
pub fn load_observation(cfg: &ExperimentConfig) -> CliResult<(Observation, Option<HsiCube>)> {
    let hr = load_hr(cfg)?;
    if let Some(paths) = &cfg.observation {
        let obs = Observation {
            n: read_cube(&paths.n)?,
            p: read_pan(&paths.p)?,
            q: read_pan(&paths.q)?,
        };
        return Ok((obs, hr));
    }
    let hr = hr.ok_or_else(|| CliError::Validation("config needs `observation` files or an HR source".into()))?;
    let phi = spectral_response(cfg, hr.bands())?;
    let obs = simulate_observation(&hr, cfg.scale, &phi, &require_noise(cfg)?)?;
    Ok((obs, Some(hr)))
}

/// `||down(H, s) - L||_F / ||L||_F`
pub fn downsample_consistency(h_hat: &HsiCube, l_hat: &HsiCube, s: usize) -> CliResult<f64> {
    let diff = downsample(h_hat, s)?.sub(l_hat)?;
    Ok(diff.frobenius() / l_hat.frobenius().max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone)]
pub struct RestoreOutcome {
    pub restoration: Restoration,
    /// Exported (clamped) cubes.
    pub l_hat: HsiCube,
    pub h_hat: Option<HsiCube>,
    /// Metrics of the exported `H` (or of `L` for denoise-only runs) when a
    /// clean reference is available.
    pub metrics: Option<MetricsReport>,
}

fn restore_inner(
    obs: &Observation,
    cfg: &ExperimentConfig,
    tc: &TrainConfig,
    out: Option<&Path>,
) -> CliResult<Restoration> {
    match run_restoration_with(&obs.n, &obs.p, &obs.q, &cfg.arch, tc, |_: &LossRecord| {}) {
        Ok(r) => Ok(r),
        Err(hipandas::Error::NonFiniteLoss { epoch, record, trace }) => {
            if let Some(out) = out {
                fs::write(out.join("loss_trace.csv"), LossTrace::records_csv(&trace))?;
            }
            Err(hipandas::Error::NonFiniteLoss { epoch, record, trace }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Zero-shot restoration of the configured observation; `seed` drives
/// network initialization.
pub fn cmd_restore(cfg: &ExperimentConfig, seed: u64, out: &Path) -> CliResult<RestoreOutcome> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    cfg.validate()?;
    let (obs, hr) = load_observation(&cfg)?;
    ensure_dir(out)?;
    let restoration = restore_inner(&obs, &cfg, &cfg.train, Some(out))?;
    let s = restoration.scale;

    let mut files = Vec::new();
    let l_hat = restoration.l_hat.clamped_unit().with_unit_scaled(true);
    write_cube(&l_hat, out.join("l_hat.hicube"))?;
    files.push("l_hat.hicube".to_string());
    let bands = cfg.preview_bands.unwrap_or_else(|| default_bands(l_hat.bands()));
    write_png(&l_hat, bands, &out.join("preview_l_hat.png"))?;
    files.push("preview_l_hat.png".into());

    let h_hat = restoration.h_hat.as_ref().map(|h| h.clamped_unit().with_unit_scaled(true));
    if let Some(h) = &h_hat {
        write_cube(h, out.join("h_hat.hicube"))?;
        write_png(h, bands, &out.join("preview_h_hat.png"))?;
        files.extend(["h_hat.hicube".into(), "preview_h_hat.png".into()]);
    }
    restoration.trace.write_csv(out.join("loss_trace.csv"))?;
    restoration.state.save(out.join("state"))?;
    files.extend(["loss_trace.csv".into(), "state".into()]);

    // SSIM needs a full window, so cubes smaller than that get no report
    let fits = |c: &HsiCube| c.height() >= SSIM_WINDOW && c.width() >= SSIM_WINDOW;
    let metrics = match (&hr, &h_hat) {
        (Some(hr), Some(h)) if fits(h) => Some(evaluate(hr, h, s)?),
        (Some(hr), None) if fits(&l_hat) => Some(evaluate(&downsample(hr, s)?, &l_hat, s)?),
        _ => None,
    };
    if let Some(m) = &metrics {
        fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(m)?)?;
        files.push("metrics.json".into());
    }
    let mut m = Manifest::new("restore", serde_json::to_value(&cfg)?, Some(seed));
    m.files = files;
    m.details = serde_json::json!({ "scale": s, "epochs_run": restoration.trace.len() });
    m.write(out)?;
    Ok(RestoreOutcome {
        restoration,
        l_hat,
        h_hat,
        metrics,
    })
}

pub fn cmd_evaluate(reference: &Path, estimate: &Path, s: usize, out: Option<&Path>) -> CliResult<MetricsReport> {
    let r = read_cube(reference)?;
    let e = read_cube(estimate)?;
    if r.dims() != e.dims() {
        return Err(CliError::Validation(format!(
            "reference {:?} and estimate {:?} differ in size",
            r.dims(),
            e.dims()
        )));
    }
    let report = evaluate(&r, &e, s)?;
    if let Some(out) = out {
        ensure_dir(out)?;
        fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
        let config = serde_json::json!({
            "reference": reference, "estimate": estimate, "scale": s,
        });
        let mut m = Manifest::new("evaluate", config, None);
        m.files.push("metrics.json".into());
        m.write(out)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub k: usize,
    pub clean: f64,
    pub noisy: f64,
}

/// Energy curves of the clean and noisy detail maps. The noisy cube is read
/// from `noisy` when given, else simulated with the config's noise spec
/// (`seed` overriding its seed).
pub fn cmd_energy_curve(
    cfg: &ExperimentConfig,
    noisy: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<Vec<EnergyRow>> {
    let mut cfg = cfg.clone();
    if let (Some(seed), Some(n)) = (seed, cfg.noise.as_mut()) {
        n.seed = seed;
    }
    cfg.validate()?;
    let hr = require_hr(&cfg, "energy-curve")?;
    let s = cfg.scale;
    let n = match noisy {
        Some(p) => read_cube(p)?,
        None => add_noise(&downsample(&hr, s)?, &require_noise(&cfg)?)?,
    };
    let clean = energy_curve(&detail_map(&hr, s)?)?;
    let corrupted = energy_curve(&noisy_detail_map(&hr, &n, s)?)?;
    let rows: Vec<EnergyRow> = clean
        .iter()
        .zip(&corrupted)
        .enumerate()
        .map(|(i, (&c, &d))| EnergyRow {
            k: i + 1,
            clean: c,
            noisy: d,
        })
        .collect();

    ensure_dir(out)?;
    let mut csv = String::from("k,clean,noisy\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.k, r.clean, r.noisy);
    }
    fs::write(out.join("energy_curve.csv"), csv)?;
    let mut m = Manifest::new("energy-curve", serde_json::to_value(&cfg)?, seed);
    m.files.push("energy_curve.csv".into());
    m.write(out)?;
    Ok(rows)
}

/// One grid cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub index: usize,
    pub noise: String,
    pub ablation: String,
    /// Metrics of the exported `H`; absent for denoise-only cells.
    pub h_metrics: Option<MetricsReport>,
    /// PSNR of the exported `L` against the clean `H down s`.
    pub psnr_l: f64,
    /// PSNR of `up(N, s)` against `H`.
    pub baseline_psnr: f64,
    pub consistency: Option<f64>,
    pub trace_csv: String,
}

pub const EXPERIMENT_HEADER: &str =
    "index,noise,ablation,psnr,ssim,ergas,sam,skipped_pixels,psnr_l,baseline_psnr,consistency";

pub fn experiment_csv(rows: &[ExperimentRow]) -> String {
    let mut out = String::from(EXPERIMENT_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let m = r.h_metrics.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.noise,
            r.ablation,
            opt(m.map(|m| m.psnr)),
            opt(m.map(|m| m.ssim)),
            opt(m.map(|m| m.ergas)),
            opt(m.map(|m| m.sam)),
            m.map(|m| m.skipped_pixels.to_string()).unwrap_or_default(),
            r.psnr_l,
            r.baseline_psnr,
            opt(r.consistency),
        );
    }
    out
}

/// Runs one restoration for a given noise spec and training config.
pub fn run_cell(
    hr: &HsiCube,
    cfg: &ExperimentConfig,
    noise: &NoiseSpec,
    tc: &TrainConfig,
    index: usize,
) -> CliResult<ExperimentRow> {
    let s = cfg.scale;
    let phi = spectral_response(cfg, hr.bands())?;
    let obs = simulate_observation(hr, s, &phi, noise)?;
    let r = restore_inner(&obs, cfg, tc, None)?;
    let l_ref = downsample(hr, s)?;
    let l_hat = r.l_hat.clamped_unit();
    let h_hat = r.h_hat.as_ref().map(HsiCube::clamped_unit);
    Ok(ExperimentRow {
        index,
        noise: noise.label(),
        ablation: tc.ablation.label(),
        h_metrics: h_hat.as_ref().map(|h| evaluate(hr, h, s)).transpose()?,
        psnr_l: psnr(&l_ref, &l_hat)?,
        baseline_psnr: psnr(hr, &upsample(&obs.n, s)?)?,
        consistency: h_hat.as_ref().map(|h| downsample_consistency(h, &l_hat, s)).transpose()?,
        trace_csv: r.trace.to_csv(),
    })
}

/// Noise x ablation grid; rows ordered by grid index (noise-major).
pub fn cmd_experiment(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> CliResult<Vec<ExperimentRow>> {
    let mut cfg = cfg.clone();
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let grid = cfg
        .grid
        .clone()
        .ok_or_else(|| CliError::Validation("experiment needs a `grid` in the config".into()))?;
    if grid.noise.is_empty() || grid.ablations.is_empty() {
        return Err(CliError::Validation("experiment grid is empty".into()));
    }
    let hr = require_hr(&cfg, "experiment")?;
    ensure_dir(out)?;
    let cells_dir = out.join("cells");
    ensure_dir(&cells_dir)?;

    let mut rows = Vec::new();
    let mut files = vec!["experiment.csv".to_string()];
    for noise in &grid.noise {
        for ablation in &grid.ablations {
            let tc = TrainConfig {
                ablation: *ablation,
                ..cfg.train.clone()
            };
            let index = rows.len();
            let row = run_cell(&hr, &cfg, noise, &tc, index)?;
            let trace_name: PathBuf = ["cells", &format!("{index:03}_loss_trace.csv")].iter().collect();
            fs::write(out.join(&trace_name), &row.trace_csv)?;
            files.push(trace_name.to_string_lossy().into_owned());
            rows.push(row);
        }
    }
    fs::write(out.join("experiment.csv"), experiment_csv(&rows))?;
    let mut m = Manifest::new("experiment", serde_json::to_value(&cfg)?, Some(cfg.train.seed));
    m.files = files;
    m.write(out)?;
    Ok(rows)
}
