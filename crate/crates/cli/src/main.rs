use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kanrf::csi::{preprocess_records, write_records, CsiRecord, Split};
use kanrf::field::Checkpoint;
use kanrf::geometry::Vec3;
use kanrf::harness::{
    evaluate, explain_ray, load_records, read_checkpoint, resolve_bounds, split_records, train, write_curves_csv,
    write_jacobian_csv, EvalOptions, HarnessError, RunConfig, Setup,
};
use kanrf::renderer::render_spectrum;
use kanrf::scene::{generate_dataset, SceneSpec};

#[derive(Parser)]
#[command(name = "kanrf", version, about = "Radio-frequency neural fields with power-of-ReLU layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a receiver dataset in a shoebox scene.
    Simulate {
        /// Scene TOML; the built-in desk scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        n_rx: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize, de-rotate and de-skew every record.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Per-epoch loss as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out records.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must match the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Records for the mean-predictor baseline; defaults to the train split of `--data`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Subcarrier range `lo:hi`; defaults to the evaluation band.
        #[arg(long, value_parser = parse_band)]
        band: Option<[usize; 2]>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[arg(long)]
        cdf: Option<PathBuf>,
    },
    /// Jacobian importance and MoRF/LeRF curves for one ray.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index over (test record, receive direction) pairs.
        #[arg(long)]
        ray: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Angular power spectrum seen by a receiver.
    RenderSpectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        rx: Vec3,
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        tx: Vec3,
        #[arg(long, default_value_t = 36)]
        az: usize,
        #[arg(long, default_value_t = 9)]
        el: usize,
        /// `.bin` writes the binary grid, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn parse_band(s: &str) -> Result<[usize; 2], String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo = lo.parse().map_err(|e| format!("{e}"))?;
    let hi = hi.parse().map_err(|e| format!("{e}"))?;
    if lo >= hi {
        return Err(format!("empty band {s}"));
    }
    Ok([lo, hi])
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    ck.write_to(&mut w).map_err(HarnessError::from)?;
    w.flush()?;
    Ok(())
}

fn load(path: &Path) -> Result<Vec<CsiRecord>> {
    load_records(path).with_context(|| format!("reading {}", path.display()))
}

fn restore(path: &Path) -> Result<(Setup, kanrf::field::FieldModel)> {
    let ck = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Setup::restore(&ck)?)
}

/// Test records when the file carries split labels, else every record.
fn held_out(records: Vec<CsiRecord>) -> Vec<CsiRecord> {
    if records.iter().any(|r| r.split == Some(Split::Test)) {
        split_records(&records).1
    } else {
        records
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scene, n_rx, seed, out } => {
            let spec = match &scene {
                Some(p) => SceneSpec::load(p).with_context(|| format!("reading {}", p.display()))?,
                None => SceneSpec::default(),
            };
            let records = generate_dataset(&spec, n_rx, seed).map_err(HarnessError::from)?;
            let mut w = create(&out)?;
            write_records(&mut w, &records).map_err(HarnessError::from)?;
            w.flush()?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Preprocess { data, out } => {
            let records = preprocess_records(&load(&data)?).map_err(HarnessError::from)?;
            let mut w = create(&out)?;
            write_records(&mut w, &records).map_err(HarnessError::from)?;
            w.flush()?;
        }
        Command::Train { config, out, log } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let Some(path) = cfg.data.train.clone() else { bail!(HarnessError::Config("data.train is not set".into())) };
            let all = load(&path)?;
            let bounds = resolve_bounds(&cfg, &all)?;
            let (records, _) = split_records(&all);
            let mut log_w = log.as_deref().map(create).transpose()?;
            if let Some(w) = log_w.as_mut() {
                writeln!(w, "epoch,loss")?;
            }
            let outcome = train(&cfg, &records, bounds, |e| {
                eprintln!("epoch {:>4}  loss {:.6e}", e.epoch, e.loss);
                if let Some(w) = log_w.as_mut() {
                    let _ = writeln!(w, "{},{}", e.epoch, e.loss);
                }
            });
            if let Some(w) = log_w.as_mut() {
                w.flush()?;
            }
            match outcome {
                Ok(t) => write_checkpoint(&t.setup.checkpoint(&t.model), &out)?,
                Err(HarnessError::NonFinite { epoch, step, last_good }) => {
                    let mut saved = out.clone().into_os_string();
                    saved.push(".last-good");
                    let saved = PathBuf::from(saved);
                    write_checkpoint(&last_good, &saved)?;
                    eprintln!("last good parameters written to {}", saved.display());
                    return Err(HarnessError::NonFinite { epoch, step, last_good }.into());
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Eval { checkpoint, data, config, baseline, band, out, cdf } => {
            let start = Instant::now();
            let (setup, model) = restore(&checkpoint)?;
            if let Some(p) = config {
                let cfg = RunConfig::load(&p).with_context(|| format!("loading {}", p.display()))?;
                if cfg.fingerprint() != setup.fingerprint() {
                    bail!(HarnessError::Fingerprint { expected: cfg.fingerprint(), found: setup.fingerprint() });
                }
            }
            let all = load(&data)?;
            let reference = match &baseline {
                Some(p) => load(p)?,
                None => all.iter().filter(|r| r.split == Some(Split::Train)).cloned().collect(),
            };
            let records = held_out(all);
            let scene = match &setup.config.data.scene {
                Some(p) if setup.config.eval.spectra > 0 => Some(SceneSpec::load(p).map_err(HarnessError::from)?),
                _ => None,
            };
            let opts = EvalOptions { band, baseline: Some(&reference), scene: scene.as_ref() };
            let report = evaluate(&model, &setup, &records, opts)?;
            let mut w = create(&out)?;
            w.write_all(report.to_json().as_bytes())?;
            w.flush()?;
            if let Some(p) = cdf {
                let mut w = create(&p)?;
                report.write_cdf_csv(&mut w)?;
                w.flush()?;
            }
            let mut sidecar = out.clone().into_os_string();
            sidecar.push(".runtime");
            std::fs::write(&sidecar, format!("{{\"seconds\": {}}}\n", start.elapsed().as_secs_f64()))?;
            match report.baseline_mean_snr_db {
                Some(b) => println!("mean SNR {:.3} dB over {} records (baseline {b:.3} dB)", report.mean_snr_db, report.snr_db.len()),
                None => println!("mean SNR {:.3} dB over {} records", report.mean_snr_db, report.snr_db.len()),
            }
        }
        Command::Explain { checkpoint, data, ray, out_dir } => {
            let (setup, model) = restore(&checkpoint)?;
            let records = held_out(load(&data)?);
            let ex = explain_ray(&model, &setup, &records, ray)?;
            let mut w = create(&out_dir.join(format!("ray{ray}_curves.csv")))?;
            write_curves_csv(&mut w, &[ex.morf.clone(), ex.lerf.clone()]).map_err(HarnessError::from)?;
            w.flush()?;
            let mut w = create(&out_dir.join(format!("ray{ray}_jacobian.csv")))?;
            write_jacobian_csv(&mut w, &ex.jacobian, &ex.freqs).map_err(HarnessError::from)?;
            w.flush()?;
            println!("ray {ray}: aopc morf {:.6} lerf {:.6}", ex.aopc_morf(), ex.aopc_lerf());
        }
        Command::RenderSpectrum { checkpoint, rx, tx, az, el, out } => {
            let (_, model) = restore(&checkpoint)?;
            let grid = render_spectrum(&model, rx, tx, az, el).map_err(HarnessError::from)?;
            let mut w = create(&out)?;
            if out.extension().is_some_and(|e| e == "bin") {
                grid.write_binary(&mut w).map_err(HarnessError::from)?;
            } else {
                grid.write_csv(&mut w).map_err(HarnessError::from)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_numeric);
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}
