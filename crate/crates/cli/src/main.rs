use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lainr_core::dynamics::{Dynamics, OdeFuncParams};
use lainr_core::filters::FilterMethod;
use lainr_core::harness::experiment::{load_dataset, masked_reconstruction, MaskedRow};
use lainr_core::harness::{
    gen_galewsky_ic, make_latlon_grid, multi_step_pred_rmse, random_obs_operator, run_experiment,
    write_curve_csv, Dataset, ExperimentConfig,
};
use lainr_core::ltsr::NamedTensors;
use lainr_core::sinr::{AffineDecoder, LatentState, SinrParams};
use lainr_core::trainer::{finetune, pretrain, write_trace_csv, LatentTable};
use lainr_core::uncertainty::{fit_mle, latent_background_cov, EstimatorKind};

#[derive(Parser, Debug)]
#[command(name = "lainr", version, about = "Latent data assimilation with spherical implicit neural representations")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic rotation dataset.
    SynthData,
    /// Write the barotropic-jet initial condition on a lat/lon grid.
    GalewskyIc {
        #[arg(long, default_value_t = 70.0)]
        u_m: f64,
        #[arg(long, default_value_t = 128)]
        nlon: usize,
        #[arg(long, default_value_t = 64)]
        nlat: usize,
    },
    /// Fit the decoder and latent table on the training trajectories.
    Pretrain,
    /// Fit the latent dynamics, continuing decoder updates.
    Finetune,
    /// Fit the model-error estimator and the latent background covariance.
    FitUncertainty {
        #[arg(long, default_value = "scalar")]
        kind: String,
    },
    /// Encode one snapshot, optionally from a random fraction of its values.
    Encode {
        #[arg(long, default_value_t = 0)]
        traj: usize,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Multi-step prediction RMSE on held-out trajectories.
    Predict {
        #[arg(long, default_value_t = 10)]
        horizon: usize,
    },
    /// Run the first configuration of the grid only.
    Assimilate {
        #[arg(long)]
        method: Option<String>,
    },
    /// Run the full configuration grid.
    Sweep,
    /// Held-out reconstruction and masked-encoding errors.
    Metrics,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.dataset.synthetic.seed = s;
        cfg.sinr.train.seed = s;
        cfg.dynamics.train.seed = s;
        cfg.experiment.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.experiment.workers = w;
    }
    let out = &cli.out;
    let dataset_file = out.join("dataset.ltsr");
    if cfg.dataset.path.is_none() && dataset_file.exists() {
        cfg.dataset.path = Some(dataset_file);
    }
    cfg.sinr.path.get_or_insert_with(|| out.join("sinr.ltsr"));
    cfg.sinr.latents_path.get_or_insert_with(|| out.join("latents.ltsr"));
    cfg.dynamics.path.get_or_insert_with(|| out.join("dynamics.ltsr"));
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::SynthData => synth_data(&cfg, out),
        Command::GalewskyIc { u_m, nlon, nlat } => galewsky(*u_m, *nlon, *nlat, out),
        Command::Pretrain => cmd_pretrain(&cfg, out),
        Command::Finetune => cmd_finetune(&cfg, out),
        Command::FitUncertainty { kind } => cmd_fit_uncertainty(&cfg, kind, out),
        Command::Encode { traj, step, ratio } => cmd_encode(&cfg, *traj, *step, *ratio, out),
        Command::Predict { horizon } => cmd_predict(&cfg, *horizon, out),
        Command::Assimilate { method } => {
            let f = &mut cfg.filter;
            if let Some(m) = method {
                f.methods = vec![m.clone()];
            }
            f.methods.truncate(1);
            f.sigma_z_b.truncate(1);
            f.sigma_m.truncate(1);
            f.inflation.truncate(1);
            cmd_sweep(&cfg, out)
        }
        Command::Sweep => cmd_sweep(&cfg, out),
        Command::Metrics => cmd_metrics(&cfg, out),
    }
}

fn synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut c = cfg.clone();
    c.dataset.path = None;
    let (ds, _) = load_dataset(&c)?;
    let path = out.join("dataset.ltsr");
    ds.save(&path)?;
    println!("wrote {} ({:?})", path.display(), ds.shape);
    Ok(())
}

fn galewsky(u_m: f64, nlon: usize, nlat: usize, out: &Path) -> Result<()> {
    let grid = make_latlon_grid(nlon, nlat);
    let ic = gen_galewsky_ic(u_m, &grid)?;
    let c = ic.channels();
    let mut values = Vec::with_capacity(grid.len() * c);
    for p in 0..grid.len() {
        values.extend((0..c).map(|ch| ic.values[(p, ch)]));
    }
    let ds = Dataset::new([1, 1, nlon, nlat, c], values, 1.0, ic.channel_names.clone())?;
    let path = out.join("galewsky_ic.ltsr");
    ds.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn training_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (ds, _) = load_dataset(cfg)?;
    let n = cfg.dataset.train_trajectories.min(ds.trajectories());
    if n == 0 {
        bail!("no training trajectories");
    }
    let mut train = ds.select_trajectories(0..n);
    if let Some(s) = cfg.dataset.train_steps {
        train = train.truncate_steps(s);
    }
    Ok(train)
}

fn held_out(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (ds, _) = load_dataset(cfg)?;
    let n = cfg.dataset.train_trajectories;
    if n >= ds.trajectories() {
        bail!("no held-out trajectories after the first {n}");
    }
    Ok(ds.select_trajectories(n..ds.trajectories()))
}

fn path_of<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("{what} path not set"))
}

fn load_sinr(cfg: &ExperimentConfig) -> Result<SinrParams> {
    let p = path_of(&cfg.sinr.path, "sinr")?;
    let n = NamedTensors::load(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(SinrParams::from_named(&n)?)
}

fn load_table(cfg: &ExperimentConfig) -> Result<LatentTable> {
    let p = path_of(&cfg.sinr.latents_path, "latents")?;
    let n = NamedTensors::load(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(LatentTable::from_named(&n)?)
}

fn load_dynamics(cfg: &ExperimentConfig) -> Result<Dynamics> {
    let p = path_of(&cfg.dynamics.path, "dynamics")?;
    let n = NamedTensors::load(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(Dynamics::from_named(&n)?)
}

fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let train = training_data(cfg)?;
    let dims = cfg.sinr.dims(train.channels());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sinr.train.seed);
    let sp = SinrParams::init(dims, cfg.sinr.skip, &mut rng);
    let table = LatentTable::for_dataset(&train, dims.latent);
    let res = pretrain(&train, &sp, &table, &cfg.sinr.train)?;
    res.sinr.to_named().save(path_of(&cfg.sinr.path, "sinr")?)?;
    res.table.to_named().save(path_of(&cfg.sinr.latents_path, "latents")?)?;
    write_trace_csv(out.join("pretrain_trace.csv"), &res.trace)?;
    if let Some(last) = res.trace.last() {
        println!("pretrain: {} epochs, final recon loss {:e}", res.trace.len(), last.recon);
    }
    Ok(())
}

fn cmd_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let train = training_data(cfg)?;
    let sp = load_sinr(cfg)?;
    let table = load_table(cfg)?;
    let d = &cfg.dynamics;
    let mut rng = ChaCha8Rng::seed_from_u64(d.train.seed);
    let f = OdeFuncParams::init(sp.dims.latent, d.hidden.clone(), d.out_scale, &mut rng);
    let dynamics = Dynamics::NeuralOde {
        f,
        dt: d.dt,
        substeps: d.substeps,
    };
    let res = finetune(&train, &sp, &table, &dynamics, &d.train)?;
    res.sinr.to_named().save(path_of(&cfg.sinr.path, "sinr")?)?;
    res.table.to_named().save(path_of(&cfg.sinr.latents_path, "latents")?)?;
    res.dynamics.to_named().save(path_of(&d.path, "dynamics")?)?;
    write_trace_csv(out.join("finetune_trace.csv"), &res.trace)?;
    if let Some(last) = res.trace.last() {
        println!(
            "finetune: {} epochs, recon {:e}, pred {:e}",
            res.trace.len(),
            last.recon,
            last.pred.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn cmd_fit_uncertainty(cfg: &ExperimentConfig, kind: &str, out: &Path) -> Result<()> {
    let kind: EstimatorKind = kind.parse().map_err(anyhow::Error::msg)?;
    let sp = load_sinr(cfg)?;
    let table = load_table(cfg)?;
    let dynamics = load_dynamics(cfg)?;
    let est = fit_mle(&table.pairs(1), &dynamics, kind)?;
    est.to_named().save(out.join("model_error.ltsr"))?;
    let (ds, _) = load_dataset(cfg)?;
    let z = LatentState::zeros(sp.dims.latent);
    let bg = latent_background_cov(&sp, &z, &ds.grid, cfg.experiment.sigma_x_b)?;
    bg.write_csv(out.join("background_cov.csv"))?;
    let std = est.std();
    println!(
        "model error std: mean {:e}, min {:e}, max {:e}; background rank {}",
        std.mean(),
        std.min(),
        std.max(),
        bg.rank
    );
    Ok(())
}

fn cmd_encode(cfg: &ExperimentConfig, traj: usize, step: usize, ratio: Option<f64>, out: &Path) -> Result<()> {
    let (ds, _) = load_dataset(cfg)?;
    if traj >= ds.trajectories() || step >= ds.steps() {
        bail!("snapshot ({traj}, {step}) outside the dataset");
    }
    let sp = load_sinr(cfg)?;
    let dec = AffineDecoder::new(&sp, &ds.grid);
    let frame = ds.frame(traj, step);
    let total = ds.grid.len() * ds.channels();
    let count = match ratio {
        Some(r) if r > 0.0 && r <= 1.0 => ((r * total as f64).round() as usize).max(1),
        Some(r) => bail!("ratio {r} outside (0, 1]"),
        None => total,
    };
    let tpl = random_obs_operator(&ds.grid, ds.channels(), count, cfg.experiment.seed)?;
    let z = dec.encode_picks(&tpl.picks, &tpl.mask(&frame))?;
    let rmse = lainr_core::harness::weighted_rmse_values(&ds.grid, &dec.decode(&z), &frame)?;
    let lines: Vec<String> = z.iter().map(|v| format!("{v:e}")).collect();
    std::fs::write(out.join("latent.csv"), format!("z\n{}\n", lines.join("\n")))?;
    println!("encoded from {count} of {total} values; full-grid RMSE {rmse:e}");
    Ok(())
}

fn cmd_predict(cfg: &ExperimentConfig, horizon: usize, out: &Path) -> Result<()> {
    let test = held_out(cfg)?;
    let sp = load_sinr(cfg)?;
    let dynamics = load_dynamics(cfg)?;
    let curve = multi_step_pred_rmse(&test, &sp, None, &dynamics, horizon)?;
    write_curve_csv(out.join("pred_rmse.csv"), &curve)?;
    for (s, v) in curve.iter().enumerate() {
        println!("s={s} rmse={v:e}");
    }
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let res = run_experiment(cfg, Some(out))?;
    for m in FilterMethod::ALL {
        let rows: Vec<_> = res.rows.iter().filter(|r| r.method == m.name()).collect();
        if let Some(best) = rows.iter().min_by(|a, b| a.mean_analysis_rmse.total_cmp(&b.mean_analysis_rmse)) {
            println!(
                "{}: {} configs, best {} (sigma_z_b={}, sigma_m={}, inflation={}) mean analysis RMSE {:e}",
                m,
                rows.len(),
                best.config_id,
                best.sigma_z_b,
                best.sigma_m,
                best.inflation,
                best.mean_analysis_rmse
            );
        }
    }
    if !res.failures.is_empty() {
        println!("{} cells failed; see failures.csv", res.failures.len());
    }
    Ok(())
}

fn cmd_metrics(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let test = held_out(cfg)?;
    let sp = load_sinr(cfg)?;
    let snapshots: Vec<(usize, usize)> = (0..test.trajectories())
        .flat_map(|k| (0..test.steps()).step_by((test.steps() / 8).max(1)).map(move |t| (k, t)))
        .collect();
    let total = test.grid.len() * test.channels();
    let counts: Vec<usize> = [1.0, 0.3, 0.03, 0.02, 0.01, 0.003]
        .iter()
        .map(|r| ((r * total as f64).round() as usize).max(1))
        .chain([50, 20, 10])
        .collect();
    let rows = masked_reconstruction(&test, &sp, &snapshots, &counts, cfg.experiment.seed)?;
    write_masked_csv(&out.join("masked.csv"), &rows)?;
    for r in &rows {
        println!("count={} ratio={:.4} rmse={:e} non_finite={}", r.count, r.ratio, r.rmse, r.non_finite);
    }
    Ok(())
}

fn write_masked_csv(path: &Path, rows: &[MaskedRow]) -> Result<()> {
    let mut s = String::from("count,ratio,rmse,non_finite\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e},{}\n", r.count, r.ratio, r.rmse, r.non_finite));
    }
    std::fs::write(path, s)?;
    Ok(())
}
