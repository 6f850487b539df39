use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
[dataset]
train_trajectories = 2
test_trajectory = 2

[dataset.synthetic]
n_traj = 3
n_steps = 8
ell_max = 2
nlon = 16
nlat = 8

[sinr]
depth = 2
degree = 2
hidden = 8
latent = 6

[sinr.train]
epochs = 4
lr_pretrain = 0.01
lr_latent = 0.1

[dynamics]
hidden = [8]
substeps = 2

[dynamics.train]
epochs = 3
lr_finetune = 0.001

[filter]
methods = ["etkf", "enkf"]
members = 8
sigma_z_b = [0.01, 0.001]
sigma_m = [0.01]
inflation = [1.02, 1.05]

[experiment]
obs_count = 16
cycles = 3
"#;

fn lainr(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lainr"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "lainr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let out = dir.path().join("out");

    lainr(dir.path(), &["synth-data"]);
    assert!(out.join("dataset.ltsr").exists());

    lainr(dir.path(), &["pretrain"]);
    assert_eq!(lines(&out.join("pretrain_trace.csv")).len(), 5);
    lainr(dir.path(), &["finetune"]);
    assert_eq!(lines(&out.join("finetune_trace.csv"))[0], "epoch,recon,pred");
    for f in ["sinr.ltsr", "latents.ltsr", "dynamics.ltsr"] {
        assert!(out.join(f).exists(), "{f}");
    }

    lainr(dir.path(), &["fit-uncertainty", "--kind", "diagonal"]);
    assert!(out.join("model_error.ltsr").exists());
    assert_eq!(lines(&out.join("background_cov.csv")).len(), 6);

    let msg = lainr(dir.path(), &["encode", "--traj", "1", "--step", "2", "--ratio", "0.5"]);
    assert!(msg.contains("encoded from 64 of 128 values"), "{msg}");
    assert_eq!(lines(&out.join("latent.csv")).len(), 7);

    lainr(dir.path(), &["predict", "--horizon", "2"]);
    assert_eq!(lines(&out.join("pred_rmse.csv")).len(), 4);

    lainr(dir.path(), &["sweep"]);
    let rows = lines(&out.join("results.csv"));
    assert_eq!(
        rows[0],
        "config_id,method,sigma_z_b,sigma_m,inflation,mean_analysis_rmse,final_rmse,wall_time_s"
    );
    assert_eq!(rows.len(), 1 + 2 * 4);
    assert_eq!(rows.iter().filter(|r| r.contains(",etkf,")).count(), 4);
    assert_eq!(lines(&out.join("free_run.csv")).len(), 5);
    assert_eq!(lines(&out.join("diagnostics.csv")).len(), 1 + 2 * 4 * 3);

    lainr(dir.path(), &["assimilate", "--method", "denkf"]);
    let rows = lines(&out.join("results.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("c000,denkf,0.01,0.01,1.02,"), "{}", rows[1]);

    lainr(dir.path(), &["metrics"]);
    let rows = lines(&out.join("masked.csv"));
    assert_eq!(rows[0], "count,ratio,rmse,non_finite");
    assert_eq!(rows.len(), 10);
}

#[test]
fn sweeps_are_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let out = dir.path().join("out");
    lainr(dir.path(), &["synth-data"]);
    lainr(dir.path(), &["pretrain"]);
    lainr(dir.path(), &["finetune"]);
    let strip = |rows: Vec<String>| -> Vec<String> {
        rows.into_iter()
            .map(|r| r.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or(r))
            .collect()
    };
    lainr(dir.path(), &["--seed", "5", "sweep"]);
    let first = strip(lines(&out.join("results.csv")));
    lainr(dir.path(), &["--seed", "5", "sweep"]);
    assert_eq!(first, strip(lines(&out.join("results.csv"))));
}

#[test]
fn galewsky_ic_is_written() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    lainr(dir.path(), &["galewsky-ic", "--nlon", "32", "--nlat", "16"]);
    assert!(dir.path().join("out/galewsky_ic.ltsr").exists());
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), CONFIG.replace("sigma_m = [0.01]", "sigma_m = []")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lainr"))
        .arg("--config")
        .arg(dir.path().join("config.toml"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("sweep")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma_m"));

    let out = Command::new(env!("CARGO_BIN_EXE_lainr"))
        .args(["galewsky-ic", "--u-m", "90", "--out"])
        .arg(dir.path().join("out2"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
