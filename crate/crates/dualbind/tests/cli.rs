//! End-to-end tests of the `dualbind` binary: exit codes, output files, and
//! the seed-override environment variable.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualbind"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.root.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Generates a small dataset under `data/` and returns its path.
    fn gen_data(&self) -> PathBuf {
        let cfg = self.write(
            "gen.json",
            r#"{"n_complexes": 24, "n_ligand_types": 10, "protein_atoms": [8, 10], "ligand_atoms": [4, 5], "seed": 3}"#,
        );
        let data = self.path("data");
        let out = run(bin().arg("gen").arg("--config").arg(&cfg).arg("--out").arg(&data));
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        data
    }
}

fn train_quick(data: &Path, out_dir: &Path, extra_json: &str) -> Output {
    let cfg_path = out_dir.with_extension("json");
    let json = format!(
        r#"{{"epochs": 2, "learning_rate": 0.003, "model": {{"hidden": 6, "layers": 1, "pair_hidden": 6, "cutoff": 10.0}}{extra_json}}}"#
    );
    std::fs::write(&cfg_path, json).unwrap();
    run(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out_dir))
}

#[test]
fn gen_writes_dataset_and_is_deterministic() {
    let ws = Workspace::new();
    let data = ws.gen_data();
    assert!(data.join("dataset.jsonl").exists());
    assert!(data.join("manifest.json").exists());

    // same config again -> byte-identical files
    let cfg = ws.path("gen.json");
    let data2 = ws.path("data2");
    let out = run(bin().arg("gen").arg("--config").arg(&cfg).arg("--out").arg(&data2));
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(data.join("dataset.jsonl")).unwrap(),
        std::fs::read(data2.join("dataset.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(data.join("manifest.json")).unwrap(),
        std::fs::read(data2.join("manifest.json")).unwrap()
    );
}

#[test]
fn gen_missing_config_exits_2_naming_path() {
    let ws = Workspace::new();
    let out = run(bin()
        .arg("gen")
        .arg("--config")
        .arg(ws.path("nope.json"))
        .arg("--out")
        .arg(ws.path("d")));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn seed_env_overrides_config_seed() {
    let ws = Workspace::new();
    let cfg_a = ws.write("a.json", r#"{"n_complexes": 10, "seed": 9}"#);
    let cfg_b = ws.write("b.json", r#"{"n_complexes": 10, "seed": 1}"#);
    let da = ws.path("da");
    let db = ws.path("db");
    assert_eq!(code(&run(bin().arg("gen").arg("--config").arg(&cfg_a).arg("--out").arg(&da))), 0);
    let out = run(bin()
        .arg("gen")
        .arg("--config")
        .arg(&cfg_b)
        .arg("--out")
        .arg(&db)
        .env("DUALBIND_SEED", "9"));
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(da.join("dataset.jsonl")).unwrap(),
        std::fs::read(db.join("dataset.jsonl")).unwrap()
    );

    let bad = run(bin()
        .arg("gen")
        .arg("--config")
        .arg(&cfg_a)
        .arg("--out")
        .arg(ws.path("dc"))
        .env("DUALBIND_SEED", "not-a-number"));
    assert_eq!(code(&bad), 2);
}

#[test]
fn train_eval_predict_rankfit_roundtrip() {
    let ws = Workspace::new();
    let data = ws.gen_data();
    let rundir = ws.path("run");
    let out = train_quick(&data, &rundir, r#", "mode": "dual""#);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(rundir.join("metrics.csv").exists());
    assert!(rundir.join("best.ckpt.json").exists());
    assert!(rundir.join("summary.json").exists());
    let metrics = std::fs::read_to_string(rundir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,l_mse,l_dsm,total,val_pearson\n"));

    let ckpt = rundir.join("best.ckpt.json");
    let out = run(bin().arg("eval").arg("--ckpt").arg(&ckpt).arg("--data").arg(&data).arg("--split").arg("test"));
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("pearson=") && text.contains("rmse="), "{text}");

    let preds = run(bin().arg("predict").arg("--ckpt").arg(&ckpt).arg("--data").arg(&data).arg("--split").arg("test"));
    assert_eq!(code(&preds), 0);
    assert!(String::from_utf8_lossy(&preds.stdout).starts_with("id,prediction\n"));

    let csv = ws.path("rank.csv");
    let rf = run(bin()
        .arg("rankfit")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--split")
        .arg("train")
        .arg("--out")
        .arg(&csv));
    assert_eq!(code(&rf), 0);
    let rank = std::fs::read_to_string(&csv).unwrap();
    assert!(rank.starts_with("id,true_rank,pred_rank\n"), "{rank}");
}

#[test]
fn dsm_only_checkpoint_reports_rmse_na() {
    let ws = Workspace::new();
    let data = ws.gen_data();
    let rundir = ws.path("run");
    let out = train_quick(&data, &rundir, r#", "mode": "dsm_only""#);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(rundir.join("best.ckpt.json"))
        .arg("--data")
        .arg(&data)
        .arg("--split")
        .arg("test"));
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rmse=N/A"));
}

#[test]
fn mse_only_on_unlabeled_data_exits_2() {
    let ws = Workspace::new();
    let data = ws.gen_data();
    // strip the labeled flags from the train split
    let manifest_path = data.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    for e in manifest["entries"].as_array_mut().unwrap() {
        if e["split"] == "train" {
            e["labeled"] = serde_json::Value::Bool(false);
        }
    }
    std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();

    let out = train_quick(&data, &ws.path("mse"), r#", "mode": "mse_only""#);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no labeled samples"));

    // dsm_only ignores labels and still runs
    let out = train_quick(&data, &ws.path("dsm"), r#", "mode": "dsm_only""#);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_on_one_sample_split_exits_2() {
    let ws = Workspace::new();
    let data = ws.gen_data();
    let rundir = ws.path("run");
    assert_eq!(code(&train_quick(&data, &rundir, "")), 0);

    // shrink the test split to a single entry
    let manifest_path = data.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let entries = manifest["entries"].as_array_mut().unwrap();
    let mut seen = false;
    for e in entries.iter_mut() {
        if e["split"] == "test" {
            if seen {
                e["split"] = serde_json::Value::String("train".into());
            }
            seen = true;
        }
    }
    std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();

    let out = run(bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(rundir.join("best.ckpt.json"))
        .arg("--data")
        .arg(&data)
        .arg("--split")
        .arg("test"));
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn lambda_defaults_to_two_when_omitted() {
    let cfg: dualbind::trainer::TrainConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(cfg.lambda, 2.0);
    assert_eq!(cfg.sigma_range, [0.1, 1.0]);
}

#[test]
fn unknown_recipe_exits_2() {
    let ws = Workspace::new();
    let data = ws.gen_data();
    let out = run(bin()
        .arg("experiment")
        .arg("--recipe")
        .arg("bogus")
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(ws.path("exp")));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn semi_supervised_recipe_has_three_rows() {
    let ws = Workspace::new();
    let data = ws.gen_data();
    let out_dir = ws.path("exp");
    let out = run(bin()
        .arg("experiment")
        .arg("--recipe")
        .arg("semi_supervised")
        .arg("--epochs")
        .arg("2")
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}"); // header + 3 method rows
    assert!(lines[1].starts_with("mse_only_50,"));
    assert!(lines[2].starts_with("dual_50_plus_unlabeled,"));
    assert!(lines[3].starts_with("mse_only_100,"));
    for row in &lines[1..] {
        // mean and std columns present for both correlations
        assert_eq!(row.split(',').count(), 7, "{row}");
    }
}
