use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn topoflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topoflow"))
        .args(args)
        .current_dir(dir)
        .env_remove("OPAL_SEED")
        .output()
        .expect("spawn topoflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&topoflow(&["--help"], dir.path())), 0);
    let v = topoflow(&["--version"], dir.path());
    assert_eq!(code(&v), 0);
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("topoflow 0.1.0"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&topoflow(&["no-such-command"], p)), 1);
    assert_eq!(code(&topoflow(&["gen-data", "--n", "many"], p)), 1);

    let o = topoflow(&["gen-data", "--set", "learning_rate=1"], p);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown config key `learning_rate`"));
    assert!(stderr(&o).contains("mask_project_every"), "valid keys are listed");

    fs::write(p.join("bad.cfg"), "seed = 1\nthis line has no equals sign\n").unwrap();
    let o = topoflow(&["gen-data", "--config", "bad.cfg"], p);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.cfg:2"));

    let o = topoflow(&["gen-data", "--task", "fold-shirt"], p);
    assert_eq!(code(&o), 1);
    assert!(!p.join("topoflow-out").exists(), "no output on failure");
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&topoflow(&["train", "--data", "missing.jsonl"], p)), 2);
    assert_eq!(code(&topoflow(&["gen-data", "--config", "missing.cfg"], p)), 2);

    fs::write(p.join("junk.jsonl"), "{\"schema_version\": 1}\n").unwrap();
    let o = topoflow(&["train", "--data", "junk.jsonl"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("junk.jsonl:1"));

    fs::write(p.join("junk.oplc"), b"OPLCxx").unwrap();
    assert_eq!(code(&topoflow(&["eval", "--checkpoint", "junk.oplc"], p)), 2);
}

#[test]
fn gen_data_is_seeded_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let run = |seed: &str, out: &str| {
        let o = topoflow(&["gen-data", "--n", "12", "--seed", seed, "--out", out], p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(p.join(out).join("dataset.jsonl")).unwrap()
    };
    let a = run("3", "a");
    assert_eq!(a, run("3", "b"));
    assert_ne!(a, run("4", "c"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 12);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(p.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["episodes"], 12);
    assert_eq!(manifest["task_mix"]["stack-2"], 6);
    assert_eq!(manifest["provenance"]["config"]["seed"], 3);
    assert_eq!(
        fs::read(p.join("a/manifest.json")).unwrap(),
        fs::read(p.join("b/manifest.json")).unwrap(),
        "output directory is not part of provenance"
    );
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("s.cfg"), "seed = 5\nn = 2\n").unwrap();
    let seed_of = |args: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_topoflow"));
        cmd.args(args).current_dir(p).env_remove("OPAL_SEED");
        if let Some(e) = env {
            cmd.env("OPAL_SEED", e);
        }
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_slice(&fs::read(p.join("topoflow-out/manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&["gen-data", "--n", "2"], None), 0);
    assert_eq!(seed_of(&["gen-data", "--n", "2"], Some("9")), 9);
    assert_eq!(seed_of(&["gen-data", "--config", "s.cfg"], Some("9")), 5);
    assert_eq!(seed_of(&["gen-data", "--config", "s.cfg", "--seed", "2"], Some("9")), 2);
}

#[test]
fn check_fusion_reports_and_signals_breach() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let good = topoflow::blockworld::fusion_system().to_text();
    fs::write(p.join("good.fs"), &good).unwrap();
    let o = topoflow(&["check-fusion", "good.fs"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("pentagon") && out.contains("hexagon") && out.contains("status            ok"));

    // delta tensor F_k^{ij} = [k = j] with one entry flipped on
    let bad = "n_types 2\n[F]\n0 0 0 1\n0 1 0 1\n1 0 1 1\n1 1 1 1\n0 0 1 1\n";
    let residual = topoflow::fusion::FusionSystem::parse(bad).unwrap().pentagon_residual();
    assert!(residual > 1e-6, "perturbation must break the pentagon relation");
    fs::write(p.join("bad.fs"), bad).unwrap();
    let o = topoflow(&["check-fusion", "bad.fs"], p);
    assert_eq!(code(&o), 3, "stdout: {}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("BREACH"));
    assert_eq!(code(&topoflow(&["check-fusion", "bad.fs", "--tol", "1e9"], p)), 0);

    fs::write(p.join("garbled.fs"), "n_types two\n").unwrap();
    assert_eq!(code(&topoflow(&["check-fusion", "garbled.fs"], p)), 2);
}

#[test]
fn dump_mask_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let o = topoflow(&["dump-mask"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("# provenance: {"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 8);
    let mask = topoflow::topomask::build_mask(
        &topoflow::blockworld::fusion_system(),
        1e-6,
        topoflow::policy::ModelConfig::default().mask_mode,
    );
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<f64> = row.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        for (j, c) in cells.iter().enumerate() {
            assert_eq!(*c, mask.get(i, j));
        }
    }
}

#[test]
fn bench_analytic_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = topoflow(&["bench-integrators", "--analytic"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("topoflow-out/bench_integrators.csv")).unwrap();
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 2);
    let euler: Vec<&str> = rows[0].split(',').collect();
    let rk4: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(&euler[..5], ["decay", "euler-10", "10", "10", "0.3486784401"]);
    assert_eq!(&rk4[..4], ["decay", "rk4-4", "4", "16"]);
    let rk4_err: f64 = rk4[6].parse().unwrap();
    assert!(rk4_err < 2e-5);
}

/// Small end-to-end pipeline: data, training, sampling, evaluation,
/// ablation and rendering all produce well-formed output.
#[test]
fn pipeline_small() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let small = ["--set", "d_model=16", "--set", "d_ff=32"];
    let ok = |args: &[&str]| {
        let o = topoflow(args, p);
        assert_eq!(code(&o), 0, "{:?}: {}", args, stderr(&o));
        o
    };
    ok(&["gen-data", "--n", "16", "--out", "d"]);
    let mut train = vec!["train", "--data", "d/dataset.jsonl", "--epochs", "2", "--out", "t"];
    train.extend(small);
    let o = ok(&train);
    assert!(stderr(&o).contains("epoch 2/2"));
    let curve = fs::read_to_string(p.join("t/loss_curve.csv")).unwrap();
    assert_eq!(data_rows(&curve).len(), 2);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("t/train_report.json")).unwrap()).unwrap();
    assert_eq!(report["variant"], "full");
    assert_eq!(report["provenance"]["inputs"][0]["role"], "dataset");

    ok(&["sample", "--checkpoint", "t/model.oplc", "--n-episodes", "2", "--out", "s"]);
    let samples = fs::read_to_string(p.join("s/samples.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), 4);
    ok(&["sample", "--checkpoint", "t/model.oplc", "--observations", "d/dataset.jsonl", "--out", "s2"]);
    assert_eq!(fs::read_to_string(p.join("s2/samples.jsonl")).unwrap().lines().count(), 16);

    ok(&["eval", "--checkpoint", "t/model.oplc", "--n-episodes", "3", "--integrator", "euler", "--out", "e"]);
    let metrics = fs::read_to_string(p.join("e/metrics.csv")).unwrap();
    let header = metrics.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("task,model_variant,atp_mean,violation_rate,d_phys_mean,fn_evals,wall_ms"));
    let rows = data_rows(&metrics);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').nth(5) == Some("10")));

    let mut ablate = vec!["ablate", "--data", "d/dataset.jsonl", "--epochs", "1", "--n-episodes", "2", "--out", "a"];
    ablate.extend(small);
    ok(&ablate);
    let table = fs::read_to_string(p.join("a/ablation.csv")).unwrap();
    let rows = data_rows(&table);
    assert_eq!(rows.len(), 8);
    let variants: Vec<&str> = rows.iter().take(4).map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, ["full", "NT", "NR", "NH"]);

    let o = ok(&["render", "a/ablation.csv", "--plot", "plots"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("NH"));
    assert!(p.join("plots/ablation_atp.svg").exists());
    ok(&["render", "t/loss_curve.csv", "--plot", "plots"]);
    assert!(p.join("plots/loss_curve.svg").exists());

    ok(&["bench-integrators", "--checkpoint", "t/model.oplc", "--n-episodes", "1", "--out", "b"]);
    let bench = fs::read_to_string(p.join("b/bench_integrators.csv")).unwrap();
    assert_eq!(data_rows(&bench).len(), 4);
}
