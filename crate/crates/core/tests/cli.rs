use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dawog::cli::{file_sha256, RunConfig};
use dawog::eval::report;

fn dawog(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dawog"))
        .env_remove("DAWOG_OUT")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Relative path to sha256 for every file under `root`.
fn hashes(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, file_sha256(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const QUICK: &[&str] = &[
    "--trajectories",
    "200",
    "--total-updates",
    "1000",
    "--metrics-interval",
    "100",
    "--episodes",
    "40",
];

fn with_quick<'a>(args: &[&'a str]) -> Vec<&'a str> {
    QUICK.iter().copied().chain(args.iter().copied()).collect()
}

#[test]
fn gen_data_is_reproducible_and_validated() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = dawog(d.path(), &with_quick(&["gen-data"]));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ha = hashes(a.path());
    assert_eq!(ha, hashes(b.path()));
    assert!(ha.contains_key("data/grid_wall/behavior/0/dataset.jsonl"));
    assert!(ha.contains_key("data/grid_wall/behavior/0/dataset.json"));
    // the printed hashes are the file hashes
    let o = dawog(a.path(), &with_quick(&["gen-data"]));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains(&ha["data/grid_wall/behavior/0/dataset.jsonl"]));
    assert_eq!(code(&dawog(a.path(), &["--trajectories", "0", "gen-data"])), 1);
    assert_eq!(code(&dawog(a.path(), &["--layout", "custom", "gen-data"])), 1);
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&dawog(out, &with_quick(&["eval"]))), 1, "eval before train");
    assert_eq!(code(&dawog(out, &with_quick(&["gen-data"]))), 0);
    let data = out.join("data/grid_wall/behavior/0/dataset.jsonl");
    let o = dawog(out, &with_quick(&["train", "--dataset", data.to_str().unwrap()]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("train/grid_wall/dawog/0");
    let full = fs::read(run.join("metrics_grid_wall_dawog_0.csv")).unwrap();
    // a regenerated dataset is the same dataset
    assert_eq!(code(&dawog(out, &with_quick(&["train"]))), 0);
    assert_eq!(fs::read(run.join("metrics_grid_wall_dawog_0.csv")).unwrap(), full);
    report::WEIGHTS.read(&run.join("weights_grid_wall_dawog_0.csv")).unwrap();

    assert_eq!(code(&dawog(out, &with_quick(&["train", "--dataset", "/no/such/file"]))), 1);
    assert_eq!(code(&dawog(out, &with_quick(&["--variant", "geaw", "train", "--resume"]))), 1);
    assert_eq!(code(&dawog(out, &with_quick(&["train", "--stop-at", "7"]))), 1);

    fs::remove_file(run.join("metrics_grid_wall_dawog_0.csv")).unwrap();
    assert_eq!(code(&dawog(out, &with_quick(&["train", "--stop-at", "500"]))), 0);
    assert!(!run.join("metrics_grid_wall_dawog_0.csv").exists());
    assert_eq!(code(&dawog(out, &with_quick(&["train", "--resume"]))), 0);
    assert_eq!(fs::read(run.join("metrics_grid_wall_dawog_0.csv")).unwrap(), full);

    assert_eq!(code(&dawog(out, &with_quick(&["eval"]))), 0);
    let rows = report::EVAL.read(&out.join("eval/grid_wall/dawog/0/eval_grid_wall_dawog_0.csv")).unwrap();
    assert_eq!(rows[0][3], "40");
    let eps = report::EPISODES
        .read(&out.join("eval/grid_wall/dawog/0/episodes_grid_wall_dawog_0.csv"))
        .unwrap();
    assert_eq!(eps.len(), 40);
}

#[test]
fn config_file_round_trips_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = dawog(out, &["--regions", "7", "--seeds", "1,2", "--entropy", "fade", "print-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.regions, 7);
    assert_eq!(cfg.seeds, vec![1, 2]);
    let path = out.join("run.toml");
    fs::write(&path, &text).unwrap();
    let again = dawog(out, &["--config", path.to_str().unwrap(), "print-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
    let over = dawog(out, &["--config", path.to_str().unwrap(), "--regions", "3", "print-config"]);
    assert_eq!(RunConfig::from_toml(&String::from_utf8(over.stdout).unwrap()).unwrap().regions, 3);

    fs::write(&path, "regions = 4\nbogus = true\n").unwrap();
    assert_eq!(code(&dawog(out, &["--config", path.to_str().unwrap(), "print-config"])), 1);
    assert_eq!(code(&dawog(out, &["--config", "/no/such.toml", "print-config"])), 1);
    assert_eq!(code(&dawog(out, &["--beta", "-1", "print-config"])), 1);
    assert_eq!(code(&dawog(out, &["--help"])), 0);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dawog"))
        .env("DAWOG_OUT", dir.path())
        .args(with_quick(&["gen-data"]))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("data/grid_wall/behavior/0/dataset.jsonl").exists());
}

#[test]
fn oracle_study_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let small = ["--oracle-grids", "3", "--oracle-max-side", "5", "study", "oracle"];
    let o = dawog(out, &small);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = report::ORACLE
        .read(&out.join("oracle/custom/geaw/0/oracle_custom_geaw_0.csv"))
        .unwrap();
    assert_eq!(rows[0][0], "3");
    assert_eq!(rows[0][3], "0");
    // TD that cannot settle is reported as a violation
    let stuck: Vec<&str> = ["--value-learning-rate", "1e-6", "--inner-iterations", "1"]
        .into_iter()
        .chain(small)
        .collect();
    let o = dawog(out, &stuck);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("violation"));
}

#[test]
fn every_study_writes_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let args = with_quick(&[
        "--seeds",
        "5",
        "--occupancy-episodes",
        "30",
        "--region-pairs",
        "50",
        "--bias-goals",
        "5",
        "--mc-rollouts",
        "10",
        "--offsets",
        "1,3",
        "--sweep-regions",
        "2",
        "--sweep-betas",
        "0:0,10:10",
        "--variants",
        "gcsl,dawog",
    ]);
    for (study, schema, variant) in [
        ("eval", report::EVAL, "gcsl"),
        ("occupancy", report::OCCUPANCY, "geaw"),
        ("region10", report::REGION10, "dawog"),
        ("bias", report::BIAS, "dawog"),
        ("offsets", report::OFFSETS, "dawog"),
        ("sweep", report::SWEEP, "dawog"),
    ] {
        let mut a = args.clone();
        a.extend(["study", study]);
        let o = dawog(out, &a);
        assert_eq!(code(&o), 0, "{study}: {}", String::from_utf8_lossy(&o.stderr));
        let name = format!("{study}_grid_wall_{variant}_5.csv");
        let rows = schema
            .read(&out.join(study).join("grid_wall").join(variant).join("5").join(name))
            .unwrap();
        assert!(!rows.is_empty(), "{study}");
    }
}
