use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"version = 1
seed = 3

[data]
test_samples = 3
pretrain_samples = 6
pretrain_held_out = 2

[data.scene]
grid = 16
min_vehicles = 1
max_vehicles = 2
placement_radius = 6.72
lidar_range = 5.12
radar_range = 7.68
intensity_d0 = 4.0
clutter_radius = 2.0

[[data.clients]]
id = 0
keep_ratio = 1.0
samples = 3
modality = { drop_lidar = 0.0, drop_radar = 0.5 }

[[data.clients]]
id = 1
keep_ratio = 0.5
samples = 3

[model]
grid = 16
width = 2
attention_dim = 2
rpn_hidden = 4
hidden = 4
post_nms = 8

[ae.model]
grid = 16

[ae.pretrain]
epochs = 1
"#;

fn fedbev(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedbev"));
    cmd.args(args).arg("--preset").arg("desk-lite").arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("spawn fedbev")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", "\n[fl]\nrounds = 2\neval_every = 1\n");
    let run = dir.path().join("run");
    for step in ["gen-data", "pretrain-ae", "train", "eval"] {
        let o = fedbev(&[step], Some(&cfg), &run);
        assert_eq!(code(&o), 0, "{step}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(run.join("train/model.fbwt").exists());
    assert!(run.join("train/rounds.csv").exists());

    let rep = dir.path().join("rep");
    let o = Command::new(env!("CARGO_BIN_EXE_fedbev"))
        .args(["report", run.to_str().unwrap(), "--preset", "desk-lite", "--out"])
        .arg(&rep)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rep.join("report/summary.json").exists());
}

#[test]
fn missing_config_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fedbev(&["train"], None, dir.path())), 2);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "unknown.toml", "\n[fl]\nturbo = true\n");
    assert_eq!(code(&fedbev(&["gen-data"], Some(&unknown), dir.path())), 2);

    let unversioned = dir.path().join("unversioned.toml");
    fs::write(&unversioned, TINY.replacen("version = 1\n", "", 1)).unwrap();
    assert_eq!(code(&fedbev(&["gen-data"], Some(&unversioned), dir.path())), 2);

    let absent = dir.path().join("absent.toml");
    assert_ne!(code(&fedbev(&["gen-data"], Some(&absent), dir.path())), 0);

    let no_sweep = write_config(dir.path(), "plain.toml", "");
    assert_eq!(code(&fedbev(&["sweep"], Some(&no_sweep), dir.path())), 2);
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", "");
    let run = dir.path().join("empty");
    assert_eq!(code(&fedbev(&["train"], Some(&cfg), &run)), 4);
    assert_eq!(code(&fedbev(&["eval"], Some(&cfg), &run)), 4);
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "hot.toml",
        "\n[fl]\nrounds = 2\n\n[fl.adam]\nlearning_rate = 1e200\n",
    );
    let run = dir.path().join("run");
    for step in ["gen-data", "pretrain-ae"] {
        assert_eq!(code(&fedbev(&[step], Some(&cfg), &run)), 0);
    }
    assert_eq!(code(&fedbev(&["train"], Some(&cfg), &run)), 3);
}
