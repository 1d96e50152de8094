use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_moflow");

const SMALL: &str = r#"
seed = 5
[model]
vocab = { atom_types = ["C", "N", "O", "F"], n_max = 6 }
[model.bond]
n_coupling_layers = 2
conv_hidden_dims = [8]
[model.atom]
n_coupling_layers = 2
gconv_dim = 8
mlp_hidden_dims = [8]
[train]
epochs = 1
batch_size = 16
[generate]
count = 40
[explore]
interpolation_count = 4
grid_per_side = 3
[optimize]
steps = 3
seeds = 2
deltas = [0.0, 0.4]
[optimize.regressor]
epochs = 2
[selfcheck]
trials = 1
"#;

fn moflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let o = moflow(dir.path(), &["preprocess", "--config", "run.toml", "--synthesize", "60", "--out", "data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn generate_is_byte_identical_for_equal_seeds() {
    let dir = setup();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = moflow(p, &["generate", "--config", "run.toml", "--dataset", "data/dataset.smi", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["generated.smi", "metrics.txt", "metrics.json", "manifest.json"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    let o = moflow(p, &["generate", "--config", "run.toml", "--seed", "6", "--out", "c"]);
    assert!(o.status.success());
    assert_ne!(fs::read(p.join("a/generated.smi")).unwrap(), fs::read(p.join("c/generated.smi")).unwrap());
}

#[test]
fn train_then_downstream_commands() {
    let dir = setup();
    let p = dir.path();
    let common = ["--config", "run.toml", "--dataset", "data/dataset.smi"];
    let o = moflow(p, &[&["train"][..], &common, &["--out", "tr"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(p.join("tr/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let with_ckpt = [&common[..], &["--checkpoint", "tr/model.ckpt"]].concat();
    let cases: [(&str, &[&str]); 7] = [
        ("reconstruct", &["reconstruct.txt"]),
        ("encode", &["encoded.jsonl"]),
        ("interpolate", &["interpolation.smi", "interpolation_similarity.csv"]),
        ("grid", &["grid.smi", "grid_similarity.csv"]),
        ("optimize", &["trajectory.tsv"]),
        ("constrained-optimize", &["constrained.tsv", "summary.txt"]),
        ("generate", &["generated.smi"]),
    ];
    for (cmd, files) in cases {
        let o = moflow(p, &[&[cmd][..], &with_ckpt, &["--out", cmd]].concat());
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files.iter().chain(&["manifest.json"]) {
            assert!(p.join(cmd).join(f).exists(), "{cmd} missing {f}");
        }
    }
    assert_eq!(fs::read_to_string(p.join("interpolate/interpolation.smi")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(p.join("grid/grid_similarity.csv")).unwrap().lines().count(), 3);
    // seed plus three ascent steps, after the header
    assert_eq!(fs::read_to_string(p.join("optimize/trajectory.tsv")).unwrap().lines().count(), 5);
    let encoded = fs::read_to_string(p.join("encode/encoded.jsonl")).unwrap();
    assert_eq!(encoded.lines().count(), 60);
    let first: serde_json::Value = serde_json::from_str(encoded.lines().next().unwrap()).unwrap();
    assert_eq!(first["z_atom"].as_array().unwrap().len(), 6 * 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("reconstruct/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "reconstruct");
    assert!(manifest["checkpoint_sha256"].is_string());
}

#[test]
fn metrics_counts_blank_lines_as_invalid() {
    let dir = setup();
    let p = dir.path();
    fs::write(p.join("gen.smi"), "CCO\n\nCCO\nC(C)(C)(C)(C)C\n").unwrap();
    let o = moflow(p, &["metrics", "--seed", "1", "--input", "gen.smi", "--out", "m"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(p.join("m/metrics.txt")).unwrap();
    assert!(text.contains("validity_count=2/4"), "{text}");
    assert!(text.contains("uniqueness_count=1/2"), "{text}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = moflow(p, &["generate", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    fs::write(p.join("bad.toml"), "[model.atom]\ngconv_dim = \"wide\"\n").unwrap();
    let o = moflow(p, &["generate", "--config", "bad.toml", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.atom.gconv_dim"));

    fs::write(p.join("unknown.toml"), "[generate]\ncounts = 3\n").unwrap();
    let o = moflow(p, &["generate", "--config", "unknown.toml", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generate"));

    let o = moflow(p, &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    let o = moflow(p, &["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = moflow(p, &["generate", "--seed", "1", "--checkpoint", "absent.ckpt", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(p.join("broken.smi"), "CC\nC1CC\n").unwrap();
    let o = moflow(p, &["reconstruct", "--seed", "1", "--dataset", "broken.smi", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.smi:2"));
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("run.toml"), SMALL).unwrap();
    let o = moflow(p, &["selfcheck", "--config", "run.toml", "--out", "sc"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    assert!(!stdout.contains("FAIL"));
    assert!(fs::read_to_string(p.join("sc/selfcheck.txt")).unwrap().contains("invertibility"));
}
