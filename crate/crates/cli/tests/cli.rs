use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
run_synth = true
synth_images = 120
folds = 3
epochs = 1
null_samples = 500
attributes = mouth
architecture = conv:4:5:2:2,relu,pool:2:2,conv:4:3:1:1,relu,pool:3:3,fc:8,relu,fc:2,softmax
out_dir = out
";

fn attrivis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrivis"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "run.cfg"])
        .args(args)
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    dir
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.starts_with("error kind="), "{stdout}");
    stdout
}

#[test]
fn run_all_writes_one_row_per_fold_plus_summary() {
    let dir = setup(CONFIG);
    let out = attrivis(dir.path(), &["run-all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = fs::read_to_string(dir.path().join("out/mouth/results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "attribute,fold,acc_cnn,acc_svm,corr_cnn,acc_human_mean,corr_human_mean");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("mouth,all,"));
    let sig = fs::read_to_string(dir.path().join("out/mouth/significance.csv")).unwrap();
    assert!(sig.starts_with("attribute,metric,observed,critical_95,p_value,significant_vs_chance,significant_vs_human\n"));

    let pngs = |dir: &Path| {
        let mut v: Vec<String> = fs::read_dir(dir.join("out/mouth"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
            .filter(|n| n.ends_with(".png"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(
        pngs(dir.path()),
        ["mouth_0_full.png", "mouth_0_negative.png", "mouth_0_positive.png", "mouth_1_full.png", "mouth_1_negative.png", "mouth_1_positive.png"]
    );

    for f in pngs(dir.path()) {
        fs::remove_file(dir.path().join("out/mouth").join(f)).unwrap();
    }
    assert!(attrivis(dir.path(), &["visualize", "--mode", "positive"]).status.success());
    assert_eq!(pngs(dir.path()), ["mouth_0_positive.png", "mouth_1_positive.png"]);
    assert!(attrivis(dir.path(), &["visualize", "--mode", "all"]).status.success());
    assert_eq!(pngs(dir.path()).len(), 6);
}

#[test]
fn evaluate_refuses_incomplete_fold_assignment() {
    let dir = setup(CONFIG);
    for cmd in ["synth", "preprocess", "train"] {
        assert!(attrivis(dir.path(), &[cmd]).status.success(), "{cmd}");
    }
    assert!(attrivis(dir.path(), &["evaluate"]).status.success());
    let labels = dir.path().join("out/mouth/labels.csv");
    let text = fs::read_to_string(&labels).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = 1 + lines[1..].iter().position(|l| !l.ends_with(',')).unwrap();
    let cut = lines[row].rfind(',').unwrap();
    lines[row].truncate(cut + 1);
    fs::write(&labels, lines.join("\n") + "\n").unwrap();
    let line = error_line(&attrivis(dir.path(), &["evaluate"]));
    assert!(line.contains("kind=InvalidSplit"), "{line}");
}

#[test]
fn downstream_commands_name_the_missing_producer() {
    let dir = setup(CONFIG);
    let line = error_line(&attrivis(dir.path(), &["train"]));
    assert!(line.contains("kind=MissingArtifact") && line.contains("preprocess"), "{line}");
    let line = error_line(&attrivis(dir.path(), &["preprocess"]));
    assert!(line.contains("kind=MissingArtifact") && line.contains("synth"), "{line}");
}

#[test]
fn bad_config_is_rejected() {
    let dir = setup("epochs = 2\ncolour = blue\n");
    let line = error_line(&attrivis(dir.path(), &["synth"]));
    assert!(line.contains("kind=ParseError") && line.contains("colour"), "{line}");
}

#[test]
fn flags_override_the_config() {
    let dir = setup(CONFIG);
    assert!(attrivis(dir.path(), &["--out", "elsewhere", "--seed", "9", "synth"]).status.success());
    assert!(dir.path().join("elsewhere/data/manifest.csv").exists());
    assert!(!dir.path().join("out").exists());
}
