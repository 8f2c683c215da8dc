use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ticketlab"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 14] = [
    "--set", "synth.n=96",
    "--set", "synth.image_size=12",
    "--set", "model.input_size=12",
    "--set", "model.conv_channels=4",
    "--set", "model.hidden=16",
    "--set", "schedule.rounds=3",
    "--set", "schedule.epochs_per_round=1",
];

#[test]
fn gaps_on_published_table() {
    let out = bin().arg("gaps").arg(fixture("table1.csv")).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let row = |name: &str| text.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{name} in {text}"));
    let fm: Vec<&str> = row("Female-Male").split(',').collect();
    let yo: Vec<&str> = row("Ages 1-30").split(',').collect();
    assert_eq!((fm[1], fm[10]), ("1.59", "3.90"));
    assert_eq!((yo[1], yo[10]), ("24.96", "16.48"));
}

#[test]
fn missing_table_is_a_data_error() {
    let out = bin().args(["gaps", "/nonexistent/table.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_override_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--set", "optimizer.momentum=0.9", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("optimizer.momentum"));
}

#[test]
fn synth_writes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["synth", "--n", "40", "--image-size", "8", "--imbalance", "uniform", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("metadata.csv").exists());
    let images = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(images, 40);
}

#[test]
fn run_resume_report_and_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let run = bin().arg("run").args(TINY).arg("--out").arg(&dir).args(["--stop-after", "1"]).output().unwrap();
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).starts_with("incomplete: 2 of 3 levels"), "{}", stdout(&run));

    let drift = bin()
        .arg("resume")
        .args(TINY)
        .args(["--set", "optimizer.lr=0.01", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(drift.status.code(), Some(2));
    assert!(stderr(&drift).contains("optimizer.lr"), "{}", stderr(&drift));

    let resumed = bin().arg("resume").args(TINY).arg("--out").arg(&dir).output().unwrap();
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert!(stdout(&resumed).starts_with("complete: 3 of 3 levels"));

    let report_dir = tmp.path().join("tables");
    let report = bin().arg("report").arg(dir.join("ledger.json")).arg("--out").arg(&report_dir).output().unwrap();
    assert!(report.status.success(), "{}", stderr(&report));
    for name in ["subgroups.csv", "tp_table.csv", "gaps.csv", "confusion_L2.csv", "report.json"] {
        assert_eq!(
            std::fs::read(report_dir.join(name)).unwrap(),
            std::fs::read(dir.join(name)).unwrap(),
            "{name}"
        );
    }

    let eval = bin()
        .arg("eval")
        .args(TINY)
        .arg("--out")
        .arg(&dir)
        .arg("--checkpoint")
        .arg(dir.join("level_2.tfck"))
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert!(stdout(&eval).starts_with("accuracy "));
}
