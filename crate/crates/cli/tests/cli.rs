use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.train_size=24",
    "data.valid_size=6",
    "data.test_size=5",
    "data.max_len=6",
    "data.max_target_len=8",
    "model.model_width=16",
    "model.heads=2",
    "model.ff_width=16",
    "model.converter_depth=1",
    "model.decoder_depth=1",
    "model.feature_width=8",
    "model.channel_hidden=16",
    "model.symbol_width=4",
    "model.intermediate_width=8",
    "model.comp_channels=4",
    "model.comp_depth=2",
    "model.disc_channels=2",
    "model.probe_hidden=8",
    "train.batch_size=2",
    "stage1.steps=3",
    "stage2.steps=2",
    "stage3.steps=2",
    "train.valid_size=4",
    "sweep.snrs=0,12",
];

fn ross(args: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ross"));
    cmd.args(args).arg("--out").arg(out).args(TINY);
    cmd.output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn unknown_flag_is_a_usage_error_naming_it() {
    let o = Command::new(env!("CARGO_BIN_EXE_ross")).args(["sweep", "--frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("--frobnicate"));
}

#[test]
fn unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = ross(&["gen-data", "data.nonsense=3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    assert!(err.contains("data.nonsense") && err.contains("data.train_size") && err.contains("sweep.snrs"), "{err}");
}

#[test]
fn config_file_then_overrides_last_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "# tiny\n[data]\ntrain_size = 9 # inline\n\n[run]\nseed = 4\n").unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_ross"))
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["data.valid_size=2", "data.test_size=2", "data.train_size=5", "data.train_size=7"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let resolved = text(&read(out.join("config.resolved.ini")));
    assert!(resolved.contains("train_size = 7") && resolved.contains("seed = 4"), "{resolved}");
    assert!(text(&read(out.join("data/train.corpus"))).lines().count() == 8);
}

#[test]
fn train_without_prior_stage_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ross(&["gen-data"], dir.path()).status.code(), Some(0));
    let o = ross(&["train", "--stage", "2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("stage1.ckpt"), "{}", text(&o.stderr));
    let o = ross(&["train", "--stage", "4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn self_test_fault_injection_exits_3() {
    let o = Command::new(env!("CARGO_BIN_EXE_ross")).args(["self-test", "--fault", "matmul"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    let table = text(&o.stdout);
    assert!(table.lines().any(|l| l.contains("matmul") && l.contains("FAIL")), "{table}");
    let o = Command::new(env!("CARGO_BIN_EXE_ross")).args(["self-test", "--fault", "nope"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn self_test_passes() {
    let o = Command::new(env!("CARGO_BIN_EXE_ross")).arg("self-test").output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stdout));
    let table = text(&o.stdout);
    for group in ["op ", "block ", "loss ", "oracle ", "channel ", "digital "] {
        assert!(table.lines().any(|l| l.starts_with(group)), "no {group} rows");
    }
    assert!(!table.contains("FAIL"));
}

#[test]
fn full_run_is_bit_identical_across_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for args in [
            &["gen-data"][..],
            &["train", "--stage", "1"],
            &["train", "--stage", "2"],
            &["train", "--stage", "3"],
            &["sweep"],
            &["eval", "--channel", "awgn", "--snr", "inf"],
        ] {
            let o = ross(args, d.path());
            assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o.stderr));
        }
    }
    let files = [
        "data/train.corpus",
        "data/valid.corpus",
        "data/test.corpus",
        "stage1.ckpt",
        "stage2.ckpt",
        "stage3.ckpt",
        "stage1_losses.csv",
        "stage3_losses.csv",
        "results.csv",
        "eval.csv",
    ];
    for f in files {
        assert_eq!(read(dirs[0].path().join(f)), read(dirs[1].path().join(f)), "{f} differs");
    }
    let csv = text(&read(dirs[0].path().join("results.csv")));
    // 4 systems × 2 channels × 2 SNRs plus the header
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.starts_with("system,channel,snr_db,token_acc,ngram,sts_proxy,n,seed\n"));

    // a resumed stage continues from the stored step count
    let o = ross(&["train", "--stage", "1", "--resume", "stage1.steps=5"], dirs[0].path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let losses = text(&read(dirs[0].path().join("stage1_losses.csv")));
    assert!(losses.lines().skip(1).all(|l| l.starts_with('3') || l.starts_with('4')), "{losses}");
}
