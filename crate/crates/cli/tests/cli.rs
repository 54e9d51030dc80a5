use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
name = "t"
seed = 4
trials = 3
tokens_per_trial = 48
snr_db = [5.0, 25.0]

[codebook.planted]
k = 16
d = 4
clusters = 4
seed = 2

[[channels]]
id = "awgn"
kind = "awgn"

[[channels]]
id = "fir"
kind = "fir"
taps = [[1.0, 0.0], [0.3, 0.1]]

[[systems]]
id = "wave"
kind = "wave"
init = { l = 12, seed = 1 }

[[systems]]
id = "bpsk"
kind = "digital"
modulation = "bpsk"
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("cfg.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_semwave"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows of a metrics CSV (schema line and header skipped).
fn data_rows(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# semwave-metrics v1"), "{}", path.display());
    lines.skip(1).map(str::to_string).collect()
}

#[test]
fn missing_codebook_file_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("[codebook.planted]\nk = 16\nd = 4\nclusters = 4\nseed = 2", "[codebook]\npath = \"nowhere.swcb\"");
    let o = run(tmp.path(), &cfg, &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("codebook.path"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &format!("colour = 3\n{BASE}"), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn eval_writes_one_row_per_trial_and_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), BASE, &["eval"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("out/t-eval");
    for system in ["wave", "bpsk"] {
        for channel in ["awgn", "fir"] {
            let rows = data_rows(&dir.join(system).join(format!("{channel}.csv")));
            assert_eq!(rows.len(), 3 * 2, "{system}/{channel}");
        }
    }
    assert_eq!(data_rows(&dir.join("summary.csv")).len(), 2 * 2 * 2);
}

#[test]
fn trials_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), BASE, &["eval", "--trials", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = data_rows(&tmp.path().join("out/t-eval/wave/awgn.csv"));
    assert_eq!(rows.len(), 2);
}

#[test]
fn corrupted_adjoint_fails_gradcheck_with_numeric_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "\n[gradcheck]\nchannels = [\"fir\"]\nl = 6\ncoordinates = 12\n";
    let ok = run(tmp.path(), &format!("{BASE}{extra}"), &["gradcheck"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let bad = run(tmp.path(), &format!("{BASE}{extra}corrupt_adjoint = true\n"), &["gradcheck"]);
    assert_eq!(bad.status.code(), Some(3), "{}", stderr(&bad));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn multicast_needs_two_receivers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("id = \"awgn\"\nkind = \"awgn\"", "id = \"awgn\"\nkind = \"awgn\"\ngroup = \"g\"");
    let o = run(tmp.path(), &cfg, &["multicast"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("group"), "{}", stderr(&o));

    let both = cfg.replace("taps = [[1.0, 0.0], [0.3, 0.1]]", "taps = [[1.0, 0.0], [0.3, 0.1]]\ngroup = \"g\"");
    let o = run(tmp.path(), &both, &["multicast", "--trials", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // Group mean followed by one row per receiver, for each SNR.
    let rows = data_rows(&tmp.path().join("out/t-multicast/summary.csv"));
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows[0].starts_with("g,"));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let train = |steps: u64| format!("{BASE}\n[train]\nchannel = \"fir\"\ninit = {{ l = 6, seed = 3 }}\nsteps = {steps}\nlearning_rate = 0.01\ncheckpoint_every = 4\n");
    let a = tempfile::tempdir().unwrap();
    let o = run(a.path(), &train(12), &["train"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let b = tempfile::tempdir().unwrap();
    assert!(run(b.path(), &train(8), &["train"]).status.success());
    let o = run(b.path(), &train(12), &["train", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let read = |d: &Path, f: &str| fs::read(d.join("out/t-train").join(f)).unwrap();
    assert_eq!(read(a.path(), "final.swck"), read(b.path(), "final.swck"));
    assert_eq!(read(a.path(), "loss.csv"), read(b.path(), "loss.csv"));
}

#[test]
fn info_runs_without_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_semwave"))
        .args(["info", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("info/table_ii.csv")).unwrap();
    assert!(text.contains("ldpc-r0.33"));
}
