use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dcq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcq"))
        .args(args)
        .output()
        .expect("spawn dcq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn result_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find(|l| l.starts_with("RESULT "))
        .unwrap_or_else(|| panic!("no RESULT line in {:?}", stdout(o)))
        .to_string()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Temp dir holding a small corpus at `c.dcqt`.
fn corpus(images: usize) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.dcqt");
    let n = images.to_string();
    let o = dcq(&["corpus", "-o", p(&path), "--images", &n, "--height", "16", "--width", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, path)
}

fn compressed(dir: &TempDir, input: &Path) -> (PathBuf, Output) {
    let out = dir.path().join("c.dcqz");
    let o = dcq(&["compress", p(input), "-o", p(&out), "--budget-ipc", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    (out, o)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(dcq(&["--help"]).status.code(), Some(0));
    assert_eq!(dcq(&["--version"]).status.code(), Some(0));
    assert_eq!(dcq(&["compress", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(dcq(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dcq(&[]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_one_and_names_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.dcqt");
    let out = dir.path().join("x.dcqz");
    let o = dcq(&["compress", p(&missing), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.dcqt"), "{}", stderr(&o));
}

#[test]
fn invalid_flag_values_exit_one() {
    let (dir, input) = corpus(2);
    let out = dir.path().join("x.dcqz");
    for extra in [
        &["--bits", "9"][..],
        &["--bits", "1"],
        &["--patch", "0x5"],
        &["--refine", "sometimes"],
        &["--entropy", "maybe"],
        &["--budget-ipc", "0"],
    ] {
        let mut args = vec!["compress", p(&input), "-o", p(&out)];
        args.extend_from_slice(extra);
        let o = dcq(&args);
        assert_eq!(o.status.code(), Some(1), "{extra:?}: {}", stderr(&o));
    }
}

#[test]
fn round_trip_and_inspect_agree_with_compress() {
    let (dir, input) = corpus(6);
    let (archive, o) = compressed(&dir, &input);
    let line = result_line(&o);
    let on_disk = std::fs::metadata(&archive).unwrap().len();
    assert_eq!(field(&line, "bytes").parse::<u64>().unwrap(), on_disk);
    assert_eq!(field(&line, "total_bits").parse::<u64>().unwrap(), 8 * on_disk);
    assert!(field(&line, "total_bits").parse::<u64>().unwrap() <= field(&line, "budget_bits").parse().unwrap());

    let i = dcq(&["inspect", p(&archive)]);
    assert!(i.status.success(), "{}", stderr(&i));
    assert_eq!(stdout(&i).lines().next().unwrap(), "version=1");
    let iline = result_line(&i);
    for key in [
        "groups",
        "bits",
        "images",
        "size_indices_bits",
        "size_params_bits",
        "size_payload_bits",
        "size_header_bits",
        "total_bits",
        "bytes",
    ] {
        assert_eq!(field(&line, key), field(&iline, key), "{key}");
    }

    let restored = dir.path().join("r.dcqt");
    let d = dcq(&["decompress", p(&archive), "-o", p(&restored), "--reference", p(&input)]);
    assert!(d.status.success(), "{}", stderr(&d));
    let dline = result_line(&d);
    assert_eq!(field(&dline, "images"), "6");
    let mse: f64 = field(&dline, "pixel_mse").parse().unwrap();
    assert!(mse > 0.0 && mse < 0.05, "{mse}");
    assert!(restored.exists());
}

#[test]
fn corrupt_and_truncated_archives_exit_three() {
    let (dir, input) = corpus(3);
    let (archive, _) = compressed(&dir, &input);
    let bytes = std::fs::read(&archive).unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let truncated = &bytes[..bytes.len() - 7];
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';

    for (name, data) in [("flipped", &flipped[..]), ("truncated", truncated), ("magic", &bad_magic[..]), ("empty", &[][..])] {
        let path = dir.path().join(format!("{name}.dcqz"));
        std::fs::write(&path, data).unwrap();
        let out = dir.path().join("o.dcqt");
        for cmd in ["inspect", "decompress"] {
            let o = if cmd == "inspect" {
                dcq(&[cmd, p(&path)])
            } else {
                dcq(&[cmd, p(&path), "-o", p(&out)])
            };
            assert_eq!(o.status.code(), Some(3), "{cmd} {name}: {}", stderr(&o));
        }
    }
}

#[test]
fn infeasible_budget_exits_two() {
    // Twenty 8-bit images cannot fit in one image worth of 32-bit values.
    let (dir, input) = corpus(20);
    let o = dcq(&["compress", p(&input), "-o", p(&dir.path().join("y.dcqz")), "--bits", "8"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("infeasible"));
}

#[test]
fn sweep_bits_emits_one_row_per_method_and_width() {
    let (dir, input) = corpus(3);
    let csv = dir.path().join("s.csv");
    let o = dcq(&["sweep", p(&input), "--bits-list", "2,3", "-o", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("method,bits,groups,pixel_mse"));
    assert_eq!(lines.len(), 1 + 4 * 2);
    assert_eq!(field(&result_line(&o), "rows"), "8");
}

#[test]
fn sweep_groups_and_determinism() {
    let (dir, input) = corpus(3);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let o = dcq(&["sweep", p(&input), "--mode", "groups", "--groups-list", "1,4,16", "-o", p(path)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    let text = String::from_utf8(text).unwrap();
    let groups: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(groups, ["1", "4", "16"]);
}

#[test]
fn sweep_without_output_writes_csv_to_stdout() {
    let (_dir, input) = corpus(2);
    let o = dcq(&["sweep", p(&input), "--bits-list", "4", "--methods", "paq"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("paq,4,")));
}

#[test]
fn config_file_supplies_defaults_and_flags_override_it() {
    let (dir, input) = corpus(4);
    let cfg = dir.path().join("dcq.conf");
    std::fs::write(&cfg, "# defaults\nbits = 4\npatch = 4x4\n").unwrap();
    let out = dir.path().join("x.dcqz");

    let o = dcq(&["--config", p(&cfg), "compress", p(&input), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&result_line(&o), "bits"), "4");
    let i = result_line(&dcq(&["inspect", p(&out)]));
    assert_eq!(field(&i, "patch"), "4x4");

    let o = dcq(&["--config", p(&cfg), "compress", p(&input), "-o", p(&out), "--bits", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&result_line(&o), "bits"), "3");

    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let o = dcq(&["--config", p(&cfg), "compress", p(&input), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn refine_writes_a_bundle() {
    let (dir, input) = corpus(2);
    let out = dir.path().join("r.dcqt");
    let o = dcq(&["refine", p(&input), "-o", p(&out), "--refine-iterations", "5", "--when", "after", "--groups", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = result_line(&o);
    let (a, b): (f64, f64) = (
        field(&line, "mean_initial_loss").parse().unwrap(),
        field(&line, "mean_final_loss").parse().unwrap(),
    );
    assert!(b <= a);
    assert!(out.exists());
}

#[test]
fn compress_with_refinement_stays_within_budget() {
    let (dir, input) = corpus(3);
    let out = dir.path().join("x.dcqz");
    let o = dcq(&["compress", p(&input), "-o", p(&out), "--refine", "both", "--refine-iterations", "3", "--post-iterations", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = result_line(&o);
    assert!(field(&line, "total_bits").parse::<u64>().unwrap() <= field(&line, "budget_bits").parse().unwrap());
}

#[test]
fn thread_count_from_environment() {
    let (dir, input) = corpus(2);
    let out = dir.path().join("x.dcqz");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_dcq"))
            .args(["compress", p(&input), "-o", p(&out)])
            .env("DCQ_THREADS", threads)
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    assert_eq!(run("zero").status.code(), Some(1));
}
