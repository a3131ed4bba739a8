//! End-to-end tests of the `hrv` binary: every subcommand through its
//! public flag surface, the exit-code contract, and the byte-identity
//! guarantee between online builds and trace rebuilds.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrv"))
        .args(args)
        .output()
        .expect("spawning the hrv binary")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "hrv {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is utf-8")
}

/// Asserts the exit code and that stderr names the problem.
fn assert_exit(args: &[&str], want: i32, needle: &str) {
    let out = run(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        out.status.code(),
        Some(want),
        "hrv {args:?} exited wrong:\n{stderr}"
    );
    assert!(
        stderr.contains(needle),
        "hrv {args:?} stderr {stderr:?} does not mention {needle:?}"
    );
}

/// A three-concept vocabulary small enough to keep every test fast; one
/// word is multi-token to exercise sub-token handling end to end.
fn write_vocab(dir: &Path) -> String {
    let path = dir.join("vocab.tsv");
    fs::write(
        &path,
        "Color\twhite,red,blue\nSky\tcloud,sun,storm\nPlants\tfern,moss,oak tree#2\n",
    )
    .expect("writing vocab fixture");
    path.to_str().expect("utf-8 path").to_string()
}

/// Builds a relevance file (plus traces and the raw per-timestep dump)
/// and returns (vocab, hrv, traces dir, raw dump) paths.
fn build_fixture(dir: &Path) -> (String, String, String, String) {
    let vocab = write_vocab(dir);
    let hrv = dir.join("built.tsv").to_str().unwrap().to_string();
    let traces = dir.join("traces").to_str().unwrap().to_string();
    let raw = dir.join("raw.tsv").to_str().unwrap().to_string();
    run_ok(&[
        "build",
        "--seed",
        "5",
        "--prompt-count",
        "6",
        "--vocab",
        &vocab,
        "--emit-traces",
        &traces,
        "--per-timestep",
        &raw,
        "--out",
        &hrv,
    ]);
    (vocab, hrv, traces, raw)
}

#[test]
fn build_online_and_trace_rebuild_agree_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let (_, hrv, traces, raw) = build_fixture(dir.path());

    let online = fs::read_to_string(&hrv).unwrap();
    assert!(online.starts_with("HRV/1\nN=3 H=12\n"), "header:\n{online}");
    assert!(
        online.contains("# engine=toy runs=6 seed-fingerprint="),
        "provenance comment missing:\n{online}"
    );

    let rebuilt_path = dir.path().join("rebuilt.tsv");
    let rebuilt_raw = dir.path().join("rebuilt-raw.tsv");
    run_ok(&[
        "build",
        "--trace",
        &traces,
        "--per-timestep",
        rebuilt_raw.to_str().unwrap(),
        "--out",
        rebuilt_path.to_str().unwrap(),
    ]);
    let rebuilt = fs::read_to_string(&rebuilt_path).unwrap();
    assert_eq!(
        online, rebuilt,
        "trace rebuild drifted from the online build"
    );

    let raw_online = fs::read_to_string(&raw).unwrap();
    let raw_rebuilt = fs::read_to_string(&rebuilt_raw).unwrap();
    assert!(
        raw_online.starts_with("HRVRAW/1\n"),
        "raw dump header:\n{raw_online}"
    );
    assert_eq!(raw_online, raw_rebuilt, "raw dumps drifted");
}

#[test]
fn order_prints_a_full_head_permutation() {
    let dir = TempDir::new().unwrap();
    let (_, hrv, _, _) = build_fixture(dir.path());

    let stdout = run_ok(&[
        "order",
        "--hrv",
        &hrv,
        "--concept",
        "Sky",
        "--direction",
        "lerhf",
    ]);
    let mut lines = stdout.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("concept=Sky direction=lerhf"), "{header}");
    assert_eq!(lines.next(), Some("position\thead"));

    let mut heads: Vec<usize> = Vec::new();
    for (expect_position, line) in lines.enumerate() {
        let (position, head) = line.split_once('\t').expect("two columns");
        assert_eq!(position.parse::<usize>().unwrap(), expect_position);
        heads.push(head.parse().unwrap());
    }
    let mut sorted = heads.clone();
    sorted.sort_unstable();
    assert_eq!(
        sorted,
        (0..12).collect::<Vec<_>>(),
        "not a permutation: {heads:?}"
    );
}

#[test]
fn weaken_sweeps_the_default_grid_with_provenance() {
    let dir = TempDir::new().unwrap();
    let (vocab, hrv, _, _) = build_fixture(dir.path());
    let out = dir.path().join("curve.tsv");

    run_ok(&[
        "weaken",
        "--seed",
        "9",
        "--prompt-count",
        "3",
        "--vocab",
        &vocab,
        "--hrv",
        &hrv,
        "--concept",
        "Sky",
        "--direction",
        "morhf",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(
        text.starts_with("# seed=9 engine=toy vocab-fingerprint="),
        "{text}"
    );
    assert!(
        text.contains("# concept=Sky direction=morhf factor=-2"),
        "{text}"
    );
    assert!(text.contains("prompt-count=3 prompt-seed=9"), "{text}");

    let ks: Vec<usize> = text
        .lines()
        .skip_while(|line| *line != "k\tscore")
        .skip(1)
        .map(|line| line.split('\t').next().unwrap().parse().unwrap())
        .collect();
    // Twelve heads give the full 0..=12 default grid.
    assert_eq!(ks, (0..=12).collect::<Vec<_>>(), "{text}");
}

#[test]
fn area_reports_informed_and_random_baselines() {
    let dir = TempDir::new().unwrap();
    let (vocab, hrv, _, _) = build_fixture(dir.path());
    let out = dir.path().join("area.tsv");

    run_ok(&[
        "area",
        "--seed",
        "9",
        "--prompt-count",
        "2",
        "--vocab",
        &vocab,
        "--hrv",
        &hrv,
        "--concept",
        "Sky",
        "--ks",
        "0,6,12",
        "--random-orders",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let labels: Vec<&str> = text
        .lines()
        .skip_while(|line| *line != "ordering\tarea")
        .skip(1)
        .map(|line| line.split('\t').next().unwrap())
        .collect();
    assert_eq!(labels, ["hrv", "random-1", "random-2"], "{text}");
    for line in text.lines().skip_while(|l| *l != "ordering\tarea").skip(1) {
        let area: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(area.is_finite(), "{line}");
    }
}

#[test]
fn steer_validates_mode_flags_and_emits_both_grids() {
    let dir = TempDir::new().unwrap();
    let (vocab, hrv, _, _) = build_fixture(dir.path());
    let out = dir.path().join("steer.tsv");
    let out_s = out.to_str().unwrap();

    assert_exit(
        &[
            "steer",
            "--seed",
            "11",
            "--vocab",
            &vocab,
            "--hrv",
            &hrv,
            "--mode",
            "adjust",
            "--desired",
            "Sky",
            "--token",
            "cloud",
            "--prompt",
            "cloud fern",
            "--out",
            out_s,
        ],
        2,
        "--undesired",
    );
    assert_exit(
        &[
            "steer",
            "--seed",
            "11",
            "--vocab",
            &vocab,
            "--hrv",
            &hrv,
            "--mode",
            "strengthen",
            "--desired",
            "Sky",
            "--undesired",
            "Color",
            "--token",
            "cloud",
            "--prompt",
            "cloud fern",
            "--out",
            out_s,
        ],
        2,
        "--undesired",
    );
    assert_exit(
        &[
            "steer",
            "--seed",
            "11",
            "--vocab",
            &vocab,
            "--hrv",
            &hrv,
            "--mode",
            "strengthen",
            "--desired",
            "Sky",
            "--token",
            "moss",
            "--prompt",
            "cloud fern",
            "--out",
            out_s,
        ],
        2,
        "--token",
    );

    run_ok(&[
        "steer",
        "--seed",
        "11",
        "--vocab",
        &vocab,
        "--hrv",
        &hrv,
        "--mode",
        "adjust",
        "--desired",
        "Sky",
        "--undesired",
        "Color",
        "--token",
        "cloud",
        "--prompt",
        "cloud fern",
        "--out",
        out_s,
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(
        text.contains("# mode=adjust desired=Sky undesired=Color token=cloud"),
        "{text}"
    );
    assert!(text.contains("# desired-energy baseline="), "{text}");
    assert!(text.contains("# undesired-energy baseline="), "{text}");
    // One row per spatial position (4×4 grid) in each latent table.
    let count = |label: &str| text.lines().filter(|l| l.starts_with(label)).count();
    assert_eq!(count("baseline\t"), 16, "{text}");
    assert_eq!(count("steered\t"), 16, "{text}");
}

#[test]
fn edit_applies_defaults_and_bounds_its_fractions() {
    let dir = TempDir::new().unwrap();
    let (vocab, hrv, _, _) = build_fixture(dir.path());
    let out = dir.path().join("edit.tsv");
    let out_s = out.to_str().unwrap();

    assert_exit(
        &[
            "edit",
            "--seed",
            "13",
            "--vocab",
            &vocab,
            "--hrv",
            &hrv,
            "--desired",
            "Color",
            "--source-prompt",
            "cloud fern",
            "--target-prompt",
            "red fern",
            "--edited-token",
            "red",
            "--sa-rate",
            "1.5",
            "--out",
            out_s,
        ],
        2,
        "--sa-rate",
    );

    run_ok(&[
        "edit",
        "--seed",
        "13",
        "--vocab",
        &vocab,
        "--hrv",
        &hrv,
        "--desired",
        "Color",
        "--source-prompt",
        "cloud fern",
        "--target-prompt",
        "red fern",
        "--edited-token",
        "red",
        "--out",
        out_s,
    ]);
    let text = fs::read_to_string(&out).unwrap();
    // Defaults: map window 0.6 of 5 timesteps, structure rate 0.9.
    assert!(
        text.contains("tau-c=0.6 (timestep 3/5) sa-rate=0.9"),
        "{text}"
    );
    let count = |label: &str| text.lines().filter(|l| l.starts_with(label)).count();
    assert_eq!(count("source\t"), 16, "{text}");
    assert_eq!(count("target\t"), 16, "{text}");
    assert_eq!(count("edited\t"), 16, "{text}");
}

#[test]
fn stats_and_timesteps_consume_build_artifacts() {
    let dir = TempDir::new().unwrap();
    let (_, _, traces, raw) = build_fixture(dir.path());
    let out = dir.path().join("stats.tsv");

    run_ok(&["stats", "--trace", &traces, "--out", out.to_str().unwrap()]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(
        text.starts_with("# engine=toy traces=6 vocab-fingerprint="),
        "{text}"
    );
    assert_eq!(
        text.lines().filter(|l| !l.starts_with('#')).count(),
        13,
        "{text}"
    );
    for line in text.lines().skip(2) {
        let mean: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(mean > 0.0, "head logit scale should be positive: {line}");
    }

    let stdout = run_ok(&["timesteps", "--raw", &raw]);
    for table in [
        "concept-mean",
        "timestep-mean",
        "concept-cosine",
        "timestep-cosine",
    ] {
        assert!(
            stdout.lines().any(|l| l.starts_with(&format!("{table}\t"))),
            "missing table {table}:\n{stdout}"
        );
    }
    // A concept's cosine against itself is 1 up to rounding.
    let diagonal: f64 = stdout
        .lines()
        .find(|l| l.starts_with("concept-cosine\tColor\t"))
        .and_then(|l| l.split('\t').nth(2))
        .and_then(|values| values.split(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((diagonal - 1.0).abs() < 1e-12, "{stdout}");
}

#[test]
fn info_summarizes_a_relevance_file() {
    let dir = TempDir::new().unwrap();
    let (_, hrv, _, _) = build_fixture(dir.path());

    let stdout = run_ok(&["info", "--hrv", &hrv]);
    assert!(stdout.contains("concepts: 3  heads: 12"), "{stdout}");
    assert!(stdout.contains("provenance: engine=toy runs=6"), "{stdout}");
    // Sixish runs over three concepts leave every row populated, and
    // populated rows carry exactly the head count in mass.
    for name in ["Color", "Sky", "Plants"] {
        assert!(stdout.contains(&format!("12.000000\t{name}")), "{stdout}");
    }
}

#[test]
fn exit_codes_separate_flag_errors_from_data_errors() {
    let dir = TempDir::new().unwrap();
    let (vocab, hrv, traces, _) = build_fixture(dir.path());
    let missing = dir.path().join("missing.tsv");
    let missing = missing.to_str().unwrap();
    let out = dir.path().join("x.tsv");
    let out = out.to_str().unwrap();

    // 2: flag problems.
    assert_exit(&["build", "--prompt-count", "3", "--out", out], 2, "--seed");
    assert_exit(&["build", "--seed", "1", "--out", out], 2, "--prompt-count");
    assert_exit(
        &[
            "order",
            "--hrv",
            &hrv,
            "--concept",
            "Sky",
            "--direction",
            "sideways",
        ],
        2,
        "sideways",
    );
    assert_exit(
        &[
            "build",
            "--seed",
            "1",
            "--prompt-count",
            "2",
            "--trace",
            &traces,
            "--out",
            out,
        ],
        2,
        "cannot be used with",
    );
    assert_exit(
        &[
            "weaken",
            "--seed",
            "1",
            "--prompt-count",
            "2",
            "--vocab",
            &vocab,
            "--hrv",
            &hrv,
            "--concept",
            "Sky",
            "--direction",
            "morhf",
            "--ks",
            "2,4",
            "--out",
            out,
        ],
        2,
        "--ks",
    );
    assert_exit(
        &[
            "build",
            "--seed",
            "1",
            "--prompt-count",
            "2",
            "--plant",
            "L0=Sky",
            "--out",
            out,
        ],
        2,
        "--plant",
    );

    // 3: data problems.
    assert_exit(
        &[
            "order",
            "--hrv",
            missing,
            "--concept",
            "Sky",
            "--direction",
            "morhf",
        ],
        3,
        "missing.tsv",
    );
    assert_exit(
        &[
            "order",
            "--hrv",
            &hrv,
            "--concept",
            "Nope",
            "--direction",
            "morhf",
        ],
        3,
        "Nope",
    );
    assert_exit(
        &[
            "build",
            "--seed",
            "1",
            "--prompt-count",
            "2",
            "--plant",
            "L9.H0=Sky",
            "--out",
            out,
        ],
        3,
        "L9.H0",
    );

    // 3: a flipped checksum digit in one trace.
    let trace_path = PathBuf::from(&traces).join("trace-000.atrace");
    let text = fs::read_to_string(&trace_path).unwrap();
    let start = text.find("CHECKSUM=").unwrap();
    let end = text[start..].find('\n').unwrap() + start;
    let last = text[..end].chars().last().unwrap();
    let flipped = if last == '0' { '1' } else { '0' };
    let mut corrupted = text.clone();
    corrupted.replace_range(end - 1..end, &flipped.to_string());
    fs::write(&trace_path, corrupted).unwrap();
    assert_exit(&["build", "--trace", &traces, "--out", out], 3, "checksum");
}

#[test]
fn hrv_threads_is_validated_and_honored() {
    let dir = TempDir::new().unwrap();
    let (_, hrv, _, _) = build_fixture(dir.path());

    let out = Command::new(env!("CARGO_BIN_EXE_hrv"))
        .env("HRV_THREADS", "oops")
        .args(["info", "--hrv", &hrv])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("HRV_THREADS"));

    let rebuilt = dir.path().join("single-thread.tsv");
    let out = Command::new(env!("CARGO_BIN_EXE_hrv"))
        .env("HRV_THREADS", "1")
        .args([
            "build",
            "--seed",
            "5",
            "--prompt-count",
            "6",
            "--vocab",
            &write_vocab(dir.path()),
            "--out",
            rebuilt.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // Thread count never changes the result.
    assert_eq!(
        fs::read_to_string(&hrv).unwrap(),
        fs::read_to_string(&rebuilt).unwrap()
    );
}

#[test]
fn prompt_files_split_on_commas_or_whitespace() {
    let dir = TempDir::new().unwrap();
    let vocab = write_vocab(dir.path());
    let prompts = dir.path().join("prompts.txt");
    // Comma form carries the multi-token word; whitespace form is one
    // word per split.
    fs::write(&prompts, "# fixture prompts\nwhite, oak tree\ncloud fern\n").unwrap();
    let out = dir.path().join("from-file.tsv");

    run_ok(&[
        "build",
        "--seed",
        "5",
        "--vocab",
        &vocab,
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(
        text.contains("engine=toy runs=2 "),
        "two prompt lines, two runs:\n{text}"
    );

    assert_exit(
        &[
            "build",
            "--seed",
            "5",
            "--prompts",
            prompts.to_str().unwrap(),
            "--prompt-count",
            "3",
            "--out",
            out.to_str().unwrap(),
        ],
        2,
        "cannot be used with",
    );
}

#[test]
fn planted_heads_dominate_a_cli_built_ordering() {
    let dir = TempDir::new().unwrap();
    let vocab = write_vocab(dir.path());
    let hrv = dir.path().join("planted.tsv");

    run_ok(&[
        "build",
        "--seed",
        "404",
        "--prompt-count",
        "10",
        "--vocab",
        &vocab,
        "--plant",
        "L0.H0=Sky",
        "--plant",
        "L0.H1=Sky@10",
        "--out",
        hrv.to_str().unwrap(),
    ]);
    let stdout = run_ok(&[
        "order",
        "--hrv",
        hrv.to_str().unwrap(),
        "--concept",
        "Sky",
        "--direction",
        "morhf",
    ]);
    let mut top: Vec<usize> = stdout
        .lines()
        .skip(2)
        .take(2)
        .map(|line| line.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    top.sort_unstable();
    assert_eq!(
        top,
        vec![0, 1],
        "planted heads should lead the ordering:\n{stdout}"
    );
}
