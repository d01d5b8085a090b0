//! End-to-end tests of the `slugplan` binary: external interfaces, exit
//! codes, and cross-mode determinism.

use std::path::Path;
use std::process::{Command, Output};

use slugplan_core::tensor::{write_tensor_file, Shape, Tensor};

fn slugplan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slugplan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Block network document: maxpool 3x3/1/1 + batchnorm + relu, `depth`
/// times over `channels` channels, with a positive-variance sidecar file.
fn write_blocks_doc(dir: &Path, name: &str, depth: usize, channels: usize, hw: usize) {
    let var = Tensor::new(
        Shape::new(1, 1, 1, channels),
        (0..channels).map(|i| 0.5 + 0.25 * i as f32).collect(),
    )
    .unwrap();
    write_tensor_file(&var, &dir.join("var.bstn")).unwrap();

    let mut layers = Vec::new();
    for i in 0..depth {
        layers.push(serde_json::json!({
            "kind": "maxpool",
            "params": {"kernel": [3,3], "stride": [1,1], "padding": [1,1]}
        }));
        layers.push(serde_json::json!({
            "kind": "batchnorm",
            "params": {
                "gamma": {"prng_seed": 100 + i, "len": channels},
                "beta": {"prng_seed": 200 + i, "len": channels},
                "running_mean": {"prng_seed": 300 + i, "len": channels},
                "running_var": {"file": "var.bstn"},
                "eps": 1e-5
            }
        }));
        layers.push(serde_json::json!({"kind": "relu"}));
    }
    let doc = serde_json::json!({
        "input_shape": [1, channels, hw, hw],
        "layers": layers,
    });
    std::fs::write(dir.join(name), serde_json::to_string_pretty(&doc).unwrap()).unwrap();
}

#[test]
fn validate_prints_one_shape_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    write_blocks_doc(dir.path(), "net.json", 3, 4, 32);
    let out = slugplan(&["validate", "net.json"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect(); // header first
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.contains("(1,4,32,32)")));
}

#[test]
fn validate_rejects_bad_batchnorm_length_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write_blocks_doc(dir.path(), "net.json", 1, 4, 16);
    // Corrupt: gamma declared with the wrong length.
    let text = std::fs::read_to_string(dir.path().join("net.json")).unwrap();
    let text = text.replace("\"len\": 4", "\"len\": 5");
    std::fs::write(dir.path().join("net.json"), text).unwrap();
    let out = slugplan(&["validate", "net.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("node 1"), "{}", stderr(&out));
}

#[test]
fn validate_missing_file_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = slugplan(&["validate", "nope.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = slugplan(&["validate", "net.json", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_with_max_steps_five_shows_four_sequences() {
    let dir = tempfile::tempdir().unwrap();
    write_blocks_doc(dir.path(), "net.json", 16, 4, 32);
    let out = slugplan(&["plan", "net.json", "--max-steps", "5"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("sequence ").count(), 4, "{text}");

    let out = slugplan(&["plan", "net.json", "--max-steps", "5", "--json"], dir.path());
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["stacks"][0]["sequences"].as_array().unwrap().len(), 4);
}

#[test]
fn plan_with_huge_budget_keeps_one_sequence_at_depth_40() {
    let dir = tempfile::tempdir().unwrap();
    write_blocks_doc(dir.path(), "net.json", 40, 4, 32);
    std::fs::write(dir.path().join("dev.json"), r#"{"scratch_bytes": 1073741824}"#).unwrap();
    let out = slugplan(&["plan", "net.json", "--device", "dev.json"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).matches("sequence ").count(), 1);
}

#[test]
fn run_modes_produce_byte_identical_output_files() {
    let dir = tempfile::tempdir().unwrap();
    write_blocks_doc(dir.path(), "net.json", 4, 4, 16);
    let input = "prng:7x1,4,16,16";
    for (mode, file) in [("bf", "a.bstn"), ("df", "b.bstn")] {
        let out = slugplan(
            &["run", "net.json", "--input", input, "--mode", mode, "--out", file],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read(dir.path().join("a.bstn")).unwrap();
    let b = std::fs::read(dir.path().join("b.bstn")).unwrap();
    assert_eq!(a, b);

    // Re-running is deterministic.
    let out = slugplan(
        &["run", "net.json", "--input", input, "--mode", "df", "--out", "c.bstn"],
        dir.path(),
    );
    assert!(out.status.success());
    let c = std::fs::read(dir.path().join("c.bstn")).unwrap();
    assert_eq!(b, c);
}

#[test]
fn compare_reports_identical_outputs_and_traffic_win() {
    let dir = tempfile::tempdir().unwrap();
    write_blocks_doc(dir.path(), "net.json", 8, 4, 32);
    let out = slugplan(
        &["compare", "net.json", "--input", "prng:11x1,4,32,32", "--workers", "2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("identical: true"), "{text}");
    assert!(text.contains("max_abs_diff: 0"), "{text}");

    let grab = |key: &str| -> u64 {
        text.lines()
            .find(|l| l.starts_with(key))
            .and_then(|l| l.split(':').nth(1))
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or_else(|| panic!("missing {key} in {text}"))
    };
    let bf = grab("bf_data_bytes");
    let df = grab("df_data_bytes");
    assert!(df < bf, "depth-first traffic {df} should undercut breadth-first {bf}");
}

#[test]
fn bench_builtin_blocks_covers_three_policies_and_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = slugplan(
        &[
            "bench",
            "builtin:blocks",
            "--depth",
            "1..3",
            "--reps",
            "1",
            "--csv",
            "rows.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "network,batch,mode,min_ms,bytes_read,bytes_written,redundant_elements,speedup"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 18); // 3 depths x 3 policies x (bf + df)
    let df_rows: Vec<_> = rows.iter().filter(|r| r[2] == "df").collect();
    assert_eq!(df_rows.len(), 9);

    // Every field re-parses, and numeric columns re-render identically.
    for row in &rows {
        assert_eq!(row.len(), 8);
        row[1].parse::<usize>().unwrap();
        let ms: f64 = row[3].parse().unwrap();
        assert_eq!(format!("{ms:.6}"), row[3]);
        for field in &row[4..7] {
            field.parse::<u64>().unwrap();
        }
        let speedup: f64 = row[7].parse().unwrap();
        assert_eq!(format!("{speedup:.4}"), row[7]);
    }

    // Policies split differently at depth 3 under the default budget: all
    // fit in one sequence except the 1-step policy, which forces three.
    let seqs = |name: &str| {
        rows.iter()
            .find(|r| r[0] == name && r[2] == "df")
            .unwrap_or_else(|| panic!("missing row {name}"))
    };
    assert!(seqs("blocks:3/1step")[4].parse::<u64>().unwrap()
        > seqs("blocks:3/unrestricted")[4].parse::<u64>().unwrap());
}

#[test]
fn bench_builtin_without_depth_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = slugplan(&["bench", "builtin:blocks", "--reps", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_rejects_malformed_prng_spec() {
    let dir = tempfile::tempdir().unwrap();
    write_blocks_doc(dir.path(), "net.json", 1, 4, 16);
    let out = slugplan(
        &["run", "net.json", "--input", "prng:banana", "--mode", "bf", "--out", "o.bstn"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}
