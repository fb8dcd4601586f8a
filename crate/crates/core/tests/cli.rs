use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rfsslp::metrics::evaluate;
use rfsslp::phantom::PhantomSpec;
use rfsslp::volume::{read_header, read_image, read_labels};

fn rfsslp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfsslp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_spec(dir: &Path) -> String {
    let spec = PhantomSpec {
        dims: [24, 20, 20],
        center: [11.5, 9.5, 9.5],
        semi_axes: [7.0, 4.0, 4.0],
        n_atlases: 5,
        seed: 2,
        ..Default::default()
    };
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    s(&path)
}

#[test]
fn phantom_segment_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let case = root.join("case");
    let out = rfsslp(&["phantom", "--spec", &small_spec(root), "--out", &s(&case)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in ["target", "truth", "atlas00_img", "atlas04_lbl"] {
        assert!(
            case.join(format!("{name}.json")).exists(),
            "{name}.json missing"
        );
        assert!(
            case.join(format!("{name}.raw")).exists(),
            "{name}.raw missing"
        );
    }
    assert!(case.join("spec.json").exists());
    let header = read_header(&case.join("target.json")).unwrap();
    assert_eq!(header.dims, [24, 20, 20]);
    assert_eq!(
        fs::metadata(case.join("target.raw")).unwrap().len(),
        24 * 20 * 20 * 4
    );
    assert_eq!(
        fs::metadata(case.join("truth.raw")).unwrap().len(),
        24 * 20 * 20
    );

    let mask = root.join("mask");
    let prob = root.join("prob");
    let out = rfsslp(&[
        "segment",
        "--target",
        &s(&case.join("target")),
        "--atlas-dir",
        &s(&case),
        "--mode",
        "mv-sslp",
        "--out",
        &s(&mask),
        "--prob-out",
        &s(&prob),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let meta: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(meta["mode"], "mv-sslp");
    assert_eq!(meta["selected_atlases"].as_array().unwrap().len(), 5);

    let prob_img = read_image(&prob).unwrap();
    assert!(prob_img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let pred = read_labels(&mask).unwrap();
    let truth = read_labels(&case.join("truth")).unwrap();
    let report = evaluate(&pred, &truth).unwrap();
    assert!(report.dice > 0.9, "dice {}", report.dice);

    let out = rfsslp(&[
        "evaluate",
        "--pred",
        &s(&mask),
        "--truth",
        &s(&case.join("truth")),
    ]);
    assert!(out.status.success());
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["dice"].as_f64().unwrap(), report.dice);
    assert_eq!(
        printed["n_truth"].as_u64().unwrap() as usize,
        report.n_truth
    );

    let out = rfsslp(&[
        "rank-atlases",
        "--target",
        &s(&case.join("target")),
        "--atlas-dir",
        &s(&case),
        "--n",
        "3",
    ]);
    assert!(out.status.success());
    let order: Vec<usize> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(order.len(), 3);
    assert!(order.iter().all(|&i| i < 5));
}

#[test]
fn sweep_writes_one_row_per_config_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = rfsslp(&[
        "phantom",
        "--spec",
        &small_spec(root),
        "--out",
        &s(&root.join("cases/a")),
    ]);
    assert!(out.status.success());
    let grid = root.join("grid.json");
    fs::write(
        &grid,
        r#"{"axes": [{"path": "propagation.beta", "values": [0.5, 0.8]}], "modes": ["mv", "mv-sslp"]}"#,
    )
    .unwrap();
    let csv_path = root.join("table.csv");
    let out = rfsslp(&[
        "sweep",
        "--grid",
        &s(&grid),
        "--phantom-dir",
        &s(&root.join("cases")),
        "--out",
        &s(&csv_path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(
        lines[0].contains("dice_mean") && lines[0].contains("propagation.beta"),
        "{}",
        lines[0]
    );
    assert_eq!(lines.len(), 5);
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = rfsslp(&[
        "phantom",
        "--spec",
        &small_spec(root),
        "--out",
        &s(&root.join("case")),
    ]);
    assert!(out.status.success());

    let bad = root.join("bad.json");
    fs::write(&bad, r#"{"propagation": {"beta": 1.5}}"#).unwrap();
    let out = rfsslp(&[
        "segment",
        "--target",
        &s(&root.join("case/target")),
        "--atlas-dir",
        &s(&root.join("case")),
        "--config",
        &s(&bad),
        "--out",
        &s(&root.join("m")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    let out = rfsslp(&[
        "segment",
        "--target",
        &s(&root.join("case/target")),
        "--atlas-dir",
        &s(&root.join("case")),
        "--config",
        &s(&bad),
        "--out",
        &s(&root.join("m")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let spec = root.join("tight.json");
    fs::write(&spec, r#"{"center": [3.0, 19.5, 19.5]}"#).unwrap();
    let out = rfsslp(&["phantom", "--spec", &s(&spec), "--out", &s(&root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = rfsslp(&[
        "evaluate",
        "--pred",
        &s(&root.join("missing")),
        "--truth",
        &s(&root.join("missing")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = rfsslp(&[
        "phantom",
        "--spec",
        &small_spec(root),
        "--out",
        &s(&root.join("case")),
    ]);
    assert!(out.status.success());
    fs::remove_file(root.join("case/atlas02_img.raw")).unwrap();
    let out = rfsslp(&[
        "segment",
        "--target",
        &s(&root.join("case/target")),
        "--atlas-dir",
        &s(&root.join("case")),
        "--mode",
        "mv",
        "--out",
        &s(&root.join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // malformed file contents: labels outside {0, 1}
    let lbl = root.join("case/atlas00_lbl.raw");
    let mut bytes = fs::read(&lbl).unwrap();
    bytes[0] = 7;
    fs::write(&lbl, bytes).unwrap();
    let out = rfsslp(&[
        "evaluate",
        "--pred",
        &s(&root.join("case/atlas00_lbl")),
        "--truth",
        &s(&root.join("case/truth")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
