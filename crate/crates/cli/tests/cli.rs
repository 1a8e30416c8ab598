mod common;

use std::fs;

use common::*;
use nad_core::{read_bundle, DirectionSet};
use serde_json::Value;

fn json(path: &std::path::Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn csv_rows(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn ok(args: &[&str]) -> std::process::Output {
    let o = nad(args);
    assert_eq!(code(&o), 0, "nad {args:?}\n{}", stderr(&o));
    o
}

#[test]
fn validate_reports_geometry() {
    let ws = workspace(1);
    let o = ok(&["validate", s(&ws.model)]);
    let text = stdout(&o);
    assert!(text.contains(&format!("{}", C * HEADS)), "{text}");
    assert!(text.trim_end().ends_with("ok"), "{text}");
    ok(&["validate", s(&ws.classes)]);
}

#[test]
fn usage_errors_exit_2() {
    let ws = workspace(2);
    assert_eq!(code(&nad(&[])), 2);
    assert_eq!(code(&nad(&["frobnicate"])), 2);
    assert_eq!(code(&nad(&["decompose", "--bundle", s(&ws.seg), "--bogus"])), 2);
    assert_eq!(
        code(&nad(&["decompose", "--bundle", s(&ws.seg), "--level", "pixel"])),
        2
    );
    assert_eq!(code(&nad(&["validate", s(&ws.path("missing"))])), 2);
    assert_eq!(
        code(&nad(&[
            "registers",
            "--bundle",
            s(&ws.data),
            "--out",
            s(&ws.path("o")),
            "--threads",
            "0"
        ])),
        2
    );
    // --bundle on omp needs the curve inputs as well
    let o = nad(&[
        "omp",
        "--dirs",
        s(&ws.data),
        "--words",
        s(&ws.words),
        "--bundle",
        s(&ws.data),
        "--out",
        "x",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_and_version_exit_0() {
    let o = nad(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in [
        "validate",
        "decompose",
        "directions",
        "ablate",
        "omp",
        "classify",
        "segment",
        "monitor",
        "registers",
        "retrieve",
    ] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
    let o = nad(&["--version"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn pipeline_errors_exit_1() {
    let ws = workspace(3);
    // A text bundle has no activations.
    let o = nad(&["registers", "--bundle", s(&ws.classes), "--out", s(&ws.path("r"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    // The data bundle has no weights and --model is missing.
    let o = nad(&["registers", "--bundle", s(&ws.data), "--out", s(&ws.path("r"))]);
    assert_eq!(code(&o), 1);
    // k above the number of pairs
    let o = nad(&[
        "segment",
        "--bundle",
        s(&ws.seg),
        "--classes",
        s(&ws.classes),
        "--k",
        "1000",
        "--window",
        "6",
        "--stride",
        "4",
        "--out",
        s(&ws.path("s")),
    ]);
    assert_eq!(code(&o), 1);
    let o = nad(&[
        "ablate",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--classes",
        s(&ws.classes),
        "--fractions",
        "0,1",
        "--out",
        s(&ws.path("a")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn decompose_check_and_output() {
    let ws = workspace(4);
    let out = ws.path("d");
    ok(&[
        "decompose",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--level",
        "head_token",
        "--check",
        "--out",
        s(&out),
    ]);
    let check = json(&out.join("check.json"));
    assert_eq!(check["passed"], true);
    assert_eq!(check["images"], IMAGES);
    assert!(check["max_relative_error"].as_f64().unwrap() < 1e-6);
    let b = read_bundle(out.join("decomp")).unwrap();
    let k1 = GRID.0 * GRID.1 + 1;
    assert_eq!(b.shape("decomp.head_token").unwrap(), &[IMAGES, HEADS, k1, D]);
    assert_eq!(b.shape("decomp.head_bias").unwrap(), &[HEADS, D]);
    assert_eq!(b.shape("decomp.out_bias").unwrap(), &[D]);

    // Without --out nothing but the check runs.
    let o = ok(&["decompose", "--bundle", s(&ws.seg), "--check"]);
    assert!(!stderr(&o).contains("wrote"));
}

#[test]
fn run_record_lists_config_and_inputs() {
    let ws = workspace(5);
    let out = ws.path("r");
    ok(&[
        "registers",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--top-n",
        "2",
        "--out",
        s(&out),
        "--threads",
        "2",
    ]);
    let rec = json(&out.join("run.json"));
    assert_eq!(rec["tool"], "nad");
    assert_eq!(rec["config"]["subcommand"], "registers");
    assert_eq!(rec["config"]["top_n"], 2);
    assert_eq!(rec["config"]["sink"], "last_token");
    assert!(rec["config"].get("out").is_none());
    let text = fs::read_to_string(out.join("run.json")).unwrap();
    assert!(!text.contains("threads"));
    let files = rec["inputs"]["model"].as_object().unwrap();
    assert!(files.keys().any(|k| k.ends_with("manifest.json")));
    assert!(files.values().all(|h| h.as_str().unwrap().len() == 64));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let ws = workspace(6);
    let cfg = ws.path("cfg.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"bundle": {:?}, "model": {:?}, "top_n": 4, "sink": "argmax"}}"#,
            s(&ws.data),
            s(&ws.model)
        ),
    )
    .unwrap();
    let out = ws.path("from_config");
    ok(&["--config", s(&cfg), "registers", "--out", s(&out)]);
    let rec = json(&out.join("run.json"));
    assert_eq!(rec["config"]["top_n"], 4);
    assert_eq!(rec["config"]["sink"], "argmax");
    assert!(rec["inputs"]["config"].is_object());
    assert_eq!(csv_rows(&out.join("registers.csv")).1.len(), C);

    let out = ws.path("overridden");
    ok(&["registers", "--config", s(&cfg), "--top-n", "1", "--out", s(&out)]);
    let rec = json(&out.join("run.json"));
    assert_eq!(rec["config"]["top_n"], 1);
    assert_eq!(rec["config"]["sink"], "argmax");

    fs::write(&cfg, r#"{"no_such_flag": 1}"#).unwrap();
    assert_eq!(code(&nad(&["--config", s(&cfg), "registers", "--out", s(&out)])), 2);
    fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(code(&nad(&["--config", s(&cfg), "registers", "--out", s(&out)])), 2);
}

#[test]
fn directions_then_omp_and_classify() {
    let ws = workspace(7);
    let out = ws.path("dirs");
    ok(&[
        "directions",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--top-m",
        "10",
        "--rank",
        "2",
        "--out",
        s(&out),
    ]);
    let set = DirectionSet::<f64>::from_bundle(&read_bundle(out.join("dirs")).unwrap()).unwrap();
    assert_eq!(set.pairs.as_ref().unwrap().len(), C * HEADS);
    assert_eq!(set.neurons.as_ref().unwrap().len(), C);
    let summary = json(&out.join("summary.json"));
    assert!(summary.is_object());

    let omp_out = ws.path("omp");
    ok(&[
        "omp",
        "--dirs",
        s(&out.join("dirs")),
        "--words",
        s(&ws.words),
        "--m",
        "2",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--classes",
        s(&ws.classes),
        "--curve-m",
        "1,3",
        "--out",
        s(&omp_out),
    ]);
    let (header, rows) = csv_rows(&omp_out.join("sparse.csv"));
    assert_eq!(header, ["component", "word", "coefficient"]);
    assert!(rows.len() <= 2 * C * HEADS && rows.len() >= C * HEADS);
    assert!(rows
        .iter()
        .all(|r| r[0].starts_with("pair:") && r[1].starts_with("word")));
    let (header, rows) = csv_rows(&omp_out.join("sparse_curve.csv"));
    assert_eq!(header, ["m", "accuracy"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "3"]);

    let neuron_out = ws.path("omp_neuron");
    ok(&[
        "omp",
        "--dirs",
        s(&out.join("dirs")),
        "--words",
        s(&ws.words),
        "--component",
        "neuron",
        "--out",
        s(&neuron_out),
    ]);
    let (_, rows) = csv_rows(&neuron_out.join("sparse.csv"));
    assert!(rows.iter().all(|r| r[0].starts_with("neuron:")));

    for (mode, expect_perfect) in [("baseline", true), ("pair_rank1", false), ("neuron_rank_2", false)] {
        let cls = ws.path(&format!("cls_{mode}"));
        ok(&[
            "classify",
            "--bundle",
            s(&ws.data),
            "--model",
            s(&ws.model),
            "--classes",
            s(&ws.classes),
            "--mode",
            mode,
            "--dirs",
            s(&out.join("dirs")),
            "--out",
            s(&cls),
        ]);
        let r = json(&cls.join("classify.json"));
        assert_eq!(r["mode"], mode);
        assert_eq!(r["n"], IMAGES);
        let acc = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        if expect_perfect {
            assert_eq!(acc, 1.0, "labels were built from the baseline prediction");
        }
    }
}

#[test]
fn ablate_writes_curves_and_ranking() {
    let ws = workspace(8);
    let out = ws.path("ab");
    ok(&[
        "ablate",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--classes",
        s(&ws.classes),
        "--kinds",
        "pair,activation",
        "--fractions",
        "0.5,1",
        "--out",
        s(&out),
    ]);
    let (header, rows) = csv_rows(&out.join("ablation.csv"));
    assert_eq!(header, ["fraction", "kind", "accuracy"]);
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r[0] == "1") {
        assert_eq!(r[2], "1", "full retention keeps the perfect baseline");
    }
    let (_, ranking) = csv_rows(&out.join("ranking.csv"));
    assert_eq!(ranking.len(), C * HEADS + C);
    let scores: Vec<f64> = ranking.iter().take(C * HEADS).map(|r| r[3].parse().unwrap()).collect();
    assert!(scores.windows(2).all(|p| p[0] >= p[1]));
}

#[test]
fn segment_two_class_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, classes) = two_class_scene(dir.path());
    let out = dir.path().join("seg");
    ok(&[
        "segment",
        "--bundle",
        s(&scene),
        "--classes",
        s(&classes),
        "--k",
        "1",
        "--window",
        "8",
        "--stride",
        "4",
        "--top-m",
        "2",
        "--out",
        s(&out),
    ]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["miou"], 1.0);
    assert_eq!(m["images"], 1);
    assert_eq!(m["windows"], 2);
    let pred = read_bundle(out.join("pred")).unwrap();
    let labels = pred.raw("pred.0").unwrap();
    assert_eq!(pred.shape("pred.0").unwrap(), &[8, 12]);
    for (p, &l) in labels.iter().enumerate() {
        assert_eq!(l, if p % 12 < 6 { 0.0 } else { 1.0 });
    }
    assert_eq!(pred.read_lines("classes.txt").unwrap(), ["left", "right"]);

    // Zeroing the neuron that marks class 0 removes its evidence.
    let zeroed = dir.path().join("zeroed");
    ok(&[
        "segment",
        "--bundle",
        s(&scene),
        "--classes",
        s(&classes),
        "--k",
        "1",
        "--window",
        "8",
        "--stride",
        "4",
        "--top-m",
        "2",
        "--register-neurons",
        "0",
        "--out",
        s(&zeroed),
    ]);
    assert!(json(&zeroed.join("metrics.json"))["miou"].as_f64().unwrap() < 1.0);
}

#[test]
fn segment_enumerates_windows() {
    let ws = workspace(9);
    let out = ws.path("seg_out");
    ok(&[
        "segment",
        "--bundle",
        s(&ws.seg),
        "--classes",
        s(&ws.classes),
        "--k",
        "2",
        "--window",
        "6",
        "--stride",
        "4",
        "--variant",
        "neuron_only",
        "--top-m",
        "4",
        "--out",
        s(&out),
    ]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["images"], 2);
    assert_eq!(m["windows"], 8);
    assert_eq!(m["per_class"].as_array().unwrap().len(), CLASSES);
    let miou = m["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    // A stride that implies another window count is rejected.
    let o = nad(&[
        "segment",
        "--bundle",
        s(&ws.seg),
        "--classes",
        s(&ws.classes),
        "--k",
        "2",
        "--window",
        "6",
        "--stride",
        "1",
        "--out",
        s(&ws.path("bad")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn monitor_writes_series_per_concept() {
    let ws = workspace(10);
    let out = ws.path("mon");
    ok(&[
        "monitor",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--concepts",
        s(&ws.concepts),
        "--k",
        "2",
        "--top-m",
        "5",
        "--out",
        s(&out),
    ]);
    let report = json(&out.join("correlation.json"));
    for concept in ["yellow", "convertible"] {
        let c = &report[concept];
        assert_eq!(c["pairs"].as_array().unwrap().len(), 2);
        assert_eq!(c["groups"].as_array().unwrap().len(), 3);
        let (header, rows) = csv_rows(&out.join(format!("series.{concept}.csv")));
        assert_eq!(header, ["group", "gt_proportion", "mean_ratio"]);
        assert_eq!(
            rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
            ["2000", "2001", "2002"]
        );
        for r in &rows {
            let p: f64 = r[1].parse().unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }
}

#[test]
fn registers_profile_and_ranking() {
    let ws = workspace(11);
    let out = ws.path("reg");
    ok(&[
        "registers",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--top-n",
        "3",
        "--out",
        s(&out),
    ]);
    let (header, rows) = csv_rows(&out.join("registers.csv"));
    assert_eq!(header, ["rank", "neuron", "delta"]);
    assert_eq!(rows.len(), C);
    let deltas: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(deltas.windows(2).all(|p| p[0] >= p[1]));
    let (header, profile) = csv_rows(&out.join("sink_profile.csv"));
    assert_eq!(header, ["token", "original", "intervened"]);
    assert_eq!(profile.len(), GRID.0 * GRID.1 + 1);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["zeroed"].as_array().unwrap().len(), 3);
}

#[test]
fn retrieve_ranks_images_and_lists_subconcepts() {
    let ws = workspace(12);
    let out = ws.path("ret");
    ok(&[
        "retrieve",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--components",
        "pair:0:1,head:0",
        "--top-n",
        "4",
        "--words",
        s(&ws.words),
        "--tau",
        "0",
        "--top-m",
        "5",
        "--out",
        s(&out),
    ]);
    let items = json(&out.join("retrieve.json"));
    let items = items.as_array().unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0]["component"], "pair:0:1");
    let norms: Vec<f64> = items[0]["norms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(norms.len(), 4);
    assert!(norms.windows(2).all(|p| p[0] >= p[1]));
    assert!(items[1]["inertia"].as_f64().unwrap() >= 0.0);
    let (header, rows) = csv_rows(&out.join("subconcepts.csv"));
    assert_eq!(header, ["neuron", "word", "similarity"]);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() >= 0.0));

    let o = nad(&[
        "retrieve",
        "--bundle",
        s(&ws.data),
        "--model",
        s(&ws.model),
        "--components",
        "pair:0",
        "--out",
        "x",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let ws = workspace(13);
    let args = |out: &std::path::Path| {
        vec![
            "monitor".to_string(),
            "--bundle".into(),
            s(&ws.data).into(),
            "--model".into(),
            s(&ws.model).into(),
            "--concepts".into(),
            s(&ws.concepts).into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let (a, b) = (ws.path("a"), ws.path("b"));
    for out in [&a, &b] {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(snapshot(&a), snapshot(&b));
}
