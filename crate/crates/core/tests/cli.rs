use std::path::Path;
use std::process::{Command, Output};

use spectra::costs::count_costs;
use spectra::format::save_model;
use spectra::model::{build_model, SpectraConfig};

fn spectra(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectra"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_signal(path: &Path, samples: usize, channels: usize) {
    let mut text = String::from("t");
    for c in 0..channels {
        text.push_str(&format!(",c{c}"));
    }
    text.push('\n');
    for i in 0..samples {
        text.push_str(&format!("{}", i as f64 / 50.0));
        for c in 0..channels {
            text.push_str(&format!(",{}", ((i * (c + 1)) as f64 * 0.1).sin()));
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn count_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "use_gru=false\nhidden=8\n").unwrap();
    let v = stdout_json(&spectra(&["count", "--config", "c.cfg"], dir.path()));
    let cfg = SpectraConfig {
        use_gru: false,
        hidden: 8,
        ..Default::default()
    };
    let r = count_costs(&cfg);
    assert_eq!(v["total_params"], r.total_params);
    assert_eq!(v["total_macs"], r.total_macs());
    assert_eq!(v["layers"].as_array().unwrap().len(), r.layers.len());
}

#[test]
fn zero_classifier_infers_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&SpectraConfig::default()).unwrap();
    for (name, t) in m.named_params_mut() {
        if name.starts_with("clf.") {
            t.data_mut().fill(0.0);
        }
    }
    save_model(&m, dir.path().join("m.spct")).unwrap();
    write_signal(&dir.path().join("w.csv"), 200, 6);
    let v = stdout_json(&spectra(&["infer", "--model", "m.spct", "--window", "w.csv"], dir.path()));
    let windows = v["windows"].as_array().unwrap();
    assert_eq!(windows.len(), 3);
    for w in windows {
        for p in w["probabilities"].as_array().unwrap() {
            assert!((p.as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-12);
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spectra(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(spectra(&["--help"], dir.path()).status.code(), Some(0));

    std::fs::write(dir.path().join("bad.cfg"), "hiden=3\n").unwrap();
    let out = spectra(&["count", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg"));

    std::fs::write(dir.path().join("junk.spct"), b"not a model at all").unwrap();
    write_signal(&dir.path().join("w.csv"), 100, 6);
    let out = spectra(&["infer", "--model", "junk.spct", "--window", "w.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.spct"));

    let out = spectra(&["bench", "--model", "junk.spct", "--format", "xml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_train_quantize_eval_bench() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = spectra(&["synth-data", "--classes", "3", "--seconds", "30", "--out", "d"], p);
    assert!(out.status.success());
    std::fs::write(p.join("t.cfg"), "epochs=5\n").unwrap();
    let v = stdout_json(&spectra(&["train", "--data", "d", "--config", "t.cfg"], p));
    assert_eq!(v["epochs"], 5);
    let history = std::fs::read_to_string(p.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);

    let m = stdout_json(&spectra(&["eval", "--model", "model.spct", "--data", "d"], p));
    assert_eq!(m["confusion"].as_array().unwrap().len(), 3);
    let acc = m["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    stdout_json(&spectra(&["quantize", "--model", "model.spct", "--calib", "d", "--calib-windows", "20"], p));
    let q = stdout_json(&spectra(&["eval", "--model", "model_int8.spct", "--data", "d"], p));
    assert_eq!(q["confusion"].as_array().unwrap().len(), 3);

    let b = stdout_json(&spectra(
        &["bench", "--model", "model_int8.spct", "--int8", "--warmup", "2", "--iters", "10"],
        p,
    ));
    let reports = b.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["precision_tag"], "FP32");
    assert_eq!(reports[1]["precision_tag"], "INT8");

    let out = spectra(&["bench", "--model", "model.spct", "--int8", "--iters", "10"], p);
    assert_eq!(out.status.code(), Some(1));
}
