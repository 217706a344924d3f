use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_frace");

fn frace(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FRACE_DATA")
        .env_remove("FRACE_BUNDLE")
        .output()
        .unwrap()
}

fn json_stdout(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "train-classifier",
        "train-gan",
        "explain",
        "grid",
        "eval",
        "bench",
        "serve",
    ] {
        let out = frace(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_with_code_two() {
    assert_eq!(frace(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(frace(&["explain", "--counter", "1"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = frace(&[
        "eval",
        "--bundle",
        missing.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

/// Writes an MNIST-layout split of 28×28 images where digit `k` is a bright
/// horizontal bar at row `2k + 4`.
fn write_idx_split(dir: &Path, images: &str, labels: &str, n: usize) {
    let mut img = vec![0, 0, 8, 3];
    let mut lab = vec![0, 0, 8, 1];
    for v in [n as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let k = i % 10;
        lab.push(k as u8);
        for r in 0..28 {
            for c in 0..28 {
                let on = r == 2 * k + 4 && (4..24).contains(&c);
                img.push(if on {
                    255
                } else {
                    ((r * 28 + c + i) % 7) as u8
                });
            }
        }
    }
    std::fs::write(dir.join(images), img).unwrap();
    std::fs::write(dir.join(labels), lab).unwrap();
}

#[test]
fn pipeline_from_training_to_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_idx_split(
        &data,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        40,
    );
    write_idx_split(
        &data,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        20,
    );
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let data = data.to_str().unwrap();
    let (clf, bundle) = (p("clf/classifier"), p("bundle"));

    let out = frace(&[
        "train-classifier",
        "--data",
        data,
        "--out",
        &clf,
        "--epochs",
        "2",
        "--decay-epochs",
        "1",
        "--batch-size",
        "10",
        "--width",
        "2",
    ]);
    let record = json_stdout(&out);
    assert_eq!(
        record["epoch_log"].as_array().map(|e| e.len()),
        Some(2),
        "{record}"
    );

    let out = frace(&[
        "train-gan",
        "--data",
        data,
        "--classifier",
        &clf,
        "--out",
        &bundle,
        "--epochs",
        "1",
        "--subset",
        "8",
        "--batch-size",
        "4",
        "--generator-width",
        "2",
        "--discriminator-width",
        "2",
        "--residual-blocks",
        "1",
    ]);
    let last = json_stdout(&out);
    assert_eq!(last["step"], 1);
    for f in ["bundle.json", "train_config.json", "train_log.ndjson"] {
        assert!(Path::new(&bundle).join(f).exists(), "{f}");
    }

    let overlay = p("overlay.png");
    let out = frace(&[
        "explain",
        "--bundle",
        &bundle,
        "--data",
        data,
        "--index",
        "3",
        "--counter",
        "8",
        "--overlay-out",
        &overlay,
        "--scale",
        "2",
    ]);
    let e = json_stdout(&out);
    assert_eq!(e["counter_class"], 8);
    let img = image::open(&overlay).unwrap();
    assert_eq!((img.width(), img.height()), (56, 56));

    let out = frace(&[
        "explain",
        "--bundle",
        &bundle,
        "--data",
        data,
        "--image",
        &overlay,
        "--counter",
        "2",
    ]);
    assert_eq!(json_stdout(&out)["counter_class"], 2);

    let out = frace(&[
        "explain",
        "--bundle",
        &bundle,
        "--data",
        data,
        "--index",
        "3",
        "--counter",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let grid = p("grid.png");
    let cells = json_stdout(&frace(&[
        "grid", "--bundle", &bundle, "--data", data, "--out", &grid, "--scale", "1",
    ]));
    assert_eq!(cells.as_array().unwrap().len(), 100);
    assert!(Path::new(&grid).exists());

    let report = json_stdout(&frace(&[
        "eval", "--bundle", &bundle, "--data", data, "--limit", "12",
    ]));
    assert_eq!(report["n"], 12);
    assert_eq!(report["outcomes"].as_array().unwrap().len(), 12);

    let bench = json_stdout(&frace(&[
        "bench",
        "--bundle",
        &bundle,
        "--data",
        data,
        "--images",
        "4",
        "--batch-size",
        "2",
        "--warmup",
        "1",
        "--timed",
        "4",
        "--repetitions",
        "2",
        "--max-iters",
        "3",
        "--hardware",
        "test-box",
    ]));
    assert_eq!(bench["hardware"], "test-box");
    assert_eq!(bench["frace"]["runs"].as_array().unwrap().len(), 2);
    assert!(bench["speedup"].as_f64().unwrap() > 0.0);
}
