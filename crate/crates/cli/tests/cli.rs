use std::path::Path;
use std::process::{Command, Output};

fn iid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iid")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = iid(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

const GEN: [&str; 6] = ["--seed", "7", "--count", "4", "--size", "32"];

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for dir in ["a", "b"] {
        let mut args = vec!["gen", "--out", dir];
        args.extend(GEN);
        ok(&args, tmp.path());
    }
    let a = tree(&tmp.path().join("a"));
    assert_eq!(a, tree(&tmp.path().join("b")));
    // 4 scenes × (6 maps + display copy) + manifest.
    assert_eq!(a.len(), 29);
}

#[test]
fn eval_of_ground_truth_copies_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["gen", "--out", "gt"];
    args.extend(GEN);
    ok(&args, tmp.path());
    std::fs::create_dir(tmp.path().join("pred")).unwrap();
    for (name, bytes) in tree(&tmp.path().join("gt")) {
        std::fs::write(tmp.path().join("pred").join(name), bytes).unwrap();
    }
    let out = ok(&["eval", "--pred", "pred", "--gt", "gt", "--whdr", "100"], tmp.path());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for part in ["mean_reflectance", "mean_shading"] {
        for key in ["mse", "smse", "lmse", "dssim"] {
            assert_eq!(report[part][key].as_f64(), Some(0.0), "{part}.{key}");
        }
    }
    assert_eq!(report["mean_whdr"].as_f64(), Some(0.0));
}

#[test]
fn train_decompose_eval_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    std::fs::write(p.join("cfg.toml"), "steps = 2\nbatch_size = 2\n\n[dataset]\ncount = 4\n").unwrap();
    let mut args = vec!["gen", "--out", "gt"];
    args.extend(GEN);
    ok(&args, p);
    for run in ["1", "2"] {
        let ckpt = format!("m{run}.ckpt");
        ok(&["train", "--config", "cfg.toml", "--out", &ckpt], p);
        ok(&["decompose", "--checkpoint", &ckpt, "--input", "gt", "--out", &format!("pred{run}")], p);
    }
    assert_eq!(std::fs::read(p.join("m1.ckpt")).unwrap(), std::fs::read(p.join("m2.ckpt")).unwrap());
    assert_eq!(std::fs::read(p.join("m1.trace.json")).unwrap(), std::fs::read(p.join("m2.trace.json")).unwrap());
    assert_eq!(tree(&p.join("pred1")), tree(&p.join("pred2")));
    assert!(p.join("pred1/scene_0003_reflectance_display.png").exists());

    let a = ok(&["eval", "--pred", "pred1", "--gt", "gt"], p);
    let b = ok(&["eval", "--pred", "pred2", "--gt", "gt"], p);
    assert_eq!(a.stdout, b.stdout);

    ok(&["decompose", "--checkpoint", "m1.ckpt", "--input", "gt/scene_0001_image.png", "--out", "single"], p);
    assert_eq!(
        std::fs::read(p.join("single/scene_0001_shading.png")).unwrap(),
        std::fs::read(p.join("pred1/scene_0001_shading.png")).unwrap()
    );
}

#[test]
fn ccr_and_edges_write_their_files() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(&["gen", "--out", "gt", "--count", "2"], p);
    ok(&["ccr", "--input", "gt/scene_0000_image.png", "--out", "ccr"], p);
    let files = tree(&p.join("ccr"));
    assert_eq!(files.len(), 7);
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ccr/scene_0000_ccr.json")).unwrap()).unwrap();
    assert_eq!(raw["planes"].as_array().unwrap().len(), 6 * 32 * 32);

    ok(&["edges", "--input", "gt/scene_0001_image.png", "--out", "e"], p);
    assert!(p.join("e/scene_0001_edges.png").exists());
    ok(&["edges", "--input", "gt", "--out", "ge"], p);
    assert_eq!(
        std::fs::read(p.join("ge/scene_0001_shading_edges.png")).unwrap(),
        std::fs::read(p.join("gt/scene_0001_shading_edges.png")).unwrap()
    );
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    for args in [
        vec!["frobnicate"],
        vec!["eval", "--pred", "nope", "--gt", "missing"],
        vec!["ccr", "--input", "absent.png", "--out", "x"],
        vec!["decompose", "--checkpoint", "none.ckpt", "--input", "absent.png", "--out", "x"],
    ] {
        let out = iid(&args, p);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    std::fs::write(p.join("bad.toml"), "stepz = 3\n").unwrap();
    let out = iid(&["train", "--config", "bad.toml", "--out", "m.ckpt"], p);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}
