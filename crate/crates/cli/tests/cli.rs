use std::path::Path;
use std::process::{Command, Output};

use mrnorm::manifest::CohortManifest;
use mrnorm::{nifti, Contrast};

fn mrnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrnorm"))
        .args(args)
        .output()
        .expect("spawn mrnorm")
}

fn ok(args: &[&str]) -> String {
    let out = mrnorm(args);
    assert!(
        out.status.success(),
        "mrnorm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed stderr error object.
fn failure(args: &[&str]) -> (i32, serde_json::Value) {
    let out = mrnorm(args);
    assert!(!out.status.success(), "mrnorm {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let v: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"));
    (out.status.code().unwrap(), v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path) {
    ok(&["phantom", "--out", s(dir), "--subjects", "6", "--dims", "32", "--seed", "3"]);
}

/// Runs every stage after `phantom` with a small configuration.
fn pipeline(cohort: &Path, work: &Path, jobs: &str) {
    let config = work.join("run.toml");
    std::fs::create_dir_all(work).unwrap();
    std::fs::write(&config, "trees = 8\nresamples = 200\nsamples_per_image = 400\n").unwrap();
    let manifest = cohort.join("manifest.json");
    let common = [
        "--config",
        s(&config),
        "--manifest",
        s(&manifest),
        "--out",
        s(work),
        "--method",
        "raw,zscore,hm",
        "--contrast-pair",
        "t1:flair",
        "--jobs",
        jobs,
    ];
    for stage in ["fit", "apply", "synth", "evaluate"] {
        let mut args = vec![stage];
        args.extend_from_slice(&common);
        ok(&args);
    }
}

#[test]
fn full_pipeline_writes_models_images_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    phantom(&cohort);
    let m = CohortManifest::load(cohort.join("manifest.json")).unwrap().manifest;
    assert_eq!(m.subjects.len(), 6);
    assert_eq!((m.train.len(), m.test.len()), (3, 3));

    let work = dir.path().join("work");
    pipeline(&cohort, &work, "1");

    let hm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(work.join("models/hm/t1.json")).unwrap()).unwrap();
    assert_eq!(hm["method"], "hm");
    let text = hm.to_string();
    assert!(text.contains("landmarks") || text.contains("labels"), "{text}");
    assert!(work.join("models/zscore/flair.json").exists());
    assert!(!work.join("models/raw").exists());

    // raw copies the input voxels exactly
    let id = &m.test[0];
    let input = nifti::load_volume(cohort.join(id).join("flair.nii.gz")).unwrap();
    let copied = nifti::load_volume(work.join("normalized/raw").join(id).join("flair.nii.gz")).unwrap();
    assert_eq!(input.data(), copied.data());
    assert!(work.join("normalized/zscore").join(id).join("audit.json").exists());

    let z = nifti::load_volume(work.join("normalized/zscore").join(id).join("t1.nii.gz")).unwrap();
    let b = nifti::load_mask(cohort.join(id).join("brain.nii.gz")).unwrap();
    let st = mrnorm::masked_stats(&z.with_contrast(Contrast::T1), &b).unwrap();
    assert!(st.mean.abs() < 1e-6 && (st.std - 1.0).abs() < 1e-6, "{st:?}");

    assert!(work.join("synth/hm/t1-flair/pr.model").exists());
    assert!(work.join("synth/hm/t1-flair/rf").join(format!("{id}.nii.gz")).exists());

    let report = mrnorm::metrics::QualityReport::read_json(work.join("report/quality.json")).unwrap();
    // 3 normalizations x 1 task x 2 models x 3 test subjects x 3 metrics
    assert_eq!(report.rows.len(), 54);
    for f in ["quality.csv", "summary.csv", "comparisons.csv", "bars.csv"] {
        assert!(work.join("report").join(f).exists(), "{f}");
    }

    let printed = ok(&["report", "--out", s(&work)]);
    assert!(printed.contains("t1-flair"));
    assert!(printed.contains("signed-rank"));
}

#[test]
fn results_do_not_depend_on_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    phantom(&cohort);
    pipeline(&cohort, &dir.path().join("a"), "1");
    pipeline(&cohort, &dir.path().join("b"), "2");
    let a = std::fs::read(dir.path().join("a/report/quality.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report/quality.json")).unwrap();
    assert!(a == b, "reports differ between --jobs 1 and --jobs 2");
    let ma = std::fs::read(dir.path().join("a/synth/zscore/t1-flair/rf.model")).unwrap();
    let mb = std::fs::read(dir.path().join("b/synth/zscore/t1-flair/rf.model")).unwrap();
    assert!(ma == mb);
}

#[test]
fn contract_errors_exit_2_with_json() {
    let (code, v) = failure(&["fit", "--bogus"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"]["kind"], "contract");

    let (code, _) = failure(&["fit", "--out", "x", "--method", "nope", "--manifest", "m.json"]);
    assert_eq!(code, 2);
    let (code, _) = failure(&["fit", "--out", "x", "--contrast-pair", "t1:t1", "--manifest", "m.json"]);
    assert_eq!(code, 2);
    let (code, _) = failure(&["fit", "--out", "x", "--wm-from", "t3", "--manifest", "m.json"]);
    assert_eq!(code, 2);
    let (code, v) = failure(&["fit", "--out", "x"]);
    assert_eq!(code, 2);
    assert!(v["error"]["message"].as_str().unwrap().contains("manifest"));
    let (code, _) = failure(&["evaluate", "--out", "x", "--method", "zscore", "--manifest", "m.json"]);
    assert_eq!(code, 2);

    assert!(mrnorm(&["--help"]).status.success());
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let (code, v) = failure(&["fit", "--out", s(dir.path()), "--manifest", s(&dir.path().join("none.json"))]);
    assert_eq!(code, 4);
    assert_eq!(v["error"]["kind"], "io");

    let cohort = dir.path().join("cohort");
    phantom(&cohort);
    let manifest = cohort.join("manifest.json");
    // apply before fit: the model files are missing
    let (code, _) = failure(&[
        "apply",
        "--out",
        s(&dir.path().join("work")),
        "--manifest",
        s(&manifest),
        "--method",
        "fcm",
        "--contrast-pair",
        "t1:t2",
    ]);
    assert_eq!(code, 4);

    let (code, _) = failure(&["report", "--out", s(&dir.path().join("empty"))]);
    assert_eq!(code, 4);
}

#[test]
fn numerical_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    phantom(&cohort);
    let m = CohortManifest::load(cohort.join("manifest.json")).unwrap().manifest;
    let id = &m.test[0];
    let path = cohort.join(id).join("t2.nii.gz");
    let flat = nifti::load_volume(&path).unwrap().map(|_| 500.0).unwrap();
    nifti::save_volume(&flat, &path).unwrap();
    let work = dir.path().join("work");
    let manifest = cohort.join("manifest.json");
    let args = [
        "--out",
        s(&work),
        "--manifest",
        s(&manifest),
        "--method",
        "zscore",
        "--contrast-pair",
        "t1:t2",
    ];
    let mut fit = vec!["fit"];
    fit.extend_from_slice(&args);
    ok(&fit);
    let mut apply = vec!["apply"];
    apply.extend_from_slice(&args);
    let (code, v) = failure(&apply);
    assert_eq!(code, 3);
    assert_eq!(v["error"]["kind"], "numerical");
}

#[test]
fn json_config_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"out": {:?}, "seed": 3, "phantom": {{"n_subjects": 4, "dims": [32, 32, 32], "outlier": true}}}}"#,
            s(&cohort)
        ),
    )
    .unwrap();
    ok(&["phantom", "--config", s(&config)]);
    let m = CohortManifest::load(cohort.join("manifest.json")).unwrap().manifest;
    assert_eq!(m.subjects.len(), 4);
    assert!(m.subjects.last().unwrap().outlier.is_some());
}
