use std::path::Path;
use std::process::{Command, Output};

fn duet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn duet")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

#[test]
fn synth_run_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("scene.cfg"),
        "width = 160\nheight = 120\nfx = 135\nframes = 3\ndepth_shadow_px = 4\n",
    )
    .unwrap();

    let out = duet(&["synth", "--config", "scene.cfg", "--output", "data"], dir.path());
    assert_ok(&out, "synth");
    assert!(dir.path().join("data/associations.txt").exists());
    assert!(dir.path().join("data/rgb/frame_000000.png").exists());

    let out = duet(&["run", "--input", "data", "--output", "run"], dir.path());
    assert_ok(&out, "run");
    assert!(String::from_utf8_lossy(&out.stdout).contains("frame pairs"));
    for artifact in ["est_camera.txt", "est_object.txt", "static_model.ply", "run_manifest.txt"] {
        assert!(dir.path().join("run").join(artifact).exists(), "missing {artifact}");
    }

    let out = duet(&["evaluate", "--input", "data", "--output", "run"], dir.path());
    assert_ok(&out, "evaluate");
    assert!(String::from_utf8_lossy(&out.stdout).contains("camera: ATE"));
    assert!(dir.path().join("run/results.txt").exists());
}

#[test]
fn missing_input_exits_nonzero_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = duet(&["run", "--input", "nothing-here", "--output", "run"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");
}

#[test]
fn bad_config_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "clusters = 8\nwat = 1\n").unwrap();
    let out = duet(
        &["run", "--input", "x", "--output", "y", "--config", "bad.cfg"],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.cfg:2"), "{stderr}");
    assert!(stderr.contains("wat"), "{stderr}");
}
