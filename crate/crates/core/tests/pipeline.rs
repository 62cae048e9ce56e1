use semvo::config::RunConfig;
use semvo::evalkit::ReportedElement;
use semvo::geometry::Pose;
use semvo::pipeline::{self, PipelineError};
use semvo::semlib::SemlibError;
use semvo::simworld::{Scenario, SensorNoiseConfig};

fn quick() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.world.scenario = Scenario::Highway;
    cfg.world.route_length_m = 400.0;
    cfg.drive.duration_s = Some(10.0);
    cfg
}

fn rows(frames: &[semvo::simworld::SimFrame], ins: bool) -> Vec<(u64, f64, Pose)> {
    frames
        .iter()
        .map(|f| (f.frame_id, f.timestamp, if ins { f.ins_pose } else { f.gt_pose }))
        .collect()
}

#[test]
fn ten_seconds_at_thirty_hz_is_300_frames() {
    let dir = tempfile::tempdir().unwrap();
    let m = pipeline::cmd_simulate(&quick(), dir.path()).unwrap();
    assert_eq!(m.drive_frames, 300);
    let frames = semvo::simworld::import_frames(&dir.path().join(pipeline::DRIVE_DIR)).unwrap();
    assert_eq!(frames.len(), 300);
}

#[test]
fn manifest_hash_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pipeline::cmd_simulate(&quick(), a.path()).unwrap();
    let mb = pipeline::cmd_simulate(&quick(), b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.config_hash, quick().hash());
    let mut other = quick();
    other.seed += 1;
    assert_ne!(other.hash(), ma.config_hash);
}

#[test]
fn library_holds_exactly_the_frames_with_detections() {
    let cfg = quick();
    let ds = pipeline::simulate(&cfg).unwrap();
    let lib = pipeline::build_library(&ds.survey, [0.0; 3], 15.0).unwrap();
    let expected = ds.survey.iter().filter(|f| !f.detections.is_empty()).count();
    assert_eq!(lib.len(), expected);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lib.jsonl");
    lib.write_jsonl(&path).unwrap();
    let back = semvo::semlib::BenchmarkLibrary::read_jsonl(&path, 15.0).unwrap();
    assert_eq!(back.frames(), lib.frames());
}

#[test]
fn library_without_detections_is_empty_input() {
    let mut survey = pipeline::simulate(&quick()).unwrap().survey;
    survey.iter_mut().for_each(|f| f.detections.clear());
    let err = pipeline::build_library(&survey, [0.0; 3], 15.0).unwrap_err();
    assert!(matches!(err, PipelineError::Semlib(SemlibError::EmptyInput)), "{err}");
}

#[test]
fn zero_noise_reproduces_ground_truth() {
    let mut cfg = quick();
    cfg.noise.drive = SensorNoiseConfig::noiseless();
    cfg.noise.survey = SensorNoiseConfig::noiseless();
    let ds = pipeline::simulate(&cfg).unwrap();
    let lib = pipeline::build_library(&ds.survey, [0.0; 3], cfg.localize.grid_cell()).unwrap();
    let out = pipeline::localize(&ds.drive, &cfg.drive.camera, &lib, &cfg).unwrap();
    let worst = out
        .corrected
        .iter()
        .zip(&ds.drive)
        .map(|((_, _, p), f)| (p.center() - f.gt_pose.center()).norm())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn closed_gate_returns_the_ins_trajectory() {
    let mut cfg = quick();
    cfg.localize.xi_px = 0.0;
    let ds = pipeline::simulate(&cfg).unwrap();
    let lib = pipeline::build_library(&ds.survey, [0.0; 3], cfg.localize.grid_cell()).unwrap();
    let out = pipeline::localize(&ds.drive, &cfg.drive.camera, &lib, &cfg).unwrap();
    assert_eq!(out.solves, 0);
    for ((_, _, p), f) in out.corrected.iter().zip(&ds.drive) {
        assert_eq!(*p, f.ins_pose);
    }
    assert!(out.decisions.iter().all(|d| d.matched_frame_id.is_none()));
}

#[test]
fn anchors_reduce_trajectory_error() {
    let mut cfg = quick();
    cfg.drive.duration_s = Some(15.0);
    cfg.noise.drive.ins_bias_rw_sigma = 0.3;
    cfg.noise.drive.gnss_correction_time_s = Some(20.0);
    let ds = pipeline::simulate(&cfg).unwrap();
    let lib = pipeline::build_library(&ds.survey, [0.0; 3], cfg.localize.grid_cell()).unwrap();
    let out = pipeline::localize(&ds.drive, &cfg.drive.camera, &lib, &cfg).unwrap();
    let gt = rows(&ds.drive, false);
    let after = pipeline::evaluate_run("after", &out.reported, &out.corrected, &ds.world.elements, &gt, &cfg).unwrap();
    let before =
        pipeline::evaluate_run("before", &out.reported_before, &rows(&ds.drive, true), &ds.world.elements, &gt, &cfg)
            .unwrap();
    let (a, b) = (after.ate.unwrap().rmse_m, before.ate.unwrap().rmse_m);
    assert!(a < b, "after {a} before {b}");
}

#[test]
fn tracked_boxes_without_ids_still_localize() {
    let mut cfg = quick();
    cfg.localize.strip_ids = true;
    let ds = pipeline::simulate(&cfg).unwrap();
    let lib = pipeline::build_library(&ds.survey, [0.0; 3], cfg.localize.grid_cell()).unwrap();
    let out = pipeline::localize(&ds.drive, &cfg.drive.camera, &lib, &cfg).unwrap();
    assert_eq!(out.corrected.len(), ds.drive.len());
    assert!(!out.reported.is_empty());
    assert!(out.reported.iter().all(|e| e.element_id.is_none()));
}

#[test]
fn evaluating_the_truth_is_perfect_and_nothing_is_empty() {
    let cfg = quick();
    let ds = pipeline::simulate(&cfg).unwrap();
    let gt_rows = rows(&ds.drive, false);
    let truth: Vec<ReportedElement> = ds.world.elements.iter().map(ReportedElement::from_world).collect();
    let r = pipeline::evaluate_run("truth", &truth, &gt_rows, &ds.world.elements, &gt_rows, &cfg).unwrap();
    for c in &r.categories {
        assert_eq!(c.recall, Some(100.0));
        assert_eq!(c.precision, Some(100.0));
        let mae = c.mae.unwrap();
        assert_eq!(mae.max_abs(), 0.0);
    }
    assert_eq!(r.ate.unwrap().rmse_m, 0.0);

    let r = pipeline::evaluate_run("empty", &[], &gt_rows, &ds.world.elements, &gt_rows, &cfg).unwrap();
    for c in &r.categories {
        assert_eq!(c.recall, Some(0.0));
        assert_eq!(c.precision, None);
    }
}

#[test]
fn commands_write_their_artifacts() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let lib = dir.path().join("lib.jsonl");
    let run = dir.path().join("run");
    let eval = dir.path().join("eval");
    pipeline::cmd_simulate(&cfg, &ds).unwrap();
    pipeline::cmd_build_library(&ds, &cfg, &lib).unwrap();
    pipeline::cmd_localize(&ds, &lib, &cfg, &run).unwrap();
    let reports = pipeline::cmd_evaluate(&ds, &run, &cfg, &eval, true).unwrap();
    assert_eq!(reports.len(), 2);
    for f in [
        pipeline::CORRECTED_FILE,
        pipeline::GEO_FILE,
        pipeline::REPORTED_FILE,
        pipeline::REPORTED_BEFORE_FILE,
        pipeline::DECISIONS_FILE,
        pipeline::ALIGNMENT_FILE,
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    for f in [pipeline::METRICS_FILE, pipeline::METRICS_BEFORE_FILE, pipeline::TABLE_FILE] {
        assert!(eval.join(f).is_file(), "{f}");
    }
    let table = pipeline::cmd_report(&eval).unwrap();
    assert!(table.contains("Before optimization") && table.contains("After optimization"));
    let decisions = std::fs::read_to_string(run.join(pipeline::DECISIONS_FILE)).unwrap();
    assert_eq!(decisions.lines().count(), 300 / cfg.localize.keyframe_interval + 1);
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::cmd_build_library(&dir.path().join("nope"), &quick(), &dir.path().join("lib.jsonl")).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("nope"), "{err}");
    let err = pipeline::cmd_report(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
