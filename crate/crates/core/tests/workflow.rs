mod common;

use std::fs;
use std::time::Duration;

use common::fixture::{add_scene, tiny_config};
use meltpool_core::geometry::analyze_masks;
use meltpool_core::seed::BinaryMask;
use meltpool_core::workflow::{AdvanceOptions, AnnotationStatus, Workspace, MANIFEST_FILE};
use meltpool_core::{rank_checkpoints, AnnotationMask, CorrectionKind, CorrectionPoint, Error, MaskClass};

fn auto() -> AdvanceOptions {
    AdvanceOptions { auto_approve: true, ..AdvanceOptions::default() }
}

fn bootstrapped() -> (tempfile::TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::create(dir.path(), tiny_config()).unwrap();
    add_scene(&mut ws, "init-a", 1, true);
    add_scene(&mut ws, "init-b", 2, true);
    ws.bootstrap().unwrap();
    ws.verify().unwrap();
    (dir, ws)
}

fn two_rooms() -> AnnotationMask {
    let mut m = AnnotationMask::new(32, 32);
    m.classes.fill(MaskClass::Boundary);
    for y in 8..20 {
        for x in (4..14).chain(15..26) {
            m.set(x, y, MaskClass::Background);
        }
    }
    m
}

#[test]
fn auto_approved_batch_grows_dataset_by_its_size() {
    let (_dir, mut ws) = bootstrapped();
    assert_eq!(ws.manifest().iterations[0].train_set_size, 8);
    let tiles = add_scene(&mut ws, "new", 3, false);
    let rep = ws.advance_iteration(&["new".into()], &auto()).unwrap();
    assert_eq!(rep.index, 1);
    assert_eq!(rep.train_set_size, 8 + tiles.len());
    assert_eq!(rep.newly_annotated, tiles.len());
    assert!(ws.manifest().pending.is_none());
    ws.verify().unwrap();
    Workspace::open(ws.root()).unwrap().verify().unwrap();
}

#[test]
fn selected_checkpoint_is_the_evaluators_first() {
    let (_dir, mut ws) = bootstrapped();
    add_scene(&mut ws, "new", 3, false);
    let pending = ws.begin_iteration(&["new".into()]).unwrap();
    let m = ws.manifest();
    let validation: Vec<_> = m.validation_tiles.iter().map(|t| ws.pair_for(t).unwrap()).collect();
    let cks: Vec<_> = m.checkpoints.iter().map(|c| ws.load_checkpoint(&c.id).unwrap()).collect();
    let direct = rank_checkpoints(&cks, &validation).unwrap();
    assert_eq!(pending.selected_checkpoint, m.checkpoints[direct[0].position].id);
    assert_eq!(pending.rankings[0].mean_ssim, direct[0].mean_ssim);
}

#[test]
fn empty_batch_leaves_manifest_untouched() {
    let (dir, mut ws) = bootstrapped();
    let before = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(matches!(ws.advance_iteration(&[], &auto()), Err(Error::Empty(_))));
    assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), before);
}

#[test]
fn unbootstrapped_workspace_has_no_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::create(dir.path(), tiny_config()).unwrap();
    add_scene(&mut ws, "a", 1, false);
    assert!(matches!(ws.begin_iteration(&["a".into()]), Err(Error::NotFound(_))));
}

#[test]
fn annotated_batch_rejected() {
    let (_dir, mut ws) = bootstrapped();
    assert!(matches!(ws.begin_iteration(&["init-a".into()]), Err(Error::Conflict(_))));
}

#[test]
fn timeout_suspends_and_resumes() {
    let (_dir, mut ws) = bootstrapped();
    let tiles = add_scene(&mut ws, "new", 3, false);
    let opts = AdvanceOptions { auto_approve: false, timeout: Duration::from_millis(50), poll_interval: Duration::from_millis(10) };
    match ws.advance_iteration(&["new".into()], &opts) {
        Err(Error::PendingApprovals { count, .. }) => assert_eq!(count, tiles.len()),
        other => panic!("expected pending approvals, got {other:?}"),
    }
    assert!(ws.manifest().pending.is_some());
    assert!(ws.manifest().tiles.iter().all(|t| ws.manifest().annotation(&t.id).is_some()));
    // a different batch cannot start while one is pending
    add_scene(&mut ws, "other", 4, false);
    assert!(matches!(ws.begin_iteration(&["other".into()]), Err(Error::Conflict(_))));
    for t in &tiles {
        ws.ingest_corrections(t, &[], &format!("review-{t}"), true).unwrap();
    }
    let rep = ws.advance_iteration(&["new".into()], &opts).unwrap();
    assert_eq!(rep.index, 1);
    assert_eq!(rep.newly_annotated, tiles.len());
}

#[test]
fn merge_point_joins_two_regions_and_replays_idempotently() {
    let (dir, mut ws) = bootstrapped();
    let tiles = add_scene(&mut ws, "fix", 5, false);
    let t = &tiles[0];
    ws.set_annotation(t, &two_rooms(), AnnotationStatus::Seed).unwrap();
    let before = BinaryMask::interiors_of(&ws.annotation_mask(t).unwrap()).region_count();
    let pts = vec![CorrectionPoint::new(CorrectionKind::Merge, 14, 12)];
    let r1 = ws.ingest_corrections(t, &pts, "req-1", false).unwrap();
    assert_eq!((r1.regions_before, r1.regions_after), (2, 1));
    let after = BinaryMask::interiors_of(&ws.annotation_mask(t).unwrap()).region_count();
    assert_eq!(after, before - 1);
    assert_eq!(ws.manifest().annotation(t).unwrap().status, AnnotationStatus::Corrected);

    let manifest_bytes = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
    let r2 = ws.ingest_corrections(t, &pts, "req-1", false).unwrap();
    assert_eq!(serde_json::to_vec(&r1).unwrap(), serde_json::to_vec(&r2).unwrap());
    assert_eq!(ws.manifest().corrections.iter().filter(|c| c.request_id == "req-1").count(), 1);
    assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), manifest_bytes);
    ws.verify().unwrap();
}

#[test]
fn approve_without_points_keeps_mask() {
    let (_dir, mut ws) = bootstrapped();
    let tiles = add_scene(&mut ws, "fix", 5, false);
    let t = &tiles[1];
    ws.set_annotation(t, &two_rooms(), AnnotationStatus::Seed).unwrap();
    let mask = ws.annotation_mask(t).unwrap();
    let r = ws.ingest_corrections(t, &[], "ok", true).unwrap();
    assert_eq!(r.status, AnnotationStatus::Approved);
    assert_eq!(ws.annotation_mask(t).unwrap(), mask);
    // approved annotations do not take further edits
    assert!(matches!(ws.ingest_corrections(t, &[], "again", true), Err(Error::Conflict(_))));
}

#[test]
fn correction_errors() {
    let (_dir, mut ws) = bootstrapped();
    let tiles = add_scene(&mut ws, "fix", 5, false);
    assert!(matches!(ws.ingest_corrections("nope", &[], "r", true), Err(Error::NotFound(_))));
    assert!(matches!(ws.ingest_corrections(&tiles[0], &[], "r", true), Err(Error::NotFound(_))));
    ws.set_annotation(&tiles[0], &two_rooms(), AnnotationStatus::Seed).unwrap();
    let far = vec![CorrectionPoint::new(CorrectionKind::Merge, 40, 3)];
    assert!(matches!(ws.ingest_corrections(&tiles[0], &far, "r", false), Err(Error::PointOutOfBounds { .. })));
    assert!(ws.manifest().correction("r").is_none());
}

#[test]
fn statistics_match_direct_invocation() {
    let (_dir, mut ws) = bootstrapped();
    let report = ws.run_statistics(0).unwrap();
    let masks: Vec<_> = ws.manifest().reviewed_tiles().iter().map(|t| ws.annotation_mask(t).unwrap()).collect();
    let refs: Vec<_> = masks.iter().collect();
    let direct = analyze_masks(&refs, &ws.config().stats).unwrap();
    assert_eq!(report, direct);
    assert_eq!(ws.stored_statistics(0).unwrap(), direct);
}

#[test]
fn statistics_need_approved_masks() {
    let (_dir, mut ws) = bootstrapped();
    add_scene(&mut ws, "new", 3, false);
    ws.begin_iteration(&["new".into()]).unwrap();
    assert!(matches!(ws.run_statistics(1), Err(Error::Empty(_))));
    assert!(matches!(ws.run_statistics(5), Err(Error::NotFound(_))));
}

#[test]
fn single_pool_gives_single_sample_summary() {
    let (_dir, mut ws) = bootstrapped();
    let tiles = add_scene(&mut ws, "new", 3, false);
    ws.begin_iteration(&["new".into()]).unwrap();
    let mut one = AnnotationMask::new(32, 32);
    one.classes.fill(MaskClass::Boundary);
    for y in 6..16 {
        for x in 6..26 {
            let (u, v) = ((x as f64 - 16.0) / 10.0, (y as f64 - 5.5) / 10.0);
            if u * u + v * v <= 1.0 {
                one.set(x, y, MaskClass::Background);
            }
        }
    }
    ws.set_annotation(&tiles[0], &one, AnnotationStatus::Approved).unwrap();
    let report = ws.run_statistics(1).unwrap();
    assert_eq!(report.counts.extracted, 1);
    assert_eq!(report.area.sample_count, 1);
    assert_eq!(report.area.std_dev, 0.0);
}
