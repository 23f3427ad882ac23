//! The iterative predict / review / retrain loop over a persistent dataset.
//!
//! One iteration ranks the stored checkpoints on the fixed validation tiles,
//! predicts masks for a batch of unseen images with the best one, waits until
//! every prediction has been approved or corrected, and retrains on the grown
//! set. Iteration 0 is the bootstrap model trained on the initial reviewed
//! annotations.

mod manifest;
mod store;

pub use manifest::{
    AnnotationRecord, AnnotationStatus, CheckpointRecord, CorrectionEntry, CorrectionResponse, DatasetManifest,
    ImageRecord, IterationRecord, IterationReport, PendingIteration, Provenance, RankEntry, TileRecord,
    WorkflowConfig, MANIFEST_VERSION,
};
pub use store::{Workspace, BLOB_DIR, MANIFEST_FILE};

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{predict_overlay, rank_checkpoints_with};
use crate::geometry::{analyze_masks, StatsReport};
use crate::imaging::{
    decode_overlay_lenient, downscale, encode_overlay, tile_image, AnnotationMask, ClassPalette, ImagePair, RawImage,
};
use crate::nn::{NetworkCheckpoint, NetworkParameters};
use crate::seed::{apply_corrections, merge_binary_into, seed_annotation, seed_binary, BinaryMask, CorrectionPoint};
use crate::train::{LossHistory, Trainer};

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale_mask(mask: &AnnotationMask, factor: usize) -> AnnotationMask {
    let mut out = AnnotationMask::new(mask.width * factor, mask.height * factor);
    for y in 0..out.height {
        for x in 0..out.width {
            out.set(x, y, mask.get(x / factor, y / factor));
        }
    }
    out
}

/// Class colors alpha-blended over a grayscale or RGB image.
pub fn blend_overlay(image: &RawImage, mask: &AnnotationMask, palette: &ClassPalette, alpha: f64) -> Result<RawImage> {
    if (image.width(), image.height()) != (mask.width, mask.height) {
        return Err(Error::DimensionMismatch("overlay image and mask differ in size".into()));
    }
    let colors = encode_overlay(mask, palette);
    let mut data = Vec::with_capacity(image.width() * image.height() * 3);
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..3 {
                let base = image.get(x, y, if image.channels() == 1 { 0 } else { c });
                data.push((1.0 - alpha) * base + alpha * colors.get(x, y, c));
            }
        }
    }
    RawImage::new(image.width(), image.height(), 3, data)
}

/// How [`Workspace::advance_iteration`] waits for review.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvanceOptions {
    /// Approve every prediction without review.
    pub auto_approve: bool,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl Default for AdvanceOptions {
    fn default() -> Self {
        Self { auto_approve: false, timeout: Duration::from_secs(3600), poll_interval: Duration::from_millis(500) }
    }
}

/// Everything a retraining run needs, detached from the workspace so it can
/// run without holding a lock.
#[derive(Debug, Clone)]
pub struct RetrainJob {
    pub iteration: usize,
    pub params: NetworkParameters,
    pub pairs: Vec<ImagePair>,
    pub config: crate::train::TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RetrainOutput {
    pub iteration: usize,
    pub checkpoints: Vec<NetworkCheckpoint>,
    pub history: LossHistory,
}

impl RetrainJob {
    pub fn run(self) -> Result<RetrainOutput> {
        let mut cfg = self.config;
        cfg.batch_size = cfg.batch_size.min(self.pairs.len());
        cfg.seed = cfg.seed.wrapping_add(self.iteration as u64);
        let mut trainer = Trainer::new(self.params, cfg)?;
        let mut checkpoints = Vec::new();
        let history = trainer.train(&self.pairs, |c| {
            checkpoints.push(c);
            Ok(())
        })?;
        Ok(RetrainOutput { iteration: self.iteration, checkpoints, history })
    }
}

impl Workspace {
    /// Tiles a source image and records both. Returns the new tile ids.
    pub fn add_image(&mut self, id: &str, image: &RawImage, provenance: Provenance, grid: (usize, usize)) -> Result<Vec<String>> {
        if self.manifest().image(id).is_some() {
            return Err(Error::Conflict(format!("image {id} already exists")));
        }
        let size = self.config().tile_size;
        let tiles = tile_image(image, id, size, grid)?;
        let path = self.put_blob(&image.to_png_bytes()?, "png")?;
        let mut records = Vec::with_capacity(tiles.len());
        for (k, t) in tiles.iter().enumerate() {
            records.push(TileRecord {
                id: format!("{id}-t{k:02}"),
                image_id: id.to_string(),
                origin: t.origin,
                size,
                path: self.put_blob(&t.image.to_png_bytes()?, "png")?,
            });
        }
        let ids = records.iter().map(|r| r.id.clone()).collect();
        let rec = ImageRecord { id: id.to_string(), path, width: image.width(), height: image.height(), provenance };
        self.commit(|m| {
            m.images.push(rec);
            m.tiles.extend(records);
            Ok(())
        })?;
        Ok(ids)
    }

    pub fn tile_image(&self, tile_id: &str) -> Result<RawImage> {
        let t = self.manifest().tile(tile_id).ok_or_else(|| Error::NotFound(format!("tile {tile_id}")))?;
        let bytes = self.read_blob(&t.path)?;
        let img = image::load_from_memory(&bytes)?.to_luma8();
        let (w, h) = img.dimensions();
        RawImage::new(w as usize, h as usize, 1, img.into_raw().into_iter().map(f64::from).collect())
    }

    pub fn annotation_mask(&self, tile_id: &str) -> Result<AnnotationMask> {
        let a = self
            .manifest()
            .annotation(tile_id)
            .ok_or_else(|| Error::NotFound(format!("annotation for tile {tile_id}")))?;
        AnnotationMask::from_png_bytes(&self.read_blob(&a.mask)?)
    }

    /// Stores (or replaces) a tile's annotation.
    pub fn set_annotation(&mut self, tile_id: &str, mask: &AnnotationMask, status: AnnotationStatus) -> Result<()> {
        let t = self.manifest().tile(tile_id).ok_or_else(|| Error::NotFound(format!("tile {tile_id}")))?;
        if (mask.width, mask.height) != (t.size, t.size) {
            return Err(Error::DimensionMismatch(format!("mask {}x{} for {}px tile", mask.width, mask.height, t.size)));
        }
        let path = self.put_blob(&mask.to_png_bytes()?, "png")?;
        let iteration = self.manifest().iterations.len();
        let tile_id = tile_id.to_string();
        self.commit(|m| {
            let rec = AnnotationRecord { tile_id: tile_id.clone(), mask: path, status, iteration };
            match m.annotation_mut(&tile_id) {
                Some(a) => *a = rec,
                None => m.annotations.push(rec),
            }
            Ok(())
        })
    }

    /// Classical bootstrap annotation of one tile, stored with status `seed`.
    pub fn seed_tile(&mut self, tile_id: &str) -> Result<AnnotationMask> {
        let img = self.tile_image(tile_id)?;
        let cfg = self.config().seed.clone();
        let mask = seed_annotation(&img, &seed_binary(&img, &cfg)?, &cfg)?;
        self.set_annotation(tile_id, &mask, AnnotationStatus::Seed)?;
        Ok(mask)
    }

    /// Training pair for a tile at network resolution.
    pub fn pair_for(&self, tile_id: &str) -> Result<ImagePair> {
        let f = self.config().model_factor();
        let img = downscale(&self.tile_image(tile_id)?, f)?;
        let mask = self.annotation_mask(tile_id)?.downscale(f)?;
        ImagePair::from_annotated(&img, &mask, &self.config().palette)
    }

    fn pairs_for(&self, ids: &[String]) -> Result<Vec<ImagePair>> {
        ids.iter().map(|t| self.pair_for(t)).collect()
    }

    pub fn load_checkpoint(&self, id: &str) -> Result<NetworkCheckpoint> {
        let c = self.manifest().checkpoint(id).ok_or_else(|| Error::NotFound(format!("checkpoint {id}")))?;
        NetworkCheckpoint::from_bytes(&self.read_blob(&c.path)?)
    }

    /// Generator prediction for a tile, enlarged back to tile resolution.
    pub fn predict_tile(&self, params: &NetworkParameters, tile_id: &str) -> Result<AnnotationMask> {
        let f = self.config().model_factor();
        let img = downscale(&self.tile_image(tile_id)?, f)?;
        let overlay = predict_overlay(params, &crate::imaging::to_model_range(&img))?;
        Ok(upscale_mask(&decode_overlay_lenient(&overlay, &self.config().palette), f))
    }

    /// Ranks every stored checkpoint on the validation tiles, best first.
    pub fn rank_stored_checkpoints(&self) -> Result<Vec<RankEntry>> {
        let m = self.manifest();
        if m.checkpoints.is_empty() {
            return Err(Error::NotFound("no checkpoints".into()));
        }
        let validation = self.pairs_for(&m.validation_tiles)?;
        let cks = m.checkpoints.iter().map(|c| self.load_checkpoint(&c.id)).collect::<Result<Vec<_>>>()?;
        let scores = rank_checkpoints_with(&cks, &validation, &m.config.palette)?;
        Ok(scores
            .into_iter()
            .map(|s| RankEntry {
                checkpoint: m.checkpoints[s.position].id.clone(),
                step: s.step,
                mean_ssim: s.mean_ssim,
                median_ssim: s.median_ssim,
                pixel_accuracy: s.pixel_accuracy,
            })
            .collect())
    }

    fn store_checkpoints(&self, iteration: usize, cks: &[NetworkCheckpoint]) -> Result<Vec<CheckpointRecord>> {
        cks.iter()
            .map(|c| {
                Ok(CheckpointRecord {
                    id: format!("it{iteration}-s{}", c.step),
                    path: self.put_blob(&c.to_bytes(), "ckpt")?,
                    step: c.step,
                    iteration,
                    config_hash: c.config_hash.clone(),
                })
            })
            .collect()
    }

    fn store_history(&self, h: &LossHistory) -> Result<String> {
        let mut buf = Vec::new();
        h.write_csv(&mut buf)?;
        self.put_blob(&buf, "csv")
    }

    /// Fixes the validation split and trains the first model (iteration 0).
    pub fn bootstrap(&mut self) -> Result<IterationReport> {
        let m = self.manifest();
        if !m.iterations.is_empty() || m.pending.is_some() {
            return Err(Error::Conflict("workspace is already bootstrapped".into()));
        }
        let reviewed = m.reviewed_tiles();
        if reviewed.len() < 2 {
            return Err(Error::Empty("need at least two reviewed tiles to bootstrap".into()));
        }
        let n_val = ((reviewed.len() as f64 * m.config.validation_fraction).round() as usize).clamp(1, reviewed.len() - 1);
        let mut order = reviewed.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(m.config.split_seed));
        let mut validation: Vec<String> = order[..n_val].to_vec();
        validation.sort();
        let train_ids: Vec<String> = reviewed.iter().filter(|t| !validation.contains(t)).cloned().collect();
        let params = NetworkParameters::new(m.config.generator, m.config.discriminator, m.config.init_seed)?;
        let job = RetrainJob { iteration: 0, params, pairs: self.pairs_for(&train_ids)?, config: m.config.train };
        let out = job.run()?;
        let records = self.store_checkpoints(0, &out.checkpoints)?;
        let history = self.store_history(&out.history)?;
        let corrected = m.annotations.iter().filter(|a| a.status == AnnotationStatus::Corrected).count();
        self.commit(|m| {
            m.validation_tiles = validation;
            m.checkpoints.extend(records);
            Ok(())
        })?;
        let rankings = self.rank_stored_checkpoints()?;
        let n = reviewed.len();
        self.commit(|m| {
            let rec = IterationRecord {
                index: 0,
                train_set_size: n,
                selected_checkpoint: Some(rankings[0].checkpoint.clone()),
                mean_ssim: Some(rankings[0].mean_ssim),
                rankings,
                newly_annotated: n,
                corrected,
                dataset_before: 0,
                dataset_after: n,
                loss_history: Some(history),
                stats: None,
            };
            m.iterations.push(rec.clone());
            Ok(rec)
        })
    }

    /// Steps (a) and (b): rank, select, predict the batch. Resumes an
    /// identical pending batch instead of starting over.
    pub fn begin_iteration(&mut self, batch: &[String]) -> Result<PendingIteration> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let m = self.manifest();
        if let Some(p) = &m.pending {
            return if p.batch == batch {
                Ok(p.clone())
            } else {
                Err(Error::Conflict(format!("iteration {} is still pending", p.index)))
            };
        }
        if m.checkpoints.is_empty() || m.iterations.is_empty() {
            return Err(Error::NotFound("no checkpoints; bootstrap first".into()));
        }
        let mut tiles = Vec::new();
        for id in batch {
            if m.image(id).is_none() {
                return Err(Error::NotFound(format!("image {id}")));
            }
            for t in m.tiles.iter().filter(|t| &t.image_id == id) {
                if m.annotation(&t.id).is_some() {
                    return Err(Error::Conflict(format!("tile {} is already annotated", t.id)));
                }
                tiles.push(t.id.clone());
            }
        }
        if tiles.is_empty() {
            return Err(Error::Empty("batch images have no tiles".into()));
        }
        let index = m.iterations.len();
        let dataset_before = m.reviewed_tiles().len();
        let rankings = self.rank_stored_checkpoints()?;
        let selected = rankings[0].checkpoint.clone();
        let params = self.load_checkpoint(&selected)?.params;
        let mut records = Vec::with_capacity(tiles.len());
        for t in &tiles {
            let mask = self.predict_tile(&params, t)?;
            records.push(AnnotationRecord {
                tile_id: t.clone(),
                mask: self.put_blob(&mask.to_png_bytes()?, "png")?,
                status: AnnotationStatus::Predicted,
                iteration: index,
            });
        }
        let pending = PendingIteration {
            index,
            batch: batch.to_vec(),
            tiles,
            rankings,
            selected_checkpoint: selected,
            dataset_before,
        };
        self.commit(|m| {
            m.annotations.extend(records);
            m.pending = Some(pending.clone());
            Ok(pending)
        })
    }

    /// Applies expert points to a tile's mask. Replaying a request id returns
    /// the stored response without touching the manifest.
    pub fn ingest_corrections(
        &mut self,
        tile_id: &str,
        points: &[CorrectionPoint],
        request_id: &str,
        approve: bool,
    ) -> Result<CorrectionResponse> {
        if let Some(prior) = self.manifest().correction(request_id) {
            if prior.tile_id != tile_id {
                return Err(Error::Conflict(format!("request {request_id} was used for tile {}", prior.tile_id)));
            }
            return Ok(prior.response.clone());
        }
        let m = self.manifest();
        if m.tile(tile_id).is_none() {
            return Err(Error::NotFound(format!("tile {tile_id}")));
        }
        let ann = m.annotation(tile_id).ok_or_else(|| Error::NotFound(format!("annotation for tile {tile_id}")))?;
        if ann.status == AnnotationStatus::Approved {
            return Err(Error::Conflict(format!("tile {tile_id} is already approved")));
        }
        let mask = self.annotation_mask(tile_id)?;
        let interiors = BinaryMask::interiors_of(&mask);
        let edited = apply_corrections(&interiors, points, &m.config.correction)?;
        let new_mask = if points.is_empty() { mask } else { merge_binary_into(&mask, &edited)? };
        let status = if approve {
            AnnotationStatus::Approved
        } else if points.is_empty() {
            ann.status
        } else {
            AnnotationStatus::Corrected
        };
        let path = self.put_blob(&new_mask.to_png_bytes()?, "png")?;
        let response = CorrectionResponse {
            tile_id: tile_id.to_string(),
            status,
            mask: path.clone(),
            regions_before: interiors.region_count(),
            regions_after: edited.region_count(),
        };
        let entry = CorrectionEntry {
            request_id: request_id.to_string(),
            tile_id: tile_id.to_string(),
            points: points.to_vec(),
            approve,
            response: response.clone(),
        };
        self.commit(|m| {
            let a = m.annotation_mut(tile_id).expect("checked above");
            a.mask = path;
            a.status = status;
            m.corrections.push(entry);
            Ok(response)
        })
    }

    /// Step (d) inputs; fails with `PendingApprovals` while review is open.
    pub fn prepare_retrain(&self) -> Result<RetrainJob> {
        let m = self.manifest();
        let p = m.pending.as_ref().ok_or_else(|| Error::NotFound("no pending iteration".into()))?;
        let waiting = m.awaiting_review();
        if !waiting.is_empty() {
            return Err(Error::PendingApprovals { count: waiting.len(), tiles: waiting });
        }
        let train_ids: Vec<String> = m.reviewed_tiles().into_iter().filter(|t| !m.validation_tiles.contains(t)).collect();
        Ok(RetrainJob {
            iteration: p.index,
            params: self.load_checkpoint(&p.selected_checkpoint)?.params,
            pairs: self.pairs_for(&train_ids)?,
            config: m.config.train,
        })
    }

    /// Records a finished retraining run as the next iteration.
    pub fn finish_iteration(&mut self, out: RetrainOutput) -> Result<IterationReport> {
        let m = self.manifest();
        let p = m.pending.clone().ok_or_else(|| Error::NotFound("no pending iteration".into()))?;
        if out.iteration != p.index {
            return Err(Error::Conflict(format!("retrain output for iteration {} while {} is pending", out.iteration, p.index)));
        }
        let waiting = m.awaiting_review();
        if !waiting.is_empty() {
            return Err(Error::PendingApprovals { count: waiting.len(), tiles: waiting });
        }
        let records = self.store_checkpoints(p.index, &out.checkpoints)?;
        let history = self.store_history(&out.history)?;
        let after = m.reviewed_tiles().len();
        let corrected = p
            .tiles
            .iter()
            .filter(|t| m.corrections.iter().any(|c| &c.tile_id == *t && !c.points.is_empty()))
            .count();
        let top = &p.rankings[0];
        let rec = IterationRecord {
            index: p.index,
            train_set_size: after,
            selected_checkpoint: Some(p.selected_checkpoint.clone()),
            mean_ssim: Some(top.mean_ssim),
            rankings: p.rankings.clone(),
            newly_annotated: after - p.dataset_before,
            corrected,
            dataset_before: p.dataset_before,
            dataset_after: after,
            loss_history: Some(history),
            stats: None,
        };
        self.commit(|m| {
            m.checkpoints.extend(records);
            m.iterations.push(rec.clone());
            m.pending = None;
            Ok(rec)
        })
    }

    /// Runs one whole iteration. Without auto-approval it polls the manifest
    /// on disk until review completes; on timeout the iteration stays pending
    /// and a later call with the same batch resumes it.
    pub fn advance_iteration(&mut self, batch: &[String], opts: &AdvanceOptions) -> Result<IterationReport> {
        let pending = self.begin_iteration(batch)?;
        if opts.auto_approve {
            for t in self.manifest().awaiting_review() {
                self.ingest_corrections(&t, &[], &format!("auto-{}-{t}", pending.index), true)?;
            }
        }
        let start = Instant::now();
        loop {
            let waiting = self.manifest().awaiting_review();
            if waiting.is_empty() {
                break;
            }
            if start.elapsed() >= opts.timeout {
                return Err(Error::PendingApprovals { count: waiting.len(), tiles: waiting });
            }
            std::thread::sleep(opts.poll_interval.min(opts.timeout.saturating_sub(start.elapsed())));
            self.reload()?;
        }
        let out = self.prepare_retrain()?.run()?;
        self.finish_iteration(out)
    }

    /// Geometry statistics over the reviewed masks produced in `iteration`.
    /// Reports for recorded iterations are persisted; the pending one is only computed.
    pub fn run_statistics(&mut self, iteration: usize) -> Result<StatsReport> {
        let m = self.manifest();
        let pending = m.pending.as_ref().is_some_and(|p| p.index == iteration);
        if iteration >= m.iterations.len() && !pending {
            return Err(Error::NotFound(format!("iteration {iteration}")));
        }
        let ids: Vec<String> = m
            .annotations
            .iter()
            .filter(|a| a.iteration == iteration && a.status.is_reviewed())
            .map(|a| a.tile_id.clone())
            .collect();
        if ids.is_empty() {
            return Err(Error::Empty(format!("no approved annotations in iteration {iteration}")));
        }
        let masks = ids.iter().map(|t| self.annotation_mask(t)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&AnnotationMask> = masks.iter().collect();
        let report = analyze_masks(&refs, &m.config.stats)?;
        if pending {
            // partial review: report only
            return Ok(report);
        }
        let path = self.put_blob(&serde_json::to_vec_pretty(&report)?, "json")?;
        self.commit(|m| {
            m.iterations[iteration].stats = Some(path);
            Ok(())
        })?;
        Ok(report)
    }

    /// A previously computed statistics report.
    pub fn stored_statistics(&self, iteration: usize) -> Result<StatsReport> {
        let it = self.manifest().iterations.get(iteration).ok_or_else(|| Error::NotFound(format!("iteration {iteration}")))?;
        let path = it.stats.as_ref().ok_or_else(|| Error::NotFound(format!("statistics for iteration {iteration}")))?;
        Ok(serde_json::from_slice(&self.read_blob(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::MaskClass;

    #[test]
    fn upscale_repeats_pixels() {
        let mut m = AnnotationMask::new(2, 1);
        m.set(1, 0, MaskClass::Defect);
        let u = upscale_mask(&m, 3);
        assert_eq!((u.width, u.height), (6, 3));
        assert_eq!(u.count(MaskClass::Defect), 9);
        assert_eq!(u.get(3, 2), MaskClass::Defect);
        assert_eq!(u.get(2, 2), MaskClass::Background);
    }

    #[test]
    fn blend_endpoints() {
        let img = RawImage::filled(2, 2, 1, 100.0);
        let mask = AnnotationMask::new(2, 2);
        let pal = ClassPalette::default();
        let full = blend_overlay(&img, &mask, &pal, 1.0).unwrap();
        assert_eq!(full.get(0, 0, 0), pal.background[0] as f64);
        let none = blend_overlay(&img, &mask, &pal, 0.0).unwrap();
        assert!(none.data().iter().all(|&v| v == 100.0));
    }
}
