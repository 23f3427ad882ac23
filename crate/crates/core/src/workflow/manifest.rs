//! Persistent dataset manifest and its integrity rules.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ClassPalette;
use crate::geometry::StatsConfig;
use crate::nn::{DiscriminatorConfig, GeneratorConfig};
use crate::seed::{CorrectionConfig, CorrectionPoint, SeedConfig};
use crate::train::TrainConfig;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    /// Side of the stored tiles; must be a multiple of the network input size.
    pub tile_size: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub palette: ClassPalette,
    pub stats: StatsConfig,
    pub correction: CorrectionConfig,
    pub seed: SeedConfig,
    /// Share of the reviewed tiles held out for checkpoint ranking.
    pub validation_fraction: f64,
    pub split_seed: u64,
    /// Seed of the initial network weights.
    pub init_seed: u64,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            tile_size: 512,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            palette: ClassPalette::default(),
            stats: StatsConfig::default(),
            correction: CorrectionConfig::default(),
            seed: SeedConfig::default(),
            validation_fraction: 0.1,
            split_seed: 0,
            init_seed: 0,
        }
    }
}

impl WorkflowConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        let n = self.generator.input_size;
        if self.discriminator.input_size != n {
            return Err(Error::InvalidArgument("generator and discriminator input sizes differ".into()));
        }
        if self.tile_size < n || self.tile_size % n != 0 {
            return Err(Error::InvalidArgument(format!("tile size {} is not a multiple of {n}", self.tile_size)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Downscale factor from tile to network resolution.
    pub fn model_factor(&self) -> usize {
        self.tile_size / self.generator.input_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Raw,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width: usize,
    pub height: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub id: String,
    pub image_id: String,
    /// `(row, col)` in the source image.
    pub origin: (usize, usize),
    pub size: usize,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationStatus {
    Seed,
    Predicted,
    Corrected,
    Approved,
}

impl AnnotationStatus {
    /// Reviewed annotations enter the training set and the statistics.
    pub fn is_reviewed(self) -> bool {
        matches!(self, AnnotationStatus::Corrected | AnnotationStatus::Approved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub tile_id: String,
    pub mask: String,
    pub status: AnnotationStatus,
    /// Iteration that produced the annotation.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResponse {
    pub tile_id: String,
    pub status: AnnotationStatus,
    pub mask: String,
    pub regions_before: usize,
    pub regions_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEntry {
    pub request_id: String,
    pub tile_id: String,
    pub points: Vec<CorrectionPoint>,
    pub approve: bool,
    pub response: CorrectionResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub path: String,
    pub step: u64,
    pub iteration: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub checkpoint: String,
    pub step: u64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// Reviewed tiles in the dataset once the iteration completed.
    pub train_set_size: usize,
    pub selected_checkpoint: Option<String>,
    pub mean_ssim: Option<f64>,
    pub rankings: Vec<RankEntry>,
    pub newly_annotated: usize,
    pub corrected: usize,
    pub dataset_before: usize,
    pub dataset_after: usize,
    pub loss_history: Option<String>,
    pub stats: Option<String>,
}

pub type IterationReport = IterationRecord;

/// An iteration whose predictions are out for review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingIteration {
    pub index: usize,
    pub batch: Vec<String>,
    pub tiles: Vec<String>,
    pub rankings: Vec<RankEntry>,
    pub selected_checkpoint: String,
    pub dataset_before: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: WorkflowConfig,
    pub images: Vec<ImageRecord>,
    pub tiles: Vec<TileRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub corrections: Vec<CorrectionEntry>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub iterations: Vec<IterationRecord>,
    /// Held-out tiles, fixed when the first iteration is recorded.
    pub validation_tiles: Vec<String>,
    pub pending: Option<PendingIteration>,
}

fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a str>) -> Result<HashSet<&'a str>> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Integrity(format!("duplicate {what} id {id}")));
        }
    }
    Ok(seen)
}

impl DatasetManifest {
    pub fn new(config: WorkflowConfig) -> Self {
        Self {
            version: MANIFEST_VERSION,
            config,
            images: Vec::new(),
            tiles: Vec::new(),
            annotations: Vec::new(),
            corrections: Vec::new(),
            checkpoints: Vec::new(),
            iterations: Vec::new(),
            validation_tiles: Vec::new(),
            pending: None,
        }
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    pub fn tile(&self, id: &str) -> Option<&TileRecord> {
        self.tiles.iter().find(|r| r.id == id)
    }

    pub fn annotation(&self, tile_id: &str) -> Option<&AnnotationRecord> {
        self.annotations.iter().find(|r| r.tile_id == tile_id)
    }

    pub fn annotation_mut(&mut self, tile_id: &str) -> Option<&mut AnnotationRecord> {
        self.annotations.iter_mut().find(|r| r.tile_id == tile_id)
    }

    pub fn checkpoint(&self, id: &str) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|r| r.id == id)
    }

    pub fn correction(&self, request_id: &str) -> Option<&CorrectionEntry> {
        self.corrections.iter().find(|r| r.request_id == request_id)
    }

    /// Tile ids with a reviewed annotation, sorted.
    pub fn reviewed_tiles(&self) -> Vec<String> {
        let mut ids: Vec<String> =
            self.annotations.iter().filter(|a| a.status.is_reviewed()).map(|a| a.tile_id.clone()).collect();
        ids.sort();
        ids
    }

    /// Pending tiles still waiting for approval or correction.
    pub fn awaiting_review(&self) -> Vec<String> {
        let Some(p) = &self.pending else { return Vec::new() };
        p.tiles
            .iter()
            .filter(|t| self.annotation(t).is_none_or(|a| !a.status.is_reviewed()))
            .cloned()
            .collect()
    }

    /// Referential integrity and iteration bookkeeping.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Integrity(format!("manifest version {}", self.version)));
        }
        let images = unique("image", self.images.iter().map(|r| r.id.as_str()))?;
        let tiles = unique("tile", self.tiles.iter().map(|r| r.id.as_str()))?;
        let checkpoints = unique("checkpoint", self.checkpoints.iter().map(|r| r.id.as_str()))?;
        unique("annotation", self.annotations.iter().map(|r| r.tile_id.as_str()))?;
        unique("request", self.corrections.iter().map(|r| r.request_id.as_str()))?;
        for t in &self.tiles {
            let img = self
                .image(&t.image_id)
                .ok_or_else(|| Error::Integrity(format!("tile {} points to missing image {}", t.id, t.image_id)))?;
            if t.origin.0 + t.size > img.height || t.origin.1 + t.size > img.width {
                return Err(Error::Integrity(format!("tile {} lies outside image {}", t.id, img.id)));
            }
        }
        for a in &self.annotations {
            if !tiles.contains(a.tile_id.as_str()) {
                return Err(Error::Integrity(format!("annotation for missing tile {}", a.tile_id)));
            }
        }
        for c in &self.corrections {
            if !tiles.contains(c.tile_id.as_str()) {
                return Err(Error::Integrity(format!("correction {} for missing tile {}", c.request_id, c.tile_id)));
            }
        }
        let status: HashMap<&str, AnnotationStatus> =
            self.annotations.iter().map(|a| (a.tile_id.as_str(), a.status)).collect();
        for v in &self.validation_tiles {
            if !status.get(v.as_str()).is_some_and(|s| s.is_reviewed()) {
                return Err(Error::Integrity(format!("validation tile {v} has no reviewed annotation")));
            }
        }
        let mut last_size = 0;
        for (i, it) in self.iterations.iter().enumerate() {
            if it.index != i {
                return Err(Error::Integrity(format!("iteration {} stored at position {i}", it.index)));
            }
            if it.train_set_size < last_size {
                return Err(Error::Integrity(format!("training set shrank at iteration {i}")));
            }
            if it.dataset_after != it.dataset_before + it.newly_annotated {
                return Err(Error::Integrity(format!("iteration {i} dataset sizes do not add up")));
            }
            if let Some(ck) = &it.selected_checkpoint {
                if !checkpoints.contains(ck.as_str()) {
                    return Err(Error::Integrity(format!("iteration {i} selects missing checkpoint {ck}")));
                }
            }
            last_size = it.train_set_size;
        }
        for c in &self.checkpoints {
            if c.iteration > self.iterations.len() {
                return Err(Error::Integrity(format!("checkpoint {} from future iteration", c.id)));
            }
        }
        if let Some(p) = &self.pending {
            if p.index != self.iterations.len() {
                return Err(Error::Integrity("pending iteration index is not the next one".into()));
            }
            if !checkpoints.contains(p.selected_checkpoint.as_str()) {
                return Err(Error::Integrity("pending iteration selects a missing checkpoint".into()));
            }
            for b in &p.batch {
                if !images.contains(b.as_str()) {
                    return Err(Error::Integrity(format!("pending batch names missing image {b}")));
                }
            }
            for t in &p.tiles {
                if !status.contains_key(t.as_str()) {
                    return Err(Error::Integrity(format!("pending tile {t} has no annotation")));
                }
            }
        }
        Ok(())
    }
}
