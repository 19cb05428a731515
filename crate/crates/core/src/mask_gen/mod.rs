//! Query-driven region proposal.
//!
//! Segment the image into entities, score each masked entity against the
//! query embedding, keep the high-scoring ones with an adaptive threshold,
//! filter them by any location words in the query, and union what is left.

mod location;
mod threshold;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use location::{grid_cell, location_refine, parse_location, LocationConstraint, LocationKind};
pub use threshold::{adaptive_threshold, fixed_threshold, ThresholdResult, DEFAULT_FLOOR, FLAT_GAP};

use crate::backends::{ImageEmbedder, Segmenter, TextEmbedder};
use crate::error::{Error, Result};
use crate::image::{apply_mask, mask_centroid, mask_union, BinaryMask, Image, TextPrompt};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntity {
    /// Position within the segmenter output.
    pub index: usize,
    pub mask: BinaryMask,
    /// Cosine similarity to the query, in `[-1, 1]`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskGenConfig {
    /// Absolute score floor applied after the adaptive cut.
    pub floor: f64,
    /// Replace the adaptive rule with a fixed threshold.
    pub fixed_tau: Option<f64>,
    /// Crop each masked entity to its bounding box before embedding.
    pub crop_to_bbox: bool,
}

impl Default for MaskGenConfig {
    fn default() -> Self {
        Self { floor: DEFAULT_FLOOR, fixed_tau: None, crop_to_bbox: false }
    }
}

/// Cosine similarity of two embeddings, each unit-normalised in `f64` first.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let unit = |v: &[f32]| -> Result<Vec<f64>> {
        let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Backend("embedding has zero or non-finite norm".into()));
        }
        Ok(v.iter().map(|&x| f64::from(x) / n).collect())
    };
    let (ua, ub) = (unit(a)?, unit(b)?);
    Ok(ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

fn crop_to_bbox(image: &Image, mask: &BinaryMask) -> Result<Image> {
    let (w, h) = mask.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 > x1 {
        return Err(Error::EmptyRegion("cannot crop to an empty mask".into()));
    }
    let data = (y0..=y1)
        .flat_map(|y| (x0..=x1).flat_map(move |x| image.pixel(x, y)))
        .collect();
    Image::new(x1 - x0 + 1, y1 - y0 + 1, data)
}

/// Score every entity mask against the query.
///
/// The query is embedded once. Entities are embedded concurrently and
/// returned in input order.
pub fn score_entities(
    image: &Image,
    entities: &[BinaryMask],
    query: &TextPrompt,
    text_embedder: &dyn TextEmbedder,
    image_embedder: &dyn ImageEmbedder,
    crop: bool,
) -> Result<Vec<ScoredEntity>> {
    if entities.is_empty() {
        return Err(Error::invalid("no entities to score"));
    }
    let query_emb = text_embedder.embed_text(query.text())?;
    entities
        .par_iter()
        .enumerate()
        .map(|(index, mask)| {
            let wrap = |e: Error| Error::Entity { index, source: Box::new(e) };
            let masked = apply_mask(image, mask).map_err(wrap)?;
            let input = if crop { crop_to_bbox(&masked, mask).map_err(wrap)? } else { masked };
            let emb = image_embedder.embed_image(&input).map_err(wrap)?;
            let score = cosine(&emb, &query_emb).map_err(wrap)?;
            Ok(ScoredEntity { index, mask: mask.clone(), score })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Adaptive,
    Fixed,
}

/// Audit record of one mask-generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub query: String,
    pub entity_count: usize,
    pub scores: Vec<f64>,
    /// Grid cell `(row, col)` of each entity's centroid; `None` for empty masks.
    pub cells: Vec<Option<(usize, usize)>>,
    pub threshold_mode: ThresholdMode,
    pub tau: Option<f64>,
    pub floor: f64,
    pub selected_by_threshold: Vec<usize>,
    pub below_floor: Vec<usize>,
    pub constraint: LocationConstraint,
    pub selected: Vec<usize>,
    pub region_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct MaskOutcome {
    /// `None` when nothing survived thresholding and refinement.
    pub region: Option<BinaryMask>,
    pub entities: Vec<ScoredEntity>,
    pub report: MaskReport,
}

impl MaskOutcome {
    pub fn into_region(self) -> Result<BinaryMask> {
        self.region.ok_or(Error::NoMatchingEntity)
    }
}

/// Run segmentation, scoring, thresholding, and location refinement.
pub fn generate_mask(
    image: &Image,
    query: &TextPrompt,
    segmenter: &dyn Segmenter,
    text_embedder: &dyn TextEmbedder,
    image_embedder: &dyn ImageEmbedder,
    config: &MaskGenConfig,
) -> Result<MaskOutcome> {
    let masks = segmenter.segment(image)?;
    if let Some(m) = masks.iter().find(|m| m.dims() != image.dims()) {
        return Err(Error::Backend(format!(
            "segmenter returned a {:?} mask for a {:?} image",
            m.dims(),
            image.dims()
        )));
    }
    let constraint = parse_location(query);
    let mut report = MaskReport {
        query: query.text().to_string(),
        entity_count: masks.len(),
        scores: Vec::new(),
        cells: masks
            .iter()
            .map(|m| mask_centroid(m).ok().map(|(cx, cy)| grid_cell(cx, cy, image.width(), image.height())))
            .collect(),
        threshold_mode: if config.fixed_tau.is_some() { ThresholdMode::Fixed } else { ThresholdMode::Adaptive },
        tau: None,
        floor: config.floor,
        selected_by_threshold: Vec::new(),
        below_floor: Vec::new(),
        constraint: constraint.clone(),
        selected: Vec::new(),
        region_pixels: 0,
    };
    // entities without pixels are never scored but keep their index
    let non_empty: Vec<usize> = (0..masks.len()).filter(|&i| !masks[i].is_empty()).collect();
    if non_empty.is_empty() {
        return Ok(MaskOutcome { region: None, entities: Vec::new(), report });
    }
    let kept: Vec<BinaryMask> = non_empty.iter().map(|&i| masks[i].clone()).collect();
    let mut entities = score_entities(image, &kept, query, text_embedder, image_embedder, config.crop_to_bbox)?;
    for e in &mut entities {
        e.index = non_empty[e.index];
    }
    // empty masks are reported at the bottom of the cosine range
    report.scores = vec![-1.0; masks.len()];
    for e in &entities {
        report.scores[e.index] = e.score;
    }

    let scores: Vec<f64> = entities.iter().map(|e| e.score).collect();
    let threshold = match config.fixed_tau {
        Some(tau) => fixed_threshold(&scores, tau)?,
        None => adaptive_threshold(&scores, config.floor)?,
    };
    let to_entity = |v: &[usize]| v.iter().map(|&i| entities[i].index).collect::<Vec<_>>();
    report.tau = Some(threshold.tau);
    report.selected_by_threshold = to_entity(&threshold.selected);
    report.below_floor = to_entity(&threshold.below_floor);

    let selected = location_refine(&entities, &report.selected_by_threshold, &constraint, image.dims());
    report.selected = selected.clone();
    let region = if selected.is_empty() {
        None
    } else {
        let chosen = entities.iter().filter(|e| selected.contains(&e.index)).map(|e| &e.mask);
        let u = mask_union(chosen)?;
        report.region_pixels = u.count();
        Some(u)
    };
    Ok(MaskOutcome { region, entities, report })
}
