//! Manifest-driven evaluation of assessment variants.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mse, psnr_from_mse, ssim};
use crate::assessment::{score_proposals, select, AssessmentConfig, AssessmentScore};
use crate::backends::Backends;
use crate::diffusion::retouch;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, TextPrompt};
use crate::io::read_image;
use crate::pipeline::{region_for, PipelineConfig};

pub const REFERENCE_NOTE: &str =
    "metrics compare each selected output against the original input image; fid and lpips are not computed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub query: String,
    pub conditional_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
}

/// Read a manifest and resolve its paths against the manifest's directory.
/// An empty manifest is rejected.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    if entries.is_empty() {
        return Err(Error::invalid(format!("manifest {} has no entries", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        e.image_path = base.join(&e.image_path);
        if let Some(r) = &mut e.reference_path {
            *r = base.join(&*r);
        }
    }
    Ok(entries)
}

/// One on/off combination of the assessment components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub enable_cma: bool,
    pub enable_iqa: bool,
}

impl VariantSpec {
    pub fn new(enable_cma: bool, enable_iqa: bool) -> Self {
        let name = match (enable_cma, enable_iqa) {
            (false, false) => "none",
            (true, false) => "cma",
            (false, true) => "iqa",
            (true, true) => "cma+iqa",
        };
        Self { name: name.into(), enable_cma, enable_iqa }
    }

    /// All four combinations, baseline first.
    pub fn all() -> Vec<VariantSpec> {
        vec![Self::new(false, false), Self::new(true, false), Self::new(false, true), Self::new(true, true)]
    }

    pub fn parse(name: &str) -> Result<Vec<VariantSpec>> {
        match name.trim() {
            "all" => Ok(Self::all()),
            s => s
                .split(',')
                .map(|n| {
                    Self::all()
                        .into_iter()
                        .find(|v| v.name == n.trim())
                        .ok_or_else(|| Error::invalid(format!("unknown variant {n:?}")))
                })
                .collect(),
        }
    }

    fn config(&self, alpha: f64) -> AssessmentConfig {
        AssessmentConfig { alpha, enable_cma: self.enable_cma, enable_iqa: self.enable_iqa }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub entry: usize,
    pub image_path: PathBuf,
    pub query: String,
    /// False when no entity matched and the region was empty.
    pub region_found: bool,
    pub region_pixels: usize,
    pub chosen: usize,
    /// Raw component scores of every scored proposal.
    pub candidates: Vec<AssessmentScore>,
    pub mse: f64,
    /// `None` when the output equals the original.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_ssim: Option<f64>,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub entry: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub mse: Option<f64>,
    /// Over rows with finite PSNR.
    pub psnr: Option<f64>,
    pub infinite_psnr_rows: usize,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reference: String,
    pub variant: VariantSpec,
    pub alpha: f64,
    pub config: PipelineConfig,
    pub backend: Vec<(String, String)>,
    pub rows: Vec<MetricRow>,
    pub excluded_count: usize,
    pub excluded: Vec<Excluded>,
    pub means: Means,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
}

impl MetricReport {
    pub fn compute_means(rows: &[MetricRow]) -> Means {
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Means {
            mse: mean(rows.iter().map(|r| r.mse).collect()),
            psnr: mean(rows.iter().filter_map(|r| r.psnr).collect()),
            infinite_psnr_rows: rows.iter().filter(|r| r.psnr_infinite).count(),
            ssim: mean(rows.iter().map(|r| r.ssim).collect()),
        }
    }

    /// One line per row: entry, chosen, mse, psnr, ssim.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["variant", "entry", "image_path", "query", "chosen", "mse", "psnr", "ssim"]).map_err(io)?;
        for r in &self.rows {
            let psnr = match r.psnr {
                Some(p) => p.to_string(),
                None => "inf".to_string(),
            };
            w.write_record([
                self.variant.name.clone(),
                r.entry.to_string(),
                r.image_path.display().to_string(),
                r.query.clone(),
                r.chosen.to_string(),
                r.mse.to_string(),
                psnr,
                r.ssim.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

struct EntryResult {
    region_found: bool,
    region_pixels: usize,
    original: Image,
    reference: Option<Image>,
    /// (proposal index, image) of every scored proposal.
    images: Vec<(usize, Image)>,
    scores: Vec<AssessmentScore>,
}

fn run_entry(entry: &ManifestEntry, backends: &Backends, config: &PipelineConfig) -> Result<EntryResult> {
    let original = read_image(&entry.image_path)?;
    let reference = entry.reference_path.as_ref().map(read_image).transpose()?;
    let query = TextPrompt::query(entry.query.clone())?;
    let text = TextPrompt::conditional(entry.conditional_text.clone())?;
    let (region_found, region) = match region_for(&original, &query, backends, &config.mask) {
        Ok((_, region)) => (true, region),
        Err(e) if matches!(e.source, Error::NoMatchingEntity) => {
            log::info!("{}: no entity matched {:?}, editing nothing", entry.image_path.display(), entry.query);
            (false, BinaryMask::zeros(original.width(), original.height()))
        }
        Err(e) => return Err(e.source),
    };
    let outcome = retouch(&original, &region, &text, backends.codec.as_ref(), backends.denoiser.as_ref(), &config.retouch)?;
    let all_on = AssessmentConfig { enable_cma: true, enable_iqa: true, ..config.assessment };
    let candidates: Vec<(usize, &Image)> = outcome.proposals.iter().map(|p| (p.index, &p.image)).collect();
    let scores =
        score_proposals(&original, &candidates, &text, backends.text.as_ref(), backends.image.as_ref(), &all_on)?;
    if scores.is_empty() {
        return Err(Error::Backend("every proposal failed scoring".into()));
    }
    let images = outcome.proposals.into_iter().map(|p| (p.index, p.image)).collect();
    Ok(EntryResult { region_found, region_pixels: region.count(), original, reference, images, scores })
}

fn row_for(index: usize, entry: &ManifestEntry, r: &EntryResult, assessment: &AssessmentConfig) -> Result<MetricRow> {
    let selection = select(&r.scores, assessment)?;
    let output = &r.images.iter().find(|(i, _)| *i == selection.chosen).expect("chosen proposal exists").1;
    let m = mse(&r.original, output)?;
    let p = psnr_from_mse(m);
    let (reference_mse, reference_ssim) = match &r.reference {
        Some(reference) => (Some(mse(reference, output)?), Some(ssim(reference, output)?)),
        None => (None, None),
    };
    Ok(MetricRow {
        entry: index,
        image_path: entry.image_path.clone(),
        query: entry.query.clone(),
        region_found: r.region_found,
        region_pixels: r.region_pixels,
        chosen: selection.chosen,
        candidates: r.scores.clone(),
        mse: m,
        psnr: p.is_finite().then_some(p),
        psnr_infinite: p.is_infinite(),
        ssim: ssim(&r.original, output)?,
        reference_mse,
        reference_ssim,
        lpips: None,
    })
}

/// Run every entry once and score its proposals under each variant.
///
/// Proposals do not depend on the assessment settings, so each entry is
/// retouched a single time and every variant selects among the same
/// candidates. Entries run concurrently; rows keep manifest order. An entry
/// whose query matches nothing is retouched with an empty region. Any other
/// failure excludes the entry from every variant and is recorded.
pub fn evaluate_manifest(
    entries: &[ManifestEntry],
    backends: &Backends,
    config: &PipelineConfig,
    variants: &[VariantSpec],
) -> Result<Vec<MetricReport>> {
    if entries.is_empty() {
        return Err(Error::invalid("manifest has no entries"));
    }
    if variants.is_empty() {
        return Err(Error::invalid("no variants requested"));
    }
    config.retouch.validate()?;
    config.assessment.validate()?;

    let results: Vec<Result<EntryResult>> = entries.par_iter().map(|e| run_entry(e, backends, config)).collect();

    variants
        .iter()
        .map(|v| {
            let assessment = v.config(config.assessment.alpha);
            let mut rows = Vec::new();
            let mut excluded = Vec::new();
            for (i, (entry, result)) in entries.iter().zip(&results).enumerate() {
                match result.as_ref().map_err(|e| e.to_string()).and_then(|r| {
                    row_for(i, entry, r, &assessment).map_err(|e| e.to_string())
                }) {
                    Ok(row) => rows.push(row),
                    Err(error) => {
                        log::warn!("entry {i} ({}) excluded: {error}", entry.image_path.display());
                        excluded.push(Excluded { entry: i, error });
                    }
                }
            }
            Ok(MetricReport {
                reference: REFERENCE_NOTE.to_string(),
                variant: v.clone(),
                alpha: config.assessment.alpha,
                config: PipelineConfig { assessment, ..config.clone() },
                backend: backends.identifiers.clone(),
                means: MetricReport::compute_means(&rows),
                rows,
                excluded_count: excluded.len(),
                excluded,
                fid: None,
                lpips: None,
            })
        })
        .collect()
}
