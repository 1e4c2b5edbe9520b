//! Corpus curation: geometry filtering and colour-histogram de-duplication.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StageRng;

/// File extensions the decoder is built to handle.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub aspect_ratio: f64,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            id: id.into(),
            path: path.into(),
            width,
            height,
            aspect_ratio: f64::from(width) / f64::from(height),
        })
    }

    /// Reads only the image header to obtain its dimensions.
    pub fn probe(id: impl Into<String>, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Decode {
            path: path.clone(),
            source,
        })?;
        Self::new(id, path, w, h)
    }

    pub fn decode(&self) -> Result<RgbImage> {
        decode_rgb(&self.path)
    }
}

pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if has_image_extension(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists every image under `dir` (recursively), ids being `/`-separated
/// paths relative to `dir`. Files whose header cannot be read are returned as
/// rejects. Output is sorted by id.
pub fn scan_directory(dir: &Path) -> Result<(Vec<ImageRecord>, Vec<Reject>)> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for path in files {
        let id = relative_id(dir, &path);
        match ImageRecord::probe(id, &path) {
            Ok(record) => records.push(record),
            Err(e) => rejects.push(Reject {
                path,
                reason: e.to_string(),
            }),
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((records, rejects))
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryParams {
    pub ratio: f64,
    pub ratio_tol: f64,
    pub min_width: u32,
    pub min_height: u32,
}

impl GeometryParams {
    /// Minimum dimensions expressed as a nominal size reduced by a relative
    /// slack, so that "nearly 1800×1200" images also pass.
    pub fn with_slack(ratio: f64, ratio_tol: f64, nominal: (u32, u32), slack: f64) -> Self {
        let shrink = |v: u32| (f64::from(v) * (1.0 - slack)).round() as u32;
        Self {
            ratio,
            ratio_tol,
            min_width: shrink(nominal.0),
            min_height: shrink(nominal.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0) {
            return Err(Error::InvalidParameter(format!("ratio must be > 0, got {}", self.ratio)));
        }
        if !(self.ratio_tol >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ratio_tol must be >= 0, got {}",
                self.ratio_tol
            )));
        }
        Ok(())
    }

    /// Why `record` fails the filter, or `None` if it passes.
    pub fn rejection(&self, record: &ImageRecord) -> Option<&'static str> {
        if (record.aspect_ratio - self.ratio).abs() > self.ratio_tol {
            Some("aspect-ratio")
        } else if record.width < self.min_width || record.height < self.min_height {
            Some("resolution")
        } else {
            None
        }
    }
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self::with_slack(1.5, 0.1, (1800, 1200), 0.05)
    }
}

/// Keeps records near the target aspect ratio and above the minimum size,
/// preserving input order.
pub fn filter_geometry(images: &[ImageRecord], params: &GeometryParams) -> Result<Vec<ImageRecord>> {
    params.validate()?;
    Ok(images
        .iter()
        .filter(|r| params.rejection(r).is_none())
        .cloned()
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogram {
    bins_per_channel: usize,
    bins: Vec<f64>,
}

impl ColorHistogram {
    /// Joint RGB histogram normalized to unit mass.
    pub fn of_image(image: &RgbImage, bins_per_channel: usize) -> Result<Self> {
        if !(2..=256).contains(&bins_per_channel) {
            return Err(Error::InvalidParameter(format!(
                "bins_per_channel must be in 2..=256, got {bins_per_channel}"
            )));
        }
        let n = bins_per_channel;
        let mut counts = vec![0u64; n * n * n];
        for px in image.pixels() {
            let bin = |v: u8| usize::from(v) * n / 256;
            counts[(bin(px[0]) * n + bin(px[1])) * n + bin(px[2])] += 1;
        }
        let total = (image.width() as u64 * image.height() as u64) as f64;
        if total == 0.0 {
            return Err(Error::InvalidParameter("cannot histogram an empty image".into()));
        }
        Ok(Self {
            bins_per_channel: n,
            bins: counts.into_iter().map(|c| c as f64 / total).collect(),
        })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn bins_per_channel(&self) -> usize {
        self.bins_per_channel
    }

    /// L1 distance between normalized histograms; lies in `[0, 2]`.
    pub fn distance(&self, other: &ColorHistogram) -> f64 {
        debug_assert_eq!(self.bins.len(), other.bins.len());
        self.bins
            .iter()
            .zip(&other.bins)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

pub fn compute_histogram(image: &ImageRecord, bins_per_channel: usize) -> Result<ColorHistogram> {
    ColorHistogram::of_image(&image.decode()?, bins_per_channel)
}

pub fn compute_histograms(images: &[ImageRecord], bins_per_channel: usize) -> Result<Vec<ColorHistogram>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        images
            .par_iter()
            .map(|r| compute_histogram(r, bins_per_channel))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        images
            .iter()
            .map(|r| compute_histogram(r, bins_per_channel))
            .collect()
    }
}

/// Result of a de-duplication sweep, in terms of input positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DedupOutcome {
    /// Surviving positions, ascending.
    pub kept: Vec<usize>,
    /// `(survivor, victim)` for every conflict resolved during the sweep.
    pub dropped: Vec<(usize, usize)>,
}

/// Single greedy pass in input order. Each newcomer is compared against the
/// currently kept images; for every pair closer than `threshold` a coin from
/// `rng` decides which of the two is thrown away. The newcomer is kept only if
/// it survives every conflict.
pub fn dedup_histograms(hists: &[ColorHistogram], threshold: f64, rng: &mut StageRng) -> Result<DedupOutcome> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidParameter(format!("threshold must be >= 0, got {threshold}")));
    }
    let mut out = DedupOutcome::default();
    for (i, hist) in hists.iter().enumerate() {
        let mut alive = true;
        let mut k = 0;
        while k < out.kept.len() {
            let j = out.kept[k];
            if hist.distance(&hists[j]) < threshold {
                if rng.random::<bool>() {
                    out.dropped.push((j, i));
                    alive = false;
                    break;
                }
                out.dropped.push((i, j));
                out.kept.remove(k);
                continue;
            }
            k += 1;
        }
        if alive {
            out.kept.push(i);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct DedupResult {
    pub kept: Vec<ImageRecord>,
    pub dropped: Vec<(ImageRecord, ImageRecord)>,
}

pub fn dedup_by_histogram(
    images: &[ImageRecord],
    threshold: f64,
    bins_per_channel: usize,
    rng: &mut StageRng,
) -> Result<DedupResult> {
    let hists = compute_histograms(images, bins_per_channel)?;
    let outcome = dedup_histograms(&hists, threshold, rng)?;
    Ok(DedupResult {
        kept: outcome.kept.iter().map(|&i| images[i].clone()).collect(),
        dropped: outcome
            .dropped
            .iter()
            .map(|&(s, v)| (images[s].clone(), images[v].clone()))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Kept,
    Dropped,
}

/// One line of the curation manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub status: Status,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationParams {
    pub geometry: GeometryParams,
    pub dedup_threshold: f64,
    pub bins_per_channel: usize,
}

impl Default for CurationParams {
    fn default() -> Self {
        Self {
            geometry: GeometryParams::default(),
            // 0.25 of the L1 range [0, 2] catches re-encodes and
            // near-identical crops.
            dedup_threshold: 0.25,
            bins_per_channel: 8,
        }
    }
}

/// Runs scan → geometry filter → dedup over a directory and reports a status
/// for every file found.
pub fn curate_directory(dir: &Path, params: &CurationParams, rng: &mut StageRng) -> Result<Vec<ManifestEntry>> {
    params.geometry.validate()?;
    let (records, rejects) = scan_directory(dir)?;
    let mut entries = Vec::with_capacity(records.len() + rejects.len());
    let mut candidates = Vec::new();
    for record in &records {
        match params.geometry.rejection(record) {
            Some(reason) => entries.push(entry(record, Status::Dropped, reason.to_string())),
            None => candidates.push(record.clone()),
        }
    }
    let dedup = dedup_by_histogram(&candidates, params.dedup_threshold, params.bins_per_channel, rng)?;
    for record in &dedup.kept {
        entries.push(entry(record, Status::Kept, String::new()));
    }
    for (survivor, victim) in &dedup.dropped {
        entries.push(entry(victim, Status::Dropped, format!("duplicate-of:{}", survivor.id)));
    }
    for reject in rejects {
        entries.push(ManifestEntry {
            id: relative_id(dir, &reject.path),
            path: reject.path.to_string_lossy().into_owned(),
            width: 0,
            height: 0,
            status: Status::Dropped,
            reason: "unreadable".into(),
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

fn entry(record: &ImageRecord, status: Status, reason: String) -> ManifestEntry {
    ManifestEntry {
        id: record.id.clone(),
        path: record.path.to_string_lossy().into_owned(),
        width: record.width,
        height: record.height,
        status,
        reason,
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    crate::io::write_csv(path, entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    crate::io::read_csv(path)
}
