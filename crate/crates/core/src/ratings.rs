//! Rating ingestion, outlier cleaning, per-image aggregation, dataset
//! statistics and reference/input splits.
//!
//! # Rating table
//!
//! Comma- or tab-delimited text with a header row containing at least
//! `image_id, rater_id, beauty, happy, dwell_seconds` (extra columns are
//! ignored). `beauty` and `happy` are integers on the 1..=7 agreement scale.
//! Votes with a dwell time under [`MIN_DWELL_SECONDS`] are rejected.
//!
//! # Profile table
//!
//! `rater_id` plus one column per attribute. Levels are free-form strings;
//! the standard attribute names are listed in [`STANDARD_ATTRIBUTES`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::pearson;
use crate::rng::StageRng;

pub const SCORE_MIN: u8 = 1;
pub const SCORE_MAX: u8 = 7;
/// Largest possible gap between two mean scores on the 1..=7 scale.
pub const MAX_SCORE_GAP: f64 = (SCORE_MAX - SCORE_MIN) as f64;
pub const MIN_DWELL_SECONDS: f64 = 3.0;

pub const RATING_COLUMNS: [&str; 5] = ["image_id", "rater_id", "beauty", "happy", "dwell_seconds"];

pub const STANDARD_ATTRIBUTES: [&str; 7] = [
    "optimism",
    "pro_society",
    "fit_surroundings",
    "mood",
    "photo_knowledge",
    "lighting",
    "gender",
];

pub const UNKNOWN_LEVEL: &str = "unknown";

/// Which score an assessor targets. The other one acts as the assistant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Beauty,
    Happy,
}

impl Dimension {
    pub fn other(self) -> Self {
        match self {
            Dimension::Beauty => Dimension::Happy,
            Dimension::Happy => Dimension::Beauty,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Beauty => "beauty",
            Dimension::Happy => "happy",
        }
    }

    pub fn score(self, label: &LabeledImage) -> f64 {
        match self {
            Dimension::Beauty => label.beauty,
            Dimension::Happy => label.happy,
        }
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beauty" => Ok(Dimension::Beauty),
            "happy" | "happiness" => Ok(Dimension::Happy),
            other => Err(Error::InvalidParameter(format!("unknown dimension `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub image_id: String,
    pub rater_id: String,
    pub beauty: u8,
    pub happy: u8,
    #[serde(rename = "dwell_seconds")]
    pub dwell: f64,
}

impl RatingRecord {
    pub fn is_valid(&self) -> bool {
        (SCORE_MIN..=SCORE_MAX).contains(&self.beauty)
            && (SCORE_MIN..=SCORE_MAX).contains(&self.happy)
            && self.dwell >= MIN_DWELL_SECONDS
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowReject {
    /// 1-based line number in the source file (header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<RatingRecord>,
    pub rejects: Vec<RowReject>,
}

fn sniff_delimiter(header: &str) -> u8 {
    if header.contains('\t') && !header.contains(',') {
        b'\t'
    } else {
        b','
    }
}

pub fn ingest_ratings(path: &Path) -> Result<IngestReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_ratings_from(text.as_bytes())
}

/// Parses a rating table. A missing required column is a hard error; any
/// other problem rejects just that row.
pub fn ingest_ratings_from<R: Read>(mut reader: R) -> Result<IngestReport> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::Other(format!("reading rating table: {e}")))?;
    let delimiter = sniff_delimiter(text.lines().next().unwrap_or(""));
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = csv.headers().map_err(|e| Error::csv("rating table header", e))?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(RATING_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut report = IngestReport::default();
    for row in csv.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.rejects.push(RowReject {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&row, &cols) {
            Ok(record) => report.records.push(record),
            Err(reason) => report.rejects.push(RowReject { line, reason }),
        }
    }
    Ok(report)
}

fn parse_row(row: &csv::StringRecord, cols: &[usize; 5]) -> std::result::Result<RatingRecord, String> {
    let field = |i: usize| row.get(cols[i]).ok_or_else(|| format!("missing field `{}`", RATING_COLUMNS[i]));
    let score = |i: usize| -> std::result::Result<u8, String> {
        let raw = field(i)?;
        let v: u8 = raw
            .parse()
            .map_err(|_| format!("`{}` is not an integer: {raw:?}", RATING_COLUMNS[i]))?;
        if !(SCORE_MIN..=SCORE_MAX).contains(&v) {
            return Err(format!("`{}` out of range 1..=7: {v}", RATING_COLUMNS[i]));
        }
        Ok(v)
    };
    let image_id = field(0)?.to_string();
    let rater_id = field(1)?.to_string();
    if image_id.is_empty() || rater_id.is_empty() {
        return Err("empty image_id or rater_id".into());
    }
    let beauty = score(2)?;
    let happy = score(3)?;
    let raw = field(4)?;
    let dwell: f64 = raw
        .parse()
        .map_err(|_| format!("`dwell_seconds` is not a number: {raw:?}"))?;
    if !dwell.is_finite() || dwell < 0.0 {
        return Err(format!("`dwell_seconds` must be >= 0: {dwell}"));
    }
    if dwell < MIN_DWELL_SECONDS {
        return Err(format!("dwell {dwell} s below the {MIN_DWELL_SECONDS} s minimum"));
    }
    Ok(RatingRecord {
        image_id,
        rater_id,
        beauty,
        happy,
        dwell,
    })
}

/// A rating that belongs to a surviving image, with per-dimension outlier flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanedRating {
    pub image_id: String,
    pub rater_id: String,
    pub beauty: u8,
    pub happy: u8,
    pub beauty_kept: bool,
    pub happy_kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image_id: String,
    pub beauty: f64,
    pub happy: f64,
    pub n_beauty: usize,
    pub n_happy: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CleanResult {
    pub clean: Vec<CleanedRating>,
    pub labels: Vec<LabeledImage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningParams {
    pub sigma_k: f64,
    pub min_valid: usize,
}

impl Default for CleaningParams {
    fn default() -> Self {
        Self {
            sigma_k: 2.0,
            min_valid: 5,
        }
    }
}

/// Marks values farther than `sigma_k` population standard deviations from
/// their mean. Single pass: statistics are not recomputed after removal.
fn inlier_mask(values: &[f64], sigma_k: f64) -> Vec<bool> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let limit = sigma_k * var.sqrt();
    values.iter().map(|v| (v - mean).abs() <= limit).collect()
}

fn masked_mean(values: &[f64], mask: &[bool]) -> (f64, usize) {
    let (sum, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    (if n > 0 { sum / n as f64 } else { f64::NAN }, n)
}

pub fn clean_ratings(ratings: &[RatingRecord], params: &CleaningParams) -> Result<CleanResult> {
    if !(params.sigma_k > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_k must be > 0, got {}", params.sigma_k)));
    }
    if params.min_valid < 1 {
        return Err(Error::InvalidParameter("min_valid must be >= 1".into()));
    }
    let mut by_image: BTreeMap<&str, Vec<&RatingRecord>> = BTreeMap::new();
    for r in ratings {
        by_image.entry(r.image_id.as_str()).or_default().push(r);
    }

    let mut out = CleanResult::default();
    for (image_id, group) in by_image {
        let beauty: Vec<f64> = group.iter().map(|r| f64::from(r.beauty)).collect();
        let happy: Vec<f64> = group.iter().map(|r| f64::from(r.happy)).collect();
        let beauty_mask = inlier_mask(&beauty, params.sigma_k);
        let happy_mask = inlier_mask(&happy, params.sigma_k);
        let (t_beauty, n_beauty) = masked_mean(&beauty, &beauty_mask);
        let (t_happy, n_happy) = masked_mean(&happy, &happy_mask);
        if n_beauty < params.min_valid || n_happy < params.min_valid {
            continue;
        }
        out.labels.push(LabeledImage {
            image_id: image_id.to_string(),
            beauty: t_beauty,
            happy: t_happy,
            n_beauty,
            n_happy,
        });
        for ((r, &bk), &hk) in group.iter().zip(&beauty_mask).zip(&happy_mask) {
            out.clean.push(CleanedRating {
                image_id: r.image_id.clone(),
                rater_id: r.rater_id.clone(),
                beauty: r.beauty,
                happy: r.happy,
                beauty_kept: bk,
                happy_kept: hk,
            });
        }
    }
    Ok(out)
}

/// Reads per-image scores. Accepts the label format written by this crate;
/// the count columns are optional.
pub fn read_labels(path: &Path) -> Result<Vec<LabeledImage>> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        beauty: f64,
        happy: f64,
        #[serde(default)]
        n_beauty: usize,
        #[serde(default)]
        n_happy: usize,
    }
    let rows: Vec<Row> = crate::io::read_csv(path)?;
    let mut labels = Vec::with_capacity(rows.len());
    for r in rows {
        for (name, v) in [("beauty", r.beauty), ("happy", r.happy)] {
            if !(1.0..=7.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{}: {name} score {v} outside [1, 7]",
                    r.image_id
                )));
            }
        }
        labels.push(LabeledImage {
            image_id: r.image_id,
            beauty: r.beauty,
            happy: r.happy,
            n_beauty: r.n_beauty,
            n_happy: r.n_happy,
        });
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[LabeledImage]) -> Result<()> {
    crate::io::write_csv(path, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `counts.len() + 1` bin edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ScoreHistogram {
    pub fn over_scale(values: impl Iterator<Item = f64>, bins: usize) -> Self {
        let lo = f64::from(SCORE_MIN);
        let width = MAX_SCORE_GAP / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFraction {
    pub bound: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n: usize,
    pub mean_beauty: f64,
    pub mean_happy: f64,
    pub beauty_histogram: ScoreHistogram,
    pub happy_histogram: ScoreHistogram,
    /// `None` when fewer than two labels or a score vector is constant.
    pub pearson: Option<f64>,
    pub gap_fractions: Vec<GapFraction>,
}

/// Bounds of the beauty–happiness gap table.
pub const GAP_BOUNDS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const HISTOGRAM_BINS: usize = 24;

/// Fraction of labels whose beauty–happiness gap is strictly below `bound`.
/// Every gap lies in `[0, 6]`, so bounds of 6 or more cover all labels.
pub fn gap_fraction(labels: &[LabeledImage], bound: f64) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .filter(|l| bound >= MAX_SCORE_GAP || (l.beauty - l.happy).abs() < bound)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn score_statistics(labels: &[LabeledImage]) -> Result<StatsReport> {
    if labels.is_empty() {
        return Err(Error::InvalidParameter("score statistics need at least one label".into()));
    }
    let beauty: Vec<f64> = labels.iter().map(|l| l.beauty).collect();
    let happy: Vec<f64> = labels.iter().map(|l| l.happy).collect();
    let n = labels.len();
    Ok(StatsReport {
        n,
        mean_beauty: beauty.iter().sum::<f64>() / n as f64,
        mean_happy: happy.iter().sum::<f64>() / n as f64,
        beauty_histogram: ScoreHistogram::over_scale(beauty.iter().copied(), HISTOGRAM_BINS),
        happy_histogram: ScoreHistogram::over_scale(happy.iter().copied(), HISTOGRAM_BINS),
        pearson: pearson(&beauty, &happy),
        gap_fractions: GAP_BOUNDS
            .iter()
            .map(|&bound| GapFraction {
                bound,
                fraction: gap_fraction(labels, bound),
            })
            .collect(),
    })
}

impl StatsReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("images: {}\n", self.n));
        s.push_str(&format!(
            "mean beauty: {:.4}  mean happy: {:.4}\n",
            self.mean_beauty, self.mean_happy
        ));
        match self.pearson {
            Some(r) => s.push_str(&format!("pearson(beauty, happy): {r:.4}\n")),
            None => s.push_str("pearson(beauty, happy): undefined\n"),
        }
        s.push_str("\nBeauty-happiness difference distribution\n");
        let header: Vec<String> = self.gap_fractions.iter().map(|g| format!("<{}", g.bound)).collect();
        let cells: Vec<String> = self
            .gap_fractions
            .iter()
            .map(|g| format!("{:.2}%", 100.0 * g.fraction))
            .collect();
        s.push_str(&format!("{:<16}{}\n", "Diff. interval", pad_cells(&header)));
        s.push_str(&format!("{:<16}{}\n", "No. of images", pad_cells(&cells)));
        s.push_str("\nScore distributions (bin start: beauty / happy)\n");
        for (i, edge) in self.beauty_histogram.edges.iter().take(self.beauty_histogram.counts.len()).enumerate() {
            s.push_str(&format!(
                "{edge:>5.2}: {:>7} / {:>7}\n",
                self.beauty_histogram.counts[i], self.happy_histogram.counts[i]
            ));
        }
        s
    }
}

fn pad_cells(cells: &[String]) -> String {
    cells.iter().map(|c| format!("{c:>10}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterProfile {
    pub rater_id: String,
    pub attributes: BTreeMap<String, String>,
}

/// Reads a profile table. Attribute names come from the header, in order.
pub fn read_profiles(path: &Path) -> Result<(Vec<String>, Vec<RaterProfile>)> {
    let ctx = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(text.lines().next().unwrap_or("")))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = csv.headers().map_err(|e| Error::csv(&ctx, e))?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "rater_id")
        .ok_or_else(|| Error::MissingColumn("rater_id".into()))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id_col)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut profiles = Vec::new();
    for row in csv.records() {
        let row = row.map_err(|e| Error::csv(&ctx, e))?;
        let mut attributes = BTreeMap::new();
        for (i, value) in row.iter().enumerate() {
            if i != id_col && !value.is_empty() {
                attributes.insert(headers[i].to_string(), value.to_string());
            }
        }
        profiles.push(RaterProfile {
            rater_id: row.get(id_col).unwrap_or_default().to_string(),
            attributes,
        });
    }
    Ok((names, profiles))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: String,
    pub n_raters: usize,
    pub n_ratings: usize,
    pub mean_beauty: f64,
    pub mean_happy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeBreakdown {
    pub attribute: String,
    pub levels: Vec<LevelStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attributes: Vec<AttributeBreakdown>,
}

/// Mean beauty and happy vote per attribute level. Raters without a profile,
/// or without a value for an attribute, are grouped under [`UNKNOWN_LEVEL`].
/// With no attribute names given, the standard set is used.
pub fn rater_attribute_breakdown(
    ratings: &[RatingRecord],
    attribute_names: &[String],
    profiles: &[RaterProfile],
) -> AttributeReport {
    let names: Vec<String> = if attribute_names.is_empty() {
        STANDARD_ATTRIBUTES.iter().map(|s| s.to_string()).collect()
    } else {
        attribute_names.to_vec()
    };
    let by_rater: HashMap<&str, &RaterProfile> = profiles.iter().map(|p| (p.rater_id.as_str(), p)).collect();

    let attributes = names
        .into_iter()
        .map(|attribute| {
            // level -> (raters, n, sum beauty, sum happy)
            let mut groups: BTreeMap<String, (HashSet<&str>, usize, f64, f64)> = BTreeMap::new();
            for r in ratings {
                let level = by_rater
                    .get(r.rater_id.as_str())
                    .and_then(|p| p.attributes.get(&attribute))
                    .cloned()
                    .unwrap_or_else(|| UNKNOWN_LEVEL.to_string());
                let g = groups.entry(level).or_default();
                g.0.insert(r.rater_id.as_str());
                g.1 += 1;
                g.2 += f64::from(r.beauty);
                g.3 += f64::from(r.happy);
            }
            let levels = groups
                .into_iter()
                .map(|(level, (raters, n, sb, sh))| LevelStats {
                    level,
                    n_raters: raters.len(),
                    n_ratings: n,
                    mean_beauty: sb / n as f64,
                    mean_happy: sh / n as f64,
                })
                .collect();
            AttributeBreakdown { attribute, levels }
        })
        .collect();
    AttributeReport { attributes }
}

impl AttributeReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for a in &self.attributes {
            s.push_str(&format!("{}\n", a.attribute));
            for l in &a.levels {
                s.push_str(&format!(
                    "  {:<20} raters {:>5}  ratings {:>8}  beauty {:.4}  happy {:.4}\n",
                    l.level, l.n_raters, l.n_ratings, l.mean_beauty, l.mean_happy
                ));
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "ref-train")]
    RefTrain,
    #[serde(rename = "ref-test")]
    RefTest,
    #[serde(rename = "input-train")]
    InputTrain,
    #[serde(rename = "input-test")]
    InputTest,
}

impl Role {
    pub fn is_reference(self) -> bool {
        matches!(self, Role::RefTrain | Role::RefTest)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub image_id: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub dimension: Dimension,
    pub ref_lo: f64,
    pub ref_hi: f64,
    pub ref_n: usize,
    pub ref_train: usize,
    pub input_train: usize,
}

impl SplitParams {
    /// Split sizes used for the full beautifulness experiments.
    pub fn full_scale(dimension: Dimension) -> Self {
        let (ref_n, ref_train, input_train) = match dimension {
            Dimension::Beauty => (2218, 1663, 9320),
            Dimension::Happy => (2205, 1654, 9329),
        };
        Self {
            dimension,
            ref_lo: 3.8,
            ref_hi: 4.2,
            ref_n,
            ref_train,
            input_train,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitManifest {
    pub entries: Vec<SplitEntry>,
}

impl SplitManifest {
    pub fn ids(&self, role: Role) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.role == role)
            .map(|e| e.image_id.as_str())
    }

    pub fn count(&self, role: Role) -> usize {
        self.ids(role).count()
    }

    pub fn role_of(&self, image_id: &str) -> Option<Role> {
        self.entries.iter().find(|e| e.image_id == image_id).map(|e| e.role)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_csv(path, &self.entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self {
            entries: crate::io::read_csv(path)?,
        })
    }
}

/// Samples the reference set uniformly from labels whose score lies in
/// `[ref_lo, ref_hi]`, then splits references and remaining inputs into
/// train/test. Entries keep the order of `labels`.
pub fn make_splits(labels: &[LabeledImage], params: &SplitParams, rng: &mut StageRng) -> Result<SplitManifest> {
    if !(params.ref_lo < params.ref_hi) {
        return Err(Error::InvalidParameter(format!(
            "ref_lo ({}) must be below ref_hi ({})",
            params.ref_lo, params.ref_hi
        )));
    }
    if params.ref_train > params.ref_n {
        return Err(Error::InvalidParameter(format!(
            "ref_train ({}) exceeds ref_n ({})",
            params.ref_train, params.ref_n
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = labels.iter().find(|l| !seen.insert(l.image_id.as_str())) {
        return Err(Error::DuplicateId(dup.image_id.clone()));
    }

    let mut eligible: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| (params.ref_lo..=params.ref_hi).contains(&params.dimension.score(l)))
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < params.ref_n {
        return Err(Error::InsufficientImages {
            needed: params.ref_n,
            found: eligible.len(),
        });
    }
    eligible.shuffle(rng);

    let mut roles: Vec<Option<Role>> = vec![None; labels.len()];
    for (k, &i) in eligible.iter().take(params.ref_n).enumerate() {
        roles[i] = Some(if k < params.ref_train { Role::RefTrain } else { Role::RefTest });
    }
    let mut inputs: Vec<usize> = (0..labels.len()).filter(|&i| roles[i].is_none()).collect();
    if inputs.len() < params.input_train {
        return Err(Error::InsufficientImages {
            needed: params.input_train,
            found: inputs.len(),
        });
    }
    inputs.shuffle(rng);
    for (k, &i) in inputs.iter().enumerate() {
        roles[i] = Some(if k < params.input_train { Role::InputTrain } else { Role::InputTest });
    }

    Ok(SplitManifest {
        entries: labels
            .iter()
            .zip(roles)
            .map(|(l, role)| SplitEntry {
                image_id: l.image_id.clone(),
                role: role.expect("every label receives a role"),
            })
            .collect(),
    })
}
