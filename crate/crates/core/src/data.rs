//! Datasets, patient-disjoint splits, augmentation, keyword labels and the
//! synthetic edema phantom.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const NUM_CLASSES: u8 = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{path}, line {line}: {msg}")]
    Row { path: PathBuf, line: u64, msg: String },
    #[error("no image file for id {id:?} in {dir}")]
    MissingImage { id: String, dir: PathBuf },
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("image {id:?}: {msg}")]
    InvalidImage { id: String, msg: String },
    #[error("{patients} distinct labeled patients cannot fill {splits} splits")]
    TooFewPatients { patients: usize, splits: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("crop {crop} exceeds image side {side}")]
    InvalidCrop { crop: usize, side: usize },
    #[error("ruleset line {line}: {msg}")]
    Ruleset { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("split manifest violates {0}")]
    SplitInvariant(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One grayscale image with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    /// Row-major `side × side` pixels in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub side: usize,
    pub severity: Option<u8>,
    pub report_text: Option<String>,
    pub chf_cohort: bool,
}

impl ImageRecord {
    pub fn is_labeled(&self) -> bool {
        self.severity.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| DataError::InvalidImage {
            id: self.image_id.clone(),
            msg,
        };
        if self.pixels.len() != self.side * self.side {
            return Err(bad(format!("{} pixels for side {}", self.pixels.len(), self.side)));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(bad(format!("pixel {p} outside [0, 1]")));
        }
        if let Some(s) = self.severity.filter(|s| *s >= NUM_CLASSES) {
            return Err(bad(format!("severity {s} outside 0..=3")));
        }
        Ok(())
    }
}

/// Immutable collection of equally sized images, addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if r.side != records[0].side {
                return Err(DataError::InvalidImage {
                    id: r.image_id.clone(),
                    msg: format!("side {} differs from {}", r.side, records[0].side),
                });
            }
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(DataError::DuplicateImage(r.image_id.clone()));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.records.iter().filter(|r| r.is_labeled()).count()
    }

    /// Side length shared by all images (`None` when empty).
    pub fn side(&self) -> Option<usize> {
        self.records.first().map(|r| r.side)
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<&ImageRecord>> {
        ids.iter()
            .map(|id| self.get(id.as_ref()).ok_or_else(|| DataError::UnknownImage(id.as_ref().to_string())))
            .collect()
    }
}

// ---------------------------------------------------------------- files

/// Min-max normalization; a constant image maps to all zeros.
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Reads an 8- or 16-bit grayscale PNG or PGM as normalized pixels and its side.
pub fn read_image(path: &Path) -> Result<(Vec<f64>, usize)> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if img.color().channel_count() != 1 {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            msg: format!("expected grayscale, got {:?}", img.color()),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            msg: format!("expected a square image, got {w}x{h}"),
        });
    }
    let raw: Vec<f64> = img.into_luma16().into_raw().into_iter().map(f64::from).collect();
    Ok((normalize_min_max(&raw), w))
}

/// Writes pixels in `[0, 1]` as a 16-bit grayscale PNG.
pub fn write_png16(path: &Path, pixels: &[f64], side: usize) -> Result<()> {
    let raw: Vec<u16> = pixels.iter().map(|p| quantize16(*p)).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(side as u32, side as u32, raw).ok_or_else(|| {
        DataError::Image {
            path: path.to_path_buf(),
            msg: format!("{} pixels for side {side}", pixels.len()),
        }
    })?;
    buf.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn quantize16(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| DataError::MissingImage {
            id: id.to_string(),
            dir: dir.to_path_buf(),
        })
}

/// One row of a labels CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub image_id: String,
    pub patient_id: String,
    pub severity: Option<u8>,
    pub report_text: Option<String>,
    pub chf_cohort: bool,
}

fn parse_severity(s: &str) -> std::result::Result<Option<u8>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<u8>() {
        Ok(v) if v < NUM_CLASSES => Ok(Some(v)),
        _ => Err(format!("severity {s:?} is not one of 0, 1, 2, 3")),
    }
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "" | "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(format!("cohort flag {other:?} is not 0/1")),
    }
}

/// Reads `image_id,patient_id,severity[,report_text][,chf_cohort]`.
pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_rows(path, file, true)
}

/// Reads `image_id,patient_id,report_text[,chf_cohort]` report corpora.
pub fn read_reports_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_rows(path, file, false)
}

fn read_rows<R: std::io::Read>(path: &Path, input: R, need_severity: bool) -> Result<Vec<LabelRow>> {
    let row_err = |line: u64, msg: String| DataError::Row {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(input);
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = if need_severity {
        vec!["image_id", "patient_id", "severity"]
    } else {
        vec!["image_id", "patient_id", "report_text"]
    };
    for name in &required {
        if col(name).is_none() {
            return Err(row_err(1, format!("missing column {name:?}")));
        }
    }
    let (c_id, c_pat) = (col("image_id").unwrap(), col("patient_id").unwrap());
    let (c_sev, c_text, c_cohort) = (col("severity"), col("report_text"), col("chf_cohort"));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("");
        let image_id = field(Some(c_id)).trim().to_string();
        let patient_id = field(Some(c_pat)).trim().to_string();
        if image_id.is_empty() || patient_id.is_empty() {
            return Err(row_err(line, "empty image_id or patient_id".into()));
        }
        let severity = parse_severity(field(c_sev)).map_err(|m| row_err(line, m))?;
        let text = field(c_text);
        rows.push(LabelRow {
            image_id,
            patient_id,
            severity,
            report_text: (!text.is_empty()).then(|| text.to_string()),
            chf_cohort: parse_flag(field(c_cohort)).map_err(|m| row_err(line, m))?,
        });
    }
    Ok(rows)
}

pub fn write_labels_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["image_id", "patient_id", "severity", "report_text"])
        .map_err(|e| csv_io(path, e))?;
    for r in rows {
        let sev = r.severity.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([&r.image_id, &r.patient_id, &sev, r.report_text.as_deref().unwrap_or("")])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_io(path: &Path, e: csv::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Loads every row of `labels_csv` with its image from `images_dir`.
pub fn load_manifest(images_dir: &Path, labels_csv: &Path) -> Result<Dataset> {
    let rows = read_labels_csv(labels_csv)?;
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let path = find_image(images_dir, &row.image_id)?;
        let (pixels, side) = read_image(&path)?;
        records.push(ImageRecord {
            image_id: row.image_id,
            patient_id: row.patient_id,
            pixels,
            side,
            severity: row.severity,
            report_text: row.report_text,
            chf_cohort: row.chf_cohort,
        });
    }
    Dataset::new(records)
}

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
    /// Unlabeled image of a validation or test patient; never used.
    Excluded,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Excluded => "excluded",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "excluded" => Ok(Split::Excluded),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub image_id: String,
    pub patient_id: String,
    pub split: Split,
    pub labeled: bool,
}

/// Assignment of every image to a split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    entries: Vec<SplitEntry>,
}

impl SplitManifest {
    pub fn new(entries: Vec<SplitEntry>) -> Result<Self> {
        let m = Self { entries };
        m.check()?;
        Ok(m)
    }

    pub fn entries(&self) -> &[SplitEntry] {
        &self.entries
    }

    pub fn ids(&self, split: Split, labeled: Option<bool>) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split && labeled.map_or(true, |l| e.labeled == l))
            .map(|e| e.image_id.as_str())
            .collect()
    }

    pub fn train_labeled(&self) -> Vec<&str> {
        self.ids(Split::Train, Some(true))
    }

    pub fn train_unlabeled(&self) -> Vec<&str> {
        self.ids(Split::Train, Some(false))
    }

    pub fn validation(&self) -> Vec<&str> {
        self.ids(Split::Validation, Some(true))
    }

    pub fn test(&self) -> Vec<&str> {
        self.ids(Split::Test, Some(true))
    }

    /// Checks patient disjointness, that validation/test hold labeled images
    /// only, and that only unlabeled images of held-out patients are excluded.
    pub fn check(&self) -> Result<()> {
        let mut seen = HashMap::new();
        let mut patient_split: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            if seen.insert(e.image_id.as_str(), ()).is_some() {
                return Err(DataError::DuplicateImage(e.image_id.clone()));
            }
            let home = match e.split {
                Split::Excluded if e.labeled => {
                    return Err(DataError::SplitInvariant(format!("labeled image {} excluded", e.image_id)));
                }
                Split::Validation | Split::Test if !e.labeled => {
                    return Err(DataError::SplitInvariant(format!(
                        "unlabeled image {} assigned to {}",
                        e.image_id, e.split
                    )));
                }
                Split::Excluded => None,
                s => Some(s),
            };
            if let Some(s) = home {
                if let Some(prev) = patient_split.insert(&e.patient_id, s) {
                    if prev != s {
                        return Err(DataError::SplitInvariant(format!(
                            "patient {} in both {prev} and {s}",
                            e.patient_id
                        )));
                    }
                }
            }
        }
        for e in self.entries.iter().filter(|e| e.split == Split::Excluded) {
            if patient_split.get(e.patient_id.as_str()) == Some(&Split::Train) {
                return Err(DataError::SplitInvariant(format!(
                    "image {} of training patient {} excluded",
                    e.image_id, e.patient_id
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["image_id", "patient_id", "split", "labeled"])
            .map_err(|e| csv_io(path, e))?;
        for e in &self.entries {
            w.write_record([e.image_id.as_str(), &e.patient_id, e.split.name(), if e.labeled { "1" } else { "0" }])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| DataError::Row {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| DataError::Row {
                path: path.to_path_buf(),
                line,
                msg,
            };
            if rec.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", rec.len())));
            }
            entries.push(SplitEntry {
                image_id: rec[0].to_string(),
                patient_id: rec[1].to_string(),
                split: rec[2].parse().map_err(bad)?,
                labeled: parse_flag(&rec[3]).map_err(|m| DataError::Row {
                    path: path.to_path_buf(),
                    line,
                    msg: m,
                })?,
            });
        }
        Self::new(entries)
    }
}

/// Splits labeled images by patient near `fractions` of labeled images.
///
/// Patients with no labeled image train as unlabeled data; unlabeled images of
/// validation/test patients are excluded.
pub fn split_by_patient(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(fractions));
    }
    let mut labeled_count: BTreeMap<&str, usize> = BTreeMap::new();
    for r in dataset.records() {
        let c = labeled_count.entry(&r.patient_id).or_default();
        *c += usize::from(r.is_labeled());
    }
    let mut patients: Vec<(&str, usize)> = labeled_count.into_iter().filter(|(_, c)| *c > 0).collect();
    let splits = [Split::Train, Split::Validation, Split::Test];
    if patients.len() < splits.len() {
        return Err(DataError::TooFewPatients {
            patients: patients.len(),
            splits: splits.len(),
        });
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: usize = patients.iter().map(|(_, c)| c).sum();
    let target: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut filled = [0usize; 3];
    let mut home: HashMap<&str, Split> = HashMap::new();
    for (i, (pid, count)) in patients.iter().enumerate() {
        let k = if i < splits.len() {
            i
        } else {
            (0..splits.len())
                .max_by(|&a, &b| {
                    let da = target[a] - filled[a] as f64;
                    let db = target[b] - filled[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap()
        };
        filled[k] += count;
        home.insert(pid, splits[k]);
    }
    let entries = dataset
        .records()
        .iter()
        .map(|r| {
            let split = match home.get(r.patient_id.as_str()) {
                None => Split::Train,
                Some(Split::Train) => Split::Train,
                Some(s) if r.is_labeled() => *s,
                Some(_) => Split::Excluded,
            };
            SplitEntry {
                image_id: r.image_id.clone(),
                patient_id: r.patient_id.clone(),
                split,
                labeled: r.is_labeled(),
            }
        })
        .collect();
    SplitManifest::new(entries)
}

// ---------------------------------------------------------------- augmentation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    pub crop_size: usize,
}

impl AugmentParams {
    pub fn identity(crop_size: usize) -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_translation_px: 0.0,
            crop_size,
        }
    }
}

/// A rigid transform applied about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub rotation_deg: f64,
    pub dx: f64,
    pub dy: f64,
}

fn bilinear(img: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |r: f64, c: f64| {
        if r < 0.0 || c < 0.0 || r >= side as f64 || c >= side as f64 {
            0.0
        } else {
            img[r as usize * side + c as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates and translates (bilinear, zero fill), then center-crops to `crop`.
pub fn transform_image(img: &[f64], side: usize, t: Transform, crop: usize) -> Result<Vec<f64>> {
    if crop == 0 || crop > side {
        return Err(DataError::InvalidCrop { crop, side });
    }
    if img.len() != side * side {
        return Err(DataError::InvalidConfig(format!("{} pixels for side {side}", img.len())));
    }
    let (s, c) = t.rotation_deg.to_radians().sin_cos();
    let center = (side as f64 - 1.0) / 2.0;
    let out_center = (crop as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(crop * crop);
    for i in 0..crop {
        for j in 0..crop {
            let dy = i as f64 - out_center - t.dy;
            let dx = j as f64 - out_center - t.dx;
            let sy = center + c * dy - s * dx;
            let sx = center + s * dy + c * dx;
            out.push(bilinear(img, side, sy, sx).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Random rotation and translation followed by a center crop.
pub fn augment<R: Rng + ?Sized>(img: &[f64], side: usize, rng: &mut R, params: &AugmentParams) -> Result<Vec<f64>> {
    let mut draw = |max: f64| if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
    let t = Transform {
        rotation_deg: draw(params.max_rotation_deg),
        dx: draw(params.max_translation_px),
        dy: draw(params.max_translation_px),
    };
    transform_image(img, side, t, params.crop_size)
}

/// Deterministic evaluation view: center crop only.
pub fn center_crop(img: &[f64], side: usize, crop: usize) -> Result<Vec<f64>> {
    transform_image(img, side, Transform::default(), crop)
}

// ---------------------------------------------------------------- keyword labels

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordRule {
    pub severity: u8,
    /// Lowercase word tokens matched as a contiguous phrase.
    pub phrase: Vec<String>,
}

/// Ordered keyword rules; the first matching rule decides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordRuleset {
    pub rules: Vec<KeywordRule>,
    /// When set, only records flagged as CHF-cohort members are labeled.
    pub cohort_only: bool,
}

const DEFAULT_RULES: &str = "\
# negations first
0\tno pulmonary edema
0\tno evidence of pulmonary edema
0\tno evidence of edema
0\twithout pulmonary edema
0\tno edema
0\tresolution of pulmonary edema
# severe
3\tsevere pulmonary edema
3\tsevere edema
3\talveolar edema
3\talveolar pulmonary edema
3\tmarked pulmonary edema
# moderate
2\tmoderate pulmonary edema
2\tmoderate edema
2\tinterstitial pulmonary edema
2\tinterstitial edema
# mild
1\tmild pulmonary edema
1\tmild edema
1\tminimal pulmonary edema
1\tpulmonary vascular congestion
1\tvascular congestion
";

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Default for KeywordRuleset {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("built-in ruleset parses")
    }
}

impl KeywordRuleset {
    /// Parses `<severity><TAB><phrase>` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| DataError::Ruleset {
                line: line_no,
                msg: msg.to_string(),
            };
            let (sev, phrase) = line.split_once('\t').ok_or_else(|| bad("expected <severity><TAB><phrase>"))?;
            let severity = match sev.trim().parse::<u8>() {
                Ok(s) if s < NUM_CLASSES => s,
                _ => return Err(bad("severity must be 0, 1, 2 or 3")),
            };
            let phrase = tokenize(phrase);
            if phrase.is_empty() {
                return Err(bad("empty phrase"));
            }
            rules.push(KeywordRule { severity, phrase });
        }
        Ok(Self {
            rules,
            cohort_only: false,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn extract(&self, text: &str) -> Option<u8> {
        let tokens = tokenize(text);
        self.rules
            .iter()
            .find(|r| tokens.windows(r.phrase.len()).any(|w| w == r.phrase.as_slice()))
            .map(|r| r.severity)
    }

    /// Applies the cohort filter before matching.
    pub fn label(&self, text: &str, chf_cohort: bool) -> Option<u8> {
        if self.cohort_only && !chf_cohort {
            return None;
        }
        self.extract(text)
    }
}

pub fn extract_label(report_text: &str, rules: &KeywordRuleset) -> Option<u8> {
    rules.extract(report_text)
}

// ---------------------------------------------------------------- synthetic phantom

/// Generator settings for the synthetic edema benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Lung-field haze added at severity 3.
    pub haze: f64,
    /// Expected number of opacity blobs per unit severity.
    pub blob_rate: f64,
    pub blob_amplitude: f64,
    /// Scale of per-patient anatomical variation.
    pub anatomy_jitter: f64,
    pub max_images_per_patient: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 64,
            n_labeled: 100,
            n_unlabeled: 5000,
            n_validation: 200,
            n_test: 200,
            noise: 0.03,
            haze: 0.6,
            blob_rate: 2.0,
            blob_amplitude: 0.15,
            anatomy_jitter: 1.0,
            max_images_per_patient: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.side < 8 {
            return bad(format!("side must be >= 8, got {}", self.side));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("haze", self.haze),
            ("blob_rate", self.blob_rate),
            ("blob_amplitude", self.blob_amplitude),
            ("anatomy_jitter", self.anatomy_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.max_images_per_patient == 0 {
            return bad("max_images_per_patient must be >= 1".into());
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_labeled + self.n_unlabeled + self.n_validation + self.n_test
    }
}

/// Discrete class of a continuous severity in `[0, 3]`.
pub fn severity_class(s: f64) -> u8 {
    match s {
        s if s < 0.5 => 0,
        s if s < 1.5 => 1,
        s if s < 2.5 => 2,
        _ => 3,
    }
}

/// Anatomy shared by all images of one synthetic patient.
#[derive(Debug, Clone, Copy)]
struct Anatomy {
    body_rx: f64,
    body_ry: f64,
    body_level: f64,
    lung_rx: f64,
    lung_ry: f64,
    lung_gap: f64,
    lung_dy: f64,
    lung_level: f64,
    heart_r: f64,
    heart_level: f64,
}

impl Anatomy {
    fn draw(rng: &mut ChaCha8Rng, jitter: f64) -> Self {
        let mut j = |spread: f64| 1.0 + jitter * spread * rng.gen_range(-1.0..=1.0);
        Self {
            body_rx: 0.85 * j(0.02),
            body_ry: 0.92 * j(0.02),
            body_level: 0.55 * j(0.04),
            lung_rx: 0.27 * j(0.05),
            lung_ry: 0.55 * j(0.05),
            lung_gap: 0.37 * j(0.08),
            lung_dy: -0.05 * j(1.0),
            lung_level: 0.18 * j(0.05),
            heart_r: 0.22 * j(0.06),
            heart_level: 0.75 * j(0.04),
        }
    }
}

/// Smooth inside-indicator of an axis-aligned ellipse.
fn soft_ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64, edge: f64) -> f64 {
    let r = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
    1.0 / (1.0 + ((r - 1.0) / edge).exp())
}

fn render(a: &Anatomy, s: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.side;
    let coord = |k: usize| 2.0 * (k as f64 + 0.5) / n as f64 - 1.0;
    let edge = 0.04;
    let n_blobs = {
        let mean = cfg.blob_rate * s;
        let whole = mean.floor();
        whole as usize + usize::from(rng.gen::<f64>() < mean - whole)
    };
    // Blobs sit inside a lung field, denser toward the bases.
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let cx = side * a.lung_gap + rng.gen_range(-0.6..=0.6) * a.lung_rx;
            let cy = a.lung_dy + rng.gen::<f64>().sqrt() * 0.7 * a.lung_ry;
            let r = rng.gen_range(0.06..=0.14);
            let amp = cfg.blob_amplitude * rng.gen_range(0.6..=1.4);
            (cx, cy, r, amp)
        })
        .collect();
    let mut px = Vec::with_capacity(n * n);
    for i in 0..n {
        let v = coord(i);
        for j in 0..n {
            let u = coord(j);
            let body = soft_ellipse(u, v, 0.0, 0.0, a.body_rx, a.body_ry, edge);
            let lung = soft_ellipse(u, v, -a.lung_gap, a.lung_dy, a.lung_rx, a.lung_ry, edge)
                .max(soft_ellipse(u, v, a.lung_gap, a.lung_dy, a.lung_rx, a.lung_ry, edge));
            let heart = soft_ellipse(u, v, 0.08, 0.35, a.heart_r * 1.2, a.heart_r, edge);
            // Haze grows toward the lung bases; total opacity saturates below
            // the heart so the intensity range stays anatomical.
            let basal = 0.8 + 0.2 * ((v - a.lung_dy) / a.lung_ry).clamp(-1.0, 1.0);
            let mut opacity = cfg.haze * (s / 3.0) * basal;
            for &(cx, cy, r, amp) in &blobs {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                opacity += amp * (-d2 / (2.0 * r * r)).exp();
            }
            let ceiling = a.heart_level - a.lung_level - 0.05;
            let opacity = ceiling * (opacity / ceiling).tanh();
            let mut value = body * a.body_level;
            value += lung * (a.lung_level - a.body_level + opacity);
            value += heart * (1.0 - lung) * (a.heart_level - a.body_level) * body;
            let e: f64 = StandardNormal.sample(rng);
            px.push((value + cfg.noise * e).max(0.0));
        }
    }
    // Stored exactly as a 16-bit file would hold it.
    normalize_min_max(&px)
        .into_iter()
        .map(|p| f64::from(quantize16(p)) / 65535.0)
        .collect()
}

/// One phantom at severity `s`: anatomy drawn from `patient_seed`, blobs and
/// noise from `image_seed`.
pub fn render_phantom(cfg: &SynthConfig, patient_seed: u64, s: f64, image_seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let anatomy = Anatomy::draw(&mut ChaCha8Rng::seed_from_u64(patient_seed), cfg.anatomy_jitter);
    Ok(render(&anatomy, s, cfg, &mut ChaCha8Rng::seed_from_u64(image_seed)))
}

/// Synthetic benchmark: images, the manifest splitting them, and the
/// continuous severity behind every image.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Ground-truth continuous severity, aligned with `dataset.records()`.
    pub severities: Vec<f64>,
    pub manifest: SplitManifest,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = [
        (Split::Train, true, cfg.n_labeled),
        (Split::Train, false, cfg.n_unlabeled),
        (Split::Validation, true, cfg.n_validation),
        (Split::Test, true, cfg.n_test),
    ];
    let mut records = Vec::with_capacity(cfg.total());
    let mut severities = Vec::with_capacity(cfg.total());
    let mut entries = Vec::with_capacity(cfg.total());
    let mut patient = 0usize;
    for (split, labeled, count) in groups {
        let mut left = count;
        while left > 0 {
            let images = rng.gen_range(1..=cfg.max_images_per_patient).min(left);
            let anatomy = Anatomy::draw(&mut rng, cfg.anatomy_jitter);
            let patient_id = format!("p{patient:05}");
            for _ in 0..images {
                let s: f64 = rng.gen_range(0.0..3.0);
                let image_id = format!("img{:06}", records.len());
                let pixels = render(&anatomy, s, cfg, &mut rng);
                entries.push(SplitEntry {
                    image_id: image_id.clone(),
                    patient_id: patient_id.clone(),
                    split,
                    labeled,
                });
                records.push(ImageRecord {
                    image_id,
                    patient_id: patient_id.clone(),
                    pixels,
                    side: cfg.side,
                    severity: labeled.then(|| severity_class(s)),
                    report_text: None,
                    chf_cohort: true,
                });
                severities.push(s);
            }
            left -= images;
            patient += 1;
        }
    }
    Ok(SynthDataset {
        dataset: Dataset::new(records)?,
        severities,
        manifest: SplitManifest::new(entries)?,
    })
}

/// Distinct patient ids per split, for reporting.
pub fn patients_per_split(manifest: &SplitManifest) -> BTreeMap<Split, BTreeSet<&str>> {
    let mut out: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    for e in manifest.entries() {
        out.entry(e.split).or_default().insert(&e.patient_id);
    }
    out
}
