//! On-disk formats: dataset manifest, binary PGM frames and model checkpoints.
//!
//! A dataset root looks like
//!
//! ```text
//! <root>/manifest.json
//! <root>/frames/<study>/<view>/<index:04>.pgm
//! <root>/truth.json          (synthetic data only, never read by training)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default acquisition rate of a cine view.
pub const DEFAULT_FPS: u32 = 15;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "domvote-manifest";
pub const MANIFEST_VERSION: u32 = 1;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DVCKPT\r\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("missing frame {0}")]
    MissingFrame(PathBuf),
    #[error("duplicate study_id {0:?}")]
    DuplicateStudy(String),
    #[error("frame dimension mismatch in view {view}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        view: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid view {view}: {reason}")]
    InvalidView { view: String, reason: String },
    #[error("invalid study {study}: {reason}")]
    InvalidStudy { study: String, reason: String },
    #[error("unknown dominance label {0:?} (expected \"left\" or \"right\")")]
    UnknownDominance(String),
    #[error("unknown artery {0:?} (expected \"RCA\" or \"LCA\")")]
    UnknownArtery(String),
    #[error("unsupported PGM variant {0:?}")]
    UnsupportedPgm(String),
    #[error("malformed PGM header: {0}")]
    PgmHeader(String),
    #[error("unsupported PGM maxval {0} (only 255)")]
    PgmMaxval(u32),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    PgmTruncated { expected: usize, found: usize },
    #[error("bad checkpoint magic")]
    CheckpointMagic,
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("malformed checkpoint header: {0}")]
    CheckpointHeader(String),
    #[error("weight count mismatch: header declares {declared}, layer shapes imply {implied}")]
    WeightCountMismatch { declared: usize, implied: usize },
    #[error("truncated weights: expected {expected} floats, found {found}")]
    TruncatedWeights { expected: usize, found: usize },
    #[error("trailing bytes after checkpoint payload ({0})")]
    TrailingBytes(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Coronary dominance label. Class index 0 is Left, index 1 is Right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dominance {
    Left,
    Right,
}

impl Dominance {
    pub const ALL: [Dominance; 2] = [Dominance::Left, Dominance::Right];

    pub fn index(self) -> usize {
        match self {
            Dominance::Left => 0,
            Dominance::Right => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(Dominance::Left),
            1 => Some(Dominance::Right),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Dominance::Left => Dominance::Right,
            Dominance::Right => Dominance::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dominance::Left => "left",
            Dominance::Right => "right",
        }
    }
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dominance {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(Dominance::Left),
            "right" => Ok(Dominance::Right),
            other => Err(DataError::UnknownDominance(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Artery {
    #[serde(rename = "RCA")]
    Rca,
    #[serde(rename = "LCA")]
    Lca,
}

impl FromStr for Artery {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "RCA" => Ok(Artery::Rca),
            "LCA" => Ok(Artery::Lca),
            other => Err(DataError::UnknownArtery(other.to_string())),
        }
    }
}

/// Grayscale image, row-major, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::InvalidFrame("zero dimension".into()));
        }
        if pixels.len() != width * height {
            return Err(DataError::InvalidFrame(format!(
                "{} pixels for {}x{} frame",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Frame {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

/// One cine acquisition of an artery: temporally ordered frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CineView {
    pub view_id: String,
    pub artery: Artery,
    pub fps: u32,
    pub frames: Vec<Frame>,
    /// Per-frame informativeness, only known for synthetic data.
    pub informative_truth: Option<Vec<bool>>,
}

impl CineView {
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: String| DataError::InvalidView {
            view: self.view_id.clone(),
            reason,
        };
        let first = self
            .frames
            .first()
            .ok_or_else(|| invalid("no frames".into()))?;
        for frame in &self.frames[1..] {
            if frame.dims() != first.dims() {
                return Err(DataError::DimensionMismatch {
                    view: self.view_id.clone(),
                    expected: first.dims(),
                    found: frame.dims(),
                });
            }
        }
        if let Some(truth) = &self.informative_truth {
            if truth.len() != self.frames.len() {
                return Err(invalid(format!(
                    "{} truth entries for {} frames",
                    truth.len(),
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(Frame::dims)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub dominance: Dominance,
    pub views: Vec<CineView>,
}

impl Study {
    pub fn rca_views(&self) -> impl Iterator<Item = &CineView> {
        self.views.iter().filter(|v| v.artery == Artery::Rca)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.rca_views().next().is_none() {
            return Err(DataError::InvalidStudy {
                study: self.study_id.clone(),
                reason: "no RCA view".into(),
            });
        }
        self.views.iter().try_for_each(CineView::validate)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub studies: Vec<Study>,
}

impl Dataset {
    pub fn new(studies: Vec<Study>) -> Result<Self, DataError> {
        let dataset = Dataset { studies };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for study in &self.studies {
            if !seen.insert(study.study_id.as_str()) {
                return Err(DataError::DuplicateStudy(study.study_id.clone()));
            }
            study.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn count(&self, dominance: Dominance) -> usize {
        self.studies
            .iter()
            .filter(|s| s.dominance == dominance)
            .count()
    }

    pub fn study(&self, study_id: &str) -> Option<&Study> {
        self.studies.iter().find(|s| s.study_id == study_id)
    }

    /// Keeps the studies accepted by `keep`, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(&Study) -> bool) -> Dataset {
        Dataset {
            studies: self.studies.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format: String,
    version: u32,
    studies: Vec<ManifestStudy>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestStudy {
    study_id: String,
    dominance: String,
    views: Vec<ManifestView>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestView {
    view_id: String,
    artery: String,
    #[serde(default = "default_fps")]
    fps: u32,
    frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    informative: Option<Vec<bool>>,
}

fn default_fps() -> u32 {
    DEFAULT_FPS
}

/// Relative path of a frame inside a dataset root.
pub fn frame_rel_path(study_id: &str, view_id: &str, index: usize) -> String {
    format!("frames/{study_id}/{view_id}/{index:04}.pgm")
}

/// Loads a dataset from its manifest. Frame paths are resolved relative to the
/// manifest's directory. Either the whole dataset loads or an error is returned.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: ManifestFile =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(DataError::Manifest {
            path: path.to_path_buf(),
            reason: format!(
                "unsupported format {:?} version {}",
                manifest.format, manifest.version
            ),
        });
    }
    let root = path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::new();
    let mut studies = Vec::with_capacity(manifest.studies.len());
    for ms in manifest.studies {
        if !seen.insert(ms.study_id.clone()) {
            return Err(DataError::DuplicateStudy(ms.study_id));
        }
        let dominance: Dominance = ms.dominance.parse()?;
        let mut views = Vec::with_capacity(ms.views.len());
        for mv in ms.views {
            let artery: Artery = mv.artery.parse()?;
            let mut frames = Vec::with_capacity(mv.frames.len());
            for rel in &mv.frames {
                let frame_path = root.join(rel);
                if !frame_path.is_file() {
                    return Err(DataError::MissingFrame(frame_path));
                }
                frames.push(read_pgm(&frame_path)?);
            }
            let view = CineView {
                view_id: mv.view_id,
                artery,
                fps: mv.fps,
                frames,
                informative_truth: mv.informative,
            };
            view.validate()?;
            views.push(view);
        }
        let study = Study {
            study_id: ms.study_id,
            dominance,
            views,
        };
        study.validate()?;
        studies.push(study);
    }
    Ok(Dataset { studies })
}

/// Writes `manifest.json` plus every frame under `root`.
pub fn save_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    let root = root.as_ref();
    dataset.validate()?;
    let mut studies = Vec::with_capacity(dataset.studies.len());
    for study in &dataset.studies {
        let mut views = Vec::with_capacity(study.views.len());
        for view in &study.views {
            let dir = root.join("frames").join(&study.study_id).join(&view.view_id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut frames = Vec::with_capacity(view.frames.len());
            for (i, frame) in view.frames.iter().enumerate() {
                let rel = frame_rel_path(&study.study_id, &view.view_id, i);
                write_pgm(frame, root.join(&rel))?;
                frames.push(rel);
            }
            views.push(ManifestView {
                view_id: view.view_id.clone(),
                artery: match view.artery {
                    Artery::Rca => "RCA".into(),
                    Artery::Lca => "LCA".into(),
                },
                fps: view.fps,
                frames,
                informative: view.informative_truth.clone(),
            });
        }
        studies.push(ManifestStudy {
            study_id: study.study_id.clone(),
            dominance: study.dominance.as_str().into(),
            views,
        });
    }
    let manifest = ManifestFile {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        studies,
    };
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// PGM

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Frame, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(DataError::UnsupportedPgm(magic));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(DataError::PgmHeader("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::PgmHeader("expected a decimal number".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::PgmHeader("number out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::PgmHeader("missing raster separator".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::PgmMaxval(maxval));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(DataError::PgmTruncated {
            expected,
            found: payload.len(),
        });
    }
    Frame::new(width, height, payload[..expected].to_vec())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Frame, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(frame: &Frame, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(frame)).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Checkpoint
//
// magic[8] | version u32 | n_layers u32 | per layer: ndims u32, dims u32 * ndims
//          | weight_count u64 | weights f32 * weight_count        (all little-endian)

/// Flat parameter container with named layer shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layer_shapes: Vec<Vec<usize>>,
    pub weights: Vec<f32>,
}

impl Checkpoint {
    pub fn implied_count(shapes: &[Vec<usize>]) -> usize {
        shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.weights.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_shapes.len() as u32).to_le_bytes());
        for shape in &self.layer_shapes {
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(DataError::CheckpointMagic);
        }
        let version = reader.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DataError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let n_layers = reader.u32()? as usize;
        let mut layer_shapes = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let ndims = reader.u32()? as usize;
            let mut shape = Vec::with_capacity(ndims.min(16));
            for _ in 0..ndims {
                shape.push(reader.u32()? as usize);
            }
            layer_shapes.push(shape);
        }
        let declared = reader.u64()? as usize;
        let implied = Self::implied_count(&layer_shapes);
        if declared != implied {
            return Err(DataError::WeightCountMismatch { declared, implied });
        }
        let rest = &bytes[reader.pos..];
        let found = rest.len() / 4;
        if found < declared {
            return Err(DataError::TruncatedWeights {
                expected: declared,
                found,
            });
        }
        if rest.len() != declared * 4 {
            return Err(DataError::TrailingBytes(rest.len() - declared * 4));
        }
        let weights = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint {
            layer_shapes,
            weights,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| DataError::CheckpointHeader("unexpected end of header".into()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        let b = self.take(8)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(b);
        Ok(u64::from_le_bytes(arr))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&checkpoint.to_bytes()).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(id: &str, frames: Vec<Frame>) -> CineView {
        CineView {
            view_id: id.into(),
            artery: Artery::Rca,
            fps: DEFAULT_FPS,
            frames,
            informative_truth: None,
        }
    }

    fn study(id: &str, dominance: Dominance) -> Study {
        let frames = (0..3u8).map(|i| Frame::filled(4, 3, i * 10)).collect();
        Study {
            study_id: id.into(),
            dominance,
            views: vec![view("v0", frames)],
        }
    }

    #[test]
    fn pgm_zero_frame_layout() {
        let frame = Frame::filled(64, 64, 0);
        let bytes = encode_pgm(&frame);
        let header = b"P5\n64 64\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 4096);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(decode_pgm(&bytes).unwrap(), frame);
    }

    #[test]
    fn pgm_single_bright_pixel() {
        let mut frame = Frame::filled(5, 4, 0);
        frame.set_pixel(0, 0, 255);
        let back = decode_pgm(&encode_pgm(&frame)).unwrap();
        assert_eq!(back.pixel(0, 0), 255);
        assert_eq!(back, frame);
    }

    #[test]
    fn pgm_rejects_ascii_variant() {
        let err = decode_pgm(b"P2\n2 1\n255\n0 0\n").unwrap_err();
        assert!(err.to_string().contains("unsupported PGM variant"));
    }

    #[test]
    fn pgm_rejects_maxval_and_truncation() {
        assert!(matches!(
            decode_pgm(b"P5\n2 1\n65535\n\0\0\0\0"),
            Err(DataError::PgmMaxval(65535))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\0\0\0"),
            Err(DataError::PgmTruncated {
                expected: 4,
                found: 3
            })
        ));
    }

    #[test]
    fn frame_invariants() {
        assert!(Frame::new(2, 2, vec![0; 3]).is_err());
        assert!(Frame::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn view_rejects_mixed_dimensions() {
        let v = view("v", vec![Frame::filled(4, 4, 0), Frame::filled(4, 5, 0)]);
        assert!(matches!(
            v.validate(),
            Err(DataError::DimensionMismatch { .. })
        ));
        assert!(view("e", vec![]).validate().is_err());
    }

    #[test]
    fn manifest_round_trip_preserves_labels_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset::new(vec![
            study("a", Dominance::Left),
            study("b", Dominance::Right),
        ])
        .unwrap();
        let path = save_dataset(&dataset, dir.path()).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, dataset);
        assert_eq!(loaded.studies[0].dominance, Dominance::Left);
        assert_eq!(loaded.studies[1].dominance, Dominance::Right);
    }

    #[test]
    fn manifest_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset::new(vec![study("a", Dominance::Left)]).unwrap();
        let path = save_dataset(&dataset, dir.path()).unwrap();
        fs::remove_file(dir.path().join(frame_rel_path("a", "v0", 1))).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("missing frame"), "{err}");
    }

    #[test]
    fn manifest_duplicate_study() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset::new(vec![study("a", Dominance::Left)]).unwrap();
        let path = save_dataset(&dataset, dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let dup = value["studies"][0].clone();
        value["studies"].as_array_mut().unwrap().push(dup);
        fs::write(&path, value.to_string()).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate study_id"), "{err}");
        assert!(Dataset::new(vec![study("x", Dominance::Left), study("x", Dominance::Right)]).is_err());
    }

    #[test]
    fn manifest_unknown_label_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset::new(vec![study("a", Dominance::Left)]).unwrap();
        let path = save_dataset(&dataset, dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"left\"", "\"Left\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(DataError::UnknownDominance(_))
        ));
    }

    #[test]
    fn manifest_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset::new(vec![study("a", Dominance::Right)]).unwrap();
        let path = save_dataset(&dataset, dir.path()).unwrap();
        write_pgm(
            &Frame::filled(5, 3, 0),
            dir.path().join(frame_rel_path("a", "v0", 2)),
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(DataError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_errors() {
        let ckpt = Checkpoint {
            layer_shapes: vec![vec![2, 5]],
            weights: (0..10).map(|i| i as f32).collect(),
        };
        let bytes = ckpt.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(DataError::CheckpointMagic)
        ));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(DataError::CheckpointVersion { found: 9, .. })
        ));

        let short = &bytes[..bytes.len() - 4];
        let err = Checkpoint::from_bytes(short).unwrap_err();
        assert!(err.to_string().contains("truncated weights"), "{err}");

        let mut wrong = bytes.clone();
        // weight_count field follows magic, version, n_layers, ndims, 2 dims
        let at = 8 + 4 + 4 + 4 + 8;
        wrong[at..at + 8].copy_from_slice(&11u64.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&wrong),
            Err(DataError::WeightCountMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn pgm_round_trip(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
            let pixels = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let frame = Frame::new(w, h, pixels).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&frame)).unwrap(), frame);
        }

        #[test]
        fn checkpoint_round_trip(
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 1..4), 0..5),
            seed in any::<u32>(),
        ) {
            let n = Checkpoint::implied_count(&shapes);
            let weights: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff))
                .collect();
            let ckpt = Checkpoint { layer_shapes: shapes, weights };
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            prop_assert_eq!(back.layer_shapes, ckpt.layer_shapes);
            let same = back.weights.iter().zip(&ckpt.weights).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
