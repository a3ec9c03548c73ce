//! On-disk datasets, splits and augmentation.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest                  JSON, see DatasetManifest
//! clips/<id>/frame_00.pgm   8-bit binary graymap, 20 per clip
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io, json, Error, Result};
use crate::geometry::ApexTrack;
use crate::metrics::{Frame, Origin};
use crate::nn::rng::Rng;
use crate::phantom::{CineClip, PhantomParams, CLIP_LEN, FRAME_SIZE};
use crate::rubric::{AttributeScores, View};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Clip ids per split, with the seed that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn of(&self, id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.ids(s).iter().any(|x| x == id))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Partition of exactly `ids`, with fractions within one clip of
    /// 60:20:20.
    pub fn validate<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let expected: HashSet<&str> = ids.into_iter().collect();
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Dataset(format!("clip {id} appears in two splits")));
            }
            if !expected.contains(id.as_str()) {
                return Err(Error::Dataset(format!("split names unknown clip {id}")));
            }
        }
        if seen.len() != expected.len() {
            return Err(Error::Dataset(format!(
                "split covers {} of {} clips",
                seen.len(),
                expected.len()
            )));
        }
        let n = self.len() as f64;
        for (have, share) in [(self.train.len(), 0.6), (self.val.len(), 0.2), (self.test.len(), 0.2)] {
            if (have as f64 - share * n).abs() > 1.0 {
                return Err(Error::Dataset(format!(
                    "split of {n} clips has {have} where {share} is expected"
                )));
            }
        }
        Ok(())
    }
}

/// Validation and test each get `round(0.2 n)` clips (half away from zero),
/// training gets the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = (0.2 * n as f64).round() as usize;
    (n - 2 * held, held, held)
}

pub fn split_ids<S: AsRef<str>>(ids: &[S], seed: u64) -> Result<SplitAssignment> {
    if ids.len() < 5 {
        return Err(invalid(format!("splitting needs at least 5 clips, got {}", ids.len())));
    }
    let mut order: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
    Rng::new(seed).shuffle(&mut order);
    let (train, val, _) = split_sizes(order.len());
    let mut test = order.split_off(train + val);
    let mut val = order.split_off(train);
    let mut train = order;
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitAssignment {
        seed,
        train,
        val,
        test,
    })
}

pub fn split_dataset(clips: &[CineClip], seed: u64) -> Result<SplitAssignment> {
    let ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
    split_ids(&ids, seed)
}

/// `k` contiguous folds of a seeded shuffle; each id lands in exactly one.
pub fn kfold<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 || ids.len() < k {
        return Err(invalid(format!("cannot make {k} folds from {} clips", ids.len())));
    }
    let mut order: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
    Rng::new(seed).shuffle(&mut order);
    let n = order.len();
    Ok((0..k)
        .map(|f| order[f * n / k..(f + 1) * n / k].to_vec())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub view: View,
    pub width: usize,
    pub height: usize,
    /// Relative to the dataset root.
    pub frames: Vec<String>,
    pub labels: AttributeScores,
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PhantomParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apex_track: Option<ApexTrack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub clips: Vec<ClipEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitAssignment>,
}

impl DatasetManifest {
    pub fn entry(&self, id: &str) -> Option<&ClipEntry> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.clips.iter().map(|c| c.id.as_str()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "unknown manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.clips {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate clip id {}", c.id)));
            }
            if !valid_id(&c.id) {
                return Err(Error::Dataset(format!("clip id {:?} is not a plain name", c.id)));
            }
            if c.frames.len() != CLIP_LEN {
                return Err(clip_err(&c.id, format!("lists {} frames", c.frames.len())));
            }
            if c.labels.normalized().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(clip_err(&c.id, "normalized labels outside [0, 1]"));
            }
        }
        if let Some(split) = &self.split {
            split.validate(self.ids())?;
        }
        Ok(())
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn clip_err(clip: &str, message: impl Into<String>) -> Error {
    Error::Clip {
        clip: clip.to_string(),
        message: message.into(),
    }
}

pub fn frame_path(id: &str, index: usize) -> String {
    format!("clips/{id}/frame_{index:02}.pgm")
}

/// Nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.pixels().iter().map(|&v| quantize(v)));
    out
}

pub fn decode_pgm(bytes: &[u8], origin: Origin) -> Result<Frame> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or(""));
    }
    if fields[0] != "P5" {
        return Err(invalid(format!("not a binary PGM (magic {:?})", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| invalid(format!("bad PGM field {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(invalid(format!("only 8-bit PGM is supported, maxval {max}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(invalid(format!("PGM raster has {} bytes, expected {}", data.len(), w * h)));
    }
    Frame::new(w, h, data.iter().map(|&b| b as f32 / 255.0).collect(), origin)
}

fn entry_for(clip: &CineClip) -> ClipEntry {
    ClipEntry {
        id: clip.id.clone(),
        view: clip.view,
        width: clip.frames[0].width(),
        height: clip.frames[0].height(),
        frames: (0..CLIP_LEN).map(|i| frame_path(&clip.id, i)).collect(),
        labels: clip.labels,
        provenance: clip.provenance.clone(),
        params: clip.params,
        apex_track: clip.apex_track.clone(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let ctx = || format!("writing {}", path.display());
    let mut f = fs::File::create(&tmp).map_err(io(ctx()))?;
    f.write_all(bytes).map_err(io(ctx()))?;
    f.sync_all().map_err(io(ctx()))?;
    fs::rename(&tmp, path).map_err(io(ctx()))
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let mut text = serde_json::to_string_pretty(manifest).map_err(json("encoding manifest"))?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Writes frames and the manifest. Frames are quantized to 8 bits.
pub fn save_dataset(
    clips: &[CineClip],
    dir: impl AsRef<Path>,
    split: Option<&SplitAssignment>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for clip in clips {
        clip.check()?;
        if !valid_id(&clip.id) {
            return Err(invalid(format!("clip id {:?} is not a plain name", clip.id)));
        }
        let clip_dir = dir.join("clips").join(&clip.id);
        fs::create_dir_all(&clip_dir).map_err(io(format!("creating {}", clip_dir.display())))?;
        for (i, frame) in clip.frames.iter().enumerate() {
            let path = dir.join(frame_path(&clip.id, i));
            fs::write(&path, encode_pgm(frame)).map_err(io(format!("writing {}", path.display())))?;
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        clips: clips.iter().map(entry_for).collect(),
        split: split.cloned(),
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(format!("reading {}", path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(json(format!("parsing {}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Records a split in an existing dataset's manifest.
pub fn set_split(dir: impl AsRef<Path>, split: &SplitAssignment) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut manifest = load_manifest(dir)?;
    manifest.split = Some(split.clone());
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_frame(dir: &Path, entry: &ClipEntry, index: usize) -> Result<Frame> {
    let rel = entry
        .frames
        .get(index)
        .ok_or_else(|| clip_err(&entry.id, format!("no frame {index}")))?;
    let path = dir.join(rel);
    let bytes = fs::read(&path)
        .map_err(|e| clip_err(&entry.id, format!("reading {}: {e}", path.display())))?;
    let origin = if entry.params.is_some() {
        Origin::Phantom
    } else {
        Origin::Imported
    };
    let frame = decode_pgm(&bytes, origin).map_err(|e| clip_err(&entry.id, format!("{rel}: {e}")))?;
    if (frame.width(), frame.height()) != (entry.width, entry.height) {
        return Err(clip_err(
            &entry.id,
            format!(
                "{rel} is {}x{}, manifest says {}x{}",
                frame.width(),
                frame.height(),
                entry.width,
                entry.height
            ),
        ));
    }
    Ok(frame)
}

pub fn load_clip(dir: &Path, entry: &ClipEntry) -> Result<CineClip> {
    let frames = (0..CLIP_LEN)
        .map(|i| load_frame(dir, entry, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(CineClip {
        id: entry.id.clone(),
        view: entry.view,
        frames,
        labels: entry.labels,
        apex_track: entry.apex_track.clone(),
        params: entry.params,
        provenance: entry.provenance.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub clips: Vec<CineClip>,
}

impl Dataset {
    pub fn clip(&self, id: &str) -> Option<&CineClip> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Clips of one split, in split order.
    pub fn split(&self, split: Split) -> Result<Vec<&CineClip>> {
        let assignment = self
            .manifest
            .split
            .as_ref()
            .ok_or_else(|| Error::Dataset("dataset has no split; run split first".into()))?;
        let by_id: BTreeMap<&str, &CineClip> = self.clips.iter().map(|c| (c.id.as_str(), c)).collect();
        Ok(assignment.ids(split).iter().map(|id| by_id[id.as_str()]).collect())
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let root = dir.as_ref().to_path_buf();
    let manifest = load_manifest(&root)?;
    let clips = manifest
        .clips
        .iter()
        .map(|e| load_clip(&root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root,
        manifest,
        clips,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Fraction of width/height, at most 0.05.
    pub max_translation_fraction: f64,
    /// At most 10 degrees.
    pub max_rotation_deg: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            max_translation_fraction: 0.05,
            max_rotation_deg: 10.0,
            horizontal_flip: true,
            vertical_flip: true,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            max_translation_fraction: 0.0,
            max_rotation_deg: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.05).contains(&self.max_translation_fraction) {
            return Err(invalid("translation fraction must lie in [0, 0.05]"));
        }
        if !(0.0..=10.0).contains(&self.max_rotation_deg) {
            return Err(invalid("rotation must lie in [0, 10] degrees"));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut Rng, width: usize, height: usize) -> AugmentDraw {
        let t = self.max_translation_fraction;
        AugmentDraw {
            dx: translation_px(rng.range(-t, t), width),
            dy: translation_px(rng.range(-t, t), height),
            rotation_deg: rng.range(-self.max_rotation_deg, self.max_rotation_deg),
            flip_h: self.horizontal_flip && rng.bernoulli(0.5),
            flip_v: self.vertical_flip && rng.bernoulli(0.5),
        }
    }
}

/// One sampled transform: flip, then rotate about the center, then shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub dx: i64,
    pub dy: i64,
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

/// Pixel shift for a fraction of a side, rounded half away from zero.
pub fn translation_px(fraction: f64, side: usize) -> i64 {
    (fraction * side as f64).round() as i64
}

/// Bilinear sample; samples outside the frame read as 0.
fn sample(frame: &Frame, x: f64, y: f64) -> f64 {
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            frame.get(xi as usize, yi as usize) as f64
        }
    };
    let mut v = 0.0;
    for (xi, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
        for (yi, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
            if wx * wy != 0.0 {
                v += wx * wy * px(xi, yi);
            }
        }
    }
    v
}

pub fn augment(frame: &Frame, draw: &AugmentDraw) -> Frame {
    let (w, h) = (frame.width(), frame.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = draw.rotation_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let qx = (x as i64 - draw.dx) as f64 - cx;
            let qy = (y as i64 - draw.dy) as f64 - cy;
            let mut rx = cos * qx + sin * qy + cx;
            let mut ry = -sin * qx + cos * qy + cy;
            if draw.flip_h {
                rx = w as f64 - 1.0 - rx;
            }
            if draw.flip_v {
                ry = h as f64 - 1.0 - ry;
            }
            out.push(sample(frame, rx, ry).clamp(0.0, 1.0) as f32);
        }
    }
    Frame::new(w, h, out, frame.origin).expect("augmented frame stays in range")
}

/// One draw applied to every frame of a clip.
pub fn augment_clip(frames: &[Frame], spec: &AugmentationSpec, rng: &mut Rng) -> Vec<Frame> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let draw = spec.draw(rng, first.width(), first.height());
    frames.iter().map(|f| augment(f, &draw)).collect()
}

/// Bilinear resample to the 227x227 network input, pixel centers aligned.
pub fn resize_to_input(frame: &Frame) -> Result<Frame> {
    resize(frame, FRAME_SIZE, FRAME_SIZE)
}

pub fn resize(frame: &Frame, width: usize, height: usize) -> Result<Frame> {
    let (w, h) = (frame.width(), frame.height());
    if w < 8 || h < 8 {
        return Err(invalid(format!("cannot resize a {w}x{h} frame (minimum 8x8)")));
    }
    if (w, h) == (width, height) {
        return Ok(frame.clone());
    }
    let (sx, sy) = (w as f64 / width as f64, h as f64 / height as f64);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..width {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            out.push(sample(frame, src_x, src_y).clamp(0.0, 1.0) as f32);
        }
    }
    Frame::new(width, height, out, frame.origin)
}
