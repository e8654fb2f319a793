//! Binary containers, the scenario file, and atomic writes.
//!
//! Every binary container is `magic (4 bytes) | version u32 | payload | crc32`,
//! little-endian, with the CRC taken over everything between the magic and
//! the checksum.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body::{sha256_hex, BodyShape, Camera, MotionSequence, Pose, Skeleton, DEFAULT_FPS, NUM_BETAS, POSE_DIM};
use crate::error::{Error, Result};
use crate::features::MusicFeatures;
use crate::global_fit::DepthAnnotation;
use crate::local_fit::{ContactLabels, KeypointTrack};
use crate::numerics::Tensor;

pub const MOTION_MAGIC: &[u8; 4] = b"GMC1";
pub const FEATURES_MAGIC: &[u8; 4] = b"GMF1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMM1";
pub const FORMAT_VERSION: u32 = 1;
pub const SCENARIO_VERSION: u32 = 1;

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn seal(magic: &[u8; 4], payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks magic, version and CRC; returns the payload after the version.
fn unseal<'a>(magic: &[u8; 4], bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "not a {what} file: expected magic {:?}",
                String::from_utf8_lossy(magic)
            ),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Corruption {
            offset: bytes.len() as u64,
            message: format!("{what} file is truncated ({} bytes)", bytes.len()),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "{what} format version {version} is not supported; this build reads version {FORMAT_VERSION}, re-export the file with a matching release"
            ),
        });
    }
    let end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[4..end]);
    if stored != actual {
        return Err(Error::Corruption {
            offset: end as u64,
            message: format!("{what} checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
        });
    }
    Ok(&bytes[8..end])
}

/// Little-endian cursor that reports absolute offsets on failure.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize, what: &'static str) -> Self {
        Reader { buf, pos: 0, base, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption {
                offset: (self.base + self.pos) as u64,
                message: format!("{} payload ends early: needed {n} more bytes", self.what),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.base + self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: format!("{}: string is not UTF-8", self.what),
        })
    }

    fn offset(&self) -> u64 {
        (self.base + self.pos) as u64
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corruption {
                offset: self.offset(),
                message: format!(
                    "{} has {} trailing bytes beyond the declared counts",
                    self.what,
                    self.buf.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("count does not fit in u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Group motion as `GMC1`: β and packed poses per dancer, stored as f32.
pub fn encode_motion(motions: &[MotionSequence]) -> Result<Vec<u8>> {
    let frames = motions.first().map_or(0, |m| m.len());
    if motions.iter().any(|m| m.len() != frames) {
        return Err(Error::invalid("all dancers must have the same number of frames"));
    }
    let mut p = Vec::with_capacity(8 + motions.len() * (NUM_BETAS + frames * POSE_DIM) * 4);
    put_u32(&mut p, motions.len())?;
    put_u32(&mut p, frames)?;
    for m in motions {
        m.validate()?;
        for b in m.shape.beta {
            p.extend_from_slice(&(b as f32).to_le_bytes());
        }
        for pose in &m.poses {
            for v in pose.tau.iter().chain(&pose.theta) {
                p.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(seal(MOTION_MAGIC, p))
}

pub fn decode_motion(bytes: &[u8]) -> Result<Vec<MotionSequence>> {
    let payload = unseal(MOTION_MAGIC, bytes, "motion")?;
    let mut r = Reader::new(payload, 8, "motion");
    let dancers = r.u32()? as usize;
    let frames = r.u32()? as usize;
    let expected = dancers
        .checked_mul(NUM_BETAS + frames * POSE_DIM)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Corruption {
            offset: 8,
            message: "declared counts overflow".into(),
        })?;
    if payload.len() - 8 != expected {
        return Err(Error::Corruption {
            offset: 8,
            message: format!(
                "declared {dancers} dancers x {frames} frames need {expected} payload bytes, found {}",
                payload.len() - 8
            ),
        });
    }
    let mut out = Vec::with_capacity(dancers);
    for _ in 0..dancers {
        let mut beta = [0.0; NUM_BETAS];
        for b in &mut beta {
            *b = r.f32()? as f64;
        }
        let mut poses = Vec::with_capacity(frames);
        for _ in 0..frames {
            let at = r.offset();
            let mut y = [0.0; POSE_DIM];
            for v in &mut y {
                *v = r.f32()? as f64;
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corruption {
                    offset: at,
                    message: "non-finite pose value".into(),
                });
            }
            poses.push(Pose {
                tau: [y[0], y[1], y[2]],
                theta: y[3..].to_vec(),
            });
        }
        out.push(MotionSequence {
            poses,
            shape: BodyShape { beta },
            fps: DEFAULT_FPS,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_motion(motions: &[MotionSequence], path: &Path) -> Result<()> {
    write_atomic(path, &encode_motion(motions)?)
}

pub fn read_motion(path: &Path) -> Result<Vec<MotionSequence>> {
    decode_motion(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Corruption { offset, message } => Error::Corruption {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// `GMF1`: rows, cols, fps, layout string, then f64 rows.
pub fn encode_features(f: &MusicFeatures) -> Result<Vec<u8>> {
    f.validate()?;
    let mut p = Vec::with_capacity(f.data.len() * 8 + 64);
    put_u32(&mut p, f.frames())?;
    put_u32(&mut p, f.dim())?;
    p.extend_from_slice(&f.fps.to_le_bytes());
    put_str(&mut p, &f.layout_string())?;
    for v in f.data.data() {
        p.extend_from_slice(&v.to_le_bytes());
    }
    Ok(seal(FEATURES_MAGIC, p))
}

pub fn decode_features(bytes: &[u8]) -> Result<MusicFeatures> {
    let payload = unseal(FEATURES_MAGIC, bytes, "features")?;
    let mut r = Reader::new(payload, 8, "features");
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let fps = r.f64()?;
    let at = r.offset();
    let layout = MusicFeatures::parse_layout(&r.string()?).map_err(|e| Error::Format {
        offset: at,
        message: e.to_string(),
    })?;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Corruption {
        offset: 8,
        message: "declared shape overflows".into(),
    })?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    r.finish()?;
    let tensor = Tensor::new(vec![rows, cols], data).map_err(|e| Error::Format {
        offset: 8,
        message: e.to_string(),
    })?;
    MusicFeatures::new(tensor, fps, layout).map_err(|e| Error::Format {
        offset: 8,
        message: e.to_string(),
    })
}

pub fn write_features(f: &MusicFeatures, path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(f)?)
}

pub fn read_features(path: &Path) -> Result<MusicFeatures> {
    decode_features(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

/// `GMM1`: JSON config echo followed by a shape table and f64 tensors.
pub fn encode_checkpoint(config_json: &str, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    put_str(&mut p, config_json)?;
    put_u32(&mut p, tensors.len())?;
    for (name, t) in tensors {
        put_str(&mut p, name)?;
        put_u32(&mut p, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut p, d)?;
        }
    }
    for t in tensors.values() {
        for v in t.data() {
            p.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(seal(CHECKPOINT_MAGIC, p))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, BTreeMap<String, Tensor>)> {
    let payload = unseal(CHECKPOINT_MAGIC, bytes, "checkpoint")?;
    let mut r = Reader::new(payload, 8, "checkpoint");
    let config = r.string()?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut out = BTreeMap::new();
    for (name, shape) in table {
        let at = r.offset();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at,
            message: format!("tensor `{name}`: {e}"),
        })?;
        out.insert(name, t);
    }
    r.finish()?;
    Ok((config, out))
}

/// Path plus content hash of a file referenced by a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

/// Skeleton reference; no path means the bundled asset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DancerInput {
    /// `[frame][joint] = [u, v, confidence]`.
    pub keypoints: Vec<Vec<[f64; 3]>>,
    /// `[foot][frame]` in skeleton foot order, 0 or 1.
    pub contacts: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub fps: f64,
    pub camera: Camera,
    pub skeleton: SkeletonRef,
    pub dancers: Vec<DancerInput>,
    /// `(t, p, p′, r)` triples.
    #[serde(default)]
    pub depth: Vec<(usize, usize, usize, i64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<FileRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FileRef>,
}

/// A scenario with every reference resolved and verified.
#[derive(Clone, Debug)]
pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub skeleton: Skeleton,
    pub tracks: Vec<KeypointTrack>,
    pub contacts: Vec<ContactLabels>,
    pub annotation: DepthAnnotation,
    pub ground_truth: Option<Vec<MotionSequence>>,
    pub features: Option<MusicFeatures>,
}

impl LoadedScenario {
    pub fn frames(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.len())
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn verify_hash(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(Error::invalid(format!(
            "{}: sha256 {actual} does not match the scenario's {expected}",
            path.display()
        )));
    }
    Ok(bytes)
}

impl ScenarioFile {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("{context}:{}", e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "scenario".into(),
            source,
        })
    }

    /// Resolves references relative to `base` and checks every hash.
    pub fn resolve(self, base: &Path) -> Result<LoadedScenario> {
        if self.version != SCENARIO_VERSION {
            return Err(Error::invalid(format!(
                "scenario version {} is not supported (expected {SCENARIO_VERSION})",
                self.version
            )));
        }
        self.camera.validate()?;
        let skeleton = match &self.skeleton.path {
            Some(p) => {
                let bytes = verify_hash(&resolve(base, p), &self.skeleton.sha256)?;
                let text = String::from_utf8(bytes).map_err(|_| Error::invalid("skeleton file is not UTF-8"))?;
                Skeleton::from_json(&text)?
            }
            None => {
                let bundled = crate::body::default_skeleton_hash();
                if bundled != self.skeleton.sha256 {
                    return Err(Error::invalid(format!(
                        "scenario expects skeleton {}, bundled asset is {bundled}",
                        self.skeleton.sha256
                    )));
                }
                Skeleton::default()
            }
        };
        if self.dancers.is_empty() {
            return Err(Error::invalid("scenario has no dancers"));
        }
        let frames = self.dancers[0].keypoints.len();
        let mut tracks = Vec::new();
        let mut contacts = Vec::new();
        for (p, d) in self.dancers.iter().enumerate() {
            let track = KeypointTrack::new(d.keypoints.clone()).map_err(|e| Error::invalid(format!("dancer {p}: {e}")))?;
            track
                .check_dims(frames, skeleton.num_joints())
                .map_err(|e| Error::invalid(format!("dancer {p}: {e}")))?;
            if d.contacts.iter().flatten().any(|&c| c > 1) {
                return Err(Error::invalid(format!("dancer {p}: contact labels must be 0 or 1")));
            }
            let labels = ContactLabels {
                feet: skeleton.feet().to_vec(),
                labels: d.contacts.iter().map(|row| row.iter().map(|&c| c == 1).collect()).collect(),
            };
            labels
                .check(&skeleton, frames)
                .map_err(|e| Error::invalid(format!("dancer {p}: {e}")))?;
            tracks.push(track);
            contacts.push(labels);
        }
        let annotation = DepthAnnotation::from_triples(&self.depth)?;
        annotation.check(self.dancers.len(), frames)?;
        let ground_truth = match &self.ground_truth {
            Some(r) => {
                let path = resolve(base, &r.path);
                let m = decode_motion(&verify_hash(&path, &r.sha256)?).map_err(|e| with_path(e, &path))?;
                if m.len() != self.dancers.len() || m.iter().any(|d| d.len() != frames) {
                    return Err(Error::invalid("ground-truth motion does not match the scenario's dancers and frames"));
                }
                Some(m)
            }
            None => None,
        };
        let features = match &self.features {
            Some(r) => {
                let path = resolve(base, &r.path);
                Some(decode_features(&verify_hash(&path, &r.sha256)?).map_err(|e| with_path(e, &path))?)
            }
            None => None,
        };
        Ok(LoadedScenario {
            file: self,
            skeleton,
            tracks,
            contacts,
            annotation,
            ground_truth,
            features,
        })
    }
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = ScenarioFile::from_json(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new("."));
    file.resolve(base)
}

/// Scenario JSON for in-memory tracks; file references are supplied by the caller.
pub fn scenario_file(
    camera: &Camera,
    skeleton_hash: &str,
    tracks: &[KeypointTrack],
    contacts: &[ContactLabels],
    annotation: &DepthAnnotation,
    ground_truth: Option<FileRef>,
    features: Option<FileRef>,
) -> ScenarioFile {
    ScenarioFile {
        version: SCENARIO_VERSION,
        fps: DEFAULT_FPS,
        camera: *camera,
        skeleton: SkeletonRef {
            path: None,
            sha256: skeleton_hash.to_string(),
        },
        dancers: tracks
            .iter()
            .zip(contacts)
            .map(|(t, c)| DancerInput {
                keypoints: t.frames.clone(),
                contacts: c.labels.iter().map(|row| row.iter().map(|&b| b as u8).collect()).collect(),
            })
            .collect(),
        depth: annotation.triples().map(|(t, p, q, r)| (t, p, q, r as i64)).collect(),
        ground_truth,
        features,
    }
}
