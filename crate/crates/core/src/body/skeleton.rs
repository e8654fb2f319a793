use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 23;
pub const NUM_BETAS: usize = 10;
pub const SKELETON_VERSION: u32 = 1;

/// Bone scales are clamped to this range of the rest length.
pub const SCALE_RANGE: (f64, f64) = (0.2, 3.0);

/// Default skeleton geometry shipped with the crate.
pub const DEFAULT_SKELETON_JSON: &str = include_str!("../../assets/skeleton_v1.json");

/// On-disk layout of a skeleton definition.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonFile {
    pub version: u32,
    #[serde(default)]
    pub names: Vec<String>,
    pub parents: Vec<i64>,
    pub offsets: Vec<[f64; 3]>,
    pub feet: Vec<usize>,
    pub radii: Vec<f64>,
    pub beta_map: Vec<[f64; NUM_BETAS]>,
}

/// Joint tree with rest offsets, capsule radii and the shape-to-scale map.
///
/// Joint `j`'s capsule spans from its parent to `j`; the root capsule is a
/// sphere at the root joint.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
    feet: Vec<usize>,
    radii: Vec<f64>,
    beta_map: Vec<[f64; NUM_BETAS]>,
}

impl Skeleton {
    pub fn from_file(file: SkeletonFile) -> Result<Self> {
        if file.version != SKELETON_VERSION {
            return Err(Error::invalid(format!(
                "unsupported skeleton version {} (this build reads version {SKELETON_VERSION})",
                file.version
            )));
        }
        let j = file.parents.len();
        if j != NUM_JOINTS {
            return Err(Error::invalid(format!("skeleton must have {NUM_JOINTS} joints, got {j}")));
        }
        if file.offsets.len() != j || file.radii.len() != j || file.beta_map.len() != j {
            return Err(Error::invalid("skeleton arrays disagree on joint count"));
        }
        if !file.names.is_empty() && file.names.len() != j {
            return Err(Error::invalid("skeleton names disagree on joint count"));
        }
        let mut parents = Vec::with_capacity(j);
        let mut roots = 0;
        for (child, &p) in file.parents.iter().enumerate() {
            if p < 0 {
                roots += 1;
                if child != 0 {
                    return Err(Error::invalid("root must be joint 0"));
                }
                parents.push(None);
            } else {
                let p = p as usize;
                if p >= child {
                    return Err(Error::invalid(format!(
                        "joint {child} has parent {p}; parents must precede children"
                    )));
                }
                parents.push(Some(p));
            }
        }
        if roots != 1 {
            return Err(Error::invalid(format!("skeleton needs exactly one root, found {roots}")));
        }
        if file.feet.iter().any(|&f| f >= j) || file.feet.is_empty() {
            return Err(Error::invalid("feet indices out of range"));
        }
        if file.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid("capsule radii must be positive"));
        }
        let finite = file
            .offsets
            .iter()
            .flatten()
            .chain(file.beta_map.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("skeleton contains non-finite values"));
        }
        let names = if file.names.is_empty() {
            (0..j).map(|i| format!("joint{i}")).collect()
        } else {
            file.names
        };
        Ok(Skeleton {
            names,
            parents,
            offsets: file.offsets,
            feet: file.feet,
            radii: file.radii,
            beta_map: file.beta_map,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "skeleton definition".into(),
            source,
        })?;
        Skeleton::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Skeleton::from_json(&text)
    }

    pub fn to_file(&self) -> SkeletonFile {
        SkeletonFile {
            version: SKELETON_VERSION,
            names: self.names.clone(),
            parents: self
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            offsets: self.offsets.clone(),
            feet: self.feet.clone(),
            radii: self.radii.clone(),
            beta_map: self.beta_map.clone(),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offset(&self, j: usize) -> [f64; 3] {
        self.offsets[j]
    }

    pub fn radius(&self, j: usize) -> f64 {
        self.radii[j]
    }

    pub fn feet(&self) -> &[usize] {
        &self.feet
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn beta_row(&self, j: usize) -> &[f64; NUM_BETAS] {
        &self.beta_map[j]
    }

    pub fn rest_length(&self, j: usize) -> f64 {
        let o = self.offsets[j];
        (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton::from_json(DEFAULT_SKELETON_JSON).expect("bundled skeleton is valid")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn default_skeleton_hash() -> String {
    sha256_hex(DEFAULT_SKELETON_JSON.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_asset_hash_is_pinned() {
        assert_eq!(
            default_skeleton_hash(),
            "ec649ec29c1ddfec6467ceb9a87dbf2e93b1fc7b8305ec5bbf08ad41893c502b"
        );
    }

    #[test]
    fn default_skeleton_invariants() {
        let s = Skeleton::default();
        assert_eq!(s.num_joints(), NUM_JOINTS);
        assert_eq!(s.parent(0), None);
        for j in 1..s.num_joints() {
            assert!(s.parent(j).unwrap() < j);
        }
        for name in ["left_ankle", "right_ankle", "left_toe", "right_toe"] {
            assert!(s.feet().contains(&s.joint_index(name).unwrap()));
        }
    }

    #[test]
    fn loader_rejects_unknown_version() {
        let mut f = Skeleton::default().to_file();
        f.version = 7;
        let err = Skeleton::from_file(f).unwrap_err().to_string();
        assert!(err.contains("version 7"), "{err}");
    }

    #[test]
    fn loader_rejects_bad_topology() {
        let mut f = Skeleton::default().to_file();
        f.parents[3] = 5;
        assert!(Skeleton::from_file(f).is_err());
        let mut f = Skeleton::default().to_file();
        f.radii[2] = 0.0;
        assert!(Skeleton::from_file(f).is_err());
    }

    #[test]
    fn skeleton_json_rejects_unknown_keys() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_SKELETON_JSON).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(Skeleton::from_json(&v.to_string()).is_err());
    }
}
