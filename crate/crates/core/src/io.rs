//! File formats: characters, motions, pairs, configs.
//!
//! JSON is the primary format. Motions can also be stored in a compact
//! binary form (little-endian `f32`, see [`save_motion_binary`]); the format
//! is chosen from the file extension.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::{partition_limbs, BodyPartition, SkinnedMesh};
use crate::skeleton::{Motion, Skeleton};
use crate::tensor::Tensor;

pub const CHARACTER_SCHEMA: &str = include_str!("../schemas/character.schema.json");
pub const MOTION_SCHEMA: &str = include_str!("../schemas/motion.schema.json");

const MOTION_MAGIC: &[u8; 4] = b"MKMB";
const MOTION_BINARY_VERSION: u32 = 1;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses JSON, reporting the file, line and column on failure.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::schema(format!("{}:{}:{}", path.display(), e.line(), e.column()), e.to_string())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(path, &text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// TOML when the extension is `.toml`, JSON otherwise.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if has_extension(path, "toml") {
        toml::from_str(&text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("{}:{line}", path.display())
                })
                .unwrap_or_else(|| path.display().to_string());
            Error::InvalidConfig(format!("{at}: {}", e.message()))
        })
    } else {
        serde_json::from_str(&text).map_err(|e| {
            Error::InvalidConfig(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
        })
    }
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// A character ready for use: skeleton, skinned mesh and limb chains.
#[derive(Clone, Debug, PartialEq)]
pub struct Character {
    pub name: String,
    pub skeleton: Skeleton,
    pub mesh: SkinnedMesh,
    pub limb_chains: Vec<Vec<String>>,
}

impl Character {
    pub fn partition(&self) -> Result<BodyPartition> {
        partition_limbs(&self.mesh, &self.skeleton, &self.limb_chains)
    }

    pub fn to_file(&self) -> CharacterFile {
        let s = &self.skeleton;
        CharacterFile {
            name: self.name.clone(),
            joints: (0..s.num_joints())
                .map(|j| JointEntry {
                    name: s.joint_names()[j].clone(),
                    parent: s.parent(j).map_or(-1, |p| p as i64),
                    offset: s.offsets()[j],
                })
                .collect(),
            height: s.height(),
            mesh: MeshEntry {
                vertices: self.mesh.vertices_bind().to_vec(),
                faces: self.mesh.faces().to_vec(),
                weights: self.mesh.weights().to_vec(),
            },
            limb_chains: self.limb_chains.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacterFile {
    pub name: String,
    pub joints: Vec<JointEntry>,
    pub height: f64,
    pub mesh: MeshEntry,
    pub limb_chains: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointEntry {
    pub name: String,
    /// `-1` for the root.
    pub parent: i64,
    pub offset: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshEntry {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per vertex: `[[joint_index, weight], ...]`.
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl CharacterFile {
    pub fn validate(self) -> Result<Character> {
        let ctx = format!("character `{}`", self.name);
        let n = self.joints.len();
        let mut parents = Vec::with_capacity(n);
        for (j, joint) in self.joints.iter().enumerate() {
            let parent = match joint.parent {
                -1 => None,
                p if p >= 0 && (p as usize) < n => Some(p as usize),
                p => {
                    return Err(Error::schema(
                        &ctx,
                        format!("joint {j} (`{}`) has unknown parent index {p}", joint.name),
                    ))
                }
            };
            parents.push(parent);
        }
        let skeleton = Skeleton::new(
            self.joints.iter().map(|j| j.name.clone()).collect(),
            parents,
            self.joints.iter().map(|j| j.offset).collect(),
            self.height,
        )
        .map_err(|e| prefix(&ctx, e))?;
        let mesh = SkinnedMesh::bind_to(&skeleton, self.mesh.vertices, self.mesh.faces, self.mesh.weights)
            .map_err(|e| prefix(&ctx, e))?;
        for chain in &self.limb_chains {
            if chain.is_empty() {
                return Err(Error::schema(&ctx, "empty limb chain"));
            }
            for name in chain {
                if skeleton.joint_index(name).is_err() {
                    return Err(Error::schema(&ctx, format!("limb chain names unknown joint `{name}`")));
                }
            }
        }
        Ok(Character {
            name: self.name,
            skeleton,
            mesh,
            limb_chains: self.limb_chains,
        })
    }
}

fn prefix(ctx: &str, e: Error) -> Error {
    match e {
        Error::SchemaViolation { context, message } => Error::schema(format!("{ctx}: {context}"), message),
        other => other,
    }
}

pub fn load_character(path: &Path) -> Result<Character> {
    let file: CharacterFile = read_json(path)?;
    file.validate().map_err(|e| prefix(&path.display().to_string(), e))
}

pub fn save_character(character: &Character, path: &Path) -> Result<()> {
    write_json(path, &character.to_file())
}

/// A motion plus the name of the character it animates.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionRecord {
    pub character: String,
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFile {
    pub character: String,
    pub fps: f64,
    pub frames: usize,
    pub rot6d: Vec<Vec<[f64; 6]>>,
    pub root_pos: Vec<Vec3>,
}

impl MotionFile {
    pub fn from_motion(character: &str, motion: &Motion) -> Self {
        let (t, n) = (motion.frames(), motion.joints());
        Self {
            character: character.to_string(),
            fps: motion.fps,
            frames: t,
            rot6d: (0..t).map(|f| (0..n).map(|j| motion.rot6d_at(f, j)).collect()).collect(),
            root_pos: (0..t).map(|f| motion.root_at(f)).collect(),
        }
    }

    pub fn validate(self) -> Result<MotionRecord> {
        let ctx = format!("motion for `{}`", self.character);
        if self.rot6d.len() != self.frames || self.root_pos.len() != self.frames {
            return Err(Error::schema(
                &ctx,
                format!(
                    "frames = {} but rot6d has {} rows and root_pos {}",
                    self.frames,
                    self.rot6d.len(),
                    self.root_pos.len()
                ),
            ));
        }
        let n = self.rot6d.first().map_or(0, Vec::len);
        if let Some(t) = self.rot6d.iter().position(|row| row.len() != n) {
            return Err(Error::schema(&ctx, format!("frame {t} has {} joints, frame 0 has {n}", self.rot6d[t].len())));
        }
        let rot: Vec<f64> = self.rot6d.iter().flatten().flatten().copied().collect();
        let root: Vec<f64> = self.root_pos.iter().flatten().copied().collect();
        let motion = Motion::new(
            Tensor::new([self.frames, n, 6], rot),
            Tensor::new([self.frames, 3], root),
            self.fps,
        )
        .map_err(|e| prefix(&ctx, e))?;
        Ok(MotionRecord {
            character: self.character,
            motion,
        })
    }
}

/// `.bin` selects the binary variant, anything else JSON.
pub fn load_motion(path: &Path) -> Result<MotionRecord> {
    if has_extension(path, "bin") {
        return decode_motion_binary(path, &read_bytes(path)?);
    }
    let file: MotionFile = read_json(path)?;
    file.validate().map_err(|e| prefix(&path.display().to_string(), e))
}

pub fn save_motion(character: &str, motion: &Motion, path: &Path) -> Result<()> {
    if has_extension(path, "bin") {
        return save_motion_binary(character, motion, path);
    }
    write_json(path, &MotionFile::from_motion(character, motion))
}

/// Layout: magic `MKMB`, then `u32` version, frames, joints, `f32` fps,
/// `u32` name length and UTF-8 name, then `f32` rot6d `[T, N, 6]` and
/// root positions `[T, 3]`. All little-endian.
pub fn save_motion_binary(character: &str, motion: &Motion, path: &Path) -> Result<()> {
    write_atomic(path, &encode_motion_binary(character, motion))
}

pub fn encode_motion_binary(character: &str, motion: &Motion) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + character.len() + 4 * (motion.rot6d.len() + motion.root_pos.len()));
    out.extend_from_slice(MOTION_MAGIC);
    out.extend_from_slice(&MOTION_BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(motion.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(motion.joints() as u32).to_le_bytes());
    out.extend_from_slice(&(motion.fps as f32).to_le_bytes());
    out.extend_from_slice(&(character.len() as u32).to_le_bytes());
    out.extend_from_slice(character.as_bytes());
    for &v in motion.rot6d.data().iter().chain(motion.root_pos.data()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_motion_binary(path: &Path, bytes: &[u8]) -> Result<MotionRecord> {
    let ctx = path.display().to_string();
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::schema(&ctx, "truncated motion file"));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != MOTION_MAGIC {
        return Err(Error::schema(&ctx, "not a binary motion file"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != MOTION_BINARY_VERSION {
        return Err(Error::schema(&ctx, format!("unsupported version {version}")));
    }
    let frames = u32_at(take(4)?) as usize;
    let joints = u32_at(take(4)?) as usize;
    let fps = f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64;
    let name_len = u32_at(take(4)?) as usize;
    let character = String::from_utf8(take(name_len)?.to_vec())
        .map_err(|_| Error::schema(&ctx, "character name is not UTF-8"))?;
    let count = frames * joints * 6 + frames * 3;
    let body = take(count * 4)?;
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if !cursor.is_empty() {
        return Err(Error::schema(&ctx, format!("{} trailing bytes", cursor.len())));
    }
    let (rot, root) = values.split_at(frames * joints * 6);
    let motion = Motion::new(
        Tensor::new([frames, joints, 6], rot.to_vec()),
        Tensor::new([frames, 3], root.to_vec()),
        fps,
    )
    .map_err(|e| prefix(&ctx, e))?;
    Ok(MotionRecord { character, motion })
}

/// Source and target characters for fine-tuning and retargeting.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacterPair {
    pub source: Character,
    pub target: Character,
    pub checkpoint_id: Option<String>,
}

impl CharacterPair {
    pub fn new(source: Character, target: Character, checkpoint_id: Option<String>) -> Result<Self> {
        if !source.skeleton.same_topology(&target.skeleton) {
            return Err(Error::PairMismatch(format!(
                "`{}` ({} joints) and `{}` ({} joints) do not share a joint hierarchy",
                source.name,
                source.skeleton.num_joints(),
                target.name,
                target.skeleton.num_joints()
            )));
        }
        Ok(Self {
            source,
            target,
            checkpoint_id,
        })
    }
}

/// On disk a pair references two character files, relative to the pair file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFile {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<String>,
}

pub fn load_pair(path: &Path) -> Result<CharacterPair> {
    let file: PairFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let source = load_character(&base.join(&file.source))?;
    let target = load_character(&base.join(&file.target))?;
    CharacterPair::new(source, target, file.checkpoint_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    fn two_joint_character() -> Character {
        let skel = Skeleton::new(
            vec!["root".into(), "tip".into()],
            vec![None, Some(0)],
            vec![[0.0; 3], [0.0, 1.0, 0.0]],
            1.0,
        )
        .unwrap();
        let (verts, faces) = icosphere(1, 0.3);
        let weights = verts
            .iter()
            .map(|v| if v[1] > 0.0 { vec![(1, 0.75), (0, 0.25)] } else { vec![(0, 1.0)] })
            .collect();
        let mesh = SkinnedMesh::bind_to(&skel, verts, faces, weights).unwrap();
        Character {
            name: "pin".into(),
            skeleton: skel,
            mesh,
            limb_chains: vec![vec!["tip".into()]],
        }
    }

    fn toy_motion() -> Motion {
        let rot = (0..3 * 2 * 6).map(|i| 0.1 * i as f64 + 1.0 / 3.0).collect();
        let root = (0..9).map(|i| (i as f64).sqrt() - 0.7).collect();
        Motion::new(Tensor::new([3, 2, 6], rot), Tensor::new([3, 3], root), 30.0).unwrap()
    }

    #[test]
    fn character_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = two_joint_character();
        save_character(&c, &path).unwrap();
        assert_eq!(load_character(&path).unwrap(), c);
    }

    #[test]
    fn motion_json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = toy_motion();
        save_motion("pin", &m, &path).unwrap();
        let back = load_motion(&path).unwrap();
        assert_eq!(back.character, "pin");
        assert_eq!(back.motion, m);
    }

    #[test]
    fn motion_binary_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = toy_motion();
        save_motion("pin", &m, &path).unwrap();
        let back = load_motion(&path).unwrap();
        assert_eq!(back.character, "pin");
        assert_eq!(back.motion.rot6d.shape(), m.rot6d.shape());
        let tol = f32::EPSILON as f64 * 4.0;
        assert!(back.motion.rot6d.max_abs_diff(&m.rot6d) < tol);
        assert!(back.motion.root_pos.max_abs_diff(&m.root_pos) < tol);
    }

    #[test]
    fn binary_rejects_truncation() {
        let bytes = encode_motion_binary("pin", &toy_motion());
        let err = decode_motion_binary(Path::new("x.bin"), &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { .. }));
    }

    #[test]
    fn weight_row_sum_violation_names_vertex() {
        let mut file = two_joint_character().to_file();
        file.mesh.weights[7] = vec![(0, 0.9)];
        let err = file.validate().unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { .. }));
        assert!(err.to_string().contains("vertex 7"), "{err}");
    }

    #[test]
    fn unknown_parent_is_schema_violation() {
        let mut file = two_joint_character().to_file();
        file.joints[1].parent = 5;
        let err = file.validate().unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { .. }));
        assert!(err.to_string().contains("unknown parent"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n  \"character\": \"a\",\n  \"fps\": oops\n}").unwrap();
        let err = load_motion(&path).unwrap_err();
        assert!(err.to_string().contains("bad.json:3:"), "{err}");
    }

    #[test]
    fn ragged_motion_rejected() {
        let mut file = MotionFile::from_motion("pin", &toy_motion());
        file.rot6d[2].pop();
        assert!(matches!(file.validate(), Err(Error::SchemaViolation { .. })));
    }

    #[test]
    fn pair_paths_resolve_relative_to_pair_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = two_joint_character();
        save_character(&c, &dir.path().join("a.json")).unwrap();
        save_character(&c, &dir.path().join("b.json")).unwrap();
        let pair = PairFile {
            source: "a.json".into(),
            target: "b.json".into(),
            checkpoint_id: Some("ck".into()),
        };
        write_json(&dir.path().join("p.json"), &pair).unwrap();
        let loaded = load_pair(&dir.path().join("p.json")).unwrap();
        assert_eq!(loaded.checkpoint_id.as_deref(), Some("ck"));
        assert_eq!(loaded.target, c);
    }

    #[test]
    fn schemas_are_json() {
        for s in [CHARACTER_SCHEMA, MOTION_SCHEMA] {
            let v: serde_json::Value = serde_json::from_str(s).unwrap();
            assert!(v["required"].is_array());
        }
    }
}
