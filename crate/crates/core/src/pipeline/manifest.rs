//! Run manifest: which stages finished, with what seed, and the digests of
//! what they read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MapoError, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Sft,
    Reward,
    Rl,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Warmup, Stage::Sft, Stage::Reward, Stage::Rl, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Sft => "sft",
            Stage::Reward => "reward",
            Stage::Rl => "rl",
            Stage::Eval => "eval",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Warmup => &[],
            Stage::Sft => &[Stage::Warmup],
            Stage::Reward => &[Stage::Warmup, Stage::Sft],
            Stage::Rl => &[Stage::Warmup, Stage::Sft, Stage::Reward],
            Stage::Eval => &[Stage::Warmup, Stage::Sft, Stage::Reward, Stage::Rl],
        }
    }

    /// Directory under the run directory holding this stage's outputs.
    pub fn dir(self, run_dir: &Path) -> PathBuf {
        run_dir.join(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_at: String,
    pub seed: u64,
    /// Input file path -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific counts and summary numbers.
    pub summary: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            run_id: config_hash[..12.min(config_hash.len())].to_string(),
            config_hash: config_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest of `run_dir`, or starts a new one.
    pub fn load_or_new(run_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        if path.exists() {
            let mut m: RunManifest = serde_json::from_slice(&fs::read(&path)?)?;
            m.config_hash = config_hash.to_string();
            Ok(m)
        } else {
            Ok(Self::new(config_hash))
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir)?;
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, run_dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.contains_key(&stage)
    }

    /// Fails unless every upstream stage completed and its outputs are intact.
    pub fn require_upstream(&self, stage: Stage, run_dir: &Path) -> Result<()> {
        for &up in stage.upstream() {
            let record = self.stages.get(&up).ok_or_else(|| MapoError::MissingUpstream {
                stage: stage.name().into(),
                missing: up.name().into(),
            })?;
            verify_outputs(run_dir, record)?;
        }
        Ok(())
    }

    /// Drops the records of `stage` and of every stage that depends on it.
    pub fn invalidate_from(&mut self, stage: Stage) {
        self.stages.remove(&stage);
        for s in Stage::ALL {
            if s.upstream().contains(&stage) {
                self.stages.remove(&s);
            }
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(rng::digest(&fs::read(path)?))
}

/// Digests of every file under `dir`, keyed by path relative to `root` with `/` separators.
pub fn digest_tree(root: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .map_err(|_| MapoError::InvalidInput(format!("{} is outside the run", path.display())))?;
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, file_digest(&path)?);
            }
        }
    }
    Ok(out)
}

pub fn verify_outputs(run_dir: &Path, record: &StageRecord) -> Result<()> {
    for (rel, expected) in &record.outputs {
        let path = run_dir.join(rel);
        let actual = file_digest(&path).map_err(|_| MapoError::DigestMismatch(path.clone()))?;
        if &actual != expected {
            return Err(MapoError::DigestMismatch(path));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(run: &Path) -> StageRecord {
        let dir = Stage::Warmup.dir(run);
        fs::create_dir_all(dir.join("sub")).unwrap();
        fs::write(dir.join("a.jsonl"), b"{\"x\":1}\n").unwrap();
        fs::write(dir.join("sub/b.bin"), [0u8, 1, 2, 3]).unwrap();
        StageRecord {
            completed_at: String::new(),
            seed: 1,
            inputs: BTreeMap::new(),
            outputs: digest_tree(run, &dir).unwrap(),
            summary: BTreeMap::new(),
        }
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let r = record(tmp.path());
        assert_eq!(r.outputs.len(), 2);
        assert!(r.outputs.contains_key("warmup/sub/b.bin"));
        verify_outputs(tmp.path(), &r).unwrap();
        let p = tmp.path().join("warmup/sub/b.bin");
        fs::write(&p, [0u8, 1, 2, 4]).unwrap();
        assert!(matches!(verify_outputs(tmp.path(), &r), Err(MapoError::DigestMismatch(_))));
    }

    #[test]
    fn ordering_guard_names_missing_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let m = RunManifest::new("abc");
        match m.require_upstream(Stage::Rl, tmp.path()) {
            Err(MapoError::MissingUpstream { stage, missing }) => {
                assert_eq!(stage, "rl");
                assert_eq!(missing, "warmup");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalidation_cascades_downstream() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("abc");
        for s in Stage::ALL {
            m.stages.insert(s, record(tmp.path()));
        }
        m.invalidate_from(Stage::Reward);
        assert!(m.is_complete(Stage::Warmup) && m.is_complete(Stage::Sft));
        assert!(!m.is_complete(Stage::Reward) && !m.is_complete(Stage::Rl) && !m.is_complete(Stage::Eval));
    }

    #[test]
    fn manifest_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("0123456789abcdef");
        m.stages.insert(Stage::Sft, record(tmp.path()));
        m.save(tmp.path()).unwrap();
        assert_eq!(RunManifest::load_or_new(tmp.path(), "0123456789abcdef").unwrap(), m);
        assert_eq!(m.run_id, "0123456789ab");
    }
}
