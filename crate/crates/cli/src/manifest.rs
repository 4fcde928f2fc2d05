use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xmc_core::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<Artifact>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

/// Tracks files written by one command so that a failed run can remove
/// them and a successful one can list them in its manifest.
pub struct Outputs {
    root: PathBuf,
    created_dirs: Vec<PathBuf>,
    artifacts: Vec<Artifact>,
    timings: BTreeMap<String, f64>,
    clock: Instant,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self> {
        let mut out = Self {
            root: root.to_path_buf(),
            created_dirs: Vec::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            clock: Instant::now(),
        };
        out.ensure_dir(root)?;
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut d = Some(dir);
        while let Some(p) = d {
            if p.as_os_str().is_empty() || p.exists() {
                break;
            }
            missing.push(p.to_path_buf());
            d = p.parent();
        }
        fs::create_dir_all(dir)?;
        self.created_dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    /// Registers an artifact and returns its absolute path, creating parents.
    pub fn file(&mut self, rel: &str, kind: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            self.ensure_dir(parent)?;
        }
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            kind: kind.to_string(),
        });
        Ok(path)
    }

    /// Records the time since the previous lap under `phase`.
    pub fn lap(&mut self, phase: &str) {
        let t = self.clock.elapsed().as_secs_f64();
        *self.timings.entry(phase.to_string()).or_default() += t;
        self.clock = Instant::now();
    }

    /// Removes every registered file and every directory this run created.
    pub fn abort(self) {
        for a in &self.artifacts {
            let _ = fs::remove_file(self.root.join(&a.path));
        }
        for d in self.created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }

    /// Writes `<command>.manifest.json` listing every artifact.
    pub fn finish(mut self, command: &str, config_hash: &str, seeds: &[u64]) -> Result<RunManifest> {
        self.lap("finish");
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            artifacts: self.artifacts,
            timings: self.timings,
        };
        let path = self.root.join(format!("{command}.manifest.json"));
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abort_removes_files_and_new_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("a/b");
        let mut o = Outputs::new(&root).unwrap();
        let f = o.file("x/y.txt", "test").unwrap();
        fs::write(&f, "1").unwrap();
        o.abort();
        assert!(!tmp.path().join("a").exists());
    }

    #[test]
    fn manifest_lists_each_artifact_once() {
        let tmp = tempfile::tempdir().unwrap();
        let mut o = Outputs::new(tmp.path()).unwrap();
        for _ in 0..2 {
            let f = o.file("m.csv", "metrics").unwrap();
            fs::write(f, "").unwrap();
        }
        let m = o.finish("evaluate", "h", &[1]).unwrap();
        assert_eq!(m.artifacts.len(), 1);
        assert!(tmp.path().join("evaluate.manifest.json").exists());
    }
}
