use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{sample_paths, save_sample};
use super::rng::{mix64, SplitMix64};
use super::scene::{generate_scene, SceneConfig};
use crate::error::{Error, Result};

/// Ordered list of sample prefixes.
///
/// The text format is one prefix per line, relative to the manifest's
/// directory unless absolute; blank lines and lines starting with `#` are
/// skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(entries: Vec<PathBuf>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Manifest("no samples listed".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e) {
                return Err(Error::Manifest(format!("duplicate entry {}", e.display())));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[PathBuf] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seeded disjoint partition into `n_train` and `n_eval` entries, each
    /// part kept in manifest order.
    pub fn split(&self, seed: u64, n_train: usize, n_eval: usize) -> Result<(Manifest, Manifest)> {
        if n_train == 0 || n_eval == 0 || n_train + n_eval > self.len() {
            return Err(Error::Manifest(format!(
                "cannot split {} samples into {n_train} train and {n_eval} eval",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        SplitMix64::derive(seed, 0x5B117).shuffle(&mut idx);
        let pick = |sel: &[usize]| {
            let mut sel = sel.to_vec();
            sel.sort_unstable();
            Manifest {
                entries: sel.into_iter().map(|i| self.entries[i].clone()).collect(),
            }
        };
        Ok((pick(&idx[..n_train]), pick(&idx[n_train..n_train + n_eval])))
    }
}

/// Reads a manifest and checks that every listed sample's files exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let prefix = root.join(line);
        let p = sample_paths(&prefix);
        for f in [&p.left, &p.right, &p.disparity, &p.semantic, &p.calib] {
            if !f.is_file() {
                return Err(Error::Manifest(format!(
                    "{}: sample '{line}' is missing {}",
                    path.display(),
                    f.display()
                )));
            }
        }
        entries.push(prefix);
    }
    Manifest::new(entries).map_err(|e| match e {
        Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `prefixes` verbatim, one per line.
pub fn write_manifest(path: &Path, prefixes: &[String]) -> Result<()> {
    let mut text = String::new();
    for p in prefixes {
        text.push_str(p);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders `count` scenes into `dir` as `000000`, `000001`, ... and writes
/// `dir/manifest.txt` listing them. Sample `i` uses a seed derived from
/// `cfg.seed` and `i`.
pub fn generate_dataset(dir: &Path, cfg: &SceneConfig, count: usize) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("{i:06}");
        let scene = generate_scene(cfg, mix64(cfg.seed ^ mix64(i as u64)))?;
        save_sample(&dir.join(&name), &scene.sample)?;
        names.push(name);
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &names)?;
    Ok(manifest)
}
