//! JSON-lines dataset manifests. Relative paths resolve against the
//! manifest's own directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    /// `live` or `spoof`, or a material class name in material mode.
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_map_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_map_path: Option<PathBuf>,
}

impl ManifestEntry {
    fn resolve(mut self, base: &Path) -> Self {
        let join = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        self.image_path = join(self.image_path);
        self.depth_map_path = self.depth_map_path.map(join);
        self.reflection_map_path = self.reflection_map_path.map(join);
        self
    }
}

/// Reads a manifest. Blank lines and lines starting with `#` are skipped.
/// Every image must exist.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let err = |detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
        let entry = entry.resolve(&base);
        if !entry.image_path.is_file() {
            return Err(err(format!("image {} does not exist", entry.image_path.display())));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("img")).unwrap();
        fs::write(dir.path().join("img/a.png"), b"x").unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            "# comment\n{\"image_path\":\"img/a.png\",\"label\":\"live\",\"depth_map_path\":\"d.png\"}\n\n",
        )
        .unwrap();
        let entries = read_manifest(&m).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].image_path, dir.path().join("img/a.png"));
        assert_eq!(entries[0].depth_map_path.as_deref(), Some(dir.path().join("d.png").as_path()));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, "\n{\"image_path\":\"missing.png\",\"label\":\"live\"}\n").unwrap();
        match read_manifest(&m) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&m, "{not json}\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let e = ManifestEntry {
            image_path: "a.png".into(),
            label: "spoof".into(),
            attack_type: Some("print".into()),
            depth_map_path: None,
            reflection_map_path: None,
        };
        let m = dir.path().join("m.jsonl");
        write_manifest(&m, std::slice::from_ref(&e)).unwrap();
        let back = read_manifest(&m).unwrap();
        assert_eq!(back[0].attack_type.as_deref(), Some("print"));
        assert_eq!(back[0].image_path, dir.path().join("a.png"));
    }
}
