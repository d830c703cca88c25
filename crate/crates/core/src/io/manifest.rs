//! Dataset manifest: one sample per line, `left TAB right TAB gt`.
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: PathBuf,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: i + 1,
                msg: format!("expected 'left<TAB>right<TAB>gt', got {} fields", parts.len()),
            });
        }
        entries.push(ManifestEntry {
            left: resolve(parts[0]),
            right: resolve(parts[1]),
            gt: resolve(parts[2]),
        });
    }
    Ok(entries)
}

/// Writes a manifest of relative path triples.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[(String, String, String)]) -> Result<()> {
    let mut text = String::new();
    for (l, r, g) in rows {
        text.push_str(&format!("{l}\t{r}\t{g}\n"));
    }
    fs::write(path.as_ref(), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_resolution() {
        let dir = std::env::temp_dir().join("gwcstereo-manifest-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("manifest.txt");
        write_manifest(
            &p,
            &[("a/l.png".into(), "a/r.png".into(), "a/gt.pfm".into())],
        )
        .unwrap();
        let entries = read_manifest(&p).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].left, dir.join("a/l.png"));

        std::fs::write(&p, "only-two\tfields\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
