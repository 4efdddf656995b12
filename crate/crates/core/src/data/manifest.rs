use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::bag::{read_bag, write_bag, InstanceBag};
use crate::error::{MilError, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
const HEADER: &str = "bag_id\tpath\tlabel";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub bag_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub version: u32,
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            name: name.into(),
            class_names: vec!["negative".into(), "positive".into()],
            entries,
            version: MANIFEST_FORMAT_VERSION,
            root: root.into(),
        };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.bag_id.as_str()) {
                return Err(MilError::Format(format!("duplicate bag id {}", e.bag_id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.bag_id, e.path.display(), e.label);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn parse(text: &str, name: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(HEADER) {
            return Err(MilError::Format(format!("manifest must start with header {HEADER:?}")));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [bag_id, path, label] = fields[..] else {
                return Err(MilError::Format(format!("manifest line {}: expected 3 fields", n + 2)));
            };
            let label = label
                .trim()
                .parse()
                .map_err(|_| MilError::Format(format!("manifest line {}: bad label {label:?}", n + 2)))?;
            entries.push(ManifestEntry {
                bag_id: bag_id.to_string(),
                path: PathBuf::from(path),
                label,
            });
        }
        DatasetManifest::new(name, root, entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let root = path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
        DatasetManifest::parse(&text, &name, &root)
    }

    /// Reads every referenced bag, checking magic, ids, labels and a common
    /// feature width before anything else runs.
    pub fn load_bags(&self) -> Result<Vec<InstanceBag>> {
        let mut bags = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let bag = read_bag(&self.resolve(e))?;
            if bag.bag_id != e.bag_id || bag.label != e.label {
                return Err(MilError::Format(format!(
                    "{}: file holds bag {} label {}, manifest says {} label {}",
                    e.path.display(),
                    bag.bag_id,
                    bag.label,
                    e.bag_id,
                    e.label
                )));
            }
            if let Some(first) = bags.first() {
                let first: &InstanceBag = first;
                if first.dim() != bag.dim() {
                    return Err(MilError::Format(format!(
                        "bag {} has feature dim {}, expected {}",
                        bag.bag_id,
                        bag.dim(),
                        first.dim()
                    )));
                }
            }
            bags.push(bag);
        }
        Ok(bags)
    }
}

/// Writes bags as `<dir>/bags/<bag_id>.milb` and a manifest at
/// `<dir>/<manifest_name>`.
pub fn write_dataset(bags: &[InstanceBag], dir: &Path, manifest_name: &str) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("bags"))?;
    let mut entries = Vec::with_capacity(bags.len());
    for bag in bags {
        let rel = PathBuf::from("bags").join(format!("{}.milb", bag.bag_id));
        write_bag(bag, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            bag_id: bag.bag_id.clone(),
            path: rel,
            label: bag.label,
        });
    }
    let name = Path::new(manifest_name)
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let manifest = DatasetManifest::new(name, dir, entries)?;
    manifest.write(&dir.join(manifest_name))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn bag(id: &str, label: usize, d: usize) -> InstanceBag {
        InstanceBag::new(id, label, Tensor::filled(2, d, 0.5), None).unwrap()
    }

    #[test]
    fn write_then_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bags = vec![bag("a", 0, 3), bag("b", 1, 3)];
        let written = write_dataset(&bags, dir.path(), "manifest.tsv").unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(text.starts_with("bag_id\tpath\tlabel\na\tbags/a.milb\t0\n"));
        let read = DatasetManifest::read(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(read.entries, written.entries);
        assert_eq!(read.load_bags().unwrap(), bags);
    }

    #[test]
    fn rejects_duplicates_missing_files_and_mixed_widths() {
        let dir = tempfile::tempdir().unwrap();
        let dup = "bag_id\tpath\tlabel\nx\tbags/x.milb\t0\nx\tbags/y.milb\t1\n";
        assert!(matches!(
            DatasetManifest::parse(dup, "d", dir.path()),
            Err(MilError::Format(_))
        ));

        let missing = DatasetManifest::parse("bag_id\tpath\tlabel\nq\tnope.milb\t0\n", "m", dir.path()).unwrap();
        assert!(missing.load_bags().is_err());

        write_dataset(&[bag("a", 0, 3), bag("b", 1, 4)], dir.path(), "mixed.tsv").unwrap();
        let mixed = DatasetManifest::read(&dir.path().join("mixed.tsv")).unwrap();
        assert!(matches!(mixed.load_bags(), Err(MilError::Format(_))));

        assert!(DatasetManifest::parse("id\tpath\n", "h", dir.path()).is_err());
    }
}
