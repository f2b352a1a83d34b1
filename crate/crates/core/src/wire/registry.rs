use std::collections::BTreeMap;
use std::path::Path;

use crate::Error;

/// Bucket for versions the registry does not name.
pub const OTHERS_LABEL: &str = "others";

const DEFAULT_REGISTRY: &str = include_str!("../../config/versions.tsv");

/// Known QUIC version numbers and their display labels.
///
/// Text format: one `hex_version<TAB>label` per line; `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionRegistry {
    labels: BTreeMap<u32, String>,
}

impl Default for VersionRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("bundled version registry parses")
    }
}

impl VersionRegistry {
    pub fn empty() -> Self {
        VersionRegistry { labels: BTreeMap::new() }
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut labels = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (hex, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse("version registry", n + 1, "expected hex_version<TAB>label"))?;
            let hex = hex.trim().trim_start_matches("0x");
            let version = u32::from_str_radix(hex, 16)
                .map_err(|_| Error::parse("version registry", n + 1, format!("bad version {hex:?}")))?;
            labels.insert(version, label.trim().to_string());
        }
        Ok(VersionRegistry { labels })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn contains(&self, version: u32) -> bool {
        self.labels.contains_key(&version)
    }

    pub fn label(&self, version: u32) -> Option<&str> {
        self.labels.get(&version).map(String::as_str)
    }

    /// Registry label, or [`OTHERS_LABEL`] for unnamed versions.
    pub fn label_or_others(&self, version: u32) -> &str {
        self.label(version).unwrap_or(OTHERS_LABEL)
    }

    pub fn insert(&mut self, version: u32, label: impl Into<String>) {
        self.labels.insert(version, label.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.labels.iter().map(|(v, l)| (*v, l.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_labels() {
        let reg = VersionRegistry::default();
        assert_eq!(reg.label(1), Some("QUICv1"));
        assert_eq!(reg.label(0xfaceb002), Some("Facebook mvfst 2"));
        assert_eq!(reg.label(0xff00001d), Some("draft-29"));
        assert_eq!(reg.label_or_others(0x1234_5678), OTHERS_LABEL);
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = VersionRegistry::parse("# c\n00000001 QUICv1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(VersionRegistry::parse("xyz\tfoo").is_err());
    }
}
