//! Flat `key = value` text files with a leading `version` key.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const KV_VERSION: u32 = 1;

/// Parsed entries. Keys are consumed with [`KvFile::take`]; anything left
/// over after the caller is done is reported by [`KvFile::finish`].
pub struct KvFile {
    origin: String,
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut saw_version = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::corrupt(origin, format!("line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !saw_version {
                if k != "version" {
                    return Err(Error::corrupt(origin, "first key must be version"));
                }
                if v.parse::<u32>().ok() != Some(KV_VERSION) {
                    return Err(Error::corrupt(origin, format!("unsupported version {v}")));
                }
                saw_version = true;
                continue;
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::corrupt(origin, format!("duplicate key {k}")));
            }
        }
        if !saw_version {
            return Err(Error::corrupt(origin, "missing version key"));
        }
        Ok(Self {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Removes and parses `key`, leaving `slot` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::invalid(format!("{}: bad value {v:?} for {key}", self.origin)))?;
        }
        Ok(())
    }

    /// Removes every key under `prefix.`, returned with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).unwrap_or_default();
                (k[dotted.len()..].to_string(), v)
            })
            .collect()
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::invalid(format!("{}: unknown key {k}", self.origin))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let mut f = KvFile::parse("version = 1\n# note\na = 3\nb=x\n", "t").unwrap();
        let mut a = 0u32;
        f.take("a", &mut a).unwrap();
        assert_eq!(a, 3);
        assert_eq!(f.take_str("b").as_deref(), Some("x"));
        let mut f2 = KvFile::parse("version = 1\np.x = 1\np.y = 2\npq = 3\n", "t").unwrap();
        assert_eq!(f2.take_prefixed("p"), vec![("x".into(), "1".into()), ("y".into(), "2".into())]);
        assert!(f2.finish().is_err());
        f.finish().unwrap();
        assert!(KvFile::parse("a = 1\n", "t").is_err());
        assert!(KvFile::parse("version = 2\n", "t").is_err());
        assert!(KvFile::parse("version = 1\na = 1\na = 2\n", "t").is_err());
        let mut f = KvFile::parse("version = 1\nzz = 1\n", "t").unwrap();
        let mut a = 0u32;
        f.take("a", &mut a).unwrap();
        assert!(f.finish().is_err());
    }
}
