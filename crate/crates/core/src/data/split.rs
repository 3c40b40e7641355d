use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Source;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Left over when the requested counts do not use every sample.
    Unused,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unused => "unused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "unused" => Some(Split::Unused),
            _ => None,
        }
    }
}

/// Train on one source, test on the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossMode {
    /// Montgomery to Shenzhen.
    M2s,
    /// Shenzhen to Montgomery.
    S2m,
}

impl CrossMode {
    pub fn sources(self) -> (Source, Source) {
        match self {
            CrossMode::M2s => (Source::Montgomery, Source::Shenzhen),
            CrossMode::S2m => (Source::Shenzhen, Source::Montgomery),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: Source,
    pub split: Split,
}

/// Split assignment for every sample, plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn source_counts(&self) -> BTreeMap<Source, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.source).or_insert(0) += 1;
        }
        out
    }

    /// Tab-separated `id source split` lines after `#`-prefixed header
    /// lines holding the seed and metadata.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# seed={}", self.seed).unwrap();
        for (source, n) in self.source_counts() {
            writeln!(out, "# count.{source}={n}").unwrap();
        }
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}={v}").unwrap();
        }
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.id, e.source, e.split.as_str()).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut manifest = DatasetManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Config(format!("manifest line {}: {what}", lineno + 1));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let (k, v) = header.trim().split_once('=').ok_or_else(|| bad("expected key=value"))?;
                if k == "seed" {
                    manifest.seed = v.parse().map_err(|_| bad("bad seed"))?;
                } else if !k.starts_with("count.") {
                    manifest.metadata.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(id), Some(source), Some(split), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected three tab-separated fields"));
            };
            manifest.entries.push(ManifestEntry {
                id: id.to_string(),
                source: Source::parse(source).ok_or_else(|| bad("unknown source"))?,
                split: Split::parse(split).ok_or_else(|| bad("unknown split"))?,
            });
        }
        Ok(manifest)
    }
}

fn shuffled(items: &[(String, Source)], seed: u64) -> Vec<(String, Source)> {
    let mut order = items.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Seeded shuffle, then the first `train`, next `val` and next `test`
/// samples; anything left is marked unused.
pub fn split_dataset(items: &[(String, Source)], counts: (usize, usize, usize), seed: u64) -> Result<DatasetManifest> {
    let (train, val, test) = counts;
    let requested = train + val + test;
    if requested > items.len() {
        return Err(Error::InsufficientSamples {
            requested,
            available: items.len(),
        });
    }
    let entries = shuffled(items, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (id, source))| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else if i < requested {
                Split::Test
            } else {
                Split::Unused
            };
            ManifestEntry { id, source, split }
        })
        .collect();
    Ok(DatasetManifest {
        seed,
        entries,
        metadata: BTreeMap::new(),
    })
}

/// Every sample of the training source goes to train or val (the first
/// `round(val_fraction * n)` after a seeded shuffle are val); every sample
/// of the other source is test.
pub fn split_cross(
    items: &[(String, Source)],
    mode: CrossMode,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val fraction {val_fraction} must be in [0, 1)")));
    }
    let (train_src, test_src) = mode.sources();
    let pool: Vec<_> = items.iter().filter(|(_, s)| *s == train_src).cloned().collect();
    let test: Vec<_> = items.iter().filter(|(_, s)| *s == test_src).cloned().collect();
    if pool.is_empty() || test.is_empty() {
        return Err(Error::InsufficientSamples {
            requested: 1,
            available: pool.len().min(test.len()),
        });
    }
    let n_val = (val_fraction * pool.len() as f64).round() as usize;
    let mut entries: Vec<ManifestEntry> = shuffled(&pool, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (id, source))| ManifestEntry {
            id,
            source,
            split: if i < n_val { Split::Val } else { Split::Train },
        })
        .collect();
    let mut test = test;
    test.sort();
    entries.extend(test.into_iter().map(|(id, source)| ManifestEntry {
        id,
        source,
        split: Split::Test,
    }));
    let mut metadata = BTreeMap::new();
    metadata.insert("cross".to_string(), format!("{train_src}->{test_src}"));
    Ok(DatasetManifest {
        seed,
        entries,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<(String, Source)> {
        (0..n).map(|i| (format!("s{i:03}"), Source::Synthetic)).collect()
    }

    #[test]
    fn leftovers_are_unused() {
        let m = split_dataset(&items(10), (5, 2, 1), 3).unwrap();
        assert_eq!(m.count(Split::Unused), 2);
        assert_eq!(m.entries.len(), 10);
    }

    #[test]
    fn too_many_requested() {
        assert!(matches!(
            split_dataset(&items(3), (2, 1, 1), 0),
            Err(Error::InsufficientSamples {
                requested: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut m = split_dataset(&items(6), (3, 2, 1), 9).unwrap();
        m.metadata.insert("normal".into(), "359".into());
        assert_eq!(DatasetManifest::from_text(&m.to_text()).unwrap(), m);
    }
}
