//! Resolves the configured data source into split sample sets.
//!
//! Real data is read from a directory laid out as
//!
//! ```text
//! <root>/montgomery/images/<name>.png
//! <root>/montgomery/masks/left/<name>.png
//! <root>/montgomery/masks/right/<name>.png
//! <root>/shenzhen/images/<name>.png
//! <root>/shenzhen/masks/<name>_mask.png   (or <name>.png)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use defunet::data::{
    dilate_mask, load_sample, split_cross, split_dataset, synth_dataset, DatasetManifest, Sample, Source, Split,
};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Prepared {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Unused => &[],
        }
    }
}

/// One discovered image with its mask files.
#[derive(Debug, Clone)]
pub struct Entry {
    pub id: String,
    pub source: Source,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let read = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in read {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Lists every image of both sources that has its mask files.
pub fn discover(root: &Path) -> Result<Vec<Entry>, CliError> {
    let mut entries = Vec::new();
    let mont = root.join("montgomery");
    if mont.is_dir() {
        for image in png_files(&mont.join("images"))? {
            let name = image.file_name().expect("file name").to_owned();
            let masks = vec![
                mont.join("masks/left").join(&name),
                mont.join("masks/right").join(&name),
            ];
            if masks.iter().all(|m| m.is_file()) {
                entries.push(Entry {
                    id: format!("montgomery/{}", stem(&image)),
                    source: Source::Montgomery,
                    image,
                    masks,
                });
            } else {
                log::warn!("skipping {}: left or right mask missing", image.display());
            }
        }
    }
    let shen = root.join("shenzhen");
    if shen.is_dir() {
        for image in png_files(&shen.join("images"))? {
            let s = stem(&image);
            let candidates = [
                shen.join("masks").join(format!("{s}_mask.png")),
                shen.join("masks").join(format!("{s}.png")),
            ];
            match candidates.into_iter().find(|m| m.is_file()) {
                Some(mask) => entries.push(Entry {
                    id: format!("shenzhen/{s}"),
                    source: Source::Shenzhen,
                    image,
                    masks: vec![mask],
                }),
                None => log::warn!("skipping {}: no mask", image.display()),
            }
        }
    }
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "no images with masks found under {}",
            root.display()
        )));
    }
    Ok(entries)
}

fn make_manifest(cfg: &RunConfig, items: &[(String, Source)]) -> Result<DatasetManifest, CliError> {
    let d = &cfg.data;
    let manifest = match d.cross {
        Some(mode) => split_cross(items, mode, d.cross_val_fraction, cfg.seed)?,
        None => split_dataset(items, (d.split[0], d.split[1], d.split[2]), cfg.seed)?,
    };
    Ok(manifest)
}

fn distribute(manifest: DatasetManifest, mut samples: BTreeMap<String, Sample>) -> Prepared {
    let mut prepared = Prepared {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        manifest,
    };
    for e in &prepared.manifest.entries {
        let Some(s) = samples.remove(&e.id) else { continue };
        match e.split {
            Split::Train => prepared.train.push(s),
            Split::Val => prepared.val.push(s),
            Split::Test => prepared.test.push(s),
            Split::Unused => {}
        }
    }
    prepared
}

/// Builds the manifest and loads every sample assigned to a split.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let d = &cfg.data;
    if d.synthetic {
        let samples = synth_dataset(d.synthetic_count, d.size, cfg.seed);
        let items: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.source)).collect();
        let manifest = make_manifest(cfg, &items)?;
        let by_id = samples.into_iter().map(|s| (s.id.clone(), s)).collect();
        return Ok(distribute(manifest, by_id));
    }
    let root = d
        .data_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("no data directory configured".into()))?;
    let entries = discover(root)?;
    let items: Vec<_> = entries.iter().map(|e| (e.id.clone(), e.source)).collect();
    let mut manifest = make_manifest(cfg, &items)?;
    manifest.metadata.insert("data_dir".into(), root.display().to_string());
    let wanted: BTreeMap<&str, Split> = manifest.entries.iter().map(|e| (e.id.as_str(), e.split)).collect();
    let mut samples = BTreeMap::new();
    for e in &entries {
        if wanted.get(e.id.as_str()).is_none_or(|s| *s == Split::Unused) {
            continue;
        }
        let masks: Vec<&Path> = e.masks.iter().map(PathBuf::as_path).collect();
        let mut s = load_sample(e.id.clone(), e.source, &e.image, &masks, (d.size, d.size))?;
        if d.dilate_iterations > 0 && d.dilate_radius > 0 {
            s.mask = dilate_mask(&s.mask, d.dilate_radius, d.dilate_iterations);
        }
        samples.insert(e.id.clone(), s);
    }
    Ok(distribute(manifest, samples))
}
