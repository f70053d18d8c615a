//! Annotated dataset manifests, the on-disk landmark table, split
//! construction and P x K identity batching.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::heatmap::LandmarkSet;
use crate::raster::Raster;
use crate::seed::Rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LANDMARKS_FILE: &str = "landmarks.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
    /// Held-out images of a real corpus before gallery/query assignment.
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Gallery, Split::Query, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Relative to the dataset root, `/`-separated.
    pub image_path: String,
    pub identity: String,
    /// Dense label; train identities occupy `0..n_train_identities`.
    pub label: usize,
    pub landmarks: LandmarkSet,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub landmark_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// `identity_index[label]` is the external identity.
    pub identity_index: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    k: usize,
    landmark_names: Vec<String>,
    identity_index: Vec<String>,
    splits: BTreeMap<Split, Vec<Sample>>,
    provenance: Provenance,
}

impl DatasetManifest {
    pub fn k(&self) -> usize {
        self.landmark_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_samples(&self, split: Split) -> Vec<Sample> {
        self.split(split).cloned().collect()
    }

    pub fn identities(&self, split: Split) -> HashSet<&str> {
        self.split(split).map(|s| s.identity.as_str()).collect()
    }

    pub fn n_train_classes(&self) -> usize {
        self.split(Split::Train).map(|s| s.label + 1).max().unwrap_or(0)
    }

    /// Samples in canonical split order (train, gallery, query, test), stable within a split.
    fn canonical_order(&mut self) {
        self.samples.sort_by_key(|s| s.split);
    }

    pub fn to_json(&self) -> Result<String> {
        let mut splits: BTreeMap<Split, Vec<Sample>> = BTreeMap::new();
        for s in &self.samples {
            splits.entry(s.split).or_default().push(s.clone());
        }
        let file = ManifestFile {
            k: self.k(),
            landmark_names: self.landmark_names.clone(),
            identity_index: self.identity_index.clone(),
            splits,
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text)?;
        if file.k != file.landmark_names.len() {
            return Err(Error::Shape(format!(
                "manifest k = {} but {} landmark names",
                file.k,
                file.landmark_names.len()
            )));
        }
        let samples = file.splits.into_values().flatten().collect();
        Ok(Self {
            landmark_names: file.landmark_names,
            samples,
            identity_index: file.identity_index,
            provenance: file.provenance,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Writes `manifest.json` and `landmarks.csv` into `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mpath = root.join(MANIFEST_FILE);
        fs::write(&mpath, self.to_json()?).map_err(|e| Error::io(&mpath, e))?;
        self.write_landmarks_csv(&root.join(LANDMARKS_FILE))
    }

    pub fn write_landmarks_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_path", "landmark_name", "x", "y", "visible"])?;
        for s in &self.samples {
            for i in 0..s.landmarks.k() {
                let p = s.landmarks.coords[i];
                w.write_record([
                    s.image_path.as_str(),
                    s.landmarks.names[i].as_str(),
                    &p.x.to_string(),
                    &p.y.to_string(),
                    if s.landmarks.visible[i] { "1" } else { "0" },
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// SHA-256 over the manifest JSON and the bytes of every referenced image.
    pub fn digest(&self, root: &Path) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_json()?.as_bytes());
        for s in &self.samples {
            let p = root.join(&s.image_path);
            h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    image_path: String,
    landmark_name: String,
    x: String,
    y: String,
    visible: String,
}

/// Parses `landmarks.csv` under `root` into a manifest. Split and identity come
/// from the `<split>/<identity>/<file>` layout; provenance is taken from an
/// adjacent `manifest.json` when one exists. All malformed rows are reported together.
pub fn load_annotations(root: &Path) -> Result<DatasetManifest> {
    let csv_path = root.join(LANDMARKS_FILE);
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let mut problems = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(String, Point2, bool)>> = HashMap::new();
    for (i, rec) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let visible = match row.visible.trim() {
            "1" => true,
            "0" => false,
            other => {
                problems.push(format!("line {line}: visible must be 0 or 1, got `{other}`"));
                continue;
            }
        };
        let x = row.x.trim().parse::<f64>();
        let y = row.y.trim().parse::<f64>();
        let p = match (x, y) {
            (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => Point2::new(x, y),
            _ if !visible => Point2::new(0.0, 0.0),
            _ => {
                problems.push(format!(
                    "line {line}: non-numeric coordinates ({}, {}) for `{}`",
                    row.x, row.y, row.landmark_name
                ));
                continue;
            }
        };
        let entry = rows.entry(row.image_path.clone()).or_insert_with(|| {
            order.push(row.image_path.clone());
            Vec::new()
        });
        if entry.iter().any(|(n, _, _)| *n == row.landmark_name) {
            problems.push(format!(
                "line {line}: duplicate landmark `{}` for {}",
                row.landmark_name, row.image_path
            ));
            continue;
        }
        entry.push((row.landmark_name, p, visible));
    }

    let names: Vec<String> = order
        .first()
        .map(|first| rows[first].iter().map(|r| r.0.clone()).collect())
        .unwrap_or_default();
    let mut parsed = Vec::new();
    for path in &order {
        let lm = &rows[path];
        let these: Vec<&str> = lm.iter().map(|r| r.0.as_str()).collect();
        if these != names.iter().map(String::as_str).collect::<Vec<_>>() {
            problems.push(format!("{path}: landmarks {these:?} differ from {names:?}"));
            continue;
        }
        if !root.join(path).is_file() {
            problems.push(format!("{path}: image file missing"));
            continue;
        }
        let parts: Vec<&str> = path.split('/').collect();
        let split = match parts.as_slice() {
            [s, _, _] => Split::parse(s),
            _ => None,
        };
        let Some(split) = split else {
            problems.push(format!("{path}: expected <split>/<identity>/<file> layout"));
            continue;
        };
        let landmarks = LandmarkSet {
            names: names.clone(),
            coords: lm.iter().map(|r| r.1).collect(),
            visible: lm.iter().map(|r| r.2).collect(),
        };
        parsed.push((path.clone(), parts[1].to_string(), split, landmarks));
    }
    if !problems.is_empty() {
        return Err(Error::Annotations(problems));
    }

    let provenance = match fs::read_to_string(root.join(MANIFEST_FILE)) {
        Ok(text) => DatasetManifest::from_json(&text)?.provenance,
        Err(_) => Provenance::default(),
    };
    let mut manifest = DatasetManifest {
        landmark_names: names,
        samples: Vec::new(),
        identity_index: Vec::new(),
        provenance,
    };
    parsed.sort_by_key(|p| p.2);
    let mut labels: HashMap<String, usize> = HashMap::new();
    for (image_path, identity, split, landmarks) in parsed {
        let next = labels.len();
        let label = *labels.entry(identity.clone()).or_insert_with(|| {
            manifest.identity_index.push(identity.clone());
            next
        });
        manifest.samples.push(Sample {
            image_path,
            identity,
            label,
            landmarks,
            split,
        });
    }
    Ok(manifest)
}

/// Builds the gallery from every training image plus `per_id_gallery` random
/// images of each test identity; the remaining test images become queries.
pub fn build_real_splits(
    manifest: &DatasetManifest,
    per_id_gallery: usize,
    rng: &mut Rng,
) -> Result<DatasetManifest> {
    let mut by_id: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in manifest.split(Split::Test) {
        by_id.entry(s.identity.as_str()).or_default().push(s);
    }
    if let Some((id, v)) = by_id.iter().find(|(_, v)| v.len() <= per_id_gallery) {
        return Err(Error::Split(format!(
            "test identity `{id}` has {} images; need more than {per_id_gallery}",
            v.len()
        )));
    }
    let mut out = DatasetManifest {
        samples: Vec::new(),
        ..manifest.clone()
    };
    let train: Vec<Sample> = manifest.split_samples(Split::Train);
    out.samples.extend(train.iter().cloned());
    out.samples.extend(train.into_iter().map(|s| Sample {
        split: Split::Gallery,
        ..s
    }));
    let mut query = Vec::new();
    for (_, mut imgs) in by_id {
        imgs.shuffle(rng);
        let (gal, qry) = imgs.split_at(per_id_gallery);
        let mut gal: Vec<&Sample> = gal.to_vec();
        gal.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        out.samples.extend(gal.into_iter().map(|s| Sample {
            split: Split::Gallery,
            ..s.clone()
        }));
        query.extend(qry.iter().map(|s| Sample {
            split: Split::Query,
            ..(*s).clone()
        }));
    }
    query.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    out.samples.extend(query);
    out.canonical_order();
    Ok(out)
}

/// Serves batches of exactly `p` distinct identities with `k` images each.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `labels[i]` is the identity label of item `i`.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Sampler(format!("K must be at least 2, got {k}")));
        }
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        if p < 2 || p > by_label.len() {
            return Err(Error::Sampler(format!(
                "P = {p} needs 2..={} identities",
                by_label.len()
            )));
        }
        if p * k > labels.len() {
            return Err(Error::Sampler(format!(
                "P*K = {} exceeds dataset size {}",
                p * k,
                labels.len()
            )));
        }
        Ok(Self {
            groups: by_label.into_values().collect(),
            p,
            k,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len().div_ceil(self.p)
    }

    fn draw(&self, group: &[usize], rng: &mut Rng, out: &mut Vec<usize>) {
        if group.len() >= self.k {
            out.extend(group.choose_multiple(rng, self.k).copied());
        } else {
            let mut picked = group.to_vec();
            picked.shuffle(rng);
            while picked.len() < self.k {
                picked.push(*group.choose(rng).expect("non-empty group"));
            }
            out.extend(picked);
        }
    }

    /// One pass over all identities; the last batch is topped up with other identities.
    pub fn epoch(&self, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut ids: Vec<usize> = (0..self.groups.len()).collect();
        ids.shuffle(rng);
        ids.chunks(self.p)
            .map(|chunk| {
                let mut chosen = chunk.to_vec();
                if chosen.len() < self.p {
                    let mut rest: Vec<usize> = (0..self.groups.len()).filter(|g| !chosen.contains(g)).collect();
                    rest.shuffle(rng);
                    chosen.extend(rest.into_iter().take(self.p - chunk.len()));
                }
                let mut batch = Vec::with_capacity(self.batch_size());
                for g in chosen {
                    self.draw(&self.groups[g], rng, &mut batch);
                }
                batch
            })
            .collect()
    }
}

/// A sample with its image decoded to three planes in [0, 255].
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: Sample,
    pub image: Raster,
}

/// Decodes images (grayscale is replicated to three planes) and resizes to `size`.
pub fn load_images(root: &Path, samples: &[Sample], size: usize) -> Result<Vec<LoadedSample>> {
    samples
        .iter()
        .map(|s| {
            let path: PathBuf = root.join(&s.image_path);
            let img = Raster::load(&path, 3)?;
            let (w, h) = (img.width, img.height);
            let image = img.resize(size, size);
            let mut sample = s.clone();
            if w != size || h != size {
                let fx = size as f64 / w as f64;
                let fy = size as f64 / h as f64;
                sample.landmarks.coords.iter_mut().for_each(|p| {
                    p.x = (p.x + 0.5) * fx - 0.5;
                    p.y = (p.y + 0.5) * fy - 0.5;
                });
            }
            Ok(LoadedSample { sample, image })
        })
        .collect()
}
