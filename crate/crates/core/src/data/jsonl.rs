//! JSONL dataset files, one ROI record per line.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_bags, Dataset, ImageGroup, Instance, NoiseFlag, RoiKind, TestImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub kind: RoiKind,
    pub parent: Option<String>,
    pub label: usize,
    pub area: Option<f64>,
    pub feature: Vec<f64>,
    pub bbox: Option<[f64; 4]>,
}

impl From<(&Instance, usize)> for Record {
    fn from((inst, label): (&Instance, usize)) -> Self {
        Record {
            id: inst.id.clone(),
            kind: inst.kind,
            parent: inst.parent.clone(),
            label,
            area: inst.area,
            feature: inst.feature.clone(),
            bbox: inst.bbox,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub n_g: usize,
    /// Proposal count per image. `None` uses the largest count in the file.
    pub n_p: Option<usize>,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            n_g: 2,
            n_p: None,
            seed: 0,
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, Record)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec_err = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| rec_err(e.to_string()))?;
        if rec.feature.is_empty() {
            return Err(rec_err("empty feature".into()));
        }
        if rec.feature.iter().any(|x| !x.is_finite()) {
            return Err(rec_err("non-finite feature entry".into()));
        }
        match dim {
            None => dim = Some(rec.feature.len()),
            Some(d) if d != rec.feature.len() => {
                return Err(rec_err(format!(
                    "feature length {} differs from {d}",
                    rec.feature.len()
                )))
            }
            _ => {}
        }
        if rec.kind == RoiKind::Proposal {
            if rec.parent.is_none() {
                return Err(rec_err("proposal without parent".into()));
            }
            match rec.area {
                Some(a) if a >= 0.0 && a.is_finite() => {}
                _ => return Err(rec_err("proposal needs a nonnegative area".into())),
            }
        }
        out.push((line_no, rec));
    }
    if out.is_empty() {
        return Err(Error::NoRecords {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

fn to_instance(rec: Record) -> Instance {
    Instance {
        id: rec.id,
        feature: rec.feature,
        kind: rec.kind,
        area: rec.area,
        parent: rec.parent,
        noise: None,
        bbox: rec.bbox,
    }
}

/// Reads a training file and groups proposals under their images.
pub fn ingest_jsonl(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let records = read_records(path)?;
    let feature_dim = records[0].1.feature.len();

    let mut groups: Vec<ImageGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, rec) in &records {
        if rec.kind == RoiKind::Image {
            if index.contains_key(&rec.id) {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("duplicate image id {}", rec.id),
                });
            }
            index.insert(rec.id.clone(), groups.len());
            groups.push(ImageGroup {
                label: rec.label,
                image: to_instance(rec.clone()),
                proposals: Vec::new(),
            });
        }
    }
    for (line, rec) in records {
        if rec.kind != RoiKind::Proposal {
            continue;
        }
        let parent = rec.parent.clone().unwrap_or_default();
        let Some(&g) = index.get(&parent) else {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line,
                msg: format!("proposal {} references unknown image {parent}", rec.id),
            });
        };
        if groups[g].label != rec.label {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line,
                msg: format!(
                    "proposal label {} differs from image label {}",
                    rec.label, groups[g].label
                ),
            });
        }
        groups[g].proposals.push(to_instance(rec));
    }

    let num_classes = groups.iter().map(|g| g.label).max().unwrap_or(0) + 1;
    let n_p = opts
        .n_p
        .unwrap_or_else(|| groups.iter().map(|g| g.proposals.len()).max().unwrap_or(0));
    let bags = build_bags(&groups, num_classes, opts.n_g, n_p, opts.seed)?;
    let ds = Dataset {
        groups,
        bags,
        test_images: Vec::new(),
        num_classes,
        feature_dim,
        n_g: opts.n_g,
        n_p,
        metadata: serde_json::json!({
            "source": path.display().to_string(),
            "sha256": records_digest(path)?,
        }),
    };
    ds.check()?;
    Ok(ds)
}

fn records_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Reads a test split: image records only.
pub fn ingest_test_jsonl(path: impl AsRef<Path>) -> Result<Vec<TestImage>> {
    let path = path.as_ref();
    read_records(path)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.kind != RoiKind::Image {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line,
                    msg: "test split must contain images only".into(),
                });
            }
            Ok(TestImage {
                id: rec.id,
                feature: rec.feature,
                label: rec.label,
            })
        })
        .collect()
}

/// Writes records as JSONL.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = T>) -> Result<usize> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let mut n = 0;
    for row in rows {
        serde_json::to_writer(&mut buf, &row).map_err(|e| Error::json(path.display().to_string(), e))?;
        buf.push(b'\n');
        n += 1;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(n)
}

impl Dataset {
    /// Training records, images followed by their proposals.
    pub fn train_records(&self) -> impl Iterator<Item = Record> + '_ {
        self.groups
            .iter()
            .flat_map(|g| g.instances().map(move |i| Record::from((i, g.label))))
    }

    pub fn test_records(&self) -> impl Iterator<Item = Record> + '_ {
        self.test_images.iter().map(|t| Record {
            id: t.id.clone(),
            kind: RoiKind::Image,
            parent: None,
            label: t.label,
            area: None,
            feature: t.feature.clone(),
            bbox: None,
        })
    }

    /// Ground-truth flags by instance id.
    pub fn noise_flags(&self) -> Vec<(String, NoiseFlag)> {
        self.groups
            .iter()
            .flat_map(|g| g.instances())
            .filter_map(|i| i.noise.map(|f| (i.id.clone(), f)))
            .collect()
    }

    /// Attaches ground-truth flags (e.g. from a generator's flag file).
    pub fn attach_flags(&mut self, flags: &HashMap<String, NoiseFlag>) {
        let set = |i: &mut Instance| {
            if let Some(f) = flags.get(&i.id) {
                i.noise = Some(*f);
            }
        };
        for g in &mut self.groups {
            set(&mut g.image);
            g.proposals.iter_mut().for_each(set);
        }
        for b in &mut self.bags {
            b.instances.iter_mut().for_each(set);
        }
    }
}
