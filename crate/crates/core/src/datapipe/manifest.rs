//! Dataset manifests and the sampling, pooling and splitting steps that build them.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::IoContext;
use crate::{Error, Result};

/// Ground-truth class `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn z(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn from_z(z: u8) -> Option<Self> {
        match z {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            _ => None,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.z())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let z = u8::deserialize(d)?;
        Label::from_z(z).ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {z}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calibration, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub frame_id: String,
    pub path: PathBuf,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub provenance: String,
}

impl ManifestItem {
    pub fn new(frame_id: impl Into<String>, path: impl Into<PathBuf>, label: Label) -> Self {
        Self {
            frame_id: frame_id.into(),
            path: path.into(),
            label,
            split: None,
            position_m: None,
            mask_path: None,
            provenance: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// `(normal, anomalous)` parts of the declared ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance_ratio: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_step: Option<u32>,
    pub normal_count: usize,
    pub anomalous_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_plan: Option<SamplingPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    sampling_plan: Option<SamplingPlan>,
    seed: Option<u64>,
    provenance: Vec<String>,
    items: usize,
}

impl DatasetManifest {
    /// `(normal, anomalous)`.
    pub fn counts(&self) -> (usize, usize) {
        let a = self.items.iter().filter(|i| i.label.is_anomalous()).count();
        (self.items.len() - a, a)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == Some(split))
    }

    /// `(normal, anomalous)` within one split.
    pub fn split_counts(&self, split: Split) -> (usize, usize) {
        let (mut n, mut a) = (0, 0);
        for i in self.split(split) {
            if i.label.is_anomalous() {
                a += 1;
            } else {
                n += 1;
            }
        }
        (n, a)
    }

    /// Check the class counts against the sampling plan and that ids are unique.
    pub fn verify(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for i in &self.items {
            if !seen.insert(i.frame_id.as_str()) {
                return Err(Error::DuplicateFrame(i.frame_id.clone()));
            }
        }
        if let Some(plan) = &self.sampling_plan {
            let (n, a) = self.counts();
            if (n, a) != (plan.normal_count, plan.anomalous_count) {
                return Err(Error::Precondition(format!(
                    "manifest holds ({n}, {a}) but the plan declares ({}, {})",
                    plan.normal_count, plan.anomalous_count
                )));
            }
        }
        Ok(())
    }

    /// One JSON header line followed by one line per item.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            sampling_plan: self.sampling_plan.clone(),
            seed: self.seed,
            provenance: self.provenance.clone(),
            items: self.items.len(),
        };
        let io = |e: std::io::Error| Error::Io {
            path: PathBuf::from("<manifest>"),
            source: e,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
        for item in &self.items {
            writeln!(w, "{}", serde_json::to_string(item)?).map_err(io)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// Hash of the manifest with file locations left out, so a dataset keeps
    /// its digest when moved.
    pub fn digest(&self) -> String {
        let mut m = self.clone();
        for i in &mut m.items {
            i.path = PathBuf::new();
            i.mask_path = None;
        }
        hex::encode(Sha256::digest(m.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).at(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?
            .at(path)?;
        let header: Header = serde_json::from_str(&first)?;
        let mut items = Vec::with_capacity(header.items);
        for line in lines {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(&line)?);
        }
        if items.len() != header.items {
            return Err(Error::Config(format!(
                "{} declares {} items but holds {}",
                path.display(),
                header.items,
                items.len()
            )));
        }
        Ok(Self {
            items,
            sampling_plan: header.sampling_plan,
            seed: header.seed,
            provenance: header.provenance,
        })
    }

    /// Resolve relative item paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for i in &mut self.items {
            if i.path.is_relative() {
                i.path = base.join(&i.path);
            }
            if let Some(m) = &mut i.mask_path {
                if m.is_relative() {
                    *m = base.join(&*m);
                }
            }
        }
    }
}

fn draw(pool: &[ManifestItem], count: usize, class: &'static str, rng: &mut ChaCha8Rng) -> Result<Vec<ManifestItem>> {
    if count > pool.len() {
        return Err(Error::InsufficientPool {
            class,
            requested: count,
            available: pool.len(),
        });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    let mut picked: Vec<usize> = idx[..count].to_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

fn check_pool_labels(normal: &[ManifestItem], anomalous: &[ManifestItem]) -> Result<()> {
    if normal.iter().any(|i| i.label != Label::Normal) || anomalous.iter().any(|i| i.label != Label::Anomalous) {
        return Err(Error::Precondition("pool items carry the wrong label".into()));
    }
    Ok(())
}

/// Settings of the imbalance grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceDesign {
    /// Normal images per unit of the ratio.
    pub normal_unit: usize,
    /// Anomalous images to draw; the whole pool when absent.
    pub anomalous_count: Option<usize>,
}

impl Default for ImbalanceDesign {
    fn default() -> Self {
        Self {
            normal_unit: 800,
            anomalous_count: None,
        }
    }
}

/// `k·normal_unit` normals against the anomalous pool (or a requested count).
pub fn sample_imbalanced(
    normal: &[ManifestItem],
    anomalous: &[ManifestItem],
    k: u32,
    design: ImbalanceDesign,
    seed: u64,
) -> Result<DatasetManifest> {
    if k == 0 {
        return Err(Error::Precondition("imbalance ratio must be at least 1".into()));
    }
    check_pool_labels(normal, anomalous)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k as usize * design.normal_unit;
    let a = design.anomalous_count.unwrap_or(anomalous.len());
    let mut items = draw(normal, n, "normal", &mut rng)?;
    items.extend(draw(anomalous, a, "anomalous", &mut rng)?);
    Ok(DatasetManifest {
        items,
        sampling_plan: Some(SamplingPlan {
            imbalance_ratio: Some((k, 1)),
            scale_step: None,
            normal_count: n,
            anomalous_count: a,
        }),
        seed: Some(seed),
        provenance: vec![format!("imbalanced {k}:1, {} normals per unit", design.normal_unit)],
    })
}

/// Settings of the scale grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDesign {
    pub normal_unit: usize,
    pub anomalous_unit: usize,
}

impl Default for ScaleDesign {
    fn default() -> Self {
        Self {
            normal_unit: 2000,
            anomalous_unit: 1000,
        }
    }
}

/// `(normal_unit·s, anomalous_unit·s)` drawn from the pools.
pub fn sample_scaled(
    normal: &[ManifestItem],
    anomalous: &[ManifestItem],
    step: u32,
    design: ScaleDesign,
    seed: u64,
) -> Result<DatasetManifest> {
    if step == 0 {
        return Err(Error::Precondition("scale step must be at least 1".into()));
    }
    check_pool_labels(normal, anomalous)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = design.normal_unit * step as usize;
    let a = design.anomalous_unit * step as usize;
    let mut items = draw(normal, n, "normal", &mut rng)?;
    items.extend(draw(anomalous, a, "anomalous", &mut rng)?);
    Ok(DatasetManifest {
        items,
        sampling_plan: Some(SamplingPlan {
            imbalance_ratio: Some((design.normal_unit as u32, design.anomalous_unit as u32)),
            scale_step: Some(step),
            normal_count: n,
            anomalous_count: a,
        }),
        seed: Some(seed),
        provenance: vec![format!("scale step {step}")],
    })
}

/// Union of disjoint manifests. Item provenance records the source manifest.
pub fn pool_datasets(manifests: &[DatasetManifest]) -> Result<DatasetManifest> {
    if manifests.len() == 1 {
        return Ok(manifests[0].clone());
    }
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    let mut provenance = Vec::new();
    for (mi, m) in manifests.iter().enumerate() {
        let source = if m.provenance.is_empty() {
            format!("manifest {mi}")
        } else {
            m.provenance.join("; ")
        };
        for item in &m.items {
            if !seen.insert(item.frame_id.clone()) {
                return Err(Error::DuplicateFrame(item.frame_id.clone()));
            }
            let mut item = item.clone();
            item.provenance = if item.provenance.is_empty() {
                source.clone()
            } else {
                format!("{}; {source}", item.provenance)
            };
            items.push(item);
        }
        provenance.push(format!("pooled from: {source}"));
    }
    let mut pooled = DatasetManifest {
        items,
        sampling_plan: None,
        seed: None,
        provenance,
    };
    let (n, a) = pooled.counts();
    pooled.sampling_plan = Some(SamplingPlan {
        imbalance_ratio: None,
        scale_step: None,
        normal_count: n,
        anomalous_count: a,
    });
    Ok(pooled)
}

/// Split sizes for `n` items by largest-remainder rounding. Ties in the
/// fractional part go to the earlier split.
pub fn largest_remainder(n: usize, ratio: [u32; 3]) -> Result<[usize; 3]> {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return Err(Error::Precondition("split ratio must have a positive part".into()));
    }
    let mut sizes = [0usize; 3];
    let mut rems = [(0u64, 0usize); 3];
    for (i, &r) in ratio.iter().enumerate() {
        let exact = n as u64 * r as u64;
        sizes[i] = (exact / total) as usize;
        rems[i] = (exact % total, i);
    }
    let mut left = n - sizes.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Stratified train/calibration/test assignment.
pub fn split_manifest(manifest: &DatasetManifest, ratio: [u32; 3], seed: u64) -> Result<DatasetManifest> {
    if manifest.items.is_empty() {
        return Err(Error::Precondition("cannot split an empty manifest".into()));
    }
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in [Label::Normal, Label::Anomalous] {
        let mut idx: Vec<usize> = (0..out.items.len()).filter(|&i| out.items[i].label == label).collect();
        idx.shuffle(&mut rng);
        let sizes = largest_remainder(idx.len(), ratio)?;
        let mut it = idx.into_iter();
        for (split, size) in Split::ALL.into_iter().zip(sizes) {
            for i in it.by_ref().take(size) {
                out.items[i].split = Some(split);
            }
        }
    }
    out.seed = out.seed.or(Some(seed));
    out.provenance.push(format!("split {}:{}:{} seed {seed}", ratio[0], ratio[1], ratio[2]));
    Ok(out)
}

/// Items with synthetic ids, for exercising the sampling arithmetic.
pub fn placeholder_pool(prefix: &str, count: usize, label: Label) -> Vec<ManifestItem> {
    (0..count)
        .map(|i| ManifestItem::new(format!("{prefix}/{i:05}"), format!("{prefix}/{i:05}.png"), label))
        .collect()
}
