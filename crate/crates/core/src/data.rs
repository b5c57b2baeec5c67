//! Synthetic cohort generators, stratified splitting/sampling, and on-disk
//! dataset persistence.
//!
//! Two families of data:
//!
//! * **Multimodal cohorts** — per subject a 3-D volume plus a mixed tabular
//!   record (continuous columns with missingness, categorical columns) and a
//!   class label. A coupling coefficient `kappa` controls how strongly both
//!   modalities reflect the label: volumes interpolate between a shared
//!   template and a class template, tabular columns interpolate between
//!   class-free and class-conditional distributions.
//! * **Tabular-only benchmarks** — Gaussian-mixture feature matrices where
//!   only a subset of columns carries class signal and the rest are pure
//!   noise, which is exactly the regime where a learned input transform can
//!   outperform a fixed per-column one.

use crate::CoreError;
use pdx_tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// Multimodal cohorts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultimodalSpec {
    pub n: usize,
    pub classes: usize,
    /// Volume side length (volumes are cubes).
    pub vol_side: usize,
    pub cont_cols: usize,
    /// Cardinality per categorical column.
    pub cat_cards: Vec<usize>,
    /// Label coupling in [0, 1]: 0 = modalities carry no class signal.
    pub coupling: f64,
    /// Per-cell missingness rate for continuous columns.
    pub missing_rate: f64,
}

impl Default for MultimodalSpec {
    fn default() -> Self {
        Self {
            n: 600,
            classes: 3,
            vol_side: 32,
            cont_cols: 14,
            cat_cards: (0..6).map(|i| 2 + (i % 4)).collect(),
            coupling: 0.8,
            missing_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultimodalDataset {
    pub spec: MultimodalSpec,
    /// One flattened `side³` volume per subject.
    pub volumes: Vec<Vec<f32>>,
    /// `[n, cont_cols]`, zeros at missing cells (see `missing`).
    pub continuous: Tensor,
    pub missing: Vec<Vec<bool>>,
    /// `[n][cat_cols]` category indices.
    pub categorical: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

/// Smooth random volume template: a handful of low-frequency cosine modes,
/// normalized to zero mean and unit RMS.
fn cosine_template(side: usize, rng: &mut SeededRng) -> Vec<f32> {
    let modes: Vec<([i32; 3], f64, f64)> = (0..5)
        .map(|_| {
            let mut k = [0i32; 3];
            loop {
                for a in k.iter_mut() {
                    *a = rng.below(4) as i32; // spatial frequencies 0..3
                }
                if k.iter().any(|&a| a != 0) {
                    break;
                }
            }
            (k, rng.normal(), rng.uniform() * std::f64::consts::TAU)
        })
        .collect();

    let mut field = vec![0.0f64; side * side * side];
    let scale = std::f64::consts::TAU / side as f64;
    let mut idx = 0;
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0;
                for &(k, amp, phase) in &modes {
                    let arg = scale * (k[0] as f64 * x as f64 + k[1] as f64 * y as f64 + k[2] as f64 * z as f64);
                    v += amp * (arg + phase).cos();
                }
                field[idx] = v;
                idx += 1;
            }
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let rms = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64).sqrt();
    field.iter().map(|&v| ((v - mean) / rms.max(1e-12)) as f32).collect()
}

pub fn generate_multimodal(spec: &MultimodalSpec, rng: &mut SeededRng) -> MultimodalDataset {
    assert!(spec.classes >= 2, "need at least two classes");
    assert!((0.0..=1.0).contains(&spec.coupling), "coupling must be in [0, 1]");
    let n = spec.n;
    let voxels = spec.vol_side.pow(3);
    let kappa = spec.coupling;

    // Balanced labels, shuffled.
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng.split(0).shuffle(&mut labels);

    // Volume templates: one shared + one per class.
    let mut tpl_rng = rng.split(1);
    let shared = cosine_template(spec.vol_side, &mut tpl_rng);
    let class_templates: Vec<Vec<f32>> =
        (0..spec.classes).map(|_| cosine_template(spec.vol_side, &mut tpl_rng)).collect();

    let mut vol_rng = rng.split(2);
    let volumes: Vec<Vec<f32>> = labels
        .iter()
        .map(|&y| {
            let tpl = &class_templates[y];
            (0..voxels)
                .map(|v| {
                    let signal = kappa * tpl[v] as f64 + (1.0 - kappa) * shared[v] as f64;
                    (signal + 0.5 * vol_rng.normal()) as f32
                })
                .collect()
        })
        .collect();

    // Continuous columns: class-conditional means scaled by coupling.
    let mut tab_rng = rng.split(3);
    let cont_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.cont_cols).map(|_| tab_rng.normal()).collect())
        .collect();
    let mut continuous = Tensor::zeros(vec![n, spec.cont_cols]);
    let mut missing = vec![vec![false; spec.cont_cols]; n];
    for i in 0..n {
        for j in 0..spec.cont_cols {
            if tab_rng.uniform() < spec.missing_rate {
                missing[i][j] = true;
            } else {
                continuous.set2(i, j, kappa * cont_means[labels[i]][j] + tab_rng.normal());
            }
        }
    }

    // Categorical columns: mixture of uniform and a class-preferred category.
    let mut cat_rng = rng.split(4);
    let preferred: Vec<Vec<usize>> = (0..spec.classes)
        .map(|_| spec.cat_cards.iter().map(|&card| cat_rng.below(card)).collect())
        .collect();
    let categorical: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            spec.cat_cards
                .iter()
                .enumerate()
                .map(|(j, &card)| {
                    if cat_rng.uniform() < kappa {
                        preferred[labels[i]][j]
                    } else {
                        cat_rng.below(card)
                    }
                })
                .collect()
        })
        .collect();

    MultimodalDataset { spec: spec.clone(), volumes, continuous, missing, categorical, labels }
}

// ---------------------------------------------------------------------------
// Tabular benchmarks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularSpec {
    pub n: usize,
    /// Context size used at inference time by in-context methods.
    pub context_size: usize,
    pub features: usize,
    /// Number of leading columns that carry class signal; the rest are noise.
    pub informative: usize,
    pub classes: usize,
    /// Scale of class-mean offsets in the informative block.
    pub separation: f64,
}

impl Default for TabularSpec {
    fn default() -> Self {
        s1_analog()
    }
}

/// Wide benchmark: many features, few informative, five classes.
pub fn s1_analog() -> TabularSpec {
    TabularSpec { n: 2000, context_size: 400, features: 100, informative: 12, classes: 5, separation: 1.1 }
}

/// Narrow benchmark: fewer features, ten classes.
pub fn s2_analog() -> TabularSpec {
    TabularSpec { n: 5000, context_size: 800, features: 32, informative: 8, classes: 10, separation: 1.4 }
}

#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub spec: TabularSpec,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

pub fn generate_tabular(spec: &TabularSpec, rng: &mut SeededRng) -> TabularDataset {
    assert!(spec.informative <= spec.features, "informative block exceeds feature count");
    assert!(spec.classes >= 2);
    let n = spec.n;
    let k = spec.informative;

    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng.split(0).shuffle(&mut labels);

    let mut mean_rng = rng.split(1);
    let class_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..k).map(|_| spec.separation * mean_rng.normal()).collect())
        .collect();

    // Mild mixing inside the informative block spreads signal across its
    // columns; noise columns stay pure noise.
    let mix: Vec<f64> = (0..k * k)
        .map(|idx| {
            let (r, c) = (idx / k, idx % k);
            if r == c { 1.0 } else { 0.3 * mean_rng.normal() / (k as f64).sqrt() }
        })
        .collect();

    let mut x_rng = rng.split(2);
    let mut x = Tensor::zeros(vec![n, spec.features]);
    let mut buf = vec![0.0f64; k];
    for i in 0..n {
        let mu = &class_means[labels[i]];
        for (j, b) in buf.iter_mut().enumerate() {
            *b = mu[j] + x_rng.normal();
        }
        for j in 0..k {
            let mut v = 0.0;
            for (p, &b) in buf.iter().enumerate() {
                v += mix[j * k + p] * b;
            }
            x.set2(i, j, v);
        }
        for j in k..spec.features {
            x.set2(i, j, x_rng.normal());
        }
    }
    TabularDataset { spec: spec.clone(), x, labels }
}

// ---------------------------------------------------------------------------
// Stratified splitting and sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 70/15/15 stratified split. Every class must land at least one member in
/// each part, so classes with fewer than 3 members are an error.
pub fn stratified_split(labels: &[usize], rng: &mut SeededRng) -> Result<Splits, CoreError> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut splits = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (class, mut members) in per_class.into_iter().enumerate() {
        let m = members.len();
        if m == 0 {
            continue;
        }
        if m < 3 {
            return Err(CoreError::ClassTooSmall { class, count: m });
        }
        rng.shuffle(&mut members);
        let mut n_train = (0.70 * m as f64).round() as usize;
        let mut n_val = (0.15 * m as f64).round() as usize;
        n_val = n_val.max(1);
        // Keep at least one member for test (and one for train).
        while n_train + n_val > m - 1 {
            if n_train > 1 {
                n_train -= 1;
            } else {
                n_val -= 1;
            }
        }
        splits.train.extend_from_slice(&members[..n_train]);
        splits.val.extend_from_slice(&members[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&members[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

/// Stratified subsample of `k` indices from `pool`, proportional to class
/// frequency (largest remainder), with every class present in the pool
/// represented when `k` allows.
pub fn stratified_sample(labels: &[usize], pool: &[usize], k: usize, rng: &mut SeededRng) -> Vec<usize> {
    assert!(k <= pool.len(), "cannot sample {k} of {}", pool.len());
    let classes = pool.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        per_class[labels[i]].push(i);
    }
    let present: Vec<usize> = (0..classes).filter(|&c| !per_class[c].is_empty()).collect();

    // Proportional quotas with largest-remainder rounding.
    let total = pool.len() as f64;
    let mut quota: Vec<usize> = Vec::with_capacity(present.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(present.len());
    let mut assigned = 0;
    for (slot, &c) in present.iter().enumerate() {
        let exact = k as f64 * per_class[c].len() as f64 / total;
        let floor = exact.floor() as usize;
        quota.push(floor);
        remainders.push((exact - floor as f64, slot));
        assigned += floor;
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite remainders").then(a.1.cmp(&b.1)));
    let mut rest = k - assigned;
    let mut ri = 0;
    while rest > 0 {
        let slot = remainders[ri % remainders.len()].1;
        if quota[slot] < per_class[present[slot]].len() {
            quota[slot] += 1;
            rest -= 1;
        }
        ri += 1;
    }
    // Guarantee representation when k covers all present classes.
    if k >= present.len() {
        loop {
            let Some(short) = (0..present.len()).find(|&s| quota[s] == 0) else { break };
            let Some(rich) = (0..present.len()).find(|&s| quota[s] > 1) else { break };
            quota[short] += 1;
            quota[rich] -= 1;
        }
    }

    let mut out = Vec::with_capacity(k);
    for (slot, &c) in present.iter().enumerate() {
        let mut members = per_class[c].clone();
        rng.shuffle(&mut members);
        out.extend_from_slice(&members[..quota[slot]]);
    }
    out.sort_unstable();
    out
}

/// Stratified support/query partition of `pool`. Every class keeps at least
/// one member on each side when it has two or more; singleton classes go to
/// the support side.
pub fn stratified_two_way(
    labels: &[usize],
    pool: &[usize],
    support_frac: f64,
    rng: &mut SeededRng,
) -> (Vec<usize>, Vec<usize>) {
    let classes = pool.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        per_class[labels[i]].push(i);
    }
    let mut support = Vec::new();
    let mut query = Vec::new();
    for mut members in per_class.into_iter().filter(|m| !m.is_empty()) {
        rng.shuffle(&mut members);
        let m = members.len();
        if m == 1 {
            support.push(members[0]);
            continue;
        }
        let mut n_s = (support_frac * m as f64).round() as usize;
        n_s = n_s.clamp(1, m - 1);
        support.extend_from_slice(&members[..n_s]);
        query.extend_from_slice(&members[n_s..]);
    }
    support.sort_unstable();
    query.sort_unstable();
    (support, query)
}

/// Rows of `x` selected by `indices`.
pub fn gather_rows_host(x: &Tensor, indices: &[usize]) -> Tensor {
    let c = x.cols();
    Tensor::matrix(indices.len(), c, indices.iter().flat_map(|&i| x.row(i).to_vec()).collect())
}

pub fn gather_labels(labels: &[usize], indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| labels[i]).collect()
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const DATA_MAGIC: &[u8; 4] = b"PDXD";
const DATA_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct MultimodalMeta {
    kind: String,
    spec: MultimodalSpec,
}

#[derive(Serialize, Deserialize)]
struct TabularMeta {
    kind: String,
    spec: TabularSpec,
}

fn write_header(w: &mut impl Write, kind_tag: u8) -> Result<(), CoreError> {
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    w.write_all(&[kind_tag])?;
    Ok(())
}

fn read_header(r: &mut impl Read, expect_tag: u8) -> Result<(), CoreError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(CoreError::Format("bad magic in data file".into()));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != DATA_VERSION {
        return Err(CoreError::Format(format!("unsupported data version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if tag[0] != expect_tag {
        return Err(CoreError::Format(format!("wrong dataset kind tag {}", tag[0])));
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, xs: &[f32]) -> Result<(), CoreError> {
    for &v in xs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<(), CoreError> {
    for &v in xs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_u32s(w: &mut impl Write, xs: impl Iterator<Item = u32>) -> Result<(), CoreError> {
    for v in xs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>, CoreError> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CoreError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
        .collect())
}

fn read_u32s(r: &mut impl Read, n: usize) -> Result<Vec<u32>, CoreError> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

impl MultimodalDataset {
    pub fn save(&self, dir: &Path) -> Result<(), CoreError> {
        std::fs::create_dir_all(dir)?;
        let meta = MultimodalMeta { kind: "multimodal".into(), spec: self.spec.clone() };
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&meta).expect("spec serializes"),
        )?;
        let mut w = BufWriter::new(std::fs::File::create(dir.join("data.bin"))?);
        write_header(&mut w, 0)?;
        for vol in &self.volumes {
            write_f32s(&mut w, vol)?;
        }
        write_f64s(&mut w, self.continuous.values())?;
        for row in &self.missing {
            let bytes: Vec<u8> = row.iter().map(|&b| b as u8).collect();
            w.write_all(&bytes)?;
        }
        write_u32s(&mut w, self.categorical.iter().flatten().map(|&v| v as u32))?;
        write_u32s(&mut w, self.labels.iter().map(|&v| v as u32))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CoreError> {
        let meta: MultimodalMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| CoreError::Format(format!("meta.json: {e}")))?;
        if meta.kind != "multimodal" {
            return Err(CoreError::Format(format!("expected multimodal data, found {}", meta.kind)));
        }
        let spec = meta.spec;
        let mut r = BufReader::new(std::fs::File::open(dir.join("data.bin"))?);
        read_header(&mut r, 0)?;
        let voxels = spec.vol_side.pow(3);
        let mut volumes = Vec::with_capacity(spec.n);
        for _ in 0..spec.n {
            volumes.push(read_f32s(&mut r, voxels)?);
        }
        let continuous = Tensor::matrix(spec.n, spec.cont_cols, read_f64s(&mut r, spec.n * spec.cont_cols)?);
        let mut missing = Vec::with_capacity(spec.n);
        for _ in 0..spec.n {
            let mut row = vec![0u8; spec.cont_cols];
            r.read_exact(&mut row)?;
            missing.push(row.into_iter().map(|b| b != 0).collect());
        }
        let n_cat = spec.cat_cards.len();
        let cat_flat = read_u32s(&mut r, spec.n * n_cat)?;
        let categorical: Vec<Vec<usize>> = cat_flat.chunks(n_cat).map(|c| c.iter().map(|&v| v as usize).collect()).collect();
        for (i, row) in categorical.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v >= spec.cat_cards[j] {
                    return Err(CoreError::Format(format!("categorical value {v} out of range at row {i} col {j}")));
                }
            }
        }
        let labels: Vec<usize> = read_u32s(&mut r, spec.n)?.into_iter().map(|v| v as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&y| y >= spec.classes) {
            return Err(CoreError::Format(format!("label {bad} out of range")));
        }
        Ok(Self { spec, volumes, continuous, missing, categorical, labels })
    }
}

impl TabularDataset {
    pub fn save(&self, dir: &Path) -> Result<(), CoreError> {
        std::fs::create_dir_all(dir)?;
        let meta = TabularMeta { kind: "tabular".into(), spec: self.spec.clone() };
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&meta).expect("spec serializes"),
        )?;
        let mut w = BufWriter::new(std::fs::File::create(dir.join("data.bin"))?);
        write_header(&mut w, 1)?;
        write_f64s(&mut w, self.x.values())?;
        write_u32s(&mut w, self.labels.iter().map(|&v| v as u32))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CoreError> {
        let meta: TabularMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| CoreError::Format(format!("meta.json: {e}")))?;
        if meta.kind != "tabular" {
            return Err(CoreError::Format(format!("expected tabular data, found {}", meta.kind)));
        }
        let spec = meta.spec;
        let mut r = BufReader::new(std::fs::File::open(dir.join("data.bin"))?);
        read_header(&mut r, 1)?;
        let x = Tensor::matrix(spec.n, spec.features, read_f64s(&mut r, spec.n * spec.features)?);
        let labels: Vec<usize> = read_u32s(&mut r, spec.n)?.into_iter().map(|v| v as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&y| y >= spec.classes) {
            return Err(CoreError::Format(format!("label {bad} out of range")));
        }
        Ok(Self { spec, x, labels })
    }
}
