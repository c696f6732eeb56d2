//! Synthetic domain-shift datasets and CSV ingestion.
//!
//! CSV layout: header `f0,…,f{d-1},label,domain`, one sample per row, `domain`
//! is `source` or `target`, an empty label marks an unlabeled sample. A JSON
//! sidecar next to the CSV records the generator, its parameters, the seed,
//! and the split sizes; rows are written split by split in the order
//! source_train, source_val, target_shots, target_train, target_test.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::geometry::PointSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Option<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_val: usize,
    pub target_shots: usize,
    pub target_train: usize,
    pub target_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    pub splits: SplitSizes,
}

/// Train/validation/test splits for both domains.
///
/// Target-test labels are only reachable through [`DatasetBundle::target_test_labels`],
/// which counts every read so training code can prove it never looked.
#[derive(Debug)]
pub struct DatasetBundle {
    pub meta: BundleMeta,
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    /// Labeled target samples (few-shot protocol); empty for unsupervised adaptation.
    pub target_shots: Vec<Sample>,
    /// Unlabeled target samples.
    pub target_train: Vec<Sample>,
    target_test: Vec<Sample>,
    label_reads: AtomicUsize,
}

impl Clone for DatasetBundle {
    fn clone(&self) -> Self {
        Self {
            meta: self.meta.clone(),
            source_train: self.source_train.clone(),
            source_val: self.source_val.clone(),
            target_shots: self.target_shots.clone(),
            target_train: self.target_train.clone(),
            target_test: self.target_test.clone(),
            label_reads: AtomicUsize::new(self.label_reads.load(Ordering::SeqCst)),
        }
    }
}

impl DatasetBundle {
    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn classes(&self) -> usize {
        self.meta.classes
    }

    pub fn target_test_len(&self) -> usize {
        self.target_test.len()
    }

    /// Target-test features as a `d x n` matrix; reading features is not audited.
    pub fn target_test_features(&self) -> DMatrix<f64> {
        columns(&self.target_test, self.dim())
    }

    /// Target-test labels. Every call increments [`Self::target_label_reads`].
    pub fn target_test_labels(&self) -> Vec<usize> {
        self.label_reads.fetch_add(1, Ordering::SeqCst);
        self.target_test
            .iter()
            .map(|s| s.y.expect("target test samples are labeled"))
            .collect()
    }

    pub fn target_label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }

    /// Features of all target samples (shots, unlabeled pool, test), for geometry only.
    pub fn all_target_features(&self) -> DMatrix<f64> {
        let all: Vec<Sample> = self
            .target_shots
            .iter()
            .chain(&self.target_train)
            .chain(&self.target_test)
            .cloned()
            .collect();
        columns(&all, self.dim())
    }

    pub fn all_source_features(&self) -> DMatrix<f64> {
        let all: Vec<Sample> = self.source_train.iter().chain(&self.source_val).cloned().collect();
        columns(&all, self.dim())
    }

    /// Selects `k` labeled target samples per class from the unlabeled pool.
    ///
    /// Needs the pool's hidden labels, so it is only available while building a bundle.
    fn take_shots(pool: &mut Vec<Sample>, classes: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(rng);
        let mut taken = vec![0usize; classes];
        let mut chosen = Vec::new();
        for i in order {
            let y = pool[i].y.ok_or_else(|| GamaError::Data("few-shot selection needs labels".into()))?;
            if taken[y] < k {
                taken[y] += 1;
                chosen.push(i);
            }
        }
        if let Some(c) = taken.iter().position(|&t| t < k) {
            return Err(GamaError::Data(format!("class {c} has fewer than {k} target samples")));
        }
        chosen.sort_unstable();
        let mut shots = Vec::with_capacity(chosen.len());
        for &i in chosen.iter().rev() {
            shots.push(pool.remove(i));
        }
        shots.reverse();
        Ok(shots)
    }

    fn assemble(
        generator: &str,
        params: serde_json::Value,
        seed: u64,
        classes: usize,
        source: Vec<Sample>,
        target: Vec<Sample>,
        shots: usize,
    ) -> Result<Self> {
        let dim = source
            .first()
            .or(target.first())
            .map(|s| s.x.len())
            .ok_or_else(|| GamaError::Data("dataset is empty".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_MASK);
        let (source_train, source_val) = split_80_20(source, &mut rng);

        let (labeled, unlabeled): (Vec<Sample>, Vec<Sample>) = target.into_iter().partition(|s| s.y.is_some());
        let (mut pool, target_test) = split_80_20(labeled, &mut rng);
        let target_shots = if shots > 0 {
            Self::take_shots(&mut pool, classes, shots, &mut rng)?
        } else {
            Vec::new()
        };
        let mut target_train: Vec<Sample> = pool
            .into_iter()
            .map(|s| Sample { y: None, ..s })
            .collect();
        target_train.extend(unlabeled);

        let bundle = Self::from_parts(
            BundleMeta {
                generator: generator.to_string(),
                params,
                seed,
                dim,
                classes,
                splits: SplitSizes::default(),
            },
            source_train,
            source_val,
            target_shots,
            target_train,
            target_test,
        )?;
        Ok(bundle)
    }

    fn from_parts(
        mut meta: BundleMeta,
        source_train: Vec<Sample>,
        source_val: Vec<Sample>,
        target_shots: Vec<Sample>,
        target_train: Vec<Sample>,
        target_test: Vec<Sample>,
    ) -> Result<Self> {
        meta.splits = SplitSizes {
            source_train: source_train.len(),
            source_val: source_val.len(),
            target_shots: target_shots.len(),
            target_train: target_train.len(),
            target_test: target_test.len(),
        };
        let bundle = Self {
            meta,
            source_train,
            source_val,
            target_shots,
            target_train,
            target_test,
            label_reads: AtomicUsize::new(0),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let d = self.meta.dim;
        let c = self.meta.classes;
        let labeled = |v: &[Sample], what: &str| -> Result<()> {
            if v.iter().any(|s| s.y.is_none()) {
                return Err(GamaError::Data(format!("{what} samples must all be labeled")));
            }
            Ok(())
        };
        labeled(&self.source_train, "source")?;
        labeled(&self.source_val, "source")?;
        labeled(&self.target_shots, "few-shot target")?;
        labeled(&self.target_test, "target test")?;
        if self.source_train.is_empty() {
            return Err(GamaError::Data("source training split is empty".into()));
        }
        if self.target_test.is_empty() {
            return Err(GamaError::Data("target test split is empty".into()));
        }
        let all = self
            .source_train
            .iter()
            .chain(&self.source_val)
            .chain(&self.target_shots)
            .chain(&self.target_train)
            .chain(&self.target_test);
        for s in all {
            if s.x.len() != d {
                return Err(GamaError::Data(format!("sample of dimension {} in a {d}-d bundle", s.x.len())));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(GamaError::Data("non-finite feature".into()));
            }
            if let Some(y) = s.y {
                if y >= c {
                    return Err(GamaError::Data(format!("label {y} out of range for {c} classes")));
                }
            }
        }
        Ok(())
    }
}

// keeps split shuffles independent of the generator streams
const SPLIT_MASK: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seeded 80/20 split after a shuffle.
fn split_80_20(mut v: Vec<Sample>, rng: &mut ChaCha8Rng) -> (Vec<Sample>, Vec<Sample>) {
    v.shuffle(rng);
    let cut = (v.len() * 4).div_ceil(5);
    let tail = v.split_off(cut);
    (v, tail)
}

/// `d x n` feature matrix of `samples`.
pub fn columns(samples: &[Sample], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, samples.len());
    for (j, s) in samples.iter().enumerate() {
        m.set_column(j, &nalgebra::DVector::from_column_slice(&s.x));
    }
    m
}

pub fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.y.expect("labeled sample")).collect()
}

fn exact_cos_sin(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let t = r.to_radians();
            (t.cos(), t.sin())
        }
    }
}

/// Two interleaving half circles with Gaussian noise; `n / 2` per class.
fn two_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng, domain: Domain) -> Result<Vec<Sample>> {
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| GamaError::param(e.to_string()))?;
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let lin = |i: usize, m: usize| {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = lin(i, n_outer);
        out.push((vec![t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = lin(i, n_inner);
        out.push((vec![1.0 - t.cos(), 1.0 - t.sin() - 0.5], 1));
    }
    let mut samples: Vec<Sample> = out
        .into_iter()
        .map(|(mut x, y)| {
            if noise > 0.0 {
                x.iter_mut().for_each(|v| *v += normal.sample(rng));
            }
            Sample { x, y: Some(y), domain }
        })
        .collect();
    samples.shuffle(rng);
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoMoonsShift {
    pub n_per_domain: usize,
    pub noise: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    /// Labeled target samples per class (0 = unsupervised).
    pub shots: usize,
}

impl Default for TwoMoonsShift {
    fn default() -> Self {
        Self {
            n_per_domain: 500,
            noise: 0.1,
            rotation_deg: 30.0,
            translation: [0.0, 0.0],
            shots: 0,
        }
    }
}

/// Source: two moons. Target: an independent two-moons draw rotated about the
/// origin by `rotation_deg`, then translated.
pub fn gen_two_moons_shift(cfg: &TwoMoonsShift, seed: u64) -> Result<DatasetBundle> {
    if cfg.n_per_domain < 10 {
        return Err(GamaError::param("n_per_domain must be at least 10"));
    }
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed);
    tgt_rng.set_stream(1);
    let source = two_moons(cfg.n_per_domain, cfg.noise, &mut src_rng, Domain::Source)?;
    let (c, s) = exact_cos_sin(cfg.rotation_deg);
    let [tx, ty] = cfg.translation;
    let target = two_moons(cfg.n_per_domain, cfg.noise, &mut tgt_rng, Domain::Target)?
        .into_iter()
        .map(|mut smp| {
            let (x, y) = (smp.x[0], smp.x[1]);
            smp.x = vec![c * x - s * y + tx, s * x + c * y + ty];
            smp
        })
        .collect();
    DatasetBundle::assemble(
        "two_moons",
        serde_json::to_value(cfg).expect("serializable"),
        seed,
        2,
        source,
        target,
        cfg.shots,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwissRollShift {
    pub n_per_domain: usize,
    pub noise: f64,
    /// Factor applied to the first coordinate of every target point.
    pub stretch: f64,
    pub shots: usize,
}

impl Default for SwissRollShift {
    fn default() -> Self {
        Self {
            n_per_domain: 500,
            noise: 0.0,
            stretch: 1.5,
            shots: 0,
        }
    }
}

const ROLL_HEIGHT: f64 = 21.0;

/// Arc length of the spiral `r = t` from 0 to `t`.
fn spiral_arc_length(t: f64) -> f64 {
    0.5 * (t * (1.0 + t * t).sqrt() + t.asinh())
}

fn swiss_roll(n: usize, noise: f64, rng: &mut ChaCha8Rng, domain: Domain) -> Result<Vec<Sample>> {
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| GamaError::param(e.to_string()))?;
    let unit = Uniform::new(0.0, 1.0).map_err(|e| GamaError::param(e.to_string()))?;
    let t_min = 1.5 * std::f64::consts::PI;
    let t_max = 4.5 * std::f64::consts::PI;
    let (s_min, s_max) = (spiral_arc_length(t_min), spiral_arc_length(t_max));
    (0..n)
        .map(|_| {
            let t = t_min + (t_max - t_min) * unit.sample(rng);
            let h = ROLL_HEIGHT * unit.sample(rng);
            let mut x = vec![t * t.cos(), h, t * t.sin()];
            if noise > 0.0 {
                x.iter_mut().for_each(|v| *v += normal.sample(rng));
            }
            let frac = (spiral_arc_length(t) - s_min) / (s_max - s_min);
            let y = ((frac * 4.0) as usize).min(3);
            Ok(Sample { x, y: Some(y), domain })
        })
        .collect()
}

/// 3-D swiss roll with four classes by arc-length quartile. The target domain
/// stretches the first coordinate by `stretch`.
pub fn gen_swiss_roll_shift(cfg: &SwissRollShift, seed: u64) -> Result<DatasetBundle> {
    if cfg.n_per_domain < 10 {
        return Err(GamaError::param("n_per_domain must be at least 10"));
    }
    if !(cfg.stretch.is_finite() && cfg.stretch != 0.0) {
        return Err(GamaError::param("stretch must be finite and nonzero"));
    }
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed);
    tgt_rng.set_stream(1);
    let source = swiss_roll(cfg.n_per_domain, cfg.noise, &mut src_rng, Domain::Source)?;
    let target = swiss_roll(cfg.n_per_domain, cfg.noise, &mut tgt_rng, Domain::Target)?
        .into_iter()
        .map(|mut s| {
            s.x[0] *= cfg.stretch;
            s
        })
        .collect();
    DatasetBundle::assemble(
        "swiss_roll",
        serde_json::to_value(cfg).expect("serializable"),
        seed,
        4,
        source,
        target,
        cfg.shots,
    )
}

/// Column names for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
    pub domain: String,
}

impl CsvSchema {
    /// `f0..f{d-1}`, `label`, `domain`.
    pub fn standard(d: usize) -> Self {
        Self {
            features: (0..d).map(|i| format!("f{i}")).collect(),
            label: "label".into(),
            domain: "domain".into(),
        }
    }

    /// Every header column of the form `f<digits>` is a feature.
    pub fn infer(header: &[&str]) -> Self {
        let features = header
            .iter()
            .filter(|h| {
                h.strip_prefix('f')
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
            })
            .map(|h| h.to_string())
            .collect();
        Self {
            features,
            label: "label".into(),
            domain: "domain".into(),
        }
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| GamaError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Reads samples in file order. `schema = None` infers the standard layout from the header.
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn load_csv(path: &Path, schema: Option<&CsvSchema>, classes: Option<usize>) -> Result<Vec<Sample>> {
    let mut reader = open_csv(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| GamaError::Parse { row: 0, detail: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let inferred;
    let schema = match schema {
        Some(s) => s,
        None => {
            let refs: Vec<&str> = header.iter().map(String::as_str).collect();
            inferred = CsvSchema::infer(&refs);
            &inferred
        }
    };
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GamaError::Schema { column: name.to_string() })
    };
    if schema.features.is_empty() {
        return Err(GamaError::Schema { column: "f0".into() });
    }
    let feat_idx = schema.features.iter().map(|f| find(f)).collect::<Result<Vec<_>>>()?;
    let label_idx = find(&schema.label)?;
    let domain_idx = find(&schema.domain)?;

    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| GamaError::Parse { row, detail: e.to_string() })?;
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let mut x = Vec::with_capacity(feat_idx.len());
        for (&j, name) in feat_idx.iter().zip(&schema.features) {
            let v: f64 = field(j).parse().map_err(|_| GamaError::Parse {
                row,
                detail: format!("column `{name}`: `{}` is not a number", field(j)),
            })?;
            if !v.is_finite() {
                return Err(GamaError::Parse {
                    row,
                    detail: format!("column `{name}` is not finite"),
                });
            }
            x.push(v);
        }
        let y = match field(label_idx) {
            "" => None,
            s => {
                let y: usize = s.parse().map_err(|_| GamaError::Parse {
                    row,
                    detail: format!("label `{s}` is not a class index"),
                })?;
                if classes.is_some_and(|c| y >= c) {
                    return Err(GamaError::Parse {
                        row,
                        detail: format!("label {y} out of range"),
                    });
                }
                Some(y)
            }
        };
        let domain = match field(domain_idx) {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => {
                return Err(GamaError::Parse {
                    row,
                    detail: format!("domain `{other}` is neither source nor target"),
                })
            }
        };
        if domain == Domain::Source && y.is_none() {
            return Err(GamaError::Parse {
                row,
                detail: "source samples must be labeled".into(),
            });
        }
        samples.push(Sample { x, y, domain });
    }
    Ok(samples)
}

/// Reads a headered CSV of numeric columns (one embedding per row).
pub fn load_embeddings(path: &Path) -> Result<PointSet> {
    let mut reader = open_csv(path)?;
    let mut data = Vec::new();
    let mut dim = None;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| GamaError::Parse { row, detail: e.to_string() })?;
        if *dim.get_or_insert(rec.len()) != rec.len() {
            return Err(GamaError::Parse {
                row,
                detail: "inconsistent column count".into(),
            });
        }
        for v in rec.iter() {
            let v: f64 = v.trim().parse().map_err(|_| GamaError::Parse {
                row,
                detail: format!("`{v}` is not a number"),
            })?;
            data.push(v);
        }
    }
    let dim = dim.ok_or_else(|| GamaError::Data(format!("{}: no embeddings", path.display())))?;
    PointSet::new(data, dim)
}

/// Writes embeddings with header `e0,…,e{m-1}`.
pub fn write_embeddings(points: &PointSet, path: &Path) -> Result<()> {
    let header: Vec<String> = (0..points.dim()).map(|i| format!("e{i}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..points.len() {
        let row: Vec<String> = points.row(i).iter().map(ToString::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| GamaError::io(path, e))
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Builds a bundle from a CSV. With a sidecar, splits are restored exactly from
/// its recorded sizes; otherwise both domains are split 80/20 with `seed`.
pub fn read_bundle(csv_path: &Path, seed: u64, shots: usize) -> Result<DatasetBundle> {
    let side = sidecar_path(csv_path);
    if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| GamaError::io(&side, e))?;
        let meta: BundleMeta = serde_json::from_str(&text)
            .map_err(|e| GamaError::Config(format!("{}: {e}", side.display())))?;
        let schema = CsvSchema::standard(meta.dim);
        let mut samples = load_csv(csv_path, Some(&schema), Some(meta.classes))?.into_iter();
        let sz = meta.splits;
        let mut take = |n: usize| -> Vec<Sample> { samples.by_ref().take(n).collect() };
        let source_train = take(sz.source_train);
        let source_val = take(sz.source_val);
        let target_shots = take(sz.target_shots);
        let target_train = take(sz.target_train);
        let target_test = take(sz.target_test);
        let bundle = DatasetBundle::from_parts(meta, source_train, source_val, target_shots, target_train, target_test)?;
        if bundle.meta.splits != sz || samples.next().is_some() {
            return Err(GamaError::Data("CSV row count does not match sidecar split sizes".into()));
        }
        return Ok(bundle);
    }
    let samples = load_csv(csv_path, None, None)?;
    let classes = samples.iter().filter_map(|s| s.y).max().map_or(0, |m| m + 1);
    if classes == 0 {
        return Err(GamaError::Data("no labeled samples".into()));
    }
    let (source, target): (Vec<Sample>, Vec<Sample>) =
        samples.into_iter().partition(|s| s.domain == Domain::Source);
    DatasetBundle::assemble(
        "csv",
        serde_json::json!({ "path": csv_path.display().to_string() }),
        seed,
        classes,
        source,
        target,
        shots,
    )
}

/// Writes the bundle as CSV plus its JSON sidecar. Returns the sidecar path.
pub fn write_bundle(bundle: &DatasetBundle, csv_path: &Path) -> Result<PathBuf> {
    let d = bundle.dim();
    let mut out = String::new();
    let header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    writeln!(out, "{},label,domain", header.join(",")).unwrap();
    let all = bundle
        .source_train
        .iter()
        .chain(&bundle.source_val)
        .chain(&bundle.target_shots)
        .chain(&bundle.target_train)
        .chain(&bundle.target_test);
    for s in all {
        let feats: Vec<String> = s.x.iter().map(ToString::to_string).collect();
        let label = s.y.map(|y| y.to_string()).unwrap_or_default();
        writeln!(out, "{},{label},{}", feats.join(","), s.domain.as_str()).unwrap();
    }
    std::fs::write(csv_path, out).map_err(|e| GamaError::io(csv_path, e))?;
    let side = sidecar_path(csv_path);
    let json = serde_json::to_string_pretty(&bundle.meta).expect("serializable");
    std::fs::write(&side, json).map_err(|e| GamaError::io(&side, e))?;
    Ok(side)
}
