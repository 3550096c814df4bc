//! Datasets: MNIST IDX ingestion, the six-image digit subset, synthetic
//! group-structured generators, and trace export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{invalid, GrwError, Result};
use crate::linalg::{norm, Matrix};
use crate::reweighting::GroupInfo;
use crate::trainer::{TraceRow, TrainTrace};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "GRWLAB_DATA_DIR";
pub const MNIST_IMAGES_FILE: &str = "train-images-idx3-ubyte";
pub const MNIST_LABELS_FILE: &str = "train-labels-idx1-ubyte";
const BALL_TOL: f64 = 1e-9;

/// Inputs as the columns of `x` (`d × n`), targets, and group membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub groups: GroupInfo,
    pub provenance: String,
    pub classification: bool,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        y: Vec<f64>,
        groups: GroupInfo,
        provenance: impl Into<String>,
        classification: bool,
    ) -> Result<Self> {
        let n = x.cols();
        if n == 0 {
            return Err(invalid("dataset needs at least one sample"));
        }
        if y.len() != n || groups.num_samples() != n {
            return Err(invalid(format!(
                "dataset has {n} columns, {} targets and {} group labels",
                y.len(),
                groups.num_samples()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("targets must be finite"));
        }
        if classification && y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(invalid("classification labels must be -1 or +1"));
        }
        Ok(Self {
            x,
            y,
            groups,
            provenance: provenance.into(),
            classification,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.x.cols()
    }

    pub fn dim(&self) -> usize {
        self.x.rows()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.num_samples())
            .map(|j| norm(&self.x.column(j)))
            .collect()
    }

    pub fn max_column_norm(&self) -> f64 {
        self.column_norms().into_iter().fold(0.0, f64::max)
    }

    pub fn in_unit_ball(&self) -> bool {
        self.max_column_norm() <= 1.0 + BALL_TOL
    }

    pub fn warn_if_outside_ball(&self) {
        let m = self.max_column_norm();
        if m > 1.0 + BALL_TOL {
            log::warn!(
                "dataset '{}' has a column of norm {m:.6} > 1",
                self.provenance
            );
        }
    }

    /// Scales every column by the same factor so the largest has unit norm.
    pub fn scale_to_unit_ball(mut self) -> Result<Self> {
        let m = self.max_column_norm();
        if m == 0.0 {
            return Err(invalid("cannot normalize an all-zero dataset"));
        }
        self.x = self.x.scaled(1.0 / m);
        Ok(self)
    }

    /// Same samples in a new order: new sample `i` is old sample `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.num_samples();
        let mut seen = vec![false; n];
        if order.len() != n
            || order
                .iter()
                .any(|&i| i >= n || std::mem::replace(&mut seen[i], true))
        {
            return Err(invalid("order must be a permutation of the samples"));
        }
        let cols: Vec<Vec<f64>> = order.iter().map(|&i| self.x.column(i)).collect();
        Dataset::new(
            Matrix::from_columns(&cols)?,
            order.iter().map(|&i| self.y[i]).collect(),
            self.groups.permuted(order)?,
            format!("{} (permuted)", self.provenance),
            self.classification,
        )
    }

    /// Same inputs with `±1` labels: group `k` gets `+1` when `k` is even.
    pub fn with_group_labels(&self) -> Result<Self> {
        let y = self
            .groups
            .labels()
            .iter()
            .map(|&k| if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        Dataset::new(
            self.x.clone(),
            y,
            self.groups.clone(),
            self.provenance.clone(),
            true,
        )
    }
}

/// Decoded IDX image and label files.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistStore {
    pub rows: usize,
    pub cols: usize,
    /// Pixels scaled to `[0, 1]`, one flattened image per entry.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| GrwError::Format(format!("truncated IDX header at byte {offset}")))
}

/// Parses an IDX image file: returns `(rows, cols, images)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GrwError::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * size {
        return Err(GrwError::Format(format!(
            "image file holds {} pixel bytes, header promises {}",
            body.len(),
            count * size
        )));
    }
    let images = body[..count * size]
        .chunks_exact(size.max(1))
        .take(count)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GrwError::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(GrwError::Format(format!(
            "label file holds {} labels, header promises {count}",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

/// Encodes raw `u8` images in IDX format (used to build fixtures).
pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend((images.len() as u32).to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    for img in images {
        out.extend(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistStore> {
    let (rows, cols, images) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != images.len() {
        return Err(GrwError::Format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(MnistStore {
        rows,
        cols,
        images,
        labels,
    })
}

/// Directory holding the IDX files: `$GRWLAB_DATA_DIR`, else `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads the MNIST training files from [`data_dir`] if both are present.
pub fn load_mnist_from_data_dir() -> Result<Option<MnistStore>> {
    let dir = data_dir();
    let images = dir.join(MNIST_IMAGES_FILE);
    let labels = dir.join(MNIST_LABELS_FILE);
    if !images.exists() || !labels.exists() {
        return Ok(None);
    }
    load_mnist_idx(&images, &labels).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Targets are the group id as a float (0.0 / 1.0).
    Regression,
    /// Targets are −1 for group 0 and +1 for group 1.
    Classification,
}

/// First five digit-0 images and first digit-1 image in file order,
/// flattened and jointly scaled so the largest lands on the unit sphere.
pub fn paper_subset(store: &MnistStore, task: Task) -> Result<Dataset> {
    let zeros: Vec<usize> = store
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 0)
        .map(|(i, _)| i)
        .take(5)
        .collect();
    let one = store.labels.iter().position(|&l| l == 1);
    let (true, Some(one)) = (zeros.len() == 5, one) else {
        return Err(invalid("the store needs at least five 0s and one 1"));
    };
    let mut cols: Vec<Vec<f64>> = zeros.iter().map(|&i| store.images[i].clone()).collect();
    cols.push(store.images[one].clone());
    let groups = GroupInfo::from_sizes(&[5, 1])?;
    let y = match task {
        Task::Regression => vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        Task::Classification => vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0],
    };
    let mut provenance = format!("MNIST first five 0s {zeros:?} and first 1 [{one}]");
    let _ = write!(provenance, " ({task:?})");
    Dataset::new(
        Matrix::from_columns(&cols)?,
        y,
        groups,
        provenance,
        task == Task::Classification,
    )?
    .scale_to_unit_ball()
}

/// Parameters for [`synth_groups`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub sizes: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation around each group mean.
    pub noise: f64,
    pub seed: u64,
    pub classification: bool,
}

/// Gaussian blobs around per-group means, jointly scaled into the unit ball.
///
/// Classification mode labels group `k` with `+1` when `k` is even and `−1`
/// otherwise; regression mode uses the group id as the target.
pub fn synth_groups(spec: &SynthSpec) -> Result<Dataset> {
    if spec.sizes.is_empty() || spec.sizes.contains(&0) {
        return Err(invalid("every group needs at least one sample"));
    }
    if spec.means.len() != spec.sizes.len() || spec.means.iter().any(|m| m.len() != spec.dim) {
        return Err(invalid("one mean of length dim per group is required"));
    }
    if !(spec.noise >= 0.0) {
        return Err(invalid("noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups = GroupInfo::from_sizes(&spec.sizes)?;
    let mut cols = Vec::with_capacity(groups.num_samples());
    let mut y = Vec::with_capacity(groups.num_samples());
    for &k in groups.labels() {
        let col: Vec<f64> = spec.means[k]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + spec.noise * z
            })
            .collect();
        cols.push(col);
        y.push(if spec.classification {
            if k % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        } else {
            k as f64
        });
    }
    Dataset::new(
        Matrix::from_columns(&cols)?,
        y,
        groups,
        format!(
            "synthetic blobs d={} sizes={:?} noise={} seed={}",
            spec.dim, spec.sizes, spec.noise, spec.seed
        ),
        spec.classification,
    )?
    .scale_to_unit_ball()
}

/// Random unit vector in `ℝ^d`.
pub fn random_unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Six-sample stand-in for the digit subset: 784-dimensional blobs with group
/// sizes (5, 1), small group means, and noise that dominates each column.
pub fn synthetic_six(seed: u64, task: Task) -> Result<Dataset> {
    let dim = 784;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001);
    let means = (0..2)
        .map(|_| {
            random_unit_vector(dim, &mut rng)
                .into_iter()
                .map(|v| 0.3 * v)
                .collect()
        })
        .collect();
    let spec = SynthSpec {
        dim,
        sizes: vec![5, 1],
        means,
        noise: 1.0 / (dim as f64).sqrt(),
        seed,
        classification: false,
    };
    let ds = synth_groups(&spec)?;
    match task {
        Task::Regression => Ok(ds),
        Task::Classification => {
            // group 0 → −1, group 1 → +1, as for the digit subset
            let y = ds
                .groups
                .labels()
                .iter()
                .map(|&k| if k == 0 { -1.0 } else { 1.0 })
                .collect();
            Dataset::new(ds.x, y, ds.groups, ds.provenance, true)
        }
    }
}

/// `k` orthonormal vectors in `ℝ^dim` (Gram–Schmidt on Gaussian draws).
pub fn random_orthonormal(dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if k > dim {
        return Err(invalid(
            "cannot draw more orthonormal vectors than dimensions",
        ));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = random_unit_vector(dim, rng);
        for b in &basis {
            let c = crate::linalg::dot(&v, b);
            crate::linalg::axpy(-c, b, &mut v);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis)
}

/// Separable six-sample set with groups (5, 1) in `ℝ²⁰`.
///
/// With signed points `zᵢ = yᵢxᵢ`, the majority has `zᵢ = 0.3u + 0.3eᵢ`, so all
/// five are support vectors of equal weight under every scheme considered.
/// The minority point sits at norm 0.95, tilted 0.3 rad off the max-margin
/// direction: far from the boundary, but not aligned with it, so
/// heavy-tailed losses still feel how it is weighted. Majority labels are
/// −1, the minority is +1.
pub fn separable_six(seed: u64) -> Result<Dataset> {
    let dim = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0002);
    let frame = random_orthonormal(dim, 7, &mut rng)?;
    let (u, e) = (&frame[0], &frame[1..]);
    let mut z: Vec<Vec<f64>> = (0..5)
        .map(|i| {
            u.iter()
                .zip(&e[i])
                .map(|(a, b)| 0.3 * a + 0.3 * b)
                .collect()
        })
        .collect();
    let mut w_hat = vec![0.0; dim];
    for zi in &z {
        crate::linalg::axpy(1.0, zi, &mut w_hat);
    }
    let w_hat = crate::linalg::normalized(&w_hat);
    let phi: f64 = 0.3;
    z.push(
        w_hat
            .iter()
            .zip(&e[5])
            .map(|(a, b)| 0.95 * (phi.cos() * a + phi.sin() * b))
            .collect(),
    );
    let y = vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0];
    let cols: Vec<Vec<f64>> = z
        .iter()
        .zip(&y)
        .map(|(zi, yi)| zi.iter().map(|v| v * yi).collect())
        .collect();
    Dataset::new(
        Matrix::from_columns(&cols)?,
        y,
        GroupInfo::from_sizes(&[5, 1])?,
        format!("synthetic separable six, d={dim}, seed={seed}"),
        true,
    )?
    .scale_to_unit_ball()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceFormat {
    Csv,
    Json,
}

pub fn trace_columns(num_groups: usize) -> Vec<String> {
    let mut cols = vec!["epoch".to_string(), "weighted_risk".into(), "risk".into()];
    cols.extend((1..=num_groups).map(|k| format!("group_risk_{k}")));
    cols.extend([
        "theta_gap_ref".to_string(),
        "theta_norm".into(),
        "cos_ref".into(),
    ]);
    cols.extend((1..=num_groups).map(|k| format!("q_group_{k}")));
    cols
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// CSV text of a trace. A `# config_hash=` comment precedes the header when set.
pub fn trace_to_csv(trace: &TrainTrace) -> String {
    let mut out = String::new();
    if let Some(h) = &trace.config_hash {
        let _ = writeln!(out, "# config_hash={h}");
    }
    out.push_str(&trace_columns(trace.num_groups).join(","));
    out.push('\n');
    for r in &trace.rows {
        let mut fields = vec![
            r.epoch.to_string(),
            fmt_float(r.weighted_risk),
            fmt_float(r.risk),
        ];
        fields.extend(r.group_risks.iter().map(|&v| fmt_float(v)));
        fields.push(fmt_opt(r.theta_gap_ref));
        fields.push(fmt_float(r.theta_norm));
        fields.push(fmt_opt(r.cos_ref));
        fields.extend(r.q_groups.iter().map(|&v| fmt_float(v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn trace_to_json(trace: &TrainTrace) -> Value {
    let opt = |v: Option<f64>| v.map_or(Value::Null, |x| json!(x));
    let rows: Vec<Value> = trace
        .rows
        .iter()
        .map(|r| {
            let mut m = Map::new();
            m.insert("epoch".into(), json!(r.epoch));
            m.insert("weighted_risk".into(), json!(r.weighted_risk));
            m.insert("risk".into(), json!(r.risk));
            for (k, v) in r.group_risks.iter().enumerate() {
                m.insert(format!("group_risk_{}", k + 1), json!(v));
            }
            m.insert("theta_gap_ref".into(), opt(r.theta_gap_ref));
            m.insert("theta_norm".into(), json!(r.theta_norm));
            m.insert("cos_ref".into(), opt(r.cos_ref));
            for (k, v) in r.q_groups.iter().enumerate() {
                m.insert(format!("q_group_{}", k + 1), json!(v));
            }
            Value::Object(m)
        })
        .collect();
    json!({
        "config_hash": trace.config_hash,
        "columns": trace_columns(trace.num_groups),
        "rows": rows,
    })
}

pub fn export_trace(trace: &TrainTrace, path: &Path, format: TraceFormat) -> Result<()> {
    let text = match format {
        TraceFormat::Csv => trace_to_csv(trace),
        TraceFormat::Json => {
            serde_json::to_string_pretty(&trace_to_json(trace)).map_err(std::io::Error::other)?
                + "\n"
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parses CSV produced by [`trace_to_csv`]. Per-sample weights are not part
/// of the schema and come back empty.
pub fn parse_trace_csv(text: &str) -> Result<TrainTrace> {
    let mut config_hash = None;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = loop {
        match lines.next() {
            Some(l) if l.starts_with('#') => {
                config_hash = l
                    .trim_start_matches('#')
                    .trim()
                    .strip_prefix("config_hash=")
                    .map(str::to_string);
            }
            Some(l) => break l,
            None => return Err(GrwError::Format("trace CSV has no header".into())),
        }
    };
    let cols: Vec<&str> = header.split(',').collect();
    let k = cols.iter().filter(|c| c.starts_with("group_risk_")).count();
    if cols.iter().map(|c| c.to_string()).collect::<Vec<_>>() != trace_columns(k) {
        return Err(GrwError::Format(format!(
            "unexpected trace header {header:?}"
        )));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| GrwError::Format(format!("bad number {s:?} in trace")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(GrwError::Format(format!(
                "trace row has {} fields",
                f.len()
            )));
        }
        rows.push(TraceRow {
            epoch: f[0]
                .parse()
                .map_err(|_| GrwError::Format(format!("bad epoch {:?}", f[0])))?,
            weighted_risk: num(f[1])?,
            risk: num(f[2])?,
            group_risks: f[3..3 + k].iter().map(|s| num(s)).collect::<Result<_>>()?,
            theta_gap_ref: opt(f[3 + k])?,
            theta_norm: num(f[4 + k])?,
            cos_ref: opt(f[5 + k])?,
            q_groups: f[6 + k..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            q: Vec::new(),
        });
    }
    Ok(TrainTrace {
        num_groups: k,
        config_hash,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{extreme_eigenvalues, gram};
    use crate::oracles::max_margin_direction;

    fn tiny_store_bytes() -> (Vec<u8>, Vec<u8>) {
        let imgs = vec![vec![0u8, 255, 128, 3], vec![10, 20, 30, 40]];
        (encode_idx_images(2, 2, &imgs), encode_idx_labels(&[7, 1]))
    }

    #[test]
    fn idx_round_trip() {
        let (ib, lb) = tiny_store_bytes();
        let (r, c, images) = parse_idx_images(&ib).unwrap();
        assert_eq!((r, c), (2, 2));
        assert_eq!(images[0], vec![0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0]);
        assert_eq!(images.len(), 2);
        assert_eq!(parse_idx_labels(&lb).unwrap(), vec![7, 1]);
        assert_eq!(&ib[..4], &[0, 0, 8, 3]);
        assert_eq!(u32::from_be_bytes([ib[0], ib[1], ib[2], ib[3]]), 2051);
        assert_eq!(u32::from_be_bytes([lb[0], lb[1], lb[2], lb[3]]), 2049);
    }

    #[test]
    fn idx_errors() {
        let (ib, lb) = tiny_store_bytes();
        assert!(matches!(parse_idx_images(&lb), Err(GrwError::Format(_))));
        assert!(matches!(parse_idx_labels(&ib), Err(GrwError::Format(_))));
        assert!(matches!(
            parse_idx_images(&ib[..ib.len() - 1]),
            Err(GrwError::Format(_))
        ));
        assert!(matches!(
            parse_idx_images(&ib[..10]),
            Err(GrwError::Format(_))
        ));
        assert!(matches!(
            parse_idx_labels(&lb[..9]),
            Err(GrwError::Format(_))
        ));
    }

    fn fixture_store() -> MnistStore {
        // 3x3 "images"; labels put the digit-1 image in the middle
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..9u8 {
            let mut img = vec![0u8; 9];
            img[i as usize] = 200;
            img[(i as usize + 4) % 9] = 60 + i;
            imgs.push(img);
            labels.push(match i {
                3 => 1,
                7 => 4,
                _ => 0,
            });
        }
        let (_, _, images) = parse_idx_images(&encode_idx_images(3, 3, &imgs)).unwrap();
        MnistStore {
            rows: 3,
            cols: 3,
            images,
            labels,
        }
    }

    #[test]
    fn paper_subset_structure() {
        let store = fixture_store();
        let ds = paper_subset(&store, Task::Regression).unwrap();
        assert_eq!(ds.num_samples(), 6);
        assert_eq!(ds.dim(), 9);
        assert_eq!(ds.groups.sizes(), &[5, 1]);
        assert_eq!(ds.y, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((ds.max_column_norm() - 1.0).abs() < 1e-15);
        // first five zeros by index are 0,1,2,4,5
        let first = store.images[0].clone();
        let scale = ds.x.get(0, 0) / first[0];
        assert!((ds.x.column(0)[4] - first[4] * scale).abs() < 1e-15);
        let g = gram(&ds.x).unwrap();
        let (_, lo) = extreme_eigenvalues(&g, 1e-14).unwrap();
        assert!(lo > 0.0);

        let cls = paper_subset(&store, Task::Classification).unwrap();
        assert_eq!(cls.y, vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
        assert_eq!(cls.x, ds.x);
        assert_eq!(paper_subset(&store, Task::Regression).unwrap(), ds);
    }

    #[test]
    fn paper_subset_needs_digits() {
        let mut store = fixture_store();
        store.labels.iter_mut().for_each(|l| *l = 0);
        assert!(paper_subset(&store, Task::Regression).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_normalized() {
        let spec = SynthSpec {
            dim: 5,
            sizes: vec![5, 1],
            means: vec![
                vec![0.5, 0.0, 0.0, 0.0, 0.0],
                vec![-0.5, 0.0, 0.0, 0.0, 0.0],
            ],
            noise: 0.1,
            seed: 3,
            classification: true,
        };
        let a = synth_groups(&spec).unwrap();
        assert_eq!(a, synth_groups(&spec).unwrap());
        assert_eq!(a.groups.sizes(), &[5, 1]);
        assert!(a.in_unit_ball());
        assert!(a.max_column_norm() >= 0.5);
        assert_eq!(a.y, vec![1.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let mut bad = spec.clone();
        bad.sizes = vec![5, 0];
        assert!(synth_groups(&bad).is_err());
    }

    #[test]
    fn noiseless_opposite_means_margin_direction() {
        let mean = vec![0.6, 0.8, 0.0];
        let spec = SynthSpec {
            dim: 3,
            sizes: vec![2, 1],
            means: vec![mean.clone(), mean.iter().map(|v| -v).collect()],
            noise: 0.0,
            seed: 1,
            classification: true,
        };
        let ds = synth_groups(&spec).unwrap();
        let mm = max_margin_direction(&ds.x, &ds.y).unwrap();
        for (a, b) in mm.direction.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_means_recovered() {
        let dim = 4;
        let size = 400;
        let mean = vec![0.5, -0.2, 0.1, 0.0];
        let noise = 0.05;
        let spec = SynthSpec {
            dim,
            sizes: vec![size],
            means: vec![mean.clone()],
            noise,
            seed: 11,
            classification: false,
        };
        let ds = synth_groups(&spec).unwrap();
        // undo the joint scaling using a fresh unscaled draw's max norm
        let raw_max = ds.max_column_norm();
        assert!((raw_max - 1.0).abs() < 1e-12);
        let cols = ds.x.columns();
        let avg: Vec<f64> = (0..dim)
            .map(|i| cols.iter().map(|c| c[i]).sum::<f64>() / size as f64)
            .collect();
        // compare directions up to the common scale factor
        let s = crate::linalg::dot(&avg, &mean) / crate::linalg::dot(&mean, &mean);
        for (a, m) in avg.iter().zip(&mean) {
            assert!((a / s - m).abs() <= 4.0 * noise / (size as f64).sqrt() + 1e-3);
        }
    }

    #[test]
    fn synthetic_six_is_well_conditioned() {
        let ds = synthetic_six(0, Task::Regression).unwrap();
        assert_eq!((ds.dim(), ds.num_samples()), (784, 6));
        let g = gram(&ds.x).unwrap();
        let (hi, lo) = extreme_eigenvalues(&g, 1e-14).unwrap();
        assert!(lo > 0.3 * hi, "lambda range {lo} .. {hi}");
        let c = synthetic_six(0, Task::Classification).unwrap();
        assert_eq!(c.y, vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn separable_six_support_structure() {
        let ds = separable_six(3).unwrap();
        assert_eq!((ds.dim(), ds.num_samples()), (20, 6));
        assert!(ds.in_unit_ball());
        let mm = max_margin_direction(&ds.x, &ds.y).unwrap();
        assert_eq!(mm.support_set, vec![0, 1, 2, 3, 4]);
        let a = mm.alphas[0];
        assert!(mm.alphas[..5].iter().all(|v| (v - a).abs() < 1e-9 * a));
        let z6: Vec<f64> = ds.x.column(5);
        assert!(crate::linalg::dot(&mm.direction, &z6) > 2.0 * mm.margin);
        assert_eq!(ds, separable_six(3).unwrap());
    }

    fn sample_trace() -> TrainTrace {
        TrainTrace {
            num_groups: 2,
            config_hash: Some("abc123".into()),
            rows: vec![TraceRow {
                epoch: 10,
                weighted_risk: 0.1 + 0.2,
                risk: 1.0 / 3.0,
                group_risks: vec![std::f64::consts::PI, 1e-300],
                theta_gap_ref: None,
                theta_norm: 2.0f64.sqrt(),
                cos_ref: Some(-0.123_456_789_012_345_68),
                q_groups: vec![0.25, 0.75],
                q: vec![0.1; 6],
            }],
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample_trace();
        let csv = trace_to_csv(&t);
        let back = parse_trace_csv(&csv).unwrap();
        assert_eq!(back.config_hash, t.config_hash);
        let (a, b) = (&t.rows[0], &back.rows[0]);
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.weighted_risk.to_bits(), b.weighted_risk.to_bits());
        assert_eq!(a.risk.to_bits(), b.risk.to_bits());
        assert_eq!(a.group_risks, b.group_risks);
        assert_eq!(a.theta_gap_ref, b.theta_gap_ref);
        assert_eq!(a.cos_ref, b.cos_ref);
        assert_eq!(a.q_groups, b.q_groups);
    }

    #[test]
    fn empty_trace_is_header_only() {
        let t = TrainTrace::new(2);
        let csv = trace_to_csv(&t);
        assert_eq!(
            csv,
            "epoch,weighted_risk,risk,group_risk_1,group_risk_2,theta_gap_ref,theta_norm,cos_ref,q_group_1,q_group_2\n"
        );
        assert!(parse_trace_csv(&csv).unwrap().rows.is_empty());
    }

    #[test]
    fn export_writes_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample_trace();
        let csv_path = dir.path().join("sub/trace.csv");
        let json_path = dir.path().join("trace.json");
        export_trace(&t, &csv_path, TraceFormat::Csv).unwrap();
        export_trace(&t, &json_path, TraceFormat::Json).unwrap();
        let back = parse_trace_csv(&fs::read_to_string(&csv_path).unwrap()).unwrap();
        assert_eq!(back.rows.len(), 1);
        let v: Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
        let row = &v["rows"][0];
        let keys: Vec<String> = row.as_object().unwrap().keys().cloned().collect();
        let mut expected = trace_columns(2);
        expected.sort();
        let mut got = keys.clone();
        got.sort();
        assert_eq!(got, expected);
        assert_eq!(row["cos_ref"].as_f64().unwrap(), t.rows[0].cos_ref.unwrap());
        assert!(row["theta_gap_ref"].is_null());
    }

    #[test]
    fn export_reports_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let r = export_trace(
            &sample_trace(),
            &blocker.join("trace.csv"),
            TraceFormat::Csv,
        );
        assert!(matches!(r, Err(GrwError::Io(_))));
    }
}
