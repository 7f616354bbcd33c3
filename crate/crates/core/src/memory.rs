//! Episodic memories of finished target domains.
//!
//! After a target domain has been adapted to, the most confidently predicted
//! samples are kept together with pseudo-labels. Pseudo-labels come from
//! k-means (k = number of classes) on encoder features of the whole domain,
//! each cluster taking the majority class of the model's predictions inside
//! it. The union of these memories provides the cross-entropy constraint
//! that protects earlier domains.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{BankSource, SampleKey};
use crate::domains::DomainDataset;
use crate::error::{GrclError, Result};
use crate::model::{argmax, softmax_rows, Batch, ParamVector};
use crate::rng;

pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
}

impl KMeansResult {
    pub fn wcss(&self) -> f64 {
        self.wcss_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from k-means++ seeding.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(GrclError::InvalidInput(format!(
            "k-means needs 1 <= k <= points, got k={k}, points={n}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(GrclError::InvalidInput("k-means points must be finite".into()));
    }
    let mut rng = rng::seeded(seed, 0x6b6d);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut wcss_history = Vec::new();

    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut wcss = 0.0;
        let mut dist_to_own = vec![0.0; n];
        for (i, p) in points.rows().into_iter().enumerate() {
            let (best, d) = nearest(p, &centroids);
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            dist_to_own[i] = d;
            wcss += d;
        }
        if let Some(&prev) = wcss_history.last() {
            assert!(
                wcss <= prev + 1e-9 * (1.0 + prev),
                "k-means WCSS increased from {prev} to {wcss}"
            );
        }
        wcss_history.push(wcss);
        if !changed {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, points.ncols()));
        let mut counts = vec![0usize; k];
        for (p, &a) in points.rows().into_iter().zip(&assignments) {
            sums.row_mut(a).scaled_add(1.0, &p);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed at the point currently farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| dist_to_own[a].total_cmp(&dist_to_own[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 1");
                centroids.row_mut(c).assign(&points.row(far));
                dist_to_own[far] = 0.0;
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        wcss_history,
    })
}

fn nearest(p: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// Order of rows sorted lexicographically by value, so that clustering does
/// not depend on the order samples arrive in.
fn canonical_order(x: &Array2<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Cluster encoder features into `num_classes` groups and label each group
/// with the majority class the model predicts for its members (ties go to
/// the lowest class).
pub fn pseudo_label(
    params: &ParamVector,
    samples: ArrayView2<'_, f64>,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if samples.nrows() == 0 {
        return Err(GrclError::InvalidInput("no samples to pseudo-label".into()));
    }
    let out = params.forward(samples)?;
    let predictions: Vec<usize> = out.logits.rows().into_iter().map(argmax).collect();
    let order = canonical_order(&out.features);
    let sorted = out.features.select(Axis(0), &order);
    let k = num_classes.min(samples.nrows());
    let clusters = kmeans(sorted.view(), k, seed)?;

    let mut votes = vec![vec![0usize; num_classes]; k];
    for (pos, &orig) in order.iter().enumerate() {
        votes[clusters.assignments[pos]][predictions[orig]] += 1;
    }
    let cluster_class: Vec<usize> = votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for (c, &n) in v.iter().enumerate() {
                if n > v[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut labels = vec![0; samples.nrows()];
    for (pos, &orig) in order.iter().enumerate() {
        labels[orig] = cluster_class[clusters.assignments[pos]];
    }
    Ok(labels)
}

/// How episodic samples are chosen among confident predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionPolicy {
    /// Top `ceil(capacity / C)` per predicted class, then global truncation;
    /// short classes are topped up with the most confident remaining samples.
    Balanced,
    /// Global top-`capacity` by confidence.
    GlobalTop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    pub domain_id: u32,
    /// Row indices into the domain's training set.
    pub sample_ids: Vec<u32>,
    pub samples: Array2<f64>,
    pub pseudo_labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl EpisodicMemory {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.samples.clone(),
            labels: Some(self.pseudo_labels.clone()),
        }
    }

    /// Uniform draw of `b` rows (with replacement only if `b` exceeds the
    /// memory size).
    pub fn sample_batch(&self, b: usize, seed: u64) -> Result<Batch> {
        if self.is_empty() {
            return Err(GrclError::EmptyMemory);
        }
        let idx = draw_indices(self.len(), b, seed);
        Ok(self.as_batch().select(&idx))
    }
}

fn draw_indices(total: usize, b: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::seeded(seed, 0x6d62);
    if b <= total {
        index::sample(&mut rng, total, b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..total)).collect()
    }
}

/// Picks up to `capacity` confident training samples of `dataset` and
/// attaches pseudo-labels computed on the whole domain.
pub fn select_episodic(
    params: &ParamVector,
    dataset: &DomainDataset,
    capacity: usize,
    policy: SelectionPolicy,
    seed: u64,
) -> Result<EpisodicMemory> {
    if capacity == 0 {
        return Err(GrclError::InvalidConfig("memory capacity must be >= 1".into()));
    }
    let x = dataset.train_inputs();
    let n = x.nrows();
    if n == 0 {
        return Err(GrclError::InvalidInput("empty dataset".into()));
    }
    let num_classes = params.spec().num_classes;
    let out = params.forward(x.view())?;
    let probs = softmax_rows(&out.logits);
    let predicted: Vec<usize> = out.logits.rows().into_iter().map(argmax).collect();
    let confidence: Vec<f64> = probs
        .rows()
        .into_iter()
        .map(|r| r.fold(0.0f64, |a, &b| a.max(b)))
        .collect();

    let by_confidence = |idx: &mut Vec<usize>| {
        idx.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)))
    };
    let mut chosen: Vec<usize> = if capacity >= n {
        (0..n).collect()
    } else {
        match policy {
            SelectionPolicy::GlobalTop => {
                let mut all: Vec<usize> = (0..n).collect();
                by_confidence(&mut all);
                all.truncate(capacity);
                all
            }
            SelectionPolicy::Balanced => {
                let per_class = capacity.div_ceil(num_classes);
                let mut pool = Vec::new();
                for c in 0..num_classes {
                    let mut members: Vec<usize> = (0..n).filter(|&i| predicted[i] == c).collect();
                    by_confidence(&mut members);
                    members.truncate(per_class);
                    pool.extend(members);
                }
                by_confidence(&mut pool);
                pool.truncate(capacity);
                if pool.len() < capacity {
                    // Some predicted classes are short; top up from the rest.
                    let mut rest: Vec<usize> = (0..n).filter(|i| !pool.contains(i)).collect();
                    by_confidence(&mut rest);
                    rest.truncate(capacity - pool.len());
                    pool.extend(rest);
                }
                pool
            }
        }
    };
    chosen.sort_unstable();

    let labels = pseudo_label(params, x.view(), num_classes, seed)?;
    Ok(EpisodicMemory {
        domain_id: dataset.domain_id(),
        sample_ids: chosen.iter().map(|&i| i as u32).collect(),
        samples: x.select(Axis(0), &chosen),
        pseudo_labels: chosen.iter().map(|&i| labels[i]).collect(),
        confidences: chosen.iter().map(|&i| confidence[i]).collect(),
    })
}

/// A memory batch together with the bank identity of every row.
#[derive(Debug, Clone)]
pub struct MemoryBatch {
    pub batch: Batch,
    pub samples: Vec<SampleKey>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainMemory {
    episodic: Vec<EpisodicMemory>,
}

impl DomainMemory {
    pub fn new() -> Self {
        DomainMemory::default()
    }

    /// Appends a memory; domain ids must strictly increase.
    pub fn push(&mut self, memory: EpisodicMemory) -> Result<()> {
        if let Some(last) = self.episodic.last() {
            if memory.domain_id <= last.domain_id {
                return Err(GrclError::InvalidInput(format!(
                    "episodic memory for domain {} added after domain {}",
                    memory.domain_id, last.domain_id
                )));
            }
        }
        self.episodic.push(memory);
        Ok(())
    }

    pub fn episodic(&self) -> &[EpisodicMemory] {
        &self.episodic
    }

    pub fn total_len(&self) -> usize {
        self.episodic.iter().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn bank_sources(&self) -> Vec<BankSource<'_>> {
        self.episodic
            .iter()
            .filter(|m| !m.is_empty())
            .map(|m| BankSource::with_ids(m.domain_id, m.samples.view(), &m.sample_ids))
            .collect()
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (m, mem) in self.episodic.iter().enumerate() {
            if flat < mem.len() {
                return (m, flat);
            }
            flat -= mem.len();
        }
        unreachable!("flat index beyond memory size")
    }

    /// Uniform draw across all episodic memories, labels = pseudo-labels.
    pub fn sample_batch(&self, b: usize, seed: u64) -> Result<MemoryBatch> {
        let total = self.total_len();
        if total == 0 {
            return Err(GrclError::EmptyMemory);
        }
        if b == 0 {
            return Err(GrclError::InvalidInput("memory batch size must be >= 1".into()));
        }
        let idx = draw_indices(total, b, seed);
        let dim = self.episodic.iter().find(|m| !m.is_empty()).map_or(0, |m| m.samples.ncols());
        let mut inputs = Array2::zeros((b, dim));
        let mut labels = Vec::with_capacity(b);
        let mut samples = Vec::with_capacity(b);
        for (row, &flat) in idx.iter().enumerate() {
            let (m, r) = self.locate(flat);
            let mem = &self.episodic[m];
            inputs.row_mut(row).assign(&mem.samples.row(r));
            labels.push(mem.pseudo_labels[r]);
            samples.push(SampleKey::new(mem.domain_id, mem.sample_ids[r]));
        }
        Ok(MemoryBatch {
            batch: Batch {
                inputs,
                labels: Some(labels),
            },
            samples,
        })
    }

    /// `domain_id,sample_id,pseudo_label,confidence,x0,...`
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| GrclError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| GrclError::io(path, e);
        let dim = self.episodic.first().map_or(0, |m| m.samples.ncols());
        let mut header = String::from("domain_id,sample_id,pseudo_label,confidence");
        for j in 0..dim {
            header.push_str(&format!(",x{j}"));
        }
        writeln!(w, "{header}").map_err(io)?;
        for m in &self.episodic {
            for r in 0..m.len() {
                write!(
                    w,
                    "{},{},{},{:.16e}",
                    m.domain_id, m.sample_ids[r], m.pseudo_labels[r], m.confidences[r]
                )
                .map_err(io)?;
                for v in m.samples.row(r) {
                    write!(w, ",{v:.16e}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load_csv(path: &Path, num_classes: usize) -> Result<DomainMemory> {
        let file = File::open(path).map_err(|e| GrclError::io(path, e))?;
        let err = |line: usize, message: String| GrclError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| err(1, "empty file".into()))?
            .map_err(|e| GrclError::io(path, e))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..4] != ["domain_id", "sample_id", "pseudo_label", "confidence"] {
            return Err(err(1, "expected header domain_id,sample_id,pseudo_label,confidence,x0,...".into()));
        }
        let dim = cols.len() - 4;
        let mut memory = DomainMemory::new();
        let mut current: Option<(u32, Vec<u32>, Vec<f64>, Vec<usize>, Vec<f64>)> = None;
        let finish = |memory: &mut DomainMemory, cur: (u32, Vec<u32>, Vec<f64>, Vec<usize>, Vec<f64>), line| {
            let (domain_id, sample_ids, flat, pseudo_labels, confidences) = cur;
            let samples = Array2::from_shape_vec((sample_ids.len(), dim), flat).expect("widths checked");
            memory
                .push(EpisodicMemory {
                    domain_id,
                    sample_ids,
                    samples,
                    pseudo_labels,
                    confidences,
                })
                .map_err(|e| err(line, e.to_string()))
        };
        let mut lineno = 1;
        for (i, line) in lines.enumerate() {
            lineno = i + 2;
            let line = line.map_err(|e| GrclError::io(path, e))?;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != dim + 4 {
                return Err(err(lineno, format!("expected {} fields", dim + 4)));
            }
            let parse_u = |s: &str| s.parse::<u64>().map_err(|e| err(lineno, format!("{s:?}: {e}")));
            let parse_f = |s: &str| s.parse::<f64>().map_err(|e| err(lineno, format!("{s:?}: {e}")));
            let domain = parse_u(f[0])? as u32;
            let label = parse_u(f[2])? as usize;
            if label >= num_classes {
                return Err(err(lineno, format!("pseudo_label {label} >= {num_classes}")));
            }
            if current.as_ref().is_some_and(|c| c.0 != domain) {
                finish(&mut memory, current.take().expect("checked"), lineno)?;
            }
            let cur = current.get_or_insert_with(|| (domain, Vec::new(), Vec::new(), Vec::new(), Vec::new()));
            cur.1.push(parse_u(f[1])? as u32);
            cur.3.push(label);
            cur.4.push(parse_f(f[3])?);
            for v in &f[4..] {
                cur.2.push(parse_f(v)?);
            }
        }
        if let Some(cur) = current {
            finish(&mut memory, cur, lineno)?;
        }
        Ok(memory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_points_two_clusters() {
        let pts = array![[0.0, 0.0], [3.0, 4.0]];
        let r = kmeans(pts.view(), 2, 1).unwrap();
        assert_ne!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.wcss(), 0.0);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = array![[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]];
        let r = kmeans(pts.view(), 1, 9).unwrap();
        assert!((r.centroids[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((r.centroids[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_rejects_too_few_points() {
        let pts = array![[0.0, 1.0]];
        assert!(kmeans(pts.view(), 2, 0).is_err());
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let pts = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let r = kmeans(pts.view(), 2, 4).unwrap();
        assert_eq!(r.wcss(), 0.0);
    }

    fn memory(domain: u32, n: usize) -> EpisodicMemory {
        EpisodicMemory {
            domain_id: domain,
            sample_ids: (0..n as u32).collect(),
            samples: Array2::from_shape_fn((n, 2), |(i, j)| (domain as usize * 100 + i * 2 + j) as f64),
            pseudo_labels: (0..n).map(|i| i % 2).collect(),
            confidences: vec![0.9; n],
        }
    }

    #[test]
    fn domain_ids_must_increase() {
        let mut m = DomainMemory::new();
        m.push(memory(2, 3)).unwrap();
        assert!(m.push(memory(2, 3)).is_err());
        assert!(m.push(memory(1, 3)).is_err());
        m.push(memory(3, 4)).unwrap();
        assert_eq!(m.total_len(), 7);
    }

    #[test]
    fn full_draw_returns_everything() {
        let mut m = DomainMemory::new();
        m.push(memory(1, 3)).unwrap();
        m.push(memory(2, 4)).unwrap();
        let mb = m.sample_batch(7, 5).unwrap();
        let mut keys = mb.samples.clone();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 7);
        let again = m.sample_batch(7, 5).unwrap();
        assert_eq!(mb.batch, again.batch);
        // with replacement past the total
        assert_eq!(m.sample_batch(20, 1).unwrap().batch.len(), 20);
    }

    #[test]
    fn empty_memory_errors() {
        let m = DomainMemory::new();
        assert!(matches!(m.sample_batch(4, 0), Err(GrclError::EmptyMemory)));
    }

    #[test]
    fn memory_csv_round_trip() {
        let mut m = DomainMemory::new();
        m.push(memory(1, 3)).unwrap();
        m.push(memory(4, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mem.csv");
        m.save_csv(&p).unwrap();
        assert_eq!(DomainMemory::load_csv(&p, 2).unwrap(), m);
        assert!(DomainMemory::load_csv(&p, 1).is_err());
    }
}
