//! Synthetic domain sequences, vector augmentation and dataset files.
//!
//! The source domain is a Gaussian mixture with one component per class,
//! means evenly spaced on a circle of radius `radius` in the `(x0, x1)`
//! plane. A target domain draws from the same class-conditional process and
//! then applies its own affine map: scale, rotation in the `(x0, x1)` plane,
//! translation.
//!
//! Dataset file format (one file per domain):
//!
//! ```text
//! domain_id,split,label,x0,...,x{d-1}
//! 0,train,3,1.0000000000000000e0,...
//! 2,train,,5.2000000000000002e-1,...      <- unlabeled target row
//! 2,test,1,...
//! ```
//!
//! Values are written with 17 significant digits so a save/load round trip
//! is bit-exact.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GrclError, Result};
use crate::model::Batch;
use crate::rng;

/// Label-preserving perturbation used to build positive pairs: scale by a
/// uniform draw from `[scale_min, scale_max]`, then add `N(0, noise_sigma²)`
/// per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentStrength {
    pub noise_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentStrength {
    /// The identity augmentation.
    fn default() -> Self {
        AugmentStrength {
            noise_sigma: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

impl AugmentStrength {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(self.scale_min > 0.0) || self.scale_max < self.scale_min {
            return Err(GrclError::InvalidConfig(format!(
                "augmentation needs sigma >= 0 and 0 < scale_min <= scale_max, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn augment(x: ArrayView1<'_, f64>, strength: &AugmentStrength, seed: u64) -> Array1<f64> {
    let mut rng = rng::seeded(seed, 0xa7);
    augment_with(x, strength, &mut rng)
}

fn augment_with<R: Rng>(x: ArrayView1<'_, f64>, strength: &AugmentStrength, rng: &mut R) -> Array1<f64> {
    let s = if strength.scale_max > strength.scale_min {
        rng.random_range(strength.scale_min..=strength.scale_max)
    } else {
        strength.scale_min
    };
    x.mapv(|v| {
        let n: f64 = rng.sample(StandardNormal);
        v * s + strength.noise_sigma * n
    })
}

/// Augments every row with its own sub-seed derived from `(seed, row)`.
pub fn augment_rows(x: ArrayView2<'_, f64>, strength: &AugmentStrength, seed: u64) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, (row, mut dst)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
        dst.assign(&augment(row, strength, rng::mix(seed, i as u64)));
    }
    out
}

/// Affine shift applied to a domain's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    /// Radians, in the `(x0, x1)` plane.
    pub rotation: f64,
    /// Added after rotation; empty means zero.
    pub translation: Vec<f64>,
    pub scale: f64,
    /// Per-coordinate standard deviation of the class-conditional noise.
    pub noise: f64,
}

impl DomainTransform {
    pub fn identity(noise: f64) -> Self {
        DomainTransform {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise,
        }
    }

    pub fn rotated(degrees: f64, noise: f64) -> Self {
        DomainTransform {
            rotation: degrees.to_radians(),
            ..DomainTransform::identity(noise)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSequenceSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub source: DomainTransform,
    pub targets: Vec<DomainTransform>,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub radius: f64,
    pub seed: u64,
}

impl DomainSequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GrclError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.input_dim < 2 {
            return bad("input_dim must be >= 2".into());
        }
        if self.targets.is_empty() {
            return bad("at least one target domain is required".into());
        }
        if self.train_per_domain < self.num_classes || self.test_per_domain < self.num_classes {
            return bad("train/test sizes must be >= num_classes".into());
        }
        if !(self.radius > 0.0) {
            return bad("radius must be > 0".into());
        }
        for (i, t) in std::iter::once(&self.source).chain(&self.targets).enumerate() {
            if !(t.scale > 0.0) || !(t.noise >= 0.0) || !t.rotation.is_finite() {
                return bad(format!("domain {i}: need scale > 0, noise >= 0"));
            }
            if !t.translation.is_empty() && t.translation.len() != self.input_dim {
                return bad(format!(
                    "domain {i}: translation has {} entries, input_dim is {}",
                    t.translation.len(),
                    self.input_dim
                ));
            }
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    fn class_mean(&self, class: usize) -> Array1<f64> {
        let angle = 2.0 * PI * class as f64 / self.num_classes as f64;
        let mut m = Array1::zeros(self.input_dim);
        m[0] = self.radius * angle.cos();
        m[1] = self.radius * angle.sin();
        m
    }
}

/// One domain. Target training labels are kept for bookkeeping only; the
/// adaptation path reads training data through [`DomainDataset::training_labels`],
/// which hides them.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain_id: u32,
    train_inputs: Array2<f64>,
    train_labels: Option<Vec<usize>>,
    test: Batch,
    labeled_for_training: bool,
}

impl DomainDataset {
    pub fn new(
        domain_id: u32,
        train_inputs: Array2<f64>,
        train_labels: Option<Vec<usize>>,
        test: Batch,
    ) -> Result<Self> {
        if test.labels.is_none() {
            return Err(GrclError::InvalidInput("test split must be labeled".into()));
        }
        if train_inputs.ncols() != test.inputs.ncols() {
            return Err(GrclError::DimensionMismatch {
                what: "train/test columns",
                expected: test.inputs.ncols(),
                found: train_inputs.ncols(),
            });
        }
        if let Some(l) = &train_labels {
            if l.len() != train_inputs.nrows() {
                return Err(GrclError::DimensionMismatch {
                    what: "train labels",
                    expected: train_inputs.nrows(),
                    found: l.len(),
                });
            }
        }
        let labeled_for_training = domain_id == 0;
        if labeled_for_training && train_labels.is_none() {
            return Err(GrclError::InvalidInput(
                "source domain needs training labels".into(),
            ));
        }
        Ok(DomainDataset {
            domain_id,
            train_inputs,
            train_labels,
            test,
            labeled_for_training,
        })
    }

    pub fn domain_id(&self) -> u32 {
        self.domain_id
    }

    pub fn is_source(&self) -> bool {
        self.labeled_for_training
    }

    pub fn labeled_for_training(&self) -> bool {
        self.labeled_for_training
    }

    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn train_len(&self) -> usize {
        self.train_inputs.nrows()
    }

    pub fn train_inputs(&self) -> &Array2<f64> {
        &self.train_inputs
    }

    /// Training labels, available for the source domain only.
    pub fn training_labels(&self) -> Option<&[usize]> {
        if self.labeled_for_training {
            self.train_labels.as_deref()
        } else {
            None
        }
    }

    /// The labeled training batch of the source domain.
    pub fn source_batch(&self) -> Result<Batch> {
        let labels = self
            .training_labels()
            .ok_or_else(|| GrclError::InvalidInput("domain is not labeled for training".into()))?;
        Batch::new(self.train_inputs.clone(), Some(labels.to_vec()))
    }

    pub fn test(&self) -> &Batch {
        &self.test
    }

    /// Ground-truth training labels regardless of domain role. Evaluation
    /// and diagnostics only.
    pub fn evaluation_train_labels(&self) -> Option<&[usize]> {
        self.train_labels.as_deref()
    }
}

/// Source plus one dataset per target, `domain_id` = position.
pub fn generate_sequence(spec: &DomainSequenceSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    std::iter::once(&spec.source)
        .chain(&spec.targets)
        .enumerate()
        .map(|(id, transform)| generate_domain(spec, id as u32, transform))
        .collect()
}

fn generate_domain(spec: &DomainSequenceSpec, id: u32, t: &DomainTransform) -> Result<DomainDataset> {
    let mut rng = rng::seeded(spec.seed, 1 + id as u64);
    let (cos, sin) = (t.rotation.cos(), t.rotation.sin());
    let d = spec.input_dim;
    let mut draw = |n: usize| {
        let mut x = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let y = i % spec.num_classes;
            labels.push(y);
            let mut v = spec.class_mean(y);
            for vi in v.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *vi += t.noise * n;
            }
            v *= t.scale;
            let (a, b) = (v[0], v[1]);
            v[0] = cos * a - sin * b;
            v[1] = sin * a + cos * b;
            if !t.translation.is_empty() {
                v += &ArrayView1::from(&t.translation[..]);
            }
            row.assign(&v);
        }
        (x, labels)
    };
    let (train, train_labels) = draw(spec.train_per_domain);
    let (test, test_labels) = draw(spec.test_per_domain);
    DomainDataset::new(id, train, Some(train_labels), Batch::new(test, Some(test_labels))?)
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| GrclError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| GrclError::io(path, e);
    let mut header = String::from("domain_id,split,label");
    for j in 0..ds.input_dim() {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    let mut emit = |split: &str, x: &Array2<f64>, labels: Option<&[usize]>| -> Result<()> {
        for (i, row) in x.rows().into_iter().enumerate() {
            let label = labels.map(|l| l[i].to_string()).unwrap_or_default();
            write!(w, "{},{split},{label}", ds.domain_id).map_err(io)?;
            for v in row {
                write!(w, ",{v:.16e}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        Ok(())
    };
    emit("train", &ds.train_inputs, ds.train_labels.as_deref())?;
    emit("test", &ds.test.inputs, ds.test.labels.as_deref())?;
    w.flush().map_err(io)
}

/// Reads one domain file. `num_classes` bounds the labels.
pub fn load_dataset(path: &Path, num_classes: usize) -> Result<DomainDataset> {
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
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 4 || cols[..3] != ["domain_id", "split", "label"] {
        return Err(err(1, "expected header domain_id,split,label,x0,...".into()));
    }
    let dim = cols.len() - 3;
    for (j, c) in cols[3..].iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(err(1, format!("column {} should be x{j}, found {c:?}", j + 3)));
        }
    }

    let mut domain_id: Option<u32> = None;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| GrclError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != dim + 3 {
            return Err(err(
                lineno,
                format!("expected {} fields, found {}", dim + 3, fields.len()),
            ));
        }
        let id: u32 = fields[0]
            .parse()
            .map_err(|e| err(lineno, format!("bad domain_id {:?}: {e}", fields[0])))?;
        match domain_id {
            None => domain_id = Some(id),
            Some(d) if d != id => {
                return Err(err(lineno, format!("domain_id {id} differs from {d}")))
            }
            _ => {}
        }
        let label = if fields[2].is_empty() {
            None
        } else {
            let l: usize = fields[2]
                .parse()
                .map_err(|e| err(lineno, format!("bad label {:?}: {e}", fields[2])))?;
            if l >= num_classes {
                return Err(err(lineno, format!("label {l} >= num_classes {num_classes}")));
            }
            Some(l)
        };
        let target = match fields[1] {
            "train" => &mut train,
            "test" => &mut test,
            other => return Err(err(lineno, format!("unknown split {other:?}"))),
        };
        for f in &fields[3..] {
            target.0.push(
                f.parse::<f64>()
                    .map_err(|e| err(lineno, format!("bad value {f:?}: {e}")))?,
            );
        }
        if fields[1] == "test" && label.is_none() {
            return Err(err(lineno, "test rows must be labeled".into()));
        }
        target.1.push((lineno, label));
    }

    let domain_id = domain_id.ok_or_else(|| err(2, "no data rows".into()))?;
    let to_matrix = |flat: Vec<f64>| {
        let n = flat.len() / dim;
        Array2::from_shape_vec((n, dim), flat).expect("row width checked per line")
    };
    let train_labels = collect_labels(&train.1, domain_id == 0).map_err(|(l, m)| err(l, m))?;
    let test_labels: Vec<usize> = test.1.iter().map(|(_, l)| l.expect("checked")).collect();
    if test_labels.is_empty() {
        return Err(err(1, "no test rows".into()));
    }
    let test_batch = Batch::new(to_matrix(test.0), Some(test_labels))?;
    DomainDataset::new(domain_id, to_matrix(train.0), train_labels, test_batch)
}

/// All-or-nothing: training labels are either present on every row or on
/// none. The source must be fully labeled.
fn collect_labels(
    rows: &[(usize, Option<usize>)],
    is_source: bool,
) -> std::result::Result<Option<Vec<usize>>, (usize, String)> {
    let labeled = rows.iter().filter(|(_, l)| l.is_some()).count();
    if labeled == 0 && !is_source {
        return Ok(None);
    }
    if let Some((line, _)) = rows.iter().find(|(_, l)| l.is_none()) {
        let msg = if is_source {
            "source training rows must be labeled"
        } else {
            "training labels must be given on all rows or none"
        };
        return Err((*line, msg.into()));
    }
    Ok(Some(rows.iter().map(|(_, l)| l.expect("checked")).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(targets: Vec<DomainTransform>) -> DomainSequenceSpec {
        DomainSequenceSpec {
            num_classes: 3,
            input_dim: 2,
            source: DomainTransform::identity(0.1),
            targets,
            train_per_domain: 30,
            test_per_domain: 12,
            radius: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let x = array![1.5, -2.0, 0.25];
        assert_eq!(augment(x.view(), &AugmentStrength::default(), 3), x);
    }

    #[test]
    fn augmentation_is_deterministic_and_keeps_dim() {
        let s = AugmentStrength {
            noise_sigma: 0.3,
            scale_min: 0.8,
            scale_max: 1.2,
        };
        let x = array![1.0, 2.0, 3.0, 4.0];
        let a = augment(x.view(), &s, 99);
        assert_eq!(a, augment(x.view(), &s, 99));
        assert_ne!(a, augment(x.view(), &s, 100));
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let s = spec(vec![DomainTransform::rotated(30.0, 0.1), DomainTransform::rotated(60.0, 0.1)]);
        let a = generate_sequence(&s).unwrap();
        let b = generate_sequence(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a[0].is_source() && !a[1].is_source());
        assert_eq!(a[1].train_len(), 30);
        assert_eq!(a[2].test().len(), 12);
        assert!(a[1].training_labels().is_none());
        assert!(a[1].evaluation_train_labels().is_some());
    }

    #[test]
    fn zero_noise_rotation_maps_class_means() {
        let mut s = spec(vec![DomainTransform::rotated(90.0, 0.0)]);
        s.source.noise = 0.0;
        let ds = generate_sequence(&s).unwrap();
        // class 0 mean (1, 0) rotated by 90 degrees is (0, 1)
        let row = ds[1].train_inputs().row(0);
        assert!(row[0].abs() < 1e-12 && (row[1] - 1.0).abs() < 1e-12);
        let src = ds[0].train_inputs().row(0);
        assert_eq!(src.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(vec![]);
        assert!(s.validate().is_err());
        s.targets.push(DomainTransform {
            scale: 0.0,
            ..DomainTransform::identity(0.1)
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = spec(vec![DomainTransform::rotated(45.0, 0.2)]);
        let ds = generate_sequence(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for d in &ds {
            let path = dir.path().join(format!("d{}.csv", d.domain_id()));
            save_dataset(d, &path).unwrap();
            assert_eq!(&load_dataset(&path, 3).unwrap(), d);
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.csv",
            "domain_id,split,label,x0,x1\n2,train,,0.5,-1\n2,train,,3e-1,2.25\n2,test,1,-0.125,4\n",
        );
        let ds = load_dataset(&p, 2).unwrap();
        assert_eq!(ds.domain_id(), 2);
        assert!(!ds.labeled_for_training());
        assert_eq!(ds.train_inputs(), &array![[0.5, -1.0], [0.3, 2.25]]);
        assert_eq!(ds.test().inputs, array![[-0.125, 4.0]]);
        assert_eq!(ds.test().labels, Some(vec![1]));
        assert!(ds.evaluation_train_labels().is_none());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("domain_id,split,x0\n", 1),
            ("domain_id,split,label,x0,x1\n1,train,0,0.5\n", 2),
            ("domain_id,split,label,x0\n1,train,0,0.5\n1,test,7,1.0\n", 3),
            ("domain_id,split,label,x0\n0,train,,0.5\n0,test,0,1.0\n", 2),
            ("domain_id,split,label,x0\n1,valid,0,0.5\n", 2),
        ];
        for (i, (body, line)) in cases.iter().enumerate() {
            let p = write(dir.path(), &format!("bad{i}.csv"), body);
            match load_dataset(&p, 3) {
                Err(GrclError::Parse { line: l, .. }) => assert_eq!(l, *line, "case {i}"),
                other => panic!("case {i}: expected parse error, got {other:?}"),
            }
        }
    }
}
