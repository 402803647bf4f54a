//! Tabular datasets: CSV loading, splitting, standardization and synthetic generation.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gc::csv_err;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which CSV column holds the class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelColumn {
    Last,
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label: LabelColumn,
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            has_header: true,
            label: LabelColumn::Last,
            delimiter: b',',
        }
    }
}

/// Features `(n, d)` with integer labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub features: Tensor<S>,
    pub labels: Vec<usize>,
    /// Original label text for each class index.
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
}

/// Per-feature affine map fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<S> {
    pub train: Dataset<S>,
    /// `None` when the split received no rows.
    pub val: Option<Dataset<S>>,
    pub test: Option<Dataset<S>>,
    /// Row indices into the source dataset.
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub standardizer: Standardizer,
}

fn sort_classes(names: BTreeSet<String>) -> Vec<String> {
    let mut names: Vec<String> = names.into_iter().collect();
    if names.iter().all(|s| s.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    names
}

impl<S: Scalar> Dataset<S> {
    pub fn new(features: Tensor<S>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.dim(0) != labels.len() {
            return Err(Error::dim(format!(
                "features {:?} with {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
        }
        let d = features.dim(1);
        Ok(Dataset {
            features,
            labels,
            class_names: (0..classes).map(|c| c.to_string()).collect(),
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.dim(1)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, opts)
    }

    /// Parses numeric features; label values may be any text and are mapped
    /// to indices in sorted order (numeric order when all labels are numbers).
    pub fn read_csv<R: Read>(r: R, opts: &CsvOptions) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(opts.has_header)
            .delimiter(opts.delimiter)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(r);
        let header: Option<Vec<String>> = if opts.has_header {
            Some(rd.headers().map_err(csv_err)?.iter().map(str::to_owned).collect())
        } else {
            None
        };
        let mut width = header.as_ref().map(Vec::len);
        let mut label_col = None;
        let mut rows: Vec<f64> = Vec::new();
        let mut raw_labels = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let w = *width.get_or_insert(rec.len());
            if rec.len() != w {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields, found {}", rec.len()),
                });
            }
            let lc = match label_col {
                Some(c) => c,
                None => {
                    let c = match &opts.label {
                        LabelColumn::Last => w.checked_sub(1).ok_or_else(|| Error::arg("empty row"))?,
                        LabelColumn::Index(i) if *i < w => *i,
                        LabelColumn::Index(i) => {
                            return Err(Error::Schema(format!("label column {i} out of range for {w} columns")))
                        }
                        LabelColumn::Name(n) => header
                            .as_ref()
                            .and_then(|h| h.iter().position(|c| c == n))
                            .ok_or_else(|| Error::Schema(format!("no column named {n:?}")))?,
                    };
                    if w < 2 {
                        return Err(Error::Schema(
                            "need at least one feature column besides the label".into(),
                        ));
                    }
                    *label_col.insert(c)
                }
            };
            for (j, field) in rec.iter().enumerate() {
                if j == lc {
                    raw_labels.push(field.to_owned());
                    continue;
                }
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {}: {field:?} is not a number", j + 1),
                })?;
                rows.push(v);
            }
        }
        let (w, lc) = match (width, label_col) {
            (Some(w), Some(lc)) => (w, lc),
            _ => return Err(Error::arg("CSV has no data rows")),
        };
        let class_names = sort_classes(raw_labels.iter().cloned().collect());
        let labels = raw_labels
            .iter()
            .map(|l| class_names.iter().position(|c| c == l).expect("collected"))
            .collect::<Vec<_>>();
        let n = labels.len();
        let feature_names = match header {
            Some(h) => h
                .into_iter()
                .enumerate()
                .filter(|(j, _)| *j != lc)
                .map(|(_, s)| s)
                .collect(),
            None => (0..w - 1).map(|j| format!("f{j}")).collect(),
        };
        Ok(Dataset {
            features: Tensor::new(vec![n, w - 1], rows.into_iter().map(S::of).collect())?,
            labels,
            class_names,
            feature_names,
        })
    }

    /// Writes features followed by a `label` column holding the class names.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut head = self.feature_names.clone();
        head.push("label".into());
        wr.write_record(&head).map_err(csv_err)?;
        let d = self.num_features();
        for (row, &y) in self.features.data().chunks(d).zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
            rec.push(self.class_names[y].clone());
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let labels = idx
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::arg(format!("row {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            features: self.features.gather_rows(idx)?,
            labels,
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Shuffles rows with `seed`, splits by `fractions` (train, val, test) and
    /// standardizes every split with statistics of the training rows.
    pub fn split_standardize(&self, fractions: [f64; 3], seed: u64) -> Result<Splits<S>> {
        if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!(
                "split fractions {fractions:?} must be >= 0 and sum to 1"
            )));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        SeededRng::new(seed).shuffle(&mut idx);
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        if n_train == 0 {
            return Err(Error::arg(format!(
                "fractions {fractions:?} leave no training rows out of {n}"
            )));
        }
        let test_idx = idx.split_off(n_train + n_val);
        let val_idx = idx.split_off(n_train);
        let train_idx = idx;

        let train = self.subset(&train_idx)?;
        let standardizer = Standardizer::fit(&train.features);
        let prep = |rows: &[usize]| -> Result<Option<Dataset<S>>> {
            if rows.is_empty() {
                return Ok(None);
            }
            let mut d = self.subset(rows)?;
            d.features = standardizer.apply(&d.features)?;
            Ok(Some(d))
        };
        Ok(Splits {
            train: prep(&train_idx)?.expect("non-empty"),
            val: prep(&val_idx)?,
            test: prep(&test_idx)?,
            train_idx,
            val_idx,
            test_idx,
            standardizer,
        })
    }
}

impl Standardizer {
    /// Population mean and standard deviation per column; a zero deviation becomes 1.
    pub fn fit<S: Scalar>(x: &Tensor<S>) -> Self {
        let (n, d) = (x.dim(0), x.dim(1));
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    fn map<S: Scalar>(&self, x: &Tensor<S>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<S>> {
        let d = self.mean.len();
        if x.rank() != 2 || x.dim(1) != d {
            return Err(Error::dim(format!(
                "features {:?} for a {d}-column standardizer",
                x.shape()
            )));
        }
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| S::of(f(v.as_f64(), self.mean[j], self.std[j])))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn apply<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn invert<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.map(x, |v, m, s| v * s + m)
    }
}

/// Gaussian features whose label depends only on the first `informative` columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub informative: usize,
    pub classes: usize,
    /// Probability of replacing a label with a uniformly drawn class.
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.features == 0 || self.classes < 2 {
            return Err(Error::Config("need samples >= 1, features >= 1, classes >= 2".into()));
        }
        if self.informative == 0 || self.informative > self.features {
            return Err(Error::Config(format!(
                "informative features must be in 1..={}, got {}",
                self.features, self.informative
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} outside [0, 1]",
                self.label_noise
            )));
        }
        Ok(())
    }

    /// Labels are the argmax of a random linear map of the informative columns.
    pub fn generate<S: Scalar>(&self) -> Result<Dataset<S>> {
        self.validate()?;
        let root = SeededRng::new(self.seed);
        let mut feat_rng = root.split(0);
        let mut map_rng = root.split(1);
        let mut noise_rng = root.split(2);
        let (n, d, k, c) = (self.samples, self.features, self.informative, self.classes);
        let mut noise_col_rng = root.split(3);
        let mut x = Vec::with_capacity(n * d);
        for _ in 0..n {
            x.extend((0..k).map(|_| feat_rng.normal()));
            x.extend((k..d).map(|_| noise_col_rng.normal()));
        }
        let x = Tensor::new(vec![n, d], x)?;
        let w: Vec<f64> = (0..c * k).map(|_| map_rng.normal()).collect();
        let labels = x
            .data()
            .chunks(d)
            .map(|row| {
                let score = |cls: usize| -> f64 { (0..k).map(|j| w[cls * k + j] * row[j]).sum() };
                let clean = (0..c).max_by(|&a, &b| score(a).total_cmp(&score(b))).expect("c >= 2");
                if noise_rng.uniform() < self.label_noise {
                    noise_rng.below(c)
                } else {
                    clean
                }
            })
            .collect();
        Dataset::new(x.cast(), labels, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "a,b,class\n1,2,cat\n3,4,dog\n5,6,cat\n7,8,emu\n";

    #[test]
    fn reads_header_and_maps_classes() {
        let d = Dataset::<f64>::read_csv(CSV.as_bytes(), &CsvOptions::default()).unwrap();
        assert_eq!(d.features.shape(), &[4, 2]);
        assert_eq!(d.labels, vec![0, 1, 0, 2]);
        assert_eq!(d.class_names, vec!["cat", "dog", "emu"]);
        assert_eq!(d.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn label_by_name_or_index() {
        let text = "y,x\n2,0.5\n10,1.5\n";
        let by_name = CsvOptions {
            label: LabelColumn::Name("y".into()),
            ..CsvOptions::default()
        };
        let d = Dataset::<f64>::read_csv(text.as_bytes(), &by_name).unwrap();
        assert_eq!(d.class_names, vec!["2", "10"]);
        assert_eq!(d.features.data(), &[0.5, 1.5]);
        let by_idx = CsvOptions {
            has_header: false,
            label: LabelColumn::Index(0),
            ..CsvOptions::default()
        };
        let d = Dataset::<f64>::read_csv("1,9\n0,8\n".as_bytes(), &by_idx).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
    }

    #[test]
    fn ragged_and_bad_rows_report_lines() {
        let e = Dataset::<f64>::read_csv("a,b,y\n1,2,0\n1,0\n".as_bytes(), &CsvOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = Dataset::<f64>::read_csv("a,b,y\n1,x,0\n".as_bytes(), &CsvOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
    }

    #[test]
    fn split_is_partition_and_standardized_on_train() {
        let d = SyntheticSpec {
            samples: 200,
            features: 3,
            informative: 2,
            classes: 3,
            label_noise: 0.0,
            seed: 1,
        }
        .generate::<f64>()
        .unwrap();
        let s = d.split_standardize([0.7, 0.15, 0.15], 5).unwrap();
        let (val, test) = (s.val.as_ref().unwrap(), s.test.as_ref().unwrap());
        assert_eq!((s.train.len(), val.len(), test.len()), (140, 30, 30));
        let mut all: Vec<usize> = [&s.train_idx, &s.val_idx, &s.test_idx]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        let fitted = Standardizer::fit(&s.train.features);
        for j in 0..3 {
            assert!(fitted.mean[j].abs() < 1e-12);
            assert!((fitted.std[j] - 1.0).abs() < 1e-12);
        }
        let back = s.standardizer.invert(&test.features).unwrap();
        let orig = d.subset(&s.test_idx).unwrap().features;
        assert!(back.max_abs_diff(&orig).unwrap() < 1e-12);
        assert_eq!(d.split_standardize([0.7, 0.15, 0.15], 5).unwrap(), s);
    }

    #[test]
    fn constant_column_gets_unit_scale() {
        let x = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let st = Standardizer::fit(&x);
        assert_eq!(st.std[1], 1.0);
        assert_eq!(st.apply(&x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn bad_fractions() {
        let d = Dataset::<f64>::read_csv(CSV.as_bytes(), &CsvOptions::default()).unwrap();
        assert!(matches!(
            d.split_standardize([0.5, 0.5, 0.5], 0),
            Err(Error::Argument(_))
        ));
        let all = d.split_standardize([1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(all.train.len(), 4);
        assert!(all.val.is_none() && all.test.is_none());
    }

    #[test]
    fn semicolon_delimiter_and_unknown_column() {
        let opts = CsvOptions {
            delimiter: b';',
            ..CsvOptions::default()
        };
        let d = Dataset::<f64>::read_csv("x;y\n1.5;a\n2.5;b\n".as_bytes(), &opts).unwrap();
        assert_eq!(d.features.data(), &[1.5, 2.5]);
        let opts = CsvOptions {
            label: LabelColumn::Name("nope".into()),
            ..CsvOptions::default()
        };
        assert!(matches!(
            Dataset::<f64>::read_csv(CSV.as_bytes(), &opts),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn seven_classes_remap() {
        let mut text = String::from("a,cover\n");
        for (i, c) in [7, 3, 1, 5, 2, 6, 4, 7].iter().enumerate() {
            text.push_str(&format!("{i},{c}\n"));
        }
        let d = Dataset::<f64>::read_csv(text.as_bytes(), &CsvOptions::default()).unwrap();
        assert_eq!(d.class_names, vec!["1", "2", "3", "4", "5", "6", "7"]);
        assert_eq!(d.labels, vec![6, 2, 0, 4, 1, 5, 3, 6]);
    }

    #[test]
    fn synthetic_labels_ignore_noise_columns() {
        let spec = SyntheticSpec {
            samples: 300,
            features: 6,
            informative: 2,
            classes: 3,
            label_noise: 0.0,
            seed: 3,
        };
        let d = spec.generate::<f64>().unwrap();
        let narrow = SyntheticSpec {
            features: 2,
            ..spec.clone()
        }
        .generate::<f64>()
        .unwrap();
        assert_eq!(narrow.labels, d.labels);
        for (a, b) in d.features.data().chunks(6).zip(narrow.features.data().chunks(2)) {
            assert_eq!(&a[..2], b);
        }
        assert_eq!(spec.generate::<f64>().unwrap(), d);
        let mut csv = Vec::new();
        d.write_csv(&mut csv).unwrap();
        let back = Dataset::<f64>::read_csv(csv.as_slice(), &CsvOptions::default()).unwrap();
        assert_eq!(back.labels, d.labels);
        assert!(back.features.max_abs_diff(&d.features).unwrap() == 0.0);
    }
}
