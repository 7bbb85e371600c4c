//! Datasets and membership splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major feature matrix with integer class labels and stable row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Builds a dataset with ids `0..n`.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ids = (0..rows.len() as u64).collect();
        Self::with_ids(rows, labels, ids, num_classes)
    }

    pub fn with_ids(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("dataset must have at least one row"));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::invalid("dataset must have at least one feature column"));
        }
        if labels.len() != n || ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if labels.len() != n { labels.len() } else { ids.len() },
            });
        }
        let mut features = Vec::with_capacity(n * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("feature values must be finite"));
            }
            features.extend(row);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let unique: BTreeSet<u64> = ids.iter().copied().collect();
        if unique.len() != n {
            return Err(Error::invalid("row ids must be unique"));
        }
        Ok(Self {
            features,
            dim,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row positions whose id is in `ids`, in dataset order.
    pub fn positions_of(&self, ids: &BTreeSet<u64>) -> Vec<usize> {
        (0..self.len()).filter(|&i| ids.contains(&self.ids[i])).collect()
    }

    /// Rows at `positions`, keeping their ids.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let rows = positions.iter().map(|&i| self.row(i).to_vec()).collect();
        let labels = positions.iter().map(|&i| self.labels[i]).collect();
        let ids = positions.iter().map(|&i| self.ids[i]).collect();
        Self::with_ids(rows, labels, ids, self.num_classes)
    }

    /// Rows whose id is in `ids`, keeping dataset order.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> Result<Self> {
        self.select(&self.positions_of(ids))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        header.push(label_column.to_string());
        w.write_record(&header)?;
        for (row, label) in self.rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Gaussian blobs, one per class. Class means sit on the unit circle in the
/// first two coordinates at equal angular spacing (zeros elsewhere); in one
/// dimension they are spread evenly over `[-1, 1]`. Rows interleave classes.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be at least 2"));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::invalid("per_class and dim must be at least 1"));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::invalid(format!("spread must be positive and finite, got {spread}")));
    }
    let means = class_means(num_classes, dim);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::seeded(seed);
    let n = num_classes * per_class;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let row: Vec<f64> = means[class]
            .iter()
            .map(|m| m + noise.sample(&mut rng))
            .collect();
        rows.push(row);
        labels.push(class);
    }
    LabeledDataset::new(rows, labels, num_classes)
}

fn class_means(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut mean = vec![0.0; dim];
            if dim == 1 {
                mean[0] = -1.0 + 2.0 * c as f64 / (num_classes - 1) as f64;
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                mean[0] = angle.cos();
                mean[1] = angle.sin();
            }
            mean
        })
        .collect()
}

/// Reads a labelled CSV (header row required). Every column except
/// `label_column` must be numeric; labels are class indices.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::UnknownColumn(label_column.to_string()))?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(header.len() - 1);
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == label_idx {
                let label = cell.parse::<usize>().map_err(|_| Error::ParseLabel {
                    row: r + 1,
                    value: cell.to_string(),
                })?;
                labels.push(label);
            } else {
                row.push(parse_cell(cell, r + 1, &header[c])?);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} has no data rows", path.display())));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(rows, labels, num_classes)
}

/// Reads a purely numeric CSV, optionally restricted to named columns (in
/// the order given). Returns the rows and the column names used.
pub fn read_numeric_csv(
    path: impl AsRef<Path>,
    columns: Option<&[String]>,
) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let selected: Vec<usize> = match columns {
        None => (0..header.len()).collect(),
        Some(names) => names
            .iter()
            .map(|name| {
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::UnknownColumn(name.clone()))
            })
            .collect::<Result<_>>()?,
    };
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = selected
            .iter()
            .map(|&c| {
                let cell = record.get(c).unwrap_or("").trim();
                parse_cell(cell, r + 1, &header[c])
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let names = selected.iter().map(|&c| header[c].clone()).collect();
    Ok((rows, names))
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::ParseCell {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

/// Which ids of a pool were used for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipSplit {
    pub member_ids: BTreeSet<u64>,
    pub pool_ids: Vec<u64>,
}

impl MembershipSplit {
    pub fn is_member(&self, id: u64) -> bool {
        self.member_ids.contains(&id)
    }

    /// Ground-truth membership indicator over `pool_ids`.
    pub fn ground_truth(&self) -> Vec<bool> {
        self.pool_ids.iter().map(|id| self.is_member(*id)).collect()
    }

    pub fn non_member_ids(&self) -> BTreeSet<u64> {
        self.pool_ids
            .iter()
            .copied()
            .filter(|id| !self.member_ids.contains(id))
            .collect()
    }
}

/// Stratified draw of `round(member_fraction * n)` members without
/// replacement. Per-class quotas use largest remainders so each class is
/// within one example of exact proportionality.
pub fn split_membership(
    dataset: &LabeledDataset,
    member_fraction: f64,
    seed: u64,
) -> Result<MembershipSplit> {
    if !(member_fraction > 0.0 && member_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "member_fraction must be in (0, 1), got {member_fraction}"
        )));
    }
    let n = dataset.len();
    let total = (member_fraction * n as f64).round() as usize;

    let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for i in 0..n {
        by_class.entry(dataset.label(i)).or_default().push(dataset.id(i));
    }

    let exact: Vec<(usize, f64)> = by_class
        .iter()
        .map(|(&c, ids)| (c, total as f64 * ids.len() as f64 / n as f64))
        .collect();
    let mut quota: BTreeMap<usize, usize> =
        exact.iter().map(|&(c, q)| (c, q.floor() as usize)).collect();
    let assigned: usize = quota.values().sum();
    let mut remainders: Vec<(usize, f64)> =
        exact.iter().map(|&(c, q)| (c, q - q.floor())).collect();
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(c, _) in remainders.iter().take(total - assigned) {
        *quota.get_mut(&c).unwrap() += 1;
    }

    let mut rng = rng::seeded(seed);
    let mut member_ids = BTreeSet::new();
    for (c, ids) in &by_class {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        member_ids.extend(ids.into_iter().take(quota[c]));
    }
    Ok(MembershipSplit {
        member_ids,
        pool_ids: dataset.ids().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_requested_shape() {
        let ds = synth_blobs(2, 5, 2, 0.1, 7).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.class_counts(), vec![5, 5]);
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(2, 5, 2, 0.1, 7).unwrap();
        let b = synth_blobs(2, 5, 2, 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_blobs(2, 5, 2, 0.1, 8).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn blobs_reject_bad_arguments() {
        assert!(synth_blobs(1, 5, 2, 0.1, 0).is_err());
        assert!(synth_blobs(2, 0, 2, 0.1, 0).is_err());
        assert!(synth_blobs(2, 5, 2, 0.0, 0).is_err());
        assert!(synth_blobs(2, 5, 2, f64::NAN, 0).is_err());
        assert!(synth_blobs(2, 5, 2, f64::INFINITY, 0).is_err());
    }

    #[test]
    fn one_nearest_neighbour_separates_blobs() {
        let train = synth_blobs(3, 100, 4, 0.3, 1).unwrap();
        let test = synth_blobs(3, 100, 4, 0.3, 2).unwrap();
        let mut correct = 0;
        for i in 0..test.len() {
            let q = test.row(i);
            let nearest = (0..train.len())
                .min_by(|&a, &b| {
                    let da: f64 = train.row(a).iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = train.row(b).iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            if train.label(nearest) == test.label(i) {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "1-NN accuracy {acc}");
    }

    #[test]
    fn dataset_validates_invariants() {
        assert!(LabeledDataset::new(vec![], vec![], 2).is_err());
        assert!(LabeledDataset::new(vec![vec![1.0]], vec![2], 2).is_err());
        assert!(LabeledDataset::new(vec![vec![f64::NAN]], vec![0], 2).is_err());
        assert!(LabeledDataset::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0, 1], 2).is_err());
        assert!(
            LabeledDataset::with_ids(vec![vec![1.0], vec![2.0]], vec![0, 1], vec![3, 3], 2)
                .is_err()
        );
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = synth_blobs(2, 5, 2, 0.1, 0).unwrap();
        let a = split_membership(&ds, 0.5, 3).unwrap();
        let b = split_membership(&ds, 0.5, 3).unwrap();
        assert_eq!(a.member_ids.len(), 5);
        assert_eq!(a, b);
        assert_eq!(a.ground_truth().len(), 10);
        assert!(a.member_ids.iter().all(|id| a.pool_ids.contains(id)));
    }

    #[test]
    fn split_is_stratified() {
        let ds = synth_blobs(2, 100, 2, 0.1, 0).unwrap();
        for seed in 0..20 {
            let split = split_membership(&ds, 0.5, seed).unwrap();
            let members = ds.subset(&split.member_ids).unwrap();
            for count in members.class_counts() {
                assert!((49..=51).contains(&count), "class count {count}");
            }
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = synth_blobs(2, 5, 2, 0.1, 0).unwrap();
        assert!(split_membership(&ds, 0.0, 0).is_err());
        assert!(split_membership(&ds, 1.0, 0).is_err());
        assert!(split_membership(&ds, -0.3, 0).is_err());
    }

    #[test]
    fn uneven_classes_stay_within_one_of_proportional() {
        let rows: Vec<Vec<f64>> = (0..37).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..37).map(|i| if i < 7 { 0 } else if i < 20 { 1 } else { 2 }).collect();
        let ds = LabeledDataset::new(rows, labels, 3).unwrap();
        let split = split_membership(&ds, 0.3, 11).unwrap();
        let total = split.member_ids.len();
        assert_eq!(total, (0.3f64 * 37.0).round() as usize);
        let members = ds.subset(&split.member_ids).unwrap();
        for (c, &count) in members.class_counts().iter().enumerate() {
            let exact = total as f64 * ds.class_counts()[c] as f64 / 37.0;
            assert!((count as f64 - exact).abs() <= 1.0);
        }
    }
}
