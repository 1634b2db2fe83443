//! PCC evaluation and the phone-by-cluster co-occurrence analysis.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::ClusterSequence;
use crate::corpus::{PhoneAlignment, PhoneInventory};
use crate::error::{Error, Result};

/// Sample Pearson correlation. Errors when either series is constant.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("pcc over {} predictions and {} targets", pred.len(), truth.len())));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Domain(format!("pcc needs at least 2 points, got {n}")));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / n as f64;
    let (mp, mt) = (mean(pred), mean(truth));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("correlation is undefined for a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n: usize,
    pub pcc: f64,
    pub mse: f64,
}

pub fn evaluate(split: &str, pred: &[f64], truth: &[f64]) -> Result<EvalReport> {
    let r = pcc(pred, truth)?;
    let mse = crate::nnet::mse(pred, truth)?;
    Ok(EvalReport { split: split.to_string(), n: pred.len(), pcc: r, mse })
}

/// Frame counts indexed by (phone, cluster index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceMatrix {
    row_labels: Vec<String>,
    k: usize,
    counts: Vec<u64>,
    total_frames: u64,
    uncovered_frames: u64,
}

impl CooccurrenceMatrix {
    pub fn zeros(inventory: &PhoneInventory, k: usize) -> Self {
        Self {
            row_labels: inventory.labels().to_vec(),
            k,
            counts: vec![0; inventory.len() * k],
            total_frames: 0,
            uncovered_frames: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn get(&self, phone: usize, index: usize) -> u64 {
        self.counts[phone * self.k + index]
    }

    pub fn count(&self, label: &str, index: usize) -> Option<u64> {
        let row = self.row_labels.iter().position(|l| l == label)?;
        Some(self.get(row, index))
    }

    /// Frames counted into the matrix.
    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }

    /// Frames that fell outside every alignment segment.
    pub fn uncovered_frames(&self) -> u64 {
        self.uncovered_frames
    }

    pub fn column_sum(&self, index: usize) -> u64 {
        (0..self.rows()).map(|p| self.get(p, index)).sum()
    }

    /// Adds one utterance's frames.
    pub fn accumulate(
        &mut self,
        alignment: &PhoneAlignment,
        clusters: &ClusterSequence,
        lookup: &PhoneInventory,
    ) -> Result<()> {
        let t = clusters.len();
        if alignment.span() > t {
            return Err(Error::shape(format!("alignment spans {} frames, cluster sequence has {t}", alignment.span())));
        }
        if let Some(&bad) = clusters.indexes.iter().find(|&&j| j >= self.k) {
            return Err(Error::Domain(format!("cluster index {bad} outside [0, {})", self.k)));
        }
        let mut covered = 0u64;
        for seg in &alignment.segments {
            let row = lookup
                .index_of(&seg.phone)
                .ok_or_else(|| Error::validation(None, format!("unknown phone {:?}", seg.phone)))?;
            for &j in &clusters.indexes[seg.start..seg.end] {
                self.counts[row * self.k + j] += 1;
            }
            covered += (seg.end - seg.start) as u64;
        }
        self.total_frames += covered;
        self.uncovered_frames += t as u64 - covered;
        Ok(())
    }

    /// Entry-wise sum of two matrices over the same rows and clusters.
    pub fn merge(&mut self, other: &CooccurrenceMatrix) -> Result<()> {
        if self.row_labels != other.row_labels || self.k != other.k {
            return Err(Error::shape("co-occurrence matrices have different layouts"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.total_frames += other.total_frames;
        self.uncovered_frames += other.uncovered_frames;
        Ok(())
    }
}

pub fn build_cooccurrence<'a, I>(items: I, inventory: &PhoneInventory, k: usize) -> Result<CooccurrenceMatrix>
where
    I: IntoIterator<Item = (&'a PhoneAlignment, &'a ClusterSequence)>,
{
    let mut m = CooccurrenceMatrix::zeros(inventory, k);
    for (a, c) in items {
        m.accumulate(a, c, inventory)?;
    }
    Ok(m)
}

/// Column-normalized co-occurrence: `P(phone | index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMatrix {
    pub row_labels: Vec<String>,
    pub k: usize,
    /// Row-major `rows x k` probabilities.
    pub probs: Vec<f64>,
    /// Cluster indexes that never occurred; their columns are all zero.
    pub empty_columns: Vec<usize>,
}

impl ConditionalMatrix {
    pub fn get(&self, phone: usize, index: usize) -> f64 {
        self.probs[phone * self.k + index]
    }

    pub fn prob(&self, label: &str, index: usize) -> Option<f64> {
        let row = self.row_labels.iter().position(|l| l == label)?;
        Some(self.get(row, index))
    }

    pub fn column_sum(&self, index: usize) -> f64 {
        (0..self.row_labels.len()).map(|p| self.get(p, index)).sum()
    }
}

pub fn conditional_phone_given_index(m: &CooccurrenceMatrix) -> ConditionalMatrix {
    let mut probs = vec![0.0; m.rows() * m.k()];
    let mut empty_columns = Vec::new();
    for j in 0..m.k() {
        let total = m.column_sum(j);
        if total == 0 {
            empty_columns.push(j);
            continue;
        }
        for p in 0..m.rows() {
            probs[p * m.k() + j] = m.get(p, j) as f64 / total as f64;
        }
    }
    ConditionalMatrix { row_labels: m.row_labels().to_vec(), k: m.k(), probs, empty_columns }
}

/// CSV with a header of cluster indexes and one row per phone label.
pub fn heatmap_csv(c: &ConditionalMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Domain(format!("csv: {e}"));
    let mut header = vec!["phone".to_string()];
    header.extend((0..c.k).map(|j| j.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (p, label) in c.row_labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend((0..c.k).map(|j| format!("{:.6}", c.get(p, j))));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Domain(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn export_heatmap_data(c: &ConditionalMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = heatmap_csv(c)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a heatmap CSV back into a conditional matrix.
pub fn parse_heatmap_csv(text: &str) -> Result<ConditionalMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::validation(Some(1), "missing header"))?
        .map_err(|e| Error::validation(Some(1), e.to_string()))?;
    if header.get(0) != Some("phone") {
        return Err(Error::validation(Some(1), "header must start with \"phone\""));
    }
    for (j, cell) in header.iter().skip(1).enumerate() {
        if cell.parse::<usize>().ok() != Some(j) {
            return Err(Error::validation(Some(1), format!("expected cluster index {j}, got {cell:?}")));
        }
    }
    let k = header.len() - 1;
    let mut row_labels = Vec::new();
    let mut probs = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::validation(Some(line), e.to_string()))?;
        if rec.len() != k + 1 {
            return Err(Error::validation(Some(line), format!("expected {} cells, got {}", k + 1, rec.len())));
        }
        row_labels.push(rec[0].to_string());
        for cell in rec.iter().skip(1) {
            let v: f64 =
                cell.parse().map_err(|_| Error::validation(Some(line), format!("bad probability {cell:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(Some(line), format!("probability {v} outside [0, 1]")));
            }
            probs.push(v);
        }
    }
    let empty_columns = (0..k).filter(|&j| (0..row_labels.len()).all(|p| probs[p * k + j] == 0.0)).collect();
    Ok(ConditionalMatrix { row_labels, k, probs, empty_columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pcc_examples() {
        assert!((pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // cov = 0.5 / 3 over sample sizes; r = 1 / sqrt(2)
        let r = pcc(&[0.0, 1.0, 1.0, 2.0], &[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn pcc_rejects_constant_and_short_series() {
        assert!(matches!(pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Domain(_))));
        assert!(pcc(&[1.0, 2.0], &[5.0, 5.0]).is_err());
        assert!(pcc(&[1.0], &[1.0]).is_err());
        assert!(pcc(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn inventory() -> PhoneInventory {
        PhoneInventory::parse("AA\nsil\n").unwrap()
    }

    #[test]
    fn hand_counted_cooccurrence() {
        let a = PhoneAlignment::new(vec![("AA", 0, 2), ("sil", 2, 3)]);
        let c = ClusterSequence { indexes: vec![5, 5, 7] };
        let m = build_cooccurrence([(&a, &c)], &inventory(), 8).unwrap();
        assert_eq!(m.count("AA", 5), Some(2));
        assert_eq!(m.count("sil", 7), Some(1));
        let total: u64 = (0..2).flat_map(|p| (0..8).map(move |j| (p, j))).map(|(p, j)| m.get(p, j)).sum();
        assert_eq!(total, 3);
        assert_eq!(m.total_frames(), 3);
        let cond = conditional_phone_given_index(&m);
        assert_eq!(cond.prob("AA", 5), Some(1.0));
        assert_eq!(cond.prob("sil", 7), Some(1.0));
        assert_eq!(cond.empty_columns, vec![0, 1, 2, 3, 4, 6]);
    }

    #[test]
    fn uncovered_frames_are_reported() {
        let a = PhoneAlignment::new(vec![("AA", 1, 2)]);
        let c = ClusterSequence { indexes: vec![0, 1, 1, 0] };
        let m = build_cooccurrence([(&a, &c)], &inventory(), 2).unwrap();
        assert_eq!((m.total_frames(), m.uncovered_frames()), (1, 3));
    }

    #[test]
    fn cooccurrence_errors() {
        let a = PhoneAlignment::new(vec![("AA", 0, 2)]);
        let c = ClusterSequence { indexes: vec![0, 4] };
        assert!(build_cooccurrence([(&a, &c)], &inventory(), 4).is_err());
        let unknown = PhoneAlignment::new(vec![("ZZ", 0, 2)]);
        let c = ClusterSequence { indexes: vec![0, 1] };
        assert!(build_cooccurrence([(&unknown, &c)], &inventory(), 4).is_err());
        let long = PhoneAlignment::new(vec![("AA", 0, 3)]);
        assert!(build_cooccurrence([(&long, &c)], &inventory(), 4).is_err());
    }

    #[test]
    fn empty_corpus_is_all_zero() {
        let m = build_cooccurrence(std::iter::empty(), &inventory(), 3).unwrap();
        assert!((0..2).all(|p| (0..3).all(|j| m.get(p, j) == 0)));
        assert_eq!(conditional_phone_given_index(&m).empty_columns, vec![0, 1, 2]);
    }

    #[test]
    fn additive_over_utterances() {
        let inv = inventory();
        let a1 = PhoneAlignment::new(vec![("AA", 0, 2), ("sil", 2, 3)]);
        let c1 = ClusterSequence { indexes: vec![0, 1, 2] };
        let a2 = PhoneAlignment::new(vec![("sil", 0, 1), ("AA", 1, 4)]);
        let c2 = ClusterSequence { indexes: vec![2, 2, 1, 0] };
        let joint = build_cooccurrence([(&a1, &c1), (&a2, &c2)], &inv, 3).unwrap();
        let mut parts = build_cooccurrence([(&a1, &c1)], &inv, 3).unwrap();
        parts.merge(&build_cooccurrence([(&a2, &c2)], &inv, 3).unwrap()).unwrap();
        assert_eq!(joint, parts);
    }

    #[test]
    fn conditional_columns() {
        let inv = inventory();
        let a = PhoneAlignment::new(vec![("AA", 0, 2), ("sil", 2, 4)]);
        let c = ClusterSequence { indexes: vec![0, 1, 0, 1] };
        let cond = conditional_phone_given_index(&build_cooccurrence([(&a, &c)], &inv, 2).unwrap());
        assert_eq!(cond.prob("AA", 0), Some(0.5));
        assert_eq!(cond.prob("sil", 0), Some(0.5));
        let single = ClusterSequence { indexes: vec![0, 0, 1, 1] };
        let cond = conditional_phone_given_index(&build_cooccurrence([(&a, &single)], &inv, 2).unwrap());
        assert_eq!(cond.prob("AA", 0), Some(1.0));
        assert_eq!(cond.prob("sil", 0), Some(0.0));
    }

    #[test]
    fn heatmap_csv_shapes() {
        let cond = ConditionalMatrix {
            row_labels: vec!["AA".into(), "sil".into()],
            k: 2,
            probs: vec![0.25, 1.0, 0.75, 0.0],
            empty_columns: vec![],
        };
        let text = heatmap_csv(&cond).unwrap();
        assert_eq!(text, "phone,0,1\nAA,0.250000,1.000000\nsil,0.750000,0.000000\n");
        assert_eq!(parse_heatmap_csv(&text).unwrap().probs, cond.probs);
        let empty = ConditionalMatrix { row_labels: vec![], k: 0, probs: vec![], empty_columns: vec![] };
        assert_eq!(heatmap_csv(&empty).unwrap(), "phone\n");
    }

    proptest! {
        #[test]
        fn heatmap_round_trip_within_1e_6(
            (rows, k, probs) in (1usize..5, 1usize..6).prop_flat_map(|(r, k)| {
                (Just(r), Just(k), proptest::collection::vec(0.0f64..=1.0, r * k))
            })
        ) {
            let cond = ConditionalMatrix {
                row_labels: (0..rows).map(|i| format!("p{i}")).collect(),
                k,
                probs: probs.clone(),
                empty_columns: vec![],
            };
            let back = parse_heatmap_csv(&heatmap_csv(&cond).unwrap()).unwrap();
            prop_assert_eq!(back.row_labels, cond.row_labels);
            for (a, b) in back.probs.iter().zip(&probs) {
                prop_assert!((a - b).abs() <= 5e-7 + 1e-12);
            }
        }

        #[test]
        fn pcc_of_series_with_itself_is_one(xs in proptest::collection::vec(-100.0f64..100.0, 2..50)) {
            prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-6));
            prop_assert!((pcc(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pcc_is_affine_invariant(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(r) = pcc(&x, &y) {
                let xa: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pcc(&xa, &y).unwrap() - r).abs() < 1e-12);
                let xn: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                prop_assert!((pcc(&xn, &y).unwrap() + r).abs() < 1e-12);
            }
        }
    }
}
