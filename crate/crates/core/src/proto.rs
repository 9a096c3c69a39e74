//! Prototype classifier, class probabilities and negative selection.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const POSITIVE: usize = 0;
pub const NEGATIVE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    W0,
    W1,
    W2,
    #[serde(rename = "adapted")]
    Adapted,
}

/// Two prototypes stacked as rows: positive first, negative second.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub w: Array2<f64>,
    pub provenance: Provenance,
}

impl ClassifierWeights {
    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn positive(&self) -> ArrayView1<'_, f64> {
        self.w.row(POSITIVE)
    }

    pub fn negative(&self) -> ArrayView1<'_, f64> {
        self.w.row(NEGATIVE)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn to_dump(&self) -> ClassifierDump {
        ClassifierDump {
            provenance: self.provenance,
            d: self.d(),
            w1: self.positive().to_vec(),
            w2: self.negative().to_vec(),
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.to_dump())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// JSON form of a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDump {
    pub provenance: Provenance,
    pub d: usize,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl TryFrom<ClassifierDump> for ClassifierWeights {
    type Error = Error;

    fn try_from(dump: ClassifierDump) -> Result<Self> {
        for w in [&dump.w1, &dump.w2] {
            if w.len() != dump.d {
                return Err(Error::DimensionMismatch {
                    expected: dump.d,
                    got: w.len(),
                });
            }
        }
        let mut w = Array2::zeros((2, dump.d));
        w.row_mut(POSITIVE).assign(&ArrayView1::from(&dump.w1));
        w.row_mut(NEGATIVE).assign(&ArrayView1::from(&dump.w2));
        Ok(Self {
            w,
            provenance: dump.provenance,
        })
    }
}

/// Per-row class distributions, `n x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    pub rows: Array2<f64>,
}

impl ProbMatrix {
    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn positive(&self) -> Vec<f64> {
        self.rows.column(POSITIVE).to_vec()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows
            .rows()
            .into_iter()
            .map(|r| {
                if r[POSITIVE] >= r[NEGATIVE] {
                    POSITIVE
                } else {
                    NEGATIVE
                }
            })
            .collect()
    }
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_dims(a: &EmbeddingMatrix, d: usize) -> Result<()> {
    if a.d() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: a.d(),
        });
    }
    Ok(())
}

fn mean_rows(parts: &[&EmbeddingMatrix], class: &'static str) -> Result<ndarray::Array1<f64>> {
    let n: usize = parts.iter().map(|p| p.n()).sum();
    if n == 0 {
        return Err(Error::EmptyClass(class));
    }
    let d = parts.iter().find(|p| p.n() > 0).expect("n > 0").d();
    let mut sum = ndarray::Array1::zeros(d);
    for p in parts {
        if p.n() > 0 {
            check_dims(p, d)?;
            sum += &p.rows.sum_axis(Axis(0));
        }
    }
    Ok(sum / n as f64)
}

/// Class means of the (normalised) embeddings. Means are not re-normalised.
pub fn build_prototypes(
    pos: &EmbeddingMatrix,
    neg: &EmbeddingMatrix,
    provenance: Provenance,
) -> Result<ClassifierWeights> {
    rebuild_classifier(pos, neg, None).map(|w| w.with_provenance(provenance))
}

/// Prototypes with the negative class extended by selected query rows.
pub fn rebuild_classifier(
    pos: &EmbeddingMatrix,
    neg_support: &EmbeddingMatrix,
    neg_selected: Option<&EmbeddingMatrix>,
) -> Result<ClassifierWeights> {
    let w1 = mean_rows(&[pos], "positive")?;
    let mut negs = vec![neg_support];
    if let Some(sel) = neg_selected {
        negs.push(sel);
    }
    let w2 = mean_rows(&negs, "negative")?;
    if w1.len() != w2.len() {
        return Err(Error::DimensionMismatch {
            expected: w1.len(),
            got: w2.len(),
        });
    }
    let mut w = Array2::zeros((2, w1.len()));
    w.row_mut(POSITIVE).assign(&w1);
    w.row_mut(NEGATIVE).assign(&w2);
    Ok(ClassifierWeights {
        w,
        provenance: Provenance::W2,
    })
}

/// Distances from every embedding to both prototypes, `n x 2`.
pub fn prototype_distances(w: &ClassifierWeights, embs: &EmbeddingMatrix) -> Result<Array2<f64>> {
    check_dims(embs, w.d())?;
    let mut out = Array2::zeros((embs.n(), 2));
    for (i, z) in embs.rows.rows().into_iter().enumerate() {
        out[[i, POSITIVE]] = euclidean(w.positive(), z);
        out[[i, NEGATIVE]] = euclidean(w.negative(), z);
    }
    Ok(out)
}

/// Row-wise softmax of negated distances.
pub fn softmax_neg_distance(dist: &Array2<f64>) -> ProbMatrix {
    let mut rows = Array2::zeros(dist.dim());
    for (mut out, d) in rows.rows_mut().into_iter().zip(dist.rows()) {
        let mx = d.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in out.iter_mut().zip(d.iter()) {
            *o = (-v - mx).exp();
            z += *o;
        }
        out /= z;
    }
    ProbMatrix { rows }
}

/// `p_ik = exp(-||w_k - z_i||) / sum_c exp(-||w_c - z_i||)`.
pub fn predict_probs(w: &ClassifierWeights, embs: &EmbeddingMatrix) -> Result<ProbMatrix> {
    Ok(softmax_neg_distance(&prototype_distances(w, embs)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Query rows added to the negative class, ascending.
    pub selected_indices: Vec<usize>,
    pub candidate_count: usize,
    pub lower: usize,
    pub upper: usize,
}

/// Query rows that lie beyond the negative prototype as seen from the positive one.
///
/// Candidates satisfy `d(z,w1) > d(w1,w2)` and `d(z,w1) - d(z,w2) > d(w1,w2)/2`.
/// The count is forced into `[B, max(B, P - N + B)]`: surplus candidates are
/// trimmed and shortfalls filled from the remaining rows, both by decreasing
/// margin `d(z,w1) - d(z,w2)` with ties going to the lower index.
pub fn select_negatives(
    w: &ClassifierWeights,
    query: &EmbeddingMatrix,
    n_pos: usize,
    n_neg: usize,
    b: usize,
) -> Result<SelectionResult> {
    if n_pos == 0 || n_neg == 0 || b == 0 {
        return Err(Error::InvalidConfig("P, N and B must be at least 1".into()));
    }
    if query.n() < b {
        return Err(Error::QueryTooSmall {
            got: query.n(),
            needed: b,
        });
    }
    let dist = prototype_distances(w, query)?;
    let proto_gap = euclidean(w.positive(), w.negative());
    let upper = (n_pos as i64 - n_neg as i64 + b as i64).max(b as i64) as usize;

    let margin: Vec<f64> = dist
        .rows()
        .into_iter()
        .map(|r| r[POSITIVE] - r[NEGATIVE])
        .collect();
    let is_candidate: Vec<bool> = dist
        .rows()
        .into_iter()
        .zip(&margin)
        .map(|(r, &s)| r[POSITIVE] > proto_gap && s > proto_gap / 2.0)
        .collect();

    let by_margin = |idx: &mut Vec<usize>| {
        idx.sort_by(|&a, &c| margin[c].total_cmp(&margin[a]).then(a.cmp(&c)));
    };
    let mut candidates: Vec<usize> = (0..query.n()).filter(|&j| is_candidate[j]).collect();
    let candidate_count = candidates.len();

    let mut selected = if candidate_count > upper {
        by_margin(&mut candidates);
        candidates.truncate(upper);
        candidates
    } else if candidate_count < b {
        let mut rest: Vec<usize> = (0..query.n()).filter(|&j| !is_candidate[j]).collect();
        by_margin(&mut rest);
        candidates.extend(rest.into_iter().take(b - candidate_count));
        candidates
    } else {
        candidates
    };
    selected.sort_unstable();

    Ok(SelectionResult {
        selected_indices: selected,
        candidate_count,
        lower: b,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn m(rows: Array2<f64>) -> EmbeddingMatrix {
        let mut e = EmbeddingMatrix::new(rows);
        e.normalized = true;
        e
    }

    fn weights(w1: &[f64], w2: &[f64]) -> ClassifierWeights {
        ClassifierWeights::try_from(ClassifierDump {
            provenance: Provenance::W1,
            d: w1.len(),
            w1: w1.to_vec(),
            w2: w2.to_vec(),
        })
        .unwrap()
    }

    #[test]
    fn single_positive_is_its_own_prototype() {
        let z = array![[0.6, 0.8]];
        let w = build_prototypes(&m(z.clone()), &m(array![[1.0, 0.0]]), Provenance::W0).unwrap();
        assert_eq!(w.positive().to_vec(), vec![0.6, 0.8]);
        assert_eq!(w.provenance, Provenance::W0);
    }

    #[test]
    fn prototype_is_plain_mean() {
        let w = build_prototypes(
            &m(array![[1.0, 0.0], [0.0, 1.0]]),
            &m(array![[1.0, 0.0]]),
            Provenance::W0,
        )
        .unwrap();
        assert_eq!(w.positive().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn prototypes_permutation_invariant() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let b = array![[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]];
        let n = m(array![[0.0, -1.0]]);
        let wa = build_prototypes(&m(a), &n, Provenance::W0).unwrap();
        let wb = build_prototypes(&m(b), &n, Provenance::W0).unwrap();
        for (x, y) in wa.w.iter().zip(wb.w.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_class_rejected() {
        let empty = m(Array2::zeros((0, 2)));
        assert!(matches!(
            build_prototypes(&empty, &m(array![[1.0, 0.0]]), Provenance::W0),
            Err(Error::EmptyClass("positive"))
        ));
        assert!(matches!(
            build_prototypes(&m(array![[1.0, 0.0]]), &empty, Provenance::W0),
            Err(Error::EmptyClass("negative"))
        ));
    }

    #[test]
    fn probability_examples() {
        let w = weights(&[0.0, 0.0], &[2.0, 0.0]);
        let p = predict_probs(&w, &m(array![[1.0, 0.0]])).unwrap();
        assert!((p.rows[[0, 0]] - 0.5).abs() < 1e-15);

        // d1 = 1, d2 = 2
        let w = weights(&[0.0], &[3.0]);
        let p = predict_probs(&w, &m(array![[1.0]])).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p.rows[[0, 0]] - expected).abs() < 1e-12);
        assert!((expected - 0.73106).abs() < 1e-5);

        let w = weights(&[0.0, 0.0], &[20.0, 0.0]);
        let p = predict_probs(&w, &m(array![[0.0, 0.0]])).unwrap();
        assert!(p.rows[[0, 0]] >= 1.0 - 1e-8);
    }

    #[test]
    fn eq3_predicate_on_a_line() {
        let w = weights(&[0.0], &[1.0]);
        let q = m(array![[2.0], [0.9], [1.2]]);
        let sel = select_negatives(&w, &q, 3, 1, 1).unwrap();
        assert_eq!(sel.candidate_count, 2);
        assert_eq!(sel.selected_indices, vec![0, 2]);
    }

    #[test]
    fn trims_to_upper_bound() {
        let w = weights(&[0.0], &[1.0]);
        let q = m(Array2::from_shape_fn((10, 1), |(i, _)| 2.0 + i as f64));
        let sel = select_negatives(&w, &q, 5, 3, 5).unwrap();
        assert_eq!((sel.lower, sel.upper), (5, 7));
        assert_eq!(sel.candidate_count, 10);
        assert_eq!(sel.selected_indices.len(), 7);
    }

    #[test]
    fn equal_bounds_fill_to_b() {
        let w = weights(&[0.0], &[1.0]);
        // only two candidates, the rest sit near the positive prototype
        let q = m(array![[3.0], [2.5], [0.1], [0.2], [0.3], [0.4], [0.0]]);
        let sel = select_negatives(&w, &q, 5, 5, 5).unwrap();
        assert_eq!(sel.candidate_count, 2);
        assert_eq!(sel.selected_indices, vec![0, 1, 3, 4, 5]);
    }

    #[test]
    fn upper_bound_clamped_when_negatives_dominate() {
        let w = weights(&[0.0], &[1.0]);
        let q = m(Array2::from_shape_fn((8, 1), |(i, _)| 2.0 + i as f64));
        let sel = select_negatives(&w, &q, 2, 20, 5).unwrap();
        assert_eq!(sel.upper, 5);
        assert_eq!(sel.selected_indices.len(), 5);
    }

    #[test]
    fn query_too_small() {
        let w = weights(&[0.0], &[1.0]);
        assert!(matches!(
            select_negatives(&w, &m(array![[2.0]]), 1, 1, 5),
            Err(Error::QueryTooSmall { got: 1, needed: 5 })
        ));
    }

    #[test]
    fn rebuild_examples() {
        let pos = m(array![[1.0, 0.0]]);
        let negs = m(array![[0.0, 1.0]]);
        let w1 = build_prototypes(&pos, &negs, Provenance::W1).unwrap();
        let empty = m(Array2::zeros((0, 2)));
        let w2 = rebuild_classifier(&pos, &negs, Some(&empty)).unwrap();
        assert_eq!(w1.w, w2.w);
        assert_eq!(w2.provenance, Provenance::W2);
        let w2 = rebuild_classifier(&pos, &negs, Some(&m(array![[1.0, 0.0]]))).unwrap();
        assert_eq!(w2.negative().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn dump_roundtrip() {
        let w = weights(&[0.1, 0.2], &[0.3, 0.4]);
        let json = serde_json::to_string(&w.to_dump()).unwrap();
        assert!(json.contains("\"w1\""));
        let back: ClassifierDump = serde_json::from_str(&json).unwrap();
        assert_eq!(ClassifierWeights::try_from(back).unwrap(), w);
    }
}
