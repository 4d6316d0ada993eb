use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{cmp_values, dot, unit_f64};
use crate::types::EmbeddingMatrix;

/// Dense row-major f64 matrix of similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `max_i A[i][j]` for every column.
    pub fn column_max(&self) -> Vec<f64> {
        let mut out = alloc::vec![f64::NEG_INFINITY; self.cols];
        for i in 0..self.rows {
            for (m, &v) in out.iter_mut().zip(self.row(i)) {
                *m = m.max(v);
            }
        }
        out
    }

    /// Build from explicit values, e.g. for externally computed scores.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix from {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }
}

pub(crate) fn unit_rows(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..m.len()).map(|i| unit_f64(m.row(i))).collect()
}

/// Cosine similarity of every shot row against every pool row (`K x S`).
pub fn cross_similarity(shots: &EmbeddingMatrix, pool: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if shots.dim() != pool.dim() {
        return Err(Error::Shape(format!(
            "shot embeddings have dim {}, pool embeddings dim {}",
            shots.dim(),
            pool.dim()
        )));
    }
    let (us, up) = (unit_rows(shots), unit_rows(pool));
    let mut data = Vec::with_capacity(us.len() * up.len());
    for a in &us {
        data.extend(up.iter().map(|b| dot(a, b).clamp(-1.0, 1.0)));
    }
    Ok(SimilarityMatrix {
        rows: us.len(),
        cols: up.len(),
        data,
    })
}

/// Pairwise cosine similarity among the rows of `m`. Exactly symmetric.
pub fn intra_similarity(m: &EmbeddingMatrix) -> SimilarityMatrix {
    let u = unit_rows(m);
    let n = u.len();
    let mut data = alloc::vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = dot(&u[i], &u[j]).clamp(-1.0, 1.0);
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    SimilarityMatrix {
        rows: n,
        cols: n,
        data,
    }
}

/// Pool item with its best similarity to any shot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

/// The `c` pool ids with the largest column maximum, best first; ties go to
/// the lexicographically smaller id.
pub fn select_top_c<S: AsRef<str>>(
    a: &SimilarityMatrix,
    pool_ids: &[S],
    c: usize,
) -> Result<Vec<ScoredId>> {
    if pool_ids.len() != a.cols() {
        return Err(Error::Shape(format!(
            "{} pool ids for a matrix with {} columns",
            pool_ids.len(),
            a.cols()
        )));
    }
    if c > a.cols() {
        return Err(Error::Budget {
            requested: c,
            available: a.cols(),
        });
    }
    let scores = a.column_max();
    let mut order: Vec<usize> = (0..a.cols()).collect();
    order.sort_by(|&x, &y| {
        cmp_values(scores[y], scores[x])
            .then_with(|| pool_ids[x].as_ref().cmp(pool_ids[y].as_ref()))
    });
    Ok(order
        .into_iter()
        .take(c)
        .map(|j| ScoredId {
            id: String::from(pool_ids[j].as_ref()),
            score: scores[j],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn emb(rows: &[&[f32]]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        EmbeddingMatrix::new(
            (0..rows.len()).map(|i| i.to_string()).collect(),
            dim,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cross_examples() {
        let k = emb(&[&[1.0, 0.0]]);
        let s = emb(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let a = cross_similarity(&k, &s).unwrap();
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(a.get(0, 1), 0.0);
        let bad = emb(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(cross_similarity(&k, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn top_c_examples() {
        let k = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = emb(&[&[1.0, 1.0], &[0.0, 5.0], &[-1.0, 0.0]]);
        let a = cross_similarity(&k, &s).unwrap();
        let ids = ["x", "y", "z"];
        let top = select_top_c(&a, &ids, 1).unwrap();
        assert_eq!(top[0].id, "y");
        assert_eq!(top[0].score, 1.0);
        let all = select_top_c(&a, &ids, 3).unwrap();
        assert_eq!(all.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["y", "x", "z"]);
        assert!(matches!(select_top_c(&a, &ids, 4), Err(Error::Budget { .. })));
    }

    #[test]
    fn top_c_ties_lexicographic() {
        let a = SimilarityMatrix::from_vec(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let top = select_top_c(&a, &["c", "a", "b"], 2).unwrap();
        assert_eq!(top.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
