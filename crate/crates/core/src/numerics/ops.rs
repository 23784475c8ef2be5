use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, l2_norm, Matrix};
use crate::error::{Error, Result};

/// Indices of the `k` largest entries of `v` under `key`, ties to the lowest
/// index. The result is sorted by descending key.
fn top_k_by(v: &[f32], k: usize, key: impl Fn(f32) -> f32) -> Vec<usize> {
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        key(v[b])
            .partial_cmp(&key(v[a]))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < v.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Indices kept by [`top_k_mask`].
pub fn top_k_indices(v: &[f32], k: usize) -> Vec<usize> {
    top_k_by(v, k, f32::abs)
}

/// Indices kept by [`top_k_mask_signed`].
pub fn top_k_indices_signed(v: &[f32], k: usize) -> Vec<usize> {
    top_k_by(v, k, |x| x)
}

fn mask_from(v: &[f32], keep: &[usize]) -> Vec<f32> {
    let mut out = vec![0.0; v.len()];
    for &i in keep {
        out[i] = v[i];
    }
    out
}

/// Zeroes all but the `k` entries with the largest absolute value.
///
/// Survivors keep their sign and magnitude; ties go to the lowest index and
/// `k >= v.len()` returns `v` unchanged.
pub fn top_k_mask(v: &[f32], k: usize) -> Vec<f32> {
    if k >= v.len() {
        return v.to_vec();
    }
    mask_from(v, &top_k_indices(v, k))
}

/// Signed variant: keeps the `k` largest values rather than magnitudes.
pub fn top_k_mask_signed(v: &[f32], k: usize) -> Vec<f32> {
    if k >= v.len() {
        return v.to_vec();
    }
    mask_from(v, &top_k_indices_signed(v, k))
}

/// Euclidean norm of every row.
pub fn row_l2_norms(w: &Matrix) -> Vec<f32> {
    w.row_iter().map(|r| l2_norm(r) as f32).collect()
}

/// Best match of one source row against a target dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineMatch {
    pub score: f32,
    pub index: usize,
    /// Set when the source row (or every target row) has zero norm; the
    /// score is then reported as 0 with index 0.
    pub zero_norm: bool,
}

/// For each row of `a`, the maximum cosine similarity over the rows of `b`
/// and its arg-max (lowest index on ties).
pub fn cosine_similarity_argmax(a: &Matrix, b: &Matrix) -> Result<Vec<CosineMatch>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "dictionaries have {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    if b.rows() == 0 {
        return Err(Error::Empty("target dictionary"));
    }
    let b_norms: Vec<f64> = b.row_iter().map(l2_norm).collect();
    let out = (0..a.rows())
        .into_par_iter()
        .map(|r| {
            let row = a.row(r);
            let an = l2_norm(row);
            if an == 0.0 {
                return CosineMatch {
                    score: 0.0,
                    index: 0,
                    zero_norm: true,
                };
            }
            let mut best: Option<(f64, usize)> = None;
            for (k, bk) in b.row_iter().enumerate() {
                let bn = b_norms[k];
                if bn == 0.0 {
                    continue;
                }
                let c = (dot(row, bk) / (an * bn)).clamp(-1.0, 1.0);
                if best.is_none_or(|(s, _)| c > s) {
                    best = Some((c, k));
                }
            }
            match best {
                Some((s, k)) => CosineMatch {
                    score: s as f32,
                    index: k,
                    zero_norm: false,
                },
                None => CosineMatch {
                    score: 0.0,
                    index: 0,
                    zero_norm: true,
                },
            }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_mask(&[3.0, -5.0, 1.0, 0.0], 2), vec![3.0, -5.0, 0.0, 0.0]);
        assert_eq!(top_k_mask(&[0.0, 0.0, 0.0], 2), vec![0.0; 3]);
        assert_eq!(top_k_mask(&[7.0, 2.0], 5), vec![7.0, 2.0]);
        assert_eq!(top_k_mask(&[1.0, 2.0], 0), vec![0.0, 0.0]);
    }

    #[test]
    fn top_k_ties_go_low() {
        assert_eq!(top_k_mask(&[1.0, -1.0, 1.0], 2), vec![1.0, -1.0, 0.0]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn signed_variant_ignores_magnitude_of_negatives() {
        assert_eq!(top_k_mask_signed(&[3.0, -5.0, 1.0, 0.0], 2), vec![3.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn row_norm_examples() {
        let w = Matrix::from_rows(&[[3.0, 4.0], [0.0, 2.0]]).unwrap();
        assert_eq!(row_l2_norms(&w), vec![5.0, 2.0]);
        assert_eq!(row_l2_norms(&Matrix::identity(3)), vec![1.0; 3]);
        assert_eq!(row_l2_norms(&Matrix::zeros(2, 3)), vec![0.0; 2]);
    }

    #[test]
    fn cosine_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let m = cosine_similarity_argmax(&a, &b).unwrap();
        assert_eq!(m[0].index, 0);
        assert_eq!(m[0].score, 0.0);
        assert!(!m[0].zero_norm);

        let z = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let m = cosine_similarity_argmax(&z, &b).unwrap();
        assert_eq!(m[0], CosineMatch { score: 0.0, index: 0, zero_norm: true });

        assert!(cosine_similarity_argmax(&a, &Matrix::zeros(2, 3)).is_err());
    }
}
