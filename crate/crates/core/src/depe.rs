//! Weight decomposition into a frozen base, a frozen dictionary and a
//! trainable lookup table.
//!
//! A weight `W ∈ R^{n×m}` is carried as `W0 + D·T` with `D = U_r Σ_r` from the
//! truncated SVD of the pre-trained `W0` and `T ∈ R^{r×m}` starting at zero.
//! Column `i` of the effective weight is `W0[:, i] + Σ_k D[:, k]·T[k, i]`.
//! `D` depends only on `W0`, so every client that starts from the same
//! pre-trained weight builds the same dictionary without talking to anyone.

use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDecomposition {
    w0: Matrix,
    dict: Matrix,
    table: Matrix,
}

impl WeightDecomposition {
    /// Builds `D = U_r Σ_r` from the truncated SVD of `w0` and a zero table.
    pub fn init(w0: Matrix, rank: usize) -> Result<Self> {
        let svd = truncated_svd(&w0, rank)?;
        let dict = svd.u_sigma();
        let table = Matrix::zeros(rank, w0.cols());
        Ok(Self { w0, dict, table })
    }

    /// Assembles a decomposition from explicit parts.
    pub fn from_parts(w0: Matrix, dict: Matrix, table: Matrix) -> Result<Self> {
        if dict.rows() != w0.rows() || table.cols() != w0.cols() || dict.cols() != table.rows() {
            return Err(Error::shape(
                "WeightDecomposition::from_parts",
                format!(
                    "w0 {:?}, dict {:?}, table {:?}",
                    w0.dims(),
                    dict.dims(),
                    table.dims()
                ),
            ));
        }
        Ok(Self { w0, dict, table })
    }

    pub fn rank(&self) -> usize {
        self.dict.cols()
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn dict(&self) -> &Matrix {
        &self.dict
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    /// Shape `(n, m)` of the effective weight.
    pub fn weight_dims(&self) -> (usize, usize) {
        self.w0.dims()
    }

    /// Number of trainable (and therefore encrypted) entries: `r·m`.
    pub fn trainable_len(&self) -> usize {
        self.table.len()
    }

    /// Effective weight `W0 + D·T`.
    pub fn reconstruct(&self) -> Matrix {
        let delta = self
            .dict
            .matmul(&self.table)
            .expect("dictionary and table shapes agree");
        self.w0.add(&delta).expect("w0 and D·T shapes agree")
    }

    /// Chain rule through `W = W0 + D·T`: `∂L/∂T = Dᵀ · ∂L/∂W`.
    pub fn table_gradient(&self, weight_grad: &Matrix) -> Result<Matrix> {
        if weight_grad.dims() != self.w0.dims() {
            return Err(Error::shape(
                "table_gradient",
                format!(
                    "weight gradient {:?}, weight {:?}",
                    weight_grad.dims(),
                    self.w0.dims()
                ),
            ));
        }
        self.dict.transpose_matmul(weight_grad)
    }

    /// `T ← T − lr·ΔT`. `W0` and `D` are never touched.
    pub fn apply_table_update(&mut self, delta_t: &Matrix, lr: f64) -> Result<()> {
        if delta_t.dims() != self.table.dims() {
            return Err(Error::shape(
                "apply_table_update",
                format!(
                    "update {:?}, table {:?}",
                    delta_t.dims(),
                    self.table.dims()
                ),
            ));
        }
        self.table.sub_scaled_assign(delta_t, lr)
    }

    /// Replaces the table wholesale (used when restoring a flattened snapshot).
    pub fn set_table(&mut self, table: Matrix) -> Result<()> {
        if table.dims() != self.table.dims() {
            return Err(Error::shape(
                "set_table",
                format!("{:?} vs {:?}", table.dims(), self.table.dims()),
            ));
        }
        self.table = table;
        Ok(())
    }
}

/// [`WeightDecomposition::init`] as a free function.
pub fn init_depe(w0: Matrix, rank: usize) -> Result<WeightDecomposition> {
    WeightDecomposition::init(w0, rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for r in 1..=4 {
            let w0 = random_matrix(6, 5, &mut rng);
            let d = init_depe(w0.clone(), r).unwrap();
            assert_eq!(d.reconstruct(), w0);
            assert_eq!(d.trainable_len(), r * 5);
            assert_eq!(d.table().max_abs(), 0.0);
        }
    }

    #[test]
    fn init_on_diagonal_spans_top_directions() {
        let w0 = Matrix::diag(&[3.0, 2.0, 1.0]).unwrap();
        let d = init_depe(w0, 2).unwrap();
        let dict = d.dict();
        let norms: Vec<f64> = (0..2)
            .map(|c| dict.column(c).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        assert!((norms[0] - 3.0).abs() < 1e-12);
        assert!((norms[1] - 2.0).abs() < 1e-12);
        // the third coordinate is outside the top-2 span
        assert!(dict.get(2, 0).abs() < 1e-12 && dict.get(2, 1).abs() < 1e-12);
        assert!((dict.get(0, 0).abs() - 3.0).abs() < 1e-12);
        assert!((dict.get(1, 1).abs() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_rejects_zero_rank() {
        assert!(matches!(
            init_depe(Matrix::identity(3), 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn reconstruct_linear_combination_example() {
        // r = 3, column i of T is [0.3, 0.2, 0.5], W0 = 0
        let dict = Matrix::from_rows(&[
            vec![1.0, 0.0, 2.0],
            vec![0.0, 1.0, -1.0],
            vec![4.0, 3.0, 0.5],
            vec![-2.0, 0.0, 1.0],
        ])
        .unwrap();
        let table = Matrix::from_rows(&[vec![0.3, 0.0], vec![0.2, 1.0], vec![0.5, 0.0]]).unwrap();
        let d = WeightDecomposition::from_parts(Matrix::zeros(4, 2), dict.clone(), table).unwrap();
        let w = d.reconstruct();
        for row in 0..4 {
            let expect =
                0.3 * dict.get(row, 0) + 0.2 * dict.get(row, 1) + 0.5 * dict.get(row, 2);
            assert!((w.get(row, 0) - expect).abs() < 1e-15);
            assert_eq!(w.get(row, 1), dict.get(row, 1));
        }
    }

    #[test]
    fn reconstruct_matches_per_column_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, m, r) = (7, 5, 3);
        let w0 = random_matrix(n, m, &mut rng);
        let dict = random_matrix(n, r, &mut rng);
        let table = random_matrix(r, m, &mut rng);
        let d = WeightDecomposition::from_parts(w0.clone(), dict.clone(), table.clone()).unwrap();
        let w = d.reconstruct();
        for i in 0..m {
            for row in 0..n {
                let mut acc = w0.get(row, i);
                for k in 0..r {
                    acc += dict.get(row, k) * table.get(k, i);
                }
                assert!((w.get(row, i) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_gradient_of_zero_is_zero() {
        let d = init_depe(Matrix::identity(4), 2).unwrap();
        let g = d.table_gradient(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(g, Matrix::zeros(2, 4));
    }

    #[test]
    fn table_gradient_inverts_orthonormal_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, m, r) = (6, 4, 3);
        let svd = crate::linalg::truncated_svd(&random_matrix(n, n, &mut rng), r).unwrap();
        let dict = svd.u;
        let g = random_matrix(r, m, &mut rng);
        let d = WeightDecomposition::from_parts(Matrix::zeros(n, m), dict.clone(), Matrix::zeros(r, m))
            .unwrap();
        let back = d.table_gradient(&dict.matmul(&g).unwrap()).unwrap();
        assert!(back.max_abs_diff(&g).unwrap() < 1e-10);
    }

    #[test]
    fn table_gradient_matches_finite_differences() {
        // L(T) = Σ C ∘ (W0 + D·T)² / 2, so ∂L/∂W = C ∘ W
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, m, r) = (6, 8, 3);
        let w0 = random_matrix(n, m, &mut rng);
        let coef = random_matrix(n, m, &mut rng);
        let mut d = init_depe(w0, r).unwrap();
        let t0 = random_matrix(r, m, &mut rng);
        d.set_table(t0).unwrap();
        let loss = |d: &WeightDecomposition| -> f64 {
            let w = d.reconstruct();
            w.data()
                .iter()
                .zip(coef.data())
                .map(|(w, c)| 0.5 * c * w * w)
                .sum()
        };
        let w = d.reconstruct();
        let weight_grad = Matrix::from_fn(n, m, |i, j| coef.get(i, j) * w.get(i, j));
        let analytic = d.table_gradient(&weight_grad).unwrap();
        let eps = 1e-5;
        for k in 0..r {
            for i in 0..m {
                let mut plus = d.clone();
                let mut t = plus.table().clone();
                t.set(k, i, t.get(k, i) + eps);
                plus.set_table(t).unwrap();
                let mut minus = d.clone();
                let mut t = minus.table().clone();
                t.set(k, i, t.get(k, i) - eps);
                minus.set_table(t).unwrap();
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let a = analytic.get(k, i);
                assert!(
                    (fd - a).abs() <= 1e-4 * a.abs().max(1e-3),
                    "T[{k}][{i}]: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn table_gradient_shape_error() {
        let d = init_depe(Matrix::identity(3), 1).unwrap();
        assert!(matches!(
            d.table_gradient(&Matrix::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn update_with_zero_is_noop_and_self_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = init_depe(random_matrix(5, 4, &mut rng), 2).unwrap();
        d.set_table(random_matrix(2, 4, &mut rng)).unwrap();
        let before = d.clone();
        d.apply_table_update(&Matrix::zeros(2, 4), 0.7).unwrap();
        assert_eq!(d, before);
        let t = d.table().clone();
        d.apply_table_update(&t, 1.0).unwrap();
        assert_eq!(d.table().max_abs(), 0.0);
        assert_eq!(d.w0(), before.w0());
        assert_eq!(d.dict(), before.dict());
        assert!(d.apply_table_update(&Matrix::zeros(4, 2), 1.0).is_err());
    }

    #[test]
    fn sequential_updates_match_summed_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = init_depe(random_matrix(4, 6, &mut rng), 3).unwrap();
        let a = random_matrix(3, 6, &mut rng);
        let b = random_matrix(3, 6, &mut rng);
        let lr = 0.05;
        let mut seq = base.clone();
        seq.apply_table_update(&a, lr).unwrap();
        seq.apply_table_update(&b, lr).unwrap();
        let mut sum = base.clone();
        sum.apply_table_update(&a.add(&b).unwrap(), lr).unwrap();
        assert!(seq.table().max_abs_diff(sum.table()).unwrap() < 1e-14);
    }
}
