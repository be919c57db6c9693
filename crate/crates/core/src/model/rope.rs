use super::{ModelError, Result};
use crate::par;
use crate::tensor::Matrix;

/// Rotate interleaved pairs `(2i, 2i+1)` of every head by `pos · base^(-2i/d_head)`.
///
/// The angle depends only on the row's original sequence position, so cached
/// keys and fresh queries stay consistent whatever storage order they end up in.
pub fn rope_rotate(
    states: &Matrix,
    position_ids: &[usize],
    n_heads: usize,
    base: f64,
    max_positions: usize,
) -> Result<Matrix> {
    if position_ids.len() != states.rows() {
        return Err(ModelError::Shape(format!(
            "{} position ids for {} rows",
            position_ids.len(),
            states.rows()
        )));
    }
    if n_heads == 0 || !states.cols().is_multiple_of(n_heads) || !(states.cols() / n_heads).is_multiple_of(2) {
        return Err(ModelError::Shape(format!(
            "width {} is not n_heads ({n_heads}) times an even head size",
            states.cols()
        )));
    }
    if let Some(&bad) = position_ids.iter().find(|&&p| p >= max_positions) {
        return Err(ModelError::PositionOutOfRange {
            position: bad,
            max: max_positions,
        });
    }
    let d_head = states.cols() / n_heads;
    let inv_freq: Vec<f64> = (0..d_head / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d_head as f64))
        .collect();
    let mut out = states.clone();
    let cols = out.cols();
    par::for_each_row(out.as_mut_slice(), cols, |r, row| {
        let pos = position_ids[r] as f64;
        let rot: Vec<(f32, f32)> = inv_freq
            .iter()
            .map(|f| {
                let a = pos * f;
                (a.cos() as f32, a.sin() as f32)
            })
            .collect();
        for head in row.chunks_mut(d_head) {
            for (pair, &(c, s)) in head.chunks_mut(2).zip(&rot) {
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * c - x1 * s;
                pair[1] = x0 * s + x1 * c;
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|i| ((i * 37 % 17) as f32 - 8.0) / 3.0).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn zero_positions_are_identity() {
        let x = sample(3, 8);
        let y = rope_rotate(&x, &[0, 0, 0], 2, 10_000.0, 16).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn row_order_does_not_matter() {
        let x = sample(2, 8);
        let swapped = x.gather_rows(&[1, 0]);
        let a = rope_rotate(&x, &[3, 5], 2, 10_000.0, 16).unwrap();
        let b = rope_rotate(&swapped, &[5, 3], 2, 10_000.0, 16).unwrap();
        assert_eq!(a.gather_rows(&[1, 0]), b);
    }

    #[test]
    fn out_of_range_position_is_an_error() {
        let x = sample(1, 8);
        let err = rope_rotate(&x, &[16], 2, 10_000.0, 16).unwrap_err();
        assert!(matches!(err, ModelError::PositionOutOfRange { position: 16, max: 16 }));
    }

    proptest! {
        #[test]
        fn pair_norms_are_preserved(
            vals in proptest::collection::vec(-10.0f32..10.0, 16),
            pos in 0usize..1000,
        ) {
            let x = Matrix::from_vec(1, 16, vals);
            let y = rope_rotate(&x, &[pos], 2, 10_000.0, 1024).unwrap();
            for (a, b) in x.row(0).chunks(2).zip(y.row(0).chunks(2)) {
                let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                prop_assert!((na - nb).abs() <= 1e-6 * na.max(1.0) * 10.0);
            }
        }
    }
}
