//! Euclidean projection onto the probability simplex.
//!
//! Sort-and-threshold algorithm: sort the row descending, find the largest
//! prefix whose shifted values stay positive, clip the rest to zero. Exact
//! (up to rounding) and O(C log C) per row.

use ndarray::Array2;

/// Projects one row onto `{ p : p_c >= 0, sum_c p_c = 1 }`.
pub fn project_row(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty row");
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut rho_cumsum = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        // Condition: u_j + (1 - cumsum_j) / (j+1) > 0.
        if u + (1.0 - cumsum) / (j + 1) as f64 > 0.0 {
            rho = j + 1;
            rho_cumsum = cumsum;
        }
    }
    let tau = (1.0 - rho_cumsum) / rho as f64;
    v.iter().map(|&x| (x + tau).max(0.0)).collect()
}

/// Row-wise projection of a whole matrix.
pub fn project_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        let p = project_row(row.as_slice().expect("contiguous row"));
        for (dst, src) in row.iter_mut().zip(p) {
            *dst = src;
        }
    }
    out
}
