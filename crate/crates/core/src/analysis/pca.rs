use nalgebra::DMatrix;

/// Scores on the first two principal components. Each component's loading
/// vector is signed so that its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[&[f64]]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let svd = centered.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut out = vec![[0.0; 2]; n];
    for (c, &k) in order.iter().take(2).enumerate() {
        let loading = v_t.row(k);
        let mut pivot = 0;
        for j in 1..d {
            if loading[j].abs() > loading[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if loading[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, point) in out.iter_mut().enumerate() {
            point[c] = sign * u[(i, k)] * sigma[k];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colinear_points_have_zero_second_coordinate() {
        let data: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.7 - 2.0;
                vec![1.0 + 2.0 * t, -3.0 + 0.5 * t, 4.0 - t]
            })
            .collect();
        let rows: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        for p in pca_2d(&rows) {
            assert!(p[1].abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn repeated_calls_agree() {
        let data: Vec<Vec<f64>> = vec![
            vec![1.0, 0.2, 0.0],
            vec![-1.0, 0.1, 0.3],
            vec![0.5, -0.4, 0.2],
            vec![2.0, 0.3, -0.1],
        ];
        let rows: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let a = pca_2d(&rows);
        let b = pca_2d(&rows);
        assert_eq!(a, b);
    }
}
