use nalgebra::{DMatrix, SymmetricEigen};

use crate::nn::Matrix;
use crate::{Error, Result};

/// Centered coordinates on the top two principal axes, with the variances
/// (eigenvalues) of those axes in decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    pub variances: [f64; 2],
}

pub fn project_2d(latents: &Matrix<f32>) -> Result<Projection> {
    let (n, d) = (latents.rows, latents.cols);
    if n < 2 {
        return Err(Error::DegenerateInput("projection needs at least two points".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| latents.row(i)[j] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| order.get(k).map(|&c| eig.eigenvectors.column(c).into_owned());
    let (a0, a1) = (axis(0).expect("at least one dimension"), axis(1));
    let points = (0..n)
        .map(|i| {
            let row = centered.row(i).transpose();
            [row.dot(&a0), a1.as_ref().map_or(0.0, |a| row.dot(a))]
        })
        .collect();
    let var = |k: usize| order.get(k).map_or(0.0, |&c| eig.eigenvalues[c].max(0.0));
    Ok(Projection {
        points,
        variances: [var(0), var(1)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_points_collapse_to_origin() {
        let m = Matrix::from_vec(5, 3, [1.0f32, -2.0, 0.5].repeat(5));
        let p = project_2d(&m).unwrap();
        assert!(p.points.iter().all(|q| q[0].abs() < 1e-12 && q[1].abs() < 1e-12));
        assert!(project_2d(&Matrix::from_vec(1, 3, vec![0.0f32; 3])).is_err());
    }

    #[test]
    fn projection_recovers_axis_variances() {
        // independent axes with standard deviations 3, 2, 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let data: Vec<f32> = (0..n)
            .flat_map(|_| {
                let g = |s: f64, rng: &mut ChaCha8Rng| (s * (rng.gen::<f64>() - 0.5) * 12f64.sqrt()) as f32;
                [g(2.0, &mut rng), g(0.5, &mut rng), g(3.0, &mut rng)]
            })
            .collect();
        let m = Matrix::from_vec(n, 3, data);
        let p = project_2d(&m).unwrap();
        assert!(p.variances[0] >= p.variances[1]);
        let emp = |k: usize| p.points.iter().map(|q| q[k] * q[k]).sum::<f64>() / (n as f64 - 1.0);
        assert!((emp(0) - p.variances[0]).abs() < 1e-6 * p.variances[0]);
        assert!((emp(1) - p.variances[1]).abs() < 1e-6 * p.variances[0]);
        assert!((p.variances[0] - 9.0).abs() < 0.6 && (p.variances[1] - 4.0).abs() < 0.4);
    }
}
