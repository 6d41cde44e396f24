//! Jacobi SVD against closed-form singular values and the truncation identity.

use mscale::linalg::DenseMatrix;
use mscale::mesh::MultiscaleMesh;
use mscale::svdscale::{self, orthonormality_defect};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Singular values of a 2x2 matrix from the trace and determinant of AᵀA.
fn closed_form_2x2(a: &DenseMatrix<f64>) -> [f64; 2] {
    let s = a.as_slice().iter().map(|v| v * v).sum::<f64>();
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
    [((s + disc) / 2.0).sqrt(), ((s - disc).max(0.0) / 2.0).sqrt()]
}

/// Singular values of a 3x3 matrix: eigenvalues of the symmetric AᵀA by the trigonometric cubic solution.
fn closed_form_3x3(a: &DenseMatrix<f64>) -> [f64; 3] {
    let g = a.transpose().matmul(a).unwrap();
    let q = (g[(0, 0)] + g[(1, 1)] + g[(2, 2)]) / 3.0;
    let p1 = g[(0, 1)].powi(2) + g[(0, 2)].powi(2) + g[(1, 2)].powi(2);
    let p2 = (0..3).map(|i| (g[(i, i)] - q).powi(2)).sum::<f64>() + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return [q.sqrt(); 3];
    }
    let b = DenseMatrix::from_fn(3, 3, |i, j| (g[(i, j)] - if i == j { q } else { 0.0 }) / p);
    let det = b[(0, 0)] * (b[(1, 1)] * b[(2, 2)] - b[(1, 2)] * b[(2, 1)])
        - b[(0, 1)] * (b[(1, 0)] * b[(2, 2)] - b[(1, 2)] * b[(2, 0)])
        + b[(0, 2)] * (b[(1, 0)] * b[(2, 1)] - b[(1, 1)] * b[(2, 0)]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    [l1.max(0.0).sqrt(), l2.max(0.0).sqrt(), l3.max(0.0).sqrt()]
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-3.0..3.0))
}

#[test]
fn two_by_two_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let a = random_matrix(&mut rng, 2, 2);
        let d = svdscale::svd(&a).unwrap();
        for (got, want) in d.singular_values.iter().zip(closed_form_2x2(&a)) {
            assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        }
    }
}

#[test]
fn three_by_three_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let a = random_matrix(&mut rng, 3, 3);
        let d = svdscale::svd(&a).unwrap();
        for (got, want) in d.singular_values.iter().zip(closed_form_3x3(&a)) {
            assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        }
    }
}

#[test]
fn truncation_error_equals_tail_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (rows, cols) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let a = random_matrix(&mut rng, rows, cols);
        let d = svdscale::svd(&a).unwrap();
        assert!(orthonormality_defect(&d.left).unwrap() <= 1e-10);
        assert!(orthonormality_defect(&d.right).unwrap() <= 1e-10);
        assert!(a.sub(&d.reconstruct()).unwrap().frobenius_norm() <= 1e-10);
        for t in 1..=d.rank() {
            let err = a.sub(&d.truncate(t).unwrap().reconstruct()).unwrap().frobenius_norm();
            let tail = d.singular_values[t..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((err - tail).abs() <= 1e-10, "t={t}: {err} vs {tail}");
        }
    }
}

#[test]
fn rank_deficient_inputs_converge() {
    let u = [1.0, -2.0, 0.5, 3.0];
    let v = [0.3, 0.1, -1.0];
    let a = DenseMatrix::from_fn(4, 3, |i, j| u[i] * v[j]);
    let d = svdscale::svd(&a).unwrap();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((d.singular_values[0] - nu * nv).abs() <= 1e-12);
    assert!(d.singular_values[1..].iter().all(|s| s.abs() <= 1e-12));
    let zero = DenseMatrix::<f64>::zeros(3, 5);
    assert!(svdscale::svd(&zero).unwrap().singular_values.iter().all(|&s| s == 0.0));
}

#[test]
fn separable_field_is_rank_one_on_the_fold() {
    let mesh = MultiscaleMesh::new(0.0, 10.0, 20, 10).unwrap();
    let values: Vec<f64> = mesh.fine_nodes().iter().map(|&x: &f64| (0.3 * x).exp()).collect();
    let d = svdscale::svd(&mesh.fold(&values).unwrap()).unwrap();
    assert!(d.singular_values[1] <= 1e-10 * d.singular_values[0]);
}
