//! Fréchet distance and PSD square root against closed forms and an
//! independent nalgebra computation.

use diffusion_core::metrics::{
    extract_features, frechet_distance, gaussian_stats, matrix_sqrt_psd, FeatureProjector, GaussianStats,
};
use diffusion_core::rng::{self, Rng, Stream};
use diffusion_core::Tensor;
use nalgebra::DMatrix;

fn stats(mu: Vec<f64>, sigma: Vec<f64>) -> GaussianStats {
    GaussianStats { mu, sigma, n: 10 }
}

fn to_vec(m: &DMatrix<f64>) -> Vec<f64> {
    // row-major
    let d = m.nrows();
    (0..d * d).map(|i| m[(i / d, i % d)]).collect()
}

fn random_psd(rng: &mut Rng, d: usize, rank: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, rank, |_, _| rng::normal(rng));
    &a * a.transpose()
}

/// `Tr((Σ₁Σ₂)^{1/2})` as the sum of square roots of the eigenvalues of the
/// non-symmetric product, via a real Schur decomposition.
fn oracle_fid(m1: &[f64], s1: &DMatrix<f64>, m2: &[f64], s2: &DMatrix<f64>) -> f64 {
    let mean: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let prod = s1 * s2;
    let eig = prod.complex_eigenvalues();
    let cross: f64 = eig.iter().map(|z| z.re.max(0.0).sqrt()).sum();
    mean + s1.trace() + s2.trace() - 2.0 * cross
}

#[test]
fn closed_forms() {
    let a = stats(vec![0.3, -1.0], vec![1.5, 0.2, 0.2, 0.7]);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);

    let one = frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![1.0])).unwrap();
    assert_eq!(one, 1.0);

    let d = frechet_distance(
        &stats(vec![0.0, 0.0], vec![2.0, 0.0, 0.0, 1.0]),
        &stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 2.0]),
    )
    .unwrap();
    assert!((d - (6.0 - 4.0 * 2f64.sqrt())).abs() < 1e-8, "{d}");
    assert!((d - 0.34315).abs() < 1e-5);
}

#[test]
fn non_commuting_pairs_match_oracle() {
    // [DERIVED] eigenvalues of the non-symmetric product by an unrelated algorithm
    let mut rng = rng::seeded(42, Stream::Train);
    for case in 0..24 {
        let d = 2 + case % 5;
        let s1 = random_psd(&mut rng, d, d + 1);
        let s2 = random_psd(&mut rng, d, d + 2);
        assert!((&s1 * &s2 - &s2 * &s1).norm() > 1e-3, "pair commutes");
        let m1: Vec<f64> = (0..d).map(|_| rng::normal(&mut rng)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng::normal(&mut rng)).collect();
        let got = frechet_distance(&stats(m1.clone(), to_vec(&s1)), &stats(m2.clone(), to_vec(&s2))).unwrap();
        let want = oracle_fid(&m1, &s1, &m2, &s2);
        assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
        let back = frechet_distance(&stats(m2, to_vec(&s2)), &stats(m1, to_vec(&s1))).unwrap();
        assert!((got - back).abs() < 1e-8);
        assert!(got >= 0.0);
    }
}

#[test]
fn sqrt_reconstructs() {
    let mut rng = rng::seeded(7, Stream::Train);
    for case in 0..30 {
        let d = 1 + case % 8;
        let rank = 1 + case % (d + 1);
        let s = random_psd(&mut rng, d, rank);
        let v = to_vec(&s);
        let r = matrix_sqrt_psd(&v, d).unwrap();
        let rm = DMatrix::from_row_slice(d, d, &r);
        assert!((&rm - rm.transpose()).norm() < 1e-12);
        let err = (&rm * &rm - &s).norm() / s.norm();
        assert!(err < 1e-8, "case {case}: relative error {err:e}");
        let min_eig = rm.clone().symmetric_eigenvalues().min();
        assert!(min_eig > -1e-9);
    }
}

#[test]
fn sqrt_small_cases() {
    assert_eq!(matrix_sqrt_psd(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    let r = matrix_sqrt_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
    for (a, b) in r.iter().zip([2.0, 0.0, 0.0, 3.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(matrix_sqrt_psd(&[1.0, 0.5, 0.0, 1.0], 2).is_err());
    // tiny negative eigenvalue from roundoff is clamped
    let r = matrix_sqrt_psd(&[1.0, 1.0, 1.0, 1.0 - 1e-13], 2).unwrap();
    assert!(r.iter().all(|v| v.is_finite()));
}

fn orthogonal(rng: &mut Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng::normal(rng)).qr().q()
}

fn features(rng: &mut Rng, n: usize, d: usize, shift: f64) -> DMatrix<f64> {
    let mix = DMatrix::from_fn(d, d, |_, _| rng::normal(rng));
    DMatrix::from_fn(n, d, |_, _| rng::normal(rng) + shift) * mix
}

fn stats_of(m: &DMatrix<f64>) -> GaussianStats {
    let t = Tensor::new(vec![m.nrows(), m.ncols()], to_vec_rect(m)).unwrap();
    gaussian_stats(&t).unwrap()
}

fn to_vec_rect(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r * c).map(|i| m[(i / c, i % c)]).collect()
}

#[test]
fn rotation_invariance() {
    let mut rng = rng::seeded(3, Stream::Train);
    for _ in 0..5 {
        let x = features(&mut rng, 200, 6, 0.0);
        let y = features(&mut rng, 150, 6, 0.5);
        let q = orthogonal(&mut rng, 6);
        let base = frechet_distance(&stats_of(&x), &stats_of(&y)).unwrap();
        let rot = frechet_distance(&stats_of(&(&x * &q)), &stats_of(&(&y * &q))).unwrap();
        assert!((base - rot).abs() < 1e-6, "{base} vs {rot}");
    }
}

#[test]
fn identical_sets_and_mismatch() {
    let mut rng = rng::seeded(4, Stream::Train);
    let x = features(&mut rng, 80, 5, 0.0);
    let s = stats_of(&x);
    assert!(frechet_distance(&s, &s).unwrap() < 1e-6);
    let other = stats(vec![0.0; 4], vec![0.0; 16]);
    assert!(frechet_distance(&s, &other).is_err());
}

#[test]
fn covariance_monte_carlo() {
    // [DERIVED] sample covariance of L z against L Lᵀ, tolerance 5 standard errors
    let mut rng = rng::seeded(5, Stream::Train);
    let l = DMatrix::from_row_slice(4, 4, &[1.0, 0.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, -0.3, 0.2, 0.8, 0.0, 0.1, -0.4, 0.3, 0.6]);
    let truth = &l * l.transpose();
    let n = 1000;
    let z = DMatrix::from_fn(n, 4, |_, _| rng::normal(&mut rng));
    let x = z * l.transpose();
    let s = stats_of(&x);
    for i in 0..4 {
        assert!(s.mu[i].abs() < 5.0 * (truth[(i, i)] / n as f64).sqrt());
        for j in 0..4 {
            let se = ((truth[(i, i)] * truth[(j, j)] + truth[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((s.sigma[i * 4 + j] - truth[(i, j)]).abs() < 5.0 * se, "({i},{j})");
            assert_eq!(s.sigma[i * 4 + j], s.sigma[j * 4 + i]);
        }
    }
}

#[test]
fn projection_contracts() {
    let p = FeatureProjector::new(12, 5, 9).unwrap();
    assert_eq!(p, FeatureProjector::new(12, 5, 9).unwrap());
    assert_ne!(p, FeatureProjector::new(12, 5, 10).unwrap());
    let zero = Tensor::zeros(&[1, 3, 2, 2]);
    assert!(extract_features(&zero, &p).unwrap().data().iter().all(|&v| v == 0.0));

    let mut rng = rng::seeded(0, Stream::Train);
    let a = rng::normal_tensor(&mut rng, &[1, 3, 2, 2]);
    let b = rng::normal_tensor(&mut rng, &[1, 3, 2, 2]);
    let sum = a.zip_with(&b, |x, y| x + y).unwrap();
    let (fa, fb, fs) = (
        extract_features(&a, &p).unwrap(),
        extract_features(&b, &p).unwrap(),
        extract_features(&sum, &p).unwrap(),
    );
    for i in 0..5 {
        assert!((fs.data()[i] - fa.data()[i] - fb.data()[i]).abs() < 1e-12);
    }

    // [DERIVED] a single lit pixel selects one row of P
    let mut one = Tensor::zeros(&[1, 3, 2, 2]);
    one.data_mut()[7] = 0.25;
    let f = extract_features(&one, &p).unwrap();
    for j in 0..5 {
        assert_eq!(f.data()[j], 0.25 * p.matrix().data()[7 * 5 + j]);
    }
    assert!(extract_features(&Tensor::zeros(&[1, 3, 3, 3]), &p).is_err());
}
