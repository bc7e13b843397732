//! Convolutional factor analysis by ADMM on uncompressed images.
//!
//! Each outer iteration runs four updates in order: a gradient step on the
//! dictionary, a conjugate-gradient solve per feature map, adaptive
//! soft-thresholding into the auxiliary variable `Z`, and the dual update of
//! `U`.

mod io;
mod train;

pub use io::{read_dictionary, write_dictionary, write_trace_csv, DICTIONARY_MAGIC};
pub use train::{sparse_code, train_cfa, train_cfa_from, AdmmState, CfaModel, TraceRow};
pub(crate) use train::{adjoint_all, run_admm, DataTerm};

use ndarray::ArrayView3;

use crate::cg::{conjugate_gradient, CgSettings};
use crate::error::{Error, Result};
use crate::tensor::{ConvDictionary, ConvPolicy, FeatureSet, ImageTensor, Map};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Dictionary learning rate.
    pub beta: f64,
    pub eta0: f64,
    pub eta_max: f64,
    pub eta_growth: f64,
    /// Measure eta in units of the largest eigenvalue of the data term's
    /// Gram operator (`T^T T`, or `T^T A^T A T` under compression).
    pub eta_relative: bool,
    /// Extrapolate `Z` and `U` between iterations, restarting when the
    /// combined residual grows.
    pub accelerate: bool,
    pub max_outer: usize,
    /// Stop when the relative reconstruction (or measurement) error drops
    /// below this; zero disables early stopping.
    pub rel_tol: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Fraction of feature elements per image kept nonzero by each Z-update.
    pub sparsity_target: f64,
    pub seed: u64,
    /// Rescale atoms to unit norm after every dictionary step.
    pub normalize_atoms: bool,
    /// Start in-situ reconstructions from zero features instead of the
    /// back-projection warm start.
    pub zero_init: bool,
    pub conv: ConvPolicy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            beta: 1e-7,
            eta0: 1e-3,
            eta_max: 0.5,
            eta_growth: 1.1,
            eta_relative: true,
            accelerate: false,
            max_outer: 200,
            rel_tol: 1e-5,
            cg_tol: 1e-6,
            cg_max_iter: 200,
            sparsity_target: 0.05,
            seed: 0,
            normalize_atoms: false,
            zero_init: false,
            conv: ConvPolicy::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::param(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.eta0 > 0.0 && self.eta0 <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::param(format!(
                "need 0 < eta0 <= eta_max, got eta0={} eta_max={}",
                self.eta0, self.eta_max
            )));
        }
        if !(self.eta_growth >= 1.0) {
            return Err(Error::param(format!("eta_growth must be >= 1, got {}", self.eta_growth)));
        }
        if !(self.sparsity_target > 0.0 && self.sparsity_target <= 1.0) {
            return Err(Error::param(format!(
                "sparsity target must lie in (0, 1], got {}",
                self.sparsity_target
            )));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::param(format!("cg_tol must be positive, got {}", self.cg_tol)));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::param(format!("rel_tol must be non-negative, got {}", self.rel_tol)));
        }
        Ok(())
    }

    /// Penalty weight at outer iteration `t` (zero-based).
    pub fn eta_at(&self, t: usize) -> f64 {
        (self.eta0 * self.eta_growth.powi(t.min(i32::MAX as usize) as i32)).min(self.eta_max)
    }

    pub fn cg(&self) -> CgSettings {
        CgSettings {
            tol: self.cg_tol,
            max_iter: self.cg_max_iter,
        }
    }

    /// Nonzeros kept per image with `elements` feature entries.
    pub fn target_nonzeros(&self, elements: usize) -> usize {
        ((self.sparsity_target * elements as f64).floor() as usize).min(elements)
    }
}

/// Soft thresholding: `sign(v) * max(|v| - gamma, 0)`.
pub fn shrink(v: f64, gamma: f64) -> f64 {
    let m = v.abs() - gamma;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

/// Threshold that keeps `target` entries alive under [`shrink`]: the
/// magnitude of the `(target+1)`-th largest absolute value, or zero when
/// every entry may survive. Tied magnitudes are ordered by flat index.
pub fn adaptive_threshold(values: &[f64], target: usize) -> f64 {
    if target >= values.len() {
        return 0.0;
    }
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let (_, nth, _) = mags.select_nth_unstable_by(target, |a, b| b.total_cmp(a));
    *nth
}

/// `Z = soft(S + U/eta, gamma)` with `gamma` chosen per image to keep
/// `target` nonzeros. Returns the threshold used.
pub fn shrink_features(
    s: &FeatureSet,
    u: &FeatureSet,
    eta: f64,
    target: usize,
    z: &mut FeatureSet,
) -> Result<f64> {
    if !s.same_shape(u) || !s.same_shape(z) {
        return Err(Error::shape("S, U and Z must share a shape"));
    }
    let values: Vec<f64> = s
        .maps()
        .iter()
        .zip(u.maps())
        .flat_map(|(sm, um)| sm.iter().zip(um.iter()).map(|(a, b)| a + b / eta))
        .collect();
    let gamma = adaptive_threshold(&values, target);
    let mut it = values.into_iter();
    for k in 0..z.len() {
        for v in z.map_mut(k).iter_mut() {
            *v = shrink(it.next().unwrap(), gamma);
        }
    }
    Ok(gamma)
}

/// `U + eta (S - Z)`, element-wise.
pub fn dual_update(u: &FeatureSet, s: &FeatureSet, z: &FeatureSet, eta: f64) -> Result<FeatureSet> {
    if !s.same_shape(u) || !s.same_shape(z) {
        return Err(Error::shape("S, U and Z must share a shape"));
    }
    let maps = u
        .maps()
        .iter()
        .zip(s.maps())
        .zip(z.maps())
        .map(|((um, sm), zm)| um + &((sm - zm) * eta))
        .collect();
    FeatureSet::from_maps(maps)
}

pub(crate) fn dual_update_in_place(u: &mut FeatureSet, s: &FeatureSet, z: &FeatureSet, eta: f64) {
    for k in 0..u.len() {
        let (sm, zm) = (s.map(k), z.map(k));
        for ((uv, sv), zv) in u.map_mut(k).iter_mut().zip(sm.iter()).zip(zm.iter()) {
            *uv += eta * (sv - zv);
        }
    }
}

/// Result of one feature-map linear solve.
#[derive(Clone, Debug)]
pub struct FeatureSolve {
    pub map: Map,
    pub converged: bool,
    pub iterations: usize,
    pub rel_residual: f64,
}

fn check_feature_shapes(
    atom: ArrayView3<'_, f64>,
    image: (usize, usize),
    z: &Map,
    u: &Map,
) -> Result<(usize, usize)> {
    let (_, h, w) = atom.dim();
    let shape = (image.0 + h - 1, image.1 + w - 1);
    if z.dim() != shape || u.dim() != shape {
        return Err(Error::shape(format!(
            "feature maps must be {}x{} for a {}x{} image and {}x{} atom",
            shape.0, shape.1, image.0, image.1, h, w
        )));
    }
    Ok(shape)
}

/// Solves `(T^T T + eta I) s = T^T x_k + eta (z - u)` for one atom, where
/// `residual_excluding_k` is the image minus every other atom's contribution.
pub fn feature_cg_solve(
    atom: ArrayView3<'_, f64>,
    residual_excluding_k: &ImageTensor,
    z: &Map,
    u: &Map,
    eta: f64,
    warm_start: Option<&Map>,
    config: &SolverConfig,
) -> Result<FeatureSolve> {
    if !(eta > 0.0) {
        return Err(Error::param(format!("eta must be positive, got {eta}")));
    }
    let (fh, fw) = check_feature_shapes(
        atom,
        (residual_excluding_k.height(), residual_excluding_k.width()),
        z,
        u,
    )?;
    let policy = config.conv;
    let mut rhs = policy.atom_adjoint(atom, residual_excluding_k)?;
    rhs.zip_mut_with(&(z - u), |r, d| *r += eta * d);

    let mut failure = None;
    let op = |v: &[f64]| -> Vec<f64> {
        let s = Map::from_shape_vec((fh, fw), v.to_vec()).unwrap();
        let ts = match policy.synthesize_atom(atom, &s) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e);
                return v.to_vec();
            }
        };
        let mut out = policy.atom_adjoint(atom, &ts).unwrap();
        out.zip_mut_with(&s, |o, si| *o += eta * si);
        out.into_raw_vec_and_offset().0
    };
    let warm = warm_start.map(|w| w.as_standard_layout().into_owned());
    let outcome = conjugate_gradient(
        op,
        rhs.as_slice().unwrap(),
        warm.as_ref().map(|w| w.as_slice().unwrap()),
        config.cg(),
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(FeatureSolve {
        map: Map::from_shape_vec((fh, fw), outcome.x).unwrap(),
        converged: outcome.converged,
        iterations: outcome.iterations,
        rel_residual: outcome.rel_residual,
    })
}

/// `x - sum_k D_k * S_k` for one image.
pub fn residual(
    dict: &ConvDictionary,
    image: &ImageTensor,
    features: &FeatureSet,
    policy: &ConvPolicy,
) -> Result<ImageTensor> {
    let recon = policy.synthesize(dict, features)?;
    if recon.shape() != image.shape() {
        return Err(Error::shape(format!(
            "synthesis is {:?} but image is {:?}",
            recon.shape(),
            image.shape()
        )));
    }
    Ok(image.sub(&recon))
}

/// Adds `beta * grads[k]` to every atom and checks the result is finite.
pub(crate) fn apply_dictionary_step(
    dict: &ConvDictionary,
    grads: Vec<ndarray::Array3<f64>>,
    beta: f64,
) -> Result<ConvDictionary> {
    for (k, g) in grads.iter().enumerate() {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "dictionary gradient for atom {k} has non-finite entry at flat index {bad}"
            )));
        }
    }
    let atoms = dict
        .atoms()
        .iter()
        .zip(grads)
        .map(|(a, g)| a + &(g * beta))
        .collect();
    ConvDictionary::new(atoms, dict.layer())
}

/// One gradient step on every atom from the same snapshot:
/// `d_k += beta * sum_n F_{k,n}^T (x_n - sum_j F_{j,n} d_j)`.
pub fn dict_gradient_step(
    dict: &ConvDictionary,
    images: &[ImageTensor],
    features: &[FeatureSet],
    beta: f64,
    policy: &ConvPolicy,
) -> Result<ConvDictionary> {
    if images.len() != features.len() {
        return Err(Error::shape(format!(
            "{} images but {} feature sets",
            images.len(),
            features.len()
        )));
    }
    if beta == 0.0 {
        return Ok(dict.clone());
    }
    let per_image = rayon_map(images, features, |x, s| {
        let r = residual(dict, x, s, policy)?;
        s.maps()
            .iter()
            .map(|m| policy.atom_gradient(m, &r))
            .collect::<Result<Vec<_>>>()
    })?;
    let grads = sum_gradients(dict, per_image);
    apply_dictionary_step(dict, grads, beta)
}

/// Sums per-image atom gradients in image order.
pub(crate) fn sum_gradients(
    dict: &ConvDictionary,
    per_image: Vec<Vec<ndarray::Array3<f64>>>,
) -> Vec<ndarray::Array3<f64>> {
    let mut grads: Vec<_> = dict.atoms().iter().map(|a| ndarray::Array3::zeros(a.dim())).collect();
    for g in per_image {
        for (acc, gk) in grads.iter_mut().zip(g) {
            *acc += &gk;
        }
    }
    grads
}

/// Order-preserving parallel map over paired slices.
pub(crate) fn rayon_map<A, B, T, F>(a: &[A], b: &[B], f: F) -> Result<Vec<T>>
where
    A: Sync,
    B: Sync,
    T: Send,
    F: Fn(&A, &B) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    a.par_iter().zip(b.par_iter()).map(|(x, y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Map {
        Map::from_shape_simple_fn((h, w), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shrink_cases() {
        assert_eq!(shrink(1.5, 1.0), 0.5);
        assert_eq!(shrink(-0.3, 0.5), 0.0);
        assert_eq!(shrink(-2.0, 0.5), -1.5);
        assert_eq!(shrink(0.5, 0.5), 0.0);
    }

    #[test]
    fn threshold_count_rule() {
        let v = [3.0, -1.0, 0.5, 2.0];
        let g = adaptive_threshold(&v, 2);
        assert_eq!(g, 1.0);
        let out: Vec<f64> = v.iter().map(|x| shrink(*x, g)).collect();
        assert_eq!(out, vec![2.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn threshold_edges() {
        let v = [3.0, -1.0, 0.5];
        assert_eq!(adaptive_threshold(&v, 3), 0.0);
        assert_eq!(adaptive_threshold(&v, 10), 0.0);
        assert_eq!(adaptive_threshold(&[0.0; 5], 2), 0.0);
        assert_eq!(adaptive_threshold(&v, 0), 3.0);
    }

    #[test]
    fn threshold_with_ties_keeps_at_most_target() {
        let v = [2.0, -2.0, 2.0, 1.0];
        let g = adaptive_threshold(&v, 1);
        assert_eq!(g, 2.0);
        assert_eq!(v.iter().filter(|x| shrink(**x, g) != 0.0).count(), 0);
    }

    #[test]
    fn dual_update_cases() {
        let s = FeatureSet::from_maps(vec![array![[1.0, 2.0]]]).unwrap();
        let u = FeatureSet::from_maps(vec![array![[0.5, -0.5]]]).unwrap();
        assert_eq!(dual_update(&u, &s, &s, 3.0).unwrap(), u);
        let zero = FeatureSet::zeros(1, 1, 2);
        let z = FeatureSet::from_maps(vec![array![[0.0, 1.0]]]).unwrap();
        let c = dual_update(&zero, &s, &z, 1.0).unwrap();
        assert_eq!(c.map(0), &array![[1.0, 1.0]]);
    }

    #[test]
    fn dual_update_matches_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| {
            FeatureSet::from_maps((0..3).map(|_| random_map(rng, 4, 5)).collect()).unwrap()
        };
        let (u, s, z) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let out = dual_update(&u, &s, &z, 0.7).unwrap();
        for k in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let e = u.map(k)[[i, j]] + 0.7 * (s.map(k)[[i, j]] - z.map(k)[[i, j]]);
                    assert!((out.map(k)[[i, j]] - e).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn shrink_features_keeps_target_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = FeatureSet::from_maps((0..4).map(|_| random_map(&mut rng, 6, 6)).collect()).unwrap();
        let u = FeatureSet::zeros(4, 6, 6);
        let mut z = FeatureSet::zeros(4, 6, 6);
        shrink_features(&s, &u, 1.0, 17, &mut z).unwrap();
        assert_eq!(z.count_nonzero(), 17);
    }

    #[test]
    fn identity_atom_solve() {
        let atom = Array2::from_elem((1, 1), 1.0).into_shape_with_order((1, 1, 1)).unwrap();
        let b = array![[1.0, -2.0], [0.5, 3.0]];
        let img = ImageTensor::from_gray(b.clone());
        let cfg = SolverConfig::default();
        let sol = feature_cg_solve(atom.view(), &img, &b, &Map::zeros((2, 2)), 1.0, None, &cfg).unwrap();
        assert!(sol.converged);
        for (x, y) in sol.map.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn large_eta_drives_solution_to_z_minus_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let atom = random_map(&mut rng, 3, 3).into_shape_with_order((1, 3, 3)).unwrap();
        let img = ImageTensor::from_gray(random_map(&mut rng, 5, 5));
        let zeros = Map::zeros((7, 7));
        let cfg = SolverConfig::default();
        let sol = feature_cg_solve(atom.view(), &img, &zeros, &zeros, 1e9, None, &cfg).unwrap();
        assert!(sol.map.iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn feature_solve_matches_dense_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kernel = random_map(&mut rng, 3, 3);
        let atom = kernel.clone().into_shape_with_order((1, 3, 3)).unwrap();
        let x = random_map(&mut rng, 6, 6);
        let z = random_map(&mut rng, 8, 8);
        let u = random_map(&mut rng, 8, 8);
        let eta = 0.3;
        let cfg = SolverConfig {
            cg_tol: 1e-13,
            cg_max_iter: 500,
            ..SolverConfig::default()
        };
        let sol = feature_cg_solve(atom.view(), &ImageTensor::from_gray(x.clone()), &z, &u, eta, None, &cfg).unwrap();

        // assemble T column by column from unit feature maps
        let n = 64;
        let mut t = Array2::<f64>::zeros((36, n));
        for j in 0..n {
            let mut e = Map::zeros((8, 8));
            e[[j / 8, j % 8]] = 1.0;
            let col = crate::tensor::conv2_valid(e.view(), kernel.view()).unwrap();
            for (i, v) in col.iter().enumerate() {
                t[[i, j]] = *v;
            }
        }
        let mut a = t.t().dot(&t);
        for i in 0..n {
            a[[i, i]] += eta;
        }
        let xv = ndarray::Array1::from(x.iter().copied().collect::<Vec<_>>());
        let zu = ndarray::Array1::from((&z - &u).iter().copied().collect::<Vec<_>>());
        let b = t.t().dot(&xv) + zu * eta;
        let expected = crate::linalg_test::cholesky_solve(&a, &b);
        for (i, v) in sol.map.iter().enumerate() {
            assert!((v - expected[i]).abs() < 1e-8, "entry {i}: {v} vs {}", expected[i]);
        }
    }

    #[test]
    fn feature_solve_rejects_bad_eta_and_shapes() {
        let atom = ndarray::Array3::<f64>::ones((1, 2, 2));
        let img = ImageTensor::zeros(3, 3, 1);
        let ok = Map::zeros((4, 4));
        let cfg = SolverConfig::default();
        assert!(matches!(
            feature_cg_solve(atom.view(), &img, &ok, &ok, 0.0, None, &cfg),
            Err(Error::Parameter(_))
        ));
        let bad = Map::zeros((3, 3));
        assert!(matches!(
            feature_cg_solve(atom.view(), &img, &bad, &bad, 1.0, None, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_beta_leaves_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dict = ConvDictionary::random(2, (3, 3), 1, 1, &mut rng).unwrap();
        let img = ImageTensor::from_gray(random_map(&mut rng, 5, 5));
        let s = FeatureSet::from_maps(vec![random_map(&mut rng, 7, 7), random_map(&mut rng, 7, 7)]).unwrap();
        let out = dict_gradient_step(&dict, &[img], &[s], 0.0, &ConvPolicy::default()).unwrap();
        assert_eq!(out, dict);
    }

    #[test]
    fn exact_data_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dict = ConvDictionary::random(3, (3, 3), 1, 1, &mut rng).unwrap();
        let s = FeatureSet::from_maps((0..3).map(|_| random_map(&mut rng, 8, 8)).collect()).unwrap();
        let img = ConvPolicy::default().synthesize(&dict, &s).unwrap();
        let out = dict_gradient_step(&dict, &[img], &[s], 0.1, &ConvPolicy::default()).unwrap();
        for (a, b) in out.atoms().iter().zip(dict.atoms()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn single_atom_step_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_map(&mut rng, 3, 3);
        let s = random_map(&mut rng, 7, 7);
        let x = random_map(&mut rng, 5, 5);
        let beta = 0.05;
        let dict = ConvDictionary::from_kernels(vec![d.clone()], 1).unwrap();
        let fs = FeatureSet::from_maps(vec![s.clone()]).unwrap();
        let out = dict_gradient_step(&dict, &[ImageTensor::from_gray(x.clone())], &[fs], beta, &ConvPolicy::default()).unwrap();

        // direct: r[i,j] = x - sum d[p,q] s[i+2-p, j+2-q]; g[p,q] = sum r[i,j] s[i+2-p, j+2-q]
        let mut r = x.clone();
        for i in 0..5 {
            for j in 0..5 {
                for p in 0..3 {
                    for q in 0..3 {
                        r[[i, j]] -= d[[p, q]] * s[[i + 2 - p, j + 2 - q]];
                    }
                }
            }
        }
        for p in 0..3 {
            for q in 0..3 {
                let mut g = 0.0;
                for i in 0..5 {
                    for j in 0..5 {
                        g += r[[i, j]] * s[[i + 2 - p, j + 2 - q]];
                    }
                }
                let expected = d[[p, q]] + beta * g;
                assert!((out.atoms()[0][[0, p, q]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let dict = ConvDictionary::from_kernels(vec![Map::ones((2, 2))], 1).unwrap();
        let mut s = Map::zeros((3, 3));
        s[[1, 1]] = f64::INFINITY;
        let fs = FeatureSet::from_maps(vec![s]).unwrap();
        let img = ImageTensor::zeros(2, 2, 1);
        let err = dict_gradient_step(&dict, &[img], &[fs], 1.0, &ConvPolicy::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn eta_schedule_is_capped() {
        let cfg = SolverConfig::default();
        assert_eq!(cfg.eta_at(0), 1e-3);
        assert!((cfg.eta_at(1) - 1.1e-3).abs() < 1e-15);
        assert_eq!(cfg.eta_at(500), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            sparsity_target: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            eta0: 10.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
