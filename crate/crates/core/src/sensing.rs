//! Compressive sensing operators `A` and their adjoints.
//!
//! Images are vectorized column-major (see [`ImageTensor::to_vector`]).
//! Operators are pure functions of `(variant, M, N, seed)`; only that
//! descriptor is ever persisted.
//!
//! [`ImageTensor::to_vector`]: crate::tensor::ImageTensor::to_vector

use std::io::{Read, Write};
use std::sync::OnceLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

pub const OPERATOR_MAGIC: &[u8; 6] = b"CSAOP1";

/// Largest column count for which the dense Gram matrix `A^T A` is cached.
const MAX_GRAM_COLS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensingKind {
    Gaussian,
    Hadamard,
    /// `A = I`, the uncompressed reference case (requires `M = N`).
    Identity,
}

impl SensingKind {
    fn tag(self) -> u8 {
        match self {
            SensingKind::Gaussian => 0,
            SensingKind::Hadamard => 1,
            SensingKind::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SensingKind::Gaussian),
            1 => Some(SensingKind::Hadamard),
            2 => Some(SensingKind::Identity),
            _ => None,
        }
    }
}

impl std::str::FromStr for SensingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SensingKind::Gaussian),
            "hadamard" => Ok(SensingKind::Hadamard),
            "identity" => Ok(SensingKind::Identity),
            other => Err(Error::param(format!(
                "unknown sensing matrix '{other}' (expected gaussian, hadamard or identity)"
            ))),
        }
    }
}

impl std::fmt::Display for SensingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SensingKind::Gaussian => "gaussian",
            SensingKind::Hadamard => "hadamard",
            SensingKind::Identity => "identity",
        })
    }
}

/// Everything needed to regenerate an operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperatorDescriptor {
    pub kind: SensingKind,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl OperatorDescriptor {
    pub fn build(&self) -> Result<SensingOperator> {
        match self.kind {
            SensingKind::Gaussian => make_gaussian(self.rows, self.cols, self.seed),
            SensingKind::Hadamard => make_permuted_hadamard(self.rows, self.cols, self.seed),
            SensingKind::Identity if self.rows == self.cols => make_identity(self.cols),
            SensingKind::Identity => Err(Error::param(format!(
                "identity sensing needs M = N, got M={} N={}",
                self.rows, self.cols
            ))),
        }
    }

    /// `CSAOP1`, tag u8, M u32, N u32, seed u64; little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(OPERATOR_MAGIC)?;
        w.write_u8(self.kind.tag())?;
        w.write_u32::<LittleEndian>(self.rows as u32)?;
        w.write_u32::<LittleEndian>(self.cols as u32)?;
        w.write_u64::<LittleEndian>(self.seed)
    }

    /// Reads a descriptor that starts `base` bytes into the enclosing file.
    pub fn read_from<R: Read>(r: &mut R, base: u64) -> Result<Self> {
        let eof = |offset: u64| {
            move |_e: std::io::Error| Error::Parse {
                offset: base + offset,
                message: "truncated operator descriptor".into(),
            }
        };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(eof(0))?;
        if &magic != OPERATOR_MAGIC {
            return Err(Error::Parse {
                offset: base,
                message: format!(
                    "expected operator magic {:?}, found {:?}",
                    String::from_utf8_lossy(OPERATOR_MAGIC),
                    String::from_utf8_lossy(&magic)
                ),
            });
        }
        let tag = r.read_u8().map_err(eof(6))?;
        let kind = SensingKind::from_tag(tag).ok_or(Error::Parse {
            offset: base + 6,
            message: format!("unknown operator variant tag {tag}"),
        })?;
        let rows = r.read_u32::<LittleEndian>().map_err(eof(7))? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(eof(11))? as usize;
        let seed = r.read_u64::<LittleEndian>().map_err(eof(15))?;
        Ok(OperatorDescriptor {
            kind,
            rows,
            cols,
            seed,
        })
    }

    pub const ENCODED_LEN: u64 = 23;
}

#[derive(Debug)]
enum Variant {
    Gaussian {
        /// Row-major `M x N`.
        matrix: Array2<f64>,
        gram: OnceLock<Option<Array2<f64>>>,
    },
    Hadamard {
        row_ids: Vec<usize>,
        col_perm: Vec<usize>,
    },
    Identity,
}

#[derive(Debug)]
pub struct SensingOperator {
    variant: Variant,
    rows: usize,
    cols: usize,
    seed: u64,
}

/// Number of measurements for a compressive sensing ratio: `round(csr * N)`.
pub fn measurements_for_csr(csr: f64, cols: usize) -> Result<usize> {
    if !(csr > 0.0 && csr <= 1.0) {
        return Err(Error::param(format!("CSr must lie in (0, 1], got {csr}")));
    }
    let m = (csr * cols as f64).round() as usize;
    if m < 1 {
        return Err(Error::param(format!(
            "CSr {csr} yields no measurements for {cols} pixels"
        )));
    }
    Ok(m)
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows < 1 || rows > cols {
        return Err(Error::param(format!(
            "sensing matrix needs 1 <= M <= N, got M={rows}, N={cols}"
        )));
    }
    if cols > u32::MAX as usize {
        return Err(Error::param("sensing matrix too wide"));
    }
    Ok(())
}

/// I.i.d. standard normal entries, each column rescaled to unit l2 norm.
pub fn make_gaussian(rows: usize, cols: usize, seed: u64) -> Result<SensingOperator> {
    check_dims(rows, cols)?;
    let mut g = rng::stream(seed, "sensing/gaussian");
    let mut matrix = Array2::from_shape_simple_fn((rows, cols), || g.sample::<f64, _>(StandardNormal));
    for mut col in matrix.columns_mut() {
        let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.mapv_inplace(|v| v / n);
    }
    Ok(SensingOperator {
        variant: Variant::Gaussian {
            matrix,
            gram: OnceLock::new(),
        },
        rows,
        cols,
        seed,
    })
}

/// `A = R H P / sqrt(N)`: Sylvester-Hadamard with a random column permutation
/// `P` and `M` distinct rows `R` chosen uniformly without replacement.
pub fn make_permuted_hadamard(rows: usize, cols: usize, seed: u64) -> Result<SensingOperator> {
    if !cols.is_power_of_two() {
        return Err(Error::param(format!(
            "permuted Hadamard sensing needs a power-of-two pixel count, got {cols}"
        )));
    }
    check_dims(rows, cols)?;
    let mut g = rng::stream(seed, "sensing/hadamard");
    let mut col_perm: Vec<usize> = (0..cols).collect();
    col_perm.shuffle(&mut g);
    let mut row_ids = rand::seq::index::sample(&mut g, cols, rows).into_vec();
    row_ids.sort_unstable();
    Ok(SensingOperator {
        variant: Variant::Hadamard { row_ids, col_perm },
        rows,
        cols,
        seed,
    })
}

pub fn make_identity(cols: usize) -> Result<SensingOperator> {
    check_dims(cols, cols)?;
    Ok(SensingOperator {
        variant: Variant::Identity,
        rows: cols,
        cols,
        seed: 0,
    })
}

/// Unnormalized in-place fast Walsh-Hadamard transform (Sylvester ordering).
pub fn fwht(data: &mut [f64]) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in data.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

impl SensingOperator {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> SensingKind {
        match self.variant {
            Variant::Gaussian { .. } => SensingKind::Gaussian,
            Variant::Hadamard { .. } => SensingKind::Hadamard,
            Variant::Identity => SensingKind::Identity,
        }
    }

    pub fn descriptor(&self) -> OperatorDescriptor {
        OperatorDescriptor {
            kind: self.kind(),
            rows: self.rows,
            cols: self.cols,
            seed: self.seed,
        }
    }

    /// Dense matrix for the Gaussian variant.
    pub fn matrix(&self) -> Option<&Array2<f64>> {
        match &self.variant {
            Variant::Gaussian { matrix, .. } => Some(matrix),
            _ => None,
        }
    }

    /// `y = A x`
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "operator expects {} inputs, got {}",
                self.cols,
                x.len()
            )));
        }
        Ok(match &self.variant {
            Variant::Gaussian { matrix, .. } => matrix
                .rows()
                .into_iter()
                .map(|row| crate::tensor::dot(row.as_slice().unwrap(), x))
                .collect(),
            Variant::Hadamard { row_ids, col_perm } => {
                let mut v: Vec<f64> = col_perm.iter().map(|&j| x[j]).collect();
                fwht(&mut v);
                let scale = 1.0 / (self.cols as f64).sqrt();
                row_ids.iter().map(|&i| v[i] * scale).collect()
            }
            Variant::Identity => x.to_vec(),
        })
    }

    /// `x = A^T y`
    pub fn apply_adj(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(format!(
                "adjoint expects {} inputs, got {}",
                self.rows,
                y.len()
            )));
        }
        Ok(match &self.variant {
            Variant::Gaussian { matrix, .. } => {
                let mut out = vec![0.0; self.cols];
                for (row, &yi) in matrix.rows().into_iter().zip(y) {
                    if yi == 0.0 {
                        continue;
                    }
                    for (o, &a) in out.iter_mut().zip(row.as_slice().unwrap()) {
                        *o += yi * a;
                    }
                }
                out
            }
            Variant::Hadamard { row_ids, col_perm } => {
                let mut v = vec![0.0; self.cols];
                for (&i, &yi) in row_ids.iter().zip(y) {
                    v[i] = yi;
                }
                fwht(&mut v);
                let scale = 1.0 / (self.cols as f64).sqrt();
                let mut out = vec![0.0; self.cols];
                for (&j, &vi) in col_perm.iter().zip(&v) {
                    out[j] = vi * scale;
                }
                out
            }
            Variant::Identity => y.to_vec(),
        })
    }

    /// `A^T A x`, through a cached Gram matrix when that is cheaper.
    pub fn apply_normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Variant::Gaussian { .. } = &self.variant {
            if x.len() != self.cols {
                return Err(Error::shape(format!(
                    "operator expects {} inputs, got {}",
                    self.cols,
                    x.len()
                )));
            }
            if let Some(g) = self.gram() {
                return Ok(g
                    .rows()
                    .into_iter()
                    .map(|row| crate::tensor::dot(row.as_slice().unwrap(), x))
                    .collect());
            }
        }
        self.apply_adj(&self.apply(x)?)
    }

    /// [`Self::apply`] on every column of an `N x B` block.
    pub fn apply_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(x, self.cols)?;
        match &self.variant {
            Variant::Gaussian { matrix, .. } => Ok(matrix.dot(&x)),
            _ => self.columnwise(x, self.rows, |c| self.apply(c)),
        }
    }

    /// [`Self::apply_adj`] on every column of an `M x B` block.
    pub fn apply_adj_batch(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(y, self.rows)?;
        match &self.variant {
            Variant::Gaussian { matrix, .. } => Ok(matrix.t().dot(&y)),
            _ => self.columnwise(y, self.cols, |c| self.apply_adj(c)),
        }
    }

    /// [`Self::apply_normal`] on every column of an `N x B` block.
    pub fn apply_normal_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(x, self.cols)?;
        match &self.variant {
            Variant::Gaussian { matrix, .. } => Ok(match self.gram() {
                Some(g) => g.dot(&x),
                None => matrix.t().dot(&matrix.dot(&x)),
            }),
            _ => self.columnwise(x, self.cols, |c| self.apply_normal(c)),
        }
    }

    fn check_batch(&self, x: ArrayView2<'_, f64>, rows: usize) -> Result<()> {
        if x.nrows() != rows {
            return Err(Error::shape(format!(
                "operator block expects {rows} rows, got {}",
                x.nrows()
            )));
        }
        Ok(())
    }

    fn columnwise(
        &self,
        x: ArrayView2<'_, f64>,
        out_rows: usize,
        f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((out_rows, x.ncols()));
        for (j, col) in x.columns().into_iter().enumerate() {
            let v = f(&col.to_vec())?;
            out.column_mut(j).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }

    fn gram(&self) -> Option<&Array2<f64>> {
        match &self.variant {
            Variant::Gaussian { matrix, gram } => gram
                .get_or_init(|| {
                    (self.cols <= 2 * self.rows && self.cols <= MAX_GRAM_COLS).then(|| matrix.t().dot(matrix))
                })
                .as_ref(),
            _ => None,
        }
    }

    /// Explicit `M x N` matrix, for tests and small problems.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        let mut e = vec![0.0; self.cols];
        for j in 0..self.cols {
            e[j] = 1.0;
            let col = self.apply(&e).unwrap();
            out.column_mut(j).assign(&ndarray::Array1::from(col));
            e[j] = 0.0;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn gaussian_columns_are_unit_norm() {
        let a = make_gaussian(30, 50, 3).unwrap();
        let m = a.matrix().unwrap();
        let worst = m
            .columns()
            .into_iter()
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12);
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = make_gaussian(10, 20, 99).unwrap();
        let b = make_gaussian(10, 20, 99).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        let c = make_gaussian(10, 20, 100).unwrap();
        assert_ne!(a.matrix(), c.matrix());
    }

    #[test]
    fn csr_rounding() {
        assert_eq!(measurements_for_csr(0.3, 784).unwrap(), 235);
        assert_eq!(measurements_for_csr(1.0, 784).unwrap(), 784);
        assert!(measurements_for_csr(0.0, 784).is_err());
        assert!(measurements_for_csr(1.5, 784).is_err());
        assert!(measurements_for_csr(0.0001, 784).is_err());
    }

    #[test]
    fn dimension_checks() {
        assert!(matches!(make_gaussian(0, 4, 1), Err(Error::Parameter(_))));
        assert!(matches!(make_gaussian(5, 4, 1), Err(Error::Parameter(_))));
        assert!(matches!(make_permuted_hadamard(4, 12, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn sylvester_base_case() {
        let mut v = vec![1.0, 0.0];
        fwht(&mut v);
        assert_eq!(v, vec![1.0, 1.0]);
        let mut v = vec![0.0, 1.0];
        fwht(&mut v);
        assert_eq!(v, vec![1.0, -1.0]);
    }

    #[test]
    fn hadamard_rows_are_orthonormal() {
        let a = make_permuted_hadamard(8, 16, 5).unwrap();
        let d = a.to_dense();
        let g = d.dot(&d.t());
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - expected).abs() <= 1e-12);
            }
        }
    }

    /// Independent construction of R H P / sqrt(N) from the Sylvester recursion.
    #[test]
    fn hadamard_matches_dense_construction() {
        let n = 16;
        let mut h = Array2::from_elem((1, 1), 1.0);
        while h.nrows() < n {
            let k = h.nrows();
            let mut next = Array2::zeros((2 * k, 2 * k));
            for i in 0..k {
                for j in 0..k {
                    next[[i, j]] = h[[i, j]];
                    next[[i, j + k]] = h[[i, j]];
                    next[[i + k, j]] = h[[i, j]];
                    next[[i + k, j + k]] = -h[[i, j]];
                }
            }
            h = next;
        }
        let a = make_permuted_hadamard(8, n, 21).unwrap();
        let Variant::Hadamard { row_ids, col_perm } = &a.variant else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_vec(&mut rng, n);
        let y = a.apply(&x).unwrap();
        for (r, &i) in row_ids.iter().enumerate() {
            let expected: f64 = (0..n).map(|j| h[[i, j]] * x[col_perm[j]]).sum::<f64>() / 4.0;
            assert!((y[r] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn full_hadamard_is_orthogonal() {
        let a = make_permuted_hadamard(64, 64, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, 64);
        let back = a.apply_adj(&a.apply(&x).unwrap()).unwrap();
        for (u, v) in x.iter().zip(&back) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_identity_both_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for op in [make_gaussian(20, 64, 1).unwrap(), make_permuted_hadamard(20, 64, 1).unwrap()] {
            for _ in 0..100 {
                let x = random_vec(&mut rng, 64);
                let y = random_vec(&mut rng, 20);
                let lhs = dot(&op.apply(&x).unwrap(), &y);
                let rhs = dot(&x, &op.apply_adj(&y).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12));
            }
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let a = make_gaussian(5, 9, 1).unwrap();
        assert_eq!(a.apply(&[0.0; 9]).unwrap(), vec![0.0; 5]);
        let h = make_permuted_hadamard(5, 8, 1).unwrap();
        assert_eq!(h.apply(&[0.0; 8]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn dense_apply_matches_matvec() {
        let a = make_gaussian(7, 12, 11).unwrap();
        let m = a.matrix().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_vec(&mut rng, 12);
        let y = a.apply(&x).unwrap();
        for i in 0..7 {
            let mut s = 0.0;
            for j in 0..12 {
                s += m[[i, j]] * x[j];
            }
            assert!((y[i] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn normal_operator_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // 2M >= N exercises the Gram path, 2M < N the composed path
        for m in [40, 10] {
            let a = make_gaussian(m, 48, 2).unwrap();
            let x = random_vec(&mut rng, 48);
            let direct = a.apply_adj(&a.apply(&x).unwrap()).unwrap();
            let normal = a.apply_normal(&x).unwrap();
            for (u, v) in direct.iter().zip(&normal) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_ops_match_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ops = [
            make_gaussian(40, 64, 3).unwrap(),
            make_gaussian(12, 64, 3).unwrap(),
            make_permuted_hadamard(20, 64, 3).unwrap(),
        ];
        for a in &ops {
            let x = Array2::from_shape_fn((64, 3), |_| rng.gen_range(-1.0..1.0));
            let y = Array2::from_shape_fn((a.rows(), 3), |_| rng.gen_range(-1.0..1.0));
            let (ax, aty, nx) = (
                a.apply_batch(x.view()).unwrap(),
                a.apply_adj_batch(y.view()).unwrap(),
                a.apply_normal_batch(x.view()).unwrap(),
            );
            for j in 0..3 {
                let xc = x.column(j).to_vec();
                let pairs = [
                    (ax.column(j).to_vec(), a.apply(&xc).unwrap()),
                    (aty.column(j).to_vec(), a.apply_adj(&y.column(j).to_vec()).unwrap()),
                    (nx.column(j).to_vec(), a.apply_normal(&xc).unwrap()),
                ];
                for (got, want) in pairs {
                    for (u, v) in got.iter().zip(&want) {
                        assert!((u - v).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(ops[0].apply_batch(Array2::zeros((63, 1)).view()).is_err());
    }

    #[test]
    fn length_mismatch() {
        let a = make_gaussian(3, 6, 1).unwrap();
        assert!(matches!(a.apply(&[1.0; 5]), Err(Error::Shape(_))));
        assert!(matches!(a.apply_adj(&[1.0; 6]), Err(Error::Shape(_))));
    }

    #[test]
    fn descriptor_round_trip() {
        let d = make_permuted_hadamard(100, 256, 77).unwrap().descriptor();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, OperatorDescriptor::ENCODED_LEN);
        assert_eq!(&buf[..6], b"CSAOP1");
        let back = OperatorDescriptor::read_from(&mut buf.as_slice(), 0).unwrap();
        assert_eq!(back, d);
        let rebuilt = back.build().unwrap();
        let x: Vec<f64> = (0..256).map(|i| i as f64).collect();
        assert_eq!(
            rebuilt.apply(&x).unwrap(),
            make_permuted_hadamard(100, 256, 77).unwrap().apply(&x).unwrap()
        );
    }

    #[test]
    fn descriptor_bad_magic() {
        let mut buf = b"CSAOPX".to_vec();
        buf.extend([0u8; 17]);
        let err = OperatorDescriptor::read_from(&mut buf.as_slice(), 10).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 10, .. }));
    }

    #[test]
    fn identity_variant() {
        let a = make_identity(5).unwrap();
        let x = [1.0, -2.0, 3.0, 0.5, 0.0];
        assert_eq!(a.apply(&x).unwrap(), x.to_vec());
        assert_eq!(a.apply_normal(&x).unwrap(), x.to_vec());
        let d = a.descriptor();
        assert_eq!(d.kind, SensingKind::Identity);
        assert!(OperatorDescriptor { rows: 4, ..d }.build().is_err());
        assert_eq!("identity".parse::<SensingKind>().unwrap(), SensingKind::Identity);
    }
}
