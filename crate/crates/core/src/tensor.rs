//! Dense rank-1 / rank-2 tensors of `f64` and the axis reductions used by the
//! shared-moment optimizer and the SNR diagnostic.
//!
//! Rank-2 tensors are stored row-major with shape `(fan_out, fan_in)`, the
//! orientation of a weight matrix that maps `fan_in` inputs to `fan_out`
//! outputs. [`Axes`] names the dimensions a reduction removes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// tests and small literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data).expect("valid literal")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Number of rows; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.is_matrix() {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::Shape(format!("rank must be 1 or 2, got {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

/// Dimensions removed by a reduction.
///
/// `FanOut` removes axis 0, `FanIn` removes axis 1, `Both` removes every axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axes {
    None,
    FanOut,
    FanIn,
    Both,
}

impl Axes {
    pub const REDUCING: [Axes; 3] = [Axes::FanOut, Axes::FanIn, Axes::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Axes::None => "none",
            Axes::FanOut => "fan_out",
            Axes::FanIn => "fan_in",
            Axes::Both => "both",
        }
    }

    pub fn valid_for_rank(self, rank: usize) -> bool {
        match self {
            Axes::None | Axes::Both => true,
            Axes::FanOut | Axes::FanIn => rank == 2,
        }
    }

    /// Shape left after removing these axes from `shape`. `Both` leaves a
    /// one-element vector.
    pub fn reduced_shape(self, shape: &[usize]) -> Result<Vec<usize>> {
        if !self.valid_for_rank(shape.len()) {
            return Err(Error::Shape(format!(
                "axes {self} invalid for rank-{} tensor",
                shape.len()
            )));
        }
        Ok(match self {
            Axes::None => shape.to_vec(),
            Axes::FanOut => vec![shape[1]],
            Axes::FanIn => vec![shape[0]],
            Axes::Both => vec![1],
        })
    }

    /// Number of entries stored after reducing `shape` along these axes.
    pub fn reduced_len(self, shape: &[usize]) -> Result<usize> {
        Ok(self.reduced_shape(shape)?.iter().product())
    }
}

impl fmt::Display for Axes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Axes::None),
            "fan_out" => Ok(Axes::FanOut),
            "fan_in" => Ok(Axes::FanIn),
            "both" => Ok(Axes::Both),
            other => Err(Error::Input(format!("unknown axes `{other}`"))),
        }
    }
}

/// Divisor used by [`var_along_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceEstimator {
    /// Divide by the number of reduced entries.
    #[default]
    Population,
    /// Divide by one less than the number of reduced entries.
    Sample,
}

/// Mean with a residual correction pass. For constant input the result is
/// exactly the constant, which keeps `mean(broadcast(m)) == m` bit-exact.
pub(crate) fn mean_of(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let residual: f64 = xs.iter().map(|&x| x - m).sum();
    m + residual / n
}

fn var_of(xs: &[f64], est: VarianceEstimator) -> f64 {
    let n = xs.len();
    if n <= 1 {
        return 0.0;
    }
    let m = mean_of(xs);
    let ss: f64 = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    match est {
        VarianceEstimator::Population => ss / n as f64,
        VarianceEstimator::Sample => ss / (n - 1) as f64,
    }
}

/// Applies `f` to each reduction group of `t` along `k`.
fn reduce_groups(t: &Tensor, k: Axes, f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
    let out_shape = k.reduced_shape(t.shape())?;
    let data = match k {
        Axes::None => t.data.iter().map(|&x| f(&[x])).collect(),
        Axes::Both => vec![f(&t.data)],
        Axes::FanIn => (0..t.rows()).map(|i| f(t.row(i))).collect(),
        Axes::FanOut => {
            let (r, c) = (t.rows(), t.cols());
            let mut col = vec![0.0; r];
            (0..c)
                .map(|j| {
                    for (i, slot) in col.iter_mut().enumerate() {
                        *slot = t.data[i * c + j];
                    }
                    f(&col)
                })
                .collect()
        }
    };
    Tensor::new(&out_shape, data)
}

/// Arithmetic mean over the dimensions in `k`. `Axes::None` returns `t`.
pub fn mean_along(t: &Tensor, k: Axes) -> Result<Tensor> {
    if k == Axes::None {
        return Ok(t.clone());
    }
    reduce_groups(t, k, mean_of)
}

/// Population variance over the dimensions in `k`.
pub fn var_along(t: &Tensor, k: Axes) -> Result<Tensor> {
    var_along_with(t, k, VarianceEstimator::Population)
}

/// Variance over `k` with the chosen divisor. Groups of a single entry have
/// variance exactly 0.
pub fn var_along_with(t: &Tensor, k: Axes, est: VarianceEstimator) -> Result<Tensor> {
    if k == Axes::None {
        return Err(Error::Contract(
            "variance needs at least one reduced axis".into(),
        ));
    }
    reduce_groups(t, k, |xs| var_of(xs, est))
}

/// Expands a reduced tensor back to `full_shape`, repeating values along the
/// reinserted dimensions.
pub fn broadcast_along(reduced: &Tensor, k: Axes, full_shape: &[usize]) -> Result<Tensor> {
    check_shape(full_shape)?;
    let expect = k.reduced_shape(full_shape)?;
    if reduced.shape() != expect.as_slice() {
        return Err(Error::Shape(format!(
            "cannot broadcast {:?} along {k} to {full_shape:?}",
            reduced.shape()
        )));
    }
    let data = match k {
        Axes::None => return Ok(reduced.clone()),
        Axes::Both => vec![reduced.data[0]; full_shape.iter().product()],
        Axes::FanIn => {
            let c = full_shape[1];
            reduced
                .data
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, c))
                .collect()
        }
        Axes::FanOut => {
            let r = full_shape[0];
            let mut d = Vec::with_capacity(r * reduced.len());
            for _ in 0..r {
                d.extend_from_slice(&reduced.data);
            }
            d
        }
    };
    Tensor::new(full_shape, data)
}

/// General matrix product `op(a) · op(b)` where `op` optionally transposes.
/// Vectors are treated as single-row matrices.
pub fn matmul(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape(),
            if trans_a { "^T" } else { "" },
            b.shape(),
            if trans_b { "^T" } else { "" }
        )));
    }
    let mut out = vec![0.0; m * n];
    let (rsa, csa) = if trans_a {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    // SAFETY: strides and extents describe the live buffers of `a`, `b` and
    // `out`, which do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m23() -> Tensor {
        Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_along(&m23(), Axes::FanIn).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(
            mean_along(&m23(), Axes::FanOut).unwrap().data(),
            &[2.5, 3.5, 4.5]
        );
        let both = mean_along(&m23(), Axes::Both).unwrap();
        assert_eq!(both.shape(), &[1]);
        assert_eq!(both.data(), &[3.5]);
        assert_eq!(mean_along(&m23(), Axes::None).unwrap(), m23());
    }

    #[test]
    fn var_examples() {
        // Two-pass by hand: row [1,2,3] has mean 2, squared deviations 1,0,1.
        let v = var_along(&m23(), Axes::FanIn).unwrap();
        for x in v.data() {
            assert!((x - 2.0 / 3.0).abs() < 1e-15);
        }
        let c = Tensor::from_rows(&[&[3.0, 3.0], &[3.0, 3.0]]);
        assert_eq!(var_along(&c, Axes::FanIn).unwrap().data(), &[0.0, 0.0]);
        // Deviations from 3.5: 2.5,1.5,.5,.5,1.5,2.5 → squares sum to 17.5.
        let b = var_along(&m23(), Axes::Both).unwrap();
        assert!((b.item() - 35.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn sample_variance_and_singletons() {
        let v = var_along_with(&m23(), Axes::FanIn, VarianceEstimator::Sample).unwrap();
        assert!((v.data()[0] - 1.0).abs() < 1e-15);
        let col = Tensor::from_rows(&[&[1.0], &[9.0]]);
        assert_eq!(var_along(&col, Axes::FanIn).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(
            var_along_with(&col, Axes::FanIn, VarianceEstimator::Sample)
                .unwrap()
                .data(),
            &[0.0, 0.0]
        );
        assert!(var_along(&m23(), Axes::None).is_err());
    }

    #[test]
    fn vector_axes() {
        let v = Tensor::vector(vec![1.0, 2.0, 6.0]);
        assert_eq!(mean_along(&v, Axes::Both).unwrap().data(), &[3.0]);
        assert!(matches!(mean_along(&v, Axes::FanIn), Err(Error::Shape(_))));
        assert!(matches!(mean_along(&v, Axes::FanOut), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_examples() {
        let r = Tensor::vector(vec![2.0, 5.0]);
        let b = broadcast_along(&r, Axes::FanIn, &[2, 3]).unwrap();
        assert_eq!(b.data(), &[2.0, 2.0, 2.0, 5.0, 5.0, 5.0]);
        let s = broadcast_along(&Tensor::scalar(3.5), Axes::Both, &[2, 3]).unwrap();
        assert!(s.data().iter().all(|&x| x == 3.5));
        let fo =
            broadcast_along(&Tensor::vector(vec![1.0, 2.0, 3.0]), Axes::FanOut, &[2, 3]).unwrap();
        assert_eq!(fo.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(broadcast_along(&m23(), Axes::None, &[2, 3]).unwrap(), m23());
        assert!(broadcast_along(&r, Axes::FanOut, &[2, 3]).is_err());
        assert!(broadcast_along(&m23(), Axes::None, &[3, 2]).is_err());
    }

    #[test]
    fn constructor_errors() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[2, 2, 2], vec![1.0; 8]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn axes_tokens_round_trip() {
        for k in [Axes::None, Axes::FanOut, Axes::FanIn, Axes::Both] {
            assert_eq!(k.as_str().parse::<Axes>().unwrap(), k);
        }
        assert!("sideways".parse::<Axes>().is_err());
    }

    #[test]
    fn matmul_transposes() {
        let a = m23();
        let b = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let ab = matmul(&a, false, &b, false).unwrap();
        assert_eq!(ab.data(), &[4.0, 5.0, 10.0, 11.0]);
        let at = a.transpose();
        assert_eq!(matmul(&at, true, &b, false).unwrap(), ab);
        assert_eq!(matmul(&a, false, &b.transpose(), true).unwrap(), ab);
        assert_eq!(matmul(&at, true, &b.transpose(), true).unwrap(), ab);
        assert!(matmul(&a, false, &a, false).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-1e3f64..1e3, r * c)
                .prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
        })
    }

    fn any_axes() -> impl Strategy<Value = Axes> {
        prop_oneof![
            Just(Axes::None),
            Just(Axes::FanOut),
            Just(Axes::FanIn),
            Just(Axes::Both)
        ]
    }

    proptest! {
        #[test]
        fn broadcast_round_trip_is_exact(t in matrix_strategy(), k in any_axes()) {
            let m = mean_along(&t, k).unwrap();
            let b = broadcast_along(&m, k, t.shape()).unwrap();
            let back = mean_along(&b, k).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn both_is_mean_of_row_means(t in matrix_strategy()) {
            let both = mean_along(&t, Axes::Both).unwrap().item();
            let rows = mean_along(&t, Axes::FanIn).unwrap();
            let via_rows = rows.sum() / rows.len() as f64;
            let scale = both.abs().max(t.data().iter().fold(0.0f64, |a, x| a.max(x.abs())));
            prop_assert!((both - via_rows).abs() <= 1e-12 * scale.max(1e-300));
        }

        #[test]
        fn variance_nonnegative(t in matrix_strategy(), k in prop_oneof![Just(Axes::FanOut), Just(Axes::FanIn), Just(Axes::Both)]) {
            let v = var_along(&t, k).unwrap();
            prop_assert!(v.data().iter().all(|&x| x >= 0.0));
        }
    }
}
