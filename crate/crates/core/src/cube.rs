//! Cube and image data model plus mode-3 (spectral) tensor algebra.
//!
//! Every cube is stored band-sequential: band `k` occupies the contiguous
//! slice `values[k * height * width..(k + 1) * height * width]`, row-major
//! within the band. Unfolding along the spectral mode is therefore a reshape.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Hyperspectral cube indexed `(row, col, band)`, band-sequential in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
    /// True when the values are reflectances observed in `[0, 1]`; false for
    /// intermediate network tensors that may leave that range.
    pub unit_scaled: bool,
}

impl HsiCube {
    /// Builds a cube from band-sequential values.
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::dim(format!(
                "cube dims must be positive, got {height}x{width}x{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(Error::dim(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite cube value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            unit_scaled: false,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self::filled(height, width, bands, 0.0)
    }

    pub fn filled(height: usize, width: usize, bands: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && bands > 0, "cube dims must be positive");
        Self {
            height,
            width,
            bands,
            values: vec![value; height * width * bands],
            unit_scaled: false,
        }
    }

    /// Builds a cube by evaluating `f(row, col, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut cube = Self::zeros(height, width, bands);
        for k in 0..bands {
            for r in 0..height {
                for c in 0..width {
                    cube.values[(k * height + r) * width + c] = f(r, c, k);
                }
            }
        }
        cube
    }

    pub fn with_unit_scaled(mut self, unit_scaled: bool) -> Self {
        self.unit_scaled = unit_scaled;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// `(height, width, bands)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[(band * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, value: f32) {
        self.values[(band * self.height + row) * self.width + col] = value;
    }

    pub fn band(&self, k: usize) -> &[f32] {
        let n = self.pixels();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn band_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.values[k * n..(k + 1) * n]
    }

    /// Spectrum of one pixel.
    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|k| self.get(row, col, k)).collect()
    }

    pub fn same_dims(&self, other: &HsiCube) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_dims(&self, other: &HsiCube, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &HsiCube) -> Result<HsiCube> {
        self.check_same_dims(other, "cube subtraction")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.with_values(values))
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &HsiCube) -> Result<HsiCube> {
        self.check_same_dims(other, "cube addition")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.with_values(values))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> HsiCube {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    /// Clamps to `[0, 1]` for export.
    pub fn clamped_unit(&self) -> HsiCube {
        self.map(|v| v.clamp(0.0, 1.0)).with_unit_scaled(true)
    }

    pub fn is_within_unit(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Frobenius norm in f64.
    pub fn frobenius(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len() as f64
    }

    /// Same dims, new values, not unit scaled.
    fn with_values(&self, values: Vec<f32>) -> HsiCube {
        debug_assert_eq!(values.len(), self.values.len());
        HsiCube {
            height: self.height,
            width: self.width,
            bands: self.bands,
            values,
            unit_scaled: false,
        }
    }
}

/// Single-band panchromatic image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PanImage {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl PanImage {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "pan dims must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "pan {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pan value at index {i}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "pan dims must be positive");
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pan = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                pan.values[r * width + c] = f(r, c);
            }
        }
        pan
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// View as a one-band cube (the on-disk representation).
    pub fn to_cube(&self) -> HsiCube {
        HsiCube {
            height: self.height,
            width: self.width,
            bands: 1,
            values: self.values.clone(),
            unit_scaled: false,
        }
    }

    pub fn from_cube(cube: &HsiCube) -> Result<Self> {
        if cube.bands != 1 {
            return Err(Error::dim(format!(
                "pan image needs exactly one band, got {}",
                cube.bands
            )));
        }
        Ok(Self {
            height: cube.height,
            width: cube.width,
            values: cube.values.clone(),
        })
    }
}

/// Spectral coefficients `U` (bands x rank, row-major). Rows produced by the
/// networks are softmax outputs, i.e. probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffMatrix {
    bands: usize,
    rank: usize,
    entries: Vec<f32>,
}

impl CoeffMatrix {
    pub fn new(bands: usize, rank: usize, entries: Vec<f32>) -> Result<Self> {
        if bands == 0 || rank == 0 || entries.len() != bands * rank {
            return Err(Error::dim(format!(
                "coefficient matrix {bands}x{rank} with {} entries",
                entries.len()
            )));
        }
        Ok(Self { bands, rank, entries })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { bands: n, rank: n, entries }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, band: usize, k: usize) -> f32 {
        self.entries[band * self.rank + k]
    }

    /// True when every row is nonnegative and sums to one within `tol`.
    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.entries.chunks(self.rank).all(|row| {
            row.iter().all(|&u| u >= 0.0)
                && (row.iter().map(|&u| f64::from(u)).sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Base images `V` (height x width x rank), stored like a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseImages(HsiCube);

impl BaseImages {
    pub fn new(height: usize, width: usize, rank: usize, values: Vec<f32>) -> Result<Self> {
        HsiCube::new(height, width, rank, values).map(BaseImages)
    }

    pub fn from_cube(cube: HsiCube) -> Self {
        BaseImages(cube.with_unit_scaled(false))
    }

    pub fn rank(&self) -> usize {
        self.0.bands()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn as_cube(&self) -> &HsiCube {
        &self.0
    }

    pub fn values(&self) -> &[f32] {
        self.0.values()
    }
}

/// Mode-3 product `V x_3 U`: band `i` of the output is `sum_k U[i,k] * V[.., k]`.
pub fn mode3_product(v: &BaseImages, u: &CoeffMatrix) -> Result<HsiCube> {
    if v.rank() != u.rank() {
        return Err(Error::dim(format!(
            "mode-3 product rank mismatch: base images have {}, coefficients {}",
            v.rank(),
            u.rank()
        )));
    }
    let n = v.height() * v.width();
    let mut out = HsiCube::zeros(v.height(), v.width(), u.bands());
    for i in 0..u.bands() {
        let dst = out.band_mut(i);
        for k in 0..u.rank() {
            let w = u.get(i, k);
            let src = &v.values()[k * n..(k + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// Spectral unfolding: a `bands x (height * width)` matrix whose row `i` is
/// band `i` flattened row-major.
pub fn unfold_mode3(cube: &HsiCube) -> DMatrix<f32> {
    let n = cube.pixels();
    DMatrix::from_fn(cube.bands(), n, |i, j| cube.values[i * n + j])
}

/// Inverse of [`unfold_mode3`].
pub fn refold_mode3(matrix: &DMatrix<f32>, height: usize, width: usize) -> Result<HsiCube> {
    if matrix.ncols() != height * width {
        return Err(Error::dim(format!(
            "cannot refold {} columns into {height}x{width}",
            matrix.ncols()
        )));
    }
    let bands = matrix.nrows();
    let n = height * width;
    let mut values = vec![0.0; bands * n];
    for i in 0..bands {
        for j in 0..n {
            values[i * n + j] = matrix[(i, j)];
        }
    }
    HsiCube::new(height, width, bands, values)
}

/// Singular values of the spectral unfolding in descending order, computed in f64.
pub fn spectral_singular_values(cube: &HsiCube) -> Vec<f64> {
    let n = cube.pixels();
    // pixels x bands keeps the SVD on the tall side
    let m = DMatrix::from_fn(n, cube.bands(), |j, i| f64::from(cube.values[i * n + j]));
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values above `rel_tol * largest`.
pub fn numerical_rank(cube: &HsiCube, rel_tol: f64) -> usize {
    let sv = spectral_singular_values(cube);
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}
