//! 2D convolution algebra and the tensor types the solvers operate on.
//!
//! `conv2_valid` and `conv2_full` are true convolutions (the kernel is
//! flipped), matching MATLAB's `conv2`. The operator pairs built on top of
//! them are:
//!
//! * `T_k s = conv2_valid(s, d)` with adjoint `conv2_full(x, rot180(d))`
//! * `F_s d = conv2_valid(s, d)` with adjoint `conv2_valid(rot180(s), x)`
//!
//! Multi-channel data is handled slice-wise: a feature map is a single 2D
//! plane shared by all channels of its atom, so channel `c` of the synthesis
//! is `sum_k conv2_valid(S_k, D_k[c])`.

use std::cell::RefCell;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub type Map = Array2<f64>;

/// An `H x W x C` image or multi-channel activation.
///
/// Stored channel-first so that every channel plane is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn from_gray(plane: Map) -> Self {
        let (h, w) = plane.dim();
        ImageTensor {
            data: plane.into_shape_with_order((1, h, w)).unwrap(),
        }
    }

    pub fn from_channels(planes: Vec<Map>) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::shape("image needs at least one channel"))?;
        let (h, w) = first.dim();
        if planes.iter().any(|p| p.dim() != (h, w)) {
            return Err(Error::shape("channel planes differ in size"));
        }
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        let data = ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        Ok(ImageTensor {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// Wraps a `(channels, height, width)` array.
    pub fn from_array(data: Array3<f64>) -> Self {
        ImageTensor {
            data: data.as_standard_layout().into_owned(),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[[channel, row, col]]
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), c)
    }

    pub fn channel_mut(&mut self, c: usize) -> ndarray::ArrayViewMut2<'_, f64> {
        self.data.index_axis_mut(Axis(0), c)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("standard layout")
    }

    pub fn norm_sq(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    /// Column-major vectorization: index `ch*H*W + col*H + row`.
    pub fn to_vector(&self) -> Vec<f64> {
        let (h, w, c) = self.shape();
        let mut out = Vec::with_capacity(h * w * c);
        for ch in 0..c {
            let plane = self.channel(ch);
            for col in 0..w {
                out.extend(plane.column(col).iter());
            }
        }
        out
    }

    /// Inverse of [`ImageTensor::to_vector`].
    pub fn from_vector(v: &[f64], height: usize, width: usize, channels: usize) -> Result<Self> {
        if v.len() != height * width * channels {
            return Err(Error::shape(format!(
                "vector of length {} cannot hold a {}x{}x{} image",
                v.len(),
                height,
                width,
                channels
            )));
        }
        let mut img = ImageTensor::zeros(height, width, channels);
        for ch in 0..channels {
            let mut plane = img.channel_mut(ch);
            for col in 0..width {
                for row in 0..height {
                    plane[[row, col]] = v[ch * height * width + col * height + row];
                }
            }
        }
        Ok(img)
    }

    pub(crate) fn axpy(&mut self, alpha: f64, other: &ImageTensor) {
        for (a, b) in self.as_slice_mut().iter_mut().zip(other.as_slice()) {
            *a += alpha * b;
        }
    }

    pub(crate) fn sub(&self, other: &ImageTensor) -> ImageTensor {
        ImageTensor {
            data: &self.data - &other.data,
        }
    }
}

/// `K` convolutional filters of identical `h x w x C` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDictionary {
    atoms: Vec<Array3<f64>>,
    layer: u8,
}

impl ConvDictionary {
    /// Atoms are `(channels, h, w)` arrays.
    pub fn new(atoms: Vec<Array3<f64>>, layer: u8) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::shape("dictionary needs at least one atom"))?;
        let dim = first.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(Error::shape("atoms must have non-zero extent"));
        }
        if atoms.iter().any(|a| a.dim() != dim) {
            return Err(Error::shape("dictionary atoms differ in shape"));
        }
        if atoms.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dictionary contains non-finite values".into()));
        }
        let atoms = atoms
            .into_iter()
            .map(|a| a.as_standard_layout().into_owned())
            .collect();
        Ok(ConvDictionary { atoms, layer })
    }

    /// Single-channel dictionary from 2D kernels.
    pub fn from_kernels(kernels: Vec<Map>, layer: u8) -> Result<Self> {
        let atoms = kernels
            .into_iter()
            .map(|k| {
                let (h, w) = k.dim();
                k.into_shape_with_order((1, h, w)).unwrap()
            })
            .collect();
        Self::new(atoms, layer)
    }

    /// I.i.d. standard normal atoms, each scaled to unit Frobenius norm.
    pub fn random<R: Rng>(
        count: usize,
        kernel: (usize, usize),
        channels: usize,
        layer: u8,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::param("dictionary size must be at least 1"));
        }
        let atoms = (0..count)
            .map(|_| {
                let mut a = Array3::from_shape_simple_fn((channels, kernel.0, kernel.1), || {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                a.mapv_inplace(|v| v / n);
                a
            })
            .collect();
        Self::new(atoms, layer)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn layer(&self) -> u8 {
        self.layer
    }

    /// `(h, w)` of every atom.
    pub fn kernel_shape(&self) -> (usize, usize) {
        let d = self.atoms[0].dim();
        (d.1, d.2)
    }

    pub fn channels(&self) -> usize {
        self.atoms[0].dim().0
    }

    pub fn atom(&self, k: usize) -> ArrayView3<'_, f64> {
        self.atoms[k].view()
    }

    pub fn atoms(&self) -> &[Array3<f64>] {
        &self.atoms
    }

    /// Rescales each atom to unit Frobenius norm (zero atoms are left alone).
    pub fn normalize_atoms(&mut self) {
        for a in &mut self.atoms {
            let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                a.mapv_inplace(|v| v / n);
            }
        }
    }

    /// Feature map size that makes valid convolution return `height x width`.
    pub fn feature_shape(&self, height: usize, width: usize) -> (usize, usize) {
        let (h, w) = self.kernel_shape();
        (height + h - 1, width + w - 1)
    }
}

/// One feature map per dictionary atom for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    maps: Vec<Map>,
}

impl FeatureSet {
    pub fn zeros(atoms: usize, height: usize, width: usize) -> Self {
        FeatureSet {
            maps: (0..atoms).map(|_| Map::zeros((height, width))).collect(),
        }
    }

    pub fn from_maps(maps: Vec<Map>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("feature set needs at least one map"))?;
        let dim = first.dim();
        if maps.iter().any(|m| m.dim() != dim) {
            return Err(Error::shape("feature maps differ in size"));
        }
        Ok(FeatureSet {
            maps: maps
                .into_iter()
                .map(|m| m.as_standard_layout().into_owned())
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Spatial `(height, width)` of each map.
    pub fn map_shape(&self) -> (usize, usize) {
        self.maps[0].dim()
    }

    pub fn map(&self, k: usize) -> &Map {
        &self.maps[k]
    }

    pub fn map_mut(&mut self, k: usize) -> &mut Map {
        &mut self.maps[k]
    }

    pub fn maps(&self) -> &[Map] {
        &self.maps
    }

    pub fn element_count(&self) -> usize {
        self.maps.iter().map(|m| m.len()).sum()
    }

    /// Atom-major, row-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.element_count());
        for m in &self.maps {
            out.extend(m.iter());
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> FeatureSet {
        FeatureSet {
            maps: self.maps.iter().map(|m| m * factor).collect(),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.maps.iter().flatten().filter(|v| **v != 0.0).count()
    }

    pub fn norm_sq(&self) -> f64 {
        self.maps.iter().flatten().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().flatten().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureSet) -> bool {
        self.len() == other.len() && self.map_shape() == other.map_shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Valid,
    Full,
}

fn contiguous(a: ArrayView2<'_, f64>) -> (Vec<f64>, usize, usize) {
    let (h, w) = a.dim();
    match a.as_slice() {
        Some(s) => (s.to_vec(), h, w),
        None => (a.iter().copied().collect(), h, w),
    }
}

/// Valid 2D convolution; output is `(Hf-h+1) x (Wf-w+1)`.
pub fn conv2_valid(feature: ArrayView2<'_, f64>, kernel: ArrayView2<'_, f64>) -> Result<Map> {
    let (fh, fw) = feature.dim();
    let (kh, kw) = kernel.dim();
    if kh == 0 || kw == 0 || kh > fh || kw > fw {
        return Err(Error::shape(format!(
            "valid convolution of {fh}x{fw} by {kh}x{kw} kernel"
        )));
    }
    let (f, _, _) = contiguous(feature);
    let (k, _, _) = contiguous(kernel);
    let (oh, ow) = (fh - kh + 1, fw - kw + 1);
    let mut out = vec![0.0; oh * ow];
    for p in 0..kh {
        for q in 0..kw {
            let c = k[(kh - 1 - p) * kw + (kw - 1 - q)];
            if c == 0.0 {
                continue;
            }
            for i in 0..oh {
                let src = &f[(i + p) * fw + q..(i + p) * fw + q + ow];
                let dst = &mut out[i * ow..(i + 1) * ow];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += c * x;
                }
            }
        }
    }
    Ok(Map::from_shape_vec((oh, ow), out).unwrap())
}

/// Zero-padded full 2D convolution; output is `(H+h-1) x (W+w-1)`.
pub fn conv2_full(image: ArrayView2<'_, f64>, kernel: ArrayView2<'_, f64>) -> Map {
    let (ih, iw) = image.dim();
    let (kh, kw) = kernel.dim();
    let (x, _, _) = contiguous(image);
    let (k, _, _) = contiguous(kernel);
    let (oh, ow) = (ih + kh - 1, iw + kw - 1);
    let mut out = vec![0.0; oh * ow];
    for p in 0..kh {
        for q in 0..kw {
            let c = k[p * kw + q];
            if c == 0.0 {
                continue;
            }
            for i in 0..ih {
                let src = &x[i * iw..(i + 1) * iw];
                let dst = &mut out[(i + p) * ow + q..(i + p) * ow + q + iw];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += c * v;
                }
            }
        }
    }
    Map::from_shape_vec((oh, ow), out).unwrap()
}

pub fn rot180(kernel: ArrayView2<'_, f64>) -> Map {
    let mut out = kernel.to_owned();
    out.invert_axis(Axis(0));
    out.invert_axis(Axis(1));
    out.as_standard_layout().into_owned()
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D DFT of a row-major `rows x cols` buffer.
fn fft2(buf: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
        } else {
            (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
        };
        row_fft.process(buf);
        let mut column = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                column[r] = buf[r * cols + c];
            }
            col_fft.process(&mut column);
            for r in 0..rows {
                buf[r * cols + c] = column[r];
            }
        }
    });
}

fn embed(a: ArrayView2<'_, f64>, rows: usize, cols: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); rows * cols];
    for ((r, c), &v) in a.indexed_iter() {
        buf[r * cols + c] = Complex64::new(v, 0.0);
    }
    buf
}

/// FFT-based convolution; numerically equivalent to the direct routines.
///
/// In `Valid` mode `a` plays the role of the feature map and `b` the kernel.
pub fn fft_conv2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, mode: ConvMode) -> Result<Map> {
    let (ah, aw) = a.dim();
    let (bh, bw) = b.dim();
    if mode == ConvMode::Valid && (bh > ah || bw > aw) {
        return Err(Error::shape(format!(
            "valid convolution of {ah}x{aw} by {bh}x{bw} kernel"
        )));
    }
    let (rows, cols) = (ah + bh - 1, aw + bw - 1);
    let mut fa = embed(a, rows, cols);
    let mut fb = embed(b, rows, cols);
    fft2(&mut fa, rows, cols, false);
    fft2(&mut fb, rows, cols, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft2(&mut fa, rows, cols, true);
    let scale = 1.0 / (rows * cols) as f64;
    let full = Map::from_shape_fn((rows, cols), |(r, c)| fa[r * cols + c].re * scale);
    Ok(match mode {
        ConvMode::Full => full,
        ConvMode::Valid => full
            .slice(ndarray::s![bh - 1..ah, bw - 1..aw])
            .to_owned(),
    })
}

/// Chooses between direct and FFT convolution.
///
/// Direct convolution is used when the smaller operand has area at most
/// `max_direct_kernel_area` and the image-domain array (the output of a valid
/// convolution, the larger input of a full one) at most `max_direct_image_area`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvPolicy {
    pub max_direct_kernel_area: usize,
    pub max_direct_image_area: usize,
}

impl Default for ConvPolicy {
    fn default() -> Self {
        ConvPolicy {
            max_direct_kernel_area: 49,
            max_direct_image_area: 1024,
        }
    }
}

impl ConvPolicy {
    /// Always use the direct path.
    pub fn direct() -> Self {
        ConvPolicy {
            max_direct_kernel_area: usize::MAX,
            max_direct_image_area: usize::MAX,
        }
    }

    /// Always use the FFT path.
    pub fn fft() -> Self {
        ConvPolicy {
            max_direct_kernel_area: 0,
            max_direct_image_area: 0,
        }
    }

    pub fn uses_fft(&self, a: (usize, usize), b: (usize, usize), mode: ConvMode) -> bool {
        let (aa, ba) = (a.0 * a.1, b.0 * b.1);
        let (small, large) = if aa <= ba { (aa, ba) } else { (ba, aa) };
        let image = match mode {
            ConvMode::Valid => (a.0.abs_diff(b.0) + 1) * (a.1.abs_diff(b.1) + 1),
            ConvMode::Full => large,
        };
        small > self.max_direct_kernel_area || image > self.max_direct_image_area
    }

    pub fn conv2(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, mode: ConvMode) -> Result<Map> {
        if self.uses_fft(a.dim(), b.dim(), mode) {
            fft_conv2(a, b, mode)
        } else {
            match mode {
                ConvMode::Valid => conv2_valid(a, b),
                ConvMode::Full => Ok(conv2_full(a, b)),
            }
        }
    }

    pub fn apply_t(&self, atom: ArrayView2<'_, f64>, feature: ArrayView2<'_, f64>) -> Result<Map> {
        self.conv2(feature, atom, ConvMode::Valid)
    }

    pub fn apply_t_adj(&self, atom: ArrayView2<'_, f64>, residual: ArrayView2<'_, f64>) -> Map {
        self.conv2(residual, rot180(atom).view(), ConvMode::Full)
            .expect("full convolution has no shape precondition")
    }

    pub fn apply_f(&self, feature: ArrayView2<'_, f64>, atom: ArrayView2<'_, f64>) -> Result<Map> {
        self.conv2(feature, atom, ConvMode::Valid)
    }

    pub fn apply_f_adj(&self, feature: ArrayView2<'_, f64>, residual: ArrayView2<'_, f64>) -> Result<Map> {
        self.conv2(rot180(feature).view(), residual, ConvMode::Valid)
    }

    /// `T_k s` for a multi-channel atom: one output channel per atom channel.
    pub fn synthesize_atom(&self, atom: ArrayView3<'_, f64>, feature: &Map) -> Result<ImageTensor> {
        let planes = atom
            .outer_iter()
            .map(|kernel| self.apply_t(kernel, feature.view()))
            .collect::<Result<Vec<_>>>()?;
        ImageTensor::from_channels(planes)
    }

    /// `T_k^T x` for a multi-channel atom, summed over channels.
    pub fn atom_adjoint(&self, atom: ArrayView3<'_, f64>, image: &ImageTensor) -> Result<Map> {
        if atom.dim().0 != image.channels() {
            return Err(Error::shape(format!(
                "atom has {} channels, image has {}",
                atom.dim().0,
                image.channels()
            )));
        }
        let mut acc: Option<Map> = None;
        for (c, kernel) in atom.outer_iter().enumerate() {
            let part = self.apply_t_adj(kernel, image.channel(c));
            match acc.as_mut() {
                Some(a) => *a += &part,
                None => acc = Some(part),
            }
        }
        Ok(acc.unwrap())
    }

    /// `F_s^T x` per channel: the gradient of `<x, T s>` with respect to the atom.
    pub fn atom_gradient(&self, feature: &Map, residual: &ImageTensor) -> Result<Array3<f64>> {
        let planes = (0..residual.channels())
            .map(|c| self.apply_f_adj(feature.view(), residual.channel(c)))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        Ok(ndarray::stack(Axis(0), &views).unwrap())
    }

    /// `sum_k D_k * S_k` over all atoms.
    pub fn synthesize(&self, dict: &ConvDictionary, features: &FeatureSet) -> Result<ImageTensor> {
        if dict.len() != features.len() {
            return Err(Error::shape(format!(
                "{} atoms but {} feature maps",
                dict.len(),
                features.len()
            )));
        }
        let mut out: Option<ImageTensor> = None;
        for (atom, map) in dict.atoms().iter().zip(features.maps()) {
            let part = self.synthesize_atom(atom.view(), map)?;
            match out.as_mut() {
                Some(o) => o.axpy(1.0, &part),
                None => out = Some(part),
            }
        }
        Ok(out.unwrap())
    }
}

/// `T_k s`: the image produced by one atom and its feature map.
pub fn apply_t(atom: ArrayView2<'_, f64>, feature: ArrayView2<'_, f64>) -> Result<Map> {
    ConvPolicy::default().apply_t(atom, feature)
}

/// `T_k^T x`, sized like the feature map.
pub fn apply_t_adj(atom: ArrayView2<'_, f64>, residual: ArrayView2<'_, f64>) -> Map {
    ConvPolicy::default().apply_t_adj(atom, residual)
}

/// `F_s d`: the same product as [`apply_t`] viewed as linear in the atom.
pub fn apply_f(feature: ArrayView2<'_, f64>, atom: ArrayView2<'_, f64>) -> Result<Map> {
    ConvPolicy::default().apply_f(feature, atom)
}

/// `F_s^T x`, sized like the atom.
pub fn apply_f_adj(feature: ArrayView2<'_, f64>, residual: ArrayView2<'_, f64>) -> Result<Map> {
    ConvPolicy::default().apply_f_adj(feature, residual)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}
