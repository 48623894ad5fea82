use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagestack::{load_array, save_array, ColorSpace, FloatArray, Image, Shape, ValueRange};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// Affine subspace prior `μ + span(D)` with orthonormal atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryPrior {
    shape: Shape,
    range: ValueRange,
    space: ColorSpace,
    mean: DVector<f64>,
    /// `pixels x atoms`, orthonormal columns ordered by explained variance.
    basis: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryHeader {
    atoms: usize,
    channels: usize,
    height: usize,
    width: usize,
    range: ValueRange,
    space: ColorSpace,
}

impl DictionaryPrior {
    pub fn atoms(&self) -> usize {
        self.basis.ncols()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn mean_image(&self) -> Image {
        Image::new(self.shape, self.mean.as_slice().to_vec(), self.range, self.space).expect("mean has the prior shape")
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Keeps only the leading `atoms` directions.
    pub fn truncated(&self, atoms: usize) -> Result<Self> {
        if atoms > self.atoms() {
            return Err(Error::InsufficientRank { requested: atoms, available: self.atoms() });
        }
        Ok(Self { basis: self.basis.columns(0, atoms).into_owned(), ..self.clone() })
    }

    fn to_image(&self, v: DVector<f64>) -> Result<Image> {
        Image::new(self.shape, v.data.into(), self.range, self.space)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = DictionaryHeader {
            atoms: self.atoms(),
            channels: self.shape.channels,
            height: self.shape.height,
            width: self.shape.width,
            range: self.range,
            space: self.space,
        };
        let text = toml::to_string(&header).map_err(|e| Error::Manifest(e.to_string()))?;
        let path = dir.join("dictionary.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        save_array(dir.join("mean.pfaf"), &FloatArray::f64(vec![self.mean.len()], self.mean.as_slice().to_vec())?)?;
        // column-major payload, declared as (atoms, pixels)
        save_array(
            dir.join("basis.pfaf"),
            &FloatArray::f64(vec![self.basis.ncols(), self.basis.nrows()], self.basis.as_slice().to_vec())?,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("dictionary.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: DictionaryHeader =
            toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let shape = Shape::new(h.channels, h.height, h.width);
        let mean = load_array(dir.join("mean.pfaf"))?;
        let basis = load_array(dir.join("basis.pfaf"))?;
        if mean.shape != [shape.len()] || basis.shape != [h.atoms, shape.len()] {
            return Err(Error::ArrayHeader(format!(
                "dictionary arrays do not match header ({} atoms, {shape})",
                h.atoms
            )));
        }
        Ok(Self {
            shape,
            range: h.range,
            space: h.space,
            mean: DVector::from_vec(mean.data.to_f64()),
            basis: DMatrix::from_vec(shape.len(), h.atoms, basis.data.to_f64()),
        })
    }
}

/// Principal-component dictionary: `μ` is the pixel-wise mean and the atoms
/// are the leading principal directions of the centered images.
///
/// `atoms = 0` yields a mean-only prior. Requesting more atoms than the
/// centered data's rank fails with [`Error::InsufficientRank`]; in
/// particular any positive count fails on an all-identical dataset.
pub fn fit_dictionary(images: &[Image], atoms: usize) -> Result<DictionaryPrior> {
    let first = images.first().ok_or_else(|| Error::InsufficientData("no training images".into()))?;
    if images.len() < atoms {
        return Err(Error::InsufficientData(format!(
            "{atoms} atoms need at least {atoms} training images, got {}",
            images.len()
        )));
    }
    let shape = first.shape();
    let pixels = shape.len();
    if atoms > pixels {
        return Err(Error::InsufficientRank { requested: atoms, available: pixels });
    }
    let n = images.len();
    let mut data = DMatrix::<f64>::zeros(pixels, n);
    for (j, img) in images.iter().enumerate() {
        img.require_shape(shape)?;
        data.column_mut(j).copy_from_slice(img.data());
    }
    let mean = data.column_mean();
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }

    // Eigen-decompose the small n x n Gram matrix instead of the covariance.
    let gram = data.transpose() * &data;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let available = order.iter().take_while(|&&i| top > 0.0 && eig.eigenvalues[i] > RANK_TOLERANCE * top).count();
    if atoms > available {
        return Err(Error::InsufficientRank { requested: atoms, available });
    }

    let mut basis = DMatrix::<f64>::zeros(pixels, atoms);
    for (k, &i) in order.iter().take(atoms).enumerate() {
        let v = &data * eig.eigenvectors.column(i);
        let norm = v.norm();
        basis.column_mut(k).copy_from(&(v / norm));
    }
    // Re-orthonormalize; QR preserves the nested leading spans.
    if atoms > 0 {
        let q = basis.clone().qr().q();
        basis = q;
    }
    Ok(DictionaryPrior { shape, range: first.range(), space: first.space(), mean, basis })
}

/// Euclidean projection of `y` onto `μ + span(D)`, optionally keeping only
/// the `topk` largest-magnitude coefficients.
pub fn project_dictionary(prior: &DictionaryPrior, y: &Image, topk: Option<usize>) -> Result<Image> {
    y.require_shape(prior.shape)?;
    let centered = DVector::from_column_slice(y.data()) - &prior.mean;
    let mut v = prior.basis.tr_mul(&centered);
    if let Some(k) = topk {
        if k > prior.atoms() {
            return Err(Error::InvalidArgument(format!("topk {k} exceeds {} atoms", prior.atoms())));
        }
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
        for &i in &idx[k..] {
            v[i] = 0.0;
        }
    }
    prior.to_image(&prior.basis * v + &prior.mean)
}

/// Least-squares fit of `μ + D v` to the entries of `y` flagged in
/// `observed`, with a small ridge `λ‖v‖²` so the system stays well posed
/// when few entries are observed. Returns the full reconstruction.
pub fn project_dictionary_observed(prior: &DictionaryPrior, y: &Image, observed: &[bool], ridge: f64) -> Result<Image> {
    y.require_shape(prior.shape)?;
    if observed.len() != y.data().len() {
        return Err(Error::shape(y.shape(), format!("{} observation flags", observed.len())));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be nonnegative, got {ridge}")));
    }
    let k = prior.atoms();
    let rows: Vec<usize> = (0..observed.len()).filter(|&i| observed[i]).collect();
    let sub = prior.basis.select_rows(&rows);
    let resid = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y.data()[i] - prior.mean[i]));
    let normal = sub.tr_mul(&sub) + DMatrix::<f64>::identity(k, k) * ridge;
    let rhs = sub.tr_mul(&resid);
    let v = if k == 0 {
        rhs
    } else {
        normal.cholesky().ok_or(Error::InsufficientRank { requested: k, available: 0 })?.solve(&rhs)
    };
    prior.to_image(&prior.basis * v + &prior.mean)
}
