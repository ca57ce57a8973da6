//! Synthetic Gaussian data, IDX image parsing and the inpainting task.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::linalg::Mat;
use crate::rng::{self, Rng};

/// Covariance eigenvalues of the synthetic covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Spectrum {
    /// λ_k = k^(−exponent), k = 1..d.
    PowerLaw {
        exponent: f64,
    },
    /// d values evenly spaced from `hi` down to `lo`; the same profile at any d.
    Linear {
        lo: f64,
        hi: f64,
    },
    Explicit {
        eigenvalues: Vec<f64>,
    },
}

impl Default for Spectrum {
    fn default() -> Self {
        Spectrum::PowerLaw { exponent: 1.0 }
    }
}

impl Spectrum {
    pub fn eigenvalues(&self, d: usize) -> Result<Vec<f64>> {
        let ev: Vec<f64> = match self {
            Spectrum::PowerLaw { exponent } => {
                (1..=d).map(|k| (k as f64).powf(-exponent)).collect()
            }
            Spectrum::Linear { lo, hi } => (0..d)
                .map(|k| {
                    if d == 1 {
                        *hi
                    } else {
                        hi + (lo - hi) * k as f64 / (d - 1) as f64
                    }
                })
                .collect(),
            Spectrum::Explicit { eigenvalues } => {
                if eigenvalues.len() != d {
                    return Err(Error::dim(format!(
                        "explicit spectrum has {} values, d = {d}",
                        eigenvalues.len()
                    )));
                }
                eigenvalues.clone()
            }
        };
        if ev.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::param(
                "spectrum eigenvalues must be positive and finite",
            ));
        }
        Ok(ev)
    }
}

/// Ground-truth parameter θ⋆ ∈ ℝ^{p⋆}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThetaSpec {
    /// (1, …, 1)/√p⋆ scaled by `scale`.
    Ones {
        #[serde(default = "one")]
        scale: f64,
    },
    Zero {},
    Explicit {
        values: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl ThetaSpec {
    pub fn build(&self, p_star: usize) -> Result<DVector<f64>> {
        match self {
            ThetaSpec::Ones { scale } => Ok(DVector::from_element(
                p_star,
                scale / (p_star as f64).sqrt(),
            )),
            ThetaSpec::Zero {} => Ok(DVector::zeros(p_star)),
            ThetaSpec::Explicit { values } => {
                if values.len() != p_star {
                    return Err(Error::dim(format!(
                        "theta_star has length {}, truth map outputs {p_star}",
                        values.len()
                    )));
                }
                Ok(DVector::from_column_slice(values))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLaw {
    #[default]
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub d: usize,
    /// Default training-set size; sweeps may override it.
    pub n: usize,
    #[serde(default)]
    pub spectrum: Spectrum,
    pub rotation_seed: u64,
    pub truth_map: FeatureSpec,
    pub theta_star: ThetaSpec,
    pub noise_sigma2: f64,
    #[serde(default)]
    pub noise_law: NoiseLaw,
}

/// Samples as columns: X is d×n, Y is q×n.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub y: Mat,
    /// Noise-free part of Y when the data are synthetic.
    pub signal: Option<Mat>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Columns `idx` of X and Y.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(idx),
            y: self.y.select_columns(idx),
            signal: self.signal.as_ref().map(|s| s.select_columns(idx)),
        }
    }
}

/// A ready-to-sample synthetic generative model.
#[derive(Clone, Debug)]
pub struct SyntheticModel {
    pub spec: SyntheticSpec,
    pub eigenvalues: Vec<f64>,
    pub rotation: Mat,
    /// `Q·Diag(√λ)`, so X = factor·g with g standard Gaussian.
    pub factor: Mat,
    pub truth_map: FeatureMap,
    pub theta_star: DVector<f64>,
}

impl SyntheticModel {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        if spec.d == 0 {
            return Err(Error::dim("synthetic data needs d >= 1"));
        }
        if spec.noise_sigma2 < 0.0 || !spec.noise_sigma2.is_finite() {
            return Err(Error::param("noise_sigma2 must be >= 0"));
        }
        let eigenvalues = spec.spectrum.eigenvalues(spec.d)?;
        let rotation = haar_orthogonal(spec.d, spec.rotation_seed)?;
        let mut factor = rotation.clone();
        for (j, ev) in eigenvalues.iter().enumerate() {
            factor.column_mut(j).scale_mut(ev.sqrt());
        }
        let truth_map = spec.truth_map.build(spec.d)?;
        let theta_star = spec.theta_star.build(truth_map.output_dim())?;
        Ok(SyntheticModel {
            spec: spec.clone(),
            eigenvalues,
            rotation,
            factor,
            truth_map,
            theta_star,
        })
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn covariance(&self) -> Mat {
        &self.factor * self.factor.transpose()
    }

    /// Ridge-truth parameter viewed as a p⋆×1 matrix.
    pub fn theta_matrix(&self) -> Mat {
        Mat::from_column_slice(self.theta_star.len(), 1, self.theta_star.as_slice())
    }

    /// Covariates only.
    pub fn sample_x(&self, n: usize, rng: &mut Rng) -> Mat {
        let d = self.d();
        let g = Mat::from_fn(d, n, |_, _| StandardNormal.sample(rng));
        &self.factor * g
    }

    /// Xᵢ ~ N(0, QΛQᵀ), Yᵢ = θ⋆ᵀφ⋆(Xᵢ) + εᵢ.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        let x = self.sample_x(n, rng);
        let feats = self.truth_map.apply_matrix(&x)?;
        let signal = self.theta_matrix().transpose() * feats;
        let sd = self.spec.noise_sigma2.sqrt();
        let mut y = signal.clone();
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sd * e;
        }
        Ok(Dataset {
            x,
            y,
            signal: Some(signal),
        })
    }
}

pub fn sample_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Dataset> {
    SyntheticModel::new(spec)?.sample(spec.n, rng)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of Q multiplied by sign(R_jj).
pub fn haar_orthogonal(d: usize, seed: u64) -> Result<Mat> {
    if d == 0 {
        return Err(Error::dim("haar_orthogonal needs d >= 1"));
    }
    let mut r = rng::substream(seed, rng::domain::ROTATION, 0);
    let g = Mat::from_fn(d, d, |_, _| StandardNormal.sample(&mut r));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..d {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Images stored row-major, one after another, intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Images {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl Images {
    pub fn image(&self, i: usize) -> &[f64] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or_else(|| Error::Format {
        offset,
        message: format!(
            "file truncated: need 4 header bytes, have {}",
            bytes.len().saturating_sub(offset)
        ),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX3 unsigned-byte image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Images> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format {
            offset: 4,
            message: "image dimensions overflow".into(),
        })?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: 16 + body.len(),
            message: format!(
                "file truncated: expected {need} pixel bytes, found {}",
                body.len()
            ),
        });
    }
    let pixels = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Images {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn mnist_load(path: impl AsRef<Path>) -> Result<Images> {
    let bytes = std::fs::read(path.as_ref())?;
    parse_idx_images(&bytes)
}

/// Images split into visible pixels X and a removed centered square patch Y.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintingTask {
    pub x: Mat,
    pub y: Mat,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    /// First patch row and column (0-indexed).
    pub patch_start: (usize, usize),
    /// Raster index of each row of X.
    pub visible_index: Vec<usize>,
    /// Raster index of each row of Y.
    pub patch_index: Vec<usize>,
}

pub fn inpainting_task(images: &Images, patch_size: usize) -> Result<InpaintingTask> {
    if images.rows != 28 || images.cols != 28 {
        return Err(Error::dim(format!(
            "expected 28x28 images, got {}x{}",
            images.rows, images.cols
        )));
    }
    inpainting_task_any(images, patch_size)
}

/// Same split for any image size with a patch that fits.
pub fn inpainting_task_any(images: &Images, patch_size: usize) -> Result<InpaintingTask> {
    let (h, w) = (images.rows, images.cols);
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::dim(format!(
            "patch of size {patch_size} does not fit a {h}x{w} image"
        )));
    }
    let r0 = (h - patch_size) / 2;
    let c0 = (w - patch_size) / 2;
    let in_patch = |r: usize, c: usize| {
        (r0..r0 + patch_size).contains(&r) && (c0..c0 + patch_size).contains(&c)
    };
    let mut visible_index = Vec::with_capacity(h * w - patch_size * patch_size);
    let mut patch_index = Vec::with_capacity(patch_size * patch_size);
    for r in 0..h {
        for c in 0..w {
            if in_patch(r, c) {
                patch_index.push(r * w + c);
            } else {
                visible_index.push(r * w + c);
            }
        }
    }
    let n = images.count;
    let x = Mat::from_fn(visible_index.len(), n, |i, j| {
        images.image(j)[visible_index[i]]
    });
    let y = Mat::from_fn(patch_index.len(), n, |i, j| images.image(j)[patch_index[i]]);
    Ok(InpaintingTask {
        x,
        y,
        rows: h,
        cols: w,
        patch_size,
        patch_start: (r0, c0),
        visible_index,
        patch_index,
    })
}

impl InpaintingTask {
    /// Puts column `j` of X and Y back into raster order.
    pub fn reassemble(&self, j: usize) -> Vec<f64> {
        let mut img = vec![0.0; self.rows * self.cols];
        for (i, &k) in self.visible_index.iter().enumerate() {
            img[k] = self.x[(i, j)];
        }
        for (i, &k) in self.patch_index.iter().enumerate() {
            img[k] = self.y[(i, j)];
        }
        img
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            x: self.x.clone(),
            y: self.y.clone(),
            signal: None,
        }
    }
}

/// Writes X then Y, one column per sample, after a dimension header.
pub fn write_dataset_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "d,{},q,{},n,{}", ds.x.nrows(), ds.y.nrows(), ds.n())?;
    for m in [&ds.x, &ds.y] {
        for i in 0..m.nrows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(f, "{}", row.join(","))?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        offset: 0,
        message: "empty file".into(),
    })??;
    let parts: Vec<&str> = header.split(',').collect();
    let field = |k: usize| -> Result<usize> {
        parts
            .get(k)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("bad header `{header}`"),
            })
    };
    if parts.len() != 6 || parts[0] != "d" || parts[2] != "q" || parts[4] != "n" {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad header `{header}`"),
        });
    }
    let (d, q, n) = (field(1)?, field(3)?, field(5)?);
    let mut rows = Vec::with_capacity(d + q);
    let mut offset = header.len() + 1;
    for line in lines {
        let line = line?;
        let vals = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                offset,
                message: format!("bad number: {e}"),
            })?;
        if vals.len() != n {
            return Err(Error::Format {
                offset,
                message: format!("expected {n} values, got {}", vals.len()),
            });
        }
        offset += line.len() + 1;
        rows.push(vals);
    }
    if rows.len() != d + q {
        return Err(Error::Format {
            offset,
            message: format!("expected {} rows, got {}", d + q, rows.len()),
        });
    }
    let x = Mat::from_fn(d, n, |i, j| rows[i][j]);
    let y = Mat::from_fn(q, n, |i, j| rows[d + i][j]);
    Ok(Dataset { x, y, signal: None })
}

/// Builds an IDX3 image file image-by-image (test fixtures and tooling).
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + bytes.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for v in [count, rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(bytes);
    out
}
