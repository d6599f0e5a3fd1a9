//! Dense linear model mapping sparse feature vectors to class utilities.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SparseExample;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ARLM";
const VERSION: u32 = 1;

/// A linear classifier with one weight row and one bias per class:
/// `ψ_k(x) = w_k · x + b_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    num_classes: usize,
    num_features: usize,
    /// Row-major `num_classes × num_features`.
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, num_features: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument(
                "model needs at least one class".into(),
            ));
        }
        Ok(Self {
            num_classes,
            num_features,
            weights: vec![0.0; num_classes * num_features],
            biases: vec![0.0; num_classes],
        })
    }

    /// Gaussian initialization with separate standard deviations for weights
    /// and biases. Weights are drawn first (row-major), then biases, so a
    /// given seed always produces the same model.
    pub fn init_random<R: Rng + ?Sized>(
        num_classes: usize,
        num_features: usize,
        weight_std: f64,
        bias_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(num_classes, num_features)?;
        if !(weight_std >= 0.0) || !weight_std.is_finite() {
            return Err(Error::NonPositive {
                what: "weight_std",
                value: weight_std,
            });
        }
        if !(bias_std >= 0.0) || !bias_std.is_finite() {
            return Err(Error::NonPositive {
                what: "bias_std",
                value: bias_std,
            });
        }
        let wd = Normal::new(0.0, weight_std).expect("validated std");
        let bd = Normal::new(0.0, bias_std).expect("validated std");
        for w in &mut model.weights {
            *w = wd.sample(rng);
        }
        for b in &mut model.biases {
            *b = bd.sample(rng);
        }
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    /// Number of free parameters, `K·D + K`.
    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    #[inline]
    pub(crate) fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.num_features..(class + 1) * self.num_features]
    }

    /// Utility of one class for a sparse input. Feature indices must be in
    /// range (guaranteed for examples from a validated [`crate::Dataset`]).
    #[inline]
    pub fn psi(&self, class: usize, x: &SparseExample) -> f64 {
        debug_assert!(class < self.num_classes);
        let row = self.weight_row(class);
        let mut acc = self.biases[class];
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            acc += row[i as usize] * v;
        }
        acc
    }

    /// Utilities of every class for one input, written into `out`.
    pub fn psi_all(&self, x: &SparseExample, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.biases);
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            let col = i as usize;
            for k in 0..self.num_classes {
                out[k] += self.weights[k * self.num_features + col] * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite()) && self.biases.iter().all(|b| b.is_finite())
    }

    /// Serializes as magic, version, dimensions, then raw little-endian
    /// doubles (weights row-major, then biases). The byte stream is a pure
    /// function of the parameter values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.num_classes as u64).to_le_bytes())?;
        w.write_all(&(self.num_features as u64).to_le_bytes())?;
        for v in self.weights.iter().chain(self.biases.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::ModelFormat("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let num_classes = read_u64(r)? as usize;
        let num_features = read_u64(r)? as usize;
        if num_classes == 0 {
            return Err(Error::ModelFormat("zero classes".into()));
        }
        let n = num_classes
            .checked_mul(num_features)
            .and_then(|wn| wn.checked_add(num_classes))
            .ok_or_else(|| Error::ModelFormat("dimensions overflow".into()))?;
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::ModelFormat("truncated parameter block".into()))?;
            values.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf[..1])? != 0 {
            return Err(Error::ModelFormat("trailing bytes after parameters".into()));
        }
        let biases = values.split_off(num_classes * num_features);
        Ok(Self {
            num_classes,
            num_features,
            weights: values,
            biases,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::ModelFormat("file too short for header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::ModelFormat("file too short for header".into()))?;
    Ok(u64::from_le_bytes(buf))
}
