use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{ImageBuffer, ImagingError};

/// Peak signal-to-noise ratio, with identical images kept distinct from any
/// finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    /// Decibels; identical images give `+∞`.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }

    pub fn from_mse(mse: f64, peak: f64) -> Self {
        if mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Db(10.0 * (peak * peak / mse).log10())
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.2} dB"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

// JSON has no infinity: identical images are written as the string "identical".
impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("identical"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Db(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Db(v) => Ok(Psnr::Db(v)),
            Raw::Text(t) if t == "identical" => Ok(Psnr::Identical),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR `{t}`"))),
        }
    }
}

/// Mean squared error over all channels.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, ImagingError> {
    if a.dims() != b.dims() {
        return Err(ImagingError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// `10 · log10(peak² / MSE)` over all channels.
///
/// On PQ-encoded HDR frames this is reported as "PQ-PSNR".
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<Psnr, ImagingError> {
    Ok(Psnr::from_mse(mse(a, b)?, peak))
}

/// Metric label for reports: plain PSNR on SDR targets, PQ-PSNR on HDR ones.
pub fn psnr_label(hdr_target: bool) -> &'static str {
    if hdr_target {
        "PQ-PSNR"
    } else {
        "PSNR"
    }
}
