//! Display-encoding transfer functions.
//!
//! sRGB (IEC 61966-2-1) for SDR material and the SMPTE ST 2084 perceptual
//! quantizer for HDR. The rest of the crate works purely on encoded values;
//! these are for preparing datasets and for reporting PSNR on PQ values.

use super::ImagingError;

const SRGB_LINEAR_CUTOFF: f64 = 0.0031308;
const SRGB_ENCODED_CUTOFF: f64 = 0.04045;

// ST 2084 constants
const PQ_M1: f64 = 2610.0 / 16384.0;
const PQ_M2: f64 = 2523.0 / 4096.0 * 128.0;
const PQ_C1: f64 = 3424.0 / 4096.0;
const PQ_C2: f64 = 2413.0 / 4096.0 * 32.0;
const PQ_C3: f64 = 2392.0 / 4096.0 * 32.0;

/// Peak luminance represented by a PQ value of 1, in cd/m².
pub const PQ_PEAK_NITS: f64 = 10_000.0;

pub fn srgb_encode(linear: f64) -> Result<f64, ImagingError> {
    if !(linear >= 0.0) {
        return Err(ImagingError::TransferDomain { function: "srgb_encode", value: linear });
    }
    Ok(if linear <= SRGB_LINEAR_CUTOFF {
        12.92 * linear
    } else {
        1.055 * linear.powf(1.0 / 2.4) - 0.055
    })
}

pub fn srgb_decode(encoded: f64) -> Result<f64, ImagingError> {
    if !(encoded >= 0.0) {
        return Err(ImagingError::TransferDomain { function: "srgb_decode", value: encoded });
    }
    Ok(if encoded <= SRGB_ENCODED_CUTOFF {
        encoded / 12.92
    } else {
        ((encoded + 0.055) / 1.055).powf(2.4)
    })
}

/// Absolute luminance as a fraction of 10 000 cd/m² to a PQ code value.
pub fn pq_encode(luminance: f64) -> Result<f64, ImagingError> {
    if !(0.0..=1.0).contains(&luminance) {
        return Err(ImagingError::TransferDomain { function: "pq_encode", value: luminance });
    }
    let yp = luminance.powf(PQ_M1);
    Ok(((PQ_C1 + PQ_C2 * yp) / (1.0 + PQ_C3 * yp)).powf(PQ_M2))
}

pub fn pq_decode(encoded: f64) -> Result<f64, ImagingError> {
    if !(0.0..=1.0).contains(&encoded) {
        return Err(ImagingError::TransferDomain { function: "pq_decode", value: encoded });
    }
    let ep = encoded.powf(1.0 / PQ_M2);
    let num = (ep - PQ_C1).max(0.0);
    Ok((num / (PQ_C2 - PQ_C3 * ep)).powf(1.0 / PQ_M1))
}
