//! Per-tensor storage codecs for client updates: FP16, symmetric Int8 and
//! packed Int4, plus an identity FP32 passthrough.
//!
//! Integer modes use `alpha = max|W| / qmax` (1.0 for an all-zero tensor),
//! round half away from zero and clip to `[-qmax, qmax]`. Int4 values are
//! shifted by +8 into `[1, 15]` and packed high nibble first; an odd tail is
//! padded with nibble 0.

use std::io::{self, Read, Write};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numvec::{ParamVector, TensorLayout};

const INT8_MAX: f64 = 127.0;
const INT4_MAX: f64 = 7.0;
const INT4_OFFSET: i8 = 8;
const SCALE_BYTES: usize = 8;
/// Smallest fp16 subnormal is 2^-24; half of it bounds the underflow error.
const FP16_SUBNORMAL_HALF_ULP: f64 = 1.0 / (1u64 << 25) as f64;
const FP16_UNIT_ROUNDOFF: f64 = 1.0 / 2048.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    #[default]
    Fp32,
    Fp16,
    Int8,
    Int4,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Fp32 => "fp32",
            QuantMode::Fp16 => "fp16",
            QuantMode::Int8 => "int8",
            QuantMode::Int4 => "int4",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedTensor {
    /// Identity passthrough; accounted as 4 bytes per element.
    Full { values: Vec<f64>, shape: Vec<usize> },
    Half { bits: Vec<u16>, shape: Vec<usize> },
    Int8 { values: Vec<i8>, scale: f64, shape: Vec<usize> },
    Int4 { packed: Vec<u8>, scale: f64, shape: Vec<usize> },
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            QuantizedTensor::Full { shape, .. }
            | QuantizedTensor::Half { shape, .. }
            | QuantizedTensor::Int8 { shape, .. }
            | QuantizedTensor::Int4 { shape, .. } => shape,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn mode(&self) -> QuantMode {
        match self {
            QuantizedTensor::Full { .. } => QuantMode::Fp32,
            QuantizedTensor::Half { .. } => QuantMode::Fp16,
            QuantizedTensor::Int8 { .. } => QuantMode::Int8,
            QuantizedTensor::Int4 { .. } => QuantMode::Int4,
        }
    }

    pub fn scale(&self) -> Option<f64> {
        match self {
            QuantizedTensor::Int8 { scale, .. } | QuantizedTensor::Int4 { scale, .. } => Some(*scale),
            _ => None,
        }
    }

    /// Payload size used for memory accounting.
    pub fn byte_size(&self) -> usize {
        let n = self.num_elements();
        match self {
            QuantizedTensor::Full { .. } => 4 * n,
            QuantizedTensor::Half { .. } => 2 * n,
            QuantizedTensor::Int8 { .. } => n + SCALE_BYTES,
            QuantizedTensor::Int4 { shape, .. } => n.div_ceil(2) + SCALE_BYTES + 4 * shape.len(),
        }
    }

    fn dequant_into(&self, out: &mut [f64]) -> Result<()> {
        let n = self.num_elements();
        if out.len() != n {
            return Err(FedError::Malformed(format!(
                "tensor of {n} elements written into slot of {}",
                out.len()
            )));
        }
        match self {
            QuantizedTensor::Full { values, .. } => {
                check_payload(values.len(), n)?;
                out.copy_from_slice(values);
            }
            QuantizedTensor::Half { bits, .. } => {
                check_payload(bits.len(), n)?;
                for (o, b) in out.iter_mut().zip(bits) {
                    *o = f16::from_bits(*b).to_f64();
                }
            }
            QuantizedTensor::Int8 { values, scale, .. } => {
                check_payload(values.len(), n)?;
                for (o, q) in out.iter_mut().zip(values) {
                    *o = f64::from(*q) * scale;
                }
            }
            QuantizedTensor::Int4 { packed, scale, .. } => {
                check_payload(packed.len(), n.div_ceil(2))?;
                for (o, nib) in out.iter_mut().zip(unpack_nibbles(packed, n)?) {
                    *o = f64::from(nib as i8 - INT4_OFFSET) * scale;
                }
            }
        }
        Ok(())
    }
}

fn check_payload(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(FedError::Malformed(format!(
            "payload holds {found} units, shape requires {expected}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedUpdate {
    pub mode: QuantMode,
    pub tensors: Vec<QuantizedTensor>,
}

/// Side information from a quantization pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuantStats {
    /// FP16 elements clamped to the largest finite half value.
    pub saturated: usize,
}

/// Packs nibbles (each `< 16`) two per byte, first value in the high half.
pub fn pack_nibbles(nibbles: &[u8]) -> Vec<u8> {
    nibbles
        .chunks(2)
        .map(|pair| {
            let high = pair[0] << 4;
            let low = pair.get(1).copied().unwrap_or(0);
            high | (low & 0x0F)
        })
        .collect()
}

/// Inverse of [`pack_nibbles`], truncated to `n` values.
pub fn unpack_nibbles(packed: &[u8], n: usize) -> Result<Vec<u8>> {
    if packed.len() != n.div_ceil(2) {
        return Err(FedError::Malformed(format!(
            "{} packed bytes cannot hold exactly {n} nibbles",
            packed.len()
        )));
    }
    let mut out = Vec::with_capacity(packed.len() * 2);
    for byte in packed {
        out.push(byte >> 4);
        out.push(byte & 0x0F);
    }
    out.truncate(n);
    Ok(out)
}

fn max_abs(w: &[f64]) -> f64 {
    w.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn integer_scale(w: &[f64], qmax: f64) -> f64 {
    let alpha = max_abs(w) / qmax;
    if alpha == 0.0 {
        1.0
    } else {
        alpha
    }
}

fn quantize_levels(w: &[f64], alpha: f64, qmax: f64) -> impl Iterator<Item = i8> + '_ {
    // f64::round rounds half away from zero
    w.iter().map(move |v| (v / alpha).round().clamp(-qmax, qmax) as i8)
}

fn to_half(v: f64, stats: &mut QuantStats) -> u16 {
    let max = f16::MAX.to_f64();
    let clamped = if v.abs() > max {
        stats.saturated += 1;
        max.copysign(v)
    } else {
        v
    };
    f16::from_f64(clamped).to_bits()
}

fn quant_tensor(w: &[f64], shape: &[usize], mode: QuantMode, stats: &mut QuantStats) -> QuantizedTensor {
    let shape = shape.to_vec();
    match mode {
        QuantMode::Fp32 => QuantizedTensor::Full {
            values: w.to_vec(),
            shape,
        },
        QuantMode::Fp16 => QuantizedTensor::Half {
            bits: w.iter().map(|&v| to_half(v, stats)).collect(),
            shape,
        },
        QuantMode::Int8 => {
            let scale = integer_scale(w, INT8_MAX);
            QuantizedTensor::Int8 {
                values: quantize_levels(w, scale, INT8_MAX).collect(),
                scale,
                shape,
            }
        }
        QuantMode::Int4 => {
            let scale = integer_scale(w, INT4_MAX);
            let shifted: Vec<u8> = quantize_levels(w, scale, INT4_MAX)
                .map(|q| (q + INT4_OFFSET) as u8)
                .collect();
            QuantizedTensor::Int4 {
                packed: pack_nibbles(&shifted),
                scale,
                shape,
            }
        }
    }
}

fn check_layout(update: &ParamVector, layout: &TensorLayout) -> Result<()> {
    update.check_len(layout.len())?;
    for t in 0..layout.num_tensors() {
        if !update[layout.range(t)].iter().all(|v| v.is_finite()) {
            return Err(FedError::NonFinite(format!("tensor {t} of the update")));
        }
    }
    Ok(())
}

pub fn quant(update: &ParamVector, layout: &TensorLayout, mode: QuantMode) -> Result<QuantizedUpdate> {
    Ok(quant_with_stats(update, layout, mode)?.0)
}

pub fn quant_with_stats(update: &ParamVector, layout: &TensorLayout, mode: QuantMode) -> Result<(QuantizedUpdate, QuantStats)> {
    check_layout(update, layout)?;
    let mut stats = QuantStats::default();
    let tensors = (0..layout.num_tensors())
        .map(|t| quant_tensor(&update[layout.range(t)], &layout.shapes()[t], mode, &mut stats))
        .collect();
    Ok((QuantizedUpdate { mode, tensors }, stats))
}

pub fn dequant(q: &QuantizedUpdate) -> Result<ParamVector> {
    let total: usize = q.tensors.iter().map(QuantizedTensor::num_elements).sum();
    let mut out = vec![0.0; total];
    let mut offset = 0;
    for t in &q.tensors {
        if t.mode() != q.mode {
            return Err(FedError::Malformed(format!(
                "{} tensor inside a {} update",
                t.mode().name(),
                q.mode.name()
            )));
        }
        let n = t.num_elements();
        t.dequant_into(&mut out[offset..offset + n])?;
        offset += n;
    }
    Ok(ParamVector::new(out))
}

/// Per-tensor upper bound on `max |dequant(quant(W)) - W|`.
///
/// Integer modes: `alpha / 2`. FP16: `max|W| * 2^-11`, floored at the
/// subnormal half-ulp `2^-25`, plus any amount lost to saturation.
pub fn quant_error_bound(update: &ParamVector, layout: &TensorLayout, mode: QuantMode) -> Result<Vec<f64>> {
    check_layout(update, layout)?;
    Ok((0..layout.num_tensors())
        .map(|t| {
            let w = &update[layout.range(t)];
            match mode {
                QuantMode::Fp32 => 0.0,
                QuantMode::Int8 => integer_scale(w, INT8_MAX) / 2.0,
                QuantMode::Int4 => integer_scale(w, INT4_MAX) / 2.0,
                QuantMode::Fp16 => {
                    let m = max_abs(w);
                    let overflow = (m - f16::MAX.to_f64()).max(0.0);
                    (m * FP16_UNIT_ROUNDOFF).max(FP16_SUBNORMAL_HALF_ULP).max(overflow)
                }
            }
        })
        .collect())
}

pub fn quantized_bytes(q: &QuantizedUpdate) -> usize {
    q.tensors.iter().map(QuantizedTensor::byte_size).sum()
}

// Snapshot encoding (little-endian): per tensor the shape rank and dims as
// u32, the scale as f64 for integer modes, then the payload.

fn write_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl QuantizedTensor {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write_u32(w, self.shape().len())?;
        for &d in self.shape() {
            write_u32(w, d)?;
        }
        if let Some(scale) = self.scale() {
            w.write_all(&scale.to_le_bytes())?;
        }
        match self {
            QuantizedTensor::Full { values, .. } => {
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            QuantizedTensor::Half { bits, .. } => {
                for b in bits {
                    w.write_all(&b.to_le_bytes())?;
                }
            }
            QuantizedTensor::Int8 { values, .. } => {
                let bytes: Vec<u8> = values.iter().map(|v| *v as u8).collect();
                w.write_all(&bytes)?;
            }
            QuantizedTensor::Int4 { packed, .. } => w.write_all(packed)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, mode: QuantMode) -> io::Result<Self> {
        let rank = read_u32(r)?;
        if rank == 0 || rank > 8 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(r)).collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        Ok(match mode {
            QuantMode::Fp32 => {
                let raw = read_exact_vec(r, 8 * n)?;
                QuantizedTensor::Full {
                    values: raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                    shape,
                }
            }
            QuantMode::Fp16 => {
                let raw = read_exact_vec(r, 2 * n)?;
                QuantizedTensor::Half {
                    bits: raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
                    shape,
                }
            }
            QuantMode::Int8 => {
                let scale = read_f64(r)?;
                let raw = read_exact_vec(r, n)?;
                QuantizedTensor::Int8 {
                    values: raw.into_iter().map(|b| b as i8).collect(),
                    scale,
                    shape,
                }
            }
            QuantMode::Int4 => {
                let scale = read_f64(r)?;
                QuantizedTensor::Int4 {
                    packed: read_exact_vec(r, n.div_ceil(2))?,
                    scale,
                    shape,
                }
            }
        })
    }
}
