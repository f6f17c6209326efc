//! Absolute-error, unbiased vector quantization on a scaled integer grid.
//!
//! A vector `w` with error budget `eps` is mapped to `w * sqrt(d) / eps`,
//! each coordinate is rounded to one of its two neighbouring integers with
//! probabilities that keep the expectation exact, and the integers are sent
//! as a sparse gamma-coded vector. Decoding multiplies back by the grid step
//! `eps / sqrt(d)`, so every coordinate moves by less than one step and the
//! Euclidean error stays below `eps`.
//!
//! `eps == 0` is a lossless pass-through charged `float_bits * d` bits. The
//! grid step is protocol metadata and is not charged.

use rand::Rng;

use crate::bitstream::{self, BitStream, SparseIntVector};
use crate::error::{Error, Result};

pub const DEFAULT_FLOAT_BITS: u32 = 32;

/// Largest grid coordinate magnitude the codec accepts.
const GRID_LIMIT: f64 = (i64::MAX - 1) as f64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    max_error: f64,
    dim: usize,
    grid_step: f64,
    float_bits: u32,
}

impl QuantSpec {
    pub fn new(max_error: f64, dim: usize) -> Result<Self> {
        Self::with_float_bits(max_error, dim, DEFAULT_FLOAT_BITS)
    }

    pub fn with_float_bits(max_error: f64, dim: usize, float_bits: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if !(max_error.is_finite() && max_error >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "max error must be finite and nonnegative, got {max_error}"
            )));
        }
        if float_bits == 0 || float_bits > 64 {
            return Err(Error::InvalidInput(format!(
                "float width must be in 1..=64 bits, got {float_bits}"
            )));
        }
        Ok(Self {
            max_error,
            dim,
            grid_step: max_error / (dim as f64).sqrt(),
            float_bits,
        })
    }

    pub fn max_error(&self) -> f64 {
        self.max_error
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    pub fn float_bits(&self) -> u32 {
        self.float_bits
    }

    pub fn is_lossless(&self) -> bool {
        self.max_error == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    /// Integer grid coordinates and their gamma-coded payload.
    Grid {
        grid: SparseIntVector,
        payload: BitStream,
    },
    /// Lossless transmission of the raw coordinates.
    PassThrough { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMessage {
    spec: QuantSpec,
    encoding: Encoding,
    bits: u64,
}

impl QuantizedMessage {
    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    /// Communication cost in bits (metadata excluded).
    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn grid(&self) -> Option<&SparseIntVector> {
        match &self.encoding {
            Encoding::Grid { grid, .. } => Some(grid),
            Encoding::PassThrough { .. } => None,
        }
    }

    pub fn payload(&self) -> Option<&BitStream> {
        match &self.encoding {
            Encoding::Grid { payload, .. } => Some(payload),
            Encoding::PassThrough { .. } => None,
        }
    }

    /// Adds the decoded vector into `out` coordinate by coordinate.
    pub fn add_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.spec.dim);
        match &self.encoding {
            Encoding::Grid { grid, .. } => {
                let step = self.spec.grid_step;
                for &(pos, value) in grid.entries() {
                    out[pos - 1] += value as f64 * step;
                }
            }
            Encoding::PassThrough { values } => {
                for (o, v) in out.iter_mut().zip(values) {
                    *o += v;
                }
            }
        }
    }

    /// Wire form: `gamma(dim)`, the grid step as a 64-bit float, then the
    /// payload (or 64-bit raw coordinates in pass-through mode).
    pub fn to_wire(&self) -> BitStream {
        let mut out = BitStream::new();
        bitstream::write_gamma(&mut out, self.spec.dim as u64).expect("dim >= 1");
        out.push_bits(self.spec.grid_step.to_bits(), 64);
        match &self.encoding {
            Encoding::Grid { payload, .. } => out.append(payload),
            Encoding::PassThrough { values } => {
                for v in values {
                    out.push_bits(v.to_bits(), 64);
                }
            }
        }
        out
    }

    pub fn from_wire(stream: &BitStream, float_bits: u32) -> Result<Self> {
        let mut reader = stream.reader();
        let dim = reader.read_gamma()? as usize;
        let step = f64::from_bits(reader.read_bits(64)?);
        if !(step.is_finite() && step >= 0.0) {
            return Err(Error::CorruptStream(format!("invalid grid step {step}")));
        }
        let max_error = step * (dim as f64).sqrt();
        let mut spec = QuantSpec::with_float_bits(max_error, dim, float_bits)?;
        spec.grid_step = step;
        if step == 0.0 {
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f64::from_bits(reader.read_bits(64)?));
            }
            if reader.remaining() != 0 {
                return Err(Error::CorruptStream("trailing bits after raw values".into()));
            }
            return Ok(Self {
                bits: u64::from(float_bits) * dim as u64,
                spec,
                encoding: Encoding::PassThrough { values },
            });
        }
        let start = reader.cursor();
        let grid = bitstream::read_sparse(&mut reader, dim)?;
        if reader.remaining() != 0 {
            return Err(Error::CorruptStream("trailing bits after payload".into()));
        }
        let mut payload = BitStream::with_capacity(stream.len() - start);
        for i in start..stream.len() {
            payload.push(stream.get(i).expect("in range"));
        }
        Ok(Self {
            bits: payload.len() as u64,
            spec,
            encoding: Encoding::Grid { grid, payload },
        })
    }
}

/// Unbiased stochastic rounding of `w` onto the grid of `spec`.
///
/// One uniform draw is consumed per coordinate with a nonzero fractional
/// part, in coordinate order. Coordinates already on the grid are kept
/// without drawing.
pub fn quantize<R: Rng + ?Sized>(w: &[f64], spec: &QuantSpec, rng: &mut R) -> Result<QuantizedMessage> {
    if w.len() != spec.dim {
        return Err(Error::InvalidInput(format!(
            "vector has dimension {}, spec expects {}",
            w.len(),
            spec.dim
        )));
    }
    if let Some(i) = w.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "coordinate {i} is not finite ({})",
            w[i]
        )));
    }
    if spec.is_lossless() {
        return Ok(QuantizedMessage {
            spec: *spec,
            encoding: Encoding::PassThrough { values: w.to_vec() },
            bits: u64::from(spec.float_bits) * spec.dim as u64,
        });
    }

    let step = spec.grid_step;
    let mut entries = Vec::new();
    for (i, &x) in w.iter().enumerate() {
        let scaled = x / step;
        if !(scaled.abs() <= GRID_LIMIT) {
            return Err(Error::InvalidInput(format!(
                "coordinate {i} ({x}) exceeds the grid range for step {step}"
            )));
        }
        let nearest = scaled.round();
        let value = if nearest * step == x {
            nearest
        } else {
            let floor = scaled.floor();
            let frac = scaled - floor;
            if frac > 0.0 && rng.random::<f64>() < frac {
                floor + 1.0
            } else {
                floor
            }
        };
        if value != 0.0 {
            entries.push((i + 1, value as i64));
        }
    }
    let grid = SparseIntVector::new(spec.dim, entries)?;
    let payload = bitstream::encode_sparse(&grid);
    Ok(QuantizedMessage {
        spec: *spec,
        bits: payload.len() as u64,
        encoding: Encoding::Grid { grid, payload },
    })
}

/// Decoded vector of a message. Deterministic.
pub fn dequantize(msg: &QuantizedMessage) -> Vec<f64> {
    match &msg.encoding {
        Encoding::PassThrough { values } => values.clone(),
        Encoding::Grid { .. } => {
            let mut out = vec![0.0; msg.spec.dim];
            msg.add_into(&mut out);
            out
        }
    }
}

/// Minimum expected bits of any absolute-error encoder on a ball, for
/// relative error `rel_err = sigma / M`: `ceil(d * log2(1/rel_err))`,
/// clamped at zero.
pub fn bits_lower_bound(dim: usize, rel_err: f64) -> u64 {
    let bits = (dim as f64 * (1.0 / rel_err).log2()).ceil();
    if bits > 0.0 {
        bits as u64
    } else {
        0
    }
}

/// Bits sufficient for the cube-covering encoder:
/// `ceil(1.05 d + d * log2((1 + 2 rel_err) / rel_err))`.
pub fn bits_upper_bound(dim: usize, rel_err: f64) -> u64 {
    let d = dim as f64;
    (1.05 * d + d * ((1.0 + 2.0 * rel_err) / rel_err).log2()).ceil() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_vector_is_on_grid() {
        let spec = QuantSpec::new(0.1, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let msg = quantize(&[0.0; 6], &spec, &mut rng).unwrap();
        assert_eq!(msg.grid().unwrap().nnz(), 0);
        assert_eq!(dequantize(&msg), vec![0.0; 6]);
        assert_eq!(msg.bits(), 1);
    }

    #[test]
    fn scalar_half_rounds_between_two_and_three() {
        let spec = QuantSpec::new(0.2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut ups = 0usize;
        for _ in 0..draws {
            let msg = quantize(&[0.5], &spec, &mut rng).unwrap();
            let g = msg.grid().unwrap().to_dense()[0];
            assert!(g == 2 || g == 3, "grid value {g}");
            let u = dequantize(&msg)[0];
            assert!((u - 0.5).abs() <= 0.1 + 1e-15);
            ups += usize::from(g == 3);
        }
        let p = ups as f64 / draws as f64;
        // 5 sigma of a fair coin over 1e5 draws
        assert!((p - 0.5).abs() < 5.0 * 0.5 / (draws as f64).sqrt(), "p = {p}");
    }

    #[test]
    fn on_grid_inputs_are_reproduced_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let dim = 1 + trial % 17;
            let spec = QuantSpec::new(0.37 + trial as f64 * 0.01, dim).unwrap();
            let w: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(-1000i64..=1000) as f64 * spec.grid_step())
                .collect();
            for seed in 0..3 {
                let mut q = stream(seed, 0, 0, Purpose::Quantize);
                let msg = quantize(&w, &spec, &mut q).unwrap();
                assert_eq!(dequantize(&msg), w);
            }
        }
    }

    #[test]
    fn dequantize_examples() {
        let spec = QuantSpec::new(0.2 * 5f64.sqrt(), 5).unwrap();
        let empty = QuantizedMessage {
            spec,
            encoding: Encoding::Grid {
                grid: SparseIntVector::empty(5).unwrap(),
                payload: BitStream::from_bit_str("1").unwrap(),
            },
            bits: 1,
        };
        assert_eq!(dequantize(&empty), vec![0.0; 5]);

        let grid = SparseIntVector::new(5, vec![(1, 3)]).unwrap();
        let payload = bitstream::encode_sparse(&grid);
        let msg = QuantizedMessage {
            spec,
            bits: payload.len() as u64,
            encoding: Encoding::Grid { grid, payload },
        };
        let out = dequantize(&msg);
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert_eq!(&out[1..], &[0.0; 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = QuantSpec::new(0.1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(quantize(&[f64::NAN, 0.0], &spec, &mut rng).is_err());
        assert!(quantize(&[f64::INFINITY, 0.0], &spec, &mut rng).is_err());
        assert!(quantize(&[1e300, 0.0], &spec, &mut rng).is_err());
        assert!(quantize(&[1.0], &spec, &mut rng).is_err());
        assert!(QuantSpec::new(-1.0, 2).is_err());
        assert!(QuantSpec::new(0.1, 0).is_err());
    }

    #[test]
    fn pass_through_is_lossless_and_charged_per_float() {
        let spec = QuantSpec::with_float_bits(0.0, 3, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = [1.0 / 3.0, -2.5e-300, 7.0];
        let msg = quantize(&w, &spec, &mut rng).unwrap();
        assert_eq!(dequantize(&msg), w.to_vec());
        assert_eq!(msg.bits(), 96);
    }

    #[test]
    fn wire_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        for eps in [0.0, 1e-3, 0.5, 10.0] {
            let spec = QuantSpec::new(eps, w.len()).unwrap();
            let msg = quantize(&w, &spec, &mut rng).unwrap();
            let back = QuantizedMessage::from_wire(&msg.to_wire(), 32).unwrap();
            assert_eq!(dequantize(&back), dequantize(&msg));
            assert_eq!(back.bits(), msg.bits());
        }
    }

    #[test]
    fn bit_bound_worked_values() {
        assert_eq!(bits_lower_bound(2, 0.25), 4);
        assert_eq!(bits_lower_bound(1, 1.0), 0);
        assert_eq!(bits_lower_bound(1, 3.0), 0);
        assert_eq!(bits_lower_bound(100, 0.5), 100);
        assert_eq!(bits_upper_bound(2, 0.25), 8);
        assert_eq!(bits_upper_bound(1, 1.0), 3);
    }

    proptest! {
        #[test]
        fn upper_bound_decreases_with_rel_err(dim in 1usize..500, a in 1e-4f64..10.0, b in 1e-4f64..10.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(bits_upper_bound(dim, hi) <= bits_upper_bound(dim, lo));
        }

        #[test]
        fn hard_error_bound(seed in any::<u64>(), dim in 1usize..200, eps in 1e-6f64..10.0, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..dim).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
            let spec = QuantSpec::new(eps, dim).unwrap();
            let msg = quantize(&w, &spec, &mut rng).unwrap();
            let u = dequantize(&msg);
            prop_assert!(norm_diff(&u, &w) <= eps);
            // decoding is deterministic and matches the committed grid
            let again = QuantizedMessage::from_wire(&msg.to_wire(), 32).unwrap();
            prop_assert_eq!(dequantize(&again), u);
        }
    }
}
