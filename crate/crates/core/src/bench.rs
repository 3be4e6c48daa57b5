//! Wall-clock timing of the Hadamard attention variants.

use std::time::{Duration, Instant};

use crate::elsa::{hadamard_attention, ElsaConfig, ElsaParams, Variant};
use crate::error::{Error, Result};
use crate::rng::{normal, SeedSplitter};
use crate::tensor::{DType, Scalar, Tensor};

/// `(B, C, H, W)`, kernel and heads of one benchmark case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub dims: [usize; 4],
    pub kernel: usize,
    pub heads: usize,
}

impl BenchShape {
    pub fn label(&self) -> String {
        let [b, c, h, w] = self.dims;
        format!("{b}x{c}x{h}x{w}")
    }
}

/// Largest intermediate each variant materializes, in bytes.
///
/// * strict unfold: the unfolded keys `B * C * K^2 * H * W`
/// * shift conv: the pre-shift contraction `B * G * K^2 * H * W`
/// * merged conv and production: the merged contraction `B * 2G * K^2 * H * W`
pub fn transient_bytes(variant: Variant, shape: &BenchShape, dtype: DType) -> u64 {
    let [b, c, h, w] = shape.dims.map(|d| d as u64);
    let t = (shape.kernel * shape.kernel) as u64;
    let g = shape.heads as u64;
    let elems = match variant {
        Variant::StrictUnfold => b * c * t * h * w,
        Variant::ShiftConv => b * g * t * h * w,
        Variant::MergedConv | Variant::Production => b * 2 * g * t * h * w,
    };
    elems * dtype.size() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub shape: BenchShape,
    pub median: Duration,
    pub bytes: u64,
}

pub const CSV_HEADER: &str = "variant,shape,K,median_ms,buffer_bytes";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.3},{}",
            self.variant,
            self.shape.label(),
            self.shape.kernel,
            self.median.as_secs_f64() * 1e3,
            self.bytes
        )
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// One warmup, then the median of `repeats` timed forward passes.
pub fn bench_variant<T: Scalar>(variant: Variant, shape: &BenchShape, repeats: usize, seed: u64) -> Result<BenchRow> {
    if repeats < 3 {
        return Err(Error::Config(format!("bench needs at least 3 repeats, got {repeats}")));
    }
    let seeds = SeedSplitter::new(seed).child("bench");
    let cfg = ElsaConfig::new(shape.dims[1], shape.heads, shape.kernel);
    let params = ElsaParams::<T>::init(cfg, &mut seeds.stream("params"))?;
    let q: Tensor<T> = normal(&mut seeds.stream("q"), &shape.dims, 1.0);
    let k: Tensor<T> = normal(&mut seeds.stream("k"), &shape.dims, 1.0);
    hadamard_attention(&q, &k, &params, variant)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = hadamard_attention(&q, &k, &params, variant)?;
        times.push(start.elapsed());
        std::hint::black_box(out);
    }
    Ok(BenchRow {
        variant,
        shape: *shape,
        median: median(times),
        bytes: transient_bytes(variant, shape, T::DTYPE),
    })
}
