//! Grid primitives shared by the simulator and the networks.
//!
//! A [`Field`] is one real-valued slice over the lattice, stored row-major
//! (`height` rows of `width` cells). Convolutions are 3×3 cross-correlations
//! with zero padding, so output shapes always match input shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid_arg(format!("field dimensions must be positive, got {width}x{height}"));
        }
        if values.len() != width * height {
            return invalid_arg(format!(
                "field of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            ));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "field dimensions must be positive");
        Self { width, height, values: vec![value; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { width: self.width, height: self.height, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination; panics on shape mismatch.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert!(self.same_shape(other), "field shape mismatch");
        Field {
            width: self.width,
            height: self.height,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Field, scale: f64) {
        assert!(self.same_shape(other), "field shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// A 3×3 cross-correlation kernel, row-major, centre at (1, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel3(pub [[f64; 3]; 3]);

impl Kernel3 {
    pub fn identity() -> Self {
        Kernel3([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    }

    /// Centre-only kernel, the degenerate 1×1 case.
    pub fn center(weight: f64) -> Self {
        Kernel3([[0.0, 0.0, 0.0], [0.0, weight, 0.0], [0.0, 0.0, 0.0]])
    }

    /// Advective diffusion kernel for the covariate update.
    pub fn default_kx() -> Self {
        Kernel3([[0.0, 0.45, 0.0], [0.15, 0.0, 0.35], [0.0, 0.05, 0.0]])
    }

    /// Centre-weighted smoothing kernel `(1/16) [[1,1,1],[1,8,1],[1,1,1]]`.
    pub fn default_smoothing() -> Self {
        let e = 1.0 / 16.0;
        Kernel3([[e, e, e], [e, 0.5, e], [e, e, e]])
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().flatten().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn entries(&self) -> [f64; 9] {
        let k = &self.0;
        [k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2]]
    }
}

/// "Same" 3×3 cross-correlation with zero padding.
pub fn conv2_same(input: &Field, kernel: &Kernel3) -> Field {
    let (w, h) = input.shape();
    let k = &kernel.0;
    let src = input.values();
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (kr, krow) in k.iter().enumerate() {
                let rr = r as isize + kr as isize - 1;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                let base = rr as usize * w;
                for (kc, &kv) in krow.iter().enumerate() {
                    let cc = c as isize + kc as isize - 1;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += kv * src[base + cc as usize];
                }
            }
            out[r * w + c] = acc;
        }
    }
    Field { width: w, height: h, values: out }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_map(input: &Field) -> Field {
    input.map(sigmoid)
}

/// Seeded random stream. Identical `(seed, stream)` pairs replay identical
/// draw sequences; distinct stream ids are statistically independent.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Fresh stream derived from this stream's identity and `tag`; does not
    /// consume draws from `self`.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, splitmix(self.stream ^ splitmix(tag.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub enum FieldDist<'a> {
    Gaussian { mean: f64, std: f64 },
    /// Per-cell success probabilities.
    Bernoulli(&'a Field),
}

pub fn sample_field(shape: (usize, usize), dist: FieldDist<'_>, rng: &mut RngStream) -> Result<Field> {
    let (w, h) = shape;
    if w == 0 || h == 0 {
        return invalid_arg(format!("field dimensions must be positive, got {w}x{h}"));
    }
    let values = match dist {
        FieldDist::Gaussian { mean, std } => {
            if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
                return invalid_arg(format!("gaussian needs finite mean and std >= 0, got ({mean}, {std})"));
            }
            (0..w * h).map(|_| mean + std * rng.normal()).collect()
        }
        FieldDist::Bernoulli(p) => {
            if p.shape() != shape {
                return invalid_arg("bernoulli probability field has wrong shape");
            }
            if let Some(bad) = p.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return invalid_arg(format!("bernoulli probability {bad} outside [0, 1]"));
            }
            p.values().iter().map(|&pi| if rng.uniform() < pi { 1.0 } else { 0.0 }).collect()
        }
    };
    Ok(Field { width: w, height: h, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_field(w: usize, h: usize, rng: &mut RngStream) -> Field {
        sample_field((w, h), FieldDist::Gaussian { mean: 0.0, std: 1.0 }, rng).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = RngStream::new(1, 0);
        let f = random_field(7, 5, &mut rng);
        assert_eq!(conv2_same(&f, &Kernel3::identity()), f);
    }

    #[test]
    fn constant_field_interior_and_corner() {
        let f = Field::filled(6, 6, 2.0);
        let out = conv2_same(&f, &Kernel3::default_smoothing());
        assert!((out.get(2, 3) - 2.0).abs() < 1e-12);
        // in-bounds entries at the corner: centre 8/16 plus three 1/16 neighbours
        assert!((out.get(0, 0) - 1.375).abs() < 1e-12);
    }

    #[test]
    fn default_kernels_sum_to_one() {
        assert!((Kernel3::default_smoothing().sum() - 1.0).abs() < 1e-12);
        assert!((Kernel3::default_kx().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orientation_is_cross_correlation() {
        // a single spike at (2,2); K_X's top-middle weight 0.45 reads the cell above,
        // so the spike shows up at (3,2) with weight 0.45
        let mut f = Field::zeros(5, 5);
        f.set(2, 2, 1.0);
        let out = conv2_same(&f, &Kernel3::default_kx());
        assert!((out.get(3, 2) - 0.45).abs() < 1e-15);
        assert!((out.get(1, 2) - 0.05).abs() < 1e-15);
        assert!((out.get(2, 3) - 0.15).abs() < 1e-15);
        assert!((out.get(2, 1) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Field::new(0, 3, vec![]).is_err());
        let mut rng = RngStream::new(0, 0);
        assert!(sample_field((0, 4), FieldDist::Gaussian { mean: 0.0, std: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn sigmoid_values() {
        let f = Field::new(3, 1, vec![0.0, 20.0, -1.0]).unwrap();
        let s = sigmoid_map(&f);
        assert_eq!(s.values()[0], 0.5);
        assert!(s.values()[1] > 0.999999);
        assert!((s.values()[2] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn bernoulli_forced_values() {
        let mut rng = RngStream::new(3, 9);
        let p0 = Field::zeros(8, 8);
        let p1 = Field::filled(8, 8, 1.0);
        assert!(sample_field((8, 8), FieldDist::Bernoulli(&p0), &mut rng).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(sample_field((8, 8), FieldDist::Bernoulli(&p1), &mut rng).unwrap().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bernoulli_rejects_bad_probability() {
        let mut rng = RngStream::new(3, 9);
        let p = Field::filled(2, 2, 1.5);
        assert!(sample_field((2, 2), FieldDist::Bernoulli(&p), &mut rng).is_err());
    }

    #[test]
    fn gaussian_moments_on_64x64() {
        let mut rng = RngStream::new(42, 0);
        let f = random_field(64, 64, &mut rng);
        let n = f.len() as f64;
        let mean = f.mean();
        let sd = (f.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 4.0 / 64.0, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.1, "sd {sd}");
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        let base = RngStream::new(5, 1);
        let mut a = base.substream(3);
        let mut b = base.substream(3);
        let mut c = base.substream(4);
        let xa: Vec<f64> = (0..4).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..4).map(|_| c.uniform()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = RngStream::new(seed, 0);
            let f = random_field(6, 5, &mut rng);
            let g = random_field(6, 5, &mut rng);
            let mut kv = [[0.0; 3]; 3];
            for row in kv.iter_mut() { for v in row.iter_mut() { *v = rng.normal(); } }
            let k = Kernel3(kv);
            let lhs = conv2_same(&f.zip_map(&g, |x, y| a * x + b * y), &k);
            let rhs = conv2_same(&f, &k).zip_map(&conv2_same(&g, &k), |x, y| a * x + b * y);
            for (l, r) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs().max(r.abs())));
            }
        }

        #[test]
        fn unit_sum_kernel_preserves_constants_inside(c in -10.0f64..10.0) {
            let f = Field::filled(7, 6, c);
            for k in [Kernel3::default_smoothing(), Kernel3::default_kx()] {
                let out = conv2_same(&f, &k);
                for r in 1..5 { for col in 1..6 {
                    prop_assert!((out.get(r, col) - c).abs() < 1e-12);
                }}
            }
        }

        #[test]
        fn sigmoid_is_symmetric(x in -50.0f64..50.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
            let s = sigmoid(x);
            prop_assert!(s >= 0.0 && s <= 1.0);
        }

        #[test]
        fn sampling_replays(seed in any::<u64>(), stream in any::<u64>()) {
            let mut r1 = RngStream::new(seed, stream);
            let mut r2 = RngStream::new(seed, stream);
            let a = random_field(4, 4, &mut r1);
            let b = random_field(4, 4, &mut r2);
            prop_assert_eq!(a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
