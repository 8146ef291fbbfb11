use serde::{Deserialize, Serialize};

use crate::lattice::Field;

/// Dense channel-major `(c, h, w)` array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn filled(c: usize, h: usize, w: usize, v: f64) -> Self {
        Self { c, h, w, data: vec![v; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length does not match shape");
        Self { c, h, w, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { c: 1, h: 1, w: 1, data: vec![v] }
    }

    /// Stack single-channel fields into channels.
    pub fn from_fields<'a>(fields: impl IntoIterator<Item = &'a Field>) -> Self {
        let mut data = Vec::new();
        let mut c = 0;
        let mut shape = None;
        for f in fields {
            let s = (f.height(), f.width());
            assert!(shape.is_none_or(|p| p == s), "fields must share one shape");
            shape = Some(s);
            data.extend_from_slice(f.values());
            c += 1;
        }
        let (h, w) = shape.expect("at least one field");
        Self { c, h, w, data }
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn to_field(&self, k: usize) -> Field {
        Field::new(self.w, self.h, self.channel(k).to_vec()).expect("tensor channel is a valid field")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
