use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

/// A named slice `[offset, offset + len)` of a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with named, disjoint, contiguous segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl ParameterSet {
    /// Creates a zero-filled set from `(name, shape)` pairs laid out in order.
    pub fn zeros<S: AsRef<str>>(layout: &[(S, Vec<usize>)]) -> Self {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, shape) in layout {
            let seg = Segment {
                name: name.as_ref().to_string(),
                offset,
                shape: shape.clone(),
            };
            offset += seg.len();
            segments.push(seg);
        }
        ParameterSet {
            segments,
            values: vec![0.0; offset],
        }
    }

    /// Rebuilds a set from segments and values, checking the layout covers the vector.
    pub fn from_parts(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for s in &segments {
            if s.offset != expected {
                return Err(Error::shape(
                    "parameter_set",
                    format!("segment `{}` starts at {} not {expected}", s.name, s.offset),
                ));
            }
            expected += s.len();
        }
        if expected != values.len() {
            return Err(Error::shape(
                "parameter_set",
                format!("segments cover {expected} values, vector has {}", values.len()),
            ));
        }
        Ok(ParameterSet { segments, values })
    }

    pub fn total_len(&self) -> usize {
        self.values.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn tensor(&self, seg: &Segment) -> Tensor {
        Tensor::new(seg.shape.clone(), self.slice(seg).to_vec())
            .expect("segment shape matches its length")
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.segments == other.segments
    }

    /// Returns a copy with every value replaced by `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "parameter_set",
                format!("expected {} values, got {}", self.values.len(), values.len()),
            ));
        }
        Ok(ParameterSet {
            segments: self.segments.clone(),
            values,
        })
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.values, other)
    }

    /// `self += a · x`
    pub fn axpy(&mut self, a: f64, x: &[f64]) {
        axpy(&mut self.values, a, x);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len(), "axpy of unequal lengths");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
