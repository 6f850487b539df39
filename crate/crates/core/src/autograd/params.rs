use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::AutogradError;

/// A named block of the flat parameter vector, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous segments covering `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct Layout {
    segments: Vec<Segment>,
    index: HashMap<String, usize>,
}

impl From<Vec<Segment>> for Layout {
    fn from(segments: Vec<Segment>) -> Self {
        let mut l = Layout {
            segments,
            index: HashMap::new(),
        };
        l.rebuild_index();
        l
    }
}

impl From<Layout> for Vec<Segment> {
    fn from(l: Layout) -> Self {
        l.segments
    }
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a `rows × cols` segment. Panics on a repeated name.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> &mut Self {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "segment {name} declared twice");
        let offset = self.len();
        self.index.insert(name.clone(), self.segments.len());
        self.segments.push(Segment {
            name,
            offset,
            rows,
            cols,
        });
        self
    }

    pub fn from_segments(segments: Vec<Segment>) -> Result<Self, AutogradError> {
        let mut layout = Layout::new();
        for s in segments {
            if s.offset != layout.len() || layout.index.contains_key(&s.name) {
                return Err(AutogradError::BadLayout(s.name));
            }
            layout.push(s.name, s.rows, s.cols);
        }
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.index.get(name).map(|&i| &self.segments[i])
    }

    pub fn segment(&self, name: &str) -> Result<&Segment, AutogradError> {
        self.get(name)
            .ok_or_else(|| AutogradError::UnknownSegment(name.to_string()))
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
    }
}

/// Flat trainable parameters with a symbolic layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self, AutogradError> {
        if values.len() != layout.len() {
            return Err(AutogradError::Shape(format!(
                "layout needs {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Result<&[f64], AutogradError> {
        let s = self.layout.segment(name)?;
        Ok(&self.values[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64], AutogradError> {
        let r = self.layout.segment(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>, AutogradError> {
        let s = self.layout.segment(name)?;
        Ok(DMatrix::from_row_slice(s.rows, s.cols, &self.values[s.range()]))
    }

    pub fn set_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<(), AutogradError> {
        let s = self.layout.segment(name)?.clone();
        if (m.nrows(), m.ncols()) != (s.rows, s.cols) {
            return Err(AutogradError::Shape(format!(
                "segment {name} is {}x{}, got {}x{}",
                s.rows,
                s.cols,
                m.nrows(),
                m.ncols()
            )));
        }
        for r in 0..s.rows {
            for c in 0..s.cols {
                self.values[s.offset + r * s.cols + c] = m[(r, c)];
            }
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
