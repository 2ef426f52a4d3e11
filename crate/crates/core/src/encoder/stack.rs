use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Tape, Var};

/// Per-layer `[CLS]` vectors and mean token vectors of one sentence.
/// Row `i` of each matrix is layer `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub cls: Matrix,
    pub avg: Matrix,
}

impl LayerStack {
    pub fn new(cls: Matrix, avg: Matrix) -> Result<Self> {
        if cls.shape() != avg.shape() || cls.rows() == 0 || cls.cols() == 0 {
            return Err(Error::Shape(format!(
                "layer stack needs matching non-empty cls {:?} and avg {:?}",
                cls.shape(),
                avg.shape()
            )));
        }
        Ok(Self { cls, avg })
    }

    pub fn layers(&self) -> usize {
        self.cls.rows()
    }

    pub fn dim(&self) -> usize {
        self.cls.cols()
    }

    /// `[CLS]` vector of the last layer.
    pub fn cls_last(&self) -> &[f64] {
        self.cls.row(self.layers() - 1)
    }
}

/// Layer stacks of several sentences on a tape. Row `s * layers + i` holds
/// layer `i` of sentence `s`.
#[derive(Clone, Copy, Debug)]
pub struct StackBatch<'t> {
    pub cls: Var<'t>,
    pub avg: Var<'t>,
    pub layers: usize,
    pub count: usize,
}

impl<'t> StackBatch<'t> {
    pub fn from_stacks(tape: &'t Tape, stacks: &[LayerStack]) -> Result<Self> {
        let first = stacks.first().ok_or(Error::EmptyInput("layer stacks"))?;
        let (layers, dim) = (first.layers(), first.dim());
        if let Some(bad) = stacks.iter().find(|s| s.layers() != layers || s.dim() != dim) {
            return Err(Error::Shape(format!(
                "stack of {}x{} among {layers}x{dim} stacks",
                bad.layers(),
                bad.dim()
            )));
        }
        let cls: Vec<&Matrix> = stacks.iter().map(|s| &s.cls).collect();
        let avg: Vec<&Matrix> = stacks.iter().map(|s| &s.avg).collect();
        Ok(Self {
            cls: tape.constant(Matrix::vstack(&cls)?),
            avg: tape.constant(Matrix::vstack(&avg)?),
            layers,
            count: stacks.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.cls.cols()
    }

    /// Row range of each sentence.
    pub fn segments(&self) -> Vec<Range<usize>> {
        (0..self.count).map(|s| s * self.layers..(s + 1) * self.layers).collect()
    }

    /// Row index of layer `layer` (0-based) for every sentence.
    pub fn layer_rows(&self, layer: usize) -> Vec<usize> {
        (0..self.count).map(|s| s * self.layers + layer).collect()
    }

    pub fn last_rows(&self) -> Vec<usize> {
        self.layer_rows(self.layers - 1)
    }

    /// Sentences `indices` as a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let rows: Vec<usize> =
            indices.iter().flat_map(|&s| s * self.layers..(s + 1) * self.layers).collect();
        Self {
            cls: self.cls.gather_rows(&rows),
            avg: self.avg.gather_rows(&rows),
            layers: self.layers,
            count: indices.len(),
        }
    }

    pub fn to_stacks(&self) -> Vec<LayerStack> {
        let (cls, avg) = (self.cls.value(), self.avg.value());
        self.segments()
            .into_iter()
            .map(|seg| {
                let rows: Vec<usize> = seg.collect();
                LayerStack { cls: cls.select_rows(&rows), avg: avg.select_rows(&rows) }
            })
            .collect()
    }
}
