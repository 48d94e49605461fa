use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Feature frames with one class label and one condition (speaker) id each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrameSet {
    frames: Matrix,
    targets: Vec<usize>,
    class_count: usize,
    conditions: Vec<u32>,
}

impl LabeledFrameSet {
    pub fn new(
        frames: Matrix,
        targets: Vec<usize>,
        class_count: usize,
        conditions: Vec<u32>,
    ) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::invalid("frame set must contain at least one frame"));
        }
        if targets.len() != frames.rows() {
            return Err(Error::Dimension {
                what: "targets",
                expected: frames.rows(),
                got: targets.len(),
            });
        }
        if conditions.len() != frames.rows() {
            return Err(Error::Dimension {
                what: "condition ids",
                expected: frames.rows(),
                got: conditions.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= class_count) {
            return Err(Error::invalid(format!(
                "target {bad} outside [0, {class_count})"
            )));
        }
        if !frames.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("frames contain non-finite values"));
        }
        Ok(Self {
            frames,
            targets,
            class_count,
            conditions,
        })
    }

    /// Single-condition set (condition id 0).
    pub fn single(frames: Matrix, targets: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = frames.rows();
        Self::new(frames, targets, class_count, vec![0; n])
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn conditions(&self) -> &[u32] {
        &self.conditions
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of frames, `T`.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    /// Frames whose index satisfies `keep`, in order. `None` if nothing survives.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> Option<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        if idx.is_empty() {
            return None;
        }
        Some(self.subset(&idx))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            frames: self.frames.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            class_count: self.class_count,
            conditions: indices.iter().map(|&i| self.conditions[i]).collect(),
        }
    }

    /// Concatenates sets that share feature dimension and class count.
    pub fn concat(sets: &[&LabeledFrameSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut targets = Vec::new();
        let mut conditions = Vec::new();
        for s in sets {
            if s.feature_dim() != first.feature_dim() || s.class_count != first.class_count {
                return Err(Error::invalid("frame sets have different shapes"));
            }
            data.extend_from_slice(s.frames.as_slice());
            targets.extend_from_slice(&s.targets);
            conditions.extend_from_slice(&s.conditions);
        }
        let frames = Matrix::from_vec(targets.len(), first.feature_dim(), data)?;
        Self::new(frames, targets, first.class_count, conditions)
    }
}

/// Training targets: either the hard labels of a frame set or one soft
/// distribution per frame.
#[derive(Debug, Clone)]
pub enum TargetSet<'a> {
    Hard(&'a [usize]),
    Soft(&'a Matrix),
}

impl TargetSet<'_> {
    /// Writes the target distribution of frame `t` into `out`.
    #[inline]
    pub(crate) fn fill(&self, t: usize, out: &mut [f64]) {
        match self {
            TargetSet::Hard(labels) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[labels[t]] = 1.0;
            }
            TargetSet::Soft(m) => out.copy_from_slice(m.row(t)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TargetSet::Hard(l) => l.len(),
            TargetSet::Soft(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_target() {
        let frames = Matrix::zeros(2, 3);
        assert!(LabeledFrameSet::single(frames.clone(), vec![0, 4], 4).is_err());
        assert!(LabeledFrameSet::single(frames, vec![0, 3], 4).is_ok());
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(LabeledFrameSet::single(Matrix::zeros(0, 3), vec![], 2).is_err());
        let mut frames = Matrix::zeros(1, 2);
        frames.set(0, 1, f64::NAN);
        assert!(LabeledFrameSet::single(frames, vec![0], 2).is_err());
    }
}
