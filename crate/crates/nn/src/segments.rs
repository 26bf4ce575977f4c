use std::ops::Range;

/// Boundaries of sequences packed row-wise into one matrix.
///
/// `offsets` starts at 0, is non-decreasing and ends at the total row count;
/// segment `i` covers rows `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Segments { offsets }
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Segments {
            offsets: (0..=count).map(|i| i * len).collect(),
        }
    }

    pub fn single(len: usize) -> Self {
        Self::uniform(1, len)
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of rows covered.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn length(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}
