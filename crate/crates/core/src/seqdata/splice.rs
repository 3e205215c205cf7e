use super::{Example, TokenGrid, EOS_CODE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Text = 0,
    Reference = 1,
    Target = 2,
}

/// The two-dimensional model input `[text | reference | target (+EOS)]`.
///
/// Text tokens are repeated across all `n_q` columns. Only target rows
/// (including the terminal EOS frame) are loss-masked.
#[derive(Debug, Clone, PartialEq)]
pub struct SplicedSequence {
    n_q: usize,
    rows: Vec<u32>,
    /// Row index where the reference segment starts, then where the target
    /// segment starts.
    boundaries: [usize; 2],
    has_eos: bool,
    loss_mask: Vec<bool>,
}

fn condition_rows(example: &Example, n_q: usize) -> Result<(Vec<u32>, [usize; 2])> {
    if example.ref_grid.n_q() != n_q {
        return Err(Error::Shape(format!(
            "reference grid has n_q {} but target has {n_q}",
            example.ref_grid.n_q()
        )));
    }
    if example.text.is_empty() {
        return Err(Error::InputDomain("text must be non-empty".into()));
    }
    let mut rows = Vec::new();
    for &tok in &example.text {
        rows.extend(std::iter::repeat_n(tok, n_q));
    }
    rows.extend_from_slice(example.ref_grid.codes());
    let text_len = example.text.len();
    Ok((rows, [text_len, text_len + example.ref_grid.frames()]))
}

/// Full training sequence for `target`, with a terminal EOS frame.
pub fn splice(example: &Example, target: &TokenGrid) -> Result<SplicedSequence> {
    let n_q = target.n_q();
    let (mut rows, boundaries) = condition_rows(example, n_q)?;
    rows.extend_from_slice(target.codes());
    rows.extend(std::iter::repeat_n(EOS_CODE, n_q));
    let total = rows.len() / n_q;
    let loss_mask = (0..total).map(|t| t >= boundaries[1]).collect();
    Ok(SplicedSequence {
        n_q,
        rows,
        boundaries,
        has_eos: true,
        loss_mask,
    })
}

/// Condition-only prefix used to start generation.
pub fn splice_prefix(example: &Example) -> Result<SplicedSequence> {
    let n_q = example.ref_grid.n_q();
    let (rows, boundaries) = condition_rows(example, n_q)?;
    let total = rows.len() / n_q;
    Ok(SplicedSequence {
        n_q,
        rows,
        boundaries,
        has_eos: false,
        loss_mask: vec![false; total],
    })
}

impl SplicedSequence {
    /// Sequence with an explicit terminal code, for models whose vocabulary
    /// differs from the task's.
    #[cfg(test)]
    pub(crate) fn with_terminal(example: &Example, target: &TokenGrid, eos: u32) -> Result<Self> {
        let mut seq = splice(example, target)?;
        let n = seq.rows.len();
        seq.rows[n - seq.n_q..].iter_mut().for_each(|c| *c = eos);
        Ok(seq)
    }


    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.n_q
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.rows[t * self.n_q..(t + 1) * self.n_q]
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn segment_boundaries(&self) -> [usize; 2] {
        self.boundaries
    }

    /// Segment of row `t` and its position inside that segment.
    pub fn segment_of(&self, t: usize) -> (Segment, usize) {
        let [r, g] = self.boundaries;
        if t < r {
            (Segment::Text, t)
        } else if t < g {
            (Segment::Reference, t - r)
        } else {
            (Segment::Target, t - g)
        }
    }

    pub fn masked_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask
            .iter()
            .enumerate()
            .filter_map(|(t, &m)| m.then_some(t))
    }

    /// Target rows without the EOS frame, if any.
    pub fn target_grid(&self) -> Option<TokenGrid> {
        let start = self.boundaries[1];
        let end = self.len() - usize::from(self.has_eos);
        (end > start)
            .then(|| TokenGrid::new(self.n_q, self.rows[start * self.n_q..end * self.n_q].to_vec()))
            .and_then(|r| r.ok())
    }
}
