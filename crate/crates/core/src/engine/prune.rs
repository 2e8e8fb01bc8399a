//! Removing the rows of unselected pages from the hidden states at the
//! retrieval layer.

use crate::error::{Error, Result};
use crate::model::{PageSpan, SequenceLayout};
use crate::numerics::{Matrix, Tape, Var};
use crate::retrieval::RetrievalResult;

/// What survived pruning and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneRecord {
    pub original: SequenceLayout,
    /// Layout of the retained rows. Pages keep their original order and ids;
    /// positions are either the original rotary positions or `0..len`.
    pub surviving: SequenceLayout,
    /// Row indices into the original sequence, ascending.
    pub surviving_indices: Vec<usize>,
    pub retrieval: RetrievalResult,
}

/// Layout and kept row indices for the pages in `result.selected`.
pub fn surviving_layout(
    layout: &SequenceLayout,
    result: &RetrievalResult,
    reindex_positions: bool,
) -> Result<(SequenceLayout, Vec<usize>)> {
    let n = layout.n_pages();
    if let Some(&bad) = result.selected.iter().find(|&&p| p >= n) {
        return Err(Error::Invalid(format!("selected page {bad} outside 0..{n}")));
    }
    if result.selected.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("selected pages must be strictly ascending".into()));
    }
    let mut indices = Vec::new();
    let mut pages = Vec::with_capacity(result.selected.len());
    for &p in &result.selected {
        let span = &layout.pages[p];
        let start = indices.len();
        indices.extend(span.span.clone());
        pages.push(PageSpan { page_id: span.page_id, span: start..indices.len() });
    }
    let q_start = indices.len();
    indices.extend(layout.query.clone());
    let a_start = indices.len();
    indices.extend(layout.answer.clone());
    let positions = if reindex_positions {
        (0..indices.len()).collect()
    } else {
        indices.iter().map(|&i| layout.positions[i]).collect()
    };
    let surviving = SequenceLayout {
        pages,
        query: q_start..a_start,
        answer: a_start..indices.len(),
        positions,
    };
    surviving.validate()?;
    Ok((surviving, indices))
}

/// Off-tape pruning: copies the retained rows of `h` unchanged.
pub fn prune_hidden(
    h: &Matrix,
    layout: &SequenceLayout,
    result: &RetrievalResult,
    reindex_positions: bool,
) -> Result<(Matrix, PruneRecord)> {
    if h.rows() != layout.len() {
        return Err(Error::shape("prune_hidden", format!("{} rows for a layout of {}", h.rows(), layout.len())));
    }
    let (surviving, indices) = surviving_layout(layout, result, reindex_positions)?;
    let pruned = h.gather_rows(&indices);
    let record = PruneRecord {
        original: layout.clone(),
        surviving,
        surviving_indices: indices,
        retrieval: result.clone(),
    };
    Ok((pruned, record))
}

/// Pruning as a row gather on the tape, so gradients reach retained rows.
pub fn prune_on_tape(
    tape: &mut Tape,
    h: Var,
    layout: &SequenceLayout,
    result: &RetrievalResult,
    reindex_positions: bool,
) -> Result<(Var, PruneRecord)> {
    if tape.value(h).rows() != layout.len() {
        return Err(Error::shape(
            "prune_on_tape",
            format!("{} rows for a layout of {}", tape.value(h).rows(), layout.len()),
        ));
    }
    let (surviving, indices) = surviving_layout(layout, result, reindex_positions)?;
    let pruned = tape.gather_rows(h, indices.clone())?;
    let record = PruneRecord {
        original: layout.clone(),
        surviving,
        surviving_indices: indices,
        retrieval: result.clone(),
    };
    Ok((pruned, record))
}
