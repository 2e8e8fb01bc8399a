use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSpan {
    /// Index of the page in the original document.
    pub page_id: usize,
    pub span: Range<usize>,
}

/// Maps flat row indices to page spans, the query span and the answer span,
/// and carries the rotary position of every row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub pages: Vec<PageSpan>,
    pub query: Range<usize>,
    pub answer: Range<usize>,
    pub positions: Vec<usize>,
}

impl SequenceLayout {
    /// Layout of `n_pages` pages of `tokens_per_page` rows followed by the
    /// query and the answer, with positions equal to row indices.
    pub fn contiguous(n_pages: usize, tokens_per_page: usize, query_len: usize, answer_len: usize) -> Self {
        let pages = (0..n_pages)
            .map(|p| PageSpan { page_id: p, span: p * tokens_per_page..(p + 1) * tokens_per_page })
            .collect();
        let q0 = n_pages * tokens_per_page;
        let a0 = q0 + query_len;
        let total = a0 + answer_len;
        SequenceLayout { pages, query: q0..a0, answer: a0..total, positions: (0..total).collect() }
    }

    pub fn len(&self) -> usize {
        self.answer.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn page_ids(&self) -> Vec<usize> {
        self.pages.iter().map(|p| p.page_id).collect()
    }

    /// Checks that spans are ordered, contiguous and cover every row.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for p in &self.pages {
            if p.span.start != cursor || p.span.end <= p.span.start {
                return Err(Error::Invalid(format!(
                    "page {} span {:?} does not continue at row {cursor}",
                    p.page_id, p.span
                )));
            }
            cursor = p.span.end;
        }
        if self.query.start != cursor || self.answer.start != self.query.end {
            return Err(Error::Invalid("query and answer spans must follow the pages".into()));
        }
        if self.answer.end < self.answer.start {
            return Err(Error::Invalid("answer span is reversed".into()));
        }
        if self.positions.len() != self.len() {
            return Err(Error::Invalid(format!(
                "{} positions for {} rows",
                self.positions.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// The same layout without its answer span.
    pub fn without_answer(&self) -> SequenceLayout {
        let mut l = self.clone();
        l.answer = l.query.end..l.query.end;
        l.positions.truncate(l.query.end);
        l
    }
}
