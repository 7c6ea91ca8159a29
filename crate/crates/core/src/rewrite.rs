//! Offset-based source editing. Edits refer to offsets in the original
//! text and are applied in one pass.

use crate::ast::Span;

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("edit at {0} lies outside the source")]
    OutOfRange(usize),
    #[error("overlapping replacements at {0}..{1}")]
    Overlap(usize, usize),
}

#[derive(Debug, Clone)]
struct Insert {
    pos: usize,
    /// Sort key among inserts at the same offset.
    rank: (u8, i64, i64),
    text: String,
}

#[derive(Debug, Clone, Default)]
pub struct Rewriter {
    inserts: Vec<Insert>,
    replaces: Vec<(Span, String)>,
    seq: i64,
}

impl Rewriter {
    pub fn new() -> Self {
        Self::default()
    }

    fn next_seq(&mut self) -> i64 {
        self.seq += 1;
        self.seq
    }

    /// Plain insertion; inserts at one offset keep their call order and
    /// come after the closing halves of wraps ending there.
    pub fn insert(&mut self, pos: usize, text: impl Into<String>) {
        let s = self.next_seq();
        self.inserts.push(Insert { pos, rank: (1, 0, s), text: text.into() });
    }

    /// Surrounds `span` with `open` and `close`. Wraps nest properly: the
    /// longer span is outside, and among equal spans the earlier wrap is.
    pub fn wrap(&mut self, span: Span, open: impl Into<String>, close: impl Into<String>) {
        let s = self.next_seq();
        let len = (span.end - span.start) as i64;
        self.inserts.push(Insert { pos: span.start, rank: (2, -len, s), text: open.into() });
        self.inserts.push(Insert { pos: span.end, rank: (0, len, -s), text: close.into() });
    }

    pub fn replace(&mut self, span: Span, text: impl Into<String>) {
        self.replaces.push((span, text.into()));
    }

    pub fn is_empty(&self) -> bool {
        self.inserts.is_empty() && self.replaces.is_empty()
    }

    pub fn apply(&self, source: &str) -> Result<String, RewriteError> {
        let mut reps = self.replaces.clone();
        reps.sort_by_key(|(s, _)| (s.start, s.end));
        for w in reps.windows(2) {
            if w[1].0.start < w[0].0.end {
                return Err(RewriteError::Overlap(w[1].0.start, w[0].0.end));
            }
        }
        for (s, _) in &reps {
            if s.end > source.len() || s.start > s.end || !source.is_char_boundary(s.start) || !source.is_char_boundary(s.end) {
                return Err(RewriteError::OutOfRange(s.end));
            }
        }
        let mut ins = self.inserts.clone();
        for i in &ins {
            if i.pos > source.len() || !source.is_char_boundary(i.pos) {
                return Err(RewriteError::OutOfRange(i.pos));
            }
        }
        ins.sort_by_key(|i| (i.pos, i.rank));

        let mut out = String::with_capacity(source.len() + 64 * ins.len());
        let mut cursor = 0usize;
        let mut ii = 0usize;
        let mut ri = 0usize;
        loop {
            let next_ins = ins.get(ii).map(|i| i.pos);
            let next_rep = reps.get(ri).map(|(s, _)| s.start);
            match (next_ins, next_rep) {
                (None, None) => break,
                (Some(p), r) if r.is_none_or(|r| p <= r) => {
                    // Inserts strictly inside a replaced range are dropped.
                    if p >= cursor {
                        out.push_str(&source[cursor..p]);
                        cursor = p;
                        out.push_str(&ins[ii].text);
                    }
                    ii += 1;
                }
                (_, Some(_)) => {
                    let (s, t) = &reps[ri];
                    out.push_str(&source[cursor..s.start]);
                    out.push_str(t);
                    cursor = s.end;
                    ri += 1;
                }
                (Some(_), None) => unreachable!(),
            }
        }
        out.push_str(&source[cursor..]);
        Ok(out)
    }
}
