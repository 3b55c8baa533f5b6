use std::iter::Sum;

use serde::Serialize;
use similar::{capture_diff_slices, Algorithm, DiffOp};

/// Word-level changes from an initial to a corrected caption.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EditStats {
    pub inserted: usize,
    pub deleted: usize,
    pub length_delta: i64,
}

impl Sum for EditStats {
    fn sum<I: Iterator<Item = EditStats>>(iter: I) -> Self {
        iter.fold(EditStats::default(), |a, b| EditStats {
            inserted: a.inserted + b.inserted,
            deleted: a.deleted + b.deleted,
            length_delta: a.length_delta + b.length_delta,
        })
    }
}

/// Counts whitespace tokens off a longest common subsequence of the two
/// captions: `inserted` from `y2`, `deleted` from `y1`.
pub fn edit_stats(y1: &str, y2: &str) -> EditStats {
    let old: Vec<&str> = y1.split_whitespace().collect();
    let new: Vec<&str> = y2.split_whitespace().collect();
    let (mut inserted, mut deleted) = (0, 0);
    for op in capture_diff_slices(Algorithm::Myers, &old, &new) {
        match op {
            DiffOp::Equal { .. } => {}
            DiffOp::Delete { old_len, .. } => deleted += old_len,
            DiffOp::Insert { new_len, .. } => inserted += new_len,
            DiffOp::Replace { old_len, new_len, .. } => {
                deleted += old_len;
                inserted += new_len;
            }
        }
    }
    EditStats {
        inserted,
        deleted,
        length_delta: new.len() as i64 - old.len() as i64,
    }
}
