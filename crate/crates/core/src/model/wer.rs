use crate::error::{Error, Result};

/// Edit operations of one minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerReport {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

/// Unit-cost Levenshtein alignment. Among equal-cost alignments the
/// backtrace prefers substitutions, then deletions.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                if !same {
                    c.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Corpus-level error rate: total edits over total reference length.
pub fn word_error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid(
            "word_error_rate",
            format!("{} references but {} hypotheses", refs.len(), hyps.len()),
        ));
    }
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::invalid("word_error_rate", "reference corpus is empty"));
    }
    let mut total = EditCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        let c = edit_counts(r, h);
        total.substitutions += c.substitutions;
        total.insertions += c.insertions;
        total.deletions += c.deletions;
    }
    Ok(WerReport {
        wer: total.errors() as f64 / ref_len as f64,
        substitutions: total.substitutions,
        insertions: total.insertions,
        deletions: total.deletions,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_cases() {
        let r = word_error_rate(&[words("a b c")], &[words("a b c")]).unwrap();
        assert_eq!(r.wer, 0.0);
        let r = word_error_rate(&[words("a b c")], &[words("a x c")]).unwrap();
        assert_eq!((r.wer, r.substitutions), (1.0 / 3.0, 1));
        let r = word_error_rate(&[words("a b")], &[words("a b c")]).unwrap();
        assert_eq!((r.wer, r.insertions), (0.5, 1));
        let r = word_error_rate(&[words("a b c")], &[words("b")]).unwrap();
        assert_eq!(r.deletions, 2);
    }

    #[test]
    fn empty_reference_rejected() {
        let empty: Vec<Vec<u8>> = vec![vec![]];
        assert!(word_error_rate(&empty, &empty).is_err());
    }
}
