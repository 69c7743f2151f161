//! Pair-wise and sequence-wise views of a cohort.

use super::{Cohort, DataError, Split, SubjectRecord};

/// Consecutive visits `visit` and `visit + 1` of `subject` (an index into
/// [`Cohort::subjects`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRef {
    pub subject: usize,
    pub visit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<PairRef>,
    pub require_grade_change: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    /// Indices of subjects with at least [`SequenceDataset::MIN_VISITS`] visits.
    pub subjects: Vec<usize>,
}

/// Every consecutive-visit pair; with `require_grade_change`, only
/// subjects whose grade changes at least once contribute.
pub fn make_pair_dataset(cohort: &Cohort, require_grade_change: bool) -> Result<PairDataset, DataError> {
    let pairs: Vec<PairRef> = cohort
        .subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| !require_grade_change || s.has_grade_change())
        .flat_map(|(i, s)| (0..s.visits.len().saturating_sub(1)).map(move |v| PairRef { subject: i, visit: v }))
        .collect();
    if pairs.is_empty() {
        return Err(DataError::Empty("no consecutive-visit pairs".into()));
    }
    Ok(PairDataset { pairs, require_grade_change })
}

pub fn make_sequence_dataset(cohort: &Cohort) -> Result<SequenceDataset, DataError> {
    let subjects: Vec<usize> = cohort.subjects.iter().enumerate().filter(|(_, s)| s.visits.len() >= SequenceDataset::MIN_VISITS).map(|(i, _)| i).collect();
    if subjects.is_empty() {
        return Err(DataError::Empty(format!("no subject has {} visits", SequenceDataset::MIN_VISITS)));
    }
    Ok(SequenceDataset { subjects })
}

fn guard(s: &SubjectRecord, split: Split) -> Result<(), DataError> {
    if s.split != split {
        return Err(DataError::Leakage { subject: s.id, expected: split, found: s.split });
    }
    Ok(())
}

impl PairDataset {
    pub fn in_split(&self, cohort: &Cohort, split: Split) -> Vec<PairRef> {
        self.pairs.iter().copied().filter(|p| cohort.subjects[p.subject].split == split).collect()
    }

    /// Fails if any pair belongs to a subject outside `split`.
    pub fn check_split(cohort: &Cohort, pairs: &[PairRef], split: Split) -> Result<(), DataError> {
        pairs.iter().try_for_each(|p| guard(&cohort.subjects[p.subject], split))
    }
}

impl SequenceDataset {
    pub const MIN_VISITS: usize = 4;

    pub fn in_split(&self, cohort: &Cohort, split: Split) -> Vec<usize> {
        self.subjects.iter().copied().filter(|&i| cohort.subjects[i].split == split).collect()
    }

    pub fn check_split(cohort: &Cohort, subjects: &[usize], split: Split) -> Result<(), DataError> {
        subjects.iter().try_for_each(|&i| guard(&cohort.subjects[i], split))
    }
}
