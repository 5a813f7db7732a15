/// One user's sequence after truncation, with the two held-out targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitUser {
    /// Position of the user in the input list.
    pub user: usize,
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

impl SplitUser {
    /// Items visible when predicting the test target.
    pub fn test_input(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.push(self.val);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub users: Vec<SplitUser>,
    /// Users skipped for having fewer than three interactions.
    pub dropped: usize,
    pub max_seq_len: usize,
}

/// Keeps the most recent `max_seq_len + 3` items of every sequence, then
/// holds out the last item for test and the second-to-last for validation.
pub fn split(sequences: &[Vec<usize>], max_seq_len: usize) -> Split {
    let keep = max_seq_len + 3;
    let mut out = Split { users: Vec::new(), dropped: 0, max_seq_len };
    for (user, seq) in sequences.iter().enumerate() {
        if seq.len() < 3 {
            out.dropped += 1;
            continue;
        }
        let s = &seq[seq.len().saturating_sub(keep)..];
        let n = s.len();
        out.users.push(SplitUser { user, train: s[..n - 2].to_vec(), val: s[n - 2], test: s[n - 1] });
    }
    out
}
