use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::PlId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// One encoded example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub pl: PlId,
    pub split: Split,
    pub tokens: Vec<u32>,
}

/// Cuts `ids` into consecutive non-overlapping chunks of at most
/// `max_len` ids (`ceil(len / max_len)` chunks).
pub fn window(ids: &[u32], max_len: usize) -> Vec<Vec<u32>> {
    assert!(max_len > 0, "window length must be positive");
    ids.chunks(max_len).map(<[u32]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        let ids: Vec<u32> = (0..10).collect();
        assert_eq!(window(&ids, 4).len(), 3); // ceil(10/4)
        assert_eq!(window(&ids, 5).len(), 2);
        assert_eq!(window(&ids, 10).len(), 1);
        assert_eq!(window(&ids, 4).concat(), ids);
        assert!(window(&ids, 4).iter().all(|w| w.len() <= 4));
    }
}
