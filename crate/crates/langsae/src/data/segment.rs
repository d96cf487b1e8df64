//! Length-based segmentation of token sequences into 250-500 token spans.
//! Operates on lengths only; callers bring their own tokenizer.

use serde::{Deserialize, Serialize};

/// What to do with the tail of a sequence longer than 1000 tokens after
/// cutting full 500-token blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuffixPolicy {
    /// Keep a trailing slice of 250-499 tokens as a final shorter segment;
    /// only tails under 250 tokens are discarded. Default.
    KeepAtLeast250,
    /// Keep full 500-token blocks only; any partial tail is discarded.
    FullBlocksOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    pub input_length: usize,
    /// Half-open (start, end) token spans, consecutive from 0.
    pub segments: Vec<(usize, usize)>,
    pub discarded_suffix: usize,
}

/// Segments a sequence of `l` tokens:
/// under 250 the whole sequence is discarded; 250-500 stays whole; 501-1000
/// becomes two 250-token segments with the rest discarded; above 1000 it is
/// cut into consecutive 500-token blocks with the tail handled per
/// [`SuffixPolicy`].
pub fn segment_lengths(l: usize) -> SegmentationPlan {
    segment_lengths_with(l, SuffixPolicy::KeepAtLeast250)
}

pub fn segment_lengths_with(l: usize, policy: SuffixPolicy) -> SegmentationPlan {
    let mut segments = Vec::new();
    let discarded_suffix;
    if l < 250 {
        discarded_suffix = l;
    } else if l <= 500 {
        segments.push((0, l));
        discarded_suffix = 0;
    } else if l <= 1000 {
        segments.push((0, 250));
        segments.push((250, 500));
        discarded_suffix = l - 500;
    } else {
        let blocks = l / 500;
        for b in 0..blocks {
            segments.push((b * 500, (b + 1) * 500));
        }
        let tail = l - blocks * 500;
        if tail >= 250 && policy == SuffixPolicy::KeepAtLeast250 {
            segments.push((blocks * 500, l));
            discarded_suffix = 0;
        } else {
            discarded_suffix = tail;
        }
    }
    SegmentationPlan { input_length: l, segments, discarded_suffix }
}
