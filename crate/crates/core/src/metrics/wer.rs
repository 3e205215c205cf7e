//! Intelligibility proxy: decode codebook 0 back to text and score the
//! token edit distance.

use crate::seqdata::{decode_content_code, TokenGrid, FRAMES_PER_TOKEN};

/// How a window of frames is turned into one text token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteRule {
    /// A token wins if more than half of the window's frames decode to it.
    Majority,
    /// The first frame of the window that decodes at all decides.
    FirstDecodable,
}

/// Decode a grid into text tokens, one per window of `FRAMES_PER_TOKEN`
/// frames; `None` marks a window without a decision. A trailing partial
/// window is decoded from the frames it has.
pub fn decode_text(grid: &TokenGrid, rule: VoteRule) -> Vec<Option<u32>> {
    let frames = grid.frames();
    (0..frames.div_ceil(FRAMES_PER_TOKEN))
        .map(|w| {
            let lo = w * FRAMES_PER_TOKEN;
            let hi = (lo + FRAMES_PER_TOKEN).min(frames);
            let votes: Vec<Option<u32>> = (lo..hi)
                .map(|t| decode_content_code(grid.get(t, 0), (t - lo) as u32))
                .collect();
            match rule {
                VoteRule::FirstDecodable => votes.iter().copied().flatten().next(),
                VoteRule::Majority => votes.iter().copied().flatten().find(|&tok| {
                    2 * votes.iter().filter(|&&v| v == Some(tok)).count() > votes.len()
                }),
            }
        })
        .collect()
}

/// Levenshtein distance between a decoded sequence and the reference text.
/// Undecided positions never match.
pub fn edit_distance(hyp: &[Option<u32>], reference: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(*h != Some(*r));
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Token edit distance between the decoded grid and `text`, divided by
/// the text length.
pub fn wer_with(grid: &TokenGrid, text: &[u32], rule: VoteRule) -> f64 {
    if text.is_empty() {
        return 0.0;
    }
    edit_distance(&decode_text(grid, rule), text) as f64 / text.len() as f64
}

pub fn wer_proxy(grid: &TokenGrid, text: &[u32]) -> f64 {
    wer_with(grid, text, VoteRule::Majority)
}
