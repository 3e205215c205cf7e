use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    Split, TokenGrid, CONTENT_CODES, FRAMES_PER_TOKEN, GROUP_WIDTH, N_Q, REF_FRAMES,
    SPEAKER_GROUPS, SPEAKER_UNIVERSE, TEXT_VOCAB,
};
use crate::error::{Error, Result};
use crate::rng::substream;

/// One task instance: text, a reference clip of the speaker, and the
/// ground-truth target grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: Vec<u32>,
    pub ref_grid: TokenGrid,
    pub target_grid: TokenGrid,
    pub speaker_id: u32,
    pub split: Split,
}

/// The two code groups of `speaker`, in lexicographic order of pairs:
/// speaker 0 is (0, 1), speaker 1 is (0, 2), and so on.
pub fn speaker_groups(speaker: u32) -> (u32, u32) {
    let mut s = speaker;
    for a in 0..SPEAKER_GROUPS {
        let row = SPEAKER_GROUPS - 1 - a;
        if s < row {
            return (a, a + 1 + s);
        }
        s -= row;
    }
    panic!("speaker {speaker} outside [0, {SPEAKER_UNIVERSE})")
}

/// The clean code for codebook `j` of the frame at `offset` within the
/// window emitted by `token`.
///
/// Codebook 0 depends only on (token, offset), so content can be decoded
/// without knowing the speaker. Codebook 1 alternates between the
/// speaker's two groups frame by frame (even offsets use the first group),
/// so every utterance shows both; the code within the group follows the
/// token.
pub fn clean_code(token: u32, speaker: u32, offset: u32, j: usize) -> u32 {
    match j {
        0 => (5 * token + 37 * offset + 11) % CONTENT_CODES,
        _ => {
            let k = j as u32;
            let (a, b) = speaker_groups(speaker);
            let group = if (offset + k - 1) % 2 == 0 { a } else { b };
            GROUP_WIDTH * group + (3 * token + offset) % GROUP_WIDTH
        }
    }
}

pub fn clean_frame(token: u32, speaker: u32, offset: u32) -> [u32; N_Q] {
    let mut f = [0; N_Q];
    for (j, c) in f.iter_mut().enumerate() {
        *c = clean_code(token, speaker, offset, j);
    }
    f
}

/// Noise-free grid for `text` spoken by `speaker`.
pub fn clean_grid(text: &[u32], speaker: u32) -> TokenGrid {
    let mut codes = Vec::with_capacity(text.len() * FRAMES_PER_TOKEN * N_Q);
    for &tok in text {
        for off in 0..FRAMES_PER_TOKEN as u32 {
            codes.extend_from_slice(&clean_frame(tok, speaker, off));
        }
    }
    TokenGrid::new(N_Q, codes).expect("non-empty text")
}

/// Inverse of codebook 0: the token whose clean frame at `offset` carries
/// `code`, if any.
pub fn decode_content_code(code: u32, offset: u32) -> Option<u32> {
    static TABLE: OnceLock<Vec<Vec<Option<u32>>>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..FRAMES_PER_TOKEN as u32)
            .map(|off| {
                let mut inv = vec![None; CONTENT_CODES as usize + 1];
                for tok in 0..TEXT_VOCAB as u32 {
                    inv[clean_code(tok, 0, off, 0) as usize] = Some(tok);
                }
                inv
            })
            .collect()
    });
    table
        .get(offset as usize)
        .and_then(|t| t.get(code as usize).copied().flatten())
}

/// Attested frames and frame-to-frame transitions of the clean generator,
/// over every speaker in the universe.
pub struct Grammar {
    frames: HashSet<u32>,
    transitions: HashSet<u64>,
}

fn frame_key(row: &[u32]) -> Option<u32> {
    (row.len() == N_Q).then(|| row[0] * 64 + row[1])
}

impl Grammar {
    pub fn get() -> &'static Grammar {
        static G: OnceLock<Grammar> = OnceLock::new();
        G.get_or_init(|| {
            let mut frames = HashSet::new();
            let mut transitions = HashSet::new();
            let last = FRAMES_PER_TOKEN as u32 - 1;
            for spk in 0..SPEAKER_UNIVERSE {
                for tok in 0..TEXT_VOCAB as u32 {
                    for off in 0..=last {
                        let a = frame_key(&clean_frame(tok, spk, off)).unwrap();
                        frames.insert(a);
                        if off < last {
                            let b = frame_key(&clean_frame(tok, spk, off + 1)).unwrap();
                            transitions.insert(((a as u64) << 32) | b as u64);
                        }
                    }
                    let a = frame_key(&clean_frame(tok, spk, last)).unwrap();
                    for next in 0..TEXT_VOCAB as u32 {
                        let b = frame_key(&clean_frame(next, spk, 0)).unwrap();
                        transitions.insert(((a as u64) << 32) | b as u64);
                    }
                }
            }
            Grammar {
                frames,
                transitions,
            }
        })
    }
}

pub fn is_attested_frame(row: &[u32]) -> bool {
    frame_key(row).is_some_and(|k| Grammar::get().frames.contains(&k))
}

pub fn is_attested_transition(prev: &[u32], next: &[u32]) -> bool {
    match (frame_key(prev), frame_key(next)) {
        (Some(a), Some(b)) => Grammar::get()
            .transitions
            .contains(&(((a as u64) << 32) | b as u64)),
        _ => false,
    }
}

fn corrupt(grid: &mut TokenGrid, p_noise: f64, rng: &mut crate::rng::Rng) {
    if p_noise <= 0.0 {
        return;
    }
    for t in 0..grid.frames() {
        for j in 0..grid.n_q() {
            if rng.random::<f64>() < p_noise {
                grid.set(t, j, rng.random_range(0..CONTENT_CODES));
            }
        }
    }
}

fn check_inputs(text: &[u32], speaker: u32) -> Result<()> {
    if text.is_empty() {
        return Err(Error::InputDomain("text must be non-empty".into()));
    }
    if let Some(t) = text.iter().find(|&&t| t as usize >= TEXT_VOCAB) {
        return Err(Error::InputDomain(format!(
            "text token {t} outside [0, {TEXT_VOCAB})"
        )));
    }
    if speaker >= SPEAKER_UNIVERSE {
        return Err(Error::InputDomain(format!(
            "speaker {speaker} outside [0, {SPEAKER_UNIVERSE})"
        )));
    }
    Ok(())
}

/// Synthesize one example. Deterministic in `(text, speaker, noise_seed)`.
///
/// The reference clip is spoken from a held-out snippet of
/// `REF_FRAMES / FRAMES_PER_TOKEN` tokens that share nothing with `text`.
pub fn synth_example(text: &[u32], speaker: u32, noise_seed: u64, p_noise: f64) -> Result<Example> {
    check_inputs(text, speaker)?;
    if !(0.0..=1.0).contains(&p_noise) {
        return Err(Error::InputDomain(format!("p_noise {p_noise} outside [0, 1]")));
    }
    let mut ref_rng = substream(noise_seed, "ref-text", speaker as u64);
    let pool: Vec<u32> = (0..TEXT_VOCAB as u32).filter(|t| !text.contains(t)).collect();
    let pool = if pool.is_empty() {
        (0..TEXT_VOCAB as u32).collect()
    } else {
        pool
    };
    let snippet: Vec<u32> = (0..REF_FRAMES.div_ceil(FRAMES_PER_TOKEN))
        .map(|_| pool[ref_rng.random_range(0..pool.len())])
        .collect();
    let mut ref_grid = clean_grid(&snippet, speaker);
    let mut target_grid = clean_grid(text, speaker);
    if ref_grid.frames() > REF_FRAMES {
        ref_grid = TokenGrid::new(N_Q, ref_grid.codes()[..REF_FRAMES * N_Q].to_vec())?;
    }
    corrupt(&mut target_grid, p_noise, &mut substream(noise_seed, "noise-target", 0));
    corrupt(&mut ref_grid, p_noise, &mut substream(noise_seed, "noise-ref", 0));
    Ok(Example {
        id: format!("spk{speaker}-seed{noise_seed}"),
        text: text.to_vec(),
        ref_grid,
        target_grid,
        speaker_id: speaker,
        split: Split::Train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_deterministic_and_clean() {
        let a = synth_example(&[3, 7], 0, 42, 0.0).unwrap();
        let b = synth_example(&[3, 7], 0, 42, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.target_grid, clean_grid(&[3, 7], 0));
        assert_eq!(a.ref_grid.frames(), REF_FRAMES);
        assert_eq!(a.target_grid.frames(), 2 * FRAMES_PER_TOKEN);
    }

    #[test]
    fn speakers_change_the_target() {
        // Enumerated beforehand: speakers 0 and 14 have disjoint groups
        // ((0, 1) and (4, 5)), so for text [3, 7] every codebook-1 entry
        // differs.
        let a = synth_example(&[3, 7], 0, 1, 0.0).unwrap();
        let b = synth_example(&[3, 7], 14, 1, 0.0).unwrap();
        let diff = a
            .target_grid
            .codes()
            .iter()
            .zip(b.target_grid.codes())
            .filter(|(x, y)| x != y)
            .count();
        assert_eq!(diff, 4);
        for t in 0..4 {
            assert_eq!(a.target_grid.get(t, 0), b.target_grid.get(t, 0));
        }
    }

    #[test]
    fn full_noise_is_seeded() {
        let a = synth_example(&[1, 2, 3], 2, 9, 1.0).unwrap();
        let b = synth_example(&[1, 2, 3], 2, 9, 1.0).unwrap();
        let c = synth_example(&[1, 2, 3], 2, 10, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.target_grid, c.target_grid);
        assert_ne!(a.target_grid, clean_grid(&[1, 2, 3], 2));
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        assert!(matches!(
            synth_example(&[40], 0, 0, 0.0),
            Err(Error::InputDomain(_))
        ));
        assert!(matches!(
            synth_example(&[1], SPEAKER_UNIVERSE, 0, 0.0),
            Err(Error::InputDomain(_))
        ));
        assert!(synth_example(&[], 0, 0, 0.0).is_err());
    }

    #[test]
    fn reference_snippet_is_disjoint_from_text() {
        for seed in 0..50 {
            let text = [1, 2, 3, 4, 5];
            let ex = synth_example(&text, 3, seed, 0.0).unwrap();
            for t in 0..ex.ref_grid.frames() {
                let tok = decode_content_code(ex.ref_grid.get(t, 0), (t % FRAMES_PER_TOKEN) as u32)
                    .unwrap();
                assert!(!text.contains(&tok));
            }
        }
    }

    #[test]
    fn content_code_inverts() {
        for tok in 0..TEXT_VOCAB as u32 {
            for off in 0..FRAMES_PER_TOKEN as u32 {
                assert_eq!(decode_content_code(clean_code(tok, 5, off, 0), off), Some(tok));
            }
        }
    }

    #[test]
    fn clean_grids_follow_the_grammar() {
        let g = clean_grid(&[4, 9, 9, 30], 7);
        for t in 0..g.frames() {
            assert!(is_attested_frame(g.row(t)));
        }
        for t in 1..g.frames() {
            assert!(is_attested_transition(g.row(t - 1), g.row(t)));
        }
        // Second group 1 followed by first group 4: no speaker is (4, 1).
        let a = clean_frame(4, 0, 1);
        let b = clean_frame(3, 14, 0);
        assert!(!is_attested_transition(&a, &b));
    }

    #[test]
    fn speakers_enumerate_all_group_pairs() {
        let mut seen = HashSet::new();
        for spk in 0..SPEAKER_UNIVERSE {
            let (a, b) = speaker_groups(spk);
            assert!(a < b && b < SPEAKER_GROUPS);
            assert!(seen.insert((a, b)));
        }
        assert_eq!(speaker_groups(0), (0, 1));
        assert_eq!(speaker_groups(SPEAKER_UNIVERSE - 1), (SPEAKER_GROUPS - 2, SPEAKER_GROUPS - 1));
    }
}
