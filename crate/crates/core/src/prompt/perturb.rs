use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::PromptError;
use crate::domain::{PerturbationKind, PerturbationSpec};

/// Swaps the characters at `pos` and `pos + 1`.
pub(crate) fn transpose_at(word: &str, pos: usize) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    chars.swap(pos, pos + 1);
    chars.into_iter().collect()
}

fn rng_for(text: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// First position at or after `start` (cyclically) whose characters differ
/// from their right neighbour.
fn editable_position(chars: &[char], start: usize) -> Option<usize> {
    let slots = chars.len() - 1;
    (0..slots)
        .map(|off| (start + off) % slots)
        .find(|&p| chars[p] != chars[p + 1])
}

/// Injects adjacent-transposition typos into the identity span of `text`.
///
/// `span` is a byte range on character boundaries. `ceil(rate × words)`
/// words of the span are edited, each with one transposition at a
/// seed-derived position. Bytes outside the span are never touched, and the
/// span keeps its byte length.
pub fn perturb_typo(text: &str, span: Range<usize>, spec: &PerturbationSpec) -> Result<String, PromptError> {
    let rate = match (spec.kind, spec.rate) {
        (PerturbationKind::Typo, Some(r)) if r > 0.0 && r <= 1.0 => r,
        _ => return Err(PromptError::InvalidPerturbation("typo needs a rate in (0, 1]".into())),
    };
    if span.end > text.len() || !text.is_char_boundary(span.start) || !text.is_char_boundary(span.end) {
        return Err(PromptError::Span("span outside the prompt".into()));
    }
    let identity = &text[span.clone()];
    if identity.chars().count() < 2 {
        return Err(PromptError::Span("span shorter than 2 characters".into()));
    }

    // (byte offset within the span, word)
    let mut words: Vec<(usize, &str)> = Vec::new();
    let mut start = None;
    for (i, c) in identity.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                words.push((s, &identity[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        words.push((s, &identity[s..]));
    }

    let mut eligible: Vec<usize> = (0..words.len())
        .filter(|&i| {
            let chars: Vec<char> = words[i].1.chars().collect();
            chars.len() >= 2 && chars.windows(2).any(|w| w[0] != w[1])
        })
        .collect();
    if eligible.is_empty() {
        return Err(PromptError::Span("no word in the span admits a transposition".into()));
    }
    let wanted = ((rate * words.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let take = wanted.min(eligible.len());

    let mut rng = rng_for(text, spec.seed);
    for i in 0..take {
        let j = rng.random_range(i..eligible.len());
        eligible.swap(i, j);
    }
    let mut chosen = eligible[..take].to_vec();
    chosen.sort_unstable();

    let mut edited = identity.to_owned();
    for w in chosen {
        let (offset, word) = words[w];
        let chars: Vec<char> = word.chars().collect();
        let start = (rng.next_u64() % (chars.len() as u64 - 1)) as usize;
        let pos = editable_position(&chars, start).expect("eligible word has an editable pair");
        let swapped = transpose_at(word, pos);
        edited.replace_range(offset..offset + word.len(), &swapped);
    }

    let mut out = String::with_capacity(text.len());
    out.push_str(&text[..span.start]);
    out.push_str(&edited);
    out.push_str(&text[span.end..]);
    Ok(out)
}
