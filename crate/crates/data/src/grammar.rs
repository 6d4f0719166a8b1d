//! Report realization and its exact inverse.
//!
//! One clause per entity, "<entity> seen in <position> .", ordered by
//! position; clauses after the first are prefixed with a connective chosen
//! deterministically from the scene seed. An empty scene realizes the fixed
//! sentence "no findings .".

use strata_tensor::rng::derive_seed;

use crate::scene::SceneSpec;
use crate::vocab::{Vocab, BOS, CONNECTIVES, EOS};
use crate::DataError;

/// Bumps whenever realization or parsing changes incompatibly.
pub const GRAMMAR_VERSION: &str = "1";

/// Vocabulary slots that must exist before filler words.
pub fn reserved_words(num_entities: usize, num_positions: usize) -> usize {
    // 3 specials + 5 grammar words + connectives.
    3 + 5 + CONNECTIVES.len() + num_entities + num_positions
}

/// Token count of the longest realizable report, markers included.
pub fn max_report_len(max_entities: usize) -> usize {
    let clauses = 5 + 6 * max_entities.saturating_sub(1).max(0);
    (2 + clauses).max(2 + 3)
}

/// Scene to token sequence, including begin/end markers.
pub fn realize_report(scene: &SceneSpec, vocab: &Vocab) -> Vec<u32> {
    let mut out = vec![BOS];
    if scene.entities.is_empty() {
        out.push(vocab.grammar_token("no"));
        out.push(vocab.grammar_token("findings"));
        out.push(vocab.grammar_token("."));
    } else {
        debug_assert!(scene.entities.windows(2).all(|w| w[0].1 < w[1].1));
        for (j, &(e, p)) in scene.entities.iter().enumerate() {
            if j > 0 {
                let k = derive_seed(scene.seed, &format!("connective-{}", j))
                    % CONNECTIVES.len() as u64;
                out.push(vocab.connective_token(k as usize));
            }
            out.push(vocab.entity_token(e));
            out.push(vocab.grammar_token("seen"));
            out.push(vocab.grammar_token("in"));
            out.push(vocab.position_token(p));
            out.push(vocab.grammar_token("."));
        }
    }
    out.push(EOS);
    out
}

fn parse_err(msg: impl Into<String>) -> DataError {
    DataError::Parse(msg.into())
}

/// Exact inverse of `realize_report`: recovers (entity, position) pairs in
/// clause order. Rejects any sequence the realizer cannot produce, except
/// that connective choice is not checked against the seed (any connective is
/// accepted where one is required).
pub fn parse_report(tokens: &[u32], vocab: &Vocab) -> Result<Vec<(usize, usize)>, DataError> {
    if tokens.first() != Some(&BOS) || tokens.last() != Some(&EOS) {
        return Err(parse_err("report must be delimited by begin/end markers"));
    }
    let body = &tokens[1..tokens.len() - 1];
    let none = [
        vocab.grammar_token("no"),
        vocab.grammar_token("findings"),
        vocab.grammar_token("."),
    ];
    if body == none {
        return Ok(Vec::new());
    }
    let (seen, in_, stop) = (
        vocab.grammar_token("seen"),
        vocab.grammar_token("in"),
        vocab.grammar_token("."),
    );
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < body.len() {
        if pairs.is_empty() {
            if vocab.is_connective(body[i]) {
                return Err(parse_err("connective before the first clause"));
            }
        } else {
            if !vocab.is_connective(body[i]) {
                return Err(parse_err(format!(
                    "expected a connective at token {}, got {:?}",
                    i,
                    vocab.word(body[i]).unwrap_or("<?>")
                )));
            }
            i += 1;
        }
        if i + 5 > body.len() {
            return Err(parse_err("truncated clause"));
        }
        let e = vocab
            .entity_of(body[i])
            .ok_or_else(|| parse_err(format!("token {} is not an entity word", i)))?;
        if body[i + 1] != seen || body[i + 2] != in_ {
            return Err(parse_err(format!("malformed clause at token {}", i)));
        }
        let p = vocab
            .position_of(body[i + 3])
            .ok_or_else(|| parse_err(format!("token {} is not a position word", i + 3)))?;
        if body[i + 4] != stop {
            return Err(parse_err(format!("clause at token {} lacks a terminator", i)));
        }
        pairs.push((e, p));
        i += 5;
    }
    if pairs.is_empty() {
        return Err(parse_err("empty report body"));
    }
    Ok(pairs)
}
