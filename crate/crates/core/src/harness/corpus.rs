// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus ingestion and the byte-level tokenizer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenSequence;

/// Beginning-of-sequence id; bytes occupy ids `0..256`.
pub const BOS: u32 = 256;
/// Vocabulary size of the byte tokenizer (256 bytes + BOS).
pub const BYTE_VOCAB: usize = 257;

/// Splits a line into sentence chunks. A boundary is `.`, `?` or `!`
/// followed by whitespace (or the end of the text).
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((idx, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            let at_boundary = chars.peek().is_none_or(|(_, next)| next.is_whitespace());
            if at_boundary {
                let end = idx + c.len_utf8();
                let chunk = text[start..end].trim();
                if !chunk.is_empty() {
                    out.push(chunk);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// BOS followed by the UTF-8 bytes of `text`, truncated to `max_seq` tokens.
pub fn tokenize_bytes(text: &str, max_seq: usize) -> TokenSequence {
    let tokens: Vec<u32> = std::iter::once(BOS)
        .chain(text.bytes().map(u32::from))
        .take(max_seq.max(1))
        .collect();
    TokenSequence::new(tokens).expect("BOS keeps the sequence non-empty")
}

/// Sentence chunks whose whitespace word count lies in `[min_words, max_words]`.
/// Every line is an independent candidate.
pub fn select_chunks(text: &str, min_words: usize, max_words: usize) -> Vec<&str> {
    text.lines()
        .flat_map(split_sentences)
        .filter(|chunk| {
            let words = chunk.split_whitespace().count();
            (min_words..=max_words).contains(&words)
        })
        .collect()
}

pub fn ingest_text(text: &str, min_words: usize, max_words: usize, max_seq: usize) -> Result<Vec<TokenSequence>> {
    let seqs: Vec<TokenSequence> = select_chunks(text, min_words, max_words)
        .into_iter()
        .map(|c| tokenize_bytes(c, max_seq))
        .collect();
    if seqs.is_empty() {
        return Err(Error::NoQualifyingChunk);
    }
    Ok(seqs)
}

pub fn ingest_corpus(
    path: impl AsRef<Path>,
    min_words: usize,
    max_words: usize,
    max_seq: usize,
) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_text(&text, min_words, max_words, max_seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_selection() {
        let text = "Hi. The quick brown fox jumps over the lazy dog today.";
        let seqs = ingest_text(text, 5, 50, 512).unwrap();
        assert_eq!(seqs.len(), 1);
        let want: Vec<u32> = std::iter::once(BOS)
            .chain(
                "The quick brown fox jumps over the lazy dog today."
                    .bytes()
                    .map(u32::from),
            )
            .collect();
        assert_eq!(seqs[0].as_slice(), &want[..]);
    }

    #[test]
    fn empty_corpus_has_no_chunk() {
        assert!(matches!(ingest_text("", 1, 10, 16), Err(Error::NoQualifyingChunk)));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(ingest_corpus(&p, 1, 10, 16), Err(Error::NoQualifyingChunk)));
        assert!(matches!(
            ingest_corpus(dir.path().join("missing.txt"), 1, 10, 16),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn byte_tokens() {
        assert_eq!(tokenize_bytes("a", 8).as_slice(), &[BOS, 97]);
        assert_eq!(tokenize_bytes("abcdef", 3).as_slice(), &[BOS, 97, 98]);
    }

    #[test]
    fn boundaries_need_whitespace() {
        assert_eq!(
            split_sentences("Version 1.5 is out! Is it? Yes.Really"),
            vec!["Version 1.5 is out!", "Is it?", "Yes.Really"]
        );
        let text = "one two three\nfour five. six seven";
        assert_eq!(
            select_chunks(text, 2, 3),
            vec!["one two three", "four five.", "six seven"]
        );
    }
}
