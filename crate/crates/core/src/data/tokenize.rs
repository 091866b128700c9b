use serde::{Deserialize, Serialize};

/// A token with character offsets (Unicode scalar values, end exclusive)
/// into the text it was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '‘' | '’' | '“' | '”' | '…' | '«' | '»' | '¿' | '¡')
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '’'
}

/// Whitespace-and-punctuation tokenizer.
///
/// Text is split on whitespace; each chunk then sheds its leading and
/// trailing punctuation one character per token, and the remaining core is
/// split before every apostrophe (`who's` becomes `who` + `'s`).
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, &mut tokens);
    }
    tokens
}

fn push(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    out.push(Token {
        text: chars[start..end].iter().collect(),
        start,
        end,
    });
}

fn split_chunk(chars: &[char], mut start: usize, mut end: usize, out: &mut Vec<Token>) {
    while start < end && is_punct(chars[start]) {
        push(chars, start, start + 1, out);
        start += 1;
    }
    let mut trailing = Vec::new();
    while end > start && is_punct(chars[end - 1]) {
        trailing.push(end - 1);
        end -= 1;
    }
    if start < end {
        let mut piece = start;
        for j in start + 1..end {
            if is_apostrophe(chars[j]) {
                push(chars, piece, j, out);
                piece = j;
            }
        }
        push(chars, piece, end, out);
    }
    for &j in trailing.iter().rev() {
        push(chars, j, j + 1, out);
    }
}

/// Substring by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars()
        .skip(start)
        .take(end.saturating_sub(start))
        .collect()
}
