//! Character-level text front end: vocabulary, tokenization and the
//! numbered test-set format.

use std::collections::HashMap;
use std::path::Path;

use crate::dsp::{AudioClip, Spectrogram};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::scalar::Scalar;

pub const PAUSE: char = '%';
pub const UNK: &str = "<unk>";
const SPACE_NAME: &str = "<space>";
const PUNCTUATION: &[char] = &['.', '?', '!', ',', ';', ':'];

/// The 15-sentence latency set.
pub const TEST_SET_15: &str = include_str!("../data/test_set_15.txt");
/// The 100-sentence attention-robustness set.
pub const TEST_SET_100: &str = include_str!("../data/test_set_100.txt");

const DEFAULT_ALPHABET: &str = "\
# letters
A\nB\nC\nD\nE\nF\nG\nH\nI\nJ\nK\nL\nM\nN\nO\nP\nQ\nR\nS\nT\nU\nV\nW\nX\nY\nZ
# word-internal symbols
'
-
<space>
# pause marker
%
# terminal punctuation
.
?
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Character,
    Pause,
    Punctuation,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub class: TokenClass,
    pub symbol: String,
    pub id: usize,
}

/// Symbol table. Id 0 is reserved for unknown symbols.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    /// Emit space tokens between words.
    pub keep_spaces: bool,
    /// Optional word-to-phoneme overrides; empty by default.
    pub lexicon: HashMap<String, Vec<String>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_alphabet(DEFAULT_ALPHABET).expect("built-in alphabet parses")
    }
}

fn class_of(symbol: &str) -> TokenClass {
    let mut chars = symbol.chars();
    match (chars.next(), chars.next()) {
        (Some(PAUSE), None) => TokenClass::Pause,
        (Some(c), None) if PUNCTUATION.contains(&c) => TokenClass::Punctuation,
        _ if symbol == UNK => TokenClass::Unknown,
        _ => TokenClass::Character,
    }
}

impl Vocabulary {
    /// Parses an alphabet file: one symbol per line, `#` starts a comment
    /// line, `<space>` names the space symbol.
    pub fn from_alphabet(text: &str) -> Result<Self> {
        let mut symbols = vec![UNK.to_string()];
        let mut index = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let sym = if line == SPACE_NAME || line == " " { " ".to_string() } else { line.trim().to_string() };
            if sym == UNK {
                return Err(Error::Parse { line: n + 1, msg: format!("{UNK} is reserved") });
            }
            if index.insert(sym.clone(), symbols.len()).is_some() {
                return Err(Error::Parse { line: n + 1, msg: format!("duplicate symbol {sym:?}") });
            }
            symbols.push(sym);
        }
        if symbols.len() == 1 {
            return Err(Error::Parse { line: 0, msg: "alphabet defines no symbols".into() });
        }
        Ok(Self { symbols, index, keep_spaces: true, lexicon: HashMap::new() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_alphabet(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    fn token(&self, symbol: &str) -> Token {
        match self.index.get(symbol) {
            Some(&id) => Token { class: class_of(symbol), symbol: symbol.to_string(), id },
            None => {
                log::warn!("unknown symbol {symbol:?} mapped to {UNK}");
                Token { class: TokenClass::Unknown, symbol: symbol.to_string(), id: self.unk_id() }
            }
        }
    }

    /// Splits text into tokens. Lowercase letters are folded to uppercase.
    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Input("cannot tokenize empty text".into()));
        }
        let text = text.to_uppercase();
        let mut out = Vec::with_capacity(text.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<Token>| {
            if word.is_empty() {
                return;
            }
            match self.lexicon.get(word.as_str()) {
                Some(phones) => out.extend(phones.iter().map(|p| self.token(p))),
                None => out.extend(word.chars().map(|c| self.token(c.encode_utf8(&mut [0; 4])))),
            }
            word.clear();
        };
        for c in text.chars() {
            if c.is_whitespace() || c == PAUSE || PUNCTUATION.contains(&c) {
                flush(&mut word, &mut out);
                if c.is_whitespace() {
                    let last_space = out.last().is_some_and(|t: &Token| t.symbol == " ");
                    if self.keep_spaces && !last_space {
                        out.push(self.token(" "));
                    }
                } else {
                    out.push(self.token(c.encode_utf8(&mut [0; 4])));
                }
            } else {
                word.push(c);
            }
        }
        flush(&mut word, &mut out);
        Ok(out)
    }

    pub fn ids(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self.tokenize(text)?.into_iter().map(|t| t.id).collect())
    }
}

pub fn detokenize(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.symbol.as_str()).collect()
}

/// A transcript with optional audio and derived features.
#[derive(Debug, Clone)]
pub struct Utterance<T> {
    pub raw_text: String,
    pub tokens: Vec<Token>,
    pub audio: Option<AudioClip<T>>,
    pub mel: Option<Spectrogram<T>>,
    pub linear: Option<Spectrogram<T>>,
}

impl<T: Scalar> Utterance<T> {
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self { raw_text: text.to_string(), tokens: vocab.tokenize(text)?, audio: None, mel: None, linear: None })
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }
}

/// Parses "N. SENTENCE" lines numbered 1, 2, 3, ...
pub fn parse_test_set<T: Scalar>(text: &str, vocab: &Vocabulary) -> Result<Vec<Utterance<T>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (num, rest) = line
            .split_once('.')
            .ok_or_else(|| Error::Parse { line: line_no, msg: "expected \"N. sentence\"".into() })?;
        let num: usize = num
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad sentence number {num:?}") })?;
        if num != out.len() + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("sentence numbered {num}, expected {}", out.len() + 1),
            });
        }
        let sentence = rest.trim();
        let utt = Utterance::from_text(sentence, vocab)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        out.push(utt);
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 0, msg: "test set contains no sentences".into() });
    }
    Ok(out)
}

pub fn load_test_set<T: Scalar>(path: &Path, vocab: &Vocabulary) -> Result<Vec<Utterance<T>>> {
    parse_test_set(&std::fs::read_to_string(path)?, vocab)
}

/// Looks up token embeddings from a `[vocab, dim]` table as a `[dim, M]` variable.
pub fn embed<'g, T: Scalar>(g: &'g Graph<T>, ids: &[usize], table: &Tensor<T>) -> Result<Var<'g, T>> {
    g.param(table).embed(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syms(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.symbol.as_str()).collect()
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::default();
        let t = v.tokenize("A B C%.").unwrap();
        assert_eq!(syms(&t), ["A", " ", "B", " ", "C", "%", "."]);
        assert_eq!(t[5].class, TokenClass::Pause);
        assert_eq!(t[6].class, TokenClass::Punctuation);
        assert_eq!(syms(&v.tokenize("HURRY%.").unwrap()), ["H", "U", "R", "R", "Y", "%", "."]);
        let p = v.tokenize("%").unwrap();
        assert_eq!((p.len(), p[0].class), (1, TokenClass::Pause));
        assert!(matches!(v.tokenize("   "), Err(Error::Input(_))));
    }

    #[test]
    fn unknown_symbols_use_reserved_id() {
        let v = Vocabulary::default();
        let t = v.tokenize("A7").unwrap();
        assert_eq!(t[1].id, v.unk_id());
        assert_eq!(t[1].class, TokenClass::Unknown);
    }

    #[test]
    fn spaces_can_be_dropped() {
        let mut v = Vocabulary::default();
        v.keep_spaces = false;
        assert_eq!(syms(&v.tokenize("A B").unwrap()), ["A", "B"]);
    }

    #[test]
    fn lexicon_hook_overrides_spelling() {
        let mut v = Vocabulary::from_alphabet("A\nB\nAH\n").unwrap();
        v.lexicon.insert("AB".into(), vec!["AH".into(), "B".into()]);
        assert_eq!(syms(&v.tokenize("AB").unwrap()), ["AH", "B"]);
    }

    #[test]
    fn alphabet_file_format() {
        let v = Vocabulary::from_alphabet("# comment\nA\n<space>\n%\n").unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id(" "), Some(2));
        assert!(matches!(Vocabulary::from_alphabet("A\nA\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn malformed_numbering_reports_line() {
        let v = Vocabulary::default();
        let err = parse_test_set::<f64>("1. A.\nTWO. B.\n", &v).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_test_set::<f64>("1. A.\n3. B.\n", &v).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_test_set::<f64>("", &v), Err(Error::Parse { .. })));
    }
}
