//! Tweet normalisation, tokenisation, vocabulary and lexicon features.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

pub const USER_TOKEN: &str = "@USER";
pub const URL_TOKEN: &str = "HTTPURL";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("lexicon {path}: line {line}: {reason}")]
    Lexicon {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary: {0}")]
    Vocab(String),
}

fn entity_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?P<url>(?i:https?://|www\.)\S+)|(?P<user>\B@\w+)|(?P<keep>HTTPURL)")
            .expect("entity pattern")
    })
}

/// Replaces mentions and URLs with placeholder tokens, lowercases the rest
/// and collapses whitespace.
pub fn normalize_tweet(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for caps in entity_pattern().captures_iter(text) {
        let m = caps.get(0).expect("whole match");
        out.push_str(&text[last..m.start()].to_lowercase());
        if caps.name("user").is_some() {
            out.push_str(USER_TOKEN);
        } else {
            out.push_str(URL_TOKEN);
        }
        last = m.end();
    }
    out.push_str(&text[last..].to_lowercase());
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && c != '_'
}

/// Splits normalised text on whitespace, emitting each punctuation character
/// as its own token. The placeholder tokens survive intact.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        let mut rest = chunk;
        while let Some(c) = rest.chars().next() {
            if let Some(tok) = [USER_TOKEN, URL_TOKEN].into_iter().find(|t| rest.starts_with(t)) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(tok.to_string());
                rest = &rest[tok.len()..];
                continue;
            }
            if is_punct(c) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
            rest = &rest[c.len_utf8()..];
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Normalises then tokenises.
pub fn preprocess(text: &str) -> Vec<String> {
    tokenize(&normalize_tweet(text))
}

/// Token ↔ id map with `<pad>`=0, `<unk>`=1, `<cls>`=2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
    max_size: usize,
}

impl Vocabulary {
    /// Keeps the most frequent tokens seen at least `min_freq` times, up to
    /// `max_size` entries including the reserved ones. Ties go to the
    /// lexicographically smaller token.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize, max_size: usize) -> Self {
        assert!(min_freq >= 1, "min_freq must be at least 1");
        assert!(max_size >= RESERVED.len(), "max_size must cover reserved tokens");
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Self::assemble(tokens, min_freq, max_size)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize, max_size: usize) -> Result<Self, TextError> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TextError::Vocab("reserved tokens missing".into()));
        }
        let unique: HashSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(TextError::Vocab("duplicate tokens".into()));
        }
        Ok(Self::assemble(tokens, min_freq, max_size))
    }

    fn assemble(tokens: Vec<String>, min_freq: usize, max_size: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_freq,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    /// `[CLS] + ids`, truncated to `max_len` and right-padded with PAD.
    pub fn encode_ids<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend(tokens.iter().take(max_len - 1).map(|t| self.id(t.as_ref())));
        ids.resize(max_len, PAD_ID);
        ids
    }
}

/// Word lists per category; category order fixes the feature index.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Lexicon {
    categories: Vec<String>,
    words: Vec<HashSet<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_category<I, S>(&mut self, name: &str, words: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        match self.categories.iter().position(|c| c == name) {
            Some(i) => self.words[i] = set,
            None => {
                self.categories.push(name.to_string());
                self.words.push(set);
            }
        }
    }

    /// Parses `category: word1 word2 …` lines; blank lines and `#` comments are skipped.
    pub fn parse(source: &str, origin: &str) -> Result<Self, TextError> {
        let mut lex = Self::new();
        for (n, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| TextError::Lexicon {
                path: origin.to_string(),
                line: n + 1,
                reason: reason.to_string(),
            };
            let (name, words) = line.split_once(':').ok_or_else(|| err("missing ':'"))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(err("empty category name"));
            }
            if lex.categories.iter().any(|c| c == name) {
                return Err(err("duplicate category"));
            }
            lex.add_category(name, words.split_whitespace());
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Words of category `i`, sorted.
    pub fn words(&self, i: usize) -> Vec<&str> {
        let mut w: Vec<&str> = self.words[i].iter().map(String::as_str).collect();
        w.sort_unstable();
        w
    }

    /// Writes the lexicon back in its file format, categories in order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.categories.iter().enumerate() {
            out.push_str(name);
            out.push(':');
            for w in self.words(i) {
                out.push(' ');
                out.push_str(w);
            }
            out.push('\n');
        }
        out
    }

    /// Fraction of tokens belonging to each category.
    pub fn features<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let denom = tokens.len().max(1) as f64;
        self.words
            .iter()
            .map(|set| {
                let hits = tokens
                    .iter()
                    .filter(|t| set.contains(&t.as_ref().to_lowercase()))
                    .count();
                hits as f64 / denom
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_tweet("@john http://x.co Hi THERE"),
            "@USER HTTPURL hi there"
        );
        assert_eq!(normalize_tweet(""), "");
        assert_eq!(normalize_tweet("no entities Here"), "no entities here");
        assert_eq!(
            normalize_tweet("  see WWW.Example.com/a?b=1\tand https://t.co/xyz  "),
            "see HTTPURL and HTTPURL"
        );
        assert_eq!(normalize_tweet("mail me@home.org"), "mail me@home.org");
        assert_eq!(normalize_tweet("(@Someone_1)!"), "(@USER)!");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("hi there"), vec!["hi", "there"]);
        assert_eq!(tokenize("hi, there!"), vec!["hi", ",", "there", "!"]);
        assert_eq!(tokenize("@USER !"), vec!["@USER", "!"]);
        assert_eq!(tokenize("(@USER),HTTPURL."), vec!["(", "@USER", ")", ",", "HTTPURL", "."]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn vocab_min_freq_and_ties() {
        let v = Vocabulary::build(&[tokenize("a a b")], 2, 100);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));

        let empty: Vec<Vec<String>> = vec![];
        let v = Vocabulary::build(&empty, 1, 10);
        assert_eq!(v.len(), 3);
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.token(UNK_ID), Some("<unk>"));
        assert_eq!(v.token(CLS_ID), Some("<cls>"));

        let v = Vocabulary::build(&[vec!["y", "x"]], 1, 4);
        assert!(v.contains("x"));
        assert!(!v.contains("y"));
    }

    #[test]
    fn vocab_orders_by_frequency() {
        let v = Vocabulary::build(&[tokenize("c b b a a a")], 1, 10);
        assert_eq!(&v.tokens()[3..], &["a", "b", "c"]);
        let again = Vocabulary::from_tokens(v.tokens().to_vec(), 1, 10).unwrap();
        assert_eq!(again, v);
        assert!(Vocabulary::from_tokens(vec!["a".into()], 1, 10).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&[tokenize("hello world")], 1, 10);
        let none: [&str; 0] = [];
        assert_eq!(v.encode_ids(&none, 4), vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
        let ids = v.encode_ids(&["hello", "zzz"], 4);
        assert_eq!(ids[2], UNK_ID);
        assert_eq!(ids[1], v.id("hello"));
        let ids = v.encode_ids(&["hello", "world", "hello", "world"], 4);
        assert_eq!(ids.len(), 4);
        assert!(!ids.contains(&PAD_ID));
    }

    #[test]
    fn lexicon_parse_and_features() {
        let lex = Lexicon::parse("# comment\n\njoy: happy Glad\nsadness: sad\n", "inline").unwrap();
        assert_eq!(lex.categories(), &["joy", "sadness"]);
        let f = lex.features(&["happy", "sad", "happy"]);
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(lex.features(&["other"]), vec![0.0, 0.0]);
        assert!(Lexicon::new().features(&["x"]).is_empty());
        assert_eq!(Lexicon::parse(&lex.to_file_string(), "again").unwrap(), lex);

        let err = Lexicon::parse("joy happy", "bad.txt").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        assert!(Lexicon::parse("a: x\na: y", "dup").is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ a-zA-Z0-9@:/._#!,HTTPURLwUSER\t-]{0,40}") {
            let once = normalize_tweet(&s);
            prop_assert_eq!(normalize_tweet(&once), once);
        }

        #[test]
        fn encode_has_fixed_length(words in proptest::collection::vec("[a-z]{1,4}", 0..20), max_len in 2usize..16) {
            let v = Vocabulary::build(&[words.clone()], 1, 8);
            let ids = v.encode_ids(&words, max_len);
            prop_assert_eq!(ids.len(), max_len);
            prop_assert_eq!(ids[0], CLS_ID);
        }

        #[test]
        fn lexicon_features_bounded(words in proptest::collection::vec("[a-c]{1,2}", 0..12)) {
            let lex = Lexicon::parse("x: a b\ny: a\nz: cc c", "p").unwrap();
            let f = lex.features(&words);
            prop_assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(f.iter().sum::<f64>() <= lex.len() as f64);
        }
    }
}
