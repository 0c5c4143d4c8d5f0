//! Unified text + speech vocabulary.
//!
//! Id layout, in order: text symbols, the four specials (`[Text]`,
//! `[Speech]`, `</s>`, `<pad>`), one contiguous block of speech tokens
//! `[Sp1]..[SpN]`, then reserved filler ids up to the next multiple of 8.
//! Appending speech tokens after the text block leaves text segmentation
//! untouched.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const TEXT_DELIM: &str = "[Text]";
pub const SPEECH_DELIM: &str = "[Speech]";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";
const SPECIALS: [&str; 4] = [TEXT_DELIM, SPEECH_DELIM, EOS, PAD];
const HEADER_TAG: &str = "#speechlm-vocab";
const FORMAT_VERSION: u32 = 1;

pub type TokenId = u32;

/// Name of the literal token for codec index `code` (0-based).
pub fn speech_token_name(code: usize) -> String {
    format!("[Sp{}]", code + 1)
}

fn reserved_name(i: usize) -> String {
    format!("<reserved{i}>")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedVocab {
    text_tokens: Vec<String>,
    speech_token_count: usize,
    text_index: HashMap<String, TokenId>,
    total_size: usize,
}

impl UnifiedVocab {
    pub fn build(text_symbols: &[String], n_codes: usize) -> Result<Self> {
        ensure!(
            n_codes >= 1,
            Error::InvalidArgument("n_codes must be at least 1".into())
        );
        ensure!(
            !text_symbols.is_empty(),
            Error::InvalidArgument("text symbol list is empty".into())
        );
        let mut text_index = HashMap::with_capacity(text_symbols.len());
        for (i, sym) in text_symbols.iter().enumerate() {
            ensure!(
                !sym.is_empty() && !sym.chars().any(char::is_whitespace),
                Error::InvalidArgument(format!(
                    "text symbol {sym:?} is empty or contains whitespace"
                ))
            );
            ensure!(
                !is_reserved_name(sym),
                Error::DuplicateSymbol(sym.clone())
            );
            if text_index.insert(sym.clone(), i as TokenId).is_some() {
                return Err(Error::DuplicateSymbol(sym.clone()));
            }
        }
        let used = text_symbols.len() + SPECIALS.len() + n_codes;
        let total_size = used.div_ceil(8) * 8;
        Ok(UnifiedVocab {
            text_tokens: text_symbols.to_vec(),
            speech_token_count: n_codes,
            text_index,
            total_size,
        })
    }

    pub fn total_size(&self) -> usize {
        self.total_size
    }

    pub fn n_text(&self) -> usize {
        self.text_tokens.len()
    }

    pub fn n_codes(&self) -> usize {
        self.speech_token_count
    }

    pub fn text_tokens(&self) -> &[String] {
        &self.text_tokens
    }

    pub fn text_delim_id(&self) -> TokenId {
        self.n_text() as TokenId
    }

    pub fn speech_delim_id(&self) -> TokenId {
        self.n_text() as TokenId + 1
    }

    pub fn eos_id(&self) -> TokenId {
        self.n_text() as TokenId + 2
    }

    pub fn pad_id(&self) -> TokenId {
        self.n_text() as TokenId + 3
    }

    /// Half-open id range of the speech block.
    pub fn speech_range(&self) -> std::ops::Range<TokenId> {
        let start = (self.n_text() + SPECIALS.len()) as TokenId;
        start..start + self.speech_token_count as TokenId
    }

    /// Ids that exist only to round the table up to a multiple of 8.
    pub fn reserved_range(&self) -> std::ops::Range<TokenId> {
        self.speech_range().end..self.total_size as TokenId
    }

    pub fn speech_id(&self, code: usize) -> Result<TokenId> {
        ensure!(
            code < self.speech_token_count,
            Error::InvalidArgument(format!(
                "codec index {code} out of range 0..{}",
                self.speech_token_count
            ))
        );
        Ok(self.speech_range().start + code as TokenId)
    }

    pub fn code_of(&self, id: TokenId) -> Result<usize> {
        let range = self.speech_range();
        ensure!(
            range.contains(&id),
            Error::InvalidArgument(format!("token id {id} is not a speech token"))
        );
        Ok((id - range.start) as usize)
    }

    pub fn is_speech(&self, id: TokenId) -> bool {
        self.speech_range().contains(&id)
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        (id as usize) < self.n_text()
    }

    pub fn text_id(&self, symbol: &str) -> Result<TokenId> {
        self.text_index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    /// Whitespace tokenization against the text symbol table.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.text_id(w)).collect()
    }

    pub fn symbol(&self, id: TokenId) -> Option<String> {
        let id = id as usize;
        let n_text = self.n_text();
        if id < n_text {
            return Some(self.text_tokens[id].clone());
        }
        if id < n_text + SPECIALS.len() {
            return Some(SPECIALS[id - n_text].to_string());
        }
        let speech = self.speech_range();
        if speech.contains(&(id as TokenId)) {
            return Some(speech_token_name(id - speech.start as usize));
        }
        if id < self.total_size {
            return Some(reserved_name(id - speech.end as usize));
        }
        None
    }

    /// Line-delimited form: a header line, then one symbol per line with the
    /// line index (after the header) equal to the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{HEADER_TAG} v{FORMAT_VERSION} n_codes={} n_text={} text_delim={} speech_delim={} eos={} pad={} total={}",
            self.n_codes(),
            self.n_text(),
            self.text_delim_id(),
            self.speech_delim_id(),
            self.eos_id(),
            self.pad_id(),
            self.total_size
        )
        .unwrap();
        for id in 0..self.total_size {
            out.push_str(&self.symbol(id as TokenId).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocab file".into()))?;
        let mut fields = header.split_whitespace();
        ensure!(
            fields.next() == Some(HEADER_TAG),
            Error::Format("missing vocab header".into())
        );
        let version = fields
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Format("missing vocab version".into()))?;
        ensure!(
            version == FORMAT_VERSION,
            Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION
            }
        );
        let mut kv = HashMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {f:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Format(format!("bad header value {f:?}")))?;
            kv.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("header lacks {k}")))
        };
        let n_codes = get("n_codes")?;
        let n_text = get("n_text")?;
        let symbols: Vec<&str> = lines.collect();
        ensure!(
            symbols.len() >= n_text,
            Error::Truncated("vocab has fewer lines than n_text".into())
        );
        let text_symbols: Vec<String> = symbols[..n_text].iter().map(|s| s.to_string()).collect();
        let vocab = UnifiedVocab::build(&text_symbols, n_codes)?;
        // Every recorded id and symbol must agree with the rebuilt layout.
        let expected = [
            ("text_delim", vocab.text_delim_id() as usize),
            ("speech_delim", vocab.speech_delim_id() as usize),
            ("eos", vocab.eos_id() as usize),
            ("pad", vocab.pad_id() as usize),
            ("total", vocab.total_size),
        ];
        for (k, v) in expected {
            ensure!(
                get(k)? == v,
                Error::Format(format!("header {k}={} disagrees with layout ({v})", get(k)?))
            );
        }
        ensure!(
            symbols.len() == vocab.total_size,
            Error::Format(format!(
                "vocab lists {} symbols, header says {}",
                symbols.len(),
                vocab.total_size
            ))
        );
        for (id, sym) in symbols.iter().enumerate() {
            ensure!(
                vocab.symbol(id as TokenId).as_deref() == Some(*sym),
                Error::Format(format!("symbol {sym:?} at id {id} does not match layout"))
            );
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn is_reserved_name(sym: &str) -> bool {
    if SPECIALS.contains(&sym) {
        return true;
    }
    let numbered = |prefix: &str, suffix: &str| {
        sym.strip_prefix(prefix)
            .and_then(|s| s.strip_suffix(suffix))
            .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
    };
    numbered("[Sp", "]") || numbered("<reserved", ">")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn symbols(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn padded_size_for_56_text_4096_codes() {
        // 56 + 4096 + 4 = 4156, next multiple of 8 is 4160.
        let v = UnifiedVocab::build(&symbols(56), 4096).unwrap();
        assert_eq!(v.total_size(), 4160);
        assert_eq!(v.reserved_range().len(), 4);
    }

    #[test]
    fn minimal_vocab() {
        let v = UnifiedVocab::build(&symbols(3), 1).unwrap();
        assert_eq!(v.speech_range().len(), 1);
        assert_eq!(v.total_size() % 8, 0);
        assert_eq!(v.total_size(), 8);
    }

    #[test]
    fn speech_token_names() {
        assert_eq!(speech_token_name(0), "[Sp1]");
        assert_eq!(speech_token_name(4095), "[Sp4096]");
        let v = UnifiedVocab::build(&symbols(5), 4096).unwrap();
        assert_eq!(v.symbol(v.speech_id(0).unwrap()).unwrap(), "[Sp1]");
        assert_eq!(v.symbol(v.speech_id(4095).unwrap()).unwrap(), "[Sp4096]");
    }

    #[test]
    fn specials_are_distinct() {
        let v = UnifiedVocab::build(&symbols(10), 16).unwrap();
        let mut ids = vec![v.text_delim_id(), v.speech_delim_id(), v.eos_id(), v.pad_id()];
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|id| !v.is_speech(*id) && !v.is_text(*id)));
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        let dup = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        match UnifiedVocab::build(&dup, 4) {
            Err(Error::DuplicateSymbol(s)) => assert_eq!(s, "a"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
        assert!(matches!(
            UnifiedVocab::build(&symbols(3), 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(UnifiedVocab::build(&[], 4).is_err());
        assert!(matches!(
            UnifiedVocab::build(&["[Sp3]".to_string()], 4),
            Err(Error::DuplicateSymbol(_))
        ));
    }

    #[test]
    fn speech_id_exhaustive_bijection() {
        let v = UnifiedVocab::build(&symbols(7), 4096).unwrap();
        let mut seen = std::collections::HashSet::new();
        for code in 0..4096 {
            let id = v.speech_id(code).unwrap();
            assert!(seen.insert(id));
            assert_eq!(v.code_of(id).unwrap(), code);
        }
        assert!(v.speech_id(4096).is_err());
        assert!(v.code_of(0).is_err());
        assert!(v.code_of(v.eos_id()).is_err());
        assert!(v.code_of(v.reserved_range().start).is_err() || v.reserved_range().is_empty());
    }

    #[test]
    fn text_encoding_ignores_speech_block() {
        let syms: Vec<String> = ["the", "cat", "sat"].iter().map(|s| s.to_string()).collect();
        let small = UnifiedVocab::build(&syms, 1).unwrap();
        let large = UnifiedVocab::build(&syms, 4096).unwrap();
        let a = small.encode_text("the cat  sat the").unwrap();
        assert_eq!(a, vec![0, 1, 2, 0]);
        assert_eq!(a, large.encode_text("the cat  sat the").unwrap());
        assert!(matches!(small.encode_text("dog"), Err(Error::UnknownSymbol(_))));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let v = UnifiedVocab::build(&symbols(11), 37).unwrap();
        let text = v.to_text();
        assert_eq!(UnifiedVocab::from_text(&text).unwrap(), v);
        let tampered = text.replacen("[Sp2]", "[Sp9]", 1);
        assert!(UnifiedVocab::from_text(&tampered).is_err());
        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(UnifiedVocab::from_text(&truncated).is_err());
    }

    proptest! {
        #[test]
        fn layout_invariants(n_text in 1usize..200, n_codes in 1usize..600) {
            let v = UnifiedVocab::build(&symbols(n_text), n_codes).unwrap();
            prop_assert_eq!(v.total_size() % 8, 0);
            prop_assert!(v.total_size() - (n_text + 4 + n_codes) < 8);
            prop_assert_eq!(v.speech_range().len(), n_codes);
            for id in 0..v.total_size() as TokenId {
                prop_assert!(v.symbol(id).is_some());
            }
            prop_assert!(v.symbol(v.total_size() as TokenId).is_none());
            let reloaded = UnifiedVocab::from_text(&v.to_text()).unwrap();
            prop_assert_eq!(reloaded, v);
        }
    }
}
