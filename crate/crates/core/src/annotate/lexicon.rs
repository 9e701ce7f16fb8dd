use super::{ExtractError, ExtractedObject, ObjectExtractor};
use crate::text::word_spans;
use std::collections::{BTreeMap, HashMap};

/// Shipped noun lexicon with plural surface forms.
pub const DEFAULT_LEXICON_TSV: &str = include_str!("../../assets/lexicon.tsv");

/// Prompt for LLM-based object extraction; `{caption}` is replaced by the
/// caption text.
pub const OBJECT_EXTRACTION_PROMPT: &str = include_str!("../../assets/object_extraction_prompt.txt");

/// Regular English plural of a single word.
pub fn regular_plural(word: &str) -> String {
    let w = word;
    if w.ends_with('s') || w.ends_with('x') || w.ends_with('z') || w.ends_with("ch") || w.ends_with("sh") {
        format!("{w}es")
    } else if w.len() > 1
        && w.ends_with('y')
        && !matches!(w.as_bytes()[w.len() - 2], b'a' | b'e' | b'i' | b'o' | b'u')
    {
        format!("{}ies", &w[..w.len() - 1])
    } else {
        format!("{w}s")
    }
}

/// Maps lower-cased surface forms (one or more words) to singular lemmas.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    surfaces: HashMap<Vec<String>, String>,
    lemmas: BTreeMap<String, Vec<String>>,
    max_words: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("lexicon line {line}: {message}")]
pub struct LexiconError {
    pub line: usize,
    pub message: String,
}

impl Lexicon {
    /// Parses `lemma<TAB>plural[,plural…]` lines. A missing or empty plural
    /// column falls back to regular pluralization of the last word; `#`
    /// starts a comment line.
    pub fn from_tsv(src: &str) -> Result<Self, LexiconError> {
        let mut lex = Lexicon::default();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let lemma = cols.next().unwrap_or("").trim().to_lowercase();
            if lemma.is_empty() {
                return Err(LexiconError {
                    line: i + 1,
                    message: "empty lemma".into(),
                });
            }
            let plurals: Vec<String> = cols
                .next()
                .map(|c| c.split(',').map(|p| p.trim().to_lowercase()).filter(|p| !p.is_empty()).collect())
                .unwrap_or_default();
            lex.add(&lemma, &plurals).map_err(|message| LexiconError { line: i + 1, message })?;
        }
        Ok(lex)
    }

    pub fn shipped() -> Self {
        Self::from_tsv(DEFAULT_LEXICON_TSV).expect("shipped lexicon parses")
    }

    /// Lexicon of `lemmas`, taking plural forms from `inflections` where it
    /// knows the lemma and regular rules otherwise.
    pub fn from_lemmas<I, S>(lemmas: I, inflections: &Lexicon) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Lexicon::default();
        for l in lemmas {
            let l = l.as_ref().to_lowercase();
            let plurals = inflections.lemmas.get(&l).cloned().unwrap_or_default();
            let plurals: Vec<String> = plurals.into_iter().filter(|p| *p != l).collect();
            // Conflicts are impossible here except through odd inputs; skip them.
            let _ = lex.add(&l, &plurals);
        }
        lex
    }

    fn add(&mut self, lemma: &str, plurals: &[String]) -> Result<(), String> {
        let mut forms = vec![lemma.to_string()];
        if plurals.is_empty() {
            let words: Vec<&str> = lemma.split_whitespace().collect();
            let (last, head) = words.split_last().expect("non-empty lemma");
            let mut p: Vec<String> = head.iter().map(|s| s.to_string()).collect();
            p.push(regular_plural(last));
            forms.push(p.join(" "));
        } else {
            forms.extend(plurals.iter().cloned());
        }
        for f in &forms {
            let key: Vec<String> = f.split_whitespace().map(str::to_string).collect();
            if let Some(prev) = self.surfaces.get(&key) {
                if prev != lemma {
                    return Err(format!("surface {f:?} maps to both {prev:?} and {lemma:?}"));
                }
            }
            self.max_words = self.max_words.max(key.len());
            self.surfaces.insert(key, lemma.to_string());
        }
        self.lemmas.insert(lemma.to_string(), forms[1..].to_vec());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lemmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
    }

    pub fn contains_lemma(&self, lemma: &str) -> bool {
        self.lemmas.contains_key(&lemma.to_lowercase())
    }

    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.lemmas.keys().map(String::as_str)
    }

    /// Singular lemma of a surface form, if known.
    pub fn lemma_of(&self, surface: &str) -> Option<&str> {
        let key: Vec<String> = surface.split_whitespace().map(str::to_lowercase).collect();
        self.surfaces.get(&key).map(String::as_str)
    }

    /// All lexicon matches in `text`, longest match first at each word,
    /// left to right, as `(lemma, byte span)`.
    pub fn scan(&self, text: &str) -> Vec<(String, (usize, usize))> {
        let words: Vec<(usize, usize)> = word_spans(text);
        let lower: Vec<String> = words.iter().map(|&(s, e)| text[s..e].to_lowercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let mut matched = 0;
            for n in (1..=self.max_words.min(words.len() - i)).rev() {
                if let Some(lemma) = self.surfaces.get(&lower[i..i + n]) {
                    out.push((lemma.clone(), (words[i].0, words[i + n - 1].1)));
                    matched = n;
                    break;
                }
            }
            i += matched.max(1);
        }
        out
    }

    /// Spans in `text` where `lemma` (or one of its inflections) occurs.
    pub fn locate(&self, text: &str, lemma: &str) -> Vec<(usize, usize)> {
        let lemma = lemma.to_lowercase();
        self.scan(text)
            .into_iter()
            .filter(|(l, _)| *l == lemma)
            .map(|(_, s)| s)
            .collect()
    }
}

/// Deterministic extractor: every lexicon noun found in the caption.
#[derive(Clone, Debug)]
pub struct LexiconExtractor {
    pub lexicon: Lexicon,
}

impl LexiconExtractor {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }
}

impl ObjectExtractor for LexiconExtractor {
    fn extract(&self, caption: &str) -> Result<Vec<ExtractedObject>, ExtractError> {
        Ok(self
            .lexicon
            .scan(caption)
            .into_iter()
            .map(|(object, span)| ExtractedObject {
                object,
                char_span: Some(span),
            })
            .collect())
    }
}

/// Text completion service used by [`LlmExtractor`].
pub trait Completion: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, String>;
}

/// Object extraction by prompting a language model with the shipped
/// template and parsing its period-separated answer.
pub struct LlmExtractor<C> {
    pub completion: C,
    pub template: String,
}

impl<C: Completion> LlmExtractor<C> {
    pub fn new(completion: C) -> Self {
        Self {
            completion,
            template: OBJECT_EXTRACTION_PROMPT.to_string(),
        }
    }

    pub fn prompt(&self, caption: &str) -> String {
        self.template.replace("{caption}", caption)
    }
}

/// Splits `"kitchen. man. woman."` into lower-cased, de-duplicated names
/// in order of appearance.
pub fn parse_object_list(reply: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for piece in reply.split(['.', '\n']) {
        let name = piece.trim().trim_matches(|c: char| c == '"' || c == '-' || c == '*').trim().to_lowercase();
        if !name.is_empty() && !out.contains(&name) {
            out.push(name);
        }
    }
    out
}

impl<C: Completion> ObjectExtractor for LlmExtractor<C> {
    fn extract(&self, caption: &str) -> Result<Vec<ExtractedObject>, ExtractError> {
        let reply = self.completion.complete(&self.prompt(caption)).map_err(|message| ExtractError {
            message,
            partial: Vec::new(),
        })?;
        Ok(parse_object_list(&reply)
            .into_iter()
            .map(|object| ExtractedObject { object, char_span: None })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plural_rules() {
        assert_eq!(regular_plural("dog"), "dogs");
        assert_eq!(regular_plural("bench"), "benches");
        assert_eq!(regular_plural("bus"), "buses");
        assert_eq!(regular_plural("strawberry"), "strawberries");
        assert_eq!(regular_plural("toy"), "toys");
    }

    #[test]
    fn shipped_lexicon_knows_irregulars() {
        let lex = Lexicon::shipped();
        assert_eq!(lex.lemma_of("Knives"), Some("knife"));
        assert_eq!(lex.lemma_of("women"), Some("woman"));
        assert_eq!(lex.lemma_of("fire hydrants"), Some("fire hydrant"));
        assert_eq!(lex.lemma_of("sheep"), Some("sheep"));
        assert_eq!(lex.lemma_of("unicorns"), None);
    }

    #[test]
    fn scan_prefers_longest_match() {
        let lex = Lexicon::shipped();
        let text = "A man stands near a fire hydrant and a dining table.";
        let found: Vec<String> = lex.scan(text).into_iter().map(|x| x.0).collect();
        assert_eq!(found, ["man", "fire hydrant", "dining table"]);
    }

    #[test]
    fn conflicting_surface_rejected() {
        assert!(Lexicon::from_tsv("dog\tdogs\ncat\tdogs\n").is_err());
        let err = Lexicon::from_tsv("dog\tdogs\n\tcats\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn object_list_parsing() {
        let got = parse_object_list("kitchen. man. woman. stove. man.\n");
        assert_eq!(got, ["kitchen", "man", "woman", "stove"]);
    }

    #[test]
    fn prompt_embeds_caption() {
        struct Echo;
        impl Completion for Echo {
            fn complete(&self, prompt: &str) -> Result<String, String> {
                Ok(prompt.to_string())
            }
        }
        let ex = LlmExtractor::new(Echo);
        let p = ex.prompt("A dog.");
        assert!(p.contains("\"A dog.\""));
        assert!(p.starts_with("You will be provided with an image caption."));
        assert!(!p.contains("{caption}"));
    }
}
