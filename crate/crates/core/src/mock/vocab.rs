use super::MockError;
use crate::text::TokenId;
use std::collections::HashMap;

pub const EOS: TokenId = 0;
pub const PERIOD: TokenId = 1;
pub const COMMA: TokenId = 2;
pub const EOS_TEXT: &str = "<eos>";
pub const OBJECT_SLOT: &str = "{obj}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Part {
    Word(TokenId),
    Object,
}

#[derive(Clone, Debug)]
pub struct Template {
    pub key: TokenId,
    pub parts: Vec<Part>,
}

impl Template {
    pub fn slots(&self) -> usize {
        self.parts.iter().filter(|p| **p == Part::Object).count()
    }
}

/// Token table of the mock: specials, template words, object nouns, then
/// filler words used as low-probability distractors.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    objects: Vec<TokenId>,
    fillers: Vec<TokenId>,
    templates: Vec<Template>,
}

impl Vocab {
    pub fn build(templates: &[String], objects: &[String], fillers: &[String]) -> Result<Self, MockError> {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
            objects: Vec::new(),
            fillers: Vec::new(),
            templates: Vec::new(),
        };
        for w in [EOS_TEXT, ".", ","] {
            v.push(w);
        }
        let mut template_words: Vec<Vec<&str>> = Vec::new();
        for t in templates {
            let words: Vec<&str> = t.split_whitespace().collect();
            if words.is_empty() || words[0] == OBJECT_SLOT {
                return Err(MockError::Config(format!("template {t:?} must start with a word")));
            }
            if *words.last().unwrap() != "." {
                return Err(MockError::Config(format!("template {t:?} must end with \".\"")));
            }
            if words[..words.len() - 1].contains(&".") || words.contains(&EOS_TEXT) {
                return Err(MockError::Config(format!(
                    "template {t:?} may only contain a final period"
                )));
            }
            for w in &words {
                if *w != OBJECT_SLOT && !v.index.contains_key(*w) {
                    v.push(w);
                }
            }
            template_words.push(words);
        }
        for o in objects {
            if o.split_whitespace().count() != 1 || o.starts_with('{') {
                return Err(MockError::Config(format!("object {o:?} must be a single word")));
            }
            if v.index.contains_key(o.as_str()) {
                return Err(MockError::Config(format!(
                    "object {o:?} collides with a template word or another object"
                )));
            }
            let id = v.push(o);
            v.objects.push(id);
        }
        for f in fillers {
            if !v.index.contains_key(f.as_str()) {
                let id = v.push(f);
                v.fillers.push(id);
            }
        }
        if v.fillers.len() < 3 {
            return Err(MockError::Config("need at least 3 distinct filler words".into()));
        }
        let mut keys = Vec::new();
        for words in template_words {
            let key = v.index[words[0]];
            if keys.contains(&key) {
                return Err(MockError::Config(format!(
                    "two templates start with {:?}",
                    words[0]
                )));
            }
            keys.push(key);
            let parts = words
                .iter()
                .map(|w| {
                    if *w == OBJECT_SLOT {
                        Part::Object
                    } else {
                        Part::Word(v.index[*w])
                    }
                })
                .collect();
            v.templates.push(Template { key, parts });
        }
        Ok(v)
    }

    fn push(&mut self, w: &str) -> TokenId {
        let id = self.words.len() as TokenId;
        self.words.push(w.to_string());
        self.index.insert(w.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, w: &str) -> Option<TokenId> {
        self.index.get(w).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    pub fn objects(&self) -> &[TokenId] {
        &self.objects
    }

    pub fn is_object(&self, id: TokenId) -> bool {
        self.objects.contains(&id)
    }

    pub fn fillers(&self) -> &[TokenId] {
        &self.fillers
    }

    pub fn template(&self, key: TokenId) -> Option<&Template> {
        self.templates.iter().find(|t| t.key == key)
    }

    pub fn is_delimiter(id: TokenId) -> bool {
        id == PERIOD || id == COMMA || id == EOS
    }
}
