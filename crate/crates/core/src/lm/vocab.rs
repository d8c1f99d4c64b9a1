//! Word-level vocabulary with reserved special symbols.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{LmadError, Result};
use crate::scene::ctag::looks_like_tag;
use crate::scene::QARecord;
use crate::text::tokenize;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const E2E_OPEN: usize = 3;
pub const E2E_CLOSE: usize = 4;
pub const IMG_OPEN: usize = 5;
pub const IMG_CLOSE: usize = 6;
pub const UNK: usize = 7;

pub const SPECIALS: [&str; 8] = ["<bos>", "<eos>", "<pad>", "<e2e>", "</e2e>", "<img>", "</img>", "<unk>"];

/// Words every vocabulary contains regardless of corpus, so prompt strings
/// and templates never fall back to `<unk>`.
const LEXICON: &str = "
    , . ? : A B C D Yes No 0 1 2 3 4 5 6 7 8 9
    What are the important objects in current scene There no is category of
    Please select correct answer from following options a an at Is there
    future state and will moving actions should ego vehicle take Predict behavior
    slow down stop for keep safe distance going straight turn left right
    Go Turn Left Right acceleration deceleration constant speed
    car truck pedestrian traffic sign barrier
    front front-left front-right back back-left back-right near mid far
";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(LmadError::Input(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*s) {
                return Err(LmadError::Input(format!("vocabulary id {i} must be {s}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Specials, then the fixed lexicon, then every other corpus word
    /// (including whole c-tags) in sorted order.
    pub fn build<'a>(records: impl IntoIterator<Item = &'a QARecord>) -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = symbols.iter().cloned().collect();
        for w in LEXICON.split_whitespace() {
            if seen.insert(w.to_string()) {
                symbols.push(w.to_string());
            }
        }
        let mut extra = BTreeSet::new();
        for r in records {
            for w in tokenize(&r.question).into_iter().chain(tokenize(&r.answer)) {
                if !seen.contains(&w) {
                    extra.insert(w);
                }
            }
        }
        symbols.extend(extra);
        Self::from_symbols(symbols).expect("constructed without duplicates")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.symbols.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins symbols with single spaces; special symbols other than `<unk>` are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= UNK)
            .map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tag_count(&self) -> usize {
        self.symbols.iter().filter(|s| looks_like_tag(s)).count()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex_digest(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| LmadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LmadError::io(path, e))?;
        Self::from_symbols(text.lines().map(str::to_string).collect())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::dataset::generate_records;
    use crate::scene::GenConfig;

    #[test]
    fn specials_are_reserved_and_text_round_trips() {
        let recs = generate_records(0, 20, &GenConfig::default()).unwrap();
        let v = Vocabulary::build(&recs);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
        assert_eq!(v.encode(""), Vec::<usize>::new());
        assert_eq!(v.decode(&[]), "");
        let t = "Go straight , constant speed";
        assert_eq!(v.decode(&v.encode(t)), t);
        for r in &recs {
            assert_eq!(v.decode(&v.encode(&r.answer)), r.answer);
            assert!(!v.encode(&r.question).contains(&UNK));
        }
        assert!(v.tag_count() > 0);
        assert_eq!(v.encode("zebra"), vec![UNK]);
    }

    #[test]
    fn tags_are_single_atoms() {
        let v = Vocabulary::build(std::iter::empty());
        assert_eq!(v.encode("<c1,CAM_FRONT,800,450>").len(), 1);
    }

    #[test]
    fn file_round_trip_preserves_hash() {
        let recs = generate_records(3, 5, &GenConfig::default()).unwrap();
        let v = Vocabulary::build(&recs);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let w = Vocabulary::load(&p).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.hash(), hex_digest(&std::fs::read(&p).unwrap()));
    }
}
