use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const UNK: &str = "<unk>";

/// Where token vectors come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Trainable table over the training vocabulary plus a learned UNK row.
    #[default]
    Lookup,
    /// Fixed vectors read from a whitespace-separated text file
    /// (`token v1 ... vd` per line). Unknown tokens embed as zeros.
    External { path: PathBuf },
}

/// Token to row mapping for the lookup table. Row 0 is [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Sorted vocabulary of the given tokens, UNK first.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let uniq: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != UNK).collect();
        let mut all = vec![UNK.to_string()];
        all.extend(uniq.into_iter().map(String::from));
        Vocab::from(all)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Fixed per-token vectors supplied from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalVectors {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
    zero: Vec<f32>,
}

impl ExternalVectors {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::Vectors("zero-dimensional vectors".into()));
        }
        let mut tokens = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (tok, v) in entries {
            if v.len() != dim {
                return Err(ModelError::Vectors(format!(
                    "`{tok}` has {} values, expected {dim}",
                    v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(ModelError::Vectors(format!("`{tok}` has non-finite values")));
            }
            if index.insert(tok.clone(), tokens.len()).is_some() {
                return Err(ModelError::Vectors(format!("`{tok}` listed twice")));
            }
            tokens.push(tok);
            data.extend(v);
        }
        Ok(ExternalVectors {
            dim,
            tokens,
            index,
            data,
            zero: vec![0.0; dim],
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Vectors(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            // word2vec-style "count dim" header
            if lineno == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok())
            {
                continue;
            }
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f32>())
                .collect::<Result<Vec<f32>, _>>()
                .map_err(|e| {
                    ModelError::Vectors(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
            let d = *dim.get_or_insert(values.len());
            if d != values.len() {
                return Err(ModelError::Vectors(format!(
                    "{}:{}: expected {d} values",
                    path.display(),
                    lineno + 1
                )));
            }
            entries.push((fields[0].to_string(), values));
        }
        let dim = dim.ok_or_else(|| ModelError::Vectors(format!("{}: empty", path.display())))?;
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, token: &str) -> &[f32] {
        match self.index.get(token) {
            Some(&i) => &self.data[i * self.dim..(i + 1) * self.dim],
            None => &self.zero,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_sorted_with_unk_first() {
        let v = Vocab::build(["b", "a", "b", UNK]);
        assert_eq!(v.tokens(), &[UNK, "a", "b"]);
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("zzz"), 0);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn external_vectors_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "2 3\nleft 1 2 3\narrived 0.5 0 -1\n").unwrap();
        let v = ExternalVectors::load(&p).unwrap();
        assert_eq!(v.dim(), 3);
        assert_eq!(v.get("arrived"), &[0.5, 0.0, -1.0]);
        assert_eq!(v.get("unseen"), &[0.0; 3]);

        std::fs::write(&p, "left 1 2 3\narrived 0.5 0\n").unwrap();
        assert!(ExternalVectors::load(&p).is_err());
        std::fs::write(&p, "left 1 x 3\n").unwrap();
        assert!(ExternalVectors::load(&p).is_err());
    }
}
