use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default marker panel. Creatinine comes first; the rest are routine renal,
/// electrolyte, bone and haematology tests.
pub const DEFAULT_MARKERS: [&str; 15] = [
    "CREA", "UREA", "K", "NA", "HCO3", "PHOS", "CA", "ALB", "HB", "CRP", "MG", "ALP", "PTH", "WBC",
    "PLT",
];

pub const CREATININE: &str = "CREA";

/// Ordered marker codes. Column `2i` of an encoded row is presence of marker
/// `i`, column `2i + 1` its abnormality flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct MarkerVocabulary {
    codes: Vec<String>,
    creatinine: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    codes: Vec<String>,
    creatinine: String,
}

impl TryFrom<VocabularyRepr> for MarkerVocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        MarkerVocabulary::new(repr.codes, &repr.creatinine)
    }
}

impl From<MarkerVocabulary> for VocabularyRepr {
    fn from(v: MarkerVocabulary) -> Self {
        VocabularyRepr {
            creatinine: v.codes[v.creatinine].clone(),
            codes: v.codes,
        }
    }
}

impl MarkerVocabulary {
    pub fn new<S: Into<String>>(codes: Vec<S>, creatinine: &str) -> Result<Self> {
        let codes: Vec<String> = codes.into_iter().map(Into::into).collect();
        if codes.is_empty() {
            return Err(Error::Config("marker vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(codes.len());
        for (i, code) in codes.iter().enumerate() {
            if code.is_empty() {
                return Err(Error::Config("empty marker code".into()));
            }
            if index.insert(code.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate marker code `{code}`")));
            }
        }
        let creatinine = *index.get(creatinine).ok_or_else(|| {
            Error::Config(format!("creatinine code `{creatinine}` not in vocabulary"))
        })?;
        Ok(MarkerVocabulary {
            codes,
            creatinine,
            index,
        })
    }

    pub fn standard() -> Self {
        Self::new(DEFAULT_MARKERS.to_vec(), CREATININE).expect("default panel is valid")
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    pub fn creatinine_index(&self) -> usize {
        self.creatinine
    }

    pub fn creatinine_code(&self) -> &str {
        &self.codes[self.creatinine]
    }

    pub fn is_creatinine(&self, code: &str) -> bool {
        code == self.creatinine_code()
    }

    /// Number of per-step features (presence + abnormal per marker).
    pub fn feature_width(&self) -> usize {
        2 * self.codes.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.codes
            .iter()
            .flat_map(|c| [format!("{c}_present"), format!("{c}_abnormal")])
            .collect()
    }

    /// Stable fingerprint of the column assignment.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for code in &self.codes {
            hasher.update(code.as_bytes());
            hasher.update(b"\n");
        }
        hasher.update(b"creatinine=");
        hasher.update(self.creatinine_code().as_bytes());
        hex::encode(hasher.finalize())
    }
}
