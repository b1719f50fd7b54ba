//! Relation label vocabularies and dataset profiles.
//!
//! A profile is an ordered list of relation names. The position of a
//! relation in that list is its [`LabelId`]; position 0 is always
//! [`Relation::None`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("unknown relation name `{0}`")]
    UnknownRelation(String),
    #[error("label id {id} is outside profile `{profile}` ({count} labels)")]
    UnknownLabelId {
        id: usize,
        profile: String,
        count: usize,
    },
    #[error("relation {0} is not part of profile `{1}`")]
    NotInProfile(Relation, String),
    #[error("NONE has no canonical direction")]
    NoneHasNoDirection,
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("profile mismatch: expected {expected}, found {found}")]
    Mismatch { expected: String, found: String },
}

/// Temporal relation between two events, read as "source REL target".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Relation {
    None,
    Before,
    After,
    Includes,
    IsIncluded,
    Simultaneous,
    Vague,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::None,
        Relation::Before,
        Relation::After,
        Relation::Includes,
        Relation::IsIncluded,
        Relation::Simultaneous,
        Relation::Vague,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::None => "NONE",
            Relation::Before => "BEFORE",
            Relation::After => "AFTER",
            Relation::Includes => "INCLUDES",
            Relation::IsIncluded => "IS_INCLUDED",
            Relation::Simultaneous => "SIMULTANEOUS",
            Relation::Vague => "VAGUE",
        }
    }

    /// The relation seen from the other endpoint. An involution.
    pub fn inverse(self) -> Relation {
        match self {
            Relation::Before => Relation::After,
            Relation::After => Relation::Before,
            Relation::Includes => Relation::IsIncluded,
            Relation::IsIncluded => Relation::Includes,
            other => other,
        }
    }

    pub fn is_self_inverse(self) -> bool {
        self.inverse() == self
    }

    /// Whether this label's source token carries the gold arc.
    ///
    /// The canonical set is {BEFORE, INCLUDES, SIMULTANEOUS, VAGUE}.
    pub fn is_canonical(self) -> Result<bool, SchemaError> {
        match self {
            Relation::None => Err(SchemaError::NoneHasNoDirection),
            Relation::Before | Relation::Includes | Relation::Simultaneous | Relation::Vague => {
                Ok(true)
            }
            Relation::After | Relation::IsIncluded => Ok(false),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rel = match s {
            "NONE" => Relation::None,
            "BEFORE" => Relation::Before,
            "AFTER" => Relation::After,
            // TimeML spells it both ways.
            "INCLUDES" | "INCLUDE" => Relation::Includes,
            "IS_INCLUDED" => Relation::IsIncluded,
            "SIMULTANEOUS" => Relation::Simultaneous,
            "VAGUE" => Relation::Vague,
            other => return Err(SchemaError::UnknownRelation(other.to_string())),
        };
        Ok(rel)
    }
}

impl TryFrom<String> for Relation {
    type Error = SchemaError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Relation> for String {
    fn from(r: Relation) -> String {
        r.name().to_string()
    }
}

/// Dense, profile-relative label index. `LabelId(0)` is NONE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub u8);

impl LabelId {
    pub const NONE: LabelId = LabelId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_none(self) -> bool {
        self.0 == 0
    }
}

/// A closed label vocabulary with a stable id ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRepr", into = "ProfileRepr")]
pub struct DatasetProfile {
    name: String,
    labels: Vec<Relation>,
    inverse_ids: Vec<LabelId>,
}

#[derive(Serialize, Deserialize)]
struct ProfileRepr {
    name: String,
    labels: Vec<Relation>,
}

impl TryFrom<ProfileRepr> for DatasetProfile {
    type Error = SchemaError;

    fn try_from(r: ProfileRepr) -> Result<Self, Self::Error> {
        DatasetProfile::new(r.name, r.labels)
    }
}

impl From<DatasetProfile> for ProfileRepr {
    fn from(p: DatasetProfile) -> Self {
        ProfileRepr {
            name: p.name,
            labels: p.labels,
        }
    }
}

impl DatasetProfile {
    /// Builds a profile from an ordered label list (NONE first).
    pub fn new(name: impl Into<String>, labels: Vec<Relation>) -> Result<Self, SchemaError> {
        let name = name.into();
        let invalid = |reason: &str| SchemaError::InvalidProfile {
            name: name.clone(),
            reason: reason.to_string(),
        };
        if labels.first() != Some(&Relation::None) {
            return Err(invalid("label 0 must be NONE"));
        }
        if labels.len() < 2 {
            return Err(invalid("at least one non-NONE label is required"));
        }
        if labels.len() > u8::MAX as usize {
            return Err(invalid("too many labels"));
        }
        let mut seen = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if seen.insert(l, i).is_some() {
                return Err(invalid(&format!("duplicate label {l}")));
            }
        }
        let mut inverse_ids = Vec::with_capacity(labels.len());
        for l in &labels {
            match seen.get(&l.inverse()) {
                Some(&j) => inverse_ids.push(LabelId(j as u8)),
                None => return Err(invalid(&format!("inverse of {l} is missing"))),
            }
        }
        Ok(DatasetProfile {
            name,
            labels,
            inverse_ids,
        })
    }

    /// TB-Dense: BEFORE, AFTER, SIMULTANEOUS, VAGUE, INCLUDES, IS_INCLUDED.
    pub fn tbdense() -> Self {
        Self::new(
            "tbdense",
            vec![
                Relation::None,
                Relation::Before,
                Relation::After,
                Relation::Simultaneous,
                Relation::Vague,
                Relation::Includes,
                Relation::IsIncluded,
            ],
        )
        .expect("builtin profile is valid")
    }

    /// MATRES: BEFORE, AFTER, SIMULTANEOUS, VAGUE.
    pub fn matres() -> Self {
        Self::new(
            "matres",
            vec![
                Relation::None,
                Relation::Before,
                Relation::After,
                Relation::Simultaneous,
                Relation::Vague,
            ],
        )
        .expect("builtin profile is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// All labels including NONE, in id order.
    pub fn labels(&self) -> &[Relation] {
        &self.labels
    }

    /// Number of labels including NONE.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of labels excluding NONE.
    pub fn relation_count(&self) -> usize {
        self.labels.len() - 1
    }

    /// Non-NONE labels with their ids.
    pub fn relations(&self) -> impl Iterator<Item = (LabelId, Relation)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &r)| (LabelId(i as u8), r))
    }

    pub fn relation(&self, id: LabelId) -> Result<Relation, SchemaError> {
        self.labels
            .get(id.index())
            .copied()
            .ok_or_else(|| self.unknown_id(id.index()))
    }

    pub fn id_of(&self, rel: Relation) -> Result<LabelId, SchemaError> {
        self.labels
            .iter()
            .position(|&l| l == rel)
            .map(|i| LabelId(i as u8))
            .ok_or_else(|| SchemaError::NotInProfile(rel, self.name.clone()))
    }

    pub fn inverse(&self, id: LabelId) -> Result<LabelId, SchemaError> {
        self.inverse_ids
            .get(id.index())
            .copied()
            .ok_or_else(|| self.unknown_id(id.index()))
    }

    pub fn is_canonical(&self, id: LabelId) -> Result<bool, SchemaError> {
        self.relation(id)?.is_canonical()
    }

    /// Canonical subset of the non-NONE labels.
    pub fn canonical_set(&self) -> Vec<Relation> {
        self.labels
            .iter()
            .copied()
            .filter(|r| r.is_canonical().unwrap_or(false))
            .collect()
    }

    /// Fails unless `other` has the same name and label order.
    pub fn ensure_matches(&self, other: &DatasetProfile) -> Result<(), SchemaError> {
        if self == other {
            Ok(())
        } else {
            Err(SchemaError::Mismatch {
                expected: self.describe(),
                found: other.describe(),
            })
        }
    }

    fn describe(&self) -> String {
        let names: Vec<&str> = self.labels.iter().map(|l| l.name()).collect();
        format!("{}[{}]", self.name, names.join(","))
    }

    fn unknown_id(&self, id: usize) -> SchemaError {
        SchemaError::UnknownLabelId {
            id,
            profile: self.name.clone(),
            count: self.labels.len(),
        }
    }
}

/// Builtin profiles plus any user-registered ones.
#[derive(Debug, Clone)]
pub struct ProfileRegistry {
    profiles: BTreeMap<String, DatasetProfile>,
}

impl Default for ProfileRegistry {
    fn default() -> Self {
        let mut profiles = BTreeMap::new();
        for p in [DatasetProfile::tbdense(), DatasetProfile::matres()] {
            profiles.insert(p.name.clone(), p);
        }
        ProfileRegistry { profiles }
    }
}

impl ProfileRegistry {
    pub fn register(&mut self, profile: DatasetProfile) -> Result<(), SchemaError> {
        if let Some(existing) = self.profiles.get(profile.name()) {
            existing.ensure_matches(&profile)?;
        }
        self.profiles.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<DatasetProfile, SchemaError> {
        self.profiles
            .get(name)
            .cloned()
            .ok_or_else(|| SchemaError::UnknownProfile(name.to_string()))
    }
}

/// Looks up a builtin profile by name.
pub fn profile(name: &str) -> Result<DatasetProfile, SchemaError> {
    ProfileRegistry::default().get(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_table() {
        assert_eq!(Relation::Before.inverse(), Relation::After);
        assert_eq!(Relation::Simultaneous.inverse(), Relation::Simultaneous);
        assert_eq!(Relation::Includes.inverse().inverse(), Relation::Includes);
        assert_eq!(Relation::None.inverse(), Relation::None);
        for r in Relation::ALL {
            assert_eq!(r.inverse().inverse(), r);
        }
    }

    #[test]
    fn canonical_choice() {
        assert!(Relation::Before.is_canonical().unwrap());
        assert!(!Relation::After.is_canonical().unwrap());
        assert!(Relation::Vague.is_canonical().unwrap());
        assert_eq!(
            Relation::None.is_canonical(),
            Err(SchemaError::NoneHasNoDirection)
        );
        for r in &Relation::ALL[1..] {
            let a = r.is_canonical().unwrap();
            let b = r.inverse().is_canonical().unwrap();
            if r.is_self_inverse() {
                assert!(a && b);
            } else {
                assert!(a ^ b, "{r}");
            }
        }
    }

    #[test]
    fn builtin_profiles() {
        let tb = profile("tbdense").unwrap();
        assert_eq!(tb.relation_count(), 6);
        assert_eq!(tb.relation(LabelId(0)).unwrap(), Relation::None);
        let mt = profile("matres").unwrap();
        assert_eq!(mt.relation_count(), 4);
        assert!(mt.id_of(Relation::Includes).is_err());
        assert_eq!(profile("tbdense").unwrap(), tb);
        assert!(matches!(
            profile("timebank"),
            Err(SchemaError::UnknownProfile(_))
        ));
    }

    #[test]
    fn profile_inverse_by_id() {
        let tb = DatasetProfile::tbdense();
        for (id, rel) in tb.relations() {
            let inv = tb.inverse(id).unwrap();
            assert_eq!(tb.relation(inv).unwrap(), rel.inverse());
            assert_eq!(tb.inverse(inv).unwrap(), id);
        }
        assert_eq!(tb.inverse(LabelId::NONE).unwrap(), LabelId::NONE);
        assert!(matches!(
            tb.inverse(LabelId(9)),
            Err(SchemaError::UnknownLabelId { .. })
        ));
    }

    #[test]
    fn canonical_set_contents() {
        let tb = DatasetProfile::tbdense();
        assert_eq!(
            tb.canonical_set(),
            vec![
                Relation::Before,
                Relation::Simultaneous,
                Relation::Vague,
                Relation::Includes
            ]
        );
    }

    #[test]
    fn custom_profile_validation() {
        assert!(DatasetProfile::new("x", vec![Relation::Before, Relation::After]).is_err());
        assert!(DatasetProfile::new("x", vec![Relation::None, Relation::Before]).is_err());
        let p = DatasetProfile::new("order", vec![Relation::None, Relation::After, Relation::Before])
            .unwrap();
        let mut reg = ProfileRegistry::default();
        reg.register(p.clone()).unwrap();
        assert_eq!(reg.get("order").unwrap(), p);
        assert!(reg.register(DatasetProfile::matres().clone()).is_ok());
    }

    #[test]
    fn profile_serde_roundtrip_and_mismatch() {
        let tb = DatasetProfile::tbdense();
        let json = serde_json::to_string(&tb).unwrap();
        assert!(json.contains("\"IS_INCLUDED\""));
        let back: DatasetProfile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tb);
        assert!(tb.ensure_matches(&DatasetProfile::matres()).is_err());
    }
}
