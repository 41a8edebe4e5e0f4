//! Identifiers, versioned schemas, payload validation and schema evolution rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, Encoder};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("invalid operator id {0:?}: expected a non-empty token of [A-Za-z0-9_.-]")]
    InvalidOperatorId(String),
    #[error("schema {0} declares field {1:?} more than once")]
    DuplicateField(SchemaRef, String),
    #[error("schema name must not be empty")]
    EmptySchemaName,
    #[error("schema {0} is already registered with a different body")]
    SchemaConflict(SchemaRef),
    #[error("unknown schema {0}")]
    UnknownSchema(SchemaRef),
    #[error("cannot compare schema {old:?} with schema {new:?}")]
    NameMismatch { old: String, new: String },
    #[error("unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("malformed version {0:?}, expected <major>.<minor>")]
    MalformedVersion(String),
}

/// Identifier of a sovereign network operator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct OperatorId(String);

impl OperatorId {
    pub fn new(id: impl Into<String>) -> Result<Self, DomainError> {
        let id = id.into();
        let ok = !id.is_empty()
            && id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'));
        if ok {
            Ok(Self(id))
        } else {
            Err(DomainError::InvalidOperatorId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for OperatorId {
    type Error = DomainError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<OperatorId> for String {
    fn from(id: OperatorId) -> Self {
        id.0
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `(major, minor)` version pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Version {
    pub major: u32,
    pub minor: u32,
}

impl Version {
    pub const fn new(major: u32, minor: u32) -> Self {
        Self { major, minor }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.major, self.minor)
    }
}

impl FromStr for Version {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::MalformedVersion(s.to_string());
        let (major, minor) = s.split_once('.').ok_or_else(bad)?;
        Ok(Self {
            major: major.parse().map_err(|_| bad())?,
            minor: minor.parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for Version {
    type Error = DomainError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Version> for String {
    fn from(v: Version) -> Self {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticType {
    Number,
    Integer,
    String,
    Boolean,
    Timestamp,
    ListOfNumber,
}

/// Closed unit vocabulary. A mismatch is reported, never converted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Ms,
    Mbps,
    Percent,
    Count,
    Dimensionless,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Ms => "ms",
            Unit::Mbps => "mbps",
            Unit::Percent => "percent",
            Unit::Count => "count",
            Unit::Dimensionless => "dimensionless",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Unit::Ms => 1,
            Unit::Mbps => 2,
            Unit::Percent => 3,
            Unit::Count => 4,
            Unit::Dimensionless => 5,
        }
    }
}

impl FromStr for Unit {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ms" => Unit::Ms,
            "mbps" => Unit::Mbps,
            "percent" => Unit::Percent,
            "count" => Unit::Count,
            "dimensionless" => Unit::Dimensionless,
            other => return Err(DomainError::UnknownUnit(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: SemanticType,
    pub required: bool,
    pub unit: Unit,
}

impl FieldDef {
    pub fn required(name: &str, ty: SemanticType, unit: Unit) -> Self {
        Self { name: name.to_string(), ty, required: true, unit }
    }

    pub fn optional(name: &str, ty: SemanticType, unit: Unit) -> Self {
        Self { name: name.to_string(), ty, required: false, unit }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SchemaRef {
    pub name: String,
    pub version: Version,
}

impl SchemaRef {
    pub fn new(name: &str, version: Version) -> Self {
        Self { name: name.to_string(), version }
    }
}

impl fmt::Display for SchemaRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

impl FromStr for SchemaRef {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, version) = s
            .rsplit_once('@')
            .ok_or_else(|| DomainError::MalformedVersion(s.to_string()))?;
        if name.is_empty() {
            return Err(DomainError::EmptySchemaName);
        }
        Ok(Self { name: name.to_string(), version: version.parse()? })
    }
}

impl Canonical for SchemaRef {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.name)
            .u64(u64::from(self.version.major))
            .u64(u64::from(self.version.minor));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchemaDef {
    pub name: String,
    pub version: Version,
    pub fields: Vec<FieldDef>,
}

impl SchemaDef {
    pub fn new(name: &str, version: Version, fields: Vec<FieldDef>) -> Self {
        Self { name: name.to_string(), version, fields }
    }

    pub fn schema_ref(&self) -> SchemaRef {
        SchemaRef { name: self.name.clone(), version: self.version }
    }

    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn check_well_formed(&self) -> Result<(), DomainError> {
        if self.name.is_empty() {
            return Err(DomainError::EmptySchemaName);
        }
        let mut seen = BTreeSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(DomainError::DuplicateField(self.schema_ref(), f.name.clone()));
            }
        }
        Ok(())
    }

    /// Canonical text form: JSON with lexicographically sorted object keys.
    pub fn to_canonical_text(&self) -> String {
        // serde_json's default map type is ordered by key.
        let value = serde_json::to_value(self).expect("schema serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    /// Validates a payload against this schema. Violations are sorted by field name.
    pub fn validate(&self, payload: &Payload) -> Result<(), Vec<ContractViolation>> {
        let mut violations = Vec::new();
        for field in &self.fields {
            match payload.entries.get(&field.name) {
                None if field.required => violations.push(ContractViolation::new(&field.name, ViolationReason::Missing)),
                None => {}
                Some(entry) => {
                    if entry.value.semantic_type() != field.ty {
                        violations.push(ContractViolation::new(&field.name, ViolationReason::WrongType));
                    } else if entry.unit.is_some_and(|u| u != field.unit) {
                        violations.push(ContractViolation::new(&field.name, ViolationReason::WrongUnit));
                    }
                }
            }
        }
        for name in payload.entries.keys() {
            if self.field(name).is_none() {
                violations.push(ContractViolation::new(name, ViolationReason::UnknownField));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            violations.sort();
            Err(violations)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Value {
    Number(f64),
    Integer(i64),
    String(String),
    Boolean(bool),
    Timestamp(i64),
    ListOfNumber(Vec<f64>),
}

impl Value {
    pub fn semantic_type(&self) -> SemanticType {
        match self {
            Value::Number(_) => SemanticType::Number,
            Value::Integer(_) => SemanticType::Integer,
            Value::String(_) => SemanticType::String,
            Value::Boolean(_) => SemanticType::Boolean,
            Value::Timestamp(_) => SemanticType::Timestamp,
            Value::ListOfNumber(_) => SemanticType::ListOfNumber,
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        match self {
            Value::Number(v) => {
                enc.u64(1).f64(*v);
            }
            Value::Integer(v) => {
                enc.u64(2).i64(*v);
            }
            Value::String(s) => {
                enc.u64(3).str(s);
            }
            Value::Boolean(b) => {
                enc.u64(4).bool(*b);
            }
            Value::Timestamp(t) => {
                enc.u64(5).i64(*t);
            }
            Value::ListOfNumber(xs) => {
                enc.u64(6);
                xs.as_slice().encode(enc);
            }
        }
    }
}

/// A payload value with an optional unit tag. Untagged values are checked for type only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tagged {
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<Unit>,
}

/// Field name to value association.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Payload {
    entries: BTreeMap<String, Tagged>,
}

impl Payload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: Value) -> Self {
        self.insert(name, value);
        self
    }

    pub fn with_unit(mut self, name: &str, value: Value, unit: Unit) -> Self {
        self.entries.insert(name.to_string(), Tagged { value, unit: Some(unit) });
        self
    }

    pub fn insert(&mut self, name: &str, value: Value) {
        self.entries.insert(name.to_string(), Tagged { value, unit: None });
    }

    pub fn insert_tagged(&mut self, name: &str, tagged: Tagged) {
        self.entries.insert(name.to_string(), tagged);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tagged> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.entries.get(name).map(|t| &t.value)
    }

    pub fn get_tagged(&self, name: &str) -> Option<&Tagged> {
        self.entries.get(name)
    }

    pub fn number(&self, name: &str) -> Option<f64> {
        match self.get(name)? {
            Value::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn integer(&self, name: &str) -> Option<i64> {
        match self.get(name)? {
            Value::Integer(v) => Some(*v),
            _ => None,
        }
    }

    pub fn boolean(&self, name: &str) -> Option<bool> {
        match self.get(name)? {
            Value::Boolean(v) => Some(*v),
            _ => None,
        }
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        match self.get(name)? {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn list(&self, name: &str) -> Option<&[f64]> {
        match self.get(name)? {
            Value::ListOfNumber(xs) => Some(xs),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tagged)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Canonical for Payload {
    fn encode(&self, enc: &mut Encoder) {
        enc.len(self.entries.len());
        for (name, tagged) in &self.entries {
            enc.str(name);
            tagged.value.encode(enc);
            enc.u64(tagged.unit.map_or(0, Unit::tag));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationReason {
    Missing,
    WrongType,
    WrongUnit,
    UnknownField,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContractViolation {
    pub field: String,
    pub reason: ViolationReason,
}

impl ContractViolation {
    pub fn new(field: &str, reason: ViolationReason) -> Self {
        Self { field: field.to_string(), reason }
    }
}

impl fmt::Display for ContractViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reason = match self.reason {
            ViolationReason::Missing => "missing",
            ViolationReason::WrongType => "wrong-type",
            ViolationReason::WrongUnit => "wrong-unit",
            ViolationReason::UnknownField => "unknown-field",
        };
        write!(f, "{}: {}", self.field, reason)
    }
}

/// Formats a violation list as `a: missing, b: wrong-type`.
pub fn describe_violations(violations: &[ContractViolation]) -> String {
    violations.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Read-mostly store of schema definitions keyed by `(name, version)`.
#[derive(Debug, Default)]
pub struct SchemaRegistry {
    schemas: RwLock<BTreeMap<SchemaRef, SchemaDef>>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a schema. Re-registering an identical definition returns the same reference.
    pub fn register(&self, def: SchemaDef) -> Result<SchemaRef, DomainError> {
        def.check_well_formed()?;
        let key = def.schema_ref();
        let mut schemas = self.schemas.write().expect("schema registry lock poisoned");
        match schemas.get(&key) {
            Some(existing) if *existing == def => Ok(key),
            Some(_) => Err(DomainError::SchemaConflict(key)),
            None => {
                schemas.insert(key.clone(), def);
                Ok(key)
            }
        }
    }

    pub fn get(&self, schema: &SchemaRef) -> Result<SchemaDef, DomainError> {
        self.schemas
            .read()
            .expect("schema registry lock poisoned")
            .get(schema)
            .cloned()
            .ok_or_else(|| DomainError::UnknownSchema(schema.clone()))
    }

    pub fn contains(&self, schema: &SchemaRef) -> bool {
        self.schemas.read().expect("schema registry lock poisoned").contains_key(schema)
    }

    pub fn validate_payload(
        &self,
        schema: &SchemaRef,
        payload: &Payload,
    ) -> Result<Result<(), Vec<ContractViolation>>, DomainError> {
        let schemas = self.schemas.read().expect("schema registry lock poisoned");
        let def = schemas.get(schema).ok_or_else(|| DomainError::UnknownSchema(schema.clone()))?;
        Ok(def.validate(payload))
    }

    /// Canonical text export of every registered schema, ordered by `(name, version)`.
    pub fn export(&self) -> String {
        let schemas = self.schemas.read().expect("schema registry lock poisoned");
        let all: Vec<_> = schemas.values().collect();
        let value = serde_json::to_value(all).expect("schemas serialize");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "kebab-case")]
pub enum BreakingChange {
    FieldRemoved { field: String },
    FieldRetyped { field: String, from: SemanticType, to: SemanticType },
    UnitChanged { field: String, from: Unit, to: Unit },
    BecameRequired { field: String },
    RequiredFieldAdded { field: String },
    MajorVersionChanged { from: u32, to: u32 },
    VersionRegressed { from: Version, to: Version },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compatibility {
    Compatible,
    Breaking(Vec<BreakingChange>),
}

impl Compatibility {
    pub fn is_compatible(&self) -> bool {
        matches!(self, Compatibility::Compatible)
    }
}

/// Decides whether `new` may replace `old` without breaking producers of `old` payloads.
///
/// Only optional-field additions and minor version bumps are compatible.
pub fn check_compatibility(old: &SchemaDef, new: &SchemaDef) -> Result<Compatibility, DomainError> {
    if old.name != new.name {
        return Err(DomainError::NameMismatch { old: old.name.clone(), new: new.name.clone() });
    }
    let mut changes = Vec::new();
    if new.version < old.version {
        changes.push(BreakingChange::VersionRegressed { from: old.version, to: new.version });
    } else if new.version.major != old.version.major {
        changes.push(BreakingChange::MajorVersionChanged { from: old.version.major, to: new.version.major });
    }
    for before in &old.fields {
        match new.field(&before.name) {
            None => changes.push(BreakingChange::FieldRemoved { field: before.name.clone() }),
            Some(after) => {
                if after.ty != before.ty {
                    changes.push(BreakingChange::FieldRetyped {
                        field: before.name.clone(),
                        from: before.ty,
                        to: after.ty,
                    });
                }
                if after.unit != before.unit {
                    changes.push(BreakingChange::UnitChanged {
                        field: before.name.clone(),
                        from: before.unit,
                        to: after.unit,
                    });
                }
                if after.required && !before.required {
                    changes.push(BreakingChange::BecameRequired { field: before.name.clone() });
                }
            }
        }
    }
    for after in &new.fields {
        if after.required && old.field(&after.name).is_none() {
            changes.push(BreakingChange::RequiredFieldAdded { field: after.name.clone() });
        }
    }
    if changes.is_empty() {
        Ok(Compatibility::Compatible)
    } else {
        changes.sort();
        Ok(Compatibility::Breaking(changes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kpi_window_v(minor: u32) -> SchemaDef {
        SchemaDef::new(
            "kpi-window",
            Version::new(1, minor),
            vec![
                FieldDef::required("key", SemanticType::String, Unit::Dimensionless),
                FieldDef::required("value", SemanticType::Number, Unit::Ms),
                FieldDef::optional("note", SemanticType::String, Unit::Dimensionless),
            ],
        )
    }

    #[test]
    fn register_is_idempotent() {
        let reg = SchemaRegistry::new();
        let a = reg.register(kpi_window_v(0)).unwrap();
        let b = reg.register(kpi_window_v(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn register_conflict_on_altered_body() {
        let reg = SchemaRegistry::new();
        reg.register(kpi_window_v(0)).unwrap();
        let mut altered = kpi_window_v(0);
        altered.fields.pop();
        assert!(matches!(reg.register(altered), Err(DomainError::SchemaConflict(_))));
    }

    #[test]
    fn versions_are_distinct_refs() {
        let reg = SchemaRegistry::new();
        let a = reg.register(kpi_window_v(0)).unwrap();
        let b = reg.register(kpi_window_v(1)).unwrap();
        assert_ne!(a, b);
        assert_eq!(reg.get(&a).unwrap().version, Version::new(1, 0));
        assert_eq!(reg.get(&b).unwrap().version, Version::new(1, 1));
    }

    #[test]
    fn duplicate_field_names_rejected() {
        let mut def = kpi_window_v(0);
        def.fields.push(FieldDef::optional("key", SemanticType::String, Unit::Dimensionless));
        assert!(matches!(SchemaRegistry::new().register(def), Err(DomainError::DuplicateField(..))));
    }

    #[test]
    fn conforming_payload_ok() {
        let p = Payload::new().with("key", Value::String("latency".into())).with("value", Value::Number(3.0));
        assert_eq!(kpi_window_v(0).validate(&p), Ok(()));
    }

    #[test]
    fn missing_required_field() {
        let p = Payload::new().with("key", Value::String("latency".into()));
        assert_eq!(
            kpi_window_v(0).validate(&p),
            Err(vec![ContractViolation::new("value", ViolationReason::Missing)])
        );
    }

    #[test]
    fn wrong_type_field() {
        let p = Payload::new()
            .with("key", Value::String("latency".into()))
            .with("value", Value::String("3".into()));
        assert_eq!(
            kpi_window_v(0).validate(&p),
            Err(vec![ContractViolation::new("value", ViolationReason::WrongType)])
        );
    }

    #[test]
    fn wrong_unit_and_unknown_field_sorted() {
        let p = Payload::new()
            .with("zeta", Value::Number(1.0))
            .with("key", Value::String("latency".into()))
            .with_unit("value", Value::Number(3.0), Unit::Mbps)
            .with("alpha", Value::Boolean(true));
        assert_eq!(
            kpi_window_v(0).validate(&p),
            Err(vec![
                ContractViolation::new("alpha", ViolationReason::UnknownField),
                ContractViolation::new("value", ViolationReason::WrongUnit),
                ContractViolation::new("zeta", ViolationReason::UnknownField),
            ])
        );
    }

    #[test]
    fn unknown_schema_ref() {
        let reg = SchemaRegistry::new();
        let r = SchemaRef::new("nope", Version::new(1, 0));
        assert!(matches!(reg.validate_payload(&r, &Payload::new()), Err(DomainError::UnknownSchema(_))));
    }

    #[test]
    fn adding_optional_field_is_compatible() {
        let old = kpi_window_v(0);
        let mut new = kpi_window_v(1);
        new.fields.push(FieldDef::optional("extra", SemanticType::Integer, Unit::Count));
        assert_eq!(check_compatibility(&old, &new), Ok(Compatibility::Compatible));
    }

    #[test]
    fn removing_required_field_is_breaking() {
        let old = kpi_window_v(0);
        let mut new = kpi_window_v(0);
        new.version = Version::new(2, 0);
        new.fields.retain(|f| f.name != "value");
        let Compatibility::Breaking(changes) = check_compatibility(&old, &new).unwrap() else {
            panic!("expected breaking")
        };
        assert!(changes.contains(&BreakingChange::FieldRemoved { field: "value".into() }));
    }

    #[test]
    fn retyping_is_breaking_and_listed() {
        let old = kpi_window_v(0);
        let mut new = kpi_window_v(1);
        new.fields[1].ty = SemanticType::String;
        assert_eq!(
            check_compatibility(&old, &new),
            Ok(Compatibility::Breaking(vec![BreakingChange::FieldRetyped {
                field: "value".into(),
                from: SemanticType::Number,
                to: SemanticType::String,
            }]))
        );
    }

    #[test]
    fn optional_to_required_is_breaking() {
        let old = kpi_window_v(0);
        let mut new = kpi_window_v(1);
        new.fields[2].required = true;
        assert!(!check_compatibility(&old, &new).unwrap().is_compatible());
    }

    #[test]
    fn name_mismatch_is_error() {
        let old = kpi_window_v(0);
        let mut new = kpi_window_v(1);
        new.name = "other".into();
        assert!(matches!(check_compatibility(&old, &new), Err(DomainError::NameMismatch { .. })));
    }

    #[test]
    fn canonical_text_has_sorted_keys() {
        let text = kpi_window_v(0).to_canonical_text();
        let fields_pos = text.find("\"fields\"").unwrap();
        let name_pos = text.find("\"name\": \"kpi-window\"").unwrap();
        let version_pos = text.find("\"version\"").unwrap();
        assert!(fields_pos < name_pos && name_pos < version_pos);
        let back: SchemaDef = serde_json::from_str(&text).unwrap();
        assert_eq!(back, kpi_window_v(0));
    }

    #[test]
    fn schema_ref_parses() {
        let r: SchemaRef = "kpi.latency@1.2".parse().unwrap();
        assert_eq!(r, SchemaRef::new("kpi.latency", Version::new(1, 2)));
        assert_eq!(r.to_string(), "kpi.latency@1.2");
    }

    #[test]
    fn operator_id_rules() {
        assert!(OperatorId::new("op-a").is_ok());
        assert!(OperatorId::new("").is_err());
        assert!(OperatorId::new("a b").is_err());
    }

    fn arb_type() -> impl Strategy<Value = SemanticType> {
        prop_oneof![
            Just(SemanticType::Number),
            Just(SemanticType::Integer),
            Just(SemanticType::String),
            Just(SemanticType::Boolean),
        ]
    }

    fn value_of(ty: SemanticType, seed: i64) -> Value {
        match ty {
            SemanticType::Number => Value::Number(seed as f64 * 0.5),
            SemanticType::Integer => Value::Integer(seed),
            SemanticType::String => Value::String(format!("s{seed}")),
            SemanticType::Boolean => Value::Boolean(seed % 2 == 0),
            SemanticType::Timestamp => Value::Timestamp(seed.abs()),
            SemanticType::ListOfNumber => Value::ListOfNumber(vec![seed as f64]),
        }
    }

    fn arb_schema() -> impl Strategy<Value = SchemaDef> {
        prop::collection::vec((arb_type(), any::<bool>()), 1..6).prop_map(|fields| {
            SchemaDef::new(
                "gen",
                Version::new(1, 0),
                fields
                    .into_iter()
                    .enumerate()
                    .map(|(i, (ty, required))| FieldDef {
                        name: format!("f{i}"),
                        ty,
                        required,
                        unit: Unit::Count,
                    })
                    .collect(),
            )
        })
    }

    /// Random minor revision: optional additions and optional/required relaxations.
    fn revise(old: &SchemaDef, extra: usize, relax: &[bool], minor: u32) -> SchemaDef {
        let mut new = old.clone();
        new.version = Version::new(old.version.major, old.version.minor + minor);
        for (f, r) in new.fields.iter_mut().zip(relax) {
            if *r {
                f.required = false;
            }
        }
        let base = new.fields.len();
        for i in 0..extra {
            new.fields.push(FieldDef::optional(&format!("x{}_{i}", base + minor as usize), SemanticType::Number, Unit::Ms));
        }
        new
    }

    proptest! {
        #[test]
        fn validation_is_deterministic(schema in arb_schema(), present in prop::collection::vec(any::<(bool, i64, bool)>(), 6)) {
            let mut p = Payload::new();
            for (f, (keep, seed, wrong)) in schema.fields.iter().zip(&present) {
                if *keep {
                    let ty = if *wrong { SemanticType::ListOfNumber } else { f.ty };
                    p.insert(&f.name, value_of(ty, *seed));
                }
            }
            prop_assert_eq!(schema.validate(&p), schema.validate(&p.clone()));
        }

        #[test]
        fn compatible_schemas_accept_old_payloads(
            schema in arb_schema(),
            extra in 0usize..3,
            relax in prop::collection::vec(any::<bool>(), 6),
            optional_mask in prop::collection::vec(any::<bool>(), 6),
            seed in any::<i64>(),
        ) {
            let new = revise(&schema, extra, &relax, 1);
            prop_assert!(check_compatibility(&schema, &new).unwrap().is_compatible());
            let mut p = Payload::new();
            for (f, include) in schema.fields.iter().zip(&optional_mask) {
                if f.required || *include {
                    p.insert(&f.name, value_of(f.ty, seed));
                }
            }
            prop_assert_eq!(schema.validate(&p), Ok(()));
            prop_assert_eq!(new.validate(&p), Ok(()));
        }

        #[test]
        fn compatibility_is_transitive(schema in arb_schema(), e1 in 0usize..3, e2 in 0usize..3, r1 in prop::collection::vec(any::<bool>(), 6)) {
            let mid = revise(&schema, e1, &r1, 1);
            let last = revise(&mid, e2, &[], 1);
            prop_assert!(check_compatibility(&schema, &mid).unwrap().is_compatible());
            prop_assert!(check_compatibility(&mid, &last).unwrap().is_compatible());
            prop_assert!(check_compatibility(&schema, &last).unwrap().is_compatible());
        }
    }
}
