//! Signed, hash-chained audit ledger.
//!
//! Digests are SHA-256 and signatures are Ed25519 over the 32-byte `entry_hash`.
//! An entry's hash covers the canonical encoding of
//! `index (u64) ‖ timestamp (i64) ‖ entry_type token (string) ‖ payload_digest (bytes) ‖ prev_hash (bytes)`.
//! The first entry chains to `SHA-256("GENESIS")`.
//!
//! Export format, one entry per line, single spaces, lowercase hex, trailing newline:
//!
//! ```text
//! <index> <timestamp> <type> <payload_digest> <prev_hash> <entry_hash> <signer> <signature>
//! ```
//!
//! The signer id is the signer's 32-byte Ed25519 public key.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer as _, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{is_lower_hex, Digest, Encoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryType {
    Registration,
    Invocation,
    Insight,
    RoundStart,
    UpdateCommitment,
    RoundResult,
    RoundAbort,
    AuthorizationDenied,
    Violation,
}

impl EntryType {
    pub const ALL: [EntryType; 9] = [
        EntryType::Registration,
        EntryType::Invocation,
        EntryType::Insight,
        EntryType::RoundStart,
        EntryType::UpdateCommitment,
        EntryType::RoundResult,
        EntryType::RoundAbort,
        EntryType::AuthorizationDenied,
        EntryType::Violation,
    ];

    pub fn token(self) -> &'static str {
        match self {
            EntryType::Registration => "registration",
            EntryType::Invocation => "invocation",
            EntryType::Insight => "insight",
            EntryType::RoundStart => "round-start",
            EntryType::UpdateCommitment => "update-commitment",
            EntryType::RoundResult => "round-result",
            EntryType::RoundAbort => "round-abort",
            EntryType::AuthorizationDenied => "authorization-denied",
            EntryType::Violation => "violation",
        }
    }
}

impl fmt::Display for EntryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for EntryType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntryType::ALL
            .into_iter()
            .find(|t| t.token() == s)
            .ok_or_else(|| format!("unknown entry type {s:?}"))
    }
}

/// Public key of a ledger signer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId(pub [u8; 32]);

impl KeyId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn verifying_key(&self) -> Option<VerifyingKey> {
        VerifyingKey::from_bytes(&self.0).ok()
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", self.to_hex())
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Ed25519 signing identity. Keys are derived deterministically from a label and a seed.
#[derive(Clone)]
pub struct Signer {
    key: SigningKey,
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signer").field("key_id", &self.key_id()).finish()
    }
}

impl Signer {
    /// Secret key = `SHA-256("telos-signer" ‖ label ‖ u64_le(seed))`.
    pub fn derive(label: &str, seed: u64) -> Self {
        let mut enc = Encoder::new();
        enc.str("telos-signer").str(label).u64(seed);
        Self { key: SigningKey::from_bytes(&enc.to_digest().0) }
    }

    pub fn key_id(&self) -> KeyId {
        KeyId(self.key.verifying_key().to_bytes())
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.key.sign(message).to_bytes()
    }
}

/// Strict Ed25519 verification of `signature` over `message`.
pub fn verify_signature(key: &KeyId, message: &[u8], signature: &[u8; 64]) -> bool {
    key.verifying_key()
        .is_some_and(|vk| vk.verify_strict(message, &Signature::from_bytes(signature)).is_ok())
}

pub fn genesis_hash() -> Digest {
    Digest::of(b"GENESIS")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub index: u64,
    pub timestamp: i64,
    pub entry_type: EntryType,
    pub payload_digest: Digest,
    pub prev_hash: Digest,
    pub entry_hash: Digest,
    pub signer: KeyId,
    pub signature: [u8; 64],
}

impl LedgerEntry {
    pub fn compute_hash(&self) -> Digest {
        let mut enc = Encoder::new();
        enc.u64(self.index)
            .i64(self.timestamp)
            .str(self.entry_type.token())
            .digest(&self.payload_digest)
            .digest(&self.prev_hash);
        enc.to_digest()
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {}",
            self.index,
            self.timestamp,
            self.entry_type,
            self.payload_digest,
            self.prev_hash,
            self.entry_hash,
            self.signer,
            hex::encode(self.signature)
        )
    }
}

/// Signature check over `entry_hash` with `key`, which must also be the recorded signer.
pub fn verify_entry(entry: &LedgerEntry, key: &KeyId) -> bool {
    entry.signer == *key && verify_signature(key, &entry.entry_hash.0, &entry.signature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BreakReason {
    IndexMismatch,
    PrevHashMismatch,
    EntryHashMismatch,
    BadSignature,
    UntrustedSigner,
    TimestampRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("ledger chain broken at index {index}: {reason:?}")]
pub struct ChainBreak {
    pub index: u64,
    pub reason: BreakReason,
}

/// Recomputes every hash and signature. Returns the first position that fails.
pub fn verify_chain(entries: &[LedgerEntry]) -> Result<(), ChainBreak> {
    verify_chain_inner(entries, None)
}

/// [`verify_chain`], additionally requiring every signer to be in `trusted`.
pub fn verify_chain_trusted(entries: &[LedgerEntry], trusted: &BTreeSet<KeyId>) -> Result<(), ChainBreak> {
    verify_chain_inner(entries, Some(trusted))
}

fn verify_chain_inner(entries: &[LedgerEntry], trusted: Option<&BTreeSet<KeyId>>) -> Result<(), ChainBreak> {
    let mut prev = genesis_hash();
    let mut last_ts = i64::MIN;
    for (pos, e) in entries.iter().enumerate() {
        let index = pos as u64;
        let fail = |reason| Err(ChainBreak { index, reason });
        if e.index != index {
            return fail(BreakReason::IndexMismatch);
        }
        if e.prev_hash != prev {
            return fail(BreakReason::PrevHashMismatch);
        }
        if e.compute_hash() != e.entry_hash {
            return fail(BreakReason::EntryHashMismatch);
        }
        if trusted.is_some_and(|t| !t.contains(&e.signer)) {
            return fail(BreakReason::UntrustedSigner);
        }
        if !verify_entry(e, &e.signer) {
            return fail(BreakReason::BadSignature);
        }
        if e.timestamp < last_ts {
            return fail(BreakReason::TimestampRegression);
        }
        last_ts = e.timestamp;
        prev = e.entry_hash;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("timestamp {attempted} precedes the last entry's timestamp {last}")]
    TimestampRegression { last: i64, attempted: i64 },
    #[error("negative timestamp {0}")]
    NegativeTimestamp(i64),
    #[error(transparent)]
    Chain(#[from] ChainBreak),
}

/// Append-only ledger. Payload bytes are retained in memory for replay but never exported.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    payloads: Vec<Vec<u8>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(
        &mut self,
        payload: &[u8],
        entry_type: EntryType,
        signer: &Signer,
        timestamp: i64,
    ) -> Result<&LedgerEntry, LedgerError> {
        if timestamp < 0 {
            return Err(LedgerError::NegativeTimestamp(timestamp));
        }
        if let Some(last) = self.entries.last() {
            if timestamp < last.timestamp {
                return Err(LedgerError::TimestampRegression { last: last.timestamp, attempted: timestamp });
            }
        }
        let mut entry = LedgerEntry {
            index: self.entries.len() as u64,
            timestamp,
            entry_type,
            payload_digest: Digest::of(payload),
            prev_hash: self.entries.last().map_or_else(genesis_hash, |e| e.entry_hash),
            entry_hash: Digest::default(),
            signer: signer.key_id(),
            signature: [0; 64],
        };
        entry.entry_hash = entry.compute_hash();
        entry.signature = signer.sign(&entry.entry_hash.0);
        self.entries.push(entry);
        self.payloads.push(payload.to_vec());
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Payload bytes logged with the entry at `index`.
    pub fn payload(&self, index: usize) -> Option<&[u8]> {
        self.payloads.get(index).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.entries.last().map(|e| e.timestamp)
    }

    pub fn count(&self, entry_type: EntryType) -> usize {
        self.entries.iter().filter(|e| e.entry_type == entry_type).count()
    }
}

/// Exports a verified chain in the line format.
pub fn export(entries: &[LedgerEntry]) -> Result<String, ChainBreak> {
    verify_chain(entries)?;
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("ledger import failed at entry {line}: {reason}")]
pub struct ImportError {
    /// Zero-based line number, which equals the index of the entry on that line.
    pub line: u64,
    pub reason: String,
}

fn parse_decimal<T: FromStr>(field: &str) -> Option<T> {
    let canonical = !field.is_empty()
        && field.bytes().all(|b| b.is_ascii_digit())
        && (field == "0" || !field.starts_with('0'));
    if canonical {
        field.parse().ok()
    } else {
        None
    }
}

fn parse_line(line: &[u8]) -> Result<LedgerEntry, String> {
    let text = std::str::from_utf8(line).map_err(|_| "line is not valid UTF-8".to_string())?;
    let fields: Vec<&str> = text.split(' ').collect();
    let [index, timestamp, ty, payload, prev, hash, signer, signature] = fields[..] else {
        return Err(format!("expected 8 space-separated fields, found {}", fields.len()));
    };
    let digest = |name: &str, s: &str| Digest::from_hex(s).ok_or_else(|| format!("{name} is not 64 lowercase hex digits"));
    let signer_bytes = Digest::from_hex(signer).ok_or("signer is not 64 lowercase hex digits")?;
    if signature.len() != 128 || !is_lower_hex(signature) {
        return Err("signature is not 128 lowercase hex digits".into());
    }
    let mut sig = [0u8; 64];
    hex::decode_to_slice(signature, &mut sig).map_err(|e| e.to_string())?;
    let entry = LedgerEntry {
        index: parse_decimal(index).ok_or("index is not a canonical decimal")?,
        timestamp: parse_decimal(timestamp).ok_or("timestamp is not a canonical decimal")?,
        entry_type: ty.parse()?,
        payload_digest: digest("payload_digest", payload)?,
        prev_hash: digest("prev_hash", prev)?,
        entry_hash: digest("entry_hash", hash)?,
        signer: KeyId(signer_bytes.0),
        signature: sig,
    };
    if entry.to_line().as_bytes() != line {
        return Err("line is not in canonical form".into());
    }
    Ok(entry)
}

/// Parses an exported document. Structural checks only; run [`verify_chain`] afterwards.
pub fn import(document: &[u8]) -> Result<Vec<LedgerEntry>, ImportError> {
    let mut entries = Vec::new();
    let mut rest = document;
    let mut line_no = 0u64;
    while !rest.is_empty() {
        let Some(end) = rest.iter().position(|b| *b == b'\n') else {
            return Err(ImportError { line: line_no, reason: "truncated line (no trailing newline)".into() });
        };
        let entry = parse_line(&rest[..end]).map_err(|reason| ImportError { line: line_no, reason })?;
        entries.push(entry);
        rest = &rest[end + 1..];
        line_no += 1;
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Import(#[from] ImportError),
    #[error(transparent)]
    Chain(#[from] ChainBreak),
}

impl VerifyError {
    /// First bad entry index.
    pub fn index(&self) -> u64 {
        match self {
            VerifyError::Import(e) => e.line,
            VerifyError::Chain(c) => c.index,
        }
    }
}

/// Import followed by chain verification.
pub fn import_verified(document: &[u8]) -> Result<Vec<LedgerEntry>, VerifyError> {
    let entries = import(document)?;
    verify_chain(&entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Ledger {
        let signer = Signer::derive("test", 1);
        let mut l = Ledger::new();
        for i in 0..n {
            let ty = EntryType::ALL[i % EntryType::ALL.len()];
            l.append(format!("payload {i}").as_bytes(), ty, &signer, (i / 3) as i64).unwrap();
        }
        l
    }

    #[test]
    fn genesis_constant() {
        let l = sample(1);
        assert_eq!(l.entries()[0].prev_hash, Digest::of(b"GENESIS"));
        assert_eq!(
            genesis_hash().to_hex(),
            "901131d838b17aac0f7885b81e03cbdc9f5157a00343d30ab22083685ed1416a"
        );
    }

    #[test]
    fn chain_links() {
        let l = sample(2);
        assert_eq!(l.entries()[1].prev_hash, l.entries()[0].entry_hash);
    }

    #[test]
    fn clock_regression_rejected() {
        let signer = Signer::derive("test", 1);
        let mut l = Ledger::new();
        l.append(b"a", EntryType::Invocation, &signer, 10).unwrap();
        assert_eq!(
            l.append(b"b", EntryType::Invocation, &signer, 9).unwrap_err(),
            LedgerError::TimestampRegression { last: 10, attempted: 9 }
        );
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn untampered_chain_verifies() {
        assert_eq!(verify_chain(sample(100).entries()), Ok(()));
        assert_eq!(verify_chain(&[]), Ok(()));
    }

    #[test]
    fn payload_digest_flip_detected_at_index() {
        let mut entries = sample(100).entries().to_vec();
        entries[42].payload_digest.0[5] ^= 0x01;
        assert_eq!(verify_chain(&entries).unwrap_err().index, 42);
    }

    #[test]
    fn deleted_entry_breaks_contiguity() {
        let mut entries = sample(30).entries().to_vec();
        entries.remove(10);
        assert_eq!(
            verify_chain(&entries).unwrap_err(),
            ChainBreak { index: 10, reason: BreakReason::IndexMismatch }
        );
    }

    #[test]
    fn verify_entry_cases() {
        let l = sample(3);
        let e = &l.entries()[1];
        let right = Signer::derive("test", 1).key_id();
        let wrong = Signer::derive("other", 1).key_id();
        assert!(verify_entry(e, &right));
        assert!(!verify_entry(e, &wrong));
        let mut mutated = e.clone();
        mutated.entry_hash.0[0] ^= 0x80;
        assert!(!verify_entry(&mutated, &right));
    }

    #[test]
    fn trusted_signers() {
        let l = sample(3);
        let mut trusted = BTreeSet::new();
        assert_eq!(verify_chain_trusted(l.entries(), &trusted).unwrap_err().reason, BreakReason::UntrustedSigner);
        trusted.insert(Signer::derive("test", 1).key_id());
        assert_eq!(verify_chain_trusted(l.entries(), &trusted), Ok(()));
    }

    #[test]
    fn export_import_round_trip() {
        let l = sample(20);
        let doc = export(l.entries()).unwrap();
        let back = import(doc.as_bytes()).unwrap();
        assert_eq!(back, l.entries());
        assert_eq!(export(&back).unwrap(), doc);
    }

    #[test]
    fn truncated_document_errors_at_line() {
        let doc = export(sample(5).entries()).unwrap();
        let cut = &doc.as_bytes()[..doc.len() - 40];
        assert_eq!(import(cut).unwrap_err().line, 4);
    }

    #[test]
    fn hand_edited_hex_imports_but_fails_verification() {
        let doc = export(sample(5).entries()).unwrap();
        let mut lines: Vec<String> = doc.lines().map(str::to_string).collect();
        let mut fields: Vec<String> = lines[3].split(' ').map(str::to_string).collect();
        let first = fields[3].remove(0);
        fields[3].insert(0, if first == '0' { '1' } else { '0' });
        lines[3] = fields.join(" ");
        let edited = lines.join("\n") + "\n";
        let entries = import(edited.as_bytes()).unwrap();
        assert_eq!(verify_chain(&entries).unwrap_err().index, 3);
    }

    #[test]
    fn uppercase_hex_is_rejected() {
        let doc = export(sample(2).entries()).unwrap();
        let upper = doc.replacen(&doc.lines().next().unwrap()[..], &doc.lines().next().unwrap().to_uppercase(), 1);
        assert_eq!(import(upper.as_bytes()).unwrap_err().line, 0);
    }

    #[test]
    fn empty_document_is_empty_chain() {
        assert_eq!(import_verified(b"").unwrap(), Vec::new());
    }
}
