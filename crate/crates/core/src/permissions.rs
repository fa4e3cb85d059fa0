//! Manifest parsing, system-permission filtering, vocabularies, and one-hot
//! encoding of permission sets into binary vectors.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Namespace bound to the `android:` prefix in decoded manifests.
const ANDROID_NS: &str = "http://schemas.android.com/apk/res/android";

/// Prefix identifying permissions exposed by the Android platform itself.
pub const SYSTEM_PERMISSION_PREFIX: &str = "android.permission.";

/// A dot-separated permission identifier, e.g. `android.permission.SEND_SMS`.
///
/// Non-empty and free of whitespace by construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PermissionName(String);

impl PermissionName {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidPermissionName {
                name,
                reason: "empty".into(),
            });
        }
        if name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidPermissionName {
                name,
                reason: "contains whitespace".into(),
            });
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Whether this name lives in the Android platform namespace.
    pub fn is_system(&self) -> bool {
        self.0.starts_with(SYSTEM_PERMISSION_PREFIX)
    }
}

impl fmt::Display for PermissionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for PermissionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

/// Ordered mapping of permission names to feature indices. Its length is `P`,
/// the dimensionality of every vector encoded against it.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PermissionVocabulary {
    names: Vec<PermissionName>,
    index: HashMap<String, usize>,
}

impl PermissionVocabulary {
    /// Builds a vocabulary from an ordered sequence of unique names.
    pub fn new(names: Vec<PermissionName>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.as_str().to_owned(), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate permission {} in vocabulary",
                    name
                )));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[PermissionName] {
        &self.names
    }

    pub fn index_of(&self, name: &PermissionName) -> Option<usize> {
        self.index.get(name.as_str()).copied()
    }

    /// SHA-256 over the newline-joined names; identifies the feature space a
    /// model was trained against.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for name in &self.names {
            hasher.update(name.as_str().as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the vocabulary file: one permission per line, file order equals
    /// index order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name.as_str());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a vocabulary file written by [`save`](Self::save).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            names.push(
                PermissionName::new(line).map_err(|e| Error::MalformedLine {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?,
            );
        }
        Self::new(names)
    }
}

impl TryFrom<Vec<String>> for PermissionVocabulary {
    type Error = Error;

    fn try_from(raw: Vec<String>) -> Result<Self> {
        let names = raw
            .into_iter()
            .map(PermissionName::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(names)
    }
}

impl From<PermissionVocabulary> for Vec<String> {
    fn from(vocab: PermissionVocabulary) -> Self {
        vocab.names.into_iter().map(|n| n.0).collect()
    }
}

/// Binary vector `p` of length `P`; bit `i` is 1 when the `i`-th vocabulary
/// permission is requested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermissionVector {
    bits: Vec<u8>,
}

impl PermissionVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![0; len],
        }
    }

    /// Builds from raw bits; every element must be 0 or 1.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidConfig(format!(
                "permission vector entries must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, feature: usize) -> bool {
        self.bits[feature] != 0
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Number of positions where the two vectors differ.
    pub fn hamming(&self, other: &Self) -> usize {
        debug_assert_eq!(self.len(), other.len());
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Packs the bits into bytes (LSB-first within each byte) and encodes as
    /// base64; the inverse of [`from_base64`](Self::from_base64).
    pub fn to_base64(&self) -> String {
        use base64::Engine;
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            packed[i / 8] |= b << (i % 8);
        }
        base64::engine::general_purpose::STANDARD.encode(packed)
    }

    pub fn from_base64(encoded: &str, len: usize) -> Result<Self> {
        use base64::Engine;
        let packed = base64::engine::general_purpose::STANDARD
            .decode(encoded)
            .map_err(|e| Error::InvalidConfig(format!("invalid base64 bit string: {e}")))?;
        if packed.len() != len.div_ceil(8) {
            return Err(Error::DimensionMismatch {
                expected: len.div_ceil(8),
                got: packed.len(),
            });
        }
        let mut bits = vec![0u8; len];
        for (i, bit) in bits.iter_mut().enumerate() {
            *bit = (packed[i / 8] >> (i % 8)) & 1;
        }
        // Padding bits past `len` must be zero.
        for i in len..packed.len() * 8 {
            if (packed[i / 8] >> (i % 8)) & 1 != 0 {
                return Err(Error::InvalidConfig(
                    "nonzero padding bits in encoded vector".into(),
                ));
            }
        }
        Ok(Self { bits })
    }
}

/// Permissions extracted from one manifest, plus any non-fatal warnings
/// recorded along the way (e.g. `uses-permission` elements missing a name).
#[derive(Debug, Clone)]
pub struct ManifestPermissions {
    pub names: Vec<PermissionName>,
    pub warnings: Vec<String>,
}

/// Options for [`parse_manifest_with`].
#[derive(Debug, Clone, Copy)]
pub struct ManifestParseOptions {
    /// Also collect `uses-permission-sdk-23` elements. On by default.
    pub include_sdk23: bool,
}

impl Default for ManifestParseOptions {
    fn default() -> Self {
        Self {
            include_sdk23: true,
        }
    }
}

/// Extracts the `android:name` of every `uses-permission` (and, by default,
/// `uses-permission-sdk-23`) element from a decoded manifest, in document
/// order with duplicates removed keeping the first occurrence.
pub fn parse_manifest(xml_text: &str) -> Result<ManifestPermissions> {
    parse_manifest_with(xml_text, ManifestParseOptions::default())
}

pub fn parse_manifest_with(
    xml_text: &str,
    options: ManifestParseOptions,
) -> Result<ManifestPermissions> {
    let doc = roxmltree::Document::parse(xml_text).map_err(|e| {
        let pos = e.pos();
        Error::XmlParse {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;

    let mut names = Vec::new();
    let mut seen = HashSet::new();
    let mut warnings = Vec::new();

    for node in doc.descendants().filter(|n| n.is_element()) {
        let tag = node.tag_name().name();
        let wanted =
            tag == "uses-permission" || (options.include_sdk23 && tag == "uses-permission-sdk-23");
        if !wanted {
            continue;
        }
        let pos = doc.text_pos_at(node.range().start);
        let value = node
            .attribute((ANDROID_NS, "name"))
            .or_else(|| node.attribute("name"));
        match value {
            None => warnings.push(format!(
                "<{tag}> at line {}, column {} has no android:name attribute; skipped",
                pos.row, pos.col
            )),
            Some(raw) => match PermissionName::new(raw) {
                Ok(name) => {
                    if seen.insert(name.clone()) {
                        names.push(name);
                    }
                }
                Err(e) => warnings.push(format!(
                    "<{tag}> at line {}, column {}: {e}; skipped",
                    pos.row, pos.col
                )),
            },
        }
    }

    Ok(ManifestPermissions { names, warnings })
}

/// Keeps exactly the names prefixed `android.permission.`, preserving order.
pub fn filter_system_permissions(names: &[PermissionName]) -> Vec<PermissionName> {
    names.iter().filter(|n| n.is_system()).cloned().collect()
}

/// Builds the vocabulary as the lexicographically sorted union of all names.
pub fn build_vocabulary(permission_sets: &[Vec<PermissionName>]) -> PermissionVocabulary {
    let mut union: Vec<PermissionName> = permission_sets
        .iter()
        .flatten()
        .cloned()
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    union.sort();
    PermissionVocabulary::new(union).expect("union has no duplicates")
}

/// One-hot encodes `names` against `vocab`. Names absent from the vocabulary
/// are not an error; they are skipped and counted in the returned tally.
pub fn encode(names: &[PermissionName], vocab: &PermissionVocabulary) -> (PermissionVector, usize) {
    let mut vector = PermissionVector::zeros(vocab.len());
    let mut ignored = 0;
    for name in names {
        match vocab.index_of(name) {
            Some(i) => vector.bits[i] = 1,
            None => ignored += 1,
        }
    }
    (vector, ignored)
}

/// Parses a plain-text permission list: one name per line, `#` starts a
/// comment, blank lines ignored. Duplicates are kept (encoding is
/// set-semantic anyway).
pub fn parse_permission_list(text: &str, source: &str) -> Result<Vec<PermissionName>> {
    let mut names = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        names.push(
            PermissionName::new(line).map_err(|e| Error::MalformedLine {
                file: source.to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn name(s: &str) -> PermissionName {
        PermissionName::new(s).unwrap()
    }

    const SEND_SMS: &str = "android.permission.SEND_SMS";
    const INTERNET: &str = "android.permission.INTERNET";

    fn manifest(body: &str) -> String {
        format!(
            r#"<?xml version="1.0" encoding="utf-8"?>
<manifest xmlns:android="http://schemas.android.com/apk/res/android" package="com.example">
{body}
<application android:label="x"/>
</manifest>"#
        )
    }

    #[test]
    fn parse_manifest_empty() {
        let parsed = parse_manifest(&manifest("")).unwrap();
        assert!(parsed.names.is_empty());
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn parse_manifest_document_order() {
        let body = format!(
            r#"<uses-permission android:name="{SEND_SMS}"/>
<uses-permission android:name="{INTERNET}"/>"#
        );
        let parsed = parse_manifest(&manifest(&body)).unwrap();
        assert_eq!(parsed.names, vec![name(SEND_SMS), name(INTERNET)]);
    }

    #[test]
    fn parse_manifest_dedups_keeping_first() {
        let body = format!(
            r#"<uses-permission android:name="{SEND_SMS}"/>
<uses-permission android:name="{SEND_SMS}"/>"#
        );
        let parsed = parse_manifest(&manifest(&body)).unwrap();
        assert_eq!(parsed.names, vec![name(SEND_SMS)]);
    }

    #[test]
    fn parse_manifest_sdk23_flag() {
        let body = format!(r#"<uses-permission-sdk-23 android:name="{INTERNET}"/>"#);
        let parsed = parse_manifest(&manifest(&body)).unwrap();
        assert_eq!(parsed.names, vec![name(INTERNET)]);

        let excluded = parse_manifest_with(
            &manifest(&body),
            ManifestParseOptions {
                include_sdk23: false,
            },
        )
        .unwrap();
        assert!(excluded.names.is_empty());
    }

    #[test]
    fn parse_manifest_missing_name_warns() {
        let parsed = parse_manifest(&manifest("<uses-permission/>")).unwrap();
        assert!(parsed.names.is_empty());
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("no android:name"));
    }

    #[test]
    fn parse_manifest_malformed_xml_reports_position() {
        let err = parse_manifest("<manifest><uses-permission></manifest>").unwrap_err();
        match err {
            Error::XmlParse { line, .. } => assert!(line >= 1),
            other => panic!("expected XmlParse, got {other:?}"),
        }
    }

    #[test]
    fn filter_keeps_system_prefix_only() {
        let input = vec![name(SEND_SMS), name("com.foo.CUSTOM")];
        assert_eq!(filter_system_permissions(&input), vec![name(SEND_SMS)]);
        assert!(filter_system_permissions(&[]).is_empty());
        let all_custom = vec![name("com.a.X"), name("com.b.Y")];
        assert!(filter_system_permissions(&all_custom).is_empty());
    }

    #[test]
    fn build_vocabulary_examples() {
        let a = name("android.permission.A");
        let b = name("android.permission.B");
        let vocab = build_vocabulary(&[vec![a.clone()], vec![b.clone()]]);
        assert_eq!(vocab.names(), &[a.clone(), b.clone()]);
        assert_eq!(vocab.len(), 2);

        let vocab = build_vocabulary(&[vec![a.clone()], vec![a.clone()]]);
        assert_eq!(vocab.names(), &[a.clone()]);

        let vocab = build_vocabulary(&[]);
        assert_eq!(vocab.len(), 0);
    }

    #[test]
    fn encode_examples() {
        let vocab = build_vocabulary(&[vec![
            name("android.permission.A"),
            name("android.permission.B"),
            name("android.permission.C"),
        ]]);
        let (v, ignored) = encode(&[name("android.permission.B")], &vocab);
        assert_eq!(v.bits(), &[0, 1, 0]);
        assert_eq!(ignored, 0);

        let two = build_vocabulary(&[vec![
            name("android.permission.A"),
            name("android.permission.B"),
        ]]);
        let (v, ignored) = encode(&[], &two);
        assert_eq!(v.bits(), &[0, 0]);
        assert_eq!(ignored, 0);

        let (v, ignored) = encode(
            &[name("android.permission.A"), name("android.permission.Z_UNKNOWN")],
            &two,
        );
        assert_eq!(v.bits(), &[1, 0]);
        assert_eq!(ignored, 1);
    }

    #[test]
    fn permission_name_rejects_bad_input() {
        assert!(PermissionName::new("").is_err());
        assert!(PermissionName::new("has space").is_err());
        assert!(PermissionName::new("a.b.C").is_ok());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = build_vocabulary(&[vec![name(INTERNET), name(SEND_SMS)]]);
        vocab.save(&path).unwrap();
        let loaded = PermissionVocabulary::load(&path).unwrap();
        assert_eq!(loaded, vocab);

        // File order defines index order even when unsorted.
        std::fs::write(&path, format!("{SEND_SMS}\n{INTERNET}\n")).unwrap();
        let loaded = PermissionVocabulary::load(&path).unwrap();
        assert_eq!(loaded.index_of(&name(SEND_SMS)), Some(0));
        assert_eq!(loaded.index_of(&name(INTERNET)), Some(1));
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let dup = vec![name(SEND_SMS), name(SEND_SMS)];
        assert!(PermissionVocabulary::new(dup).is_err());
    }

    #[test]
    fn permission_list_parses_comments() {
        let text = format!("# header\n{SEND_SMS}\n\n  {INTERNET}  # trailing\n");
        let names = parse_permission_list(&text, "test.txt").unwrap();
        assert_eq!(names, vec![name(SEND_SMS), name(INTERNET)]);

        let err = parse_permission_list("bad name\n", "test.txt").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn base64_round_trip_odd_length() {
        let v = PermissionVector::from_bits(vec![1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 1]).unwrap();
        let restored = PermissionVector::from_base64(&v.to_base64(), v.len()).unwrap();
        assert_eq!(restored, v);
    }

    fn arb_names() -> impl Strategy<Value = Vec<PermissionName>> {
        proptest::collection::vec("[a-e]{1,3}", 0..12).prop_map(|raw| {
            raw.into_iter()
                .map(|s| name(&format!("android.permission.{s}")))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn encode_idempotent_under_dedup(names in arb_names()) {
            let vocab = build_vocabulary(&[names.clone()]);
            let mut dedup = Vec::new();
            for n in &names {
                if !dedup.contains(n) {
                    dedup.push(n.clone());
                }
            }
            prop_assert_eq!(encode(&names, &vocab), encode(&dedup, &vocab));
        }

        #[test]
        fn popcount_bounded(names in arb_names(), extra in arb_names()) {
            let vocab = build_vocabulary(&[extra]);
            let unique: HashSet<_> = names.iter().collect();
            let (v, _) = encode(&names, &vocab);
            prop_assert!(v.popcount() <= vocab.len().min(unique.len()));
        }

        #[test]
        fn filter_idempotent(raw in proptest::collection::vec("[a-z.]{1,20}", 0..10)) {
            let names: Vec<_> = raw
                .into_iter()
                .filter_map(|s| PermissionName::new(s).ok())
                .collect();
            let once = filter_system_permissions(&names);
            let twice = filter_system_permissions(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn vocabulary_permutation_invariant(names in arb_names(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let sets: Vec<Vec<PermissionName>> = names.iter().map(|n| vec![n.clone()]).collect();
            let mut shuffled = sets.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(build_vocabulary(&sets), build_vocabulary(&shuffled));
        }

        #[test]
        fn base64_round_trip(bits in proptest::collection::vec(0u8..=1, 0..64)) {
            let v = PermissionVector::from_bits(bits).unwrap();
            let restored = PermissionVector::from_base64(&v.to_base64(), v.len()).unwrap();
            prop_assert_eq!(restored, v);
        }
    }
}
