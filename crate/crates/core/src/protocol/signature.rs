//! Content addressing for code modules.
//!
//! A module's identity is the md5 digest of its canonical bytes. Canonical
//! form normalizes line endings to LF, strips trailing whitespace from every
//! line and ends the text with exactly one LF, so the same logical code hashes
//! identically regardless of the editor or platform that produced it.

use std::fmt;

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};

use super::ProtocolError;

/// Prefix of the reserved signature namespace used by builtin methods.
pub const BUILTIN_PREFIX: &str = "builtin:";

/// Version identity of the computation that produced a result.
///
/// Either a 32-char lowercase hex md5 digest of canonical module code, or a
/// reserved `builtin:<keyword>` tag for builtin methods.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(String);

impl Signature {
    /// Signature of the given source text.
    pub fn of_code(code: &str) -> Self {
        Signature(md5_hex(canonicalize_str(code).as_bytes()))
    }

    pub fn builtin(keyword: &str) -> Self {
        Signature(format!("{BUILTIN_PREFIX}{keyword}"))
    }

    /// Parses a signature string, accepting md5 hex or the builtin namespace.
    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        if is_md5_hex(s)
            || s.strip_prefix(BUILTIN_PREFIX)
                .is_some_and(|k| !k.is_empty())
        {
            Ok(Signature(s.to_owned()))
        } else {
            Err(ProtocolError::validation(
                "signature",
                format!(
                    "`{s}` is neither a 32-char lowercase md5 hex digest nor builtin:<keyword>"
                ),
            ))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_builtin(&self) -> bool {
        self.0.starts_with(BUILTIN_PREFIX)
    }

    /// Short form for human-facing output.
    pub fn short(&self) -> &str {
        if self.is_builtin() {
            &self.0
        } else {
            &self.0[..self.0.len().min(8)]
        }
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_md5_hex(s: &str) -> bool {
    s.len() == 32
        && s.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Lowercase hex md5 digest of raw bytes.
pub fn md5_hex(bytes: &[u8]) -> String {
    let digest = Md5::digest(bytes);
    let mut out = String::with_capacity(32);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Canonical bytes of `code`. Rejects input that is not valid UTF-8.
pub fn canonicalize(code: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    let text = std::str::from_utf8(code).map_err(|e| ProtocolError::Encoding {
        offset: e.valid_up_to(),
    })?;
    Ok(canonicalize_str(text).into_bytes())
}

/// Canonical form of already-decoded text.
pub fn canonicalize_str(code: &str) -> String {
    let unified = code.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len() + 1);
    for line in unified.split('\n') {
        out.push_str(line.trim_end());
        out.push('\n');
    }
    let keep = out.trim_end_matches('\n').len();
    out.truncate(keep);
    out.push('\n');
    out
}

/// md5 signature of the canonical form of `code`.
pub fn compute_signature(code: &[u8]) -> Result<Signature, ProtocolError> {
    Ok(Signature(md5_hex(&canonicalize(code)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_examples() {
        assert_eq!(canonicalize(b"mean(xs)").unwrap(), b"mean(xs)\n");
        assert_eq!(canonicalize(b"a\r\nb").unwrap(), b"a\nb\n");
        assert_eq!(canonicalize(b"a\rb").unwrap(), b"a\nb\n");
        assert_eq!(canonicalize(b"").unwrap(), b"\n");
        assert_eq!(canonicalize(b"x  \t\ny \n\n\n").unwrap(), b"x\ny\n");
    }

    #[test]
    fn non_utf8_is_an_encoding_error() {
        let err = canonicalize(&[b'a', 0xff, b'b']).unwrap_err();
        assert!(matches!(err, ProtocolError::Encoding { offset: 1 }));
    }

    #[test]
    fn rfc1321_vectors() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
        assert_eq!(
            md5_hex(b"message digest"),
            "f96b697d7cb7938d525a2f31aaf161d0"
        );
    }

    #[test]
    fn signature_of_empty_code_is_digest_of_single_lf() {
        // python3: hashlib.md5(b"\n").hexdigest()
        assert_eq!(
            compute_signature(b"").unwrap().as_str(),
            "68b329da9893e34099c7d8ad5cb9c940"
        );
        // python3: hashlib.md5(b"mean(xs)\n").hexdigest()
        assert_eq!(
            Signature::of_code("mean(xs)").as_str(),
            "c6ee0594e81d35adbe018b1853ae09a5"
        );
    }

    #[test]
    fn parse_accepts_only_known_shapes() {
        assert!(Signature::parse("c6ee0594e81d35adbe018b1853ae09a5").is_ok());
        assert!(Signature::parse("builtin:mean").is_ok());
        assert!(Signature::parse("builtin:").is_err());
        assert!(Signature::parse("C6EE0594E81D35ADBE018B1853AE09A5").is_err());
        assert!(Signature::parse("abc").is_err());
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(s in "[ a-z()\t\r\n+*/-]{0,64}") {
            let once = canonicalize(s.as_bytes()).unwrap();
            let twice = canonicalize(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn signature_ignores_line_endings_and_trailing_space(
            lines in proptest::collection::vec("[a-z0-9()+*/ ]{0,16}", 0..8),
            pad in "[ \t]{0,3}",
        ) {
            let lf = lines.join("\n");
            let crlf = lines.iter().map(|l| format!("{l}{pad}")).collect::<Vec<_>>().join("\r\n");
            prop_assert_eq!(Signature::of_code(&lf), Signature::of_code(&crlf));
        }
    }
}
