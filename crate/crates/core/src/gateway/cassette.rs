//! Record/replay of model exchanges.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "OCCCAS01" u32:count  count x { u32:len hash  u32:len summary  u32:len response }
//! response = u8:tag (0 text, 1 refusal, 2 transport) + UTF-8 payload
//! ```
//!
//! Records are sorted by hash, so identical exchanges always produce an
//! identical file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{Backend, GatewayError, LvmOutcome, LvmRequest};

pub const CASSETTE_MAGIC: &[u8; 8] = b"OCCCAS01";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CassetteEntry {
    pub summary: String,
    pub outcome: LvmOutcome,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cassette {
    entries: BTreeMap<String, CassetteEntry>,
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn encode_outcome(o: &LvmOutcome) -> Vec<u8> {
    let (tag, s) = match o {
        LvmOutcome::Text(s) => (0u8, s),
        LvmOutcome::Refusal(s) => (1, s),
        LvmOutcome::TransportError(s) => (2, s),
    };
    let mut v = Vec::with_capacity(s.len() + 1);
    v.push(tag);
    v.extend_from_slice(s.as_bytes());
    v
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GatewayError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GatewayError::Cassette(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GatewayError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn field(&mut self) -> Result<&'a [u8], GatewayError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, GatewayError> {
        String::from_utf8(self.field()?.to_vec())
            .map_err(|_| GatewayError::Cassette("field is not UTF-8".into()))
    }
}

impl Cassette {
    pub fn new() -> Self {
        Cassette::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, hash: &str) -> Option<&CassetteEntry> {
        self.entries.get(hash)
    }

    pub fn insert(&mut self, hash: impl Into<String>, entry: CassetteEntry) {
        self.entries.insert(hash.into(), entry);
    }

    pub fn hashes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CASSETTE_MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (hash, e) in &self.entries {
            put_field(&mut out, hash.as_bytes());
            put_field(&mut out, e.summary.as_bytes());
            put_field(&mut out, &encode_outcome(&e.outcome));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GatewayError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CASSETTE_MAGIC {
            return Err(GatewayError::Cassette("bad magic header".into()));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let hash = r.string()?;
            let summary = r.string()?;
            let resp = r.field()?;
            let (&tag, payload) = resp
                .split_first()
                .ok_or_else(|| GatewayError::Cassette("empty response record".into()))?;
            let payload = String::from_utf8(payload.to_vec())
                .map_err(|_| GatewayError::Cassette("response is not UTF-8".into()))?;
            let outcome = match tag {
                0 => LvmOutcome::Text(payload),
                1 => LvmOutcome::Refusal(payload),
                2 => LvmOutcome::TransportError(payload),
                t => return Err(GatewayError::Cassette(format!("unknown response tag {t}"))),
            };
            if entries.insert(hash.clone(), CassetteEntry { summary, outcome }).is_some() {
                return Err(GatewayError::Cassette(format!("duplicate hash {hash}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(GatewayError::Cassette("trailing bytes".into()));
        }
        Ok(Cassette { entries })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.display())))?;
        Cassette::decode(&bytes)
    }

    /// Writes via a sibling temp file and rename.
    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let err = |e: std::io::Error| GatewayError::Cassette(format!("{}: {e}", path.display()));
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp).map_err(err)?;
            f.write_all(&self.encode()).map_err(err)?;
            f.sync_all().map_err(err)?;
        }
        std::fs::rename(&tmp, path).map_err(err)
    }
}

/// Passes calls to `inner` and persists each answered exchange.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    path: PathBuf,
    cassette: Mutex<Cassette>,
    id: String,
}

impl RecordingBackend {
    /// Appends to an existing cassette at `path` if there is one.
    pub fn new(inner: Arc<dyn Backend>, path: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let path = path.into();
        let cassette = if path.exists() {
            Cassette::load(&path)?
        } else {
            Cassette::new()
        };
        Ok(RecordingBackend {
            id: format!("record:{}", inner.id()),
            inner,
            path,
            cassette: Mutex::new(cassette),
        })
    }

    pub fn snapshot(&self) -> Cassette {
        self.cassette.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl Backend for RecordingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn is_live(&self) -> bool {
        self.inner.is_live()
    }

    fn call(&self, req: &LvmRequest, hash: &str) -> Result<LvmOutcome, GatewayError> {
        let outcome = self.inner.call(req, hash)?;
        let mut c = self.cassette.lock().unwrap_or_else(|p| p.into_inner());
        c.insert(
            hash,
            CassetteEntry {
                summary: req.bundle.summary(),
                outcome: outcome.clone(),
            },
        );
        c.save(&self.path)?;
        Ok(outcome)
    }
}

/// Serves recorded outcomes; a miss is an error naming the hash.
#[derive(Clone, Debug)]
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette }
    }

    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        Ok(ReplayBackend::new(Cassette::load(path)?))
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn call(&self, _req: &LvmRequest, hash: &str) -> Result<LvmOutcome, GatewayError> {
        self.cassette
            .get(hash)
            .map(|e| e.outcome.clone())
            .ok_or_else(|| GatewayError::ReplayMiss {
                hash: hash.to_string(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Cassette {
        let mut c = Cassette::new();
        c.insert(
            "bb",
            CassetteEntry {
                summary: "s/c2".into(),
                outcome: LvmOutcome::Refusal("no".into()),
            },
        );
        c.insert(
            "aa",
            CassetteEntry {
                summary: "s/c1".into(),
                outcome: LvmOutcome::Text("FINAL ANSWER: KEEP \u{2713}".into()),
            },
        );
        c
    }

    #[test]
    fn round_trip_and_canonical_bytes() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..8], CASSETTE_MAGIC);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        // First record is the lexically smaller hash.
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..18], b"aa");
        assert_eq!(Cassette::decode(&bytes).unwrap(), c);

        let mut reversed = Cassette::new();
        for h in ["aa", "bb"].iter().rev() {
            reversed.insert(*h, c.get(h).unwrap().clone());
        }
        assert_eq!(reversed.encode(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().encode();
        assert!(Cassette::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Cassette::decode(b"NOTACASS\0\0\0\0").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Cassette::decode(&extra).is_err());
    }

    #[test]
    fn replay_miss_names_hash() {
        let r = ReplayBackend::new(sample());
        let req = LvmRequest::new(crate::gateway::tests::bundle("x"), "replay");
        assert_eq!(
            r.call(&req, "aa").unwrap(),
            LvmOutcome::Text("FINAL ANSWER: KEEP \u{2713}".into())
        );
        match r.call(&req, "zz") {
            Err(GatewayError::ReplayMiss { hash }) => assert_eq!(hash, "zz"),
            o => panic!("{o:?}"),
        }
    }
}
