//! Binary index file. Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "FRIX"
//! version          u32      1
//! analyzer         str      JSON-encoded AnalyzerConfig
//! k1, b            f64, f64
//! use_expansions   u8       0 | 1
//! num_docs         u64
//!   per doc:       str id, u32 analyzed length
//! num_terms        u64      terms in ascending byte order
//!   per term:      str term, u32 posting count, then (u32 doc, u32 tf) pairs
//!                  sorted by doc
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::{Bm25Params, InvertedIndex, Posting};
use crate::binio::{ByteReader, ByteWriter};
use crate::corpus::{Analyzer, AnalyzerConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FRIX";
const VERSION: u32 = 1;

impl InvertedIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = ByteWriter::new(BufWriter::new(file));
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        use std::io::Write;
        w.into_inner().flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: std::io::Write>(&self, w: &mut ByteWriter<W>) -> std::io::Result<()> {
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        let analyzer =
            serde_json::to_string(self.analyzer.config()).map_err(std::io::Error::other)?;
        w.str(&analyzer)?;
        w.f64(self.params.k1)?;
        w.f64(self.params.b)?;
        w.u8(u8::from(self.use_expansions))?;
        w.u64(self.doc_ids.len() as u64)?;
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            w.str(id)?;
            w.u32(len)?;
        }
        w.u64(self.terms.len() as u64)?;
        for (term, list) in self.terms.iter().zip(&self.postings) {
            w.str(term)?;
            w.u32(list.len() as u32)?;
            for p in list {
                w.u32(p.doc)?;
                w.u32(p.tf)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported index version {version}"
            )));
        }
        let analyzer: AnalyzerConfig = serde_json::from_str(&r.str()?)?;
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
        };
        let use_expansions = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad expansion flag {other}"))),
        };
        let num_docs = r.u64()? as usize;
        if num_docs == 0 {
            return Err(Error::EmptyCollection);
        }
        let mut doc_ids = Vec::with_capacity(num_docs.min(r.remaining()));
        let mut doc_lengths = Vec::with_capacity(num_docs.min(r.remaining()));
        for _ in 0..num_docs {
            doc_ids.push(r.str()?);
            doc_lengths.push(r.u32()?);
        }
        let num_terms = r.u64()? as usize;
        let mut terms = Vec::with_capacity(num_terms.min(r.remaining()));
        let mut postings = Vec::with_capacity(num_terms.min(r.remaining()));
        for _ in 0..num_terms {
            let term = r.str()?;
            if terms.last().is_some_and(|prev: &String| prev >= &term) {
                return Err(Error::Format(format!("terms out of order at `{term}`")));
            }
            let count = r.u32()? as usize;
            let mut list = Vec::with_capacity(count.min(r.remaining() / 8));
            for _ in 0..count {
                let p = Posting {
                    doc: r.u32()?,
                    tf: r.u32()?,
                };
                if p.doc as usize >= num_docs
                    || list.last().is_some_and(|q: &Posting| q.doc >= p.doc)
                {
                    return Err(Error::Format(format!("bad posting list for `{term}`")));
                }
                list.push(p);
            }
            terms.push(term);
            postings.push(list);
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        Ok(Self::assemble(
            Analyzer::new(analyzer),
            params,
            use_expansions,
            doc_ids,
            doc_lengths,
            terms,
            postings,
        ))
    }
}
