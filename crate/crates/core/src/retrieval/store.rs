//! Index persistence.
//!
//! Layout (little-endian): magic `VIMI-IDX1`, u32 version, u64 doc_count,
//! f64 avg_doc_len, f64 k1, f64 b, then three sections, each prefixed by a
//! u64 entry count: pairs (id, caption, image_ref as length-prefixed
//! strings), doc lengths (u32), terms (length-prefixed term, u32 posting
//! count, then `(u32 doc, u32 tf)` pairs). A CRC32 of everything before it
//! closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{self, CodecError, FrameReader, FrameWriter};

use super::{Bm25Params, ImageTextPair, Posting, RetrievalError, RetrievalIndex};

pub const INDEX_MAGIC: &[u8; 9] = b"VIMI-IDX1";
pub const INDEX_VERSION: u32 = 1;

impl From<CodecError> for RetrievalError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Io(e) => RetrievalError::Io(e),
            CodecError::Corrupt(m) => RetrievalError::CorruptIndex(m),
        }
    }
}

impl RetrievalIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = FrameWriter::new(INDEX_MAGIC);
        w.u32(INDEX_VERSION)
            .u64(self.docs.len() as u64)
            .f64(self.avg_doc_len)
            .f64(self.params.k1)
            .f64(self.params.b);
        w.u64(self.docs.len() as u64);
        for d in &self.docs {
            w.str(&d.id).str(&d.caption).str(&d.image_ref);
        }
        w.u64(self.doc_lengths.len() as u64);
        for &l in &self.doc_lengths {
            w.u32(l);
        }
        w.u64(self.postings.len() as u64);
        for (term, list) in &self.postings {
            w.str(term).u32(list.len() as u32);
            for p in list {
                w.u32(p.doc).u32(p.tf);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, RetrievalError> {
        let corrupt = |m: &str| RetrievalError::CorruptIndex(m.to_owned());
        let mut r = FrameReader::open(data, INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(RetrievalError::CorruptIndex(format!("unsupported version {version}")));
        }
        let doc_count = r.u64()? as usize;
        let avg_doc_len = r.f64()?;
        let params = Bm25Params { k1: r.f64()?, b: r.f64()? };

        if r.u64()? as usize != doc_count {
            return Err(corrupt("pair section length disagrees with header"));
        }
        let mut docs = Vec::with_capacity(doc_count.min(1 << 20));
        for _ in 0..doc_count {
            docs.push(ImageTextPair {
                id: r.string()?,
                caption: r.string()?,
                image_ref: r.string()?,
            });
        }
        if r.u64()? as usize != doc_count {
            return Err(corrupt("doc-length section length disagrees with header"));
        }
        let mut doc_lengths = Vec::with_capacity(doc_count.min(1 << 20));
        for _ in 0..doc_count {
            doc_lengths.push(r.u32()?);
        }
        let n_terms = r.u64()?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.string()?;
            let n = r.u32()? as usize;
            let mut list = Vec::with_capacity(n.min(doc_count));
            for _ in 0..n {
                list.push(Posting { doc: r.u32()?, tf: r.u32()? });
            }
            if list.windows(2).any(|w| w[0].doc >= w[1].doc) {
                return Err(corrupt("posting list not sorted"));
            }
            if list.iter().any(|p| p.doc as usize >= doc_count || p.tf == 0) {
                return Err(corrupt("posting refers to unknown document"));
            }
            postings.insert(term, list);
        }
        r.finish()?;

        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let expect = if doc_count == 0 { 0.0 } else { total as f64 / doc_count as f64 };
        if (expect - avg_doc_len).abs() > 1e-9 {
            return Err(corrupt("average document length inconsistent"));
        }
        Ok(Self {
            params,
            docs,
            doc_lengths,
            avg_doc_len,
            postings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        Ok(codec::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}
