// SPDX-License-Identifier: Apache-2.0

//! Binary encoding of repository records. Integers are little-endian;
//! strings and byte blobs are `u32` length-prefixed; optional values carry a
//! one-byte presence flag. Each top-level record starts with [`VERSION`].

use thiserror::Error;

use crate::model::{Attributes, ContentClaim, FlowFile};

pub const VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("decode error: {0}")]
pub struct DecodeError(pub String);

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { buf: vec![VERSION] }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn opt<T>(&mut self, v: Option<T>, f: impl FnOnce(&mut Self, T)) -> &mut Self {
        match v {
            Some(x) => {
                self.u8(1);
                f(self, x);
            }
            None => {
                self.u8(0);
            }
        }
        self
    }

    pub fn strs(&mut self, v: &[String]) -> &mut Self {
        self.u32(v.len() as u32);
        for s in v {
            self.str(s);
        }
        self
    }

    pub fn attributes(&mut self, attrs: &Attributes) -> &mut Self {
        self.u32(attrs.len() as u32);
        for (k, v) in attrs {
            self.str(k).str(v);
        }
        self
    }

    pub fn claim(&mut self, c: &ContentClaim) -> &mut Self {
        self.str(&c.container)
            .str(&c.section)
            .u64(c.offset)
            .u64(c.length)
    }

    pub fn flowfile(&mut self, ff: &FlowFile) -> &mut Self {
        self.str(&ff.uuid)
            .attributes(&ff.attributes)
            .opt(ff.claim.as_ref(), |e, c| {
                e.claim(c);
            })
            .i64(ff.entry_timestamp)
            .i64(ff.lineage_start)
            .opt(ff.penalty_until, |e, t| {
                e.i64(t);
            })
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

type Result<T> = std::result::Result<T, DecodeError>;

impl<'a> Decoder<'a> {
    /// Checks the version tag and positions after it.
    pub fn new(data: &'a [u8]) -> Result<Self> {
        match data.first() {
            Some(&VERSION) => Ok(Decoder { data, pos: 1 }),
            Some(v) => Err(DecodeError(format!("unsupported version {v}"))),
            None => Err(DecodeError("empty record".into())),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.data.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(DecodeError("unexpected end of record".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| DecodeError("invalid utf-8".into()))
    }

    pub fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<Option<T>> {
        match self.u8()? {
            0 => Ok(None),
            1 => f(self).map(Some),
            v => Err(DecodeError(format!("bad option flag {v}"))),
        }
    }

    pub fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.u32()?;
        (0..n).map(|_| self.str()).collect()
    }

    pub fn attributes(&mut self) -> Result<Attributes> {
        let n = self.u32()?;
        (0..n).map(|_| Ok((self.str()?, self.str()?))).collect()
    }

    pub fn claim(&mut self) -> Result<ContentClaim> {
        Ok(ContentClaim {
            container: self.str()?,
            section: self.str()?,
            offset: self.u64()?,
            length: self.u64()?,
        })
    }

    pub fn flowfile(&mut self) -> Result<FlowFile> {
        Ok(FlowFile {
            uuid: self.str()?,
            attributes: self.attributes()?,
            claim: self.opt(|d| d.claim())?,
            entry_timestamp: self.i64()?,
            lineage_start: self.i64()?,
            penalty_until: self.opt(|d| d.i64())?,
        })
    }
}
