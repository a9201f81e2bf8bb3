//! Classic libpcap capture files (microsecond resolution, Ethernet link type).

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::time::Timestamp;

pub const MAGIC: u32 = 0xa1b2_c3d4;
pub const MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
pub const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const SNAPLEN: u32 = 65_535;
/// Upper bound on a single record, guards allocations on corrupt input.
const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("not a classic pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("truncated pcap record")]
    TruncatedRecord,
    #[error("unsupported link type {0}, only Ethernet (1) is handled")]
    UnsupportedLinkType(u32),
    #[error("pcap record of {0} bytes exceeds the supported maximum")]
    OversizedRecord(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    pub timestamp: Timestamp,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

/// Fill `buf` completely; `Ok(false)` on clean EOF before the first byte.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool, PcapError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(PcapError::TruncatedRecord),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

pub struct PcapReader<R> {
    inner: R,
    big_endian: bool,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let mut magic = [0u8; 4];
        if !read_exact_or_eof(&mut inner, &mut magic).map_err(|_| PcapError::BadMagic(0))? {
            return Err(PcapError::BadMagic(0));
        }
        let big_endian = match u32::from_le_bytes(magic) {
            MAGIC => false,
            MAGIC_SWAPPED => true,
            other => return Err(PcapError::BadMagic(other)),
        };
        header[..4].copy_from_slice(&magic);
        if !read_exact_or_eof(&mut inner, &mut header[4..])? {
            return Err(PcapError::TruncatedRecord);
        }
        let reader = PcapReader {
            inner,
            big_endian,
            done: false,
        };
        let linktype = reader.u32_at(&header, 20);
        if linktype != LINKTYPE_ETHERNET {
            return Err(PcapError::UnsupportedLinkType(linktype));
        }
        Ok(reader)
    }

    fn u32_at(&self, b: &[u8], at: usize) -> u32 {
        let raw = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.big_endian {
            u32::from_be_bytes(raw)
        } else {
            u32::from_le_bytes(raw)
        }
    }

    fn read_record(&mut self) -> Result<Option<PcapRecord>, PcapError> {
        let mut header = [0u8; RECORD_HEADER_LEN];
        if !read_exact_or_eof(&mut self.inner, &mut header)? {
            return Ok(None);
        }
        let ts_sec = self.u32_at(&header, 0);
        let ts_usec = self.u32_at(&header, 4);
        let incl_len = self.u32_at(&header, 8);
        let orig_len = self.u32_at(&header, 12);
        if incl_len > MAX_RECORD_LEN {
            return Err(PcapError::OversizedRecord(incl_len));
        }
        let mut data = vec![0u8; incl_len as usize];
        if incl_len > 0 && !read_exact_or_eof(&mut self.inner, &mut data)? {
            return Err(PcapError::TruncatedRecord);
        }
        Ok(Some(PcapRecord {
            timestamp: Timestamp::from_micros(u64::from(ts_sec) * 1_000_000 + u64::from(ts_usec)),
            orig_len,
            data,
        }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PcapRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_record() {
            Ok(Some(rec)) => Some(Ok(rec)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Parse a whole capture held in memory.
pub fn read_all(bytes: &[u8]) -> Result<Vec<PcapRecord>, PcapError> {
    PcapReader::new(bytes)?.collect()
}

/// Little-endian writer, version 2.4, Ethernet link type.
pub struct PcapWriter<W: Write> {
    inner: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
        header.extend_from_slice(&MAGIC.to_le_bytes());
        header.extend_from_slice(&2u16.to_le_bytes());
        header.extend_from_slice(&4u16.to_le_bytes());
        header.extend_from_slice(&0i32.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        header.extend_from_slice(&SNAPLEN.to_le_bytes());
        header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&header)?;
        Ok(PcapWriter { inner })
    }

    pub fn write_record(&mut self, timestamp: Timestamp, data: &[u8]) -> io::Result<()> {
        let us = timestamp.as_micros();
        let mut header = [0u8; RECORD_HEADER_LEN];
        header[0..4].copy_from_slice(&((us / 1_000_000) as u32).to_le_bytes());
        header[4..8].copy_from_slice(&((us % 1_000_000) as u32).to_le_bytes());
        header[8..12].copy_from_slice(&(data.len() as u32).to_le_bytes());
        header[12..16].copy_from_slice(&(data.len() as u32).to_le_bytes());
        self.inner.write_all(&header)?;
        self.inner.write_all(data)
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_record_file(big_endian: bool) -> Vec<u8> {
        let enc = |v: u32| {
            if big_endian {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            }
        };
        let enc16 = |v: u16| {
            if big_endian {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            }
        };
        let mut f = Vec::new();
        f.extend_from_slice(&enc(MAGIC));
        f.extend_from_slice(&enc16(2));
        f.extend_from_slice(&enc16(4));
        f.extend_from_slice(&enc(0));
        f.extend_from_slice(&enc(0));
        f.extend_from_slice(&enc(65535));
        f.extend_from_slice(&enc(1));
        f.extend_from_slice(&enc(1_600_000_000));
        f.extend_from_slice(&enc(250));
        f.extend_from_slice(&enc(60));
        f.extend_from_slice(&enc(60));
        f.extend((0..60).map(|i| i as u8));
        f
    }

    #[test]
    fn single_record_both_byte_orders() {
        for be in [false, true] {
            let recs = read_all(&one_record_file(be)).unwrap();
            assert_eq!(recs.len(), 1);
            assert_eq!(recs[0].data.len(), 60);
            assert_eq!(recs[0].data[59], 59);
            assert_eq!(
                recs[0].timestamp,
                Timestamp::from_micros(1_600_000_000_000_250)
            );
        }
    }

    #[test]
    fn empty_file_is_bad_magic() {
        assert!(matches!(read_all(&[]), Err(PcapError::BadMagic(_))));
        assert!(matches!(
            read_all(b"GIF89a..................."),
            Err(PcapError::BadMagic(_))
        ));
    }

    #[test]
    fn truncated_record() {
        let mut f = one_record_file(false);
        f.truncate(f.len() - 1);
        assert!(matches!(read_all(&f), Err(PcapError::TruncatedRecord)));
        let f = one_record_file(false);
        assert!(matches!(read_all(&f[..30]), Err(PcapError::TruncatedRecord)));
    }

    #[test]
    fn header_only_file_has_no_records() {
        let f = one_record_file(false);
        assert!(read_all(&f[..24]).unwrap().is_empty());
    }

    #[test]
    fn writer_round_trip() {
        let mut w = PcapWriter::new(Vec::new()).unwrap();
        let frames: Vec<(Timestamp, Vec<u8>)> = (0..5u64)
            .map(|i| (Timestamp::from_micros(1_000_000 * i + 7), vec![i as u8; 60 + i as usize]))
            .collect();
        for (t, d) in &frames {
            w.write_record(*t, d).unwrap();
        }
        let bytes = w.into_inner().unwrap();
        let back = read_all(&bytes).unwrap();
        let back: Vec<(Timestamp, Vec<u8>)> =
            back.into_iter().map(|r| (r.timestamp, r.data)).collect();
        assert_eq!(back, frames);
    }
}
