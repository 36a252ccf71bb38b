//! Packed record files.
//!
//! ```text
//! file:   magic u32 = 0x4D585245 | version u32 | record*
//! record: len u32 | crc32 u32 | payload[len]
//! index:  offset u64 per record (the `.idx` companion file)
//! ```
//!
//! All integers are little-endian. Record 0 is metadata (`dim u32`); every
//! later record is one example: `label u32 | dim x f32`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

pub const MAGIC: u32 = 0x4D58_5245;
pub const VERSION: u32 = 1;
const FILE_HEADER: u64 = 8;
const RECORD_HEADER: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Vec<f32>,
    pub label: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a record file (magic {0:#010x})")]
    Magic(u32),
    #[error("unsupported record file version {0}")]
    Version(u32),
    #[error("record {record}: checksum mismatch")]
    Crc { record: usize },
    #[error("record {record}: file is truncated")]
    Truncated { record: usize },
    #[error("record {record}: {msg}")]
    Schema { record: usize, msg: String },
    #[error("index: {0}")]
    Index(String),
    #[error("example {0} out of range")]
    OutOfRange(usize),
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

fn encode_example(e: &Example, out: &mut Vec<u8>) {
    out.clear();
    out.extend_from_slice(&e.label.to_le_bytes());
    for f in &e.features {
        out.extend_from_slice(&f.to_le_bytes());
    }
}

fn decode_example(record: usize, dim: usize, payload: &[u8]) -> Result<Example, DataError> {
    if payload.len() != 4 + 4 * dim {
        return Err(DataError::Schema { record, msg: format!("payload of {} bytes, expected {}", payload.len(), 4 + 4 * dim) });
    }
    let label = u32::from_le_bytes(payload[..4].try_into().unwrap());
    let features = payload[4..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Example { features, label })
}

fn write_record(w: &mut impl Write, payload: &[u8]) -> io::Result<u64> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(&crc32fast::hash(payload).to_le_bytes())?;
    w.write_all(payload)?;
    Ok((RECORD_HEADER + payload.len()) as u64)
}

/// Writes `examples` to `path` and its index. Returns the example count.
/// Every example must have the same feature length as the first.
pub fn pack<I: IntoIterator<Item = Example>>(examples: I, path: &Path) -> Result<usize, DataError> {
    let mut it = examples.into_iter().peekable();
    let dim = it.peek().map_or(0, |e| e.features.len());
    let mut file = BufWriter::new(File::create(path)?);
    let mut index = BufWriter::new(File::create(index_path(path))?);
    file.write_all(&MAGIC.to_le_bytes())?;
    file.write_all(&VERSION.to_le_bytes())?;
    let mut offset = FILE_HEADER;
    index.write_all(&offset.to_le_bytes())?;
    offset += write_record(&mut file, &(dim as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    let mut n = 0;
    for e in it {
        if e.features.len() != dim {
            return Err(DataError::Schema { record: n + 1, msg: format!("{} features, file has {dim}", e.features.len()) });
        }
        encode_example(&e, &mut buf);
        index.write_all(&offset.to_le_bytes())?;
        offset += write_record(&mut file, &buf)?;
        n += 1;
    }
    file.flush()?;
    index.flush()?;
    Ok(n)
}

fn read_header(r: &mut impl Read) -> Result<(), DataError> {
    let mut h = [0u8; 8];
    r.read_exact(&mut h).map_err(|_| DataError::Truncated { record: 0 })?;
    let magic = u32::from_le_bytes(h[..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(DataError::Magic(magic));
    }
    let version = u32::from_le_bytes(h[4..].try_into().unwrap());
    if version != VERSION {
        return Err(DataError::Version(version));
    }
    Ok(())
}

fn check_record(record: usize, buf: &[u8]) -> Result<&[u8], DataError> {
    if buf.len() < RECORD_HEADER {
        return Err(DataError::Truncated { record });
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let payload = buf.get(RECORD_HEADER..RECORD_HEADER + len).ok_or(DataError::Truncated { record })?;
    if crc32fast::hash(payload) != crc {
        return Err(DataError::Crc { record });
    }
    Ok(payload)
}

/// Random access through the index: one positioned read per example.
pub struct RecordReader {
    file: File,
    offsets: Vec<u64>,
    file_len: u64,
    dim: usize,
    reads: AtomicU64,
}

impl RecordReader {
    pub fn open(path: &Path) -> Result<RecordReader, DataError> {
        let mut file = File::open(path)?;
        read_header(&mut file)?;
        let file_len = file.seek(SeekFrom::End(0))?;
        let raw = std::fs::read(index_path(path))?;
        if raw.is_empty() || raw.len() % 8 != 0 {
            return Err(DataError::Index(format!("{} bytes is not a list of offsets", raw.len())));
        }
        let offsets: Vec<u64> = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        if offsets[0] != FILE_HEADER || offsets.windows(2).any(|w| w[0] >= w[1]) || *offsets.last().unwrap() >= file_len {
            return Err(DataError::Index("offsets are not increasing record starts".into()));
        }
        let mut r = RecordReader { file, offsets, file_len, dim: 0, reads: AtomicU64::new(0) };
        let meta = r.record(0)?;
        if meta.len() != 4 {
            return Err(DataError::Schema { record: 0, msg: "metadata record must hold the feature dim".into() });
        }
        r.dim = u32::from_le_bytes(meta[..].try_into().unwrap()) as usize;
        r.reads.store(0, Ordering::Relaxed);
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Positioned reads issued so far, excluding the metadata read in `open`.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    fn record(&self, r: usize) -> Result<Vec<u8>, DataError> {
        let start = self.offsets[r];
        let end = self.offsets.get(r + 1).copied().unwrap_or(self.file_len);
        let mut buf = vec![0u8; (end - start) as usize];
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.file.read_exact_at(&mut buf, start).map_err(|_| DataError::Truncated { record: r })?;
        let payload = check_record(r, &buf)?;
        if payload.len() + RECORD_HEADER != buf.len() {
            return Err(DataError::Index(format!("record {r} does not end at the next offset")));
        }
        Ok(payload.to_vec())
    }

    /// Example `i` (record `i + 1`).
    pub fn read_at(&self, i: usize) -> Result<Example, DataError> {
        if i >= self.len() {
            return Err(DataError::OutOfRange(i));
        }
        decode_example(i + 1, self.dim, &self.record(i + 1)?)
    }
}

/// Sequential reader; needs no index.
pub struct Scanner {
    r: BufReader<File>,
    dim: usize,
    record: usize,
    buf: Vec<u8>,
    done: bool,
}

pub fn scan(path: &Path) -> Result<Scanner, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)?;
    let mut s = Scanner { r, dim: 0, record: 0, buf: Vec::new(), done: false };
    let meta = s.next_payload()?.ok_or(DataError::Truncated { record: 0 })?;
    if meta.len() != 4 {
        return Err(DataError::Schema { record: 0, msg: "metadata record must hold the feature dim".into() });
    }
    s.dim = u32::from_le_bytes(meta[..].try_into().unwrap()) as usize;
    Ok(s)
}

impl Scanner {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn next_payload(&mut self) -> Result<Option<Vec<u8>>, DataError> {
        let record = self.record;
        let mut head = [0u8; RECORD_HEADER];
        let mut got = 0;
        while got < RECORD_HEADER {
            match self.r.read(&mut head[got..])? {
                0 if got == 0 => return Ok(None),
                0 => return Err(DataError::Truncated { record }),
                n => got += n,
            }
        }
        let len = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        self.buf.clear();
        self.buf.extend_from_slice(&head);
        self.buf.resize(RECORD_HEADER + len, 0);
        self.r.read_exact(&mut self.buf[RECORD_HEADER..]).map_err(|_| DataError::Truncated { record })?;
        let payload = check_record(record, &self.buf)?.to_vec();
        self.record += 1;
        Ok(Some(payload))
    }
}

impl Iterator for Scanner {
    type Item = Result<Example, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let record = self.record;
        let r = match self.next_payload() {
            Ok(None) => None,
            Ok(Some(p)) => Some(decode_example(record, self.dim, &p)),
            Err(e) => Some(Err(e)),
        };
        // A corrupt payload leaves the framing intact, so scanning can go on;
        // a truncated file cannot.
        if matches!(r, None | Some(Err(DataError::Truncated { .. } | DataError::Io(_)))) {
            self.done = true;
        }
        r
    }
}

/// Reads a CSV with one example per line, `label,f1,...,fD`. Blank lines
/// and lines starting with `#` are skipped.
pub fn read_csv(path: &Path) -> Result<Vec<Example>, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| DataError::Schema { record: i + 1, msg };
        let mut fields = line.split(',').map(str::trim);
        let label = fields.next().unwrap().parse::<u32>().map_err(|e| bad(format!("label: {e}")))?;
        let features = fields.map(|f| f.parse::<f32>().map_err(|e| bad(format!("feature `{f}`: {e}")))).collect::<Result<_, _>>()?;
        out.push(Example { features, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_matches_reference_values() {
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32fast::hash(b""), 0);
        assert_eq!(crc32fast::hash(b"The quick brown fox jumps over the lazy dog"), 0x414F_A339);
    }

    #[test]
    fn header_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rec");
        pack([Example { features: vec![1.0], label: 3 }], &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[0x45, 0x52, 0x58, 0x4D, 1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        let idx = std::fs::read(index_path(&p)).unwrap();
        assert_eq!(idx.len(), 16);
        assert_eq!(&idx[8..], &20u64.to_le_bytes());
    }
}
