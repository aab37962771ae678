//! Classic pcap (libpcap) container reading and writing.
//!
//! Every pipeline stage exchanges data exclusively through pcap files, so
//! this module is the interchange layer for the whole system. Only the
//! classic microsecond-resolution format (magic `0xa1b2c3d4`) is handled;
//! bytes on disk are always little-endian regardless of host.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
pub const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
pub const DEFAULT_SNAP_LEN: u32 = 65_535;
pub const LINKTYPE_ETHERNET: u32 = 1;

/// One captured packet: timestamp, lengths, raw payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub timestamp_s: u32,
    pub timestamp_us: u32,
    pub original_len: u32,
    pub payload: Vec<u8>,
}

impl PacketRecord {
    pub fn captured_len(&self) -> u32 {
        self.payload.len() as u32
    }

    /// Timestamp as fractional seconds.
    pub fn time_s(&self) -> f64 {
        self.timestamp_s as f64 + self.timestamp_us as f64 * 1e-6
    }

    /// Timestamp in whole microseconds.
    pub fn time_us(&self) -> u64 {
        self.timestamp_s as u64 * 1_000_000 + self.timestamp_us as u64
    }

    fn check(&self) -> Result<(), PcapError> {
        if self.timestamp_us >= 1_000_000 {
            return Err(PcapError::InvalidRecord(format!(
                "timestamp_us {} out of range",
                self.timestamp_us
            )));
        }
        if self.captured_len() > self.original_len {
            return Err(PcapError::InvalidRecord(format!(
                "captured_len {} exceeds original_len {}",
                self.captured_len(),
                self.original_len
            )));
        }
        Ok(())
    }
}

/// An ordered, time-sorted sequence of packet records plus the capture
/// parameters that go into the global header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapStream {
    pub link_type: u32,
    pub snap_len: u32,
    pub records: Vec<PacketRecord>,
}

impl Default for PcapStream {
    fn default() -> Self {
        PcapStream {
            link_type: LINKTYPE_ETHERNET,
            snap_len: DEFAULT_SNAP_LEN,
            records: Vec::new(),
        }
    }
}

impl PcapStream {
    pub fn new(records: Vec<PacketRecord>) -> Self {
        PcapStream {
            records,
            ..Default::default()
        }
    }

    /// Checks the stream invariants: per-record sanity, snap_len bound and
    /// non-decreasing timestamps.
    pub fn validate(&self) -> Result<(), PcapError> {
        let mut prev = (0u32, 0u32);
        for (i, rec) in self.records.iter().enumerate() {
            rec.check()?;
            if rec.captured_len() > self.snap_len {
                return Err(PcapError::InvalidRecord(format!(
                    "record {} captured_len {} exceeds snap_len {}",
                    i,
                    rec.captured_len(),
                    self.snap_len
                )));
            }
            let ts = (rec.timestamp_s, rec.timestamp_us);
            if i > 0 && ts < prev {
                return Err(PcapError::InvalidRecord(format!(
                    "record {} timestamp goes backwards",
                    i
                )));
            }
            prev = ts;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PcapError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unrecognized pcap magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

impl fmt::Display for PacketRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:06} cap={} orig={}",
            self.timestamp_s,
            self.timestamp_us,
            self.captured_len(),
            self.original_len
        )
    }
}

fn u32_le(buf: &[u8]) -> u32 {
    u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]])
}

/// Reads an entire classic pcap file into memory.
pub fn read_pcap(path: &Path) -> Result<PcapStream, PcapError> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    read_pcap_from(&mut reader)
}

pub fn read_pcap_from<R: Read>(reader: &mut R) -> Result<PcapStream, PcapError> {
    let mut header = [0u8; GLOBAL_HEADER_LEN];
    reader.read_exact(&mut header).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            PcapError::Truncated { offset: 0 }
        } else {
            PcapError::Io(e)
        }
    })?;
    let magic = u32_le(&header[0..4]);
    if magic != PCAP_MAGIC {
        return Err(PcapError::BadMagic(magic));
    }
    let snap_len = u32_le(&header[16..20]);
    let link_type = u32_le(&header[20..24]);

    let mut records = Vec::new();
    let mut offset = GLOBAL_HEADER_LEN as u64;
    loop {
        let mut rec_header = [0u8; RECORD_HEADER_LEN];
        match read_fully(reader, &mut rec_header) {
            ReadOutcome::Eof => break,
            ReadOutcome::Partial => return Err(PcapError::Truncated { offset }),
            ReadOutcome::Err(e) => return Err(PcapError::Io(e)),
            ReadOutcome::Full => {}
        }
        let timestamp_s = u32_le(&rec_header[0..4]);
        let timestamp_us = u32_le(&rec_header[4..8]);
        let captured_len = u32_le(&rec_header[8..12]);
        let original_len = u32_le(&rec_header[12..16]);
        offset += RECORD_HEADER_LEN as u64;

        let mut payload = vec![0u8; captured_len as usize];
        match read_fully(reader, &mut payload) {
            ReadOutcome::Full => {}
            ReadOutcome::Eof | ReadOutcome::Partial => {
                return Err(PcapError::Truncated { offset })
            }
            ReadOutcome::Err(e) => return Err(PcapError::Io(e)),
        }
        offset += captured_len as u64;
        records.push(PacketRecord {
            timestamp_s,
            timestamp_us,
            original_len,
            payload,
        });
    }
    Ok(PcapStream {
        link_type,
        snap_len,
        records,
    })
}

enum ReadOutcome {
    Full,
    Eof,
    Partial,
    Err(io::Error),
}

fn read_fully<R: Read>(reader: &mut R, buf: &mut [u8]) -> ReadOutcome {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return if filled == 0 {
                    ReadOutcome::Eof
                } else {
                    ReadOutcome::Partial
                }
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return ReadOutcome::Err(e),
        }
    }
    ReadOutcome::Full
}

/// Writes a stream as a classic pcap file. Returns the byte count written.
/// The output is a pure function of the stream contents.
pub fn write_pcap(stream: &PcapStream, path: &Path) -> Result<u64, PcapError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    let n = write_pcap_to(stream, &mut writer)?;
    writer.flush()?;
    Ok(n)
}

pub fn write_pcap_to<W: Write>(stream: &PcapStream, writer: &mut W) -> Result<u64, PcapError> {
    stream.validate()?;
    let mut written = 0u64;
    writer.write_all(&PCAP_MAGIC.to_le_bytes())?;
    writer.write_all(&2u16.to_le_bytes())?; // version major
    writer.write_all(&4u16.to_le_bytes())?; // version minor
    writer.write_all(&0i32.to_le_bytes())?; // thiszone
    writer.write_all(&0u32.to_le_bytes())?; // sigfigs
    writer.write_all(&stream.snap_len.to_le_bytes())?;
    writer.write_all(&stream.link_type.to_le_bytes())?;
    written += GLOBAL_HEADER_LEN as u64;

    for rec in &stream.records {
        writer.write_all(&rec.timestamp_s.to_le_bytes())?;
        writer.write_all(&rec.timestamp_us.to_le_bytes())?;
        writer.write_all(&rec.captured_len().to_le_bytes())?;
        writer.write_all(&rec.original_len.to_le_bytes())?;
        writer.write_all(&rec.payload)?;
        written += (RECORD_HEADER_LEN + rec.payload.len()) as u64;
    }
    Ok(written)
}

/// Splits fractional seconds into the pcap (s, us) pair, rounding half-up
/// to the nearest microsecond.
pub fn split_time(time_s: f64) -> (u32, u32) {
    let total_us = (time_s * 1e6 + 0.5).floor() as u64;
    ((total_us / 1_000_000) as u32, (total_us % 1_000_000) as u32)
}
