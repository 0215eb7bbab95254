//! Classic capture-file container, bit-exact on write: 24-byte global
//! header (magic 0xA1B2C3D4, version 2.4, Ethernet) and 16-byte record
//! headers, little-endian. Reading accepts the byte-swapped magic too.

use std::fs;
use std::path::Path;

use crate::groom_detector::Timestamp;

use super::CaptureError;

pub const PCAP_MAGIC: u32 = 0xA1B2_C3D4;
pub const PCAP_VERSION_MAJOR: u16 = 2;
pub const PCAP_VERSION_MINOR: u16 = 4;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const DEFAULT_SNAPLEN: u32 = 65535;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    pub ts_sec: u32,
    pub ts_usec: u32,
    /// Length on the wire; the captured length is `frame.len()` and never
    /// exceeds it.
    pub orig_len: u32,
    pub frame: Vec<u8>,
}

impl CaptureRecord {
    pub fn timestamp(&self) -> Timestamp {
        Timestamp::from_pcap(self.ts_sec, self.ts_usec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureFile {
    pub snaplen: u32,
    pub link_type: u32,
    /// Whether the file on disk used the byte-swapped header layout.
    pub byte_order_swapped: bool,
    pub records: Vec<CaptureRecord>,
}

impl Default for CaptureFile {
    fn default() -> Self {
        Self::new()
    }
}

impl CaptureFile {
    pub fn new() -> Self {
        CaptureFile {
            snaplen: DEFAULT_SNAPLEN,
            link_type: LINKTYPE_ETHERNET,
            byte_order_swapped: false,
            records: Vec::new(),
        }
    }

    /// Append a fully captured frame.
    pub fn push_frame(&mut self, at: Timestamp, frame: Vec<u8>) {
        let micros = at.as_micros();
        self.records.push(CaptureRecord {
            ts_sec: (micros / 1_000_000) as u32,
            ts_usec: (micros % 1_000_000) as u32,
            orig_len: frame.len() as u32,
            frame,
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body: usize = self
            .records
            .iter()
            .map(|r| RECORD_HEADER_LEN + r.frame.len())
            .sum();
        let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + body);
        out.extend_from_slice(&PCAP_MAGIC.to_le_bytes());
        out.extend_from_slice(&PCAP_VERSION_MAJOR.to_le_bytes());
        out.extend_from_slice(&PCAP_VERSION_MINOR.to_le_bytes());
        out.extend_from_slice(&0i32.to_le_bytes()); // thiszone
        out.extend_from_slice(&0u32.to_le_bytes()); // sigfigs
        out.extend_from_slice(&self.snaplen.to_le_bytes());
        out.extend_from_slice(&self.link_type.to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&rec.ts_sec.to_le_bytes());
            out.extend_from_slice(&rec.ts_usec.to_le_bytes());
            out.extend_from_slice(&(rec.frame.len() as u32).to_le_bytes());
            out.extend_from_slice(&rec.orig_len.to_le_bytes());
            out.extend_from_slice(&rec.frame);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CaptureError> {
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(CaptureError::TruncatedRecord {
                offset: 0,
                needed: GLOBAL_HEADER_LEN,
                available: bytes.len(),
            });
        }
        let raw_magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let swapped = match raw_magic {
            PCAP_MAGIC => false,
            m if m == PCAP_MAGIC.swap_bytes() => true,
            other => return Err(CaptureError::BadMagic { found: other }),
        };
        let read_u32 = |off: usize| {
            let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if swapped {
                v.swap_bytes()
            } else {
                v
            }
        };
        let read_u16 = |off: usize| {
            let v = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap());
            if swapped {
                v.swap_bytes()
            } else {
                v
            }
        };

        let major = read_u16(4);
        let minor = read_u16(6);
        if (major, minor) != (PCAP_VERSION_MAJOR, PCAP_VERSION_MINOR) {
            return Err(CaptureError::UnsupportedVersion { major, minor });
        }
        let snaplen = read_u32(16);
        let link_type = read_u32(20);
        if link_type != LINKTYPE_ETHERNET {
            return Err(CaptureError::UnsupportedLinkType(link_type));
        }

        let mut records = Vec::new();
        let mut pos = GLOBAL_HEADER_LEN;
        while pos < bytes.len() {
            if bytes.len() < pos + RECORD_HEADER_LEN {
                return Err(CaptureError::TruncatedRecord {
                    offset: pos,
                    needed: RECORD_HEADER_LEN,
                    available: bytes.len() - pos,
                });
            }
            let ts_sec = read_u32(pos);
            let ts_usec = read_u32(pos + 4);
            let incl_len = read_u32(pos + 8) as usize;
            let orig_len = read_u32(pos + 12);
            pos += RECORD_HEADER_LEN;
            if bytes.len() < pos + incl_len {
                return Err(CaptureError::TruncatedRecord {
                    offset: pos,
                    needed: incl_len,
                    available: bytes.len() - pos,
                });
            }
            if (incl_len as u32) > orig_len {
                return Err(CaptureError::InvalidRecord {
                    index: records.len(),
                    reason: format!(
                        "captured length {incl_len} exceeds original length {orig_len}"
                    ),
                });
            }
            records.push(CaptureRecord {
                ts_sec,
                ts_usec,
                orig_len,
                frame: bytes[pos..pos + incl_len].to_vec(),
            });
            pos += incl_len;
        }

        Ok(CaptureFile {
            snaplen,
            link_type,
            byte_order_swapped: swapped,
            records,
        })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), CaptureError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self, CaptureError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_record_file_round_trips() {
        let cap = CaptureFile::new();
        let bytes = cap.to_bytes();
        assert_eq!(bytes.len(), GLOBAL_HEADER_LEN);
        assert_eq!(&bytes[0..4], &[0xD4, 0xC3, 0xB2, 0xA1]); // LE magic
        let back = CaptureFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, cap);
    }

    #[test]
    fn records_round_trip() {
        let mut cap = CaptureFile::new();
        cap.push_frame(Timestamp::from_micros(1_000_123), vec![1, 2, 3, 4]);
        cap.push_frame(Timestamp::from_micros(2_500_000), vec![9; 80]);
        let back = CaptureFile::from_bytes(&cap.to_bytes()).unwrap();
        assert_eq!(back, cap);
        assert_eq!(back.records[0].ts_sec, 1);
        assert_eq!(back.records[0].ts_usec, 123);
    }

    #[test]
    fn byte_swapped_magic_is_accepted() {
        let mut bytes = CaptureFile::new().to_bytes();
        // Rewrite the whole global header big-endian.
        bytes[0..4].copy_from_slice(&PCAP_MAGIC.to_be_bytes());
        bytes[4..6].copy_from_slice(&PCAP_VERSION_MAJOR.to_be_bytes());
        bytes[6..8].copy_from_slice(&PCAP_VERSION_MINOR.to_be_bytes());
        bytes[16..20].copy_from_slice(&DEFAULT_SNAPLEN.to_be_bytes());
        bytes[20..24].copy_from_slice(&LINKTYPE_ETHERNET.to_be_bytes());
        let cap = CaptureFile::from_bytes(&bytes).unwrap();
        assert!(cap.byte_order_swapped);
        assert_eq!(cap.link_type, LINKTYPE_ETHERNET);
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let err = CaptureFile::from_bytes(&[0u8; 24]).unwrap_err();
        assert!(matches!(err, CaptureError::BadMagic { found: 0 }));
    }

    #[test]
    fn truncated_record_is_reported() {
        let mut cap = CaptureFile::new();
        cap.push_frame(Timestamp::from_micros(0), vec![0xAB; 32]);
        let mut bytes = cap.to_bytes();
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(
            CaptureFile::from_bytes(&bytes),
            Err(CaptureError::TruncatedRecord { .. })
        ));
    }

    #[test]
    fn captured_longer_than_original_is_invalid() {
        let mut cap = CaptureFile::new();
        cap.push_frame(Timestamp::from_micros(0), vec![0xAB; 32]);
        let mut bytes = cap.to_bytes();
        bytes[36..40].copy_from_slice(&8u32.to_le_bytes()); // orig_len < incl_len
        assert!(matches!(
            CaptureFile::from_bytes(&bytes),
            Err(CaptureError::InvalidRecord { index: 0, .. })
        ));
    }
}
