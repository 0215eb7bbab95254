//! Deterministic model of the server's NonPagedPool during grooming.
//!
//! The pool is a bump allocator with a LIFO stack of freed chunks: an
//! allocation reuses the top chunk when it is big enough, otherwise it is
//! placed at the next fresh address. That is all the machinery the
//! grooming choreography needs: reserve, fill, free, and land the result
//! list buffer in the freed slot with a live connection-buffer right
//! behind it. There are no competing tenants, so the layout the real
//! attack only makes probable is reproduced deterministically.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::fea_conversion::{canonical_crafted_list, convert_list, ConversionOutcome};

/// Base address of the modeled pool region.
pub const POOL_BASE: u64 = 0x1000_0000;
/// Fixed size of one connection buffer; 0x11000 keeps the adjacency
/// arithmetic exact against the 0x11000 placeholder reserve.
pub const SRVNET_ALLOC_SIZE: u64 = 0x11000;
/// Result-buffer allocations are rounded up to this granularity, which is
/// how a 0x10FE8-byte result list ends up in a 0x11000-byte buffer.
pub const RESULT_BUFFER_GRANULARITY: u64 = 0x1000;

/// Serialized size of the connection-header image.
pub const IMAGE_LEN: usize = 0x30;
/// Offset of the data-mapping pointer inside the image.
pub const IMAGE_P_MDL_OFFSET: usize = 0x10;
/// Offset of the disconnect-handler pointer inside the image.
pub const IMAGE_P_HANDLER_OFFSET: usize = 0x28;

/// Where the crafted overflow points both header fields; the address the
/// delivered payload would be mapped to and invoked at.
pub const DEFAULT_PAYLOAD_TARGET: VirtAddr = VirtAddr(0xFFFF_F880_0400_0000);
/// Disconnect handler a pristine connection header carries.
pub const DEFAULT_RECEIVE_HANDLER: VirtAddr = VirtAddr(0xFFFF_F880_0200_1000);

/// A virtual address in the modeled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtAddr(pub u64);

impl VirtAddr {
    pub fn offset(self, bytes: u64) -> VirtAddr {
        VirtAddr(self.0 + bytes)
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#012x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AllocationId(pub u64);

impl fmt::Display for AllocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationKind {
    SrvReserve1,
    SrvReserve2,
    SrvnetConnection,
    ResultListBuffer,
    Other,
}

impl AllocationKind {
    pub fn label(self) -> &'static str {
        match self {
            AllocationKind::SrvReserve1 => "Srv 1st reserve",
            AllocationKind::SrvReserve2 => "Srv 2nd reserve",
            AllocationKind::SrvnetConnection => "Srvnet connection",
            AllocationKind::ResultListBuffer => "result list buffer",
            AllocationKind::Other => "other",
        }
    }
}

/// The two overwritable fields of a connection buffer's header: where an
/// incoming data packet gets mapped, and what gets called on disconnect.
/// The header counts as hijacked exactly when both point at the same
/// address, which never happens on a pristine header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrvnetHeaderImage {
    pub p_mdl: VirtAddr,
    pub p_handler_function: VirtAddr,
}

impl SrvnetHeaderImage {
    /// Header of a freshly allocated connection buffer: the mapping
    /// pointer goes into the buffer's own data area, the handler at the
    /// normal receive routine.
    pub fn pristine(buffer_address: VirtAddr) -> Self {
        SrvnetHeaderImage {
            p_mdl: buffer_address.offset(0x100),
            p_handler_function: DEFAULT_RECEIVE_HANDLER,
        }
    }

    /// The image the crafted overflow carries: both fields aimed at the
    /// same target.
    pub fn hijacking(target: VirtAddr) -> Self {
        SrvnetHeaderImage {
            p_mdl: target,
            p_handler_function: target,
        }
    }

    pub fn hijacking_default() -> Self {
        Self::hijacking(DEFAULT_PAYLOAD_TARGET)
    }

    pub fn is_hijacked(&self) -> bool {
        self.p_mdl == self.p_handler_function
    }

    /// Byte image with the pointer fields at their fixed offsets.
    pub fn to_bytes(&self) -> [u8; IMAGE_LEN] {
        let mut out = [0u8; IMAGE_LEN];
        out[IMAGE_P_MDL_OFFSET..IMAGE_P_MDL_OFFSET + 8].copy_from_slice(&self.p_mdl.0.to_le_bytes());
        out[IMAGE_P_HANDLER_OFFSET..IMAGE_P_HANDLER_OFFSET + 8]
            .copy_from_slice(&self.p_handler_function.0.to_le_bytes());
        out
    }

    /// Read an image back from the head of an overflow byte run; needs the
    /// run to cover the whole image.
    pub fn from_overflow(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < IMAGE_LEN {
            return None;
        }
        let read = |off: usize| {
            let mut v = [0u8; 8];
            v.copy_from_slice(&bytes[off..off + 8]);
            VirtAddr(u64::from_le_bytes(v))
        };
        Some(SrvnetHeaderImage {
            p_mdl: read(IMAGE_P_MDL_OFFSET),
            p_handler_function: read(IMAGE_P_HANDLER_OFFSET),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub id: AllocationId,
    pub kind: AllocationKind,
    pub address: VirtAddr,
    pub size: u64,
    /// Present exactly for `SrvnetConnection` allocations.
    pub header: Option<SrvnetHeaderImage>,
}

impl Allocation {
    pub fn end(&self) -> VirtAddr {
        self.address.offset(self.size)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("allocation {0} is not live")]
    UnknownAllocation(AllocationId),
    #[error("no allocation immediately follows {after}")]
    NoAdjacentAllocation { after: VirtAddr },
    #[error("allocation {0} is not a Srvnet connection")]
    NotSrvnetConnection(AllocationId),
}

/// Result of writing an overflow byte run past an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverwriteOutcome {
    pub target: AllocationId,
    /// Whether the run covered and replaced the header pointer fields.
    pub fields_overwritten: bool,
    pub hijacked: bool,
    /// Whether the values written match the intended target address.
    pub carries_target: bool,
}

/// What closing a connection would do on the modeled server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryOutcome {
    /// Header hijacked: delivered data is mapped at the target address
    /// and the same address is invoked on disconnect.
    PayloadWouldExecute { mapped_at: VirtAddr },
    BenignDisconnect,
}

impl DeliveryOutcome {
    pub fn would_execute(&self) -> bool {
        matches!(self, DeliveryOutcome::PayloadWouldExecute { .. })
    }
}

/// The modeled pool: live allocations ordered by address, plus the LIFO
/// free stack. Operations are pure state transitions on a value type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    allocations: BTreeMap<VirtAddr, Allocation>,
    free_chunks: Vec<(VirtAddr, u64)>,
    next_fresh_address: VirtAddr,
    next_id: u64,
}

impl Default for PoolState {
    fn default() -> Self {
        Self::new()
    }
}

impl PoolState {
    pub fn new() -> Self {
        PoolState {
            allocations: BTreeMap::new(),
            free_chunks: Vec::new(),
            next_fresh_address: VirtAddr(POOL_BASE),
            next_id: 1,
        }
    }

    pub fn live_allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.values()
    }

    pub fn free_chunks(&self) -> &[(VirtAddr, u64)] {
        &self.free_chunks
    }

    pub fn get(&self, id: AllocationId) -> Option<&Allocation> {
        self.allocations.values().find(|a| a.id == id)
    }

    /// Allocate `size` bytes. If the top of the free stack is big enough
    /// the chunk is popped and its address reused; otherwise the
    /// allocation goes to the next fresh address.
    pub fn allocate(&mut self, kind: AllocationKind, size: u64) -> Allocation {
        assert!(size > 0, "zero-size allocation");
        let address = match self.free_chunks.last() {
            Some(&(addr, chunk_size)) if chunk_size >= size => {
                self.free_chunks.pop();
                addr
            }
            _ => {
                let addr = self.next_fresh_address;
                self.next_fresh_address = addr.offset(size);
                addr
            }
        };
        let id = AllocationId(self.next_id);
        self.next_id += 1;
        let header = match kind {
            AllocationKind::SrvnetConnection => Some(SrvnetHeaderImage::pristine(address)),
            _ => None,
        };
        let alloc = Allocation {
            id,
            kind,
            address,
            size,
            header,
        };
        self.allocations.insert(address, alloc.clone());
        alloc
    }

    /// Free a live allocation, pushing its chunk on the free stack.
    pub fn free(&mut self, id: AllocationId) -> Result<(), PoolError> {
        let address = self
            .allocations
            .values()
            .find(|a| a.id == id)
            .map(|a| a.address)
            .ok_or(PoolError::UnknownAllocation(id))?;
        let alloc = self.allocations.remove(&address).expect("looked up above");
        self.free_chunks.push((alloc.address, alloc.size));
        Ok(())
    }

    /// The live allocation starting exactly at the end of `id`, if any.
    pub fn adjacent_after(&self, id: AllocationId) -> Result<Option<&Allocation>, PoolError> {
        let alloc = self.get(id).ok_or(PoolError::UnknownAllocation(id))?;
        Ok(self.allocations.get(&alloc.end()))
    }

    /// Write an overflow byte run past the end of `source`.
    ///
    /// When an allocation sits immediately after the source, the run is
    /// interpreted as a header image: a pointer field is replaced when the
    /// run covers all eight of its bytes. An empty run is a no-op. The
    /// outcome records whether the written values carry `target_address`,
    /// which is what the crafted list arranges.
    pub fn apply_overflow(
        &mut self,
        source: AllocationId,
        overflow_bytes: &[u8],
        target_address: VirtAddr,
    ) -> Result<Option<OverwriteOutcome>, PoolError> {
        if overflow_bytes.is_empty() {
            return Ok(None);
        }
        let end = self
            .get(source)
            .ok_or(PoolError::UnknownAllocation(source))?
            .end();
        let victim = self
            .allocations
            .get_mut(&end)
            .ok_or(PoolError::NoAdjacentAllocation { after: end })?;

        let mut fields_overwritten = false;
        if let Some(header) = victim.header.as_mut() {
            if overflow_bytes.len() >= IMAGE_P_MDL_OFFSET + 8 {
                let mut v = [0u8; 8];
                v.copy_from_slice(&overflow_bytes[IMAGE_P_MDL_OFFSET..IMAGE_P_MDL_OFFSET + 8]);
                header.p_mdl = VirtAddr(u64::from_le_bytes(v));
                fields_overwritten = true;
            }
            if overflow_bytes.len() >= IMAGE_P_HANDLER_OFFSET + 8 {
                let mut v = [0u8; 8];
                v.copy_from_slice(
                    &overflow_bytes[IMAGE_P_HANDLER_OFFSET..IMAGE_P_HANDLER_OFFSET + 8],
                );
                header.p_handler_function = VirtAddr(u64::from_le_bytes(v));
            }
        }
        let header = victim.header;
        Ok(Some(OverwriteOutcome {
            target: victim.id,
            fields_overwritten,
            hijacked: header.map(|h| h.is_hijacked()).unwrap_or(false),
            carries_target: header
                .map(|h| h.p_mdl == target_address && h.p_handler_function == target_address)
                .unwrap_or(false),
        }))
    }

    /// Deliver data on a connection and close it: the final step of the
    /// choreography. Delivered bytes are mapped at the header's mapping
    /// pointer; the disconnect invokes the handler pointer. When both are
    /// the same attacker-chosen address, the payload would run.
    pub fn deliver_and_disconnect(
        &mut self,
        connection: AllocationId,
    ) -> Result<DeliveryOutcome, PoolError> {
        let alloc = self
            .get(connection)
            .ok_or(PoolError::UnknownAllocation(connection))?;
        let header = match (alloc.kind, alloc.header) {
            (AllocationKind::SrvnetConnection, Some(h)) => h,
            _ => return Err(PoolError::NotSrvnetConnection(connection)),
        };
        let outcome = if header.is_hijacked() {
            DeliveryOutcome::PayloadWouldExecute {
                mapped_at: header.p_mdl,
            }
        } else {
            DeliveryOutcome::BenignDisconnect
        };
        self.free(connection)?;
        Ok(outcome)
    }

    /// Text rendering of the live layout and free stack, one row per
    /// allocation in address order.
    pub fn render_diagram(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "pool: {} live allocation(s), next fresh address {}\n",
            self.allocations.len(),
            self.next_fresh_address
        ));
        out.push_str("+--------------+---------+---------------------+------+\n");
        for alloc in self.allocations.values() {
            let mark = alloc
                .header
                .map(|h| if h.is_hijacked() { " hijacked" } else { "" })
                .unwrap_or("");
            out.push_str(&format!(
                "| {} | {:>7} | {:<19} | {:>4} |{}\n",
                alloc.address,
                format!("{:#x}", alloc.size),
                alloc.kind.label(),
                alloc.id.to_string(),
                mark
            ));
        }
        out.push_str("+--------------+---------+---------------------+------+\n");
        if self.free_chunks.is_empty() {
            out.push_str("free stack: empty\n");
        } else {
            out.push_str("free stack (top first):\n");
            for (addr, size) in self.free_chunks.iter().rev() {
                out.push_str(&format!("  ({addr}, {size:#x})\n"));
            }
        }
        out
    }
}

/// One step of a grooming script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroomStep {
    /// `RESERVE <1|2> <size>`: reserve buffer number 1 or 2.
    Reserve { which: u8, size: u64 },
    /// `SRVNET <n>`: open `n` connection buffers, numbered sequentially
    /// across the whole script starting at 1.
    Srvnet { count: u32 },
    /// `FREE <1|2>`: free reserve buffer number 1 or 2.
    Free { which: u8 },
    /// `CONVERT bug=on|off`: run the crafted-list conversion, allocate the
    /// result buffer, and write any overflow past it.
    Convert { bug_enabled: bool },
    /// `DELIVER <n>`: deliver payload on connection `n` and close it.
    Deliver { conn: u32 },
}

/// A parsed script line, keeping its source line number for errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptLine {
    pub line_no: usize,
    pub step: GroomStep,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("script error at line {line_no}: {message}")]
pub struct ScriptError {
    pub line_no: usize,
    pub message: String,
}

fn script_err(line_no: usize, message: impl Into<String>) -> ScriptError {
    ScriptError {
        line_no,
        message: message.into(),
    }
}

fn parse_size(line_no: usize, token: &str) -> Result<u64, ScriptError> {
    let parsed = if let Some(hex) = token.strip_prefix("0x").or_else(|| token.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        token.parse()
    };
    parsed.map_err(|_| script_err(line_no, format!("invalid size {token:?}")))
}

/// Parse the line-oriented script format. `#` starts a comment.
pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, ScriptError> {
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let verb = tokens.next().unwrap_or("").to_ascii_uppercase();
        let step = match verb.as_str() {
            "RESERVE" => {
                let which = tokens
                    .next()
                    .and_then(|t| t.parse::<u8>().ok())
                    .filter(|w| *w == 1 || *w == 2)
                    .ok_or_else(|| script_err(line_no, "RESERVE needs a buffer number 1 or 2"))?;
                let size = parse_size(
                    line_no,
                    tokens
                        .next()
                        .ok_or_else(|| script_err(line_no, "RESERVE needs a size"))?,
                )?;
                GroomStep::Reserve { which, size }
            }
            "SRVNET" => {
                let count = tokens
                    .next()
                    .and_then(|t| t.parse::<u32>().ok())
                    .filter(|c| *c > 0)
                    .ok_or_else(|| script_err(line_no, "SRVNET needs a positive count"))?;
                GroomStep::Srvnet { count }
            }
            "FREE" => {
                let which = tokens
                    .next()
                    .and_then(|t| t.parse::<u8>().ok())
                    .filter(|w| *w == 1 || *w == 2)
                    .ok_or_else(|| script_err(line_no, "FREE needs a buffer number 1 or 2"))?;
                GroomStep::Free { which }
            }
            "CONVERT" => match tokens.next() {
                Some("bug=on") => GroomStep::Convert { bug_enabled: true },
                Some("bug=off") => GroomStep::Convert { bug_enabled: false },
                other => {
                    return Err(script_err(
                        line_no,
                        format!("CONVERT needs bug=on or bug=off, got {other:?}"),
                    ))
                }
            },
            "DELIVER" => {
                let conn = tokens
                    .next()
                    .and_then(|t| t.parse::<u32>().ok())
                    .ok_or_else(|| script_err(line_no, "DELIVER needs a connection number"))?;
                GroomStep::Deliver { conn }
            }
            other => return Err(script_err(line_no, format!("unknown step {other:?}"))),
        };
        if tokens.next().is_some() {
            return Err(script_err(line_no, "unexpected trailing tokens"));
        }
        lines.push(ScriptLine { line_no, step });
    }
    Ok(lines)
}

/// Whether a connection buffer sits immediately after the result buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyVerdict {
    Adjacent {
        result_buffer: AllocationId,
        srvnet: AllocationId,
    },
    NotAdjacent,
}

impl AdjacencyVerdict {
    pub fn is_adjacent(&self) -> bool {
        matches!(self, AdjacencyVerdict::Adjacent { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimVerdict {
    PayloadWouldExecute,
    Benign,
}

/// Everything a script run produces: the final pool, per-step snapshots
/// for rendering, and the conversion/delivery outcomes.
#[derive(Debug, Clone)]
pub struct GroomingResult {
    pub final_state: PoolState,
    pub step_states: Vec<(ScriptLine, PoolState)>,
    pub adjacency: AdjacencyVerdict,
    pub conversion: Option<ConversionOutcome>,
    pub overwrite: Option<OverwriteOutcome>,
    pub reserve_addresses: [Option<VirtAddr>; 2],
    pub result_buffer: Option<Allocation>,
    pub deliveries: Vec<(u32, DeliveryOutcome)>,
    pub verdict: SimVerdict,
}

/// Execute a grooming script against a fresh pool.
pub fn run_grooming_script(script: &[ScriptLine]) -> Result<GroomingResult, ScriptError> {
    let mut state = PoolState::new();
    let mut step_states = Vec::with_capacity(script.len());
    let mut reserves: [Option<AllocationId>; 2] = [None, None];
    let mut reserve_addresses: [Option<VirtAddr>; 2] = [None, None];
    let mut connections: Vec<AllocationId> = Vec::new();
    let mut adjacency = AdjacencyVerdict::NotAdjacent;
    let mut conversion = None;
    let mut overwrite = None;
    let mut result_buffer = None;
    let mut deliveries = Vec::new();

    for line in script {
        match line.step {
            GroomStep::Reserve { which, size } => {
                let slot = usize::from(which - 1);
                if reserves[slot].is_some() {
                    return Err(script_err(
                        line.line_no,
                        format!("reserve buffer {which} is already live"),
                    ));
                }
                let kind = if which == 1 {
                    AllocationKind::SrvReserve1
                } else {
                    AllocationKind::SrvReserve2
                };
                let alloc = state.allocate(kind, size);
                reserves[slot] = Some(alloc.id);
                reserve_addresses[slot] = Some(alloc.address);
            }
            GroomStep::Srvnet { count } => {
                for _ in 0..count {
                    let alloc = state.allocate(AllocationKind::SrvnetConnection, SRVNET_ALLOC_SIZE);
                    connections.push(alloc.id);
                }
            }
            GroomStep::Free { which } => {
                let slot = usize::from(which - 1);
                let id = reserves[slot].take().ok_or_else(|| {
                    script_err(line.line_no, format!("reserve buffer {which} is not live"))
                })?;
                state
                    .free(id)
                    .map_err(|e| script_err(line.line_no, e.to_string()))?;
            }
            GroomStep::Convert { bug_enabled } => {
                let list = canonical_crafted_list();
                let outcome = convert_list(&list, bug_enabled)
                    .map_err(|e| script_err(line.line_no, e.to_string()))?;
                let buffer_size = (outcome.s1 as u64).next_multiple_of(RESULT_BUFFER_GRANULARITY);
                let buffer = state.allocate(AllocationKind::ResultListBuffer, buffer_size);
                adjacency = match state
                    .adjacent_after(buffer.id)
                    .map_err(|e| script_err(line.line_no, e.to_string()))?
                {
                    Some(next) if next.kind == AllocationKind::SrvnetConnection => {
                        AdjacencyVerdict::Adjacent {
                            result_buffer: buffer.id,
                            srvnet: next.id,
                        }
                    }
                    _ => AdjacencyVerdict::NotAdjacent,
                };
                if outcome.overflowed() {
                    // A missing neighbor is a failed groom, not a script
                    // error: the run completes and reports NotAdjacent.
                    overwrite = state
                        .apply_overflow(buffer.id, &outcome.overflow_bytes, DEFAULT_PAYLOAD_TARGET)
                        .ok()
                        .flatten();
                }
                conversion = Some(outcome);
                result_buffer = Some(buffer);
            }
            GroomStep::Deliver { conn } => {
                let id = conn
                    .checked_sub(1)
                    .and_then(|idx| connections.get(idx as usize))
                    .copied()
                    .ok_or_else(|| {
                        script_err(line.line_no, format!("connection {conn} was never opened"))
                    })?;
                let outcome = state
                    .deliver_and_disconnect(id)
                    .map_err(|e| script_err(line.line_no, e.to_string()))?;
                deliveries.push((conn, outcome));
            }
        }
        step_states.push((*line, state.clone()));
    }

    let verdict = if deliveries.iter().any(|(_, d)| d.would_execute()) {
        SimVerdict::PayloadWouldExecute
    } else {
        SimVerdict::Benign
    };

    Ok(GroomingResult {
        final_state: state,
        step_states,
        adjacency,
        conversion,
        overwrite,
        reserve_addresses,
        result_buffer,
        deliveries,
        verdict,
    })
}

/// The canonical choreography: reserve 0x10000, open 13 connections,
/// reserve 0x11000, free the first reserve, open 6 more connections, free
/// the second reserve, convert with the bug on, then deliver on every
/// connection.
pub const CANONICAL_SCRIPT: &str = "\
# canonical grooming choreography
RESERVE 1 0x10000
SRVNET 13
RESERVE 2 0x11000
FREE 1
SRVNET 6
FREE 2
CONVERT bug=on
DELIVER 1
DELIVER 2
DELIVER 3
DELIVER 4
DELIVER 5
DELIVER 6
DELIVER 7
DELIVER 8
DELIVER 9
DELIVER 10
DELIVER 11
DELIVER 12
DELIVER 13
DELIVER 14
DELIVER 15
DELIVER 16
DELIVER 17
DELIVER 18
DELIVER 19
";

/// Parsed form of [`CANONICAL_SCRIPT`].
pub fn canonical_script() -> Vec<ScriptLine> {
    parse_script(CANONICAL_SCRIPT).expect("canonical script parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_pool_bumps_addresses() {
        let mut pool = PoolState::new();
        let a = pool.allocate(AllocationKind::Other, 0x100);
        let b = pool.allocate(AllocationKind::Other, 0x40);
        assert_eq!(a.address, VirtAddr(POOL_BASE));
        assert_eq!(b.address, a.address.offset(0x100));
    }

    #[test]
    fn freed_chunk_is_reused_lifo() {
        let mut pool = PoolState::new();
        let a = pool.allocate(AllocationKind::SrvReserve2, 0x11000);
        let _pad = pool.allocate(AllocationKind::Other, 0x1000);
        pool.free(a.id).unwrap();
        let b = pool.allocate(AllocationKind::ResultListBuffer, 0x11000);
        assert_eq!(b.address, a.address);
    }

    #[test]
    fn small_top_chunk_is_skipped() {
        let mut pool = PoolState::new();
        let small = pool.allocate(AllocationKind::Other, 0x1000);
        pool.free(small.id).unwrap();
        let big = pool.allocate(AllocationKind::Other, 0x2000);
        assert_ne!(big.address, small.address);
        assert_eq!(pool.free_chunks().len(), 1);
    }

    #[test]
    fn double_free_is_unknown() {
        let mut pool = PoolState::new();
        let a = pool.allocate(AllocationKind::Other, 0x10);
        pool.free(a.id).unwrap();
        assert_eq!(pool.free(a.id), Err(PoolError::UnknownAllocation(a.id)));
        assert_eq!(
            pool.free(AllocationId(999)),
            Err(PoolError::UnknownAllocation(AllocationId(999)))
        );
    }

    #[test]
    fn overflow_with_gap_has_no_adjacent_allocation() {
        let mut pool = PoolState::new();
        let src = pool.allocate(AllocationKind::ResultListBuffer, 0x1000);
        let gap = pool.allocate(AllocationKind::Other, 0x1000);
        let _far = pool.allocate(AllocationKind::SrvnetConnection, SRVNET_ALLOC_SIZE);
        pool.free(gap.id).unwrap();
        let err = pool
            .apply_overflow(src.id, &[0u8; IMAGE_LEN], DEFAULT_PAYLOAD_TARGET)
            .unwrap_err();
        assert_eq!(err, PoolError::NoAdjacentAllocation { after: src.end() });
    }

    #[test]
    fn empty_overflow_is_a_no_op() {
        let mut pool = PoolState::new();
        let src = pool.allocate(AllocationKind::ResultListBuffer, 0x1000);
        let before = pool.clone();
        assert_eq!(pool.apply_overflow(src.id, &[], DEFAULT_PAYLOAD_TARGET), Ok(None));
        assert_eq!(pool, before);
    }

    #[test]
    fn overflow_hijacks_adjacent_connection_header() {
        let mut pool = PoolState::new();
        let src = pool.allocate(AllocationKind::ResultListBuffer, 0x1000);
        let conn = pool.allocate(AllocationKind::SrvnetConnection, SRVNET_ALLOC_SIZE);
        assert!(!pool.get(conn.id).unwrap().header.unwrap().is_hijacked());

        let image = SrvnetHeaderImage::hijacking_default().to_bytes();
        let outcome = pool
            .apply_overflow(src.id, &image, DEFAULT_PAYLOAD_TARGET)
            .unwrap()
            .unwrap();
        assert!(outcome.fields_overwritten && outcome.hijacked && outcome.carries_target);

        let header = pool.get(conn.id).unwrap().header.unwrap();
        assert_eq!(header.p_mdl, header.p_handler_function);
        assert_eq!(header.p_mdl, DEFAULT_PAYLOAD_TARGET);
    }

    #[test]
    fn short_overflow_does_not_reach_the_fields() {
        let mut pool = PoolState::new();
        let src = pool.allocate(AllocationKind::ResultListBuffer, 0x1000);
        let conn = pool.allocate(AllocationKind::SrvnetConnection, SRVNET_ALLOC_SIZE);
        let before = pool.get(conn.id).unwrap().header.unwrap();
        let outcome = pool
            .apply_overflow(src.id, &[0xCC; IMAGE_P_MDL_OFFSET], DEFAULT_PAYLOAD_TARGET)
            .unwrap()
            .unwrap();
        assert!(!outcome.fields_overwritten && !outcome.hijacked);
        assert_eq!(pool.get(conn.id).unwrap().header.unwrap(), before);
    }

    #[test]
    fn delivery_depends_on_hijack() {
        let mut pool = PoolState::new();
        let untouched = pool.allocate(AllocationKind::SrvnetConnection, SRVNET_ALLOC_SIZE);
        assert_eq!(
            pool.deliver_and_disconnect(untouched.id),
            Ok(DeliveryOutcome::BenignDisconnect)
        );
        // Disconnect freed it.
        assert_eq!(
            pool.deliver_and_disconnect(untouched.id),
            Err(PoolError::UnknownAllocation(untouched.id))
        );

        let src = pool.allocate(AllocationKind::ResultListBuffer, 0x1000);
        let conn = pool.allocate(AllocationKind::SrvnetConnection, SRVNET_ALLOC_SIZE);
        let image = SrvnetHeaderImage::hijacking_default().to_bytes();
        pool.apply_overflow(src.id, &image, DEFAULT_PAYLOAD_TARGET)
            .unwrap();
        assert_eq!(
            pool.deliver_and_disconnect(conn.id),
            Ok(DeliveryOutcome::PayloadWouldExecute {
                mapped_at: DEFAULT_PAYLOAD_TARGET
            })
        );
    }

    #[test]
    fn canonical_script_reuses_the_second_reserve_slot() {
        let result = run_grooming_script(&canonical_script()).unwrap();
        let buffer = result.result_buffer.as_ref().unwrap();
        assert_eq!(Some(buffer.address), result.reserve_addresses[1]);
        assert_eq!(buffer.size, 0x11000);
        assert_eq!(result.conversion.as_ref().unwrap().s1, 0x10FE8);

        // One of the second-wave connections sits right behind it.
        match result.adjacency {
            AdjacencyVerdict::Adjacent { srvnet, .. } => {
                let state_after_convert = &result
                    .step_states
                    .iter()
                    .find(|(l, _)| matches!(l.step, GroomStep::Convert { .. }))
                    .unwrap()
                    .1;
                let neighbor = state_after_convert.get(srvnet).unwrap();
                assert_eq!(neighbor.address, buffer.address.offset(0x11000));
            }
            AdjacencyVerdict::NotAdjacent => panic!("expected adjacency"),
        }
        assert_eq!(result.verdict, SimVerdict::PayloadWouldExecute);
        assert_eq!(
            result
                .deliveries
                .iter()
                .filter(|(_, d)| d.would_execute())
                .count(),
            1
        );
    }

    #[test]
    fn canonical_script_with_bug_off_is_benign() {
        let text = CANONICAL_SCRIPT.replace("bug=on", "bug=off");
        let result = run_grooming_script(&parse_script(&text).unwrap()).unwrap();
        assert_eq!(result.verdict, SimVerdict::Benign);
        assert!(result.deliveries.iter().all(|(_, d)| !d.would_execute()));
    }

    #[test]
    fn omitting_the_second_reserve_breaks_adjacency() {
        let text: String = CANONICAL_SCRIPT
            .lines()
            .filter(|l| *l != "RESERVE 2 0x11000" && *l != "FREE 2")
            .map(|l| format!("{l}\n"))
            .collect();
        let result = run_grooming_script(&parse_script(&text).unwrap()).unwrap();
        assert_eq!(result.adjacency, AdjacencyVerdict::NotAdjacent);
        assert_eq!(result.verdict, SimVerdict::Benign);
    }

    #[test]
    fn script_errors_carry_line_numbers() {
        let err = parse_script("RESERVE 1 0x10000\nRESERVE 3 0x10\n").unwrap_err();
        assert_eq!(err.line_no, 2);

        let script = parse_script("RESERVE 1 0x10000\nFREE 1\nFREE 1\n").unwrap();
        let err = run_grooming_script(&script).unwrap_err();
        assert_eq!(err.line_no, 3);
    }

    #[test]
    fn identical_scripts_produce_identical_states() {
        let a = run_grooming_script(&canonical_script()).unwrap();
        let b = run_grooming_script(&canonical_script()).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.deliveries, b.deliveries);
    }

    fn assert_disjoint(pool: &PoolState) {
        let allocs: Vec<_> = pool.live_allocations().collect();
        for pair in allocs.windows(2) {
            assert!(
                pair[0].end() <= pair[1].address,
                "overlap between {} and {}",
                pair[0].id,
                pair[1].id
            );
        }
    }

    proptest! {
        /// Free then allocate the same size lands on the same address.
        #[test]
        fn lifo_law(sizes in proptest::collection::vec(1u64..0x4000, 1..12), pick in any::<prop::sample::Index>()) {
            let mut pool = PoolState::new();
            let allocs: Vec<_> = sizes
                .iter()
                .map(|s| pool.allocate(AllocationKind::Other, *s))
                .collect();
            let chosen = &allocs[pick.index(allocs.len())];
            pool.free(chosen.id).unwrap();
            let again = pool.allocate(AllocationKind::Other, chosen.size);
            prop_assert_eq!(again.address, chosen.address);
        }

        /// Live allocations stay pairwise disjoint under random scripts.
        #[test]
        fn non_overlap(ops in proptest::collection::vec((any::<bool>(), 1u64..0x8000), 1..40)) {
            let mut pool = PoolState::new();
            let mut live: Vec<AllocationId> = Vec::new();
            for (free, size) in ops {
                if free && !live.is_empty() {
                    let id = live.remove((size as usize) % live.len());
                    pool.free(id).unwrap();
                } else {
                    live.push(pool.allocate(AllocationKind::Other, size).id);
                }
                assert_disjoint(&pool);
            }
        }
    }
}
