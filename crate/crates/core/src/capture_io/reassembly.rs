//! TCP flow reassembly and stream interpretation.
//!
//! Each 445-flow direction is put back into sequence order (out-of-order
//! segments are buffered, duplicates dropped, retransmitted prefixes
//! trimmed), then interpreted: a direction whose first bytes carry the
//! NetBIOS/SMB framing magic is cut into session frames and parsed as SMB,
//! anything else surfaces as raw data chunks. Every delivered byte keeps
//! the timestamp of the segment that carried it, so frame events land at
//! the time their last byte arrived no matter the capture order.
//!
//! One deliberate wrinkle: a frame whose declared length exceeds what has
//! arrived, but whose available bytes already form a complete SMB message,
//! is emitted immediately with the over-declaration recorded. Those
//! never-completed frames are the pool-reserve packets, and the detector
//! needs them when they happen, not when the connection dies.

use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use crate::groom_detector::{
    Direction, Endpoint, FlowEvent, FlowEventKind, FlowKey, Timestamp,
};
use crate::smb_wire::{parse_smb, Framing, NBSS_HEADER_LEN, SMB_HEADER_LEN, SMB_MAGIC};

use super::packet::{parse_frame, tcp_flags};
use super::pcap::CaptureFile;
use super::CaptureError;

pub const SMB_PORT: u16 = 445;

// Minimum bytes of an SMB message: header + word count + byte count.
const SMB_MIN_LEN: usize = SMB_HEADER_LEN + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StreamMode {
    Smb,
    Raw,
}

#[derive(Debug)]
enum StreamItem {
    Smb(crate::smb_wire::SmbMessage, Timestamp),
    Raw(usize, Timestamp),
}

/// Byte buffer that remembers which segment (timestamp) supplied each
/// chunk, so consumed ranges can report the arrival time of their last
/// byte.
#[derive(Debug, Default)]
struct ChunkBuffer {
    chunks: VecDeque<(Vec<u8>, Timestamp)>,
    front_consumed: usize,
    total: usize,
}

impl ChunkBuffer {
    fn push(&mut self, bytes: Vec<u8>, ts: Timestamp) {
        self.total += bytes.len();
        self.chunks.push_back((bytes, ts));
    }

    fn len(&self) -> usize {
        self.total
    }

    fn peek(&self, n: usize) -> Option<Vec<u8>> {
        if self.total < n {
            return None;
        }
        let mut out = Vec::with_capacity(n);
        let mut skip = self.front_consumed;
        for (chunk, _) in &self.chunks {
            let avail = &chunk[skip..];
            skip = 0;
            let take = avail.len().min(n - out.len());
            out.extend_from_slice(&avail[..take]);
            if out.len() == n {
                break;
            }
        }
        Some(out)
    }

    /// Remove `n` bytes; returns them with the timestamp of the chunk that
    /// supplied the final byte.
    fn consume(&mut self, n: usize) -> (Vec<u8>, Timestamp) {
        assert!(n <= self.total && n > 0);
        let mut out = Vec::with_capacity(n);
        let mut last_ts = Timestamp::from_micros(0);
        while out.len() < n {
            let (chunk, ts) = self.chunks.front().expect("total says bytes exist");
            let avail = &chunk[self.front_consumed..];
            let take = avail.len().min(n - out.len());
            out.extend_from_slice(&avail[..take]);
            last_ts = *ts;
            self.front_consumed += take;
            if self.front_consumed == chunk.len() {
                self.chunks.pop_front();
                self.front_consumed = 0;
            }
        }
        self.total -= n;
        (out, last_ts)
    }

    fn drain_chunks(&mut self) -> Vec<(Vec<u8>, Timestamp)> {
        let mut out = Vec::with_capacity(self.chunks.len());
        while let Some((chunk, ts)) = self.chunks.pop_front() {
            let bytes = chunk[self.front_consumed..].to_vec();
            self.front_consumed = 0;
            if !bytes.is_empty() {
                out.push((bytes, ts));
            }
        }
        self.total = 0;
        out
    }
}

/// Stream interpreter for one flow direction.
#[derive(Debug, Default)]
struct StreamReader {
    mode: Option<StreamMode>,
    buf: ChunkBuffer,
}

impl StreamReader {
    fn push(&mut self, bytes: Vec<u8>, ts: Timestamp) -> Vec<StreamItem> {
        self.buf.push(bytes, ts);
        let mut items = Vec::new();

        if self.mode.is_none() {
            match self.buf.peek(NBSS_HEADER_LEN + 4) {
                Some(head) => {
                    let is_smb = head[0] == 0x00 && head[4..8] == SMB_MAGIC;
                    self.mode = Some(if is_smb { StreamMode::Smb } else { StreamMode::Raw });
                }
                None => return items, // undecided until 8 bytes arrive
            }
        }

        match self.mode {
            Some(StreamMode::Raw) => {
                for (chunk, cts) in self.buf.drain_chunks() {
                    items.push(StreamItem::Raw(chunk.len(), cts));
                }
            }
            Some(StreamMode::Smb) => self.extract_frames(&mut items),
            None => unreachable!(),
        }
        items
    }

    fn extract_frames(&mut self, items: &mut Vec<StreamItem>) {
        loop {
            let Some(head) = self.buf.peek(NBSS_HEADER_LEN) else {
                return;
            };
            if head[0] != 0x00 {
                // Desynchronized stream: stop interpreting it as SMB.
                self.mode = Some(StreamMode::Raw);
                for (chunk, cts) in self.buf.drain_chunks() {
                    items.push(StreamItem::Raw(chunk.len(), cts));
                }
                return;
            }
            let declared = usize::from(head[1]) << 16 | usize::from(head[2]) << 8
                | usize::from(head[3]);
            let whole = NBSS_HEADER_LEN + declared;

            if self.buf.len() >= whole {
                let (frame, ts) = self.buf.consume(whole);
                match parse_smb(&frame, Framing::NetBios) {
                    Ok(msg) => items.push(StreamItem::Smb(msg, ts)),
                    Err(_) => items.push(StreamItem::Raw(frame.len(), ts)),
                }
                continue;
            }

            // Frame incomplete. If the declaration overshoots but the bytes
            // already on hand form a complete message, emit it now.
            let avail = self.buf.len();
            if avail >= NBSS_HEADER_LEN + SMB_MIN_LEN {
                if let Some(candidate) = self.buf.peek(avail) {
                    if let Ok(msg) = parse_smb(&candidate, Framing::NetBios) {
                        let (_, ts) = self.buf.consume(avail);
                        items.push(StreamItem::Smb(msg, ts));
                        continue;
                    }
                }
            }
            return;
        }
    }
}

/// Sequencing state for one flow direction: initial sequence number,
/// delivery cursor, and the out-of-order segment buffer.
#[derive(Debug, Default)]
struct DirectionAssembly {
    isn: Option<u32>,
    next_rel: u32,
    pending: BTreeMap<u32, (Vec<u8>, Timestamp)>,
    reader: StreamReader,
}

impl DirectionAssembly {
    /// Accept one segment's payload; returns the chunks that became
    /// deliverable, in sequence order, one per original segment.
    fn accept(&mut self, seq: u32, bytes: &[u8], ts: Timestamp) -> Vec<(Vec<u8>, Timestamp)> {
        let isn = *self.isn.get_or_insert(seq);
        let mut rel = seq.wrapping_sub(isn);
        let mut bytes = bytes;

        // Retransmission of already-delivered data: keep only the new tail.
        if rel < self.next_rel {
            let skip = (self.next_rel - rel) as usize;
            if skip >= bytes.len() {
                return Vec::new();
            }
            bytes = &bytes[skip..];
            rel = self.next_rel;
        }
        // First copy wins on duplicate offsets.
        self.pending.entry(rel).or_insert_with(|| (bytes.to_vec(), ts));

        let mut out = Vec::new();
        while let Some((&front, _)) = self.pending.first_key_value() {
            if front > self.next_rel {
                break;
            }
            let (front, (buf, cts)) = self.pending.pop_first().expect("peeked above");
            let skip = (self.next_rel - front) as usize;
            if skip >= buf.len() {
                continue; // fully duplicated segment
            }
            let chunk = buf[skip..].to_vec();
            self.next_rel = self.next_rel.wrapping_add(chunk.len() as u32);
            out.push((chunk, cts));
        }
        out
    }

    /// Relative offsets still sitting out of order; non-empty means the
    /// direction ended with gaps.
    fn gap_offsets(&self) -> Vec<u32> {
        self.pending.keys().copied().collect()
    }
}

/// Reassembly for one TCP connection, both directions.
#[derive(Debug, Default)]
pub struct TcpFlowAssembly {
    client: DirectionAssembly,
    server: DirectionAssembly,
}

impl TcpFlowAssembly {
    fn direction(&mut self, dir: Direction) -> &mut DirectionAssembly {
        match dir {
            Direction::ClientToServer => &mut self.client,
            Direction::ServerToClient => &mut self.server,
        }
    }

    pub fn gap_offsets(&self) -> (Vec<u32>, Vec<u32>) {
        (self.client.gap_offsets(), self.server.gap_offsets())
    }
}

/// Turn a capture into flow events: one pass over the records, per-flow
/// reassembly, global sort by timestamp at the end.
pub fn extract_events(capture: &CaptureFile) -> Result<Vec<FlowEvent>, CaptureError> {
    let mut flows: BTreeMap<FlowKey, TcpFlowAssembly> = BTreeMap::new();
    let mut events: Vec<FlowEvent> = Vec::new();

    for record in &capture.records {
        let Some(seg) = parse_frame(&record.frame) else {
            continue;
        };
        let (flow, direction) = match (seg.src_port, seg.dst_port) {
            (_, SMB_PORT) => (
                FlowKey {
                    client: endpoint(seg.src_ip, seg.src_port),
                    server: endpoint(seg.dst_ip, seg.dst_port),
                },
                Direction::ClientToServer,
            ),
            (SMB_PORT, _) => (
                FlowKey {
                    client: endpoint(seg.dst_ip, seg.dst_port),
                    server: endpoint(seg.src_ip, seg.src_port),
                },
                Direction::ServerToClient,
            ),
            _ => continue,
        };
        let ts = record.timestamp();
        let assembly = flows.entry(flow).or_default();
        let dir_state = assembly.direction(direction);

        if seg.flags & tcp_flags::SYN != 0 {
            // SYN consumes one sequence number; data starts right after.
            dir_state.isn = Some(seg.seq.wrapping_add(1));
            dir_state.next_rel = 0;
            if direction == Direction::ClientToServer && seg.flags & tcp_flags::ACK == 0 {
                events.push(FlowEvent {
                    timestamp: ts,
                    flow,
                    direction,
                    kind: FlowEventKind::RawTcpOpen,
                });
            }
        }

        let payload = seg.payload(&record.frame);
        if !payload.is_empty() {
            for (chunk, cts) in dir_state.accept(seg.seq, payload, ts) {
                for item in dir_state.reader.push(chunk, cts) {
                    events.push(match item {
                        StreamItem::Smb(msg, at) => FlowEvent {
                            timestamp: at,
                            flow,
                            direction,
                            kind: FlowEventKind::SmbParsed(msg),
                        },
                        StreamItem::Raw(len, at) => FlowEvent {
                            timestamp: at,
                            flow,
                            direction,
                            kind: FlowEventKind::RawTcpData(len),
                        },
                    });
                }
            }
        }

        if seg.flags & tcp_flags::FIN != 0 {
            events.push(FlowEvent {
                timestamp: ts,
                flow,
                direction,
                kind: FlowEventKind::TcpFin,
            });
        }
    }

    events.sort_by_key(|e| e.timestamp);
    Ok(events)
}

fn endpoint(host: Ipv4Addr, port: u16) -> Endpoint {
    Endpoint { host, port }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture_io::packet::{build_frame, TcpSegmentSpec};
    use crate::smb_wire::{build, serialize_smb};

    fn push_seg(
        cap: &mut CaptureFile,
        ts_us: u64,
        c2s: bool,
        seq: u32,
        flags: u8,
        payload: &[u8],
    ) {
        let (src_ip, dst_ip, src_port, dst_port) = if c2s {
            (Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2), 50100, SMB_PORT)
        } else {
            (Ipv4Addr::new(10, 0, 0, 2), Ipv4Addr::new(10, 0, 0, 1), SMB_PORT, 50100)
        };
        let frame = build_frame(&TcpSegmentSpec {
            src_mac: [2; 6],
            dst_mac: [4; 6],
            src_ip,
            dst_ip,
            ip_id: (ts_us / 1000) as u16,
            src_port,
            dst_port,
            seq,
            ack: 0,
            flags,
            window: 64240,
            payload,
        });
        cap.push_frame(Timestamp::from_micros(ts_us), frame);
    }

    #[test]
    fn smb_stream_is_framed_and_parsed() {
        let mut cap = CaptureFile::new();
        push_seg(&mut cap, 1_000, true, 100, tcp_flags::SYN, &[]);
        push_seg(&mut cap, 2_000, false, 500, tcp_flags::SYN | tcp_flags::ACK, &[]);

        let msg = serialize_smb(&build::negotiate_request(), Framing::NetBios).unwrap();
        // Split the frame across two segments.
        let cut = msg.len() / 2;
        push_seg(&mut cap, 3_000, true, 101, tcp_flags::ACK | tcp_flags::PSH, &msg[..cut]);
        push_seg(&mut cap, 4_000, true, 101 + cut as u32, tcp_flags::ACK | tcp_flags::PSH, &msg[cut..]);
        push_seg(&mut cap, 5_000, true, 101 + msg.len() as u32, tcp_flags::FIN | tcp_flags::ACK, &[]);

        let events = extract_events(&cap).unwrap();
        let kinds: Vec<_> = events.iter().map(|e| std::mem::discriminant(&e.kind)).collect();
        assert_eq!(kinds.len(), 3); // open, smb, fin
        match &events[1].kind {
            FlowEventKind::SmbParsed(m) => {
                assert_eq!(m, &build::negotiate_request());
                // The frame completed with the second data segment.
                assert_eq!(events[1].timestamp, Timestamp::from_micros(4_000));
            }
            other => panic!("expected SmbParsed, got {other:?}"),
        }
        assert!(matches!(events[2].kind, FlowEventKind::TcpFin));
    }

    #[test]
    fn reordered_segments_yield_identical_events() {
        let build_cap = |swap: bool| {
            let mut cap = CaptureFile::new();
            push_seg(&mut cap, 1_000, true, 100, tcp_flags::SYN, &[]);
            let msg = serialize_smb(&build::echo_request(7), Framing::NetBios).unwrap();
            let cut = 10;
            let seg_a = (2_000u64, 101u32, msg[..cut].to_vec());
            let seg_b = (3_000u64, 101 + cut as u32, msg[cut..].to_vec());
            let ordered = if swap { [&seg_b, &seg_a] } else { [&seg_a, &seg_b] };
            for (ts, seq, payload) in ordered {
                push_seg(&mut cap, *ts, true, *seq, tcp_flags::ACK | tcp_flags::PSH, payload);
            }
            cap
        };
        let in_order = extract_events(&build_cap(false)).unwrap();
        let shuffled = extract_events(&build_cap(true)).unwrap();
        assert_eq!(in_order, shuffled);
    }

    #[test]
    fn retransmissions_are_dropped() {
        let mut cap = CaptureFile::new();
        push_seg(&mut cap, 1_000, true, 100, tcp_flags::SYN, &[]);
        push_seg(&mut cap, 2_000, true, 101, tcp_flags::ACK | tcp_flags::PSH, b"raw-preamble");
        // Exact duplicate and an overlapping retransmission.
        push_seg(&mut cap, 3_000, true, 101, tcp_flags::ACK | tcp_flags::PSH, b"raw-preamble");
        push_seg(&mut cap, 4_000, true, 105, tcp_flags::ACK | tcp_flags::PSH, b"preamble-and-more");

        let events = extract_events(&cap).unwrap();
        let delivered: usize = events
            .iter()
            .filter_map(|e| match e.kind {
                FlowEventKind::RawTcpData(n) => Some(n),
                _ => None,
            })
            .sum();
        assert_eq!(delivered, "raw-preamble-and-more".len());
    }

    #[test]
    fn oversized_declaration_is_emitted_eagerly() {
        let mut cap = CaptureFile::new();
        push_seg(&mut cap, 1_000, true, 100, tcp_flags::SYN, &[]);
        let bytes =
            serialize_smb(&build::oversized_session_setup(0x11000), Framing::NetBios).unwrap();
        push_seg(&mut cap, 2_000, true, 101, tcp_flags::ACK | tcp_flags::PSH, &bytes);
        // No FIN: the connection is left hanging, as the groom does.

        let events = extract_events(&cap).unwrap();
        let msg = events
            .iter()
            .find_map(|e| match &e.kind {
                FlowEventKind::SmbParsed(m) => Some(m),
                _ => None,
            })
            .expect("partial frame should surface");
        assert_eq!(msg.implied_reservation(), Some(0x11000));
    }

    #[test]
    fn non_smb_streams_surface_as_raw_chunks() {
        let mut cap = CaptureFile::new();
        push_seg(&mut cap, 1_000, true, 100, tcp_flags::SYN, &[]);
        push_seg(&mut cap, 2_000, true, 101, tcp_flags::ACK | tcp_flags::PSH, &[0x49; 64]);
        push_seg(&mut cap, 3_000, true, 165, tcp_flags::ACK | tcp_flags::PSH, &[0x4E; 32]);
        let events = extract_events(&cap).unwrap();
        let raw: Vec<_> = events
            .iter()
            .filter_map(|e| match e.kind {
                FlowEventKind::RawTcpData(n) => Some(n),
                _ => None,
            })
            .collect();
        assert_eq!(raw, vec![64, 32]);
    }

    #[test]
    fn empty_capture_yields_no_events() {
        assert_eq!(extract_events(&CaptureFile::new()).unwrap(), Vec::new());
    }
}
