//! SMB1 wire parsing and serialization for the transaction-heavy message
//! mix that Eternalblue-shaped traffic uses.
//!
//! Only the fields the detector and the trace generator need are typed;
//! everything else is carried as opaque parameter/data block bytes so that
//! re-serialization is byte-identical to the input. Layouts follow the
//! public SMB1 wire format: 4-byte NetBIOS session prefix, 32-byte header
//! starting `FF 'S' 'M' 'B'`, little-endian multi-byte fields.

use thiserror::Error;

/// The 4-byte SMB1 protocol signature.
pub const SMB_MAGIC: [u8; 4] = [0xFF, b'S', b'M', b'B'];
/// Fixed SMB1 header length, magic included.
pub const SMB_HEADER_LEN: usize = 32;
/// NetBIOS session service prefix length (type byte + 24-bit length).
pub const NBSS_HEADER_LEN: usize = 4;

/// Header flags bit marking a server reply.
pub const FLAGS_REPLY: u8 = 0x80;

/// NT status a vulnerable server returns to the PeekNamedPipe probe.
pub const STATUS_INSUFF_SERVER_RESOURCES: u32 = 0xC000_0205;
/// Multiplex ID value in the ping response when the backdoor is installed.
pub const DOUBLEPULSAR_PRESENT_MID: u16 = 0x51;
/// Multiplex ID value in the ping response from a clean host.
pub const DOUBLEPULSAR_ABSENT_MID: u16 = 0x41;

// Command codes for the messages this crate types out explicitly.
pub const COM_TRANS: u8 = 0x25;
pub const COM_ECHO: u8 = 0x2B;
pub const COM_TRANS2: u8 = 0x32;
pub const COM_TRANS2_SECONDARY: u8 = 0x33;
pub const COM_NEGOTIATE: u8 = 0x72;
pub const COM_SESSION_SETUP_ANDX: u8 = 0x73;
pub const COM_TREE_CONNECT_ANDX: u8 = 0x75;
pub const COM_NT_TRANS: u8 = 0xA0;
pub const COM_NT_TRANS_SECONDARY: u8 = 0xA1;

/// Trans subcommand (first setup word) for PeekNamedPipe.
pub const TRANS_PEEK_NAMED_PIPE: u16 = 0x0023;
/// Trans2 subcommand the backdoor ping rides on (reserved, unused by
/// legitimate clients).
pub const TRANS2_SESSION_SETUP: u16 = 0x000E;

/// Whether the input carries the 4-byte NetBIOS session prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    NetBios,
    Raw,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("input too short at offset {offset}: need {expected} bytes, have {actual}")]
    TooShort {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("bad magic at offset {offset}: expected {expected:#010x}, found {actual:#010x}")]
    BadMagic {
        offset: usize,
        expected: u32,
        actual: u32,
    },
    #[error("truncated {block} at offset {offset}: declared {declared}, available {available}")]
    TruncatedBlock {
        block: &'static str,
        offset: usize,
        declared: usize,
        available: usize,
    },
    #[error("{trailing} trailing bytes after message end at offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SerializeError {
    #[error("message violates a wire invariant: {0}")]
    InvariantViolation(String),
}

/// The fixed 32-byte SMB1 header. The protocol magic is implicit: parsing
/// rejects anything that does not start with [`SMB_MAGIC`] and
/// serialization always writes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmbHeader {
    pub command: u8,
    pub nt_status: u32,
    pub flags: u8,
    pub flags2: u16,
    pub pid_high: u16,
    pub security_features: [u8; 8],
    pub reserved: u16,
    pub tree_id: u16,
    pub process_id: u16,
    pub user_id: u16,
    pub multiplex_id: u16,
}

impl SmbHeader {
    /// Client-to-server request header with common flag bits.
    pub fn request(command: u8) -> Self {
        SmbHeader {
            command,
            nt_status: 0,
            flags: 0x18,
            flags2: 0xC807,
            pid_high: 0,
            security_features: [0; 8],
            reserved: 0,
            tree_id: 0,
            process_id: 0xFEFF,
            user_id: 0,
            multiplex_id: 0x40,
        }
    }

    /// Server reply header mirroring a request.
    pub fn reply(command: u8) -> Self {
        let mut h = Self::request(command);
        h.flags |= FLAGS_REPLY;
        h
    }

    pub fn is_reply(&self) -> bool {
        self.flags & FLAGS_REPLY != 0
    }
}

/// Word-count parameter block plus byte-count data block.
///
/// The serialized word-count is `words.len() / 2` and the byte-count is
/// `data.len()`, so the declared counts always equal the actual block
/// lengths by construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockPair {
    pub words: Vec<u8>,
    pub data: Vec<u8>,
}

impl BlockPair {
    pub fn new(words: Vec<u8>, data: Vec<u8>) -> Self {
        BlockPair { words, data }
    }

    fn validate(&self) -> Result<(), SerializeError> {
        if self.words.len() % 2 != 0 {
            return Err(SerializeError::InvariantViolation(format!(
                "parameter block length {} is not a whole number of words",
                self.words.len()
            )));
        }
        if self.words.len() > 255 * 2 {
            return Err(SerializeError::InvariantViolation(format!(
                "parameter block length {} exceeds the 255-word limit",
                self.words.len()
            )));
        }
        if self.data.len() > usize::from(u16::MAX) {
            return Err(SerializeError::InvariantViolation(format!(
                "data block length {} exceeds the 16-bit byte count",
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Typed command bodies. Commands outside the Eternalblue mix are kept as
/// `Opaque` so nothing is ever dropped on a parse/serialize round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmbCommandBody {
    Negotiate(BlockPair),
    SessionSetupAndX(BlockPair),
    TreeConnectAndX(BlockPair),
    Echo(BlockPair),
    Trans(BlockPair),
    Trans2(BlockPair),
    Trans2Secondary(BlockPair),
    NtTrans(BlockPair),
    Opaque { command: u8, blocks: BlockPair },
}

impl SmbCommandBody {
    pub fn from_code(command: u8, blocks: BlockPair) -> Self {
        match command {
            COM_NEGOTIATE => SmbCommandBody::Negotiate(blocks),
            COM_SESSION_SETUP_ANDX => SmbCommandBody::SessionSetupAndX(blocks),
            COM_TREE_CONNECT_ANDX => SmbCommandBody::TreeConnectAndX(blocks),
            COM_ECHO => SmbCommandBody::Echo(blocks),
            COM_TRANS => SmbCommandBody::Trans(blocks),
            COM_TRANS2 => SmbCommandBody::Trans2(blocks),
            COM_TRANS2_SECONDARY => SmbCommandBody::Trans2Secondary(blocks),
            COM_NT_TRANS => SmbCommandBody::NtTrans(blocks),
            _ => SmbCommandBody::Opaque { command, blocks },
        }
    }

    pub fn command_code(&self) -> u8 {
        match self {
            SmbCommandBody::Negotiate(_) => COM_NEGOTIATE,
            SmbCommandBody::SessionSetupAndX(_) => COM_SESSION_SETUP_ANDX,
            SmbCommandBody::TreeConnectAndX(_) => COM_TREE_CONNECT_ANDX,
            SmbCommandBody::Echo(_) => COM_ECHO,
            SmbCommandBody::Trans(_) => COM_TRANS,
            SmbCommandBody::Trans2(_) => COM_TRANS2,
            SmbCommandBody::Trans2Secondary(_) => COM_TRANS2_SECONDARY,
            SmbCommandBody::NtTrans(_) => COM_NT_TRANS,
            SmbCommandBody::Opaque { command, .. } => *command,
        }
    }

    pub fn blocks(&self) -> &BlockPair {
        match self {
            SmbCommandBody::Negotiate(b)
            | SmbCommandBody::SessionSetupAndX(b)
            | SmbCommandBody::TreeConnectAndX(b)
            | SmbCommandBody::Echo(b)
            | SmbCommandBody::Trans(b)
            | SmbCommandBody::Trans2(b)
            | SmbCommandBody::Trans2Secondary(b)
            | SmbCommandBody::NtTrans(b)
            | SmbCommandBody::Opaque { blocks: b, .. } => b,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SmbCommandBody::Negotiate(_) => "Negotiate",
            SmbCommandBody::SessionSetupAndX(_) => "SessionSetupAndX",
            SmbCommandBody::TreeConnectAndX(_) => "TreeConnectAndX",
            SmbCommandBody::Echo(_) => "Echo",
            SmbCommandBody::Trans(_) => "Trans",
            SmbCommandBody::Trans2(_) => "Trans2",
            SmbCommandBody::Trans2Secondary(_) => "Trans2Secondary",
            SmbCommandBody::NtTrans(_) => "NtTrans",
            SmbCommandBody::Opaque { .. } => "Opaque",
        }
    }
}

/// Deviation from a well-formed wire exchange that still parses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireAnomaly {
    /// The NetBIOS frame declared more bytes than were ever sent. The
    /// grooming "reserve" packets do this on purpose to force a large
    /// server-side allocation.
    DeclaredLengthOverrun { declared: u32 },
}

/// One parsed SMB1 message.
///
/// `declared_frame_length` is `Some` only when the message came from (or
/// should serialize to) a NetBIOS frame whose declared length exceeds the
/// bytes actually present. `Some(actual)` is not a valid state; keep it
/// `None` when the frame is complete.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmbMessage {
    pub header: SmbHeader,
    pub body: SmbCommandBody,
    pub declared_frame_length: Option<u32>,
}

impl SmbMessage {
    pub fn new(header: SmbHeader, body: SmbCommandBody) -> Self {
        SmbMessage {
            header,
            body,
            declared_frame_length: None,
        }
    }

    pub fn is_reply(&self) -> bool {
        self.header.is_reply()
    }

    fn validate(&self) -> Result<(), SerializeError> {
        self.body.blocks().validate()?;
        if self.header.command != self.body.command_code() {
            return Err(SerializeError::InvariantViolation(format!(
                "header command {:#04x} disagrees with body variant {} ({:#04x})",
                self.header.command,
                self.body.kind_name(),
                self.body.command_code()
            )));
        }
        if let SmbCommandBody::Opaque { command, .. } = &self.body {
            if !matches!(
                SmbCommandBody::from_code(*command, BlockPair::default()),
                SmbCommandBody::Opaque { .. }
            ) {
                return Err(SerializeError::InvariantViolation(format!(
                    "command {command:#04x} has a typed variant and may not be Opaque"
                )));
            }
        }
        Ok(())
    }

    /// Annotations for malformed-but-parseable messages.
    pub fn anomalies(&self) -> Vec<WireAnomaly> {
        let mut out = Vec::new();
        if let Some(declared) = self.declared_frame_length {
            out.push(WireAnomaly::DeclaredLengthOverrun { declared });
        }
        out
    }

    /// Server-side buffer reservation implied by an over-declared frame.
    pub fn implied_reservation(&self) -> Option<u32> {
        self.declared_frame_length
    }

    /// Setup words of a Trans/Trans2 request block, when the standard
    /// 28-byte prefix is present.
    pub fn transaction_setup(&self) -> Option<Vec<u16>> {
        let words = match &self.body {
            SmbCommandBody::Trans(b) | SmbCommandBody::Trans2(b) => &b.words,
            _ => return None,
        };
        if words.len() < 28 {
            return None;
        }
        let setup_count = usize::from(words[26]);
        if words.len() < 28 + 2 * setup_count {
            return None;
        }
        Some(
            words[28..28 + 2 * setup_count]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        )
    }

    pub fn is_peek_named_pipe_request(&self) -> bool {
        !self.is_reply()
            && matches!(self.body, SmbCommandBody::Trans(_))
            && self.transaction_setup().as_deref().map(|s| s.first().copied())
                == Some(Some(TRANS_PEEK_NAMED_PIPE))
    }

    pub fn is_double_pulsar_ping(&self) -> bool {
        !self.is_reply()
            && matches!(self.body, SmbCommandBody::Trans2(_))
            && self.transaction_setup().as_deref().map(|s| s.first().copied())
                == Some(Some(TRANS2_SESSION_SETUP))
    }
}

fn be32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

/// Parse one SMB1 message. Total over arbitrary input: every failure is a
/// `ParseError`, never a panic.
pub fn parse_smb(input: &[u8], framing: Framing) -> Result<SmbMessage, ParseError> {
    match framing {
        Framing::Raw => parse_message(input, 0, None),
        Framing::NetBios => {
            if input.len() < NBSS_HEADER_LEN {
                return Err(ParseError::TooShort {
                    offset: 0,
                    expected: NBSS_HEADER_LEN,
                    actual: input.len(),
                });
            }
            if input[0] != 0x00 {
                return Err(ParseError::BadMagic {
                    offset: 0,
                    expected: 0x00,
                    actual: u32::from(input[0]),
                });
            }
            let declared = u32::from_be_bytes([0, input[1], input[2], input[3]]);
            let payload = &input[NBSS_HEADER_LEN..];
            let avail = payload.len() as u32;
            if avail > declared {
                return Err(ParseError::TrailingBytes {
                    offset: NBSS_HEADER_LEN + declared as usize,
                    trailing: (avail - declared) as usize,
                });
            }
            let short = if avail < declared { Some(declared) } else { None };
            parse_message(payload, NBSS_HEADER_LEN, short)
        }
    }
}

fn parse_message(
    bytes: &[u8],
    base: usize,
    declared_frame_length: Option<u32>,
) -> Result<SmbMessage, ParseError> {
    if bytes.len() < SMB_HEADER_LEN {
        return Err(ParseError::TooShort {
            offset: base,
            expected: SMB_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0..4] != SMB_MAGIC {
        return Err(ParseError::BadMagic {
            offset: base,
            expected: be32(&SMB_MAGIC),
            actual: be32(&bytes[0..4]),
        });
    }
    let header = SmbHeader {
        command: bytes[4],
        nt_status: u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]),
        flags: bytes[9],
        flags2: u16::from_le_bytes([bytes[10], bytes[11]]),
        pid_high: u16::from_le_bytes([bytes[12], bytes[13]]),
        security_features: bytes[14..22].try_into().expect("fixed slice"),
        reserved: u16::from_le_bytes([bytes[22], bytes[23]]),
        tree_id: u16::from_le_bytes([bytes[24], bytes[25]]),
        process_id: u16::from_le_bytes([bytes[26], bytes[27]]),
        user_id: u16::from_le_bytes([bytes[28], bytes[29]]),
        multiplex_id: u16::from_le_bytes([bytes[30], bytes[31]]),
    };

    let mut pos = SMB_HEADER_LEN;
    if pos >= bytes.len() {
        return Err(ParseError::TruncatedBlock {
            block: "word-count field",
            offset: base + pos,
            declared: 1,
            available: 0,
        });
    }
    let word_count = usize::from(bytes[pos]);
    pos += 1;
    let words_len = word_count * 2;
    if bytes.len() < pos + words_len {
        return Err(ParseError::TruncatedBlock {
            block: "parameter block",
            offset: base + pos,
            declared: words_len,
            available: bytes.len() - pos,
        });
    }
    let words = bytes[pos..pos + words_len].to_vec();
    pos += words_len;

    if bytes.len() < pos + 2 {
        return Err(ParseError::TruncatedBlock {
            block: "byte-count field",
            offset: base + pos,
            declared: 2,
            available: bytes.len() - pos,
        });
    }
    let byte_count = usize::from(u16::from_le_bytes([bytes[pos], bytes[pos + 1]]));
    pos += 2;
    if bytes.len() < pos + byte_count {
        return Err(ParseError::TruncatedBlock {
            block: "data block",
            offset: base + pos,
            declared: byte_count,
            available: bytes.len() - pos,
        });
    }
    let data = bytes[pos..pos + byte_count].to_vec();
    pos += byte_count;
    if pos != bytes.len() {
        return Err(ParseError::TrailingBytes {
            offset: base + pos,
            trailing: bytes.len() - pos,
        });
    }

    let body = SmbCommandBody::from_code(header.command, BlockPair::new(words, data));
    Ok(SmbMessage {
        header,
        body,
        declared_frame_length,
    })
}

/// Serialize one message; the inverse of [`parse_smb`] for every valid
/// message.
pub fn serialize_smb(msg: &SmbMessage, framing: Framing) -> Result<Vec<u8>, SerializeError> {
    msg.validate()?;
    let blocks = msg.body.blocks();
    let mut inner = Vec::with_capacity(SMB_HEADER_LEN + 3 + blocks.words.len() + blocks.data.len());
    inner.extend_from_slice(&SMB_MAGIC);
    inner.push(msg.header.command);
    inner.extend_from_slice(&msg.header.nt_status.to_le_bytes());
    inner.push(msg.header.flags);
    inner.extend_from_slice(&msg.header.flags2.to_le_bytes());
    inner.extend_from_slice(&msg.header.pid_high.to_le_bytes());
    inner.extend_from_slice(&msg.header.security_features);
    inner.extend_from_slice(&msg.header.reserved.to_le_bytes());
    inner.extend_from_slice(&msg.header.tree_id.to_le_bytes());
    inner.extend_from_slice(&msg.header.process_id.to_le_bytes());
    inner.extend_from_slice(&msg.header.user_id.to_le_bytes());
    inner.extend_from_slice(&msg.header.multiplex_id.to_le_bytes());
    inner.push((blocks.words.len() / 2) as u8);
    inner.extend_from_slice(&blocks.words);
    inner.extend_from_slice(&(blocks.data.len() as u16).to_le_bytes());
    inner.extend_from_slice(&blocks.data);

    match framing {
        Framing::Raw => {
            if msg.declared_frame_length.is_some() {
                return Err(SerializeError::InvariantViolation(
                    "declared frame length requires NetBIOS framing".into(),
                ));
            }
            Ok(inner)
        }
        Framing::NetBios => {
            let actual = inner.len() as u32;
            let declared = msg.declared_frame_length.unwrap_or(actual);
            if declared < actual {
                return Err(SerializeError::InvariantViolation(format!(
                    "declared frame length {declared:#x} is less than the actual {actual:#x}"
                )));
            }
            if msg.declared_frame_length == Some(actual) {
                return Err(SerializeError::InvariantViolation(
                    "declared frame length equal to the actual length must be None".into(),
                ));
            }
            if declared > 0x00FF_FFFF {
                return Err(SerializeError::InvariantViolation(format!(
                    "declared frame length {declared:#x} exceeds the 24-bit NetBIOS field"
                )));
            }
            let mut out = Vec::with_capacity(NBSS_HEADER_LEN + inner.len());
            let d = declared.to_be_bytes();
            out.extend_from_slice(&[0x00, d[1], d[2], d[3]]);
            out.extend_from_slice(&inner);
            Ok(out)
        }
    }
}

/// What a server-to-client message reveals about the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseSignal {
    /// Trans response carrying STATUS_INSUFF_SERVER_RESOURCES.
    VulnerableMs17_010,
    /// Trans2 response whose Multiplex ID is the backdoor marker.
    DoublePulsarPresent,
    /// Trans2 response whose Multiplex ID echoes the ping unchanged.
    DoublePulsarAbsent,
    NoSignal,
}

/// Classify a server-to-client message. Exactly one signal per message.
pub fn classify_response(msg: &SmbMessage) -> ResponseSignal {
    match &msg.body {
        SmbCommandBody::Trans(_) if msg.header.nt_status == STATUS_INSUFF_SERVER_RESOURCES => {
            ResponseSignal::VulnerableMs17_010
        }
        SmbCommandBody::Trans2(_) if msg.header.multiplex_id == DOUBLEPULSAR_PRESENT_MID => {
            ResponseSignal::DoublePulsarPresent
        }
        SmbCommandBody::Trans2(_) if msg.header.multiplex_id == DOUBLEPULSAR_ABSENT_MID => {
            ResponseSignal::DoublePulsarAbsent
        }
        _ => ResponseSignal::NoSignal,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    PeekNamedPipe,
    DoublePulsarPing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseExpectation {
    NtStatusValue(u32),
    MultiplexIdValue(u16),
}

/// A reconnaissance probe paired with the response value that confirms it.
/// Constructors keep the pairing consistent: PeekNamedPipe checks an NT
/// status, the backdoor ping checks a Multiplex ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbePacket {
    kind: ProbeKind,
    expected_response_signal: ResponseExpectation,
}

impl ProbePacket {
    pub fn peek_named_pipe() -> Self {
        ProbePacket {
            kind: ProbeKind::PeekNamedPipe,
            expected_response_signal: ResponseExpectation::NtStatusValue(
                STATUS_INSUFF_SERVER_RESOURCES,
            ),
        }
    }

    pub fn double_pulsar_ping() -> Self {
        ProbePacket {
            kind: ProbeKind::DoublePulsarPing,
            expected_response_signal: ResponseExpectation::MultiplexIdValue(
                DOUBLEPULSAR_PRESENT_MID,
            ),
        }
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    pub fn expected_response_signal(&self) -> ResponseExpectation {
        self.expected_response_signal
    }

    pub fn is_consistent(&self) -> bool {
        matches!(
            (self.kind, self.expected_response_signal),
            (ProbeKind::PeekNamedPipe, ResponseExpectation::NtStatusValue(_))
                | (ProbeKind::DoublePulsarPing, ResponseExpectation::MultiplexIdValue(_))
        )
    }

    /// The request message this probe sends.
    pub fn request(&self) -> SmbMessage {
        match self.kind {
            ProbeKind::PeekNamedPipe => build::peek_named_pipe_request(),
            ProbeKind::DoublePulsarPing => build::double_pulsar_ping(),
        }
    }

    /// Whether a server response carries the confirming value.
    pub fn response_matches(&self, msg: &SmbMessage) -> bool {
        match self.expected_response_signal {
            ResponseExpectation::NtStatusValue(v) => {
                matches!(msg.body, SmbCommandBody::Trans(_)) && msg.header.nt_status == v
            }
            ResponseExpectation::MultiplexIdValue(v) => {
                matches!(msg.body, SmbCommandBody::Trans2(_)) && msg.header.multiplex_id == v
            }
        }
    }
}

/// Canned message builders for the generator, the probes, and tests.
pub mod build {
    use super::*;

    /// 28-byte Trans/Trans2 request parameter prefix plus setup words.
    fn trans_like_words(
        total_param: u16,
        total_data: u16,
        max_param: u16,
        max_data: u16,
        timeout: u32,
        data_count: u16,
        setup: &[u16],
    ) -> Vec<u8> {
        let mut w = Vec::with_capacity(28 + setup.len() * 2);
        w.extend_from_slice(&total_param.to_le_bytes());
        w.extend_from_slice(&total_data.to_le_bytes());
        w.extend_from_slice(&max_param.to_le_bytes());
        w.extend_from_slice(&max_data.to_le_bytes());
        w.push(0); // max setup count
        w.push(0); // reserved
        w.extend_from_slice(&0u16.to_le_bytes()); // flags
        w.extend_from_slice(&timeout.to_le_bytes());
        w.extend_from_slice(&0u16.to_le_bytes()); // reserved
        w.extend_from_slice(&total_param.to_le_bytes()); // parameter count
        w.extend_from_slice(&0u16.to_le_bytes()); // parameter offset
        w.extend_from_slice(&data_count.to_le_bytes());
        w.extend_from_slice(&0u16.to_le_bytes()); // data offset
        w.push(setup.len() as u8);
        w.push(0); // reserved
        for s in setup {
            w.extend_from_slice(&s.to_le_bytes());
        }
        w
    }

    pub fn negotiate_request() -> SmbMessage {
        let mut data = Vec::new();
        for dialect in [
            "PC NETWORK PROGRAM 1.0",
            "LANMAN1.0",
            "Windows for Workgroups 3.1a",
            "LM1.2X002",
            "LANMAN2.1",
            "NT LM 0.12",
        ] {
            data.push(0x02);
            data.extend_from_slice(dialect.as_bytes());
            data.push(0x00);
        }
        SmbMessage::new(
            SmbHeader::request(COM_NEGOTIATE),
            SmbCommandBody::Negotiate(BlockPair::new(Vec::new(), data)),
        )
    }

    pub fn negotiate_response() -> SmbMessage {
        let mut words = Vec::with_capacity(34);
        words.extend_from_slice(&5u16.to_le_bytes()); // dialect index: NT LM 0.12
        words.push(0x03); // security mode
        words.extend_from_slice(&50u16.to_le_bytes()); // max mpx
        words.extend_from_slice(&1u16.to_le_bytes()); // max vcs
        words.extend_from_slice(&16644u32.to_le_bytes()); // max buffer
        words.extend_from_slice(&65536u32.to_le_bytes()); // max raw
        words.extend_from_slice(&0u32.to_le_bytes()); // session key
        words.extend_from_slice(&0x0000_E3FDu32.to_le_bytes()); // capabilities
        words.extend_from_slice(&[0u8; 8]); // system time
        words.extend_from_slice(&0u16.to_le_bytes()); // timezone
        words.push(8); // challenge length
        let data = vec![0xAA; 8];
        SmbMessage::new(
            SmbHeader::reply(COM_NEGOTIATE),
            SmbCommandBody::Negotiate(BlockPair::new(words, data)),
        )
    }

    pub fn session_setup_request() -> SmbMessage {
        let mut words = Vec::with_capacity(26);
        words.extend_from_slice(&[0xFF, 0x00]); // no AndX
        words.extend_from_slice(&0u16.to_le_bytes()); // andx offset
        words.extend_from_slice(&16644u16.to_le_bytes()); // max buffer
        words.extend_from_slice(&50u16.to_le_bytes()); // max mpx
        words.extend_from_slice(&1u16.to_le_bytes()); // vc number
        words.extend_from_slice(&0u32.to_le_bytes()); // session key
        words.extend_from_slice(&1u16.to_le_bytes()); // ANSI password length
        words.extend_from_slice(&0u16.to_le_bytes()); // unicode password length
        words.extend_from_slice(&0u32.to_le_bytes()); // reserved
        words.extend_from_slice(&0x0000_00D4u32.to_le_bytes()); // capabilities
        let mut data = vec![0x00]; // ANSI password
        data.extend_from_slice(b"\x00"); // account (anonymous)
        data.extend_from_slice(b"\x00"); // domain
        data.extend_from_slice(b"Windows 2000 2195\x00");
        data.extend_from_slice(b"Windows 2000 5.0\x00");
        SmbMessage::new(
            SmbHeader::request(COM_SESSION_SETUP_ANDX),
            SmbCommandBody::SessionSetupAndX(BlockPair::new(words, data)),
        )
    }

    pub fn session_setup_response() -> SmbMessage {
        let mut words = Vec::with_capacity(6);
        words.extend_from_slice(&[0xFF, 0x00]);
        words.extend_from_slice(&0u16.to_le_bytes());
        words.extend_from_slice(&1u16.to_le_bytes()); // guest login
        let mut data = Vec::new();
        data.extend_from_slice(b"Windows 7 Professional 7601 Service Pack 1\x00");
        data.extend_from_slice(b"Windows 7 Professional 6.1\x00");
        data.extend_from_slice(b"WORKGROUP\x00");
        SmbMessage::new(
            SmbHeader::reply(COM_SESSION_SETUP_ANDX),
            SmbCommandBody::SessionSetupAndX(BlockPair::new(words, data)),
        )
    }

    pub fn tree_connect_request(path: &str) -> SmbMessage {
        let mut words = Vec::with_capacity(8);
        words.extend_from_slice(&[0xFF, 0x00]);
        words.extend_from_slice(&0u16.to_le_bytes());
        words.extend_from_slice(&0u16.to_le_bytes()); // flags
        words.extend_from_slice(&1u16.to_le_bytes()); // password length
        let mut data = vec![0x00]; // password
        data.extend_from_slice(path.as_bytes());
        data.push(0x00);
        data.extend_from_slice(b"?????\x00");
        SmbMessage::new(
            SmbHeader::request(COM_TREE_CONNECT_ANDX),
            SmbCommandBody::TreeConnectAndX(BlockPair::new(words, data)),
        )
    }

    pub fn tree_connect_response() -> SmbMessage {
        let mut words = Vec::with_capacity(6);
        words.extend_from_slice(&[0xFF, 0x00]);
        words.extend_from_slice(&0u16.to_le_bytes());
        words.extend_from_slice(&1u16.to_le_bytes()); // optional support
        let data = b"IPC\x00".to_vec();
        SmbMessage::new(
            SmbHeader::reply(COM_TREE_CONNECT_ANDX),
            SmbCommandBody::TreeConnectAndX(BlockPair::new(words, data)),
        )
    }

    pub fn echo_request(multiplex_id: u16) -> SmbMessage {
        let mut msg = SmbMessage::new(
            SmbHeader::request(COM_ECHO),
            SmbCommandBody::Echo(BlockPair::new(
                1u16.to_le_bytes().to_vec(),
                b"liveness check".to_vec(),
            )),
        );
        msg.header.multiplex_id = multiplex_id;
        msg
    }

    pub fn echo_response(multiplex_id: u16) -> SmbMessage {
        let mut msg = echo_request(multiplex_id);
        msg.header.flags |= FLAGS_REPLY;
        msg
    }

    /// Trans request with the PeekNamedPipe subcommand; step one of the
    /// reconnaissance pair.
    pub fn peek_named_pipe_request() -> SmbMessage {
        let words = trans_like_words(0, 0, 0xFFFF, 0x0800, 0, 0, &[TRANS_PEEK_NAMED_PIPE, 0]);
        let data = b"\\PIPE\\\x00".to_vec();
        let mut msg = SmbMessage::new(
            SmbHeader::request(COM_TRANS),
            SmbCommandBody::Trans(BlockPair::new(words, data)),
        );
        msg.header.multiplex_id = 0x42;
        msg
    }

    pub fn trans_response_with_status(nt_status: u32) -> SmbMessage {
        let mut msg = SmbMessage::new(
            SmbHeader::reply(COM_TRANS),
            SmbCommandBody::Trans(BlockPair::default()),
        );
        msg.header.nt_status = nt_status;
        msg.header.multiplex_id = 0x42;
        msg
    }

    /// Trans2 request on the reserved SESSION_SETUP subcommand; the
    /// backdoor answers it by bumping the Multiplex ID.
    pub fn double_pulsar_ping() -> SmbMessage {
        let words = trans_like_words(12, 0, 1, 0, 0x0034_0000, 12, &[TRANS2_SESSION_SETUP]);
        let mut msg = SmbMessage::new(
            SmbHeader::request(COM_TRANS2),
            SmbCommandBody::Trans2(BlockPair::new(words, vec![0u8; 12])),
        );
        msg.header.multiplex_id = DOUBLEPULSAR_ABSENT_MID;
        msg
    }

    pub fn trans2_response_with_mid(multiplex_id: u16) -> SmbMessage {
        let mut msg = SmbMessage::new(
            SmbHeader::reply(COM_TRANS2),
            SmbCommandBody::Trans2(BlockPair::default()),
        );
        msg.header.multiplex_id = multiplex_id;
        msg
    }

    /// NT Trans request opening a transaction big enough to need
    /// continuation packets; carries the first payload segment.
    pub fn nt_trans_request(total_data_count: u32, segment: &[u8]) -> SmbMessage {
        let mut words = Vec::with_capacity(38);
        words.push(0); // max setup count
        words.extend_from_slice(&0u16.to_le_bytes()); // reserved
        words.extend_from_slice(&0u32.to_le_bytes()); // total parameter count
        words.extend_from_slice(&total_data_count.to_le_bytes());
        words.extend_from_slice(&0u32.to_le_bytes()); // max parameter count
        words.extend_from_slice(&0u32.to_le_bytes()); // max data count
        words.extend_from_slice(&0u32.to_le_bytes()); // parameter count
        words.extend_from_slice(&0u32.to_le_bytes()); // parameter offset
        words.extend_from_slice(&(segment.len() as u32).to_le_bytes());
        words.extend_from_slice(&0u32.to_le_bytes()); // data offset
        words.push(0); // setup count
        words.extend_from_slice(&0x0001u16.to_le_bytes()); // function
        SmbMessage::new(
            SmbHeader::request(COM_NT_TRANS),
            SmbCommandBody::NtTrans(BlockPair::new(words, segment.to_vec())),
        )
    }

    /// Trans2 Secondary continuation segment. Displacement fields are
    /// 16-bit on the wire and wrap for transactions past 64 KiB.
    pub fn trans2_secondary(total_data: u32, displacement: u32, segment: &[u8]) -> SmbMessage {
        let mut words = Vec::with_capacity(18);
        words.extend_from_slice(&0u16.to_le_bytes()); // total parameter count
        words.extend_from_slice(&((total_data & 0xFFFF) as u16).to_le_bytes());
        words.extend_from_slice(&0u16.to_le_bytes()); // parameter count
        words.extend_from_slice(&0u16.to_le_bytes()); // parameter offset
        words.extend_from_slice(&0u16.to_le_bytes()); // parameter displacement
        words.extend_from_slice(&(segment.len() as u16).to_le_bytes());
        words.extend_from_slice(&0u16.to_le_bytes()); // data offset
        words.extend_from_slice(&((displacement & 0xFFFF) as u16).to_le_bytes());
        words.extend_from_slice(&0u16.to_le_bytes()); // fid
        SmbMessage::new(
            SmbHeader::request(COM_TRANS2_SECONDARY),
            SmbCommandBody::Trans2Secondary(BlockPair::new(words, segment.to_vec())),
        )
    }

    /// Session setup whose NetBIOS frame declares `declared_total` bytes
    /// but only ever carries the message itself: the oversized-reservation
    /// groom packet.
    pub fn oversized_session_setup(declared_total: u32) -> SmbMessage {
        let mut msg = session_setup_request();
        msg.declared_frame_length = Some(declared_total);
        msg
    }

    /// A command outside the typed set, preserved verbatim.
    pub fn opaque_request(command: u8, words: Vec<u8>, data: Vec<u8>) -> SmbMessage {
        SmbMessage::new(
            SmbHeader::request(command),
            SmbCommandBody::from_code(command, BlockPair::new(words, data)),
        )
    }

    /// Reply for an opaque command.
    pub fn opaque_response(command: u8, words: Vec<u8>, data: Vec<u8>) -> SmbMessage {
        SmbMessage::new(
            SmbHeader::reply(command),
            SmbCommandBody::from_code(command, BlockPair::new(words, data)),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand-assembled Echo request, laid out field by field from the
    /// public header format so it is independent of the serializer.
    fn reference_echo_bytes() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&[0xFF, b'S', b'M', b'B']); // magic
        b.push(0x2B); // command: Echo
        b.extend_from_slice(&[0x00, 0x00, 0x00, 0x00]); // NT status
        b.push(0x18); // flags
        b.extend_from_slice(&[0x07, 0xC8]); // flags2
        b.extend_from_slice(&[0x00, 0x00]); // PID high
        b.extend_from_slice(&[0u8; 8]); // security features
        b.extend_from_slice(&[0x00, 0x00]); // reserved
        b.extend_from_slice(&[0x34, 0x12]); // TID
        b.extend_from_slice(&[0xFF, 0xFE]); // PID
        b.extend_from_slice(&[0x08, 0x00]); // UID
        b.extend_from_slice(&[0x41, 0x00]); // MID
        b.push(0x00); // word count
        b.extend_from_slice(&[0x00, 0x00]); // byte count
        b
    }

    #[test]
    fn parses_reference_echo_layout() {
        let bytes = reference_echo_bytes();
        let msg = parse_smb(&bytes, Framing::Raw).unwrap();
        assert!(matches!(msg.body, SmbCommandBody::Echo(_)));
        assert_eq!(msg.header.command, COM_ECHO);
        assert_eq!(msg.header.tree_id, 0x1234);
        assert_eq!(msg.header.process_id, 0xFEFF);
        assert_eq!(msg.header.user_id, 0x0008);
        assert_eq!(msg.header.multiplex_id, 0x41);
        assert_eq!(serialize_smb(&msg, Framing::Raw).unwrap(), bytes);
    }

    #[test]
    fn empty_input_is_too_short_at_offset_zero() {
        assert_eq!(
            parse_smb(&[], Framing::Raw),
            Err(ParseError::TooShort {
                offset: 0,
                expected: SMB_HEADER_LEN,
                actual: 0
            })
        );
        assert!(matches!(
            parse_smb(&[], Framing::NetBios),
            Err(ParseError::TooShort { offset: 0, .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = reference_echo_bytes();
        bytes[0] = 0xFE;
        match parse_smb(&bytes, Framing::Raw) {
            Err(ParseError::BadMagic { offset: 0, expected, actual }) => {
                assert_eq!(expected, 0xFF53_4D42);
                assert_eq!(actual, 0xFE53_4D42);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_data_block_reports_counts() {
        let mut bytes = reference_echo_bytes();
        let n = bytes.len();
        bytes[n - 2] = 0x10; // claim 16 data bytes that are not there
        match parse_smb(&bytes, Framing::Raw) {
            Err(ParseError::TruncatedBlock { block: "data block", declared: 16, available: 0, .. }) => {}
            other => panic!("expected TruncatedBlock, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_an_error() {
        let mut bytes = reference_echo_bytes();
        bytes.push(0xCC);
        assert!(matches!(
            parse_smb(&bytes, Framing::Raw),
            Err(ParseError::TrailingBytes { trailing: 1, .. })
        ));
    }

    #[test]
    fn short_netbios_frame_records_declared_length() {
        let msg = build::oversized_session_setup(0x10000);
        let bytes = serialize_smb(&msg, Framing::NetBios).unwrap();
        assert_eq!(&bytes[..4], &[0x00, 0x01, 0x00, 0x00]); // declared 0x10000
        let parsed = parse_smb(&bytes, Framing::NetBios).unwrap();
        assert_eq!(parsed.declared_frame_length, Some(0x10000));
        assert_eq!(parsed.implied_reservation(), Some(0x10000));
        assert_eq!(
            parsed.anomalies(),
            vec![WireAnomaly::DeclaredLengthOverrun { declared: 0x10000 }]
        );
        assert_eq!(parsed, msg);
    }

    #[test]
    fn declared_length_shorter_than_payload_is_trailing_bytes() {
        let msg = build::echo_request(1);
        let mut bytes = serialize_smb(&msg, Framing::NetBios).unwrap();
        bytes[3] -= 1; // declare one byte less than present
        assert!(matches!(
            parse_smb(&bytes, Framing::NetBios),
            Err(ParseError::TrailingBytes { trailing: 1, .. })
        ));
    }

    #[test]
    fn odd_parameter_block_is_an_invariant_violation() {
        let mut msg = build::echo_request(1);
        if let SmbCommandBody::Echo(b) = &mut msg.body {
            b.words.push(0xAB);
        }
        assert!(matches!(
            serialize_smb(&msg, Framing::Raw),
            Err(SerializeError::InvariantViolation(_))
        ));
    }

    #[test]
    fn body_and_header_command_must_agree() {
        let mut msg = build::echo_request(1);
        msg.header.command = COM_TRANS;
        assert!(matches!(
            serialize_smb(&msg, Framing::Raw),
            Err(SerializeError::InvariantViolation(_))
        ));
    }

    #[test]
    fn classify_matches_probe_constants() {
        let vulnerable = build::trans_response_with_status(STATUS_INSUFF_SERVER_RESOURCES);
        assert_eq!(classify_response(&vulnerable), ResponseSignal::VulnerableMs17_010);

        let infected = build::trans2_response_with_mid(0x51);
        assert_eq!(classify_response(&infected), ResponseSignal::DoublePulsarPresent);

        let clean = build::trans2_response_with_mid(0x41);
        assert_eq!(classify_response(&clean), ResponseSignal::DoublePulsarAbsent);

        let neutral = build::echo_response(9);
        assert_eq!(classify_response(&neutral), ResponseSignal::NoSignal);
    }

    #[test]
    fn probe_pairing_is_fixed_by_construction() {
        let peek = ProbePacket::peek_named_pipe();
        assert!(peek.is_consistent());
        assert!(matches!(
            peek.expected_response_signal(),
            ResponseExpectation::NtStatusValue(STATUS_INSUFF_SERVER_RESOURCES)
        ));
        assert!(peek.request().is_peek_named_pipe_request());
        assert!(peek.response_matches(&build::trans_response_with_status(
            STATUS_INSUFF_SERVER_RESOURCES
        )));

        let ping = ProbePacket::double_pulsar_ping();
        assert!(ping.is_consistent());
        assert!(ping.request().is_double_pulsar_ping());
        assert!(ping.response_matches(&build::trans2_response_with_mid(0x51)));
        assert!(!ping.response_matches(&build::trans2_response_with_mid(0x41)));
    }

    #[test]
    fn multiplex_id_survives_round_trip() {
        let msg = build::echo_request(0x41);
        let bytes = serialize_smb(&msg, Framing::Raw).unwrap();
        assert_eq!(parse_smb(&bytes, Framing::Raw).unwrap().header.multiplex_id, 0x41);
    }

    fn arb_header() -> impl Strategy<Value = SmbHeader> {
        (
            any::<u8>(),
            any::<u32>(),
            any::<u8>(),
            any::<u16>(),
            any::<u16>(),
            any::<[u8; 8]>(),
            any::<u16>(),
            (any::<u16>(), any::<u16>(), any::<u16>(), any::<u16>()),
        )
            .prop_map(|(command, nt_status, flags, flags2, pid_high, sec, reserved, ids)| {
                SmbHeader {
                    command,
                    nt_status,
                    flags,
                    flags2,
                    pid_high,
                    security_features: sec,
                    reserved,
                    tree_id: ids.0,
                    process_id: ids.1,
                    user_id: ids.2,
                    multiplex_id: ids.3,
                }
            })
    }

    fn arb_blocks() -> impl Strategy<Value = BlockPair> {
        (
            proptest::collection::vec(any::<u16>(), 0..40),
            proptest::collection::vec(any::<u8>(), 0..120),
        )
            .prop_map(|(words16, data)| {
                let words = words16.iter().flat_map(|w| w.to_le_bytes()).collect();
                BlockPair::new(words, data)
            })
    }

    fn arb_message() -> impl Strategy<Value = SmbMessage> {
        (arb_header(), arb_blocks(), proptest::option::of(1u32..0x4000)).prop_map(
            |(mut header, blocks, extra)| {
                let body = SmbCommandBody::from_code(header.command, blocks);
                header.command = body.command_code();
                let mut msg = SmbMessage::new(header, body);
                msg.declared_frame_length = extra.map(|e| {
                    let actual = serialize_smb(&msg, Framing::Raw).unwrap().len() as u32;
                    actual + e
                });
                msg
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_framed(msg in arb_message()) {
            let bytes = serialize_smb(&msg, Framing::NetBios).unwrap();
            let back = parse_smb(&bytes, Framing::NetBios).unwrap();
            prop_assert_eq!(&back, &msg);
            prop_assert_eq!(serialize_smb(&back, Framing::NetBios).unwrap(), bytes);
        }

        #[test]
        fn round_trip_raw(msg in arb_message().prop_map(|mut m| { m.declared_frame_length = None; m })) {
            let bytes = serialize_smb(&msg, Framing::Raw).unwrap();
            let back = parse_smb(&bytes, Framing::Raw).unwrap();
            prop_assert_eq!(&back, &msg);
        }

        #[test]
        fn parse_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = parse_smb(&bytes, Framing::Raw);
            let _ = parse_smb(&bytes, Framing::NetBios);
        }

        #[test]
        fn exactly_one_signal(msg in arb_message()) {
            let signal = classify_response(&msg);
            let count = [
                signal == ResponseSignal::VulnerableMs17_010,
                signal == ResponseSignal::DoublePulsarPresent,
                signal == ResponseSignal::DoublePulsarAbsent,
                signal == ResponseSignal::NoSignal,
            ]
            .iter()
            .filter(|b| **b)
            .count();
            prop_assert_eq!(count, 1);
        }
    }
}
