//! Stateful recognizer for the staged grooming-and-overflow sequence.
//!
//! Events are correlated per (attacker host, victim host) pair, because the
//! choreography spans around twenty TCP connections. Each pair runs a
//! forward-only state machine over the twelve observable steps; the report
//! carries the furthest stage reached, the first-seen timestamp of every
//! stage, and the protocol anomalies collected along the way.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::net::Ipv4Addr;

use serde::Serialize;
use thiserror::Error;

use crate::smb_wire::{
    classify_response, ResponseSignal, SmbCommandBody, SmbMessage,
    DOUBLEPULSAR_PRESENT_MID, STATUS_INSUFF_SERVER_RESOURCES,
};

/// Microsecond-resolution event time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn from_micros(micros: u64) -> Self {
        Timestamp(micros)
    }

    pub fn from_pcap(sec: u32, usec: u32) -> Self {
        Timestamp(u64::from(sec) * 1_000_000 + u64::from(usec))
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub host: Ipv4Addr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// One TCP connection, oriented: `client` initiated it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub client: Endpoint,
    pub server: Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowEventKind {
    SmbParsed(SmbMessage),
    RawTcpOpen,
    /// Payload bytes on a connection whose stream is not SMB.
    RawTcpData(usize),
    TcpFin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEvent {
    pub timestamp: Timestamp,
    pub flow: FlowKey,
    pub direction: Direction,
    pub kind: FlowEventKind,
}

/// The observable steps of the attack sequence, in order, bracketed by
/// `Idle` and `Complete`. Variant order defines stage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum AttackStage {
    Idle,
    Probe,
    ListUpload,
    EchoCheck,
    FirstReserve,
    FirstSrvnetWave,
    SecondReserve,
    FirstReserveFreed,
    SecondSrvnetWave,
    SecondEchoCheck,
    SecondReserveFreed,
    TriggerSegment,
    PayloadDelivery,
    Complete,
}

impl AttackStage {
    pub const ALL: [AttackStage; 14] = [
        AttackStage::Idle,
        AttackStage::Probe,
        AttackStage::ListUpload,
        AttackStage::EchoCheck,
        AttackStage::FirstReserve,
        AttackStage::FirstSrvnetWave,
        AttackStage::SecondReserve,
        AttackStage::FirstReserveFreed,
        AttackStage::SecondSrvnetWave,
        AttackStage::SecondEchoCheck,
        AttackStage::SecondReserveFreed,
        AttackStage::TriggerSegment,
        AttackStage::PayloadDelivery,
        AttackStage::Complete,
    ];

    /// 1-based step number for the twelve observable stages.
    pub fn step_number(self) -> Option<u8> {
        match self {
            AttackStage::Idle | AttackStage::Complete => None,
            _ => Some(self as u8),
        }
    }

    pub fn from_step_number(step: u8) -> Option<AttackStage> {
        (1..=12)
            .contains(&step)
            .then(|| Self::ALL[usize::from(step)])
    }

    pub fn label(self) -> &'static str {
        match self {
            AttackStage::Idle => "idle",
            AttackStage::Probe => "probe",
            AttackStage::ListUpload => "list-upload",
            AttackStage::EchoCheck => "echo-check",
            AttackStage::FirstReserve => "first-reserve",
            AttackStage::FirstSrvnetWave => "first-srvnet-wave",
            AttackStage::SecondReserve => "second-reserve",
            AttackStage::FirstReserveFreed => "first-reserve-freed",
            AttackStage::SecondSrvnetWave => "second-srvnet-wave",
            AttackStage::SecondEchoCheck => "second-echo-check",
            AttackStage::SecondReserveFreed => "second-reserve-freed",
            AttackStage::TriggerSegment => "trigger-segment",
            AttackStage::PayloadDelivery => "payload-delivery",
            AttackStage::Complete => "complete",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AttackStage::Idle => "No stages of the sequence observed.",
            AttackStage::Probe => {
                "Reconnaissance pair: a Trans request with the PeekNamedPipe subcommand, whose \
                 response status 0xC0000205 marks the host as vulnerable, and a Trans2 ping whose \
                 response Multiplex ID 0x51 marks an installed backdoor (0x41 means clean)."
            }
            AttackStage::ListUpload => {
                "An NT Trans request opens a large transaction and Trans2 Secondary requests \
                 continue it, a carrier mismatch legitimate clients do not produce, uploading the \
                 crafted attribute list except its last segment."
            }
            AttackStage::EchoCheck => "An Echo request confirms the upload arrived.",
            AttackStage::FirstReserve => {
                "A malformed Negotiate / Session Setup pair declares far more data than it ever \
                 sends, forcing the server to reserve a 0x10000-byte pool buffer."
            }
            AttackStage::FirstSrvnetWave => {
                "A burst of raw TCP connections to port 445 carrying non-SMB data makes the \
                 server allocate connection buffers, filling the slots ahead of the placeholder."
            }
            AttackStage::SecondReserve => {
                "A second malformed pair reserves the 0x11000-byte placeholder the result list \
                 buffer will later land in."
            }
            AttackStage::FirstReserveFreed => {
                "A FIN on the first reserve connection frees its buffer."
            }
            AttackStage::SecondSrvnetWave => {
                "Extra raw connections are opened so that one of their buffers lands immediately \
                 after the placeholder."
            }
            AttackStage::SecondEchoCheck => {
                "An Echo request confirms the groom packets arrived; not every variant sends it."
            }
            AttackStage::SecondReserveFreed => {
                "A FIN on the second reserve connection frees the placeholder; last-in-first-out \
                 reuse makes the freed slot the next allocation's home."
            }
            AttackStage::TriggerSegment => {
                "A lone Trans2 Secondary request delivers the last segment of the original list, \
                 starting the conversion that overflows the result buffer."
            }
            AttackStage::PayloadDelivery => {
                "Payload bytes are sent over the raw connections and the connections are closed, \
                 which maps and invokes the payload when a header was hijacked."
            }
            AttackStage::Complete => "Every stage of the sequence was observed.",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AnomalyTag {
    /// Trans2 Secondary continuing an NT Trans transaction.
    TransactionTypeMismatch,
    /// Declared frame length implies a pool reservation of 0x10000+.
    OversizedNonPagedPoolReserve,
    /// A response carried STATUS_INSUFF_SERVER_RESOURCES to a probe.
    VulnerableProbeResponse,
    /// A ping response carried the backdoor Multiplex ID.
    BackdoorPresentResponse,
}

impl AnomalyTag {
    pub fn label(self) -> &'static str {
        match self {
            AnomalyTag::TransactionTypeMismatch => "transaction-type-mismatch",
            AnomalyTag::OversizedNonPagedPoolReserve => "oversized-nonpagedpool-reserve",
            AnomalyTag::VulnerableProbeResponse => "vulnerable-probe-response",
            AnomalyTag::BackdoorPresentResponse => "backdoor-present-response",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Benign,
    Suspicious,
    EternalblueSequence,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Benign => "benign",
            Verdict::Suspicious => "suspicious",
            Verdict::EternalblueSequence => "eternalblue-sequence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageTransition {
    pub attacker: Ipv4Addr,
    pub victim: Ipv4Addr,
    pub from: AttackStage,
    pub to: AttackStage,
    pub at: Timestamp,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectorError {
    #[error("events regressed within flow {client} -> {server}: {prev} then {got}")]
    OutOfOrderEvent {
        client: Endpoint,
        server: Endpoint,
        prev: Timestamp,
        got: Timestamp,
    },
    #[error("host {0} never appeared as an attacker")]
    UnknownHost(Ipv4Addr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorConfig {
    /// Verdict becomes EternalblueSequence at this stage or beyond.
    pub conviction_stage: AttackStage,
    /// Working state resets to Idle after this much silence.
    pub idle_timeout: u64,
    /// Raw connections needed to count as a connection wave.
    pub wave_threshold: usize,
    /// Declared reservation that counts as oversized.
    pub oversized_reserve_min: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            conviction_stage: AttackStage::TriggerSegment,
            idle_timeout: 300 * 1_000_000,
            wave_threshold: 3,
            oversized_reserve_min: 0x10000,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct RawFlowState {
    data_chunks: usize,
}

#[derive(Debug, Clone)]
struct PairState {
    current: AttackStage,
    max_stage: AttackStage,
    stage_timestamps: BTreeMap<AttackStage, Timestamp>,
    anomalies: Vec<AnomalyTag>,
    nt_trans_seen: bool,
    reserve_flows: Vec<FlowKey>,
    raw_flows: HashMap<FlowKey, RawFlowState>,
    wave1: HashSet<FlowKey>,
    wave2: HashSet<FlowKey>,
    payload_flows: HashSet<FlowKey>,
    payload_fins: HashSet<FlowKey>,
    last_event: Option<Timestamp>,
    flow_clocks: HashMap<FlowKey, Timestamp>,
}

impl PairState {
    fn new() -> Self {
        PairState {
            current: AttackStage::Idle,
            max_stage: AttackStage::Idle,
            stage_timestamps: BTreeMap::new(),
            anomalies: Vec::new(),
            nt_trans_seen: false,
            reserve_flows: Vec::new(),
            raw_flows: HashMap::new(),
            wave1: HashSet::new(),
            wave2: HashSet::new(),
            payload_flows: HashSet::new(),
            payload_fins: HashSet::new(),
            last_event: None,
            flow_clocks: HashMap::new(),
        }
    }

    fn tag(&mut self, tag: AnomalyTag) {
        if !self.anomalies.contains(&tag) {
            self.anomalies.push(tag);
        }
    }

    fn reset_working_state(&mut self) {
        self.current = AttackStage::Idle;
        self.nt_trans_seen = false;
        self.reserve_flows.clear();
        self.raw_flows.clear();
        self.wave1.clear();
        self.wave2.clear();
        self.payload_flows.clear();
        self.payload_fins.clear();
    }
}

/// The per-pair report. Field order is stable in both text and machine
/// renderings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub attacker: Ipv4Addr,
    pub victim: Ipv4Addr,
    pub verdict: Verdict,
    pub max_stage: AttackStage,
    pub stage_timestamps: BTreeMap<AttackStage, Timestamp>,
    pub anomalies: Vec<AnomalyTag>,
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "attacker={} victim={} verdict={} max-stage={}",
            self.attacker,
            self.victim,
            self.verdict.label(),
            self.max_stage.label()
        )?;
        for (stage, ts) in &self.stage_timestamps {
            let step = stage
                .step_number()
                .map(|n| format!("{n:02}"))
                .unwrap_or_else(|| "--".into());
            writeln!(f, "  stage {step} {:<22} t={ts}", stage.label())?;
        }
        if self.anomalies.is_empty() {
            writeln!(f, "  anomalies: none")?;
        } else {
            let labels: Vec<_> = self.anomalies.iter().map(|a| a.label()).collect();
            writeln!(f, "  anomalies: {}", labels.join(", "))?;
        }
        Ok(())
    }
}

/// The detector itself: feed it [`FlowEvent`]s in timestamp order, then
/// pull reports.
#[derive(Debug, Default)]
pub struct GroomDetector {
    config: DetectorConfig,
    pairs: HashMap<(Ipv4Addr, Ipv4Addr), PairState>,
}

impl GroomDetector {
    pub fn new(config: DetectorConfig) -> Self {
        GroomDetector {
            config,
            pairs: HashMap::new(),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Consume one event; returns the stage transition it caused, if any.
    pub fn feed(&mut self, event: &FlowEvent) -> Result<Option<StageTransition>, DetectorError> {
        let attacker = event.flow.client.host;
        let victim = event.flow.server.host;
        let state = self
            .pairs
            .entry((attacker, victim))
            .or_insert_with(PairState::new);

        if let Some(prev) = state.flow_clocks.get(&event.flow) {
            if event.timestamp < *prev {
                return Err(DetectorError::OutOfOrderEvent {
                    client: event.flow.client,
                    server: event.flow.server,
                    prev: *prev,
                    got: event.timestamp,
                });
            }
        }
        state.flow_clocks.insert(event.flow, event.timestamp);

        if let Some(last) = state.last_event {
            if event.timestamp.as_micros().saturating_sub(last.as_micros())
                > self.config.idle_timeout
            {
                state.reset_working_state();
            }
        }
        state.last_event = Some(event.timestamp);

        let transition = Self::advance(&self.config, state, event);
        Ok(transition.map(|(from, to)| StageTransition {
            attacker,
            victim,
            from,
            to,
            at: event.timestamp,
        }))
    }

    fn promote(
        state: &mut PairState,
        to: AttackStage,
        at: Timestamp,
    ) -> Option<(AttackStage, AttackStage)> {
        if to <= state.current {
            return None;
        }
        let from = state.current;
        state.current = to;
        if to > state.max_stage {
            state.max_stage = to;
        }
        state.stage_timestamps.entry(to).or_insert(at);
        Some((from, to))
    }

    fn advance(
        config: &DetectorConfig,
        state: &mut PairState,
        event: &FlowEvent,
    ) -> Option<(AttackStage, AttackStage)> {
        use AttackStage as S;
        let ts = event.timestamp;
        let c2s = event.direction == Direction::ClientToServer;

        match &event.kind {
            FlowEventKind::SmbParsed(msg) if c2s => {
                // Oversized reserve declarations come first: they are the
                // give-away regardless of the command's other content.
                let oversized = matches!(
                    msg.body,
                    SmbCommandBody::Negotiate(_) | SmbCommandBody::SessionSetupAndX(_)
                ) && msg
                    .implied_reservation()
                    .map(|r| r >= config.oversized_reserve_min)
                    .unwrap_or(false);
                if oversized {
                    state.tag(AnomalyTag::OversizedNonPagedPoolReserve);
                    if !state.reserve_flows.contains(&event.flow) {
                        state.reserve_flows.push(event.flow);
                    }
                    if state.current < S::FirstReserve {
                        return Self::promote(state, S::FirstReserve, ts);
                    }
                    if state.current >= S::FirstSrvnetWave && state.current < S::SecondReserve {
                        return Self::promote(state, S::SecondReserve, ts);
                    }
                    return None;
                }

                if msg.is_peek_named_pipe_request() || msg.is_double_pulsar_ping() {
                    return Self::promote(state, S::Probe, ts);
                }

                match &msg.body {
                    SmbCommandBody::NtTrans(_) if !msg.is_reply() => {
                        state.nt_trans_seen = true;
                        None
                    }
                    SmbCommandBody::Trans2Secondary(_) if !msg.is_reply() => {
                        if state.current >= S::SecondReserveFreed {
                            return Self::promote(state, S::TriggerSegment, ts);
                        }
                        if state.nt_trans_seen {
                            state.tag(AnomalyTag::TransactionTypeMismatch);
                            return Self::promote(state, S::ListUpload, ts);
                        }
                        None
                    }
                    SmbCommandBody::Echo(_) if !msg.is_reply() => {
                        if state.current == S::ListUpload {
                            return Self::promote(state, S::EchoCheck, ts);
                        }
                        if state.current == S::SecondSrvnetWave {
                            return Self::promote(state, S::SecondEchoCheck, ts);
                        }
                        None
                    }
                    _ => None,
                }
            }
            FlowEventKind::SmbParsed(msg) => {
                match classify_response(msg) {
                    ResponseSignal::VulnerableMs17_010 => {
                        state.tag(AnomalyTag::VulnerableProbeResponse)
                    }
                    ResponseSignal::DoublePulsarPresent => {
                        state.tag(AnomalyTag::BackdoorPresentResponse)
                    }
                    _ => {}
                }
                None
            }
            FlowEventKind::RawTcpOpen if c2s => {
                state.raw_flows.entry(event.flow).or_default();
                None
            }
            FlowEventKind::RawTcpData(_) if c2s => {
                state.raw_flows.entry(event.flow).or_default().data_chunks += 1;

                if state.current >= S::TriggerSegment {
                    state.payload_flows.insert(event.flow);
                    if state.payload_flows.len() >= config.wave_threshold
                        && state.current < S::PayloadDelivery
                    {
                        return Self::promote(state, S::PayloadDelivery, ts);
                    }
                    return None;
                }
                if state.current >= S::FirstReserve && state.current < S::FirstReserveFreed {
                    state.wave1.insert(event.flow);
                    if state.wave1.len() >= config.wave_threshold
                        && state.current < S::FirstSrvnetWave
                    {
                        return Self::promote(state, S::FirstSrvnetWave, ts);
                    }
                    return None;
                }
                if state.current >= S::FirstReserveFreed && state.current < S::TriggerSegment {
                    state.wave2.insert(event.flow);
                    if state.wave2.len() >= config.wave_threshold
                        && state.current < S::SecondSrvnetWave
                    {
                        return Self::promote(state, S::SecondSrvnetWave, ts);
                    }
                    return None;
                }
                None
            }
            FlowEventKind::TcpFin if c2s => {
                if let Some(pos) = state.reserve_flows.iter().position(|f| *f == event.flow) {
                    if pos == 0
                        && state.current >= S::SecondReserve
                        && state.current < S::FirstReserveFreed
                    {
                        return Self::promote(state, S::FirstReserveFreed, ts);
                    }
                    if pos == 1
                        && state.current >= S::SecondSrvnetWave
                        && state.current < S::SecondReserveFreed
                    {
                        return Self::promote(state, S::SecondReserveFreed, ts);
                    }
                    return None;
                }
                if state.current >= S::PayloadDelivery && state.payload_flows.contains(&event.flow)
                {
                    state.payload_fins.insert(event.flow);
                    if state.payload_fins.len() >= config.wave_threshold
                        && state.current < S::Complete
                    {
                        return Self::promote(state, S::Complete, ts);
                    }
                }
                None
            }
            _ => None,
        }
    }

    fn report_for(&self, key: (Ipv4Addr, Ipv4Addr), state: &PairState) -> DetectionReport {
        let verdict = if state.max_stage >= self.config.conviction_stage {
            Verdict::EternalblueSequence
        } else if state.max_stage > AttackStage::Idle {
            Verdict::Suspicious
        } else {
            Verdict::Benign
        };
        DetectionReport {
            attacker: key.0,
            victim: key.1,
            verdict,
            max_stage: state.max_stage,
            stage_timestamps: state.stage_timestamps.clone(),
            anomalies: state.anomalies.clone(),
        }
    }

    /// Report for one attacker. With several victims, the pair that got
    /// furthest wins. Idempotent; feeding may continue afterwards.
    pub fn finalize(&self, attacker: Ipv4Addr) -> Result<DetectionReport, DetectorError> {
        self.pairs
            .iter()
            .filter(|((a, _), _)| *a == attacker)
            .max_by_key(|((_, v), s)| (s.max_stage, std::cmp::Reverse(*v)))
            .map(|(key, state)| self.report_for(*key, state))
            .ok_or(DetectorError::UnknownHost(attacker))
    }

    /// All pair reports, ordered by (attacker, victim).
    pub fn reports(&self) -> Vec<DetectionReport> {
        let mut keys: Vec<_> = self.pairs.keys().copied().collect();
        keys.sort();
        keys.iter()
            .map(|k| self.report_for(*k, &self.pairs[k]))
            .collect()
    }
}

/// One signature rule in the emitted document.
#[derive(Debug, Clone, Serialize)]
pub struct DetectionRule {
    pub id: &'static str,
    pub title: &'static str,
    pub stage: Option<AttackStage>,
    pub summary: String,
    pub signatures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RuleDocument {
    pub rules: Vec<DetectionRule>,
}

impl fmt::Display for RuleDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "signature rules for the staged SMB grooming sequence")?;
        writeln!(f, "====================================================")?;
        for rule in &self.rules {
            let stage = rule
                .stage
                .and_then(AttackStage::step_number)
                .map(|n| format!(" [stage {n}]"))
                .unwrap_or_default();
            writeln!(f)?;
            writeln!(f, "{}{stage}: {}", rule.id, rule.title)?;
            writeln!(f, "  {}", rule.summary)?;
            for sig in &rule.signatures {
                writeln!(f, "  signature: {sig}")?;
            }
        }
        Ok(())
    }
}

/// The static signature document: byte-level and sequence-level markers
/// for each stage of the choreography.
pub fn emit_rules() -> RuleDocument {
    let rules = vec![
        DetectionRule {
            id: "R01",
            title: "PeekNamedPipe vulnerability probe",
            stage: Some(AttackStage::Probe),
            summary: "Trans request with setup word 0x0023 (PeekNamedPipe) against \\PIPE\\; a \
                      response with the status below confirms the unpatched conversion path."
                .into(),
            signatures: vec![
                "request: SMB command 0x25, first setup word 0x0023".into(),
                format!(
                    "response: NT status {STATUS_INSUFF_SERVER_RESOURCES:#010X} \
                     (STATUS_INSUFF_SERVER_RESOURCES)"
                ),
            ],
        },
        DetectionRule {
            id: "R02",
            title: "Backdoor presence ping",
            stage: Some(AttackStage::Probe),
            summary: "Trans2 request on the reserved SESSION_SETUP subcommand; an implanted host \
                      answers with a bumped Multiplex ID."
                .into(),
            signatures: vec![
                "request: SMB command 0x32, first setup word 0x000E, Multiplex ID 0x41".into(),
                format!(
                    "response: Multiplex ID {DOUBLEPULSAR_PRESENT_MID:#04x} = implanted, 0x41 = clean"
                ),
            ],
        },
        DetectionRule {
            id: "R03",
            title: "Transaction carrier mismatch",
            stage: Some(AttackStage::ListUpload),
            summary: "Trans2 Secondary requests continuing an NT Trans transaction. Legitimate \
                      clients continue NT Trans with NT Trans Secondary; the mismatch smuggles a \
                      transaction past the 16-bit size fields."
                .into(),
            signatures: vec![
                "sequence: command 0xA0 (NT Trans) followed by one or more 0x33 (Trans2 Secondary)"
                    .into(),
            ],
        },
        DetectionRule {
            id: "R04",
            title: "Attribute list sized to the truncation boundary",
            stage: Some(AttackStage::ListUpload),
            summary: "The uploaded Os2Fea list declares SizeOfList = 0x10000, the smallest value \
                      whose high word survives the low-word-only size update."
                .into(),
            signatures: vec![
                "payload: transaction data begins 00 00 01 00 (little-endian 0x10000)".into(),
            ],
        },
        DetectionRule {
            id: "R05",
            title: "Oversized pool reservation",
            stage: Some(AttackStage::FirstReserve),
            summary: "Negotiate / Session Setup AndX frames whose NetBIOS length declares \
                      0x10000 or more bytes that never arrive, pinning a large NonPagedPool \
                      buffer."
                .into(),
            signatures: vec![
                "frame: declared NetBIOS length >= 0x10000 with the connection left hanging"
                    .into(),
                "second reservation declares 0x11000: the result-buffer placeholder".into(),
            ],
        },
        DetectionRule {
            id: "R06",
            title: "Raw connection waves on the SMB port",
            stage: Some(AttackStage::FirstSrvnetWave),
            summary: "Bursts (3+) of TCP connections to port 445 whose payload is not SMB; each \
                      one parks a connection buffer in the pool."
                .into(),
            signatures: vec!["payload: first bytes lack the NetBIOS/SMB framing magic".into()],
        },
        DetectionRule {
            id: "R07",
            title: "Reservation releases by bare FIN",
            stage: Some(AttackStage::FirstReserveFreed),
            summary: "The reserve connections are torn down by a FIN with no SMB logoff, freeing \
                      the pinned buffers in LIFO order."
                .into(),
            signatures: vec!["sequence: FIN on a connection flagged by R05".into()],
        },
        DetectionRule {
            id: "R08",
            title: "Lone trigger segment",
            stage: Some(AttackStage::TriggerSegment),
            summary: "After both frees, a single Trans2 Secondary delivers the withheld last \
                      segment, starting the conversion while the freed placeholder is on top of \
                      the free list."
                .into(),
            signatures: vec![
                "sequence: command 0x33 after two R07 events, no other SMB in between".into(),
            ],
        },
        DetectionRule {
            id: "R09",
            title: "Payload bursts and closures",
            stage: Some(AttackStage::PayloadDelivery),
            summary: "Data bursts on the raw connections followed by their closure; on a \
                      hijacked header the disconnect invokes the mapped bytes."
                .into(),
            signatures: vec!["sequence: data then FIN on every connection counted by R06".into()],
        },
    ];
    RuleDocument { rules }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smb_wire::build;

    fn flow(port: u16) -> FlowKey {
        FlowKey {
            client: Endpoint {
                host: Ipv4Addr::new(10, 10, 10, 151),
                port,
            },
            server: Endpoint {
                host: Ipv4Addr::new(10, 10, 10, 152),
                port: 445,
            },
        }
    }

    fn smb_event(ts: u64, f: FlowKey, msg: SmbMessage) -> FlowEvent {
        let direction = if msg.is_reply() {
            Direction::ServerToClient
        } else {
            Direction::ClientToServer
        };
        FlowEvent {
            timestamp: Timestamp::from_micros(ts),
            flow: f,
            direction,
            kind: FlowEventKind::SmbParsed(msg),
        }
    }

    fn raw_event(ts: u64, f: FlowKey, kind: FlowEventKind) -> FlowEvent {
        FlowEvent {
            timestamp: Timestamp::from_micros(ts),
            flow: f,
            direction: Direction::ClientToServer,
            kind,
        }
    }

    #[test]
    fn probe_alone_is_suspicious() {
        let mut det = GroomDetector::default();
        let t = det
            .feed(&smb_event(1, flow(50000), build::peek_named_pipe_request()))
            .unwrap();
        assert_eq!(t.unwrap().to, AttackStage::Probe);
        det.feed(&smb_event(2, flow(50000), build::double_pulsar_ping()))
            .unwrap();

        let report = det.finalize(Ipv4Addr::new(10, 10, 10, 151)).unwrap();
        assert_eq!(report.max_stage, AttackStage::Probe);
        assert_eq!(report.verdict, Verdict::Suspicious);
    }

    #[test]
    fn upload_requires_nt_trans_first() {
        // Trans2 Secondary before any NT Trans: no list-upload stage.
        let mut det = GroomDetector::default();
        det.feed(&smb_event(
            1,
            flow(50001),
            build::trans2_secondary(0x20000, 0, &[0u8; 16]),
        ))
        .unwrap();
        assert_eq!(
            det.finalize(Ipv4Addr::new(10, 10, 10, 151)).unwrap().max_stage,
            AttackStage::Idle
        );

        // The right order advances and tags the mismatch.
        let mut det = GroomDetector::default();
        det.feed(&smb_event(
            1,
            flow(50001),
            build::nt_trans_request(0x20000, &[0u8; 16]),
        ))
        .unwrap();
        let t = det
            .feed(&smb_event(
                2,
                flow(50001),
                build::trans2_secondary(0x20000, 16, &[0u8; 16]),
            ))
            .unwrap();
        assert_eq!(t.unwrap().to, AttackStage::ListUpload);
        let report = det.finalize(Ipv4Addr::new(10, 10, 10, 151)).unwrap();
        assert!(report
            .anomalies
            .contains(&AnomalyTag::TransactionTypeMismatch));
    }

    #[test]
    fn benign_session_stays_idle() {
        let mut det = GroomDetector::default();
        let f = flow(50002);
        for (i, msg) in [
            build::negotiate_request(),
            build::negotiate_response(),
            build::session_setup_request(),
            build::session_setup_response(),
            build::tree_connect_request("\\\\10.10.10.152\\share"),
            build::tree_connect_response(),
            build::opaque_request(0x2E, vec![0u8; 24], Vec::new()),
            build::opaque_response(0x2E, vec![0u8; 24], vec![0xAA; 64]),
        ]
        .into_iter()
        .enumerate()
        {
            det.feed(&smb_event(i as u64 + 1, f, msg)).unwrap();
        }
        let report = det.finalize(Ipv4Addr::new(10, 10, 10, 151)).unwrap();
        assert_eq!(report.verdict, Verdict::Benign);
        assert!(report.anomalies.is_empty());
    }

    #[test]
    fn out_of_order_events_error() {
        let mut det = GroomDetector::default();
        let f = flow(50003);
        det.feed(&raw_event(10, f, FlowEventKind::RawTcpOpen)).unwrap();
        let err = det
            .feed(&raw_event(5, f, FlowEventKind::RawTcpData(64)))
            .unwrap_err();
        assert!(matches!(err, DetectorError::OutOfOrderEvent { .. }));
    }

    #[test]
    fn unknown_host_errors() {
        let det = GroomDetector::default();
        assert_eq!(
            det.finalize(Ipv4Addr::new(1, 2, 3, 4)),
            Err(DetectorError::UnknownHost(Ipv4Addr::new(1, 2, 3, 4)))
        );
    }

    #[test]
    fn probe_response_tags_anomalies() {
        let mut det = GroomDetector::default();
        let f = flow(50004);
        det.feed(&smb_event(1, f, build::peek_named_pipe_request()))
            .unwrap();
        det.feed(&smb_event(
            2,
            f,
            build::trans_response_with_status(STATUS_INSUFF_SERVER_RESOURCES),
        ))
        .unwrap();
        det.feed(&smb_event(3, f, build::trans2_response_with_mid(0x51)))
            .unwrap();
        let report = det.finalize(Ipv4Addr::new(10, 10, 10, 151)).unwrap();
        assert!(report.anomalies.contains(&AnomalyTag::VulnerableProbeResponse));
        assert!(report.anomalies.contains(&AnomalyTag::BackdoorPresentResponse));
    }

    #[test]
    fn idle_timeout_resets_working_state() {
        let mut det = GroomDetector::default();
        det.feed(&smb_event(
            1_000_000,
            flow(50005),
            build::nt_trans_request(0x20000, &[0u8; 16]),
        ))
        .unwrap();
        // Silence much longer than the window, then the continuation.
        let late = 1_000_000 + 301 * 1_000_000;
        let t = det
            .feed(&smb_event(
                late,
                flow(50005),
                build::trans2_secondary(0x20000, 16, &[0u8; 16]),
            ))
            .unwrap();
        assert!(t.is_none(), "stale NT Trans must not pair across the window");
    }

    #[test]
    fn rules_document_carries_the_byte_constants() {
        let doc = emit_rules().to_string();
        assert!(doc.contains("0xC0000205"));
        assert!(doc.contains("0x10000"));
        assert!(doc.contains("NT Trans"));
        assert!(doc.contains("Trans2 Secondary"));
        assert!(doc.contains("0x51"));
    }

    #[test]
    fn stage_order_matches_step_numbers() {
        for w in AttackStage::ALL.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert_eq!(AttackStage::Probe.step_number(), Some(1));
        assert_eq!(AttackStage::PayloadDelivery.step_number(), Some(12));
        assert_eq!(
            AttackStage::from_step_number(11),
            Some(AttackStage::TriggerSegment)
        );
        assert_eq!(AttackStage::from_step_number(0), None);
        assert_eq!(AttackStage::from_step_number(13), None);
    }
}
