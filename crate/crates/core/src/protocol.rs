//! Operator link codec.
//!
//! Every message is one ASCII line: `$<body>*<HH>\n`, where `HH` is the XOR
//! of the body bytes as two uppercase hex digits. A `\r` before the `\n` is
//! tolerated on input. The streaming decoder drops anything before a `$`,
//! and a `$` seen mid-frame abandons the partial frame and starts over, so
//! a corrupted stream resynchronizes at the next frame start.
//!
//! Bodies carry commands (`START`, `JOG LEFT 12.5`, ...), responses
//! (`ACK START`, `NAK SPRAY UNSAFE`), telemetry (`TELEM ...`) and
//! asynchronous `EVENT ...` notices.

use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use crate::controller::{Command, Event, JogDirection, Mode};

/// Longest frame on the wire, delimiters and newline included.
pub const MAX_FRAME_LEN: usize = 256;
/// Longest body that fits: `$` + body + `*HH` + `\n`.
pub const MAX_BODY_LEN: usize = MAX_FRAME_LEN - 5;

/// Protocol-level NAK reasons. Controller reasons live in
/// [`crate::controller::reason`].
pub mod reason {
    pub const BUSY: &str = "BUSY";
    pub const NOSESSION: &str = "NOSESSION";
    pub const UNKNOWN: &str = "UNKNOWN";
    pub const BADARG: &str = "BADARG";
    pub const CHECKSUM: &str = "CHECKSUM";
    pub const MALFORMED: &str = "MALFORMED";
    pub const OVERSIZE: &str = "OVERSIZE";
}

/// Verb used when answering a frame that could not be decoded.
pub const FRAME_VERB: &str = "FRAME";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("checksum mismatch on `{body}`: computed {computed:02X}, frame says {received:02X}")]
    BadChecksum { body: String, computed: u8, received: u8 },
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("frame longer than {MAX_FRAME_LEN} bytes")]
    Oversize,
    #[error("invalid body: {0}")]
    InvalidBody(&'static str),
}

impl FrameError {
    /// Reason word for the `NAK FRAME <reason>` reply.
    pub fn reason(&self) -> &'static str {
        match self {
            FrameError::BadChecksum { .. } => reason::CHECKSUM,
            FrameError::Malformed(_) | FrameError::InvalidBody(_) => reason::MALFORMED,
            FrameError::Oversize => reason::OVERSIZE,
        }
    }
}

pub fn xor_fold(body: &[u8]) -> u8 {
    body.iter().fold(0, |acc, b| acc ^ b)
}

/// Two uppercase hex digits of the XOR fold.
pub fn checksum(body: &[u8]) -> String {
    format!("{:02X}", xor_fold(body))
}

fn body_byte_ok(b: u8) -> bool {
    (0x20..=0x7e).contains(&b) && b != b'$' && b != b'*'
}

fn check_body(body: &str) -> Result<(), FrameError> {
    if body.is_empty() {
        return Err(FrameError::InvalidBody("empty"));
    }
    if body.len() > MAX_BODY_LEN {
        return Err(FrameError::InvalidBody("too long"));
    }
    if !body.bytes().all(body_byte_ok) {
        return Err(FrameError::InvalidBody("only printable ASCII other than `$` and `*`"));
    }
    Ok(())
}

/// A validated message body.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    body: String,
}

impl Frame {
    pub fn new(body: impl Into<String>) -> Result<Self, FrameError> {
        let body = body.into();
        check_body(&body)?;
        Ok(Self { body })
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn checksum(&self) -> u8 {
        xor_fold(self.body.as_bytes())
    }

    /// Wire form, trailing newline included.
    pub fn to_line(&self) -> String {
        format!("${}*{:02X}\n", self.body, self.checksum())
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.body)
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    frame.to_line().into_bytes()
}

/// Validates `body` and frames it in one go.
pub fn encode_body(body: &str) -> Result<Vec<u8>, FrameError> {
    Frame::new(body).map(|f| encode_frame(&f))
}

/// Decodes the first frame in `bytes`, skipping leading noise.
pub fn parse_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    let mut dec = FrameDecoder::new();
    for &b in bytes {
        if let Some(r) = dec.push(b) {
            return r;
        }
    }
    Err(FrameError::Malformed("incomplete frame"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum DecodeState {
    Hunt,
    Body,
    Sum { hi: Option<u8> },
    Cr { received: u8 },
    Lf { received: u8 },
    /// Oversize body already reported; waiting for the next `$`.
    Drain,
}

/// Byte-at-a-time frame decoder.
#[derive(Debug, Clone)]
pub struct FrameDecoder {
    state: DecodeState,
    body: Vec<u8>,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new()
    }
}

fn hex_value(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self {
            state: DecodeState::Hunt,
            body: Vec::with_capacity(MAX_BODY_LEN),
        }
    }

    /// True when no partial frame is buffered.
    pub fn is_idle(&self) -> bool {
        matches!(self.state, DecodeState::Hunt | DecodeState::Drain)
    }

    fn restart(&mut self) {
        self.body.clear();
        self.state = DecodeState::Body;
    }

    fn fail(&mut self, b: u8, err: FrameError) -> Option<Result<Frame, FrameError>> {
        if b == b'$' {
            self.restart();
        } else {
            self.body.clear();
            self.state = DecodeState::Hunt;
        }
        Some(Err(err))
    }

    /// Feeds one byte; returns a result whenever a frame completes or fails.
    pub fn push(&mut self, b: u8) -> Option<Result<Frame, FrameError>> {
        match self.state {
            DecodeState::Hunt | DecodeState::Drain => {
                if b == b'$' {
                    self.restart();
                }
                None
            }
            DecodeState::Body => match b {
                b'*' if self.body.is_empty() => self.fail(b, FrameError::Malformed("empty body")),
                b'*' => {
                    self.state = DecodeState::Sum { hi: None };
                    None
                }
                b'$' => self.fail(b, FrameError::Malformed("frame restarted")),
                _ if !body_byte_ok(b) => self.fail(b, FrameError::Malformed("unexpected byte in body")),
                _ if self.body.len() == MAX_BODY_LEN => {
                    self.body.clear();
                    self.state = DecodeState::Drain;
                    Some(Err(FrameError::Oversize))
                }
                _ => {
                    self.body.push(b);
                    None
                }
            },
            DecodeState::Sum { hi } => match (hex_value(b), hi) {
                (Some(lo), Some(hi)) => {
                    self.state = DecodeState::Cr { received: hi << 4 | lo };
                    None
                }
                (Some(v), None) => {
                    self.state = DecodeState::Sum { hi: Some(v) };
                    None
                }
                (None, _) => self.fail(b, FrameError::Malformed("bad checksum digits")),
            },
            DecodeState::Cr { received } if b == b'\r' => {
                self.state = DecodeState::Lf { received };
                None
            }
            DecodeState::Cr { received } | DecodeState::Lf { received } => {
                if b != b'\n' {
                    return self.fail(b, FrameError::Malformed("missing line end"));
                }
                self.state = DecodeState::Hunt;
                let body = std::mem::take(&mut self.body);
                let computed = xor_fold(&body);
                // Body bytes were checked on the way in.
                let body = String::from_utf8(body).expect("printable ASCII");
                if computed == received {
                    Some(Ok(Frame { body }))
                } else {
                    Some(Err(FrameError::BadChecksum { body, computed, received }))
                }
            }
        }
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Vec<Result<Frame, FrameError>> {
        bytes.iter().filter_map(|&b| self.push(b)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TelemetryError {
    #[error("not a telemetry body")]
    NotTelemetry,
    #[error("expected field `{0}`")]
    MissingField(&'static str),
    #[error("bad value for `{field}`: `{value}`")]
    BadValue { field: &'static str, value: String },
    #[error("trailing data after the last field")]
    Trailing,
}

/// One telemetry sample. Positions in mm, ultrasonic in cm, coverage in %.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryRecord {
    pub t_ms: u64,
    pub mode: Mode,
    pub x_mm: f64,
    pub y_mm: f64,
    pub spray: bool,
    pub ultra_cm: f64,
    pub coverage_pct: f64,
}

fn round_to(v: f64, scale: f64) -> f64 {
    // + 0.0 folds -0 into 0 so it never prints as "-0".
    (v * scale).round() / scale + 0.0
}

impl TelemetryRecord {
    /// The record as it reads back after encoding: positions to 0.01 mm,
    /// ultrasonic and coverage to 0.1.
    pub fn quantized(&self) -> Self {
        Self {
            x_mm: round_to(self.x_mm, 100.0),
            y_mm: round_to(self.y_mm, 100.0),
            ultra_cm: round_to(self.ultra_cm, 10.0),
            coverage_pct: round_to(self.coverage_pct, 10.0),
            ..*self
        }
    }

    pub fn body(&self) -> String {
        let q = self.quantized();
        let mut s = String::with_capacity(96);
        write!(
            s,
            "TELEM t={} mode={} x={} y={} spray={} ultra={:.1} cov={:.1}",
            q.t_ms,
            q.mode,
            q.x_mm,
            q.y_mm,
            u8::from(q.spray),
            q.ultra_cm,
            q.coverage_pct
        )
        .expect("writing to a String");
        s
    }
}

pub fn encode_telemetry(rec: &TelemetryRecord) -> Frame {
    Frame::new(rec.body()).expect("telemetry bodies are printable and short")
}

pub fn parse_telemetry(body: &str) -> Result<TelemetryRecord, TelemetryError> {
    let mut words = body.split(' ');
    if words.next() != Some("TELEM") {
        return Err(TelemetryError::NotTelemetry);
    }
    let mut field = |name: &'static str| -> Result<&str, TelemetryError> {
        words
            .next()
            .and_then(|w| w.strip_prefix(name))
            .and_then(|w| w.strip_prefix('='))
            .ok_or(TelemetryError::MissingField(name))
    };
    fn value<T: std::str::FromStr>(field: &'static str, raw: &str) -> Result<T, TelemetryError> {
        raw.parse().map_err(|_| TelemetryError::BadValue {
            field,
            value: raw.to_string(),
        })
    }
    fn finite(field: &'static str, raw: &str) -> Result<f64, TelemetryError> {
        let v: f64 = value(field, raw)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TelemetryError::BadValue { field, value: raw.to_string() })
        }
    }
    let t_ms = value("t", field("t")?)?;
    let mode = value("mode", field("mode")?)?;
    let x_mm = finite("x", field("x")?)?;
    let y_mm = finite("y", field("y")?)?;
    let spray = match field("spray")? {
        "0" => false,
        "1" => true,
        other => return Err(TelemetryError::BadValue { field: "spray", value: other.into() }),
    };
    let ultra_cm = finite("ultra", field("ultra")?)?;
    let coverage_pct = finite("cov", field("cov")?)?;
    if words.next().is_some() {
        return Err(TelemetryError::Trailing);
    }
    Ok(TelemetryRecord { t_ms, mode, x_mm, y_mm, spray, ultra_cm, coverage_pct })
}

/// A body that is not a valid command. `verb` is what the NAK names.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("NAK {verb} {reason}")]
pub struct CommandError {
    pub verb: String,
    pub reason: &'static str,
}

impl CommandError {
    pub fn response(&self) -> Response {
        Response::Nak {
            verb: self.verb.clone(),
            reason: self.reason.to_string(),
        }
    }
}

fn parse_jog_direction(s: &str) -> Option<JogDirection> {
    match s {
        "UP" => Some(JogDirection::Up),
        "DOWN" => Some(JogDirection::Down),
        "LEFT" => Some(JogDirection::Left),
        "RIGHT" => Some(JogDirection::Right),
        _ => None,
    }
}

/// Parses a command body. Verbs and keywords are case-sensitive.
pub fn parse_command(body: &str) -> Result<Command, CommandError> {
    let words: Vec<&str> = body.split(' ').collect();
    let verb = words[0];
    let err = |reason| CommandError { verb: verb.to_string(), reason };
    let known = |cmd: Command| Ok(cmd);
    match (verb, &words[1..]) {
        ("HELLO", []) => known(Command::Hello),
        ("START", []) => known(Command::Start),
        ("PAUSE", []) => known(Command::Pause),
        ("RESUME", []) => known(Command::Resume),
        ("ABORT", []) => known(Command::Abort),
        ("SHIFT", []) => known(Command::Shift),
        ("GET", ["STATUS"]) => known(Command::GetStatus),
        ("SPRAY", ["ON"]) => known(Command::Spray { on: true }),
        ("SPRAY", ["OFF"]) => known(Command::Spray { on: false }),
        ("JOG", [dir, mm]) => {
            let direction = parse_jog_direction(dir).ok_or_else(|| err(reason::BADARG))?;
            let mm: f64 = mm.parse().map_err(|_| err(reason::BADARG))?;
            if !(mm.is_finite() && mm > 0.0) {
                return Err(err(reason::BADARG));
            }
            Ok(Command::Jog { direction, mm })
        }
        ("SET", [key, value]) if !key.is_empty() && !value.is_empty() => Ok(Command::Set {
            key: key.to_string(),
            value: value.to_string(),
        }),
        ("HELLO" | "START" | "PAUSE" | "RESUME" | "ABORT" | "SHIFT" | "GET" | "SPRAY" | "JOG" | "SET", _) => {
            Err(err(reason::BADARG))
        }
        _ => Err(CommandError {
            verb: if verb.is_empty() { "?".into() } else { verb.to_string() },
            reason: reason::UNKNOWN,
        }),
    }
}

/// Canonical body for a command; `parse_command` inverts it.
pub fn command_body(cmd: &Command) -> String {
    match cmd {
        Command::Jog { direction, mm } => format!("JOG {} {mm}", direction.as_str()),
        Command::Spray { on } => format!("SPRAY {}", if *on { "ON" } else { "OFF" }),
        Command::Set { key, value } => format!("SET {key} {value}"),
        Command::GetStatus => "GET STATUS".to_string(),
        other => other.verb().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ack { verb: String },
    Nak { verb: String, reason: String },
}

impl Response {
    pub fn body(&self) -> String {
        match self {
            Response::Ack { verb } => format!("ACK {verb}"),
            Response::Nak { verb, reason } => format!("NAK {verb} {reason}"),
        }
    }

    pub fn parse(body: &str) -> Option<Self> {
        let words: Vec<&str> = body.split(' ').collect();
        match words.as_slice() {
            ["ACK", verb] => Some(Response::Ack { verb: verb.to_string() }),
            ["NAK", verb, reason] => Some(Response::Nak {
                verb: verb.to_string(),
                reason: reason.to_string(),
            }),
            _ => None,
        }
    }

    /// ACK/NAK events from the controller map one-to-one onto responses.
    pub fn from_event(event: &Event) -> Option<Self> {
        match event {
            Event::Ack { verb } => Some(Response::Ack { verb: verb.clone() }),
            Event::Nak { verb, reason } => Some(Response::Nak {
                verb: verb.clone(),
                reason: reason.clone(),
            }),
            _ => None,
        }
    }
}

fn printable(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii() && body_byte_ok(c as u8) { c } else { '_' })
        .collect()
}

/// Notice body for controller events the operator should see. ACK/NAK go
/// out as responses instead and yield `None` here.
pub fn event_body(event: &Event) -> Option<String> {
    let body = match event {
        Event::Transition { from, to } => format!("EVENT MODE from={from} to={to}"),
        Event::ObstacleHold { ultrasonic } => format!("EVENT OBSTACLE_HOLD ultra={ultrasonic:.1}"),
        Event::ObstacleClear { ultrasonic } => format!("EVENT OBSTACLE_CLEAR ultra={ultrasonic:.1}"),
        Event::StrokeDone { wall, column, duration_ms } => {
            format!("EVENT STROKE wall={wall} column={column} ms={duration_ms}")
        }
        Event::Waypoint { x, y } => format!("EVENT WAYPOINT x={} y={}", round_to(*x, 100.0), round_to(*y, 100.0)),
        Event::Fault { reason } => format!("EVENT FAULT {}", printable(reason)),
        Event::Ack { .. } | Event::Nak { .. } => return None,
    };
    let mut body = body;
    body.truncate(MAX_BODY_LEN);
    Some(body)
}

pub type ClientId = u64;

/// What the session layer decided about one inbound frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    /// Hand the command to the controller; its ACK/NAK goes back to the client.
    Forward(Command),
    /// Answer directly without involving the controller.
    Reply(Response),
}

/// Single-operator session: the first client to say HELLO owns the link
/// until it disconnects.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Session {
    owner: Option<ClientId>,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn owner(&self) -> Option<ClientId> {
        self.owner
    }

    pub fn handle(&mut self, client: ClientId, frame: Result<&Frame, &FrameError>) -> Gate {
        let frame = match frame {
            Ok(f) => f,
            Err(e) => {
                return Gate::Reply(Response::Nak {
                    verb: FRAME_VERB.into(),
                    reason: e.reason().into(),
                })
            }
        };
        let cmd = match parse_command(frame.body()) {
            Ok(c) => c,
            Err(e) => return Gate::Reply(e.response()),
        };
        let nak = |reason: &str| {
            Gate::Reply(Response::Nak {
                verb: cmd.verb().into(),
                reason: reason.into(),
            })
        };
        match (self.owner, &cmd) {
            (None, Command::Hello) => {
                self.owner = Some(client);
                Gate::Forward(cmd)
            }
            (Some(o), _) if o == client => Gate::Forward(cmd),
            (Some(_), _) => nak(reason::BUSY),
            (None, _) => nak(reason::NOSESSION),
        }
    }

    /// Returns true when the departing client was the owner.
    pub fn disconnect(&mut self, client: ClientId) -> bool {
        if self.owner == Some(client) {
            self.owner = None;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(body: &str) -> Frame {
        Frame::new(body).unwrap()
    }

    #[test]
    fn checksum_examples() {
        assert_eq!(checksum(b""), "00");
        assert_eq!(checksum(b"A"), "41");
        assert_eq!(checksum(b"SPRAY ON"), "68");
        assert_eq!(checksum(b"GET STATUS"), "62");
    }

    // Independent reference: sum of bits per position, mod 2.
    fn parity_oracle(body: &[u8]) -> u8 {
        (0..8).fold(0u8, |acc, bit| {
            let ones = body.iter().filter(|&&b| b >> bit & 1 == 1).count();
            acc | (((ones % 2) as u8) << bit)
        })
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_frame(&frame("GET STATUS")), b"$GET STATUS*62\n");
        assert_eq!(encode_frame(&frame("SPRAY ON")), b"$SPRAY ON*68\n");
        assert_eq!(encode_frame(&frame("HELLO")), b"$HELLO*42\n");
        assert_eq!(encode_frame(&frame("START")), b"$START*40\n");
        assert_eq!(encode_frame(&frame("ACK HELLO")), b"$ACK HELLO*2B\n");
    }

    #[test]
    fn invalid_bodies_rejected() {
        assert!(Frame::new("").is_err());
        assert!(Frame::new("A$B").is_err());
        assert!(Frame::new("A*B").is_err());
        assert!(Frame::new("A\nB").is_err());
        assert!(Frame::new("é").is_err());
        assert!(Frame::new("x".repeat(MAX_BODY_LEN)).is_ok());
        assert!(Frame::new("x".repeat(MAX_BODY_LEN + 1)).is_err());
        assert_eq!(frame(&"x".repeat(MAX_BODY_LEN)).to_line().len(), MAX_FRAME_LEN);
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_frame(b"$SPRAY ON*68\n"), Ok(frame("SPRAY ON")));
        assert!(matches!(
            parse_frame(b"$SPRAY ON*69\n"),
            Err(FrameError::BadChecksum { computed: 0x68, received: 0x69, .. })
        ));
        assert_eq!(parse_frame(b"garbage$GET STATUS*62\n"), Ok(frame("GET STATUS")));
        assert_eq!(parse_frame(b"$SPRAY ON*68\r\n"), Ok(frame("SPRAY ON")));
        assert!(matches!(parse_frame(b"$SPRAY ON*6"), Err(FrameError::Malformed(_))));
        assert!(matches!(parse_frame(b"$SPRAY ON*68x"), Err(FrameError::Malformed(_))));
        assert!(matches!(parse_frame(b"$SPRAY ON*6g\n"), Err(FrameError::Malformed(_))));
        assert!(matches!(parse_frame(b"$*00\n"), Err(FrameError::Malformed(_))));
        assert!(matches!(parse_frame(b"$SPRAY\nON*68\n"), Err(FrameError::Malformed(_))));
        let mut long = b"$".to_vec();
        long.extend(std::iter::repeat_n(b'x', MAX_BODY_LEN + 1));
        assert_eq!(parse_frame(&long), Err(FrameError::Oversize));
    }

    #[test]
    fn lowercase_hex_is_rejected() {
        assert_eq!(parse_frame(b"$ACK HELLO*2B\n"), Ok(frame("ACK HELLO")));
        assert!(matches!(parse_frame(b"$ACK HELLO*2b\n"), Err(FrameError::Malformed(_))));
    }

    #[test]
    fn dollar_mid_frame_restarts() {
        let mut dec = FrameDecoder::new();
        let out = dec.feed(b"$SPR$SPRAY ON*68\n");
        assert_eq!(out, vec![Err(FrameError::Malformed("frame restarted")), Ok(frame("SPRAY ON"))]);
        let out = dec.feed(b"$SPRAY ON*6$START*40\n");
        assert_eq!(out.len(), 2);
        assert_eq!(out[1], Ok(frame("START")));
        let out = dec.feed(b"$SPRAY ON*68$START*40\n");
        assert_eq!(out.last(), Some(&Ok(frame("START"))));
    }

    #[test]
    fn stream_of_frames_split_anywhere() {
        let bodies = ["HELLO", "START", "JOG LEFT 2.5", "GET STATUS"];
        let wire: Vec<u8> = bodies.iter().flat_map(|b| encode_frame(&frame(b))).collect();
        for split in 0..wire.len() {
            let mut dec = FrameDecoder::new();
            let mut got = dec.feed(&wire[..split]);
            got.extend(dec.feed(&wire[split..]));
            let got: Vec<String> = got.into_iter().map(|r| r.unwrap().body().to_string()).collect();
            assert_eq!(got, bodies);
        }
    }

    #[test]
    fn oversize_drains_to_next_start() {
        let mut wire = b"$".to_vec();
        wire.extend(std::iter::repeat_n(b'y', 400));
        wire.extend(b"*00\n");
        wire.extend(encode_frame(&frame("ABORT")));
        let out = FrameDecoder::new().feed(&wire);
        assert_eq!(out, vec![Err(FrameError::Oversize), Ok(frame("ABORT"))]);
    }

    #[test]
    fn telemetry_example() {
        let rec = TelemetryRecord {
            t_ms: 0,
            mode: Mode::Idle,
            x_mm: 0.0,
            y_mm: 0.0,
            spray: false,
            ultra_cm: 100.0,
            coverage_pct: 0.0,
        };
        let f = encode_telemetry(&rec);
        assert_eq!(f.body(), "TELEM t=0 mode=IDLE x=0 y=0 spray=0 ultra=100.0 cov=0.0");
        assert_eq!(f.checksum(), 0x56);
        assert_eq!(parse_telemetry(f.body()), Ok(rec));

        let rec = TelemetryRecord {
            t_ms: 12_340,
            mode: Mode::ShiftingColumn,
            x_mm: 451.499_9,
            y_mm: -0.001,
            spray: true,
            ultra_cm: 99.96,
            coverage_pct: 45.0,
        };
        let body = rec.body();
        assert_eq!(
            body,
            "TELEM t=12340 mode=SHIFTING_COLUMN x=451.5 y=0 spray=1 ultra=100.0 cov=45.0"
        );
        assert_eq!(parse_telemetry(&body), Ok(rec.quantized()));
    }

    #[test]
    fn telemetry_rejects_bad_bodies() {
        assert_eq!(parse_telemetry("ACK HELLO"), Err(TelemetryError::NotTelemetry));
        assert_eq!(
            parse_telemetry("TELEM t=0 mode=IDLE x=0 spray=0 ultra=1.0 cov=0.0"),
            Err(TelemetryError::MissingField("y"))
        );
        assert!(matches!(
            parse_telemetry("TELEM t=0 mode=NAPPING x=0 y=0 spray=0 ultra=1.0 cov=0.0"),
            Err(TelemetryError::BadValue { field: "mode", .. })
        ));
        assert!(matches!(
            parse_telemetry("TELEM t=0 mode=IDLE x=NaN y=0 spray=0 ultra=1.0 cov=0.0"),
            Err(TelemetryError::BadValue { field: "x", .. })
        ));
        assert!(matches!(
            parse_telemetry("TELEM t=0 mode=IDLE x=0 y=0 spray=2 ultra=1.0 cov=0.0"),
            Err(TelemetryError::BadValue { field: "spray", .. })
        ));
        assert_eq!(
            parse_telemetry("TELEM t=0 mode=IDLE x=0 y=0 spray=0 ultra=1.0 cov=0.0 extra=1"),
            Err(TelemetryError::Trailing)
        );
    }

    #[test]
    fn command_grammar() {
        let cases = [
            ("HELLO", Command::Hello),
            ("START", Command::Start),
            ("PAUSE", Command::Pause),
            ("RESUME", Command::Resume),
            ("ABORT", Command::Abort),
            ("SHIFT", Command::Shift),
            ("GET STATUS", Command::GetStatus),
            ("SPRAY ON", Command::Spray { on: true }),
            ("SPRAY OFF", Command::Spray { on: false }),
            ("JOG UP 1", Command::Jog { direction: JogDirection::Up, mm: 1.0 }),
            ("JOG RIGHT 0.25", Command::Jog { direction: JogDirection::Right, mm: 0.25 }),
            ("SET margin_cm 4.5", Command::Set { key: "margin_cm".into(), value: "4.5".into() }),
        ];
        for (body, cmd) in cases {
            assert_eq!(parse_command(body), Ok(cmd.clone()), "{body}");
            assert_eq!(command_body(&cmd), body);
        }
        let nak = |body: &str| parse_command(body).unwrap_err().response().body();
        assert_eq!(nak("DANCE"), "NAK DANCE UNKNOWN");
        assert_eq!(nak("start"), "NAK start UNKNOWN");
        assert_eq!(nak(" START"), "NAK ? UNKNOWN");
        assert_eq!(nak("START NOW"), "NAK START BADARG");
        assert_eq!(nak("GET"), "NAK GET BADARG");
        assert_eq!(nak("SPRAY MAYBE"), "NAK SPRAY BADARG");
        assert_eq!(nak("JOG SIDEWAYS 1"), "NAK JOG BADARG");
        assert_eq!(nak("JOG UP -1"), "NAK JOG BADARG");
        assert_eq!(nak("JOG UP 0"), "NAK JOG BADARG");
        assert_eq!(nak("JOG UP inf"), "NAK JOG BADARG");
        assert_eq!(nak("SET margin_cm"), "NAK SET BADARG");
        assert_eq!(nak("SET  5"), "NAK SET BADARG");
    }

    #[test]
    fn responses_round_trip() {
        for r in [
            Response::Ack { verb: "START".into() },
            Response::Nak { verb: "HELLO".into(), reason: "BUSY".into() },
        ] {
            assert_eq!(Response::parse(&r.body()), Some(r));
        }
        assert_eq!(Response::parse("ACK"), None);
        assert_eq!(
            Response::from_event(&Event::Nak { verb: "SPRAY".into(), reason: "UNSAFE".into() }).unwrap().body(),
            "NAK SPRAY UNSAFE"
        );
    }

    #[test]
    fn event_bodies() {
        let t = Event::Transition { from: Mode::Idle, to: Mode::Ready };
        assert_eq!(event_body(&t).unwrap(), "EVENT MODE from=IDLE to=READY");
        assert_eq!(
            event_body(&Event::ObstacleHold { ultrasonic: 59.96 }).unwrap(),
            "EVENT OBSTACLE_HOLD ultra=60.0"
        );
        assert_eq!(
            event_body(&Event::Fault { reason: "sensor fault*$".into() }).unwrap(),
            "EVENT FAULT sensor fault__"
        );
        assert_eq!(event_body(&Event::Ack { verb: "START".into() }), None);
        for e in [
            t,
            Event::StrokeDone { wall: 0, column: 3, duration_ms: 28_000 },
            Event::Waypoint { x: 1.0 / 3.0, y: 2.0 },
            Event::ObstacleClear { ultrasonic: 100.0 },
        ] {
            assert!(Frame::new(event_body(&e).unwrap()).is_ok());
        }
    }

    #[test]
    fn session_rules() {
        let mut s = Session::new();
        let f = |b: &str| frame(b);
        let reply = |g: Gate| match g {
            Gate::Reply(r) => r.body(),
            Gate::Forward(c) => panic!("forwarded {c:?}"),
        };
        assert_eq!(reply(s.handle(1, Ok(&f("START")))), "NAK START NOSESSION");
        assert_eq!(s.handle(1, Ok(&f("HELLO"))), Gate::Forward(Command::Hello));
        assert_eq!(s.owner(), Some(1));
        assert_eq!(reply(s.handle(2, Ok(&f("HELLO")))), "NAK HELLO BUSY");
        assert_eq!(reply(s.handle(2, Ok(&f("START")))), "NAK START BUSY");
        assert_eq!(s.handle(1, Ok(&f("START"))), Gate::Forward(Command::Start));
        assert_eq!(s.handle(1, Ok(&f("HELLO"))), Gate::Forward(Command::Hello));
        let bad = FrameError::BadChecksum { body: "X".into(), computed: 1, received: 2 };
        assert_eq!(reply(s.handle(1, Err(&bad))), "NAK FRAME CHECKSUM");
        assert_eq!(reply(s.handle(1, Ok(&f("FLY")))), "NAK FLY UNKNOWN");
        assert!(!s.disconnect(2));
        assert!(s.disconnect(1));
        assert_eq!(s.handle(2, Ok(&f("HELLO"))), Gate::Forward(Command::Hello));
    }

    fn body_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(
            (0x20u8..=0x7e).prop_filter("delimiter", |b| *b != b'$' && *b != b'*'),
            1..=MAX_BODY_LEN,
        )
        .prop_map(|v| String::from_utf8(v).unwrap())
    }

    proptest! {
        #[test]
        fn checksum_matches_parity(body in prop::collection::vec(any::<u8>(), 0..300)) {
            prop_assert_eq!(xor_fold(&body), parity_oracle(&body));
        }

        #[test]
        fn frames_round_trip(body in body_strategy()) {
            let f = Frame::new(body).unwrap();
            prop_assert_eq!(parse_frame(&encode_frame(&f)), Ok(f));
        }

        #[test]
        fn body_corruption_detected(body in body_strategy(), pos in any::<prop::sample::Index>(), to in any::<u8>()) {
            let f = Frame::new(body).unwrap();
            let mut wire = encode_frame(&f);
            let i = 1 + pos.index(f.body().len());
            prop_assume!(wire[i] != to);
            wire[i] = to;
            let out = FrameDecoder::new().feed(&wire);
            prop_assert!(out.iter().any(|r| r.is_err()), "{:?}", out);
            prop_assert!(!out.contains(&Ok(f)));
        }

        #[test]
        fn telemetry_round_trips(
            t_ms in any::<u32>(),
            mode in prop::sample::select(Mode::ALL.to_vec()),
            x in -10_000.0f64..10_000.0,
            y in -10_000.0f64..10_000.0,
            spray in any::<bool>(),
            ultra in 2.0f64..400.0,
            cov in 0.0f64..100.0,
        ) {
            let rec = TelemetryRecord {
                t_ms: u64::from(t_ms), mode, x_mm: x, y_mm: y, spray, ultra_cm: ultra, coverage_pct: cov,
            };
            let f = encode_telemetry(&rec);
            let back = parse_telemetry(parse_frame(&encode_frame(&f)).unwrap().body()).unwrap();
            prop_assert_eq!(back, rec.quantized());
            prop_assert_eq!(back.quantized(), back);
        }

        #[test]
        fn jog_bodies_round_trip(mm in 1e-6f64..1e6, d in 0usize..4) {
            let direction = [JogDirection::Up, JogDirection::Down, JogDirection::Left, JogDirection::Right][d];
            let cmd = Command::Jog { direction, mm };
            prop_assert_eq!(parse_command(&command_body(&cmd)), Ok(cmd));
        }
    }

    #[test]
    fn decoder_survives_noise_and_resyncs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe = frame("GET STATUS");
        let mut dec = FrameDecoder::new();
        for _ in 0..200 {
            let noise: Vec<u8> = (0..rng.random_range(0..2000)).map(|_| rng.random()).collect();
            dec.feed(&noise);
            let out = dec.feed(&encode_frame(&probe));
            assert_eq!(out.last(), Some(&Ok(probe.clone())));
        }
    }
}
