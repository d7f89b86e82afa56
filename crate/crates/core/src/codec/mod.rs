//! Byte-exact radio payloads.
//!
//! All multi-byte fields are big-endian. Byte 0 carries the layout version in
//! its high nibble (always 1) and the frame type in its low nibble. The last
//! two bytes are a CRC-16/CCITT-FALSE over everything before them.
//!
//! Node uplink (collar to aggregator, LoRa path), 22 bytes:
//!
//! ```text
//! off len field        encoding
//!   0   1 ver|type     0x11
//!   1   2 node_id      u16
//!   3   1 seq          u8, wrapping
//!   4   4 timestamp    u32 UTC seconds
//!   8   4 latitude     i32 degrees x 1e7
//!  12   4 longitude    i32 degrees x 1e7
//!  16   2 altitude     i16 meters x 10
//!  18   1 bpm          u8, 0 = no estimate
//!  19   1 flags        bit0 gps_valid, bit1 low_battery
//!  20   2 crc          u16
//! ```
//!
//! Station frames (shed stations, NRF24L01 path), 15 bytes each:
//!
//! ```text
//! off len field        environment (0x12)       rfid (0x13)
//!   0   1 ver|type
//!   1   2 station_id   u16
//!   3   1 seq          u8
//!   4   4 timestamp    u32 UTC seconds
//!   8   2              temperature i16 C x 10   rfid_tag u32 (8..12)
//!  10   1              humidity u8 %
//!  11   2              audio i16 dB x 10
//!  12   1                                       activity u8 (1..=4)
//!  13   2 crc          u16
//! ```

mod crc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ActivityCode, EnvSample, GeoFix, RfidEvent};

pub use crc::crc16;

pub const LAYOUT_VERSION: u8 = 1;
pub const TYPE_TELEMETRY: u8 = 0x1;
pub const TYPE_ENVIRONMENT: u8 = 0x2;
pub const TYPE_RFID: u8 = 0x3;

pub const UPLINK_LEN: usize = 22;
pub const STATION_LEN: usize = 15;
/// NRF24L01 payload ceiling.
pub const STATION_MAX_LEN: usize = 32;

const FLAG_GPS_VALID: u8 = 0x01;
const FLAG_LOW_BATTERY: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CodecError {
    #[error("BadLength: expected {expected} bytes, found {found}")]
    BadLength { expected: usize, found: usize },
    #[error("BadVersion: layout version {0}")]
    BadVersion(u8),
    #[error("BadType: frame type {0:#x}")]
    BadType(u8),
    #[error("CrcMismatch: expected {expected:#06x}, found {found:#06x}")]
    CrcMismatch { expected: u16, found: u16 },
    #[error("FieldOverflow: {0} out of range")]
    FieldOverflow(&'static str),
}

impl CodecError {
    /// Stable name of the failure mode, used for rejection counters.
    pub fn cause(&self) -> &'static str {
        match self {
            CodecError::BadLength { .. } => "BadLength",
            CodecError::BadVersion(_) => "BadVersion",
            CodecError::BadType(_) => "BadType",
            CodecError::CrcMismatch { .. } => "CrcMismatch",
            CodecError::FieldOverflow(_) => "FieldOverflow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UplinkFlags {
    pub gps_valid: bool,
    pub low_battery: bool,
}

impl UplinkFlags {
    fn to_byte(self) -> u8 {
        (self.gps_valid as u8 * FLAG_GPS_VALID) | (self.low_battery as u8 * FLAG_LOW_BATTERY)
    }

    fn from_byte(b: u8) -> Self {
        UplinkFlags {
            gps_valid: b & FLAG_GPS_VALID != 0,
            low_battery: b & FLAG_LOW_BATTERY != 0,
        }
    }
}

/// Collar telemetry in its fixed-point wire representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeUplinkFrame {
    pub node_id: u16,
    pub seq: u8,
    pub timestamp: u32,
    pub latitude_e7: i32,
    pub longitude_e7: i32,
    /// Decimeters.
    pub altitude_dm: i16,
    /// 0 means no estimate.
    pub bpm: u8,
    pub flags: UplinkFlags,
}

fn scale_checked<T: TryFrom<i64>>(value: f64, scale: f64, field: &'static str) -> Result<T, CodecError> {
    let scaled = (value * scale).round();
    if !scaled.is_finite() || scaled.abs() > 9.0e15 {
        return Err(CodecError::FieldOverflow(field));
    }
    T::try_from(scaled as i64).map_err(|_| CodecError::FieldOverflow(field))
}

impl NodeUplinkFrame {
    /// Builds a frame from a fix and an optional BPM, applying the wire
    /// scalings. BPM is rounded and clamped to 1..=255.
    pub fn from_reading(
        node_id: u16,
        seq: u8,
        timestamp: u32,
        fix: &GeoFix,
        bpm: Option<f64>,
        low_battery: bool,
    ) -> Result<Self, CodecError> {
        let mut frame = NodeUplinkFrame {
            node_id,
            seq,
            timestamp,
            bpm: bpm.map(|b| b.round().clamp(1.0, 255.0) as u8).unwrap_or(0),
            flags: UplinkFlags { gps_valid: false, low_battery },
            ..Default::default()
        };
        if let (true, Some(pos)) = (fix.is_valid(), fix.position) {
            frame.latitude_e7 = scale_checked(pos.lat, 1e7, "latitude")?;
            frame.longitude_e7 = scale_checked(pos.lon, 1e7, "longitude")?;
            frame.altitude_dm = scale_checked(fix.altitude.unwrap_or(0.0), 10.0, "altitude")?;
            frame.flags.gps_valid = true;
        }
        frame.check_ranges()?;
        Ok(frame)
    }

    pub fn latitude(&self) -> f64 {
        f64::from(self.latitude_e7) / 1e7
    }

    pub fn longitude(&self) -> f64 {
        f64::from(self.longitude_e7) / 1e7
    }

    pub fn altitude_m(&self) -> f64 {
        f64::from(self.altitude_dm) / 10.0
    }

    pub fn bpm(&self) -> Option<u8> {
        (self.bpm != 0).then_some(self.bpm)
    }

    fn check_ranges(&self) -> Result<(), CodecError> {
        if self.latitude_e7.unsigned_abs() > 900_000_000 {
            return Err(CodecError::FieldOverflow("latitude"));
        }
        if self.longitude_e7.unsigned_abs() > 1_800_000_000 {
            return Err(CodecError::FieldOverflow("longitude"));
        }
        Ok(())
    }
}

fn header(kind: u8) -> u8 {
    (LAYOUT_VERSION << 4) | kind
}

fn append_crc(buf: &mut Vec<u8>) {
    let crc = crc16(buf);
    buf.extend_from_slice(&crc.to_be_bytes());
}

pub fn encode_uplink(frame: &NodeUplinkFrame) -> Result<[u8; UPLINK_LEN], CodecError> {
    frame.check_ranges()?;
    let mut buf = Vec::with_capacity(UPLINK_LEN);
    buf.push(header(TYPE_TELEMETRY));
    buf.extend_from_slice(&frame.node_id.to_be_bytes());
    buf.push(frame.seq);
    buf.extend_from_slice(&frame.timestamp.to_be_bytes());
    buf.extend_from_slice(&frame.latitude_e7.to_be_bytes());
    buf.extend_from_slice(&frame.longitude_e7.to_be_bytes());
    buf.extend_from_slice(&frame.altitude_dm.to_be_bytes());
    buf.push(frame.bpm);
    buf.push(frame.flags.to_byte());
    append_crc(&mut buf);
    let mut out = [0u8; UPLINK_LEN];
    out.copy_from_slice(&buf);
    Ok(out)
}

fn check_envelope(bytes: &[u8], expected_len: usize, types: &[u8]) -> Result<u8, CodecError> {
    if bytes.len() != expected_len {
        return Err(CodecError::BadLength {
            expected: expected_len,
            found: bytes.len(),
        });
    }
    let version = bytes[0] >> 4;
    if version != LAYOUT_VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let kind = bytes[0] & 0x0F;
    if !types.contains(&kind) {
        return Err(CodecError::BadType(kind));
    }
    let (body, tail) = bytes.split_at(expected_len - 2);
    let expected = crc16(body);
    let found = u16::from_be_bytes([tail[0], tail[1]]);
    if expected != found {
        return Err(CodecError::CrcMismatch { expected, found });
    }
    Ok(kind)
}

fn be_u16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn uplink_fields(b: &[u8]) -> NodeUplinkFrame {
    NodeUplinkFrame {
        node_id: be_u16(b, 1),
        seq: b[3],
        timestamp: be_u32(b, 4),
        latitude_e7: be_u32(b, 8) as i32,
        longitude_e7: be_u32(b, 12) as i32,
        altitude_dm: be_u16(b, 16) as i16,
        bpm: b[18],
        flags: UplinkFlags::from_byte(b[19]),
    }
}

/// Decodes a node uplink. Checks length, version, type and CRC in that order.
pub fn decode_uplink(bytes: &[u8]) -> Result<NodeUplinkFrame, CodecError> {
    check_envelope(bytes, UPLINK_LEN, &[TYPE_TELEMETRY])?;
    let frame = uplink_fields(bytes);
    frame.check_ranges()?;
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StationBody {
    Environment {
        /// Deci-degrees Celsius.
        temperature_dc: i16,
        humidity: u8,
        /// Deci-decibels.
        audio_ddb: i16,
    },
    Rfid { rfid_tag: u32, activity: ActivityCode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationFrame {
    pub station_id: u16,
    pub seq: u8,
    pub timestamp: u32,
    pub body: StationBody,
}

impl StationFrame {
    pub fn environment(station_id: u16, seq: u8, timestamp: u32, temperature: f64, humidity: u8, audio_db: f64) -> Result<Self, CodecError> {
        if humidity > 100 {
            return Err(CodecError::FieldOverflow("humidity"));
        }
        Ok(StationFrame {
            station_id,
            seq,
            timestamp,
            body: StationBody::Environment {
                temperature_dc: scale_checked(temperature, 10.0, "temperature")?,
                humidity,
                audio_ddb: scale_checked(audio_db, 10.0, "audio")?,
            },
        })
    }

    pub fn rfid(station_id: u16, seq: u8, timestamp: u32, rfid_tag: u32, activity: ActivityCode) -> Self {
        StationFrame {
            station_id,
            seq,
            timestamp,
            body: StationBody::Rfid { rfid_tag, activity },
        }
    }

    pub fn env_sample(&self) -> Option<EnvSample> {
        match self.body {
            StationBody::Environment { temperature_dc, humidity, audio_ddb } => Some(EnvSample {
                temperature: f64::from(temperature_dc) / 10.0,
                humidity,
                audio_level: f64::from(audio_ddb) / 10.0,
                timestamp: u64::from(self.timestamp),
                station_id: self.station_id,
            }),
            StationBody::Rfid { .. } => None,
        }
    }

    pub fn rfid_event(&self) -> Option<RfidEvent> {
        match self.body {
            StationBody::Rfid { rfid_tag, activity } => Some(RfidEvent {
                rfid_tag,
                station_id: self.station_id,
                activity_code: activity,
                timestamp: u64::from(self.timestamp),
            }),
            StationBody::Environment { .. } => None,
        }
    }
}

pub fn encode_station(frame: &StationFrame) -> Result<Vec<u8>, CodecError> {
    let mut buf = Vec::with_capacity(STATION_LEN);
    let kind = match frame.body {
        StationBody::Environment { .. } => TYPE_ENVIRONMENT,
        StationBody::Rfid { .. } => TYPE_RFID,
    };
    buf.push(header(kind));
    buf.extend_from_slice(&frame.station_id.to_be_bytes());
    buf.push(frame.seq);
    buf.extend_from_slice(&frame.timestamp.to_be_bytes());
    match frame.body {
        StationBody::Environment { temperature_dc, humidity, audio_ddb } => {
            if humidity > 100 {
                return Err(CodecError::FieldOverflow("humidity"));
            }
            buf.extend_from_slice(&temperature_dc.to_be_bytes());
            buf.push(humidity);
            buf.extend_from_slice(&audio_ddb.to_be_bytes());
        }
        StationBody::Rfid { rfid_tag, activity } => {
            buf.extend_from_slice(&rfid_tag.to_be_bytes());
            buf.push(activity.code());
        }
    }
    append_crc(&mut buf);
    debug_assert_eq!(buf.len(), STATION_LEN);
    Ok(buf)
}

fn station_fields(b: &[u8], kind: u8) -> Result<StationFrame, CodecError> {
    let body = if kind == TYPE_ENVIRONMENT {
        let humidity = b[10];
        if humidity > 100 {
            return Err(CodecError::FieldOverflow("humidity"));
        }
        StationBody::Environment {
            temperature_dc: be_u16(b, 8) as i16,
            humidity,
            audio_ddb: be_u16(b, 11) as i16,
        }
    } else {
        StationBody::Rfid {
            rfid_tag: be_u32(b, 8),
            activity: ActivityCode::from_code(b[12]).ok_or(CodecError::FieldOverflow("activity"))?,
        }
    };
    Ok(StationFrame {
        station_id: be_u16(b, 1),
        seq: b[3],
        timestamp: be_u32(b, 4),
        body,
    })
}

pub fn decode_station(bytes: &[u8]) -> Result<StationFrame, CodecError> {
    let kind = check_envelope(bytes, STATION_LEN, &[TYPE_ENVIRONMENT, TYPE_RFID])?;
    station_fields(bytes, kind)
}

/// Sequence byte of an encoded uplink, without validating anything else.
pub fn peek_seq(bytes: &[u8]) -> Option<u8> {
    bytes.get(3).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFamily {
    NodeUplink,
    Station,
}

/// Field-level view of a frame whose envelope (length, version, type) is
/// sound, reported even when the CRC does not match.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInspection {
    pub family: FrameFamily,
    pub type_name: &'static str,
    pub fields: Vec<(&'static str, String)>,
    pub crc_expected: u16,
    pub crc_found: u16,
}

impl FrameInspection {
    pub fn crc_ok(&self) -> bool {
        self.crc_expected == self.crc_found
    }
}

/// Inspects raw bytes of either family, picking the family by length.
pub fn inspect(bytes: &[u8]) -> Result<FrameInspection, CodecError> {
    let (family, len, types): (_, _, &[u8]) = match bytes.len() {
        UPLINK_LEN => (FrameFamily::NodeUplink, UPLINK_LEN, &[TYPE_TELEMETRY]),
        STATION_LEN => (FrameFamily::Station, STATION_LEN, &[TYPE_ENVIRONMENT, TYPE_RFID]),
        found => return Err(CodecError::BadLength { expected: UPLINK_LEN, found }),
    };
    let version = bytes[0] >> 4;
    if version != LAYOUT_VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let kind = bytes[0] & 0x0F;
    if !types.contains(&kind) {
        return Err(CodecError::BadType(kind));
    }
    let crc_expected = crc16(&bytes[..len - 2]);
    let crc_found = be_u16(bytes, len - 2);
    let mut fields = Vec::new();
    let type_name = match family {
        FrameFamily::NodeUplink => {
            let f = uplink_fields(bytes);
            fields.push(("node_id", f.node_id.to_string()));
            fields.push(("seq", f.seq.to_string()));
            fields.push(("timestamp", format!("{} s UTC", f.timestamp)));
            fields.push(("latitude", format!("{:.7} deg", f.latitude())));
            fields.push(("longitude", format!("{:.7} deg", f.longitude())));
            fields.push(("altitude", format!("{:.1} m", f.altitude_m())));
            fields.push((
                "bpm",
                f.bpm().map_or_else(|| "none".to_string(), |b| format!("{b} BPM")),
            ));
            fields.push(("gps_valid", f.flags.gps_valid.to_string()));
            fields.push(("low_battery", f.flags.low_battery.to_string()));
            "telemetry"
        }
        FrameFamily::Station => {
            fields.push(("station_id", be_u16(bytes, 1).to_string()));
            fields.push(("seq", bytes[3].to_string()));
            fields.push(("timestamp", format!("{} s UTC", be_u32(bytes, 4))));
            if kind == TYPE_ENVIRONMENT {
                fields.push(("temperature", format!("{:.1} C", f64::from(be_u16(bytes, 8) as i16) / 10.0)));
                fields.push(("humidity", format!("{} %", bytes[10])));
                fields.push(("audio", format!("{:.1} dB", f64::from(be_u16(bytes, 11) as i16) / 10.0)));
                "environment"
            } else {
                fields.push(("rfid_tag", format!("{:#010x}", be_u32(bytes, 8))));
                let activity = ActivityCode::from_code(bytes[12]).map_or("invalid", ActivityCode::name);
                fields.push(("activity", format!("{} ({})", bytes[12], activity)));
                "rfid"
            }
        }
    };
    Ok(FrameInspection {
        family,
        type_name,
        fields,
        crc_expected,
        crc_found,
    })
}
