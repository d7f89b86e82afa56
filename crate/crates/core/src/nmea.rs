//! NMEA-0183 sentences as emitted by the collar GPS receiver.
//!
//! Only GGA and RMC are interpreted. Any other well-framed sentence with a
//! valid checksum parses as [`Parsed::Unsupported`].
//!
//! ```text
//! $<talker><type>,<field>,<field>,...*<HH>\r\n
//! ```
//!
//! `HH` is the XOR of every byte strictly between `$` and `*`, written as two
//! uppercase hex digits. The trailing CRLF is optional on read and always
//! written.

use std::fmt::Write as _;

use chrono::NaiveDate;
use thiserror::Error;

use crate::domain::{FixQuality, GeoFix};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NmeaError {
    #[error("bad framing: {0}")]
    BadFraming(&'static str),
    #[error("checksum mismatch: expected {expected:02X}, found {found:02X}")]
    ChecksumMismatch { expected: u8, found: u8 },
    #[error("non-ASCII byte in sentence")]
    NonAsciiPayload,
    #[error("malformed {field} field: {value:?}")]
    MalformedNumber { field: &'static str, value: String },
    #[error("a fix without position cannot be serialized")]
    NoFixUnserializable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SentenceType {
    Gga,
    Rmc,
}

impl SentenceType {
    pub fn code(self) -> &'static str {
        match self {
            SentenceType::Gga => "GGA",
            SentenceType::Rmc => "RMC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmeaSentence {
    pub talker: String,
    pub kind: SentenceType,
    pub fields: Vec<String>,
    pub checksum: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Supported(NmeaSentence),
    /// Valid framing and checksum, but a type this crate does not interpret.
    Unsupported { talker: String, type_code: String },
}

impl Parsed {
    pub fn supported(self) -> Option<NmeaSentence> {
        match self {
            Parsed::Supported(s) => Some(s),
            Parsed::Unsupported { .. } => None,
        }
    }
}

pub fn checksum_byte(body: &[u8]) -> u8 {
    body.iter().fold(0, |acc, b| acc ^ b)
}

/// XOR checksum of `body` as two uppercase hex digits.
pub fn checksum(body: &[u8]) -> String {
    format!("{:02X}", checksum_byte(body))
}

fn hex_digit(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'A'..=b'F' => Some(b - b'A' + 10),
        b'a'..=b'f' => Some(b - b'a' + 10),
        _ => None,
    }
}

pub fn parse_sentence(line: &str) -> Result<Parsed, NmeaError> {
    parse_bytes(line.as_bytes())
}

/// Parses one raw line. Never panics, whatever the input.
pub fn parse_bytes(line: &[u8]) -> Result<Parsed, NmeaError> {
    let line = line
        .strip_suffix(b"\r\n")
        .or_else(|| line.strip_suffix(b"\n"))
        .unwrap_or(line);
    if !line.is_ascii() {
        return Err(NmeaError::NonAsciiPayload);
    }
    if line.first() != Some(&b'$') {
        return Err(NmeaError::BadFraming("missing '$'"));
    }
    let star = line
        .iter()
        .rposition(|&b| b == b'*')
        .ok_or(NmeaError::BadFraming("missing '*'"))?;
    let body = &line[1..star];
    let tail = &line[star + 1..];
    if tail.len() != 2 {
        return Err(NmeaError::BadFraming("checksum must be two hex digits"));
    }
    let found = match (hex_digit(tail[0]), hex_digit(tail[1])) {
        (Some(hi), Some(lo)) => (hi << 4) | lo,
        _ => return Err(NmeaError::BadFraming("checksum must be two hex digits")),
    };
    if body.iter().any(|&b| b == b'$' || b == b'*' || b == b'\r' || b == b'\n') {
        return Err(NmeaError::BadFraming("reserved character in payload"));
    }
    let expected = checksum_byte(body);
    if expected != found {
        return Err(NmeaError::ChecksumMismatch { expected, found });
    }

    // ASCII was checked above, so this cannot fail.
    let body = std::str::from_utf8(body).map_err(|_| NmeaError::NonAsciiPayload)?;
    let mut parts = body.split(',');
    let address = parts.next().unwrap_or_default();
    if address.len() != 5 || !address.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit()) {
        return Err(NmeaError::BadFraming("address must be talker + 3-letter type"));
    }
    let (talker, type_code) = address.split_at(2);
    let kind = match type_code {
        "GGA" => SentenceType::Gga,
        "RMC" => SentenceType::Rmc,
        _ => {
            return Ok(Parsed::Unsupported {
                talker: talker.to_string(),
                type_code: type_code.to_string(),
            })
        }
    };
    Ok(Parsed::Supported(NmeaSentence {
        talker: talker.to_string(),
        kind,
        fields: parts.map(str::to_string).collect(),
        checksum: found,
    }))
}

fn malformed(field: &'static str, value: &str) -> NmeaError {
    NmeaError::MalformedNumber {
        field,
        value: value.to_string(),
    }
}

fn field(s: &NmeaSentence, idx: usize) -> &str {
    s.fields.get(idx).map(String::as_str).unwrap_or("")
}

/// `hhmmss[.ss]` to seconds of day.
fn parse_time_of_day(text: &str) -> Result<f64, NmeaError> {
    if text.is_empty() {
        return Ok(0.0);
    }
    let bytes = text.as_bytes();
    if bytes.len() < 6 || !bytes[..6].iter().all(u8::is_ascii_digit) {
        return Err(malformed("time", text));
    }
    let hh: u32 = text[0..2].parse().map_err(|_| malformed("time", text))?;
    let mm: u32 = text[2..4].parse().map_err(|_| malformed("time", text))?;
    let ss: f64 = text[4..].parse().map_err(|_| malformed("time", text))?;
    if hh > 23 || mm > 59 || !(0.0..61.0).contains(&ss) {
        return Err(malformed("time", text));
    }
    Ok(f64::from(hh * 3600 + mm * 60) + ss)
}

/// `d+mm.mmmm` plus hemisphere to signed decimal degrees.
fn parse_coordinate(
    text: &str,
    hemisphere: &str,
    positive: &str,
    negative: &str,
    limit: f64,
    name: &'static str,
) -> Result<f64, NmeaError> {
    if !text.bytes().all(|b| b.is_ascii_digit() || b == b'.') || text.bytes().filter(|&b| b == b'.').count() > 1 {
        return Err(malformed(name, text));
    }
    let int_len = text.find('.').unwrap_or(text.len());
    if int_len < 3 {
        return Err(malformed(name, text));
    }
    let degrees: f64 = text[..int_len - 2].parse().map_err(|_| malformed(name, text))?;
    let minutes: f64 = text[int_len - 2..].parse().map_err(|_| malformed(name, text))?;
    if minutes >= 60.0 {
        return Err(malformed(name, text));
    }
    let value = degrees + minutes / 60.0;
    if value > limit {
        return Err(malformed(name, text));
    }
    if hemisphere == positive {
        Ok(value)
    } else if hemisphere == negative {
        Ok(-value)
    } else {
        Err(malformed(name, hemisphere))
    }
}

fn parse_altitude(text: &str) -> Result<Option<f64>, NmeaError> {
    if text.is_empty() {
        return Ok(None);
    }
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| malformed("altitude", text))
}

/// Converts a GGA or RMC sentence into a fix.
///
/// GGA carries only time of day, so its `timestamp` is seconds since UTC
/// midnight; RMC with a date field yields full Unix seconds. Sentences with
/// empty position fields yield a `NoFix` fix rather than an error.
pub fn to_fix(s: &NmeaSentence) -> Result<GeoFix, NmeaError> {
    match s.kind {
        SentenceType::Gga => {
            let tod = parse_time_of_day(field(s, 0))?;
            let timestamp = tod.floor() as u64;
            let quality = match field(s, 5) {
                "" | "0" => return Ok(GeoFix::no_fix(timestamp)),
                "2" => FixQuality::DifferentialFix,
                q if q.bytes().all(|b| b.is_ascii_digit()) => FixQuality::StandardFix,
                q => return Err(malformed("quality", q)),
            };
            position_fix(s, 1, quality, timestamp, parse_altitude(field(s, 8))?)
        }
        SentenceType::Rmc => {
            let tod = parse_time_of_day(field(s, 0))?;
            let mut timestamp = tod.floor() as u64;
            let date = field(s, 8);
            if !date.is_empty() {
                timestamp += rmc_date_epoch(date)?;
            }
            match field(s, 1) {
                "A" => position_fix(s, 2, FixQuality::StandardFix, timestamp, None),
                "V" | "" => Ok(GeoFix::no_fix(timestamp)),
                other => Err(malformed("status", other)),
            }
        }
    }
}

fn rmc_date_epoch(date: &str) -> Result<u64, NmeaError> {
    if date.len() != 6 || !date.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed("date", date));
    }
    let dd: u32 = date[0..2].parse().map_err(|_| malformed("date", date))?;
    let mm: u32 = date[2..4].parse().map_err(|_| malformed("date", date))?;
    let yy: i32 = date[4..6].parse().map_err(|_| malformed("date", date))?;
    let day = NaiveDate::from_ymd_opt(if yy < 80 { 2000 + yy } else { 1900 + yy }, mm, dd).ok_or_else(|| malformed("date", date))?;
    Ok(day.and_hms_opt(0, 0, 0).map(|d| d.and_utc().timestamp()).unwrap_or(0) as u64)
}

fn position_fix(
    s: &NmeaSentence,
    first: usize,
    quality: FixQuality,
    timestamp: u64,
    altitude: Option<f64>,
) -> Result<GeoFix, NmeaError> {
    let (lat, ns, lon, ew) = (field(s, first), field(s, first + 1), field(s, first + 2), field(s, first + 3));
    if lat.is_empty() || lon.is_empty() {
        return Ok(GeoFix::no_fix(timestamp));
    }
    let latitude = parse_coordinate(lat, ns, "N", "S", 90.0, "latitude")?;
    let longitude = parse_coordinate(lon, ew, "E", "W", 180.0, "longitude")?;
    Ok(GeoFix {
        position: Some(crate::domain::LatLon::new(latitude, longitude)),
        altitude,
        quality,
        timestamp,
    })
}

/// Writes `|degrees|` as `d..dmm.mmmm` with 4 decimal minute digits.
fn write_coordinate(out: &mut String, degrees: f64, deg_width: usize) {
    let units = (degrees.abs() * 60.0 * 10_000.0).round() as u64;
    let whole = units / 600_000;
    let minute_units = units % 600_000;
    let _ = write!(
        out,
        "{whole:0deg_width$}{:02}.{:04}",
        minute_units / 10_000,
        minute_units % 10_000
    );
}

/// Emits a GGA line (with CRLF) for a fix at `utc_seconds_of_day`.
pub fn serialize_gga(fix: &GeoFix, utc_seconds_of_day: f64) -> Result<String, NmeaError> {
    let pos = match (fix.quality, fix.position) {
        (FixQuality::NoFix, _) | (_, None) => return Err(NmeaError::NoFixUnserializable),
        (_, Some(p)) => p,
    };
    let centis = (utc_seconds_of_day.rem_euclid(86_400.0) * 100.0).round() as u64 % 8_640_000;
    let (hh, mm, ss, cs) = (centis / 360_000, centis / 6000 % 60, centis / 100 % 60, centis % 100);

    let mut body = String::with_capacity(80);
    let _ = write!(body, "GPGGA,{hh:02}{mm:02}{ss:02}.{cs:02},");
    write_coordinate(&mut body, pos.lat, 2);
    body.push_str(if pos.lat < 0.0 { ",S," } else { ",N," });
    write_coordinate(&mut body, pos.lon, 3);
    body.push_str(if pos.lon < 0.0 { ",W," } else { ",E," });
    body.push_str(match fix.quality {
        FixQuality::DifferentialFix => "2",
        _ => "1",
    });
    body.push_str(",08,1.0,");
    match fix.altitude {
        Some(alt) => {
            let _ = write!(body, "{alt:.1},M,");
        }
        None => body.push_str(",,"),
    }
    body.push_str("0.0,M,,");

    let sum = checksum(body.as_bytes());
    Ok(format!("${body}*{sum}\r\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GGA: &str = "$GPGGA,123519,4807.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,*47";

    #[test]
    fn empty_body_checksum() {
        assert_eq!(checksum(b""), "00");
    }

    #[test]
    fn reference_gga_parses() {
        let s = parse_sentence(GGA).unwrap().supported().unwrap();
        assert_eq!(s.talker, "GP");
        assert_eq!(s.kind, SentenceType::Gga);
        assert_eq!(s.fields.len(), 14);
        assert_eq!(s.checksum, 0x47);
        // CRLF is optional on read
        assert_eq!(parse_sentence(&format!("{GGA}\r\n")).unwrap(), parse_sentence(GGA).unwrap());
    }

    #[test]
    fn reference_gga_fix() {
        let s = parse_sentence(GGA).unwrap().supported().unwrap();
        let fix = to_fix(&s).unwrap();
        let p = fix.position.unwrap();
        assert!((p.lat - (48.0 + 7.038 / 60.0)).abs() < 1e-12);
        assert!((p.lon - (11.0 + 31.0 / 60.0)).abs() < 1e-12);
        assert!((p.lat - 48.1173).abs() < 1e-9);
        assert!((p.lon - 11.516667).abs() < 1e-6);
        assert_eq!(fix.altitude, Some(545.4));
        assert_eq!(fix.quality, FixQuality::StandardFix);
        assert_eq!(fix.timestamp, 12 * 3600 + 35 * 60 + 19);
    }

    #[test]
    fn flipped_bit_is_checksum_mismatch() {
        let mut bytes = GGA.as_bytes().to_vec();
        bytes[10] ^= 0x01;
        assert!(matches!(parse_bytes(&bytes), Err(NmeaError::ChecksumMismatch { found: 0x47, .. })));
    }

    #[test]
    fn unsupported_type_is_not_an_error() {
        let body = "GPZDA,201530.00,04,07,2002,00,00";
        let line = format!("${body}*{}", checksum(body.as_bytes()));
        assert_eq!(
            parse_sentence(&line).unwrap(),
            Parsed::Unsupported { talker: "GP".into(), type_code: "ZDA".into() }
        );
    }

    #[test]
    fn framing_errors() {
        assert!(matches!(parse_sentence("GPGGA,1*00"), Err(NmeaError::BadFraming(_))));
        assert!(matches!(parse_sentence("$GPGGA,1"), Err(NmeaError::BadFraming(_))));
        assert!(matches!(parse_sentence("$GPGGA,1*0"), Err(NmeaError::BadFraming(_))));
        assert_eq!(parse_sentence("$GPGGA,é*00"), Err(NmeaError::NonAsciiPayload));
        assert_eq!(parse_bytes(b""), Err(NmeaError::BadFraming("missing '$'")));
    }

    #[test]
    fn no_fix_gga() {
        let body = "GPGGA,123519,,,,,0,00,,,M,,M,,";
        let line = format!("${body}*{}", checksum(body.as_bytes()));
        let fix = to_fix(&parse_sentence(&line).unwrap().supported().unwrap()).unwrap();
        assert_eq!(fix.quality, FixQuality::NoFix);
        assert!(fix.position.is_none());
    }

    #[test]
    fn rmc_with_date() {
        let body = "GPRMC,123519,A,4807.038,N,01131.000,W,022.4,084.4,230394,003.1,W";
        let line = format!("${body}*{}", checksum(body.as_bytes()));
        let fix = to_fix(&parse_sentence(&line).unwrap().supported().unwrap()).unwrap();
        let p = fix.position.unwrap();
        assert!(p.lon < 0.0);
        assert_eq!(fix.altitude, None);
        assert_eq!(fix.timestamp, 764_426_119);
    }

    #[test]
    fn minutes_must_be_below_sixty() {
        let body = "GPGGA,123519,4860.000,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,";
        let line = format!("${body}*{}", checksum(body.as_bytes()));
        let s = parse_sentence(&line).unwrap().supported().unwrap();
        assert!(matches!(to_fix(&s), Err(NmeaError::MalformedNumber { field: "latitude", .. })));
    }

    #[test]
    fn serialize_round_trip() {
        let fix = GeoFix::new(48.1173, 11.516667, Some(545.4), FixQuality::StandardFix, 0).unwrap();
        let line = serialize_gga(&fix, 45_319.0).unwrap();
        assert!(line.ends_with("\r\n"));
        let star = line.rfind('*').unwrap();
        assert_eq!(&line[star + 1..star + 3], checksum(&line.as_bytes()[1..star]));
        let back = to_fix(&parse_sentence(&line).unwrap().supported().unwrap()).unwrap();
        let (p, q) = (back.position.unwrap(), fix.position.unwrap());
        assert!((p.lat - q.lat).abs() < 1e-6);
        assert!((p.lon - q.lon).abs() < 1e-6);
        assert_eq!(back.altitude, Some(545.4));
        assert_eq!(back.timestamp, 45_319);
    }

    #[test]
    fn zero_uses_north_east() {
        let fix = GeoFix::new(0.0, 0.0, None, FixQuality::StandardFix, 0).unwrap();
        let line = serialize_gga(&fix, 0.0).unwrap();
        assert!(line.contains(",0000.0000,N,00000.0000,E,"), "{line}");
    }

    #[test]
    fn minute_rounding_carries_into_degrees() {
        let fix = GeoFix::new(10.999_999_99, -20.999_999_99, None, FixQuality::StandardFix, 0).unwrap();
        let line = serialize_gga(&fix, 0.0).unwrap();
        assert!(line.contains(",1100.0000,N,02100.0000,W,"), "{line}");
    }

    #[test]
    fn no_fix_is_unserializable() {
        assert_eq!(serialize_gga(&GeoFix::no_fix(0), 0.0), Err(NmeaError::NoFixUnserializable));
    }
}
