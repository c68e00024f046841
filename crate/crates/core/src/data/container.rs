//! The binary trial container.
//!
//! All integers and floats are little-endian:
//!
//! | field    | type          | notes                                   |
//! |----------|---------------|-----------------------------------------|
//! | magic    | 4 bytes       | `TRL1`                                  |
//! | version  | u16           | 1                                       |
//! | flags    | u16           | bit0 labels, bit1 session tags, bit2 participant id |
//! | n, E, T  | u32 each      | trials, channels, samples               |
//! | fs       | f32           | Hz                                      |
//! | C        | u16           | classes                                 |
//! | reserved | u16           | zero                                    |
//! | labels   | i16 × n       | if bit0                                 |
//! | sessions | u16 × n       | if bit1                                 |
//! | participant | u16        | if bit2                                 |
//! | payload  | f32 × n·E·T   | trial-major, then channel-major         |

use std::fs;
use std::path::Path;

use super::TrialSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TRL1";
pub const VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;
const FLAG_SESSIONS: u16 = 1 << 1;
const FLAG_PARTICIPANT: u16 = 1 << 2;
const HEADER_LEN: usize = 28;

/// Serializes a set. Samples are stored as `f32`.
pub fn encode_container(set: &TrialSet) -> Result<Vec<u8>> {
    let n = set.len();
    let mut flags = 0;
    if set.is_labeled() {
        flags |= FLAG_LABELS;
    }
    if set.sessions.is_some() {
        flags |= FLAG_SESSIONS;
    }
    if set.participant.is_some() {
        flags |= FLAG_PARTICIPANT;
    }
    let classes = u16::try_from(set.classes).map_err(|_| Error::Config(format!("{} classes", set.classes)))?;
    let mut out = Vec::with_capacity(HEADER_LEN + n * 4 + set.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for dim in [n, set.channels(), set.samples()] {
        let d = u32::try_from(dim).map_err(|_| Error::Config(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(set.fs as f32).to_le_bytes());
    out.extend_from_slice(&classes.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    if let Some(labels) = set.labels() {
        for &y in labels {
            // Labels are already < classes <= u16::MAX; i16 is the wire type.
            let y = i16::try_from(y).map_err(|_| Error::Config(format!("label {y} exceeds i16")))?;
            out.extend_from_slice(&y.to_le_bytes());
        }
    }
    if let Some(sessions) = &set.sessions {
        for s in sessions {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    if let Some(p) = set.participant {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for &v in set.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container. Nothing is returned unless the whole file is valid.
pub fn decode_container(bytes: &[u8]) -> Result<TrialSet> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = r.u16()?;
    let n = r.u32()? as usize;
    let e = r.u32()? as usize;
    let t = r.u32()? as usize;
    let fs = r.f32()?;
    let classes = r.u16()? as usize;
    let _reserved = r.u16()?;

    // Check the full length up front so a truncated file fails before any
    // field is interpreted.
    let mut expected = HEADER_LEN + n * e * t * 4;
    if flags & FLAG_LABELS != 0 {
        expected += 2 * n;
    }
    if flags & FLAG_SESSIONS != 0 {
        expected += 2 * n;
    }
    if flags & FLAG_PARTICIPANT != 0 {
        expected += 2;
    }
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }

    let labels = if flags & FLAG_LABELS != 0 {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            let y = i16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
            if y < 0 || y as usize >= classes {
                return Err(Error::ContainerLabel {
                    label: i64::from(y),
                    classes,
                });
            }
            l.push(y as usize);
        }
        Some(l)
    } else {
        None
    };
    let sessions = if flags & FLAG_SESSIONS != 0 {
        Some((0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let participant = if flags & FLAG_PARTICIPANT != 0 { Some(r.u16()?) } else { None };
    let payload = r.take(n * e * t * 4)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let mut set = TrialSet::new(e, t, data, labels, f64::from(fs), classes)?;
    if let Some(s) = sessions {
        set = set.with_sessions(s)?;
    }
    set.participant = participant;
    Ok(set)
}

pub fn write_container(set: &TrialSet, path: &Path) -> Result<()> {
    fs::write(path, encode_container(set)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<TrialSet> {
    decode_container(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrialSet {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| f64::from(i as f32 * 0.37 - 2.0)).collect();
        TrialSet::new(3, 4, data, Some(vec![1, 0]), 250.0, 2).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_container(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"TRL1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 2 + 24 * 4);
    }

    #[test]
    fn round_trip_with_tags() {
        let mut set = sample().with_sessions(vec![1, 2]).unwrap();
        set.participant = Some(7);
        assert_eq!(decode_container(&encode_container(&set).unwrap()).unwrap(), set);
        let unlabeled = sample().unlabeled();
        let back = decode_container(&encode_container(&unlabeled).unwrap()).unwrap();
        assert!(back.labels().is_none());
        assert_eq!(back, unlabeled);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_container(&sample()).unwrap();
        assert!(matches!(decode_container(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_container(&bad), Err(Error::UnsupportedVersion(9))));
        let mut bad = bytes;
        bad[HEADER_LEN] = 5;
        assert!(matches!(decode_container(&bad), Err(Error::ContainerLabel { label: 5, .. })));
    }
}
