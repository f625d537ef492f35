//! Wire framing: a 4-byte big-endian body length followed by a UTF-8 JSON
//! body. Floats use shortest round-trip decimal text, so every `f64` decodes
//! to the bit pattern that was encoded; counts are plain JSON integers.
//!
//! ```text
//! [len: u32 BE] {"version":1,"round_id":1,"participant_id":0,"phase":"am_response",
//!                "payload":{"measure":{"kind":"classification","confusion":[[3,1],[0,0]]}}}
//! ```

use std::io::{ErrorKind, Read, Write};

use serde::Deserialize;

use super::{Body, ProtocolError, RoundMessage, SCHEMA_VERSION};

pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

#[derive(Deserialize)]
struct Header {
    version: u32,
    phase: String,
}

pub fn encode_message(msg: &RoundMessage) -> Result<Vec<u8>, ProtocolError> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize { size: body.len() });
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Decodes exactly one frame.
pub fn decode_message(frame: &[u8]) -> Result<RoundMessage, ProtocolError> {
    if frame.len() < 4 {
        return Err(ProtocolError::Truncated {
            declared: 4,
            available: frame.len(),
        });
    }
    let declared = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if declared > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize { size: declared });
    }
    let body = &frame[4..];
    if body.len() < declared {
        return Err(ProtocolError::Truncated {
            declared,
            available: body.len(),
        });
    }
    if body.len() > declared {
        return Err(ProtocolError::Malformed(format!(
            "{} trailing bytes after frame",
            body.len() - declared
        )));
    }
    decode_body(body)
}

fn decode_body(body: &[u8]) -> Result<RoundMessage, ProtocolError> {
    let header: Header =
        serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if header.version != SCHEMA_VERSION {
        return Err(ProtocolError::VersionMismatch {
            expected: SCHEMA_VERSION,
            found: header.version,
        });
    }
    if !Body::PHASES.contains(&header.phase.as_str()) {
        return Err(ProtocolError::UnknownPhase(header.phase));
    }
    serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn write_message<W: Write>(writer: &mut W, msg: &RoundMessage) -> Result<(), ProtocolError> {
    writer.write_all(&encode_message(msg)?)?;
    writer.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<RoundMessage>, ProtocolError> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    declared: 4,
                    available: filled,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let declared = u32::from_be_bytes(prefix) as usize;
    if declared > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize { size: declared });
    }
    let mut body = vec![0u8; declared];
    let mut filled = 0;
    while filled < declared {
        match reader.read(&mut body[filled..]) {
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    declared,
                    available: filled,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    decode_body(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::am::{AggregatableMeasure, ClassificationAM, GlobalStatistics, RegressionAM};
    use crate::metrics::ConfusionMatrix;

    fn am_message(rows: Vec<Vec<u64>>) -> RoundMessage {
        RoundMessage::new(
            1,
            Some(0),
            Body::AmResponse {
                measure: AggregatableMeasure::Classification(ClassificationAM {
                    confusion: ConfusionMatrix::from_rows(rows).unwrap(),
                }),
            },
        )
    }

    #[test]
    fn confusion_counts_survive_exactly() {
        let msg = am_message(vec![vec![3, 1], vec![0, 2]]);
        let frame = encode_message(&msg).unwrap();
        assert_eq!(
            u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize,
            frame.len() - 4
        );
        let back = decode_message(&frame).unwrap();
        assert_eq!(back, msg);
        let Body::AmResponse { measure: AggregatableMeasure::Classification(am) } = back.body else {
            panic!()
        };
        assert_eq!(am.confusion.rows(), vec![vec![3, 1], vec![0, 2]]);
    }

    #[test]
    fn floats_survive_bit_exactly() {
        let awkward = [0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 5e-324, 1.7976931348623157e308, -0.0, 2.5];
        for &x in &awkward {
            let msg = RoundMessage::new(
                9,
                Some(3),
                Body::AmResponse {
                    measure: AggregatableMeasure::Regression(RegressionAM {
                        rs_a: x,
                        rs_b: x * 0.7,
                        n: u64::MAX,
                        global_mean: -x,
                    }),
                },
            );
            let back = decode_message(&encode_message(&msg).unwrap()).unwrap();
            let (Body::AmResponse { measure: AggregatableMeasure::Regression(a) },
                 Body::AmResponse { measure: AggregatableMeasure::Regression(b) }) = (&msg.body, &back.body)
            else {
                panic!()
            };
            assert_eq!(a.rs_a.to_bits(), b.rs_a.to_bits());
            assert_eq!(a.rs_b.to_bits(), b.rs_b.to_bits());
            assert_eq!(a.global_mean.to_bits(), b.global_mean.to_bits());
            assert_eq!(b.n, u64::MAX);
        }
    }

    #[test]
    fn truncated_frame() {
        let mut frame = vec![0, 0, 0, 5];
        frame.extend_from_slice(b"{\"a");
        assert!(matches!(
            decode_message(&frame),
            Err(ProtocolError::Truncated { declared: 5, available: 3 })
        ));
        assert!(matches!(decode_message(&[0, 0]), Err(ProtocolError::Truncated { .. })));
        let mut reader: &[u8] = &frame;
        assert!(matches!(read_message(&mut reader), Err(ProtocolError::Truncated { .. })));
    }

    #[test]
    fn oversize_frame() {
        let frame = ((MAX_FRAME_BYTES + 1) as u32).to_be_bytes();
        assert!(matches!(decode_message(&frame), Err(ProtocolError::Oversize { .. })));
        let mut reader: &[u8] = &frame;
        assert!(matches!(read_message(&mut reader), Err(ProtocolError::Oversize { .. })));
    }

    fn frame_of(body: &str) -> Vec<u8> {
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body.as_bytes());
        frame
    }

    #[test]
    fn unknown_phase_and_version() {
        let unknown = frame_of(r#"{"version":1,"round_id":0,"participant_id":null,"phase":"gossip","payload":{}}"#);
        assert!(matches!(decode_message(&unknown), Err(ProtocolError::UnknownPhase(p)) if p == "gossip"));
        let future = frame_of(r#"{"version":2,"round_id":0,"participant_id":null,"phase":"error","payload":{"message":"x"}}"#);
        assert!(matches!(
            decode_message(&future),
            Err(ProtocolError::VersionMismatch { expected: 1, found: 2 })
        ));
        let mismatched = frame_of(r#"{"version":1,"round_id":0,"participant_id":null,"phase":"error","payload":{"values":[]}}"#);
        assert!(matches!(decode_message(&mismatched), Err(ProtocolError::Malformed(_))));
        assert!(matches!(decode_message(&frame_of("not json")), Err(ProtocolError::Malformed(_))));
    }

    #[test]
    fn stream_reads_consecutive_frames() {
        let a = RoundMessage::new(1, None, Body::AmRequest { specs: vec![], statistics: GlobalStatistics { global_mean: Some(2.5) } });
        let b = am_message(vec![vec![1]]);
        let mut buf = Vec::new();
        write_message(&mut buf, &a).unwrap();
        write_message(&mut buf, &b).unwrap();
        let mut reader: &[u8] = &buf;
        assert_eq!(read_message(&mut reader).unwrap(), Some(a));
        assert_eq!(read_message(&mut reader).unwrap(), Some(b));
        assert_eq!(read_message(&mut reader).unwrap(), None);
    }

    #[test]
    fn documented_layout() {
        let json = String::from_utf8(encode_message(&am_message(vec![vec![3, 1], vec![0, 0]])).unwrap()[4..].to_vec()).unwrap();
        assert_eq!(
            json,
            r#"{"version":1,"round_id":1,"participant_id":0,"phase":"am_response","payload":{"measure":{"kind":"classification","confusion":[[3,1],[0,0]]}}}"#
        );
    }
}
