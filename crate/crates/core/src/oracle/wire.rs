//! Length-prefixed frames: `u32` LE frame length, a compact JSON header ended by `\n`,
//! then raw little-endian `f32` payload bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::OracleError;
use crate::netcore::Tensor;

/// Frames above this size are refused before allocation.
pub const MAX_FRAME_BYTES: u32 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Hello,
    Forward,
    Backward,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub backward: bool,
}

fn f32_dtype() -> String {
    "f32".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub op: Op,
    pub id: u64,
    #[serde(default)]
    pub shape: Vec<usize>,
    /// Shape of the second payload (upstream gradient) in backward requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_shape: Option<Vec<usize>>,
    #[serde(default = "f32_dtype")]
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Capabilities>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Header {
    pub fn new(op: Op, id: u64) -> Self {
        Self {
            op,
            id,
            shape: Vec::new(),
            grad_shape: None,
            dtype: f32_dtype(),
            capabilities: None,
            code: None,
            message: None,
        }
    }

    /// Number of `f32` elements the payload must carry.
    pub fn payload_elements(&self) -> usize {
        let count = |s: &[usize]| if s.is_empty() { 0 } else { s.iter().product() };
        count(&self.shape) + self.grad_shape.as_deref().map_or(0, count)
    }
}

/// One decoded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMessage {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl OracleMessage {
    pub fn new(header: Header, tensors: &[&Tensor]) -> Self {
        let mut payload = Vec::with_capacity(tensors.iter().map(|t| t.len() * 4).sum());
        for t in tensors {
            payload.extend_from_slice(&t.to_le_bytes());
        }
        Self { header, payload }
    }

    pub fn error(id: u64, code: &str, message: impl Into<String>) -> Self {
        let mut h = Header::new(Op::Error, id);
        h.code = Some(code.to_string());
        h.message = Some(message.into());
        Self { header: h, payload: Vec::new() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let len = header.len() + 1 + self.payload.len();
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.push(b'\n');
        out.extend_from_slice(&self.payload);
        out
    }

    /// Splits the payload into the primary tensor and, for backward requests, the gradient.
    pub fn tensors(&self) -> Result<(Tensor, Option<Tensor>), OracleError> {
        let h = &self.header;
        if h.dtype != "f32" {
            return Err(OracleError::Protocol(format!("unsupported dtype {:?}", h.dtype)));
        }
        if self.payload.len() != h.payload_elements() * 4 {
            return Err(OracleError::Protocol(format!(
                "payload has {} bytes, shapes require {}",
                self.payload.len(),
                h.payload_elements() * 4
            )));
        }
        let first = h.shape.iter().product::<usize>() * 4;
        let x = Tensor::from_le_bytes(h.shape.clone(), &self.payload[..first])?;
        let g = match &h.grad_shape {
            Some(s) => Some(Tensor::from_le_bytes(s.clone(), &self.payload[first..])?),
            None => None,
        };
        Ok((x, g))
    }
}

/// Raw frame body as read from the stream, before header parsing.
pub fn read_frame(r: &mut impl Read) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("frame of {len} bytes too large")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn parse_frame(body: &[u8]) -> Result<OracleMessage, OracleError> {
    let nl = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| OracleError::Protocol("frame has no header terminator".into()))?;
    let header: Header = serde_json::from_slice(&body[..nl])
        .map_err(|e| OracleError::Protocol(format!("bad header: {e}")))?;
    Ok(OracleMessage { header, payload: body[nl + 1..].to_vec() })
}

pub fn write_message(w: &mut impl Write, msg: &OracleMessage) -> std::io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

pub fn read_message(r: &mut impl Read) -> Result<OracleMessage, OracleError> {
    let body = read_frame(r)?.ok_or_else(|| OracleError::Protocol("connection closed".into()))?;
    parse_frame(&body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_length_covers_header_and_payload() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32);
        let mut h = Header::new(Op::Forward, 7);
        h.shape = x.shape().to_vec();
        let bytes = OracleMessage::new(h, &[&x]).encode();
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        let nl = bytes[4..].iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(len - nl - 1, 16);
        assert_eq!(&bytes[bytes.len() - 4..], &3.0f32.to_le_bytes());
        let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + nl]).unwrap();
        assert_eq!(header["op"], "forward");
        assert_eq!(header["dtype"], "f32");
    }

    #[test]
    fn round_trip_backward_request() {
        let x = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f32 * 0.5);
        let g = Tensor::from_fn(&[1, 2, 2, 3], |i| -(i as f32));
        let mut h = Header::new(Op::Backward, 1);
        h.shape = x.shape().to_vec();
        h.grad_shape = Some(g.shape().to_vec());
        let msg = OracleMessage::new(h, &[&x, &g]);
        let back = read_message(&mut msg.encode().as_slice()).unwrap();
        assert_eq!(back, msg);
        let (x2, g2) = back.tensors().unwrap();
        assert!(x2.bits_eq(&x));
        assert!(g2.unwrap().bits_eq(&g));
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let mut h = Header::new(Op::Forward, 1);
        h.shape = vec![1, 1, 2, 2];
        let msg = OracleMessage { header: h, payload: vec![0; 12] };
        assert!(matches!(msg.tensors(), Err(OracleError::Protocol(_))));
    }

    #[test]
    fn unknown_header_keys_and_missing_terminator_are_rejected() {
        assert!(parse_frame(b"{\"op\":\"hello\",\"id\":1}").is_err());
        assert!(parse_frame(b"{\"op\":\"hello\",\"id\":1,\"extra\":2}\n").is_err());
        assert!(parse_frame(b"{\"op\":\"hello\",\"id\":1}\n").is_ok());
    }
}
