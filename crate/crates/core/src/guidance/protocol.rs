//! Guidance wire protocol, version 1.
//!
//! Every message is a frame: a 4-byte little-endian `u32` giving the length
//! of a UTF-8 JSON header, the header itself, then raw payload bytes. The
//! payload length follows from the header (tensor slots and `h`, `w`);
//! writers from this crate also put it in a `payload_bytes` header field,
//! which readers check when present.
//!
//! Tensors are row-major little-endian `f32`, `h x w x 3` for every slot
//! except `depth`, which is `h x w x 1`.
//!
//! ```text
//! client -> {"msg":"hello","version":1}
//! server <- {"msg":"hello","version":1,"name":"..."}
//! client -> {"msg":"grad","t":..,"h":..,"w":..,"c":3,"prompt":..,"uncond_prompt":..,
//!            "canny_scale":..,"depth_scale":..,"slots":["x","eps",("canny"),("depth")]} + tensors
//! server <- {"msg":"grad","slots":["grad_noise","grad_sem"]} + 2 tensors
//! either <- {"msg":"error","detail":"..."}
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

const MAX_HEADER_BYTES: usize = 1 << 20;
const MAX_PAYLOAD_BYTES: usize = 1 << 31;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub msg: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Hello {
    pub fn new(version: u32, name: Option<String>) -> Self {
        Hello {
            msg: "hello".into(),
            version,
            name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRequestHeader {
    pub msg: String,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub prompt: String,
    pub uncond_prompt: String,
    pub canny_scale: f64,
    pub depth_scale: f64,
    pub slots: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_bytes: Option<usize>,
}

impl GradRequestHeader {
    /// Bytes of tensor payload implied by the slots.
    pub fn expected_payload(&self) -> usize {
        self.slots
            .iter()
            .map(|s| slot_channels(s, self.c) * self.h * self.w * 4)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradResponseHeader {
    pub msg: String,
    pub slots: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_bytes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub msg: String,
    pub detail: String,
}

impl ErrorMessage {
    pub fn new(detail: impl Into<String>) -> Self {
        ErrorMessage {
            msg: "error".into(),
            detail: detail.into(),
        }
    }
}

pub const RESPONSE_SLOTS: [&str; 2] = ["grad_noise", "grad_sem"];

pub fn slot_channels(slot: &str, c: usize) -> usize {
    if slot == "depth" {
        1
    } else {
        c
    }
}

/// A decoded frame before its header is interpreted.
#[derive(Clone, Debug)]
pub struct Frame {
    pub header: Value,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn msg(&self) -> &str {
        self.header.get("msg").and_then(Value::as_str).unwrap_or("")
    }

    pub fn parse<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.clone())
            .map_err(|e| Error::Protocol(format!("bad {:?} header: {e}", self.msg())))
    }
}

/// Writes one frame. `payload_bytes` is added to object headers.
pub fn write_frame<W: Write + ?Sized, H: Serialize>(w: &mut W, header: &H, payload: &[u8]) -> Result<()> {
    let mut value = serde_json::to_value(header)?;
    if let Value::Object(map) = &mut value {
        if !payload.is_empty() || map.get("msg").and_then(Value::as_str) == Some("grad") {
            map.insert("payload_bytes".into(), Value::from(payload.len()));
        }
    }
    let text = serde_json::to_vec(&value)?;
    let len = u32::try_from(text.len()).map_err(|_| Error::Protocol("header too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&text)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `None` on a clean end of stream before any byte.
/// `infer_payload` gives the payload size for headers that do not state it.
pub fn read_frame<R: Read + ?Sized>(
    r: &mut R,
    infer_payload: impl FnOnce(&Value) -> Result<usize>,
) -> Result<Option<Frame>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside frame length".into())),
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header_len = u32::from_le_bytes(len) as usize;
    if header_len == 0 || header_len > MAX_HEADER_BYTES {
        return Err(Error::Protocol(format!("invalid header length {header_len}")));
    }
    let mut text = vec![0u8; header_len];
    read_exact(r, &mut text, "header")?;
    let header: Value = serde_json::from_slice(&text)
        .map_err(|e| Error::Protocol(format!("header is not JSON: {e}")))?;
    if !header.is_object() {
        return Err(Error::Protocol("header is not a JSON object".into()));
    }

    let inferred = infer_payload(&header)?;
    let stated = header.get("payload_bytes").and_then(Value::as_u64).map(|v| v as usize);
    if let Some(stated) = stated {
        if stated != inferred {
            return Err(Error::Protocol(format!(
                "payload length {stated} does not match the {inferred} bytes implied by the header"
            )));
        }
    }
    if inferred > MAX_PAYLOAD_BYTES {
        return Err(Error::Protocol(format!("payload of {inferred} bytes too large")));
    }
    let mut payload = vec![0u8; inferred];
    read_exact(r, &mut payload, "payload")?;
    Ok(Some(Frame { header, payload }))
}

fn read_exact<R: Read + ?Sized>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Protocol(format!("stream ended inside {what} ({} bytes expected)", buf.len()))
        } else {
            Error::Stream(e)
        }
    })
}

/// Payload size implied by a request header (client to server direction).
pub fn infer_request_payload(header: &Value) -> Result<usize> {
    match header.get("msg").and_then(Value::as_str) {
        Some("grad") => {
            let req: GradRequestHeader = serde_json::from_value(header.clone())
                .map_err(|e| Error::Protocol(format!("bad grad header: {e}")))?;
            Ok(req.expected_payload())
        }
        _ => Ok(header.get("payload_bytes").and_then(Value::as_u64).unwrap_or(0) as usize),
    }
}

pub fn encode_f32(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn hello_frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Hello::new(1, None), &[]).unwrap();
        let header_len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(buf.len(), 4 + header_len);
        let text = std::str::from_utf8(&buf[4..]).unwrap();
        assert_eq!(text, r#"{"msg":"hello","version":1}"#);
        let frame = read_frame(&mut Cursor::new(buf), infer_request_payload).unwrap().unwrap();
        assert_eq!(frame.parse::<Hello>().unwrap(), Hello::new(1, None));
    }

    #[test]
    fn grad_payload_size_follows_slots() {
        let header = GradRequestHeader {
            msg: "grad".into(),
            t: 10,
            h: 2,
            w: 3,
            c: 3,
            prompt: String::new(),
            uncond_prompt: String::new(),
            canny_scale: 0.35,
            depth_scale: 0.35,
            slots: vec!["x".into(), "eps".into(), "depth".into()],
            payload_bytes: None,
        };
        assert_eq!(header.expected_payload(), (18 + 18 + 6) * 4);
        let payload = vec![7u8; header.expected_payload()];
        let mut buf = Vec::new();
        write_frame(&mut buf, &header, &payload).unwrap();
        let frame = read_frame(&mut Cursor::new(&buf), infer_request_payload).unwrap().unwrap();
        assert_eq!(frame.payload, payload);

        // Truncated payload.
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            read_frame(&mut Cursor::new(cut), infer_request_payload),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn stated_length_mismatch_is_protocol_error() {
        let mut buf = Vec::new();
        let header = serde_json::json!({"msg":"grad","slots":["grad_noise","grad_sem"],"payload_bytes":8});
        write_frame(&mut buf, &header, &[0u8; 8]).unwrap();
        let err = read_frame(&mut Cursor::new(buf), |_| Ok(16)).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn empty_stream_is_none() {
        assert!(read_frame(&mut Cursor::new(Vec::<u8>::new()), infer_request_payload)
            .unwrap()
            .is_none());
        assert!(read_frame(&mut Cursor::new(vec![1u8, 0]), infer_request_payload).is_err());
    }

    #[test]
    fn f32_codec() {
        let mut buf = Vec::new();
        encode_f32([1.0, -0.5, 3.25], &mut buf);
        assert_eq!(decode_f32(&buf), vec![1.0f32, -0.5, 3.25]);
    }
}
