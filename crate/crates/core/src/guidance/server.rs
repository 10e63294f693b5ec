//! Server side of the guidance wire protocol and the `echo-delta` handler,
//! a pure-math mirror of [`DeltaOracle::evaluate_f32`] used to test clients.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpListener;

use super::protocol::{self, ErrorMessage, GradRequestHeader, GradResponseHeader, Hello, PROTOCOL_VERSION};
use super::{delta_terms_f32, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{self, Image};

/// Decoded grad request handed to a [`GradHandler`].
#[derive(Clone, Debug)]
pub struct GradCall {
    pub header: GradRequestHeader,
    /// Slot name to `f32` tensor.
    pub tensors: HashMap<String, Vec<f32>>,
}

pub trait GradHandler {
    fn name(&self) -> &str;

    /// Returns `(grad_noise, grad_sem)`, each `h * w * c` values.
    fn handle(&mut self, call: &GradCall) -> std::result::Result<(Vec<f32>, Vec<f32>), String>;
}

/// Answers `echo-delta` requests: delta-oracle gradients against targets
/// resized to the request size.
pub struct EchoDelta {
    target_cond: Image,
    target_uncond: Image,
    schedule: NoiseSchedule,
    cache: HashMap<(usize, usize), (Vec<f32>, Vec<f32>)>,
}

impl EchoDelta {
    pub fn new(target_cond: Image, target_uncond: Image, schedule: NoiseSchedule) -> Result<Self> {
        let target_cond = target_cond.to_rgb();
        let target_uncond = target_uncond.to_rgb();
        Ok(EchoDelta {
            target_cond,
            target_uncond,
            schedule,
            cache: HashMap::new(),
        })
    }

    fn targets(&mut self, h: usize, w: usize) -> &(Vec<f32>, Vec<f32>) {
        let (tc, tu) = (&self.target_cond, &self.target_uncond);
        self.cache.entry((h, w)).or_insert_with(|| {
            let f = |img: &Image| {
                imaging::bilinear_resize(img, h, w)
                    .data()
                    .iter()
                    .map(|&v| v as f32)
                    .collect::<Vec<f32>>()
            };
            (f(tc), f(tu))
        })
    }
}

impl GradHandler for EchoDelta {
    fn name(&self) -> &str {
        "echo-delta"
    }

    fn handle(&mut self, call: &GradCall) -> std::result::Result<(Vec<f32>, Vec<f32>), String> {
        let hdr = &call.header;
        if hdr.c != 3 {
            return Err(format!("echo-delta supports c = 3, got {}", hdr.c));
        }
        if hdr.t == 0 || hdr.t > self.schedule.steps() {
            return Err(format!("timestep {} outside 1..={}", hdr.t, self.schedule.steps()));
        }
        let (alpha, sigma) = (self.schedule.alpha(hdr.t) as f32, self.schedule.sigma(hdr.t) as f32);
        let x = &call.tensors["x"];
        let eps = &call.tensors["eps"];
        let (tc, tu) = self.targets(hdr.h, hdr.w);
        Ok(delta_terms_f32(x, eps, tc, tu, alpha, sigma))
    }
}

fn decode_call(header: GradRequestHeader, payload: &[u8]) -> std::result::Result<GradCall, String> {
    for required in ["x", "eps"] {
        if !header.slots.iter().any(|s| s == required) {
            return Err(format!("grad request is missing the {required:?} slot"));
        }
    }
    let mut tensors = HashMap::new();
    let mut offset = 0;
    for slot in &header.slots {
        if !matches!(slot.as_str(), "x" | "eps" | "canny" | "depth") {
            return Err(format!("unknown slot {slot:?}"));
        }
        let len = protocol::slot_channels(slot, header.c) * header.h * header.w * 4;
        let bytes = &payload[offset..offset + len];
        offset += len;
        if tensors.insert(slot.clone(), protocol::decode_f32(bytes)).is_some() {
            return Err(format!("duplicate slot {slot:?}"));
        }
    }
    Ok(GradCall { header, tensors })
}

/// Serves one connection until the client closes it. Malformed requests get
/// an error message; only framing failures end the session early.
pub fn serve_connection<R: Read, W: Write>(reader: R, writer: W, handler: &mut dyn GradHandler) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    loop {
        let frame = match protocol::read_frame(&mut reader, protocol::infer_request_payload) {
            Ok(Some(frame)) => frame,
            Ok(None) => return Ok(()),
            Err(e @ Error::Protocol(_)) => {
                let _ = protocol::write_frame(&mut writer, &ErrorMessage::new(e.to_string()), &[]);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        match frame.msg() {
            "hello" => match frame.parse::<Hello>() {
                Ok(hello) if hello.version == PROTOCOL_VERSION => {
                    let reply = Hello::new(PROTOCOL_VERSION, Some(handler.name().to_string()));
                    protocol::write_frame(&mut writer, &reply, &[])?;
                }
                Ok(hello) => {
                    let detail = format!(
                        "version mismatch: server speaks {PROTOCOL_VERSION}, client sent {}",
                        hello.version
                    );
                    protocol::write_frame(&mut writer, &ErrorMessage::new(detail), &[])?;
                }
                Err(e) => protocol::write_frame(&mut writer, &ErrorMessage::new(e.to_string()), &[])?,
            },
            "grad" => {
                let result = frame
                    .parse::<GradRequestHeader>()
                    .map_err(|e| e.to_string())
                    .and_then(|hdr| decode_call(hdr, &frame.payload))
                    .and_then(|call| handler.handle(&call));
                match result {
                    Ok((noise, sem)) => {
                        let mut payload = Vec::with_capacity((noise.len() + sem.len()) * 4);
                        for v in noise.iter().chain(&sem) {
                            payload.extend_from_slice(&v.to_le_bytes());
                        }
                        let header = GradResponseHeader {
                            msg: "grad".into(),
                            slots: protocol::RESPONSE_SLOTS.iter().map(|s| s.to_string()).collect(),
                            payload_bytes: None,
                        };
                        protocol::write_frame(&mut writer, &header, &payload)?;
                    }
                    Err(detail) => protocol::write_frame(&mut writer, &ErrorMessage::new(detail), &[])?,
                }
            }
            other => {
                let detail = format!("unknown message {other:?}");
                protocol::write_frame(&mut writer, &ErrorMessage::new(detail), &[])?;
            }
        }
    }
}

/// Accepts connections one at a time, forever.
pub fn serve_tcp(listener: TcpListener, handler: &mut dyn GradHandler) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let peer = stream.peer_addr().ok();
        log::info!("client connected: {peer:?}");
        let reader = stream.try_clone()?;
        if let Err(e) = serve_connection(reader, stream, handler) {
            log::warn!("session with {peer:?} ended: {e}");
        }
    }
    Ok(())
}
