use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use super::protocol::{
    self, ErrorMessage, GradRequestHeader, GradResponseHeader, Hello, PROTOCOL_VERSION, RESPONSE_SLOTS,
};
use super::{GuidanceBackend, GuidanceGrad, GuidanceRequest};
use crate::error::{Error, Result};
use crate::imaging::Image;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Client for a guidance server speaking the wire protocol over TCP or a
/// child process's stdin/stdout. Requests are strictly sequential.
pub struct RemoteBackend {
    name: String,
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("name", &self.name).finish()
    }
}

impl RemoteBackend {
    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Backend(format!("cannot connect to {addr}: {e}")))?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Self::handshake(
            Box::new(BufReader::new(reader)),
            Box::new(BufWriter::new(stream)),
            None,
        )
    }

    /// Spawns `program args...` and talks to it over its stdio.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(
            Box::new(BufReader::new(stdout)),
            Box::new(BufWriter::new(stdin)),
            Some(child),
        )
    }

    /// Runs the hello exchange over an existing pair of streams.
    pub fn handshake(
        mut reader: Box<dyn Read + Send>,
        mut writer: Box<dyn Write + Send>,
        child: Option<Child>,
    ) -> Result<Self> {
        Self::handshake_version(&mut reader, &mut writer, PROTOCOL_VERSION).map(|name| RemoteBackend {
            name,
            reader,
            writer,
            child,
        })
    }

    fn handshake_version(
        reader: &mut Box<dyn Read + Send>,
        writer: &mut Box<dyn Write + Send>,
        version: u32,
    ) -> Result<String> {
        protocol::write_frame(writer, &Hello::new(version, None), &[])?;
        let frame = protocol::read_frame(reader, |_| Ok(0))?
            .ok_or_else(|| Error::Protocol("server closed the connection during handshake".into()))?;
        match frame.msg() {
            "hello" => {
                let hello: Hello = frame.parse()?;
                if hello.version != version {
                    return Err(Error::VersionMismatch {
                        local: version,
                        remote: hello.version,
                    });
                }
                Ok(hello.name.unwrap_or_else(|| "remote".into()))
            }
            "error" => {
                let err: ErrorMessage = frame.parse()?;
                Err(Error::Protocol(format!("handshake rejected: {}", err.detail)))
            }
            other => Err(Error::Protocol(format!("expected hello, got {other:?}"))),
        }
    }

    #[cfg(test)]
    pub(crate) fn handshake_with_version(
        mut reader: Box<dyn Read + Send>,
        mut writer: Box<dyn Write + Send>,
        version: u32,
    ) -> Result<String> {
        Self::handshake_version(&mut reader, &mut writer, version)
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin ends the server loop.
            self.writer = Box::new(std::io::sink());
            let _ = child.wait();
        }
    }
}

impl GuidanceBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&mut self, req: &GuidanceRequest<'_>) -> Result<GuidanceGrad> {
        req.validate()?;
        let (h, w, c) = req.x.dims();
        let mut slots = vec!["x".to_string(), "eps".to_string()];
        let mut payload = Vec::with_capacity(h * w * c * 4 * 4);
        protocol::encode_f32(req.x.data().iter().copied(), &mut payload);
        protocol::encode_f32(req.eps.data().iter().copied(), &mut payload);
        if let Some(canny) = &req.condition.canny {
            let canny = canny.to_rgb();
            if (canny.height(), canny.width()) != (h, w) {
                return Err(Error::shape("canny slot", format!("{h}x{w}"), canny.shape_string()));
            }
            slots.push("canny".into());
            protocol::encode_f32(canny.data().iter().copied(), &mut payload);
        }
        if let Some(depth) = &req.condition.depth {
            if depth.dims() != (h, w, 1) {
                return Err(Error::shape("depth slot", format!("{h}x{w}x1"), depth.shape_string()));
            }
            slots.push("depth".into());
            protocol::encode_f32(depth.data().iter().copied(), &mut payload);
        }
        let header = GradRequestHeader {
            msg: "grad".into(),
            t: req.t,
            h,
            w,
            c,
            prompt: req.condition.prompt.clone(),
            uncond_prompt: req.condition.uncond_prompt.clone(),
            canny_scale: req.condition.canny_scale,
            depth_scale: req.condition.depth_scale,
            slots,
            payload_bytes: None,
        };
        protocol::write_frame(&mut self.writer, &header, &payload)?;

        let expected = 2 * h * w * c * 4;
        let frame = protocol::read_frame(&mut self.reader, |hdr| {
            Ok(match hdr.get("msg").and_then(|m| m.as_str()) {
                Some("grad") => expected,
                _ => 0,
            })
        })?
        .ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        match frame.msg() {
            "grad" => {}
            "error" => {
                let err: ErrorMessage = frame.parse()?;
                return Err(Error::Backend(err.detail));
            }
            other => return Err(Error::Protocol(format!("expected grad response, got {other:?}"))),
        }
        let resp: GradResponseHeader = frame.parse()?;
        if resp.slots != RESPONSE_SLOTS {
            return Err(Error::Protocol(format!(
                "response slots {:?}, expected {:?}",
                resp.slots, RESPONSE_SLOTS
            )));
        }
        let values = protocol::decode_f32(&frame.payload);
        let half = h * w * c;
        let to_image = |v: &[f32]| {
            let img = Image::from_vec(h, w, c, v.iter().map(|&x| f64::from(x)).collect())?;
            if !img.is_finite() {
                return Err(Error::Protocol("non-finite gradient in response".into()));
            }
            Ok(img)
        };
        Ok(GuidanceGrad {
            grad_noise: to_image(&values[..half])?,
            grad_sem: to_image(&values[half..])?,
            t: req.t,
        })
    }
}
