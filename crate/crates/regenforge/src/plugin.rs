//! Subprocess window classifiers speaking line-delimited JSON.
//!
//! The plugin writes `{"hello": {"classes": k}}` on start-up, then answers
//! each `{"id": .., "png_b64": ..}` request with `{"id": .., "probs": [..]}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use regenforge_core::pseudo::{ClassifierError, StubClassifier, StubRule, WindowClassifier, WindowRequest};
use regenforge_core::RgbRaster;

use crate::error::{Error, Result};
use crate::io::raster_png_bytes;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize, Deserialize)]
struct Hello {
    hello: HelloBody,
}

#[derive(Serialize, Deserialize)]
struct HelloBody {
    classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Request {
    id: u64,
    png_b64: String,
}

#[derive(Serialize, Deserialize)]
struct Response {
    id: u64,
    probs: Vec<f64>,
}

pub struct PluginClassifier {
    cmd: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    classes: usize,
    timeout: Duration,
    next_id: u64,
}

impl PluginClassifier {
    /// Starts `cmd` under `sh -c` and waits for the handshake.
    pub fn spawn(cmd: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Plugin(format!("cannot start '{cmd}': {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut plugin = PluginClassifier {
            cmd: cmd.into(),
            child,
            stdin,
            lines: rx,
            classes: 0,
            timeout,
            next_id: 0,
        };
        let line = plugin
            .read_line(Instant::now() + timeout)
            .map_err(|e| Error::Plugin(format!("'{cmd}' handshake: {}", e.0)))?;
        let hello: Hello = serde_json::from_str(&line)
            .map_err(|e| Error::Plugin(format!("'{cmd}' sent a bad handshake '{line}': {e}")))?;
        if hello.hello.classes == 0 {
            return Err(Error::Plugin(format!("'{cmd}' announced zero classes")));
        }
        plugin.classes = hello.hello.classes;
        Ok(plugin)
    }

    pub fn command(&self) -> &str {
        &self.cmd
    }

    fn read_line(&mut self, deadline: Instant) -> std::result::Result<String, ClassifierError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(wait) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ClassifierError(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(ClassifierError(format!("no response within {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(ClassifierError("plugin closed its output".into())),
        }
    }

    fn send(&mut self, crop: &RgbRaster) -> std::result::Result<u64, ClassifierError> {
        let id = self.next_id;
        self.next_id += 1;
        let req = Request {
            id,
            png_b64: B64.encode(raster_png_bytes(crop)),
        };
        let mut line = serde_json::to_string(&req).expect("request serialises");
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| ClassifierError("plugin input closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| ClassifierError(format!("write failed: {e}")))?;
        Ok(id)
    }
}

impl WindowClassifier for PluginClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn classify(&mut self, request: &WindowRequest<'_>) -> std::result::Result<Vec<f64>, ClassifierError> {
        let id = self.send(request.crop)?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let line = self.read_line(deadline)?;
            let resp: Response =
                serde_json::from_str(&line).map_err(|e| ClassifierError(format!("bad response '{line}': {e}")))?;
            if resp.id == id {
                return Ok(resp.probs);
            }
            // Late answer to a request that already timed out.
            log::warn!("{}: skipping response for stale request {}", self.cmd, resp.id);
        }
    }
}

impl Drop for PluginClassifier {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let deadline = Instant::now() + Duration::from_millis(200);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Parses a stub rule: `constant:C` or `mean:THRESHOLD:BELOW:ABOVE`.
/// `quadrant:A,B,C,D` is accepted in-process only since the wire protocol
/// carries no window position.
pub fn parse_stub_rule(text: &str) -> Result<StubRule> {
    let bad = || Error::Usage(format!("invalid stub rule '{text}'"));
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        ["constant", c] => Ok(StubRule::Constant { class: num(c)? }),
        ["mean", t, below, above] => Ok(StubRule::ColourMeanThreshold {
            threshold: t.parse().map_err(|_| bad())?,
            below: num(below)?,
            above: num(above)?,
        }),
        ["quadrant", list] => {
            let v: Vec<usize> = list.split(',').map(num).collect::<Result<_>>()?;
            let classes: [usize; 4] = v.try_into().map_err(|_| bad())?;
            Ok(StubRule::CentroidQuadrant { classes })
        }
        _ => Err(bad()),
    }
}

/// Misbehaviour the stub plugin can be asked to show.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, clap::ValueEnum)]
pub enum StubFault {
    #[default]
    None,
    /// Answers with one probability too few.
    BadLength,
    /// Never answers requests.
    Silent,
    /// Answers every request twice, the first time under a wrong id.
    StaleIds,
}

/// Serves the plugin protocol on the given streams using a stub rule.
pub fn run_stub_plugin(
    classes: usize,
    rule: StubRule,
    fault: StubFault,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let io_err = |e| Error::io("<stdout>", e);
    if matches!(rule, StubRule::CentroidQuadrant { .. }) {
        return Err(Error::Usage("quadrant rules need window positions, not available to plugins".into()));
    }
    let mut stub = StubClassifier::new(classes, rule);
    let hello = serde_json::to_string(&Hello {
        hello: HelloBody { classes },
    })
    .expect("hello serialises");
    writeln!(output, "{hello}").and_then(|_| output.flush()).map_err(io_err)?;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = serde_json::from_str(&line).map_err(|e| Error::Plugin(format!("bad request: {e}")))?;
        let bytes = B64
            .decode(&req.png_b64)
            .map_err(|e| Error::Plugin(format!("bad base64: {e}")))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::Plugin(format!("bad png: {e}")))?
            .to_rgb8();
        let crop = RgbRaster::from_rgb_bytes(img.width() as usize, img.height() as usize, img.as_raw())?;
        let request = WindowRequest {
            window: regenforge_core::pseudo::Window {
                x: 0,
                y: 0,
                width: crop.width(),
                height: crop.height(),
            },
            image_width: crop.width(),
            image_height: crop.height(),
            crop: &crop,
        };
        let mut probs = stub.classify(&request).map_err(|e| Error::Plugin(e.0))?;
        match fault {
            StubFault::None => {}
            StubFault::BadLength => {
                probs.pop();
            }
            StubFault::Silent => continue,
            StubFault::StaleIds => {
                let stale = serde_json::to_string(&Response {
                    id: req.id.wrapping_add(1000),
                    probs: probs.clone(),
                })
                .expect("response serialises");
                writeln!(output, "{stale}").map_err(io_err)?;
            }
        }
        let resp = serde_json::to_string(&Response { id: req.id, probs }).expect("response serialises");
        writeln!(output, "{resp}").and_then(|_| output.flush()).map_err(io_err)?;
    }
    Ok(())
}
