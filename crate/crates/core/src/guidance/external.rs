//! Out-of-process denoisers over stdin/stdout.
//!
//! Each request is one JSON line followed by the NPY payloads it announces,
//! concatenated in order:
//!
//! ```text
//! {"t": 412, "alpha_bar": 0.31, "prompt": "...", "tensors": [{"name": "x_t_rgb", "bytes": 24704}, ...]}\n
//! <npy bytes>...
//! ```
//!
//! Tensors sent: `x_t_rgb`, `x_t_depth` (noised latents), `pose_map`, and the
//! clean `x0_rgb`, `x0_depth`, which a real model should ignore. The reply is
//! `{"status": "ok", "tensors": [...]}` announcing `eps_rgb` and `eps_depth`,
//! or `{"status": "error", "message": "..."}`. All tensors are `<f8`.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::image::{encode_npy, read_npy_from, Image, NpyDtype};
use crate::prompts::PromptTemplate;
use crate::{Error, Result};

use super::denoiser::{DenoiseRequest, Denoiser, NoisePrediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RequestHeader {
    pub t: u32,
    pub alpha_bar: f64,
    pub prompt: String,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplyHeader {
    pub status: String,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub tensors: Vec<TensorInfo>,
}

fn protocol(msg: impl std::fmt::Display) -> Error {
    Error::Denoiser(msg.to_string())
}

fn write_message(w: &mut impl Write, header: &impl Serialize, blobs: &[Vec<u8>]) -> Result<()> {
    let line = serde_json::to_string(header).map_err(protocol)?;
    w.write_all(line.as_bytes()).map_err(protocol)?;
    w.write_all(b"\n").map_err(protocol)?;
    for b in blobs {
        w.write_all(b).map_err(protocol)?;
    }
    w.flush().map_err(protocol)
}

/// Reads one header line; `None` at a clean end of stream.
fn read_header<T: for<'de> Deserialize<'de>>(r: &mut impl BufRead) -> Result<Option<T>> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(protocol)?;
    if n == 0 {
        return Ok(None);
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(protocol)
}

fn read_tensors(r: &mut impl Read, infos: &[TensorInfo]) -> Result<Vec<(String, Image)>> {
    infos
        .iter()
        .map(|info| {
            let mut buf = vec![0u8; info.bytes];
            r.read_exact(&mut buf).map_err(protocol)?;
            Ok((info.name.clone(), read_npy_from(&mut buf.as_slice())?))
        })
        .collect()
}

fn take(tensors: &mut Vec<(String, Image)>, name: &str) -> Result<Image> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| protocol(format!("missing tensor {name}")))?;
    Ok(tensors.swap_remove(pos).1)
}

fn blobs(named: &[(&str, &Image)]) -> (Vec<TensorInfo>, Vec<Vec<u8>>) {
    named
        .iter()
        .map(|(name, img)| {
            let bytes = encode_npy(img, NpyDtype::F64);
            (
                TensorInfo {
                    name: name.to_string(),
                    bytes: bytes.len(),
                },
                bytes,
            )
        })
        .unzip()
}

/// Denoiser living in a child process that speaks the protocol above.
pub struct ExternalDenoiser {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalDenoiser {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("empty denoiser command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Denoiser(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ExternalDenoiser {
            child,
            stdin,
            stdout,
        })
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved server exit on its own
        let _ = self.stdin.flush();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Denoiser for ExternalDenoiser {
    fn predict_noise(&mut self, req: &DenoiseRequest<'_>) -> Result<NoisePrediction> {
        let x_t_rgb = req.noised_rgb();
        let x_t_depth = req.noised_depth();
        let (tensors, data) = blobs(&[
            ("x_t_rgb", &x_t_rgb),
            ("x_t_depth", &x_t_depth),
            ("pose_map", req.pose_map),
            ("x0_rgb", req.rgb),
            ("x0_depth", req.depth),
        ]);
        let header = RequestHeader {
            t: req.t,
            alpha_bar: req.alpha_bar,
            prompt: req.prompt.sentence.clone(),
            tensors,
        };
        write_message(&mut self.stdin, &header, &data)?;
        let reply: ReplyHeader =
            read_header(&mut self.stdout)?.ok_or_else(|| protocol("denoiser closed its output"))?;
        if reply.status != "ok" {
            return Err(protocol(
                reply.message.unwrap_or_else(|| reply.status.clone()),
            ));
        }
        let mut got = read_tensors(&mut self.stdout, &reply.tensors)?;
        let eps_rgb = take(&mut got, "eps_rgb")?;
        let eps_depth = take(&mut got, "eps_depth")?;
        eps_rgb.ensure_shape(req.rgb, "eps_rgb")?;
        eps_depth.ensure_shape(req.depth, "eps_depth")?;
        Ok(NoisePrediction { eps_rgb, eps_depth })
    }
}

/// `(x_t − √ᾱ·x₀) / √(1−ᾱ)`: the noise that produced `x_t`.
fn recover_noise(x_t: &Image, x0: &Image, alpha_bar: f64) -> Image {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt().max(1e-300));
    let data = x_t
        .data
        .iter()
        .zip(&x0.data)
        .map(|(xt, x)| (xt - a * x) / b)
        .collect();
    Image {
        data,
        ..x_t.clone()
    }
}

fn serve_one(
    header: &RequestHeader,
    input: &mut impl Read,
    inner: &mut dyn Denoiser,
) -> Result<(Image, Image)> {
    let mut tensors = read_tensors(input, &header.tensors)?;
    let x_t_rgb = take(&mut tensors, "x_t_rgb")?;
    let x_t_depth = take(&mut tensors, "x_t_depth")?;
    let pose_map = take(&mut tensors, "pose_map")?;
    let x0_rgb = take(&mut tensors, "x0_rgb")?;
    let x0_depth = take(&mut tensors, "x0_depth")?;
    let noise_rgb = recover_noise(&x_t_rgb, &x0_rgb, header.alpha_bar);
    let noise_depth = recover_noise(&x_t_depth, &x0_depth, header.alpha_bar);
    let prompt = PromptTemplate {
        sentence: header.prompt.clone(),
        ..Default::default()
    };
    let req = DenoiseRequest {
        rgb: &x0_rgb,
        depth: &x0_depth,
        noise_rgb: &noise_rgb,
        noise_depth: &noise_depth,
        t: header.t,
        alpha_bar: header.alpha_bar,
        pose_map: &pose_map,
        prompt: &prompt,
    };
    let out = inner.predict_noise(&req)?;
    Ok((out.eps_rgb, out.eps_depth))
}

/// Answers requests until end of input, delegating to `inner` with the noise
/// recovered from the noised and clean latents.
pub fn serve(
    input: &mut impl BufRead,
    output: &mut impl Write,
    inner: &mut dyn Denoiser,
) -> Result<()> {
    while let Some(header) = read_header::<RequestHeader>(input)? {
        match serve_one(&header, input, inner) {
            Ok((eps_rgb, eps_depth)) => {
                let (tensors, data) = blobs(&[("eps_rgb", &eps_rgb), ("eps_depth", &eps_depth)]);
                let reply = ReplyHeader {
                    status: "ok".into(),
                    message: None,
                    tensors,
                };
                write_message(output, &reply, &data)?;
            }
            Err(e) => {
                let reply = ReplyHeader {
                    status: "error".into(),
                    message: Some(e.to_string()),
                    tensors: Vec::new(),
                };
                write_message(output, &reply, &[])?;
            }
        }
    }
    Ok(())
}
