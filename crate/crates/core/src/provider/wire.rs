//! Newline-delimited JSON protocol between the engine and an out-of-process
//! logit provider.
//!
//! ```text
//! -> {"op":"hello","proto":1}
//! <- {"op":"vocab","size":V,"eos":id,"meta":{"both":id,"video":id,"audio":id}}
//! -> {"op":"logits","video":"standard","audio":"perturbed","question":[..],"prefix":[..],"mode":"gen"}
//! -> {"op":"logits",...,"mode":"meta","prompt":p}
//! <- {"op":"logits","values":[V floats]}
//! <- {"op":"error","code":400,"message":"..."}
//! ```
//!
//! Floats use the shortest representation that round-trips to the same
//! `f64`, so the only source of cross-transport error is the provider itself.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider::{Context, LogitProvider, ModalityConfig, ModalityState, Mode};
use crate::vocab::{SpecialTokens, TokenId};

pub const PROTOCOL_VERSION: u32 = 1;

pub mod code {
    pub const MALFORMED: i64 = 400;
    pub const UNKNOWN_QUESTION: i64 = 404;
    pub const NO_HANDSHAKE: i64 = 409;
    pub const BAD_REQUEST: i64 = 422;
    pub const UNSUPPORTED_PROTO: i64 = 426;
    pub const PROVIDER: i64 = 500;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaIds {
    pub both: TokenId,
    pub video: TokenId,
    pub audio: TokenId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireMode {
    Gen,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello {
        proto: u32,
    },
    Logits {
        video: ModalityState,
        audio: ModalityState,
        question: Vec<TokenId>,
        prefix: Vec<TokenId>,
        mode: WireMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt: Option<u32>,
    },
}

impl Request {
    pub fn logits(cfg: ModalityConfig, ctx: &Context) -> Self {
        let (mode, prompt) = match ctx.mode {
            Mode::Generation => (WireMode::Gen, None),
            Mode::ModalityQuery(p) => (WireMode::Meta, Some(p)),
        };
        Request::Logits {
            video: cfg.video,
            audio: cfg.audio,
            question: ctx.question.clone(),
            prefix: ctx.prefix().to_vec(),
            mode,
            prompt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Response {
    Vocab {
        size: usize,
        eos: TokenId,
        meta: MetaIds,
        /// How the server realizes a perturbed modality.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        perturbation: Option<String>,
    },
    Logits {
        values: Vec<f64>,
    },
    Error {
        code: i64,
        message: String,
    },
}

impl Response {
    pub fn vocab(special: SpecialTokens, size: usize, perturbation: Option<String>) -> Self {
        Response::Vocab {
            size,
            eos: special.eos,
            meta: MetaIds {
                both: special.both,
                video: special.video,
                audio: special.audio,
            },
            perturbation,
        }
    }

    fn error(code: i64, message: impl Into<String>) -> Self {
        Response::Error {
            code,
            message: message.into(),
        }
    }
}

/// Serializes one frame as a single line (no embedded newlines).
pub fn encode<T: Serialize>(frame: &T) -> String {
    let mut s = serde_json::to_string(frame).expect("wire frames always serialize");
    s.push('\n');
    s
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Consecutive malformed frames tolerated before the connection closes.
    pub max_malformed: u32,
    pub perturbation: Option<String>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            max_malformed: 3,
            perturbation: Some("hard-gating".to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: u64,
    pub errors: u64,
    /// True when the loop ended because of repeated malformed frames.
    pub dropped: bool,
}

/// Answers requests from `input` on `output` until EOF.
///
/// `resolve` maps a question's token list to the id the provider knows it by.
/// Malformed frames get an error response and the connection stays open
/// until `max_malformed` of them arrive in a row.
pub fn serve<P, F, R, W>(
    provider: &P,
    resolve: F,
    input: R,
    mut output: W,
    options: &ServeOptions,
) -> Result<ServeStats>
where
    P: LogitProvider + ?Sized,
    F: Fn(&[TokenId]) -> Option<u64>,
    R: BufRead,
    W: Write,
{
    let mut stats = ServeStats::default();
    let mut greeted = false;
    let mut malformed_run = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.requests += 1;
        let response = match serde_json::from_str::<Request>(&line) {
            Err(e) => {
                malformed_run += 1;
                Response::error(code::MALFORMED, format!("malformed frame: {e}"))
            }
            Ok(req) => {
                malformed_run = 0;
                handle(provider, &resolve, req, &mut greeted, options)
            }
        };
        if matches!(response, Response::Error { .. }) {
            stats.errors += 1;
        }
        output.write_all(encode(&response).as_bytes())?;
        output.flush()?;
        if malformed_run >= options.max_malformed {
            stats.dropped = true;
            break;
        }
    }
    Ok(stats)
}

fn handle<P, F>(provider: &P, resolve: &F, req: Request, greeted: &mut bool, options: &ServeOptions) -> Response
where
    P: LogitProvider + ?Sized,
    F: Fn(&[TokenId]) -> Option<u64>,
{
    match req {
        Request::Hello { proto } if proto != PROTOCOL_VERSION => {
            Response::error(code::UNSUPPORTED_PROTO, format!("unsupported protocol {proto}"))
        }
        Request::Hello { .. } => {
            *greeted = true;
            let vocab = provider.vocab();
            Response::vocab(vocab.special(), vocab.len(), options.perturbation.clone())
        }
        Request::Logits { .. } if !*greeted => Response::error(code::NO_HANDSHAKE, "send hello first"),
        Request::Logits {
            video,
            audio,
            question,
            prefix,
            mode,
            prompt,
        } => {
            let Some(id) = resolve(&question) else {
                return Response::error(code::UNKNOWN_QUESTION, "unknown question");
            };
            let mode = match (mode, prompt) {
                (WireMode::Gen, _) => Mode::Generation,
                (WireMode::Meta, Some(p)) => Mode::ModalityQuery(p),
                (WireMode::Meta, None) => {
                    return Response::error(code::BAD_REQUEST, "meta mode needs a prompt")
                }
            };
            let eos = provider.vocab().eos();
            let ctx = match Context::generation(id, question).with_prefix(prefix, eos) {
                Ok(c) => Context { mode, ..c },
                Err(e) => return Response::error(code::BAD_REQUEST, e.to_string()),
            };
            match provider.logits(ModalityConfig::new(video, audio), &ctx) {
                Ok(v) => Response::Logits { values: v.into_inner() },
                Err(Error::UnknownQuestion(_)) => Response::error(code::UNKNOWN_QUESTION, "unknown question"),
                Err(e @ Error::InvalidInput(_)) => Response::error(code::BAD_REQUEST, e.to_string()),
                Err(e) => Response::error(code::PROVIDER, e.to_string()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::synth::{synth_logits, RandomSpecShape, SynthModelSpec, SynthProvider};
    use proptest::prelude::*;

    fn run(lines: &[&str]) -> (Vec<Response>, ServeStats) {
        let spec = SynthModelSpec::random(4, RandomSpecShape::default()).unwrap();
        let p = SynthProvider::new(spec.clone());
        let input = lines.join("\n");
        let mut out = Vec::new();
        let stats = serve(&p, |t| spec.question_by_tokens(t), input.as_bytes(), &mut out, &ServeOptions::default()).unwrap();
        let text = String::from_utf8(out).unwrap();
        let frames = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        (frames, stats)
    }

    #[test]
    fn request_shapes_match_the_protocol() {
        let ctx = Context::generation(3, vec![4, 5]);
        let gen = encode(&Request::logits(ModalityConfig::VIDEO_PERTURBED, &ctx));
        assert_eq!(
            gen,
            "{\"op\":\"logits\",\"video\":\"perturbed\",\"audio\":\"standard\",\"question\":[4,5],\"prefix\":[],\"mode\":\"gen\"}\n"
        );
        let meta = encode(&Request::logits(ModalityConfig::CLEAN, &ctx.modality_query(2)));
        assert!(meta.ends_with("\"mode\":\"meta\",\"prompt\":2}\n"));
        assert_eq!(encode(&Request::Hello { proto: 1 }), "{\"op\":\"hello\",\"proto\":1}\n");
    }

    #[test]
    fn handshake_then_logits() {
        let (frames, stats) = run(&[
            r#"{"op":"hello","proto":1}"#,
            r#"{"op":"logits","video":"standard","audio":"standard","question":[5],"prefix":[],"mode":"gen"}"#,
            r#"{"op":"logits","video":"standard","audio":"standard","question":[5],"prefix":[],"mode":"meta","prompt":0}"#,
        ]);
        assert_eq!(stats.errors, 0);
        match &frames[0] {
            Response::Vocab { size, eos, meta, .. } => {
                assert_eq!((*size, *eos), (16, 0));
                assert_eq!(*meta, MetaIds { both: 1, video: 2, audio: 3 });
            }
            other => panic!("unexpected {other:?}"),
        }
        let spec = SynthModelSpec::random(4, RandomSpecShape::default()).unwrap();
        let want = synth_logits(&spec, ModalityConfig::CLEAN, &spec.context(1).unwrap()).unwrap();
        assert_eq!(frames[1], Response::Logits { values: want.into_inner() });
        match &frames[2] {
            Response::Logits { values } => assert_eq!(values.len(), 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logits_before_hello_is_rejected() {
        let (frames, _) = run(&[
            r#"{"op":"logits","video":"standard","audio":"standard","question":[5],"prefix":[],"mode":"gen"}"#,
        ]);
        assert!(matches!(frames[0], Response::Error { code: code::NO_HANDSHAKE, .. }));
    }

    #[test]
    fn malformed_frames_keep_then_drop_the_connection() {
        let (frames, stats) = run(&["{nope", r#"{"op":"hello","proto":1}"#, "x", "y", "z", r#"{"op":"hello","proto":1}"#]);
        assert!(matches!(frames[0], Response::Error { code: code::MALFORMED, .. }));
        assert!(matches!(frames[1], Response::Vocab { .. }));
        assert_eq!(frames.len(), 5);
        assert!(stats.dropped);
    }

    #[test]
    fn unknown_question_and_missing_prompt() {
        let (frames, _) = run(&[
            r#"{"op":"hello","proto":1}"#,
            r#"{"op":"logits","video":"standard","audio":"standard","question":[15,15,15,15],"prefix":[],"mode":"gen"}"#,
            r#"{"op":"logits","video":"standard","audio":"standard","question":[5],"prefix":[],"mode":"meta"}"#,
        ]);
        assert!(matches!(frames[1], Response::Error { code: code::UNKNOWN_QUESTION, .. }));
        assert!(matches!(frames[2], Response::Error { code: code::BAD_REQUEST, .. }));
    }

    proptest! {
        #[test]
        fn floats_round_trip_bit_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 0..64)) {
            let frame = Response::Logits { values: values.clone() };
            let back: Response = serde_json::from_str(encode(&frame).trim_end()).unwrap();
            let Response::Logits { values: got } = back else { unreachable!() };
            prop_assert_eq!(got.len(), values.len());
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
