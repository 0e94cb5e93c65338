//! Line-oriented network description text.
//!
//! ```text
//! input 3 320 576
//! anchors 0.6,1.4 1.2,1
//! front 32 32 64
//! tinier Tin.1 16 128
//! maxpool
//! upsample from=Tin.4
//! concat Tin.3 Tin.4.up
//! detect det_low 5 20
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::detect::AnchorSet;
use crate::error::{Error, Result};
use crate::netgraph::{NetDescription, NetworkSpec, Stage};
use crate::tensor::Shape;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn numbers<const N: usize>(line: usize, keyword: &str, args: &[&str]) -> Result<[usize; N]> {
    if args.len() != N {
        return Err(parse_err(line, format!("`{keyword}` takes {N} values, found {}", args.len())));
    }
    let mut out = [0; N];
    for (o, a) in out.iter_mut().zip(args) {
        *o = a.parse().map_err(|_| parse_err(line, format!("`{a}` is not a non-negative integer")))?;
    }
    Ok(out)
}

fn name_arg(line: usize, keyword: &str, args: &[&str], count: usize) -> Result<()> {
    if args.len() != count {
        return Err(parse_err(line, format!("`{keyword}` takes {count} values, found {}", args.len())));
    }
    Ok(())
}

/// Parse description text. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str) -> Result<NetDescription> {
    let mut input = None;
    let mut anchors = None;
    let mut stages = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        let Some((&keyword, args)) = words.split_first() else { continue };
        match keyword {
            "input" => {
                if input.is_some() {
                    return Err(parse_err(line, "`input` appears twice"));
                }
                let [c, h, w] = numbers(line, keyword, args)?;
                input = Some(Shape::new(c, h, w));
            }
            "anchors" => {
                let priors = args
                    .iter()
                    .map(|a| {
                        let (w, h) = a.split_once(',').ok_or_else(|| parse_err(line, format!("anchor `{a}` is not `w,h`")))?;
                        let p = |s: &str| s.parse::<f64>().map_err(|_| parse_err(line, format!("`{s}` is not a number")));
                        Ok((p(w)?, p(h)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                anchors = Some(AnchorSet::new(priors).map_err(|e| parse_err(line, e.to_string()))?);
            }
            "front" => {
                let filters = numbers::<3>(line, keyword, args)?;
                stages.push(Stage::Front { filters });
            }
            "tinier" => {
                name_arg(line, keyword, args, 3)?;
                let [n1, n3] = numbers(line, keyword, &args[1..])?;
                stages.push(Stage::Tinier { name: args[0].to_string(), n1, n3 });
            }
            "maxpool" => {
                name_arg(line, keyword, args, 0)?;
                stages.push(Stage::MaxPool);
            }
            "upsample" => {
                name_arg(line, keyword, args, 1)?;
                let from = args[0].strip_prefix("from=").ok_or_else(|| parse_err(line, "expected `upsample from=<name>`"))?;
                stages.push(Stage::Upsample { from: from.to_string() });
            }
            "concat" => {
                name_arg(line, keyword, args, 2)?;
                stages.push(Stage::Concat { a: args[0].to_string(), b: args[1].to_string() });
            }
            "detect" => {
                name_arg(line, keyword, args, 3)?;
                let [boxes, classes] = numbers(line, keyword, &args[1..])?;
                stages.push(Stage::Detect { name: args[0].to_string(), boxes, classes });
            }
            other => return Err(parse_err(line, format!("unknown statement `{other}`"))),
        }
    }
    let input = input.ok_or_else(|| parse_err(text.lines().count().max(1), "missing `input` line"))?;
    Ok(NetDescription { input, anchors, stages })
}

/// Canonical text of a description; [`parse_config`] reads it back unchanged.
pub fn serialize_config(desc: &NetDescription) -> String {
    let mut out = String::new();
    let s = desc.input;
    writeln!(out, "input {} {} {}", s.channels, s.height, s.width).unwrap();
    if let Some(a) = &desc.anchors {
        let priors: Vec<String> = a.priors().iter().map(|(w, h)| format!("{w},{h}")).collect();
        writeln!(out, "anchors {}", priors.join(" ")).unwrap();
    }
    for stage in &desc.stages {
        match stage {
            Stage::Front { filters: [a, b, c] } => writeln!(out, "front {a} {b} {c}"),
            Stage::Tinier { name, n1, n3 } => writeln!(out, "tinier {name} {n1} {n3}"),
            Stage::MaxPool => writeln!(out, "maxpool"),
            Stage::Upsample { from } => writeln!(out, "upsample from={from}"),
            Stage::Concat { a, b } => writeln!(out, "concat {a} {b}"),
            Stage::Detect { name, boxes, classes } => writeln!(out, "detect {name} {boxes} {classes}"),
        }
        .unwrap();
    }
    out
}

/// Read and build a network from a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    parse_config(&std::fs::read_to_string(path)?)?.build()
}

pub fn save_config(desc: &NetDescription, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, serialize_config(desc))?)
}
