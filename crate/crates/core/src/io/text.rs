//! Line-oriented numeric files: classifier models and sequence indexes.
//!
//! Model file:
//! ```text
//! bmlfg 1
//! features <n>
//! epochs <e>
//! seed <s>
//! weight <f> <fg> <bg> <mean> <scale>     (n lines, f = 0..n)
//! loss <epoch> <value>                    (one per training epoch)
//! ```
//! Sequence index:
//! ```text
//! bmlseq 1
//! past_count <p>
//! frame <k> <timestamp> <r00> <r01> <r02> <r10> <r11> <r12> <r20> <r21> <r22> <tx> <ty> <tz>
//! ```

use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use super::{format_f64, read_text, write_bytes, IoError};
use crate::geometry::RigidPose;
use crate::segmentation::FgBgModel;

struct Lines<'a> {
    it: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(s: &'a str) -> Self {
        Self {
            it: s.lines().enumerate(),
            line: 0,
        }
    }

    /// Next non-blank line, split into whitespace tokens.
    fn next(&mut self) -> Option<Vec<&'a str>> {
        for (i, l) in self.it.by_ref() {
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !toks.is_empty() {
                self.line = i + 1;
                return Some(toks);
            }
        }
        None
    }

    fn err(&self, msg: impl Into<String>) -> IoError {
        IoError::Syntax {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn expect(&mut self, tag: &str, arity: usize) -> Result<Vec<&'a str>, IoError> {
        let toks = self
            .next()
            .ok_or_else(|| self.err(format!("missing {tag:?} line")))?;
        if toks[0] != tag || toks.len() != arity + 1 {
            return Err(self.err(format!("expected {tag:?} with {arity} values")));
        }
        Ok(toks[1..].to_vec())
    }

    fn num<T: FromStr>(&self, tok: &str) -> Result<T, IoError> {
        tok.parse()
            .map_err(|_| self.err(format!("bad number {tok:?}")))
    }
}

fn header(l: &mut Lines, magic: &str) -> Result<(), IoError> {
    let v = l.expect(magic, 1)?;
    if v[0] != "1" {
        return Err(l.err(format!("unsupported {magic} version {}", v[0])));
    }
    Ok(())
}

pub fn encode_model(model: &FgBgModel) -> String {
    let mut s = format!(
        "bmlfg 1\nfeatures {}\nepochs {}\nseed {}\n",
        model.n_features(),
        model.epochs,
        model.seed
    );
    for (f, w) in model.weights.iter().enumerate() {
        s.push_str(&format!(
            "weight {f} {} {} {} {}\n",
            format_f64(w[0]),
            format_f64(w[1]),
            format_f64(model.mean[f]),
            format_f64(model.scale[f])
        ));
    }
    for (e, v) in model.loss_curve.iter().enumerate() {
        s.push_str(&format!("loss {e} {}\n", format_f64(*v)));
    }
    s
}

pub fn decode_model(text: &str) -> Result<FgBgModel, IoError> {
    let mut l = Lines::new(text);
    header(&mut l, "bmlfg")?;
    let n: usize = {
        let v = l.expect("features", 1)?;
        l.num(v[0])?
    };
    let epochs: usize = {
        let v = l.expect("epochs", 1)?;
        l.num(v[0])?
    };
    let seed: u64 = {
        let v = l.expect("seed", 1)?;
        l.num(v[0])?
    };
    let mut m = FgBgModel::zeros(n);
    m.epochs = epochs;
    m.seed = seed;
    for f in 0..n {
        let v = l.expect("weight", 5)?;
        if l.num::<usize>(v[0])? != f {
            return Err(l.err(format!("expected weight {f}")));
        }
        m.weights[f] = [l.num(v[1])?, l.num(v[2])?];
        m.mean[f] = l.num(v[3])?;
        m.scale[f] = l.num(v[4])?;
        if !(m.scale[f] > 0.0) {
            return Err(l.err("scale must be > 0"));
        }
    }
    while let Some(t) = l.next() {
        if t[0] != "loss" || t.len() != 3 || l.num::<usize>(t[1])? != m.loss_curve.len() {
            return Err(l.err(format!("expected loss {}", m.loss_curve.len())));
        }
        m.loss_curve.push(l.num(t[2])?);
    }
    if m.weights
        .iter()
        .flatten()
        .chain(&m.mean)
        .any(|v| !v.is_finite())
    {
        return Err(IoError::Content("model holds non-finite parameters".into()));
    }
    Ok(m)
}

pub fn read_model(path: &Path) -> Result<FgBgModel, IoError> {
    decode_model(&read_text(path)?)
}

pub fn write_model(model: &FgBgModel, path: &Path) -> Result<(), IoError> {
    write_bytes(path, encode_model(model).as_bytes())
}

/// Frame timestamps and sensor-to-world poses of a sequence.
pub fn encode_sequence(past_count: usize, frames: &[(f64, RigidPose)]) -> String {
    let mut s = format!("bmlseq 1\npast_count {past_count}\n");
    for (k, (t, pose)) in frames.iter().enumerate() {
        s.push_str(&format!("frame {k} {}", format_f64(*t)));
        let r = pose.rotation();
        for i in 0..3 {
            for j in 0..3 {
                s.push_str(&format!(" {}", format_f64(r[(i, j)])));
            }
        }
        for v in pose.translation().iter() {
            s.push_str(&format!(" {}", format_f64(*v)));
        }
        s.push('\n');
    }
    s
}

pub fn decode_sequence(text: &str) -> Result<(usize, Vec<(f64, RigidPose)>), IoError> {
    let mut l = Lines::new(text);
    header(&mut l, "bmlseq")?;
    let past: usize = {
        let v = l.expect("past_count", 1)?;
        l.num(v[0])?
    };
    let mut frames = Vec::new();
    while let Some(t) = l.next() {
        if t[0] != "frame" || t.len() != 15 || l.num::<usize>(t[1])? != frames.len() {
            return Err(l.err(format!("expected frame {} with 13 values", frames.len())));
        }
        let v: Vec<f64> = t[2..].iter().map(|x| l.num(x)).collect::<Result<_, _>>()?;
        let rot = Matrix3::from_row_slice(&v[1..10]);
        let pose = RigidPose::new(rot, Vector3::new(v[10], v[11], v[12]))
            .map_err(|e| l.err(e.to_string()))?;
        frames.push((v[0], pose));
    }
    Ok((past, frames))
}

pub fn read_sequence(path: &Path) -> Result<(usize, Vec<(f64, RigidPose)>), IoError> {
    decode_sequence(&read_text(path)?)
}

pub fn write_sequence(
    past_count: usize,
    frames: &[(f64, RigidPose)],
    path: &Path,
) -> Result<(), IoError> {
    write_bytes(path, encode_sequence(past_count, frames).as_bytes())
}
