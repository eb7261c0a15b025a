//! Adapter checkpoints: a text header listing the trainable index, then the
//! tensors as little-endian `f64` in index order. Base weights are not
//! stored; they are rebuilt from `(config, seed)`.
//!
//! ```text
//! dualtask-checkpoint 1
//! step 50
//! params 21
//! blocks.0.q.lora_a 4x16
//! ...
//! end
//! ```

use std::io::{BufRead, Write};

use super::{DenoiserParams, ModelError};
use crate::data::DataError;
use crate::tensor::Tensor;

const MAGIC: &str = "dualtask-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Loads the tensors into `params`, checking names and shapes.
    pub fn restore(&self, params: &mut DenoiserParams) -> Result<(), ModelError> {
        let expected: Vec<&str> = params
            .trainable_index()
            .iter()
            .map(|e| e.name.as_str())
            .collect();
        let found: Vec<&str> = self.names.iter().map(String::as_str).collect();
        if expected != found {
            return Err(ModelError::Domain(
                "checkpoint does not match the trainable index".into(),
            ));
        }
        params.set_trainable(self.tensors.clone())
    }
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::Data(DataError::Format(msg.into()))
}

pub fn write_checkpoint<W: Write>(
    params: &DenoiserParams,
    step: u64,
    mut w: W,
) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Data(e.into());
    let index = params.trainable_index();
    writeln!(w, "{MAGIC} {VERSION}\nstep {step}\nparams {}", index.len()).map_err(io)?;
    for e in index {
        let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        writeln!(w, "{} {}", e.name, shape.join("x")).map_err(io)?;
    }
    writeln!(w, "end").map_err(io)?;
    for t in params.trainable() {
        for x in t.data() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint, ModelError> {
    let mut next = || -> Result<String, ModelError> {
        let mut line = String::new();
        if r.read_line(&mut line)
            .map_err(|e| ModelError::Data(e.into()))?
            == 0
        {
            return Err(format_err("unexpected end of checkpoint header"));
        }
        Ok(line.trim_end().to_string())
    };
    let magic = next()?;
    if magic != format!("{MAGIC} {VERSION}") {
        return Err(format_err(format!(
            "unsupported checkpoint header `{magic}`"
        )));
    }
    let step: u64 = next()?
        .strip_prefix("step ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("bad step line"))?;
    let count: usize = next()?
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("bad params line"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next()?;
        let (name, shape) = line
            .rsplit_once(' ')
            .ok_or_else(|| format_err(format!("bad entry `{line}`")))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(|s| {
                s.parse()
                    .map_err(|_| format_err(format!("bad shape `{shape}`")))
            })
            .collect::<Result<_, _>>()?;
        entries.push((name.to_string(), shape));
    }
    if next()? != "end" {
        return Err(format_err("header not terminated by `end`"));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| format_err(format!("truncated payload: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
        names.push(name);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| ModelError::Data(e.into()))? != 0 {
        return Err(format_err("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        step,
        names,
        tensors,
    })
}
