//! Manager attention maps and their plain-text export.
//!
//! ```text
//! attention layers=2 heads=4 frames=5
//! layer 0 head 0
//! <LC rows of LC space-separated weights>
//! layer 0 head 1
//! ...
//! ```

use std::fmt::Write as _;

use crate::autograd::Tape;
use crate::context::EncodedContext;
use crate::error::{CatpError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ManagerModel;

/// Attention weights of every encoder layer and head, each `LC × LC`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub frames: usize,
    /// Indexed `[layer][head]`.
    pub weights: Vec<Vec<Tensor<f64>>>,
}

pub fn extract_attention<T: Scalar>(manager: &ManagerModel<T>, ctx: &EncodedContext<T>) -> Result<AttentionMaps> {
    let mut tape = Tape::inference();
    let p = manager.params().bind(&mut tape);
    let out = manager.forward(&mut tape, &p, ctx)?;
    let weights: Vec<Vec<Tensor<f64>>> = out
        .attention
        .iter()
        .map(|layer| layer.iter().map(|&w| tape.value(w).cast()).collect())
        .collect();
    Ok(AttentionMaps {
        layers: weights.len(),
        heads: manager.config().heads,
        frames: ctx.frames(),
        weights,
    })
}

impl AttentionMaps {
    pub fn to_text(&self) -> String {
        let mut s = format!("attention layers={} heads={} frames={}\n", self.layers, self.heads, self.frames);
        for (l, layer) in self.weights.iter().enumerate() {
            for (h, w) in layer.iter().enumerate() {
                let _ = writeln!(s, "layer {l} head {h}");
                for r in 0..w.rows() {
                    let row: Vec<String> = w.row(r).iter().map(|x| format!("{x:e}")).collect();
                    s.push_str(&row.join(" "));
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| CatpError::data(format!("attention file: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut dims = [None; 3];
        let mut parts = header.split_whitespace();
        if parts.next() != Some("attention") {
            return Err(bad("missing header"));
        }
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("malformed header"))?;
            let v: usize = value.parse().map_err(|_| bad("malformed header"))?;
            match key {
                "layers" => dims[0] = Some(v),
                "heads" => dims[1] = Some(v),
                "frames" => dims[2] = Some(v),
                _ => return Err(bad(&format!("unknown header key '{key}'"))),
            }
        }
        let [Some(layers), Some(heads), Some(frames)] = dims else {
            return Err(bad("incomplete header"));
        };
        let mut weights = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut layer = Vec::with_capacity(heads);
            for h in 0..heads {
                let expect = format!("layer {l} head {h}");
                if lines.next().map(str::trim) != Some(expect.as_str()) {
                    return Err(bad(&format!("expected '{expect}'")));
                }
                let mut data = Vec::with_capacity(frames * frames);
                for _ in 0..frames {
                    let row = lines.next().ok_or_else(|| bad("truncated"))?;
                    let vals = row
                        .split_whitespace()
                        .map(|x| x.parse::<f64>().map_err(|_| bad(&format!("bad number '{x}'"))))
                        .collect::<Result<Vec<_>>>()?;
                    if vals.len() != frames {
                        return Err(bad("row length does not match frames"));
                    }
                    data.extend(vals);
                }
                layer.push(Tensor::from_vec(frames, frames, data));
            }
            weights.push(layer);
        }
        Ok(Self {
            layers,
            heads,
            frames,
            weights,
        })
    }
}
