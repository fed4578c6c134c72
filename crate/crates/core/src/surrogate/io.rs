//! Text model files.
//!
//! ```text
//! opflab-surrogate 1
//! case <sha-256 of the case's native text>
//! activation relu
//! dims 6 60 60 12
//! angle_box -1.5707963267948966 1.5707963267948966
//! input_shift <2N values>
//! input_scale <2N values>
//! layer 0
//! <out rows of `in` weights>
//! <one row of `out` biases>
//! layer 1
//! ...
//! end
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! back reproduces every parameter bit for bit.

use std::fmt::Write as _;

use super::{param_count, Activation, SurrogateError, SurrogateModel};
use crate::network::NetworkCase;

pub const MAGIC: &str = "opflab-surrogate";
pub const FORMAT_VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:?}").expect("writing to a String");
    }
    s
}

pub fn serialize(model: &SurrogateModel) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("{MAGIC} {FORMAT_VERSION}"));
    line(format!("case {}", model.case_digest));
    line(format!("activation {}", model.activation));
    let dims: Vec<String> = model.layer_dims.iter().map(|d| d.to_string()).collect();
    line(format!("dims {}", dims.join(" ")));
    line(format!("angle_box {:?} {:?}", model.angle_box.0, model.angle_box.1));
    line(format!("input_shift {}", join(&model.input_shift)));
    line(format!("input_scale {}", join(&model.input_scale)));
    for (l, (w_at, b_at)) in model.layer_offsets().into_iter().enumerate() {
        let (d_in, d_out) = (model.layer_dims[l], model.layer_dims[l + 1]);
        line(format!("layer {l}"));
        for r in 0..d_out {
            line(join(&model.params[w_at + r * d_in..w_at + (r + 1) * d_in]));
        }
        line(join(&model.params[b_at..b_at + d_out]));
    }
    line("end".to_string());
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, expecting: &str) -> Result<&'a str, SurrogateError> {
        match self.inner.next() {
            Some((i, text)) => {
                self.line = i + 1;
                Ok(text.trim())
            }
            None => Err(SurrogateError::Truncated(format!("expected {expecting}"))),
        }
    }

    fn err(&self, message: impl Into<String>) -> SurrogateError {
        SurrogateError::Format {
            line: self.line,
            message: message.into(),
        }
    }

    /// Reads `key v1 v2 ...` and returns the values.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>, SurrogateError> {
        let text = self.next(key)?;
        let mut fields = text.split_whitespace();
        if fields.next() != Some(key) {
            return Err(self.err(format!("expected '{key}'")));
        }
        Ok(fields.collect())
    }

    fn floats(&self, fields: &[&str], expected: usize, what: &str) -> Result<Vec<f64>, SurrogateError> {
        if fields.len() != expected {
            return Err(self.err(format!("{what}: expected {expected} values, found {}", fields.len())));
        }
        fields
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| self.err(format!("{what}: bad number '{f}'"))))
            .collect()
    }

    fn row(&mut self, expected: usize, what: &str) -> Result<Vec<f64>, SurrogateError> {
        let text = self.next(what)?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        self.floats(&fields, expected, what)
    }
}

/// Reads a model written by [`serialize`] for `case`. Any error leaves no
/// partial model behind.
pub fn deserialize(text: &str, case: &NetworkCase) -> Result<SurrogateModel, SurrogateError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };

    let header = lines.keyed(MAGIC)?;
    let version: u32 = match header.as_slice() {
        [v] => v.parse().map_err(|_| lines.err("bad format version"))?,
        _ => return Err(lines.err("expected a single format version")),
    };
    if version != FORMAT_VERSION {
        return Err(SurrogateError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    let digest = match lines.keyed("case")?.as_slice() {
        [d] => d.to_string(),
        _ => return Err(lines.err("expected one case digest")),
    };
    let expected_digest = case.digest();
    if digest != expected_digest {
        return Err(SurrogateError::DigestMismatch {
            expected: expected_digest,
            found: digest,
        });
    }

    let activation: Activation = match lines.keyed("activation")?.as_slice() {
        [a] => a.parse().map_err(|e: String| lines.err(e))?,
        _ => return Err(lines.err("expected one activation name")),
    };

    let dims: Vec<usize> = lines
        .keyed("dims")?
        .iter()
        .map(|d| d.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| lines.err("bad layer width"))?;
    let n = case.bus_count();
    if dims.len() < 3 || dims[0] != 2 * n || dims[dims.len() - 1] != 4 * n || dims.contains(&0) {
        return Err(lines.err(format!(
            "layer dims {dims:?} do not fit a {n}-bus case with at least one hidden layer"
        )));
    }

    let ab = lines.keyed("angle_box")?;
    let ab = lines.floats(&ab, 2, "angle_box")?;
    let shift = lines.keyed("input_shift")?;
    let shift = lines.floats(&shift, 2 * n, "input_shift")?;
    let scale = lines.keyed("input_scale")?;
    let scale = lines.floats(&scale, 2 * n, "input_scale")?;

    let mut params = Vec::with_capacity(param_count(&dims));
    for l in 0..dims.len() - 1 {
        let tag = lines.keyed("layer")?;
        if tag.len() != 1 || tag[0].parse::<usize>().ok() != Some(l) {
            return Err(lines.err(format!("expected 'layer {l}'")));
        }
        let (d_in, d_out) = (dims[l], dims[l + 1]);
        for r in 0..d_out {
            params.extend(lines.row(d_in, &format!("layer {l} weight row {r}"))?);
        }
        params.extend(lines.row(d_out, &format!("layer {l} bias"))?);
    }
    if lines.next("end")? != "end" {
        return Err(lines.err("expected 'end'"));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(lines.err("non-finite parameter"));
    }

    let mut model = SurrogateModel {
        layer_dims: dims,
        params,
        activation,
        angle_box: (0.0, 0.0),
        lower: Vec::new(),
        upper: Vec::new(),
        slack: case.slack_index(),
        input_shift: vec![0.0; 2 * n],
        input_scale: vec![1.0; 2 * n],
        case_digest: digest,
    };
    model.set_bounds(case, (ab[0], ab[1]))?;
    model
        .set_input_scaling(shift, scale)
        .map_err(|_| lines.err("invalid input scaling"))?;
    Ok(model)
}
