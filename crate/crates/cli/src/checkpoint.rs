//! Plain-text checkpoints.
//!
//! ```text
//! modeprompt-checkpoint
//! format_version = 1
//! begin config
//! run.seed = 0
//! ...
//! end config
//! array frozen.stack 16 16 24
//! <values, one row of the last dimension per line>
//! ...
//! sha256 = <hex digest of every byte above this line>
//! ```
//!
//! Values are written with 17 significant digits, which parse back to the
//! same `f64`, so a reloaded model reproduces forward outputs bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use modeprompt_core::align::GateParams;
use modeprompt_core::backbone::{FrozenBackbone, ItmHead, Model, TrainableParams};
use modeprompt_core::mode_approx::{CoefficientTable, FrozenStack, GlobalFactors};
use modeprompt_core::{Matrix, Tensor3, Vector};
use sha2::{Digest, Sha256};

use crate::{CliError, Result, RunConfig};

pub const MAGIC: &str = "modeprompt-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

fn mat<'a>(name: &str, m: &'a Matrix) -> (String, Vec<usize>, &'a [f64]) {
    (name.to_string(), vec![m.rows(), m.cols()], m.as_slice())
}

/// Named arrays in file order, with their dimensions.
fn arrays(model: &Model) -> Vec<(String, Vec<usize>, &[f64])> {
    let f = &model.frozen;
    let p = &model.params;
    let w = f.stack.weights();
    let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
        ("frozen.stack".into(), w.dims().to_vec(), w.as_slice()),
        mat("frozen.image_embed", &f.image_embed),
        mat("frozen.text_embed", &f.text_embed),
        mat("frozen.image_cls", &f.image_cls),
        mat("frozen.text_cls", &f.text_cls),
        mat("adapter.u", &p.factors.u),
        mat("adapter.v", &p.factors.v),
        mat("adapter.p", &p.factors.p),
        mat("adapter.lambda", &p.coeffs.lambda),
    ];
    for (l, g) in p.gates.iter().enumerate() {
        out.push((format!("gate.{l}.gamma"), vec![g.gamma.len()], &g.gamma));
        out.push((format!("gate.{l}.beta"), vec![g.beta.len()], &g.beta));
    }
    out.push(mat("head.weight", &p.head.weight));
    out.push(mat("head.bias", &p.head.bias));
    out
}

/// Shapes a model built from `run` must have, in [`arrays`] order.
fn expected_shapes(run: &RunConfig) -> Vec<(String, Vec<usize>)> {
    let m = &run.model;
    let (d, r, n, v) = (m.width, m.rank, m.stack_len(), m.vocab);
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("frozen.stack".into(), vec![d, d, n]),
        ("frozen.image_embed".into(), vec![v, d]),
        ("frozen.text_embed".into(), vec![v, d]),
        ("frozen.image_cls".into(), vec![1, d]),
        ("frozen.text_cls".into(), vec![1, d]),
        ("adapter.u".into(), vec![d, r]),
        ("adapter.v".into(), vec![d, r]),
        ("adapter.p".into(), vec![n, r]),
        ("adapter.lambda".into(), vec![n, r]),
    ];
    if m.gated_query {
        for l in 0..m.fusion_layers {
            out.push((format!("gate.{l}.gamma"), vec![d]));
            out.push((format!("gate.{l}.beta"), vec![d]));
        }
    }
    out.push(("head.weight".into(), vec![d, 2]));
    out.push(("head.bias".into(), vec![1, 2]));
    out
}

fn digest(body: &str) -> String {
    Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `model` together with the run settings that produced it.
/// The output directory is left out so the file does not depend on where
/// it was written.
///
/// `run.model` must describe the model (seed aside, which comes from
/// `run.seed`).
pub fn to_text(model: &Model, run: &RunConfig) -> Result<String> {
    if run.model_config() != model.config {
        return Err(CliError::Validation("run config does not match the model config".into()));
    }
    let mut body = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\nbegin config\n");
    for (key, value, _) in run.entries().into_iter().filter(|(k, _, _)| *k != "run.out") {
        let _ = writeln!(body, "{key} = {value}");
    }
    body.push_str("end config\n");
    for (name, dims, values) in arrays(model) {
        let dims_text: Vec<String> = dims.iter().map(usize::to_string).collect();
        let _ = writeln!(body, "array {name} {}", dims_text.join(" "));
        let width = dims.last().copied().unwrap_or(1).max(1);
        for row in values.chunks(width) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
            body.push_str(&line.join(" "));
            body.push('\n');
        }
    }
    let sum = digest(&body);
    let _ = writeln!(body, "sha256 = {sum}");
    Ok(body)
}

pub fn save(path: &Path, model: &Model, run: &RunConfig) -> Result<()> {
    crate::write_file(path, &to_text(model, run)?)
}

struct Reader<'a> {
    path: &'a Path,
    lines: std::str::Lines<'a>,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> CliError {
        CliError::Corrupt { path: self.path.to_path_buf(), message: message.into() }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.lines.next().ok_or_else(|| self.corrupt("unexpected end of file"))
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got != want {
            return Err(self.corrupt(format!("expected {want:?}, found {got:?}")));
        }
        Ok(())
    }

    fn array(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let header = self.next()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("array") || parts.next() != Some(name) {
            return Err(self.corrupt(format!("expected array {name}, found {header:?}")));
        }
        let got: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| self.corrupt(format!("bad dimension {s:?} for {name}"))))
            .collect::<Result<_>>()?;
        if got != dims {
            return Err(self.corrupt(format!("{name} has shape {got:?}, config implies {dims:?}")));
        }
        let total: usize = dims.iter().product();
        let mut values = Vec::with_capacity(total);
        while values.len() < total {
            for tok in self.next()?.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| self.corrupt(format!("bad value {tok:?} in {name}")))?);
            }
        }
        if values.len() != total {
            return Err(self.corrupt(format!("{name} holds {} values, expected {total}", values.len())));
        }
        Ok(values)
    }
}

/// Parses a checkpoint, verifying the checksum before anything else.
pub fn from_text(text: &str, path: &Path) -> Result<(Model, RunConfig)> {
    let corrupt = |message: String| CliError::Corrupt { path: path.to_path_buf(), message };
    let trimmed = text.strip_suffix('\n').ok_or_else(|| corrupt("missing final newline".into()))?;
    let split = trimmed.rfind('\n').ok_or_else(|| corrupt("missing checksum line".into()))?;
    let (body, last) = (&text[..=split], &trimmed[split + 1..]);
    let stored = last.strip_prefix("sha256 = ").ok_or_else(|| corrupt("missing checksum line".into()))?;
    if digest(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }

    let mut r = Reader { path, lines: body.lines() };
    r.expect(MAGIC)?;
    let version = r.next()?;
    if version != format!("format_version = {FORMAT_VERSION}") {
        return Err(r.corrupt(format!("unsupported {version:?}")));
    }
    r.expect("begin config")?;
    let mut config_text = String::new();
    loop {
        let line = r.next()?;
        if line == "end config" {
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    let run = RunConfig::parse(&config_text)?;
    let model_config = run.model_config();

    let shapes = expected_shapes(&run);
    let mut values = Vec::with_capacity(shapes.len());
    for (name, dims) in &shapes {
        values.push(r.array(name, dims)?);
    }
    if let Some(extra) = r.lines.next() {
        return Err(r.corrupt(format!("unexpected trailing line {extra:?}")));
    }

    let mut blocks = values.into_iter();
    let mut next = || blocks.next().expect("one value block per expected shape");
    let m = &model_config;
    let (d, r, n, v) = (m.width, m.rank, m.stack_len(), m.vocab);
    let weights = Tensor3::from_vec([d, d, n], next())?;
    let stack = FrozenStack::new(weights, m.vision_layers, m.text_layers, m.fusion_layers)?;
    let frozen = FrozenBackbone {
        stack,
        image_embed: Matrix::from_vec(v, d, next())?,
        text_embed: Matrix::from_vec(v, d, next())?,
        image_cls: Matrix::from_vec(1, d, next())?,
        text_cls: Matrix::from_vec(1, d, next())?,
    };
    let factors = GlobalFactors {
        u: Matrix::from_vec(d, r, next())?,
        v: Matrix::from_vec(d, r, next())?,
        p: Matrix::from_vec(n, r, next())?,
    };
    let coeffs = CoefficientTable { lambda: Matrix::from_vec(n, r, next())? };
    let gate_layers = if m.gated_query { m.fusion_layers } else { 0 };
    let mut gates = Vec::with_capacity(gate_layers);
    for _ in 0..gate_layers {
        gates.push(GateParams { gamma: Vector::from_vec(next())?, beta: Vector::from_vec(next())? });
    }
    let head = ItmHead { weight: Matrix::from_vec(d, 2, next())?, bias: Matrix::from_vec(1, 2, next())? };
    let params = TrainableParams { factors, coeffs, gates, head };
    Ok((Model { config: model_config, frozen, params }, run))
}

pub fn load(path: &Path) -> Result<(Model, RunConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    from_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use modeprompt_core::backbone::forward_itc;
    use modeprompt_core::train::gradcheck::randomize_params;

    fn small() -> (Model, RunConfig) {
        let mut run = RunConfig::default();
        run.seed = 9;
        run.model.width = 5;
        run.model.vocab = 7;
        run.model.rank = 3;
        let mut model = Model::build(&run.model_config()).unwrap();
        randomize_params(&mut model, 0.7, 4);
        (model, run)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, run) = small();
        let text = to_text(&model, &run).unwrap();
        let (back, run_back) = from_text(&text, Path::new("m.ckpt")).unwrap();
        assert_eq!(back, model);
        assert_eq!(run_back, RunConfig { out: RunConfig::default().out, ..run.clone() });
        assert_eq!(to_text(&back, &run_back).unwrap(), text);
        let images = vec![vec![1, 2, 3, 4], vec![0, 6, 5, 1]];
        let texts = vec![vec![3; 6], vec![2, 1, 0, 4, 5, 6]];
        assert_eq!(forward_itc(&back, &images, &texts).unwrap(), forward_itc(&model, &images, &texts).unwrap());
    }

    #[test]
    fn ungated_model_round_trips() {
        let (_, mut run) = small();
        run.model.gated_query = false;
        let model = Model::build(&run.model_config()).unwrap();
        let (back, _) = from_text(&to_text(&model, &run).unwrap(), Path::new("m")).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn any_edit_is_detected() {
        let (model, run) = small();
        let text = to_text(&model, &run).unwrap();
        let line = text.lines().position(|l| l.starts_with("array adapter.u")).unwrap() + 1;
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[line] = lines[line].replacen('e', "E", 1);
        let tampered = lines.join("\n") + "\n";
        let err = from_text(&tampered, Path::new("m")).unwrap_err();
        assert!(matches!(&err, CliError::Corrupt { message, .. } if message.contains("checksum")), "{err}");
        assert!(from_text(&text[..text.len() - 10], Path::new("m")).is_err());
    }

    #[test]
    fn mismatched_run_config_is_rejected() {
        let (model, mut run) = small();
        run.model.rank = 4;
        assert!(matches!(to_text(&model, &run), Err(CliError::Validation(_))));
    }
}
