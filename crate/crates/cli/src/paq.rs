//! Self-contained quantized model files (`PAQ1`).
//!
//! A file carries everything inference needs and nothing the training stack
//! does: real tensors for unquantized layers and batch-norm statistics,
//! per-layer piece endpoints and scaling coefficients, activation lookup
//! parameters, and the weight base planes bit-packed into little-endian
//! 64-bit words. Importing rebuilds the architecture skeleton, installs the
//! reconstructed quantized weights as plain dense kernels, and keeps the
//! planes around so the bit-kernel path can be run and cross-checked.

use std::collections::HashMap;

use pa_core::activations::{decompose_activation_bases, ActivationQuantizerState};
use pa_core::bitops::{binary_conv2d, merge_coefficients, BitPlane};
use pa_core::net::layers::{global_avg_pool_forward, maxpool2_forward};
use pa_core::net::{build_net, ActOp, Mode, Net, NetConfig, Op, PaAct, QuantPolicy};
use pa_core::weights::decompose_weight_bases;
use pa_core::{Error, Result, Tensor};

pub const MAGIC: [u8; 4] = *b"PAQ1";
pub const VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_PA_WEIGHTS: u8 = 1;
const KIND_PA_ACT: u8 = 2;

/// One named entry in a `PAQ1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum PaqRecord {
    /// Plain dense tensor (real weights, biases, batch-norm vectors).
    Tensor {
        name: String,
        shape: [usize; 4],
        data: Vec<f32>,
    },
    /// Piecewise-quantized weight layer: geometry, piece endpoints `u`,
    /// scaling coefficients `alpha`, and one base plane per piece.
    PaWeights {
        name: String,
        shape: [usize; 4],
        stride: usize,
        pad: usize,
        u: Vec<f32>,
        alpha: Vec<f32>,
        planes: Vec<BitPlane>,
    },
    /// Activation quantizer lookup parameters.
    PaAct {
        name: String,
        v: Vec<f32>,
        beta: Vec<f32>,
        lambda_a: f32,
        lambda_delta: f32,
    },
}

impl PaqRecord {
    pub fn name(&self) -> &str {
        match self {
            PaqRecord::Tensor { name, .. }
            | PaqRecord::PaWeights { name, .. }
            | PaqRecord::PaAct { name, .. } => name,
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a model: architecture id, scheme sizes, then records.
pub fn encode(arch: &str, m: usize, n: usize, records: &[PaqRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    push_str(&mut out, arch);
    push_u32(&mut out, m as u32);
    push_u32(&mut out, n as u32);
    push_u32(&mut out, records.len() as u32);
    for rec in records {
        push_str(&mut out, rec.name());
        match rec {
            PaqRecord::Tensor { shape, data, .. } => {
                out.push(KIND_TENSOR);
                for &d in shape {
                    push_u32(&mut out, d as u32);
                }
                push_u32(&mut out, data.len() as u32);
                push_f32s(&mut out, data);
            }
            PaqRecord::PaWeights {
                shape,
                stride,
                pad,
                u,
                alpha,
                planes,
                ..
            } => {
                out.push(KIND_PA_WEIGHTS);
                for &d in shape {
                    push_u32(&mut out, d as u32);
                }
                push_u32(&mut out, *stride as u32);
                push_u32(&mut out, *pad as u32);
                push_u32(&mut out, u.len() as u32);
                push_f32s(&mut out, u);
                push_f32s(&mut out, alpha);
                for plane in planes {
                    push_u32(&mut out, plane.words().len() as u32);
                    for &w in plane.words() {
                        out.extend_from_slice(&w.to_le_bytes());
                    }
                }
            }
            PaqRecord::PaAct {
                v,
                beta,
                lambda_a,
                lambda_delta,
                ..
            } => {
                out.push(KIND_PA_ACT);
                push_u32(&mut out, v.len() as u32);
                push_f32s(&mut out, v);
                push_f32s(&mut out, beta);
                push_f32s(&mut out, &[*lambda_a, *lambda_delta]);
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "paq: truncated at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let pos = self.pos;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Checkpoint(format!("paq: invalid UTF-8 name at byte {pos}")))
    }

    fn shape(&mut self) -> Result<[usize; 4]> {
        let mut s = [0usize; 4];
        for d in &mut s {
            *d = self.u32()? as usize;
        }
        Ok(s)
    }
}

/// Parsed header + records of a `PAQ1` byte stream.
#[derive(Debug)]
pub struct PaqFile {
    pub arch: String,
    pub m: usize,
    pub n: usize,
    pub records: Vec<PaqRecord>,
}

pub fn decode(bytes: &[u8]) -> Result<PaqFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("paq: bad magic, not a PAQ1 file".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "paq: unsupported version {version}, expected {VERSION}"
        )));
    }
    let arch = cur.string()?;
    let m = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let kind = cur.take(1)?[0];
        let rec = match kind {
            KIND_TENSOR => {
                let shape = cur.shape()?;
                let len = cur.u32()? as usize;
                if shape.iter().product::<usize>() != len {
                    return Err(Error::Checkpoint(format!(
                        "paq: record {name:?} shape {shape:?} does not hold {len} values"
                    )));
                }
                PaqRecord::Tensor {
                    name,
                    shape,
                    data: cur.f32s(len)?,
                }
            }
            KIND_PA_WEIGHTS => {
                let shape = cur.shape()?;
                let stride = cur.u32()? as usize;
                let pad = cur.u32()? as usize;
                let m = cur.u32()? as usize;
                let u = cur.f32s(m)?;
                let alpha = cur.f32s(m)?;
                let bits = shape.iter().product::<usize>();
                let mut planes = Vec::with_capacity(m);
                for _ in 0..m {
                    let wc = cur.u32()? as usize;
                    let mut words = Vec::with_capacity(wc);
                    for _ in 0..wc {
                        let b = cur.take(8)?;
                        words.push(u64::from_le_bytes([
                            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                        ]));
                    }
                    planes.push(BitPlane::from_words(bits, words).map_err(|e| {
                        Error::Checkpoint(format!("paq: record {name:?}: {e}"))
                    })?);
                }
                PaqRecord::PaWeights {
                    name,
                    shape,
                    stride,
                    pad,
                    u,
                    alpha,
                    planes,
                }
            }
            KIND_PA_ACT => {
                let n = cur.u32()? as usize;
                let v = cur.f32s(n)?;
                let beta = cur.f32s(n)?;
                let lambdas = cur.f32s(2)?;
                PaqRecord::PaAct {
                    name,
                    v,
                    beta,
                    lambda_a: lambdas[0],
                    lambda_delta: lambdas[1],
                }
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "paq: record {name:?} has unknown kind {other}"
                )))
            }
        };
        records.push(rec);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "paq: {} trailing bytes after last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(PaqFile { arch, m, n, records })
}

/// Pulls export records out of a net whose interior layers use the piecewise
/// scheme. Weight quantizers are refitted from the master weights, exactly as
/// a forward pass would.
pub fn export_records(net: &mut Net) -> Result<Vec<PaqRecord>> {
    let mut records = Vec::new();
    for node in net.nodes.iter_mut() {
        let name = node.name.clone();
        match &mut node.op {
            Op::Input | Op::MaxPool2 | Op::GlobalAvgPool | Op::Add => {}
            Op::Conv(c) => match c.policy {
                QuantPolicy::Pa { .. } => {
                    c.quantized_weights()?;
                    let wp = c.wq.as_ref().expect("fit cached by quantized_weights");
                    records.push(PaqRecord::PaWeights {
                        name,
                        shape: c.weight.shape(),
                        stride: c.stride,
                        pad: c.pad,
                        u: wp.endpoints().to_vec(),
                        alpha: wp.alpha().to_vec(),
                        planes: decompose_weight_bases(&c.weight, wp.endpoints()),
                    });
                }
                QuantPolicy::Real => records.push(PaqRecord::Tensor {
                    name: format!("{name}.weight"),
                    shape: c.weight.shape(),
                    data: c.weight.data().to_vec(),
                }),
                QuantPolicy::SignBinary => {
                    return Err(Error::InvalidConfig(
                        "sign-binary layers have no piecewise export".into(),
                    ))
                }
            },
            Op::Fc(f) => {
                match f.policy {
                    QuantPolicy::Pa { .. } => {
                        f.quantized_weights()?;
                        let wp = f.wq.as_ref().expect("fit cached by quantized_weights");
                        records.push(PaqRecord::PaWeights {
                            name: name.clone(),
                            shape: f.weight.shape(),
                            stride: 1,
                            pad: 0,
                            u: wp.endpoints().to_vec(),
                            alpha: wp.alpha().to_vec(),
                            planes: decompose_weight_bases(&f.weight, wp.endpoints()),
                        });
                    }
                    QuantPolicy::Real => records.push(PaqRecord::Tensor {
                        name: format!("{name}.weight"),
                        shape: f.weight.shape(),
                        data: f.weight.data().to_vec(),
                    }),
                    QuantPolicy::SignBinary => {
                        return Err(Error::InvalidConfig(
                            "sign-binary layers have no piecewise export".into(),
                        ))
                    }
                }
                records.push(PaqRecord::Tensor {
                    name: format!("{name}.bias"),
                    shape: [1, 1, 1, f.bias.len()],
                    data: f.bias.clone(),
                });
            }
            Op::Bn(b) => {
                let c = b.gamma.len();
                for (suffix, data) in [
                    ("gamma", &b.gamma),
                    ("beta", &b.beta),
                    ("running_mean", &b.running_mean),
                    ("running_var", &b.running_var),
                ] {
                    records.push(PaqRecord::Tensor {
                        name: format!("{name}.{suffix}"),
                        shape: [1, 1, 1, c],
                        data: data.clone(),
                    });
                }
            }
            Op::Act(ActOp::Pa(p)) => {
                let state = p.state()?;
                records.push(PaqRecord::PaAct {
                    name,
                    v: state.v().to_vec(),
                    beta: state.beta().to_vec(),
                    lambda_a: state.lambda_a(),
                    lambda_delta: state.lambda_delta(),
                });
            }
            Op::Act(_) => {}
        }
    }
    Ok(records)
}

/// Serializes a piecewise-quantized net end to end.
pub fn export(net: &mut Net, arch: &str, m: usize, n: usize) -> Result<Vec<u8>> {
    let records = export_records(net)?;
    Ok(encode(arch, m, n, &records))
}

/// `W-bar = sum_i alpha_i * T_i`: exactly one plane is set per non-dead
/// element, so scattering each coefficient reproduces the level bit for bit.
fn reconstruct_quantized(shape: [usize; 4], alpha: &[f32], planes: &[BitPlane]) -> Result<Tensor> {
    let len = shape.iter().product::<usize>();
    if planes.len() != alpha.len() {
        return Err(Error::Checkpoint(format!(
            "paq: {} planes for {} coefficients",
            planes.len(),
            alpha.len()
        )));
    }
    let mut data = vec![0.0f32; len];
    for (a, plane) in alpha.iter().zip(planes) {
        if plane.len() != len {
            return Err(Error::Checkpoint(format!(
                "paq: plane holds {} bits but layer has {len} elements",
                plane.len()
            )));
        }
        for (j, slot) in data.iter_mut().enumerate() {
            if plane.get(j) {
                *slot = *a;
            }
        }
    }
    Tensor::new(shape, data)
}

/// Retained bit-level data for one imported weight layer.
#[derive(Debug, Clone)]
pub struct PaPlanes {
    pub shape: [usize; 4],
    pub stride: usize,
    pub pad: usize,
    pub alpha: Vec<f32>,
    pub planes: Vec<BitPlane>,
}

/// An imported model: a dense net carrying the reconstructed quantized
/// weights, plus the raw planes for the bit-kernel path.
#[derive(Debug)]
pub struct PaqModel {
    pub arch: String,
    pub m: usize,
    pub n: usize,
    pub net: Net,
    /// Node index -> plane data for quantized conv/fc layers.
    pub planes: HashMap<usize, PaPlanes>,
}

pub fn import(bytes: &[u8]) -> Result<PaqModel> {
    let file = decode(bytes)?;
    let mut net = build_net(&file.arch, &NetConfig::default())?;
    let mut by_name: HashMap<&str, &PaqRecord> = HashMap::new();
    for rec in &file.records {
        if by_name.insert(rec.name(), rec).is_some() {
            return Err(Error::Checkpoint(format!(
                "paq: duplicate record {:?}",
                rec.name()
            )));
        }
    }
    let mut used: Vec<&str> = Vec::new();
    let mut problems: Vec<String> = Vec::new();
    let mut planes = HashMap::new();

    fn tensor_rec<'r>(
        by_name: &HashMap<&str, &'r PaqRecord>,
        used: &mut Vec<&'r str>,
        problems: &mut Vec<String>,
        name: &str,
        shape: [usize; 4],
    ) -> Option<&'r [f32]> {
        match by_name.get(name) {
            Some(PaqRecord::Tensor {
                name: rname,
                shape: rshape,
                data,
            }) => {
                used.push(rname);
                if *rshape == shape {
                    Some(data)
                } else {
                    problems.push(format!(
                        "record {name:?} has shape {rshape:?}, expected {shape:?}"
                    ));
                    None
                }
            }
            Some(_) => {
                problems.push(format!("record {name:?} has the wrong kind"));
                None
            }
            None => {
                problems.push(format!("missing record {name:?}"));
                None
            }
        }
    }

    for (idx, node) in net.nodes.iter_mut().enumerate() {
        let name = node.name.clone();
        match &mut node.op {
            Op::Input | Op::MaxPool2 | Op::GlobalAvgPool | Op::Add => {}
            Op::Conv(c) => match by_name.get(name.as_str()) {
                Some(PaqRecord::PaWeights {
                    name: rname,
                    shape,
                    stride,
                    pad,
                    alpha,
                    planes: recorded,
                    ..
                }) => {
                    used.push(rname);
                    if *shape != c.weight.shape() {
                        problems.push(format!(
                            "record {name:?} has shape {shape:?}, expected {:?}",
                            c.weight.shape()
                        ));
                        continue;
                    }
                    c.weight = reconstruct_quantized(*shape, alpha, recorded)?;
                    planes.insert(
                        idx,
                        PaPlanes {
                            shape: *shape,
                            stride: *stride,
                            pad: *pad,
                            alpha: alpha.clone(),
                            planes: recorded.clone(),
                        },
                    );
                }
                _ => {
                    if let Some(data) = tensor_rec(
                        &by_name,
                        &mut used,
                        &mut problems,
                        &format!("{name}.weight"),
                        c.weight.shape(),
                    ) {
                        c.weight.data_mut().copy_from_slice(data);
                    }
                }
            },
            Op::Fc(f) => {
                match by_name.get(name.as_str()) {
                    Some(PaqRecord::PaWeights {
                        name: rname,
                        shape,
                        stride,
                        pad,
                        alpha,
                        planes: recorded,
                        ..
                    }) => {
                        used.push(rname);
                        if *shape != f.weight.shape() {
                            problems.push(format!(
                                "record {name:?} has shape {shape:?}, expected {:?}",
                                f.weight.shape()
                            ));
                            continue;
                        }
                        f.weight = reconstruct_quantized(*shape, alpha, recorded)?;
                        planes.insert(
                            idx,
                            PaPlanes {
                                shape: *shape,
                                stride: *stride,
                                pad: *pad,
                                alpha: alpha.clone(),
                                planes: recorded.clone(),
                            },
                        );
                    }
                    _ => {
                        if let Some(data) = tensor_rec(
                            &by_name,
                            &mut used,
                            &mut problems,
                            &format!("{name}.weight"),
                            f.weight.shape(),
                        ) {
                            f.weight.data_mut().copy_from_slice(data);
                        }
                    }
                }
                if let Some(data) = tensor_rec(
                    &by_name,
                    &mut used,
                    &mut problems,
                    &format!("{name}.bias"),
                    [1, 1, 1, f.bias.len()],
                ) {
                    f.bias.copy_from_slice(data);
                }
            }
            Op::Bn(b) => {
                let ch = b.gamma.len();
                let shape = [1, 1, 1, ch];
                let slots: [(&str, &mut Vec<f32>); 4] = [
                    ("gamma", &mut b.gamma),
                    ("beta", &mut b.beta),
                    ("running_mean", &mut b.running_mean),
                    ("running_var", &mut b.running_var),
                ];
                for (suffix, slot) in slots {
                    if let Some(data) = tensor_rec(
                        &by_name,
                        &mut used,
                        &mut problems,
                        &format!("{name}.{suffix}"),
                        shape,
                    ) {
                        slot.copy_from_slice(data);
                    }
                }
            }
            Op::Act(act) => match by_name.get(name.as_str()) {
                Some(PaqRecord::PaAct {
                    name: rname,
                    v,
                    beta,
                    lambda_a,
                    lambda_delta,
                }) => {
                    used.push(rname);
                    let state = ActivationQuantizerState::new(
                        v.clone(),
                        beta.clone(),
                        *lambda_a,
                        *lambda_delta,
                    )?;
                    let mut pa = PaAct::new(state.n(), state.lambda_a());
                    pa.install(state);
                    *act = ActOp::Pa(pa);
                }
                Some(_) => problems.push(format!("record {name:?} has the wrong kind")),
                // Real-activation nets are never exported, but tolerate an
                // absent record for non-quantized activations.
                None => {}
            },
        }
    }

    for rec in &file.records {
        if !used.contains(&rec.name()) {
            problems.push(format!("unused record {:?}", rec.name()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "paq: file does not match the {} architecture: {}",
            file.arch,
            problems.join("; ")
        )));
    }
    Ok(PaqModel {
        arch: file.arch,
        m: file.m,
        n: file.n,
        net,
        planes,
    })
}

pub(crate) fn val(values: &[Option<Tensor>], i: usize) -> &Tensor {
    values[i].as_ref().expect("nodes are topologically ordered")
}

pub(crate) fn add_same_shape(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "residual join of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

impl PaqModel {
    /// Dense inference on the reconstructed quantized weights.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let tape = self.net.forward(x, Mode::Eval)?;
        Ok(self.net.output_of(&tape).clone())
    }

    /// Bit-kernel inference: quantized conv/fc layers run on the stored
    /// planes via AND+popcount with merged coefficients.
    pub fn forward_binary(&mut self, x: &Tensor) -> Result<Tensor> {
        let count = self.net.nodes.len();
        let mut values: Vec<Option<Tensor>> = vec![None; count];
        for idx in 0..count {
            let inputs = self.net.nodes[idx].inputs.clone();
            let binary_here = self.planes.contains_key(&idx)
                && matches!(self.net.nodes[idx].op, Op::Conv(_) | Op::Fc(_));
            let out = if binary_here {
                self.binary_node(idx, &inputs, &values)?
            } else {
                match &mut self.net.nodes[idx].op {
                    Op::Input => x.clone(),
                    Op::Conv(c) => c.forward(val(&values, inputs[0]))?,
                    Op::Fc(f) => f.forward(val(&values, inputs[0]))?,
                    Op::Bn(b) => b.forward(val(&values, inputs[0]), Mode::Eval)?,
                    Op::Act(a) => a.forward(val(&values, inputs[0]), Mode::Eval)?,
                    Op::MaxPool2 => maxpool2_forward(val(&values, inputs[0]))?,
                    Op::GlobalAvgPool => global_avg_pool_forward(val(&values, inputs[0]))?,
                    Op::Add => add_same_shape(val(&values, inputs[0]), val(&values, inputs[1]))?,
                }
            };
            values[idx] = Some(out);
        }
        Ok(values[self.net.output].take().expect("output was computed"))
    }

    /// Runs one quantized layer through `binary_conv2d`. The layer input must
    /// be a quantized activation node: its pre-activation feeds the base
    /// decomposition and its coefficients merge with the layer's.
    fn binary_node(
        &self,
        idx: usize,
        inputs: &[usize],
        values: &[Option<Tensor>],
    ) -> Result<Tensor> {
        let pp = &self.planes[&idx];
        let src = inputs[0];
        let (state, pre_idx) = match &self.net.nodes[src].op {
            Op::Act(ActOp::Pa(p)) => (p.state()?.clone(), self.net.nodes[src].inputs[0]),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "binary path for {:?} needs a piecewise-quantized activation input",
                    self.net.nodes[idx].name
                )))
            }
        };
        let pre = val(values, pre_idx);
        let phi = merge_coefficients(&pp.alpha, state.beta());
        match &self.net.nodes[idx].op {
            Op::Conv(_) => {
                let act_planes = decompose_activation_bases(pre, &state);
                binary_conv2d(
                    &pp.planes,
                    pp.shape,
                    &act_planes,
                    pre.shape(),
                    &phi,
                    pp.stride,
                    pp.pad,
                )
            }
            Op::Fc(f) => {
                let samples = pre.shape()[0];
                let feats = pre.len() / samples.max(1);
                let flat = pre.clone().reshaped([samples, feats, 1, 1])?;
                let act_planes = decompose_activation_bases(&flat, &state);
                let mut out = binary_conv2d(
                    &pp.planes,
                    pp.shape,
                    &act_planes,
                    flat.shape(),
                    &phi,
                    1,
                    0,
                )?;
                let outs = pp.shape[0];
                for chunk in out.data_mut().chunks_mut(outs) {
                    for (y, b) in chunk.iter_mut().zip(&f.bias) {
                        *y += b;
                    }
                }
                Ok(out)
            }
            _ => unreachable!("binary_here checked the op kind"),
        }
    }
}
