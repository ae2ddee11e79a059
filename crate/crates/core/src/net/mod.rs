//! Small differentiable graphs over the quantized layer kernels: a
//! topologically ordered node tape with explicit input wiring, enough for
//! chains plus residual joins.

pub mod checkpoint;
pub mod data;
pub mod layers;
pub mod optim;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::activations::decompose_activation_bases;
use crate::bitops::{binary_conv2d, merge_coefficients};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::decompose_weight_bases;

pub use layers::{ActOp, BnOp, ConvOp, FcOp, Mode, PaAct, QuantPolicy};

use checkpoint::Record;

/// The trainable net architectures.
pub const NET_ARCHS: [&str; 2] = ["lenet", "resnet20"];

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Conv(ConvOp),
    Fc(FcOp),
    Bn(BnOp),
    Act(ActOp),
    MaxPool2,
    GlobalAvgPool,
    Add,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub inputs: Vec<usize>,
    pub op: Op,
}

#[derive(Debug, Clone)]
pub struct Net {
    pub nodes: Vec<Node>,
    pub output: usize,
}

/// Per-node forward values retained for the backward pass.
pub struct Tape {
    pub values: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    ActEndpoint,
    ActCoefficient,
}

/// Mutable view of one parameter buffer and its gradient accumulator.
pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
}

impl Net {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tape> {
        self.run_forward(x, mode, false)
    }

    /// Evaluation forward where every piecewise-quantized conv/FC executes on
    /// bit-packed base planes with merged coefficients instead of dense
    /// arithmetic. Requires each such layer to be fed by a piecewise
    /// activation node.
    pub fn forward_binary(&mut self, x: &Tensor) -> Result<Tape> {
        self.run_forward(x, Mode::Eval, true)
    }

    fn run_forward(&mut self, x: &Tensor, mode: Mode, binary: bool) -> Result<Tape> {
        let count = self.nodes.len();
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(count);
        values.resize_with(count, || None);
        for idx in 0..count {
            let input_ids = self.nodes[idx].inputs.clone();
            let take = |slot: usize| values[slot].as_ref().expect("nodes are topologically ordered");
            let is_pa_weight_layer = matches!(
                &self.nodes[idx].op,
                Op::Conv(ConvOp { policy: QuantPolicy::Pa { .. }, .. })
                    | Op::Fc(FcOp { policy: QuantPolicy::Pa { .. }, .. })
            );
            let out = if binary && is_pa_weight_layer {
                let source = input_ids[0];
                let (pre_idx, state) = match &self.nodes[source].op {
                    Op::Act(ActOp::Pa(pa)) => (self.nodes[source].inputs[0], pa.state()?.clone()),
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "binary path needs a piecewise activation feeding {}",
                            self.nodes[idx].name
                        )))
                    }
                };
                let pre = values[pre_idx]
                    .as_ref()
                    .expect("nodes are topologically ordered")
                    .clone();
                match &mut self.nodes[idx].op {
                    Op::Conv(conv) => {
                        conv.quantized_weights()?;
                        let wp = conv.wq.as_ref().expect("fit above");
                        let wplanes = decompose_weight_bases(&conv.weight, wp.endpoints());
                        let aplanes = decompose_activation_bases(&pre, &state);
                        let phi = merge_coefficients(wp.alpha(), state.beta());
                        binary_conv2d(
                            &wplanes,
                            conv.weight.shape(),
                            &aplanes,
                            pre.shape(),
                            &phi,
                            conv.stride,
                            conv.pad,
                        )?
                    }
                    Op::Fc(fc) => {
                        fc.quantized_weights()?;
                        let wp = fc.wq.as_ref().expect("fit above");
                        let [outs, ins, _, _] = fc.weight.shape();
                        let samples = pre.shape()[0];
                        let flat = pre.clone().reshaped([samples, ins, 1, 1])?;
                        let wplanes = decompose_weight_bases(&fc.weight, wp.endpoints());
                        let aplanes = decompose_activation_bases(&flat, &state);
                        let phi = merge_coefficients(wp.alpha(), state.beta());
                        let mut out =
                            binary_conv2d(&wplanes, fc.weight.shape(), &aplanes, flat.shape(), &phi, 1, 0)?;
                        for s in 0..samples {
                            for (o, b) in out.data_mut()[s * outs..(s + 1) * outs]
                                .iter_mut()
                                .zip(&fc.bias)
                            {
                                *o += b;
                            }
                        }
                        out
                    }
                    _ => unreachable!("matched as conv or fc above"),
                }
            } else {
                match &mut self.nodes[idx].op {
                    Op::Input => x.clone(),
                    Op::Conv(conv) => conv.forward(take(input_ids[0]))?,
                    Op::Fc(fc) => fc.forward(take(input_ids[0]))?,
                    Op::Bn(bn) => bn.forward(take(input_ids[0]), mode)?,
                    Op::Act(act) => act.forward(take(input_ids[0]), mode)?,
                    Op::MaxPool2 => layers::maxpool2_forward(take(input_ids[0]))?,
                    Op::GlobalAvgPool => layers::global_avg_pool_forward(take(input_ids[0]))?,
                    Op::Add => {
                        let (a, b) = (take(input_ids[0]), take(input_ids[1]));
                        if a.shape() != b.shape() {
                            return Err(Error::ShapeMismatch(format!(
                                "residual join of {:?} and {:?}",
                                a.shape(),
                                b.shape()
                            )));
                        }
                        let mut sum = a.clone();
                        for (s, v) in sum.data_mut().iter_mut().zip(b.data()) {
                            *s += v;
                        }
                        sum
                    }
                }
            };
            values[idx] = Some(out);
        }
        Ok(Tape {
            values: values.into_iter().map(|v| v.expect("all nodes evaluated")).collect(),
        })
    }

    pub fn output_of<'t>(&self, tape: &'t Tape) -> &'t Tensor {
        &tape.values[self.output]
    }

    /// Accumulates parameter gradients for one batch; `grad` is the loss
    /// gradient at the output node.
    pub fn backward(&mut self, tape: &Tape, grad: Tensor) -> Result<()> {
        let count = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(count);
        grads.resize_with(count, || None);
        grads[self.output] = Some(grad);
        for idx in (0..count).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let input_ids = self.nodes[idx].inputs.clone();
            let input_grads: Vec<Tensor> = match &mut self.nodes[idx].op {
                Op::Input => Vec::new(),
                Op::Conv(conv) => vec![conv.backward(&tape.values[input_ids[0]], &g)?],
                Op::Fc(fc) => vec![fc.backward(&tape.values[input_ids[0]], &g)?],
                Op::Bn(bn) => vec![bn.backward(&tape.values[input_ids[0]], &g)?],
                Op::Act(act) => vec![act.backward(&tape.values[input_ids[0]], &g)?],
                Op::MaxPool2 => vec![layers::maxpool2_backward(&tape.values[input_ids[0]], &g)?],
                Op::GlobalAvgPool => {
                    vec![layers::global_avg_pool_backward(&tape.values[input_ids[0]], &g)?]
                }
                Op::Add => vec![g.clone(), g],
            };
            for (&slot, gi) in input_ids.iter().zip(input_grads) {
                match &mut grads[slot] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    empty => *empty = Some(gi),
                }
            }
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            let name = node.name.clone();
            match &mut node.op {
                Op::Conv(conv) => out.push(ParamRef {
                    name: format!("{name}.weight"),
                    kind: ParamKind::Weight,
                    value: conv.weight.data_mut(),
                    grad: conv.grad_weight.data_mut(),
                }),
                Op::Fc(fc) => {
                    out.push(ParamRef {
                        name: format!("{name}.weight"),
                        kind: ParamKind::Weight,
                        value: fc.weight.data_mut(),
                        grad: fc.grad_weight.data_mut(),
                    });
                    out.push(ParamRef {
                        name: format!("{name}.bias"),
                        kind: ParamKind::Bias,
                        value: &mut fc.bias,
                        grad: &mut fc.grad_bias,
                    });
                }
                Op::Bn(bn) => {
                    out.push(ParamRef {
                        name: format!("{name}.gamma"),
                        kind: ParamKind::BnScale,
                        value: &mut bn.gamma,
                        grad: &mut bn.grad_gamma,
                    });
                    out.push(ParamRef {
                        name: format!("{name}.beta"),
                        kind: ParamKind::BnShift,
                        value: &mut bn.beta,
                        grad: &mut bn.grad_beta,
                    });
                }
                Op::Act(ActOp::Pa(pa)) if pa.state.is_some() => {
                    out.push(ParamRef {
                        name: format!("{name}.v"),
                        kind: ParamKind::ActEndpoint,
                        value: &mut pa.v,
                        grad: &mut pa.grad_v,
                    });
                    out.push(ParamRef {
                        name: format!("{name}.beta"),
                        kind: ParamKind::ActCoefficient,
                        value: &mut pa.beta,
                        grad: &mut pa.grad_beta,
                    });
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Post-update maintenance: re-projects activation endpoints and rebuilds
    /// the lookup tables.
    pub fn post_step(&mut self) -> Result<()> {
        for node in &mut self.nodes {
            if let Op::Act(ActOp::Pa(pa)) = &mut node.op {
                pa.refresh()?;
            }
        }
        Ok(())
    }

    /// Flat snapshot of all persistent state (for checkpoints).
    pub fn state_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        let vec_record = |name: String, data: &[f32]| Record {
            name,
            shape: [1, 1, 1, data.len()],
            data: data.to_vec(),
        };
        for node in &self.nodes {
            let name = &node.name;
            match &node.op {
                Op::Conv(conv) => out.push(Record {
                    name: format!("{name}.weight"),
                    shape: conv.weight.shape(),
                    data: conv.weight.data().to_vec(),
                }),
                Op::Fc(fc) => {
                    out.push(Record {
                        name: format!("{name}.weight"),
                        shape: fc.weight.shape(),
                        data: fc.weight.data().to_vec(),
                    });
                    out.push(vec_record(format!("{name}.bias"), &fc.bias));
                }
                Op::Bn(bn) => {
                    out.push(vec_record(format!("{name}.gamma"), &bn.gamma));
                    out.push(vec_record(format!("{name}.beta"), &bn.beta));
                    out.push(vec_record(format!("{name}.running_mean"), &bn.running_mean));
                    out.push(vec_record(format!("{name}.running_var"), &bn.running_var));
                }
                Op::Act(ActOp::Pa(pa)) => {
                    if let Some(state) = &pa.state {
                        out.push(vec_record(format!("{name}.v"), state.v()));
                        out.push(vec_record(format!("{name}.beta"), state.beta()));
                        out.push(vec_record(
                            format!("{name}.lambda"),
                            &[state.lambda_a(), state.lambda_delta()],
                        ));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Restores state from checkpoint records. In strict mode every slot must
    /// be present (and every record consumed); otherwise activation-quantizer
    /// records may be absent, which leaves those quantizers uninitialized —
    /// the loading path for piecewise nets seeded from a full-precision twin.
    pub fn load_records(&mut self, records: &[Record], strict: bool) -> Result<()> {
        use std::collections::{HashMap, HashSet};
        fn fill(
            by_name: &HashMap<&str, &Record>,
            used: &mut HashSet<String>,
            problems: &mut Vec<String>,
            name: String,
            shape: [usize; 4],
            dst: &mut dyn FnMut(&[f32]),
        ) {
            match by_name.get(name.as_str()) {
                Some(r) if r.shape == shape => {
                    used.insert(r.name.clone());
                    dst(&r.data);
                }
                Some(r) => {
                    used.insert(r.name.clone());
                    problems.push(format!("{name}: shape {:?} != expected {shape:?}", r.shape));
                }
                None => problems.push(format!("{name}: missing")),
            }
        }
        let by_name: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        if by_name.len() != records.len() {
            return Err(Error::Checkpoint("duplicate record names".into()));
        }
        let mut problems: Vec<String> = Vec::new();
        let mut used: HashSet<String> = HashSet::new();
        for node in &mut self.nodes {
            let name = node.name.clone();
            match &mut node.op {
                Op::Conv(conv) => {
                    let shape = conv.weight.shape();
                    fill(&by_name, &mut used, &mut problems, format!("{name}.weight"), shape, &mut |d| {
                        conv.weight.data_mut().copy_from_slice(d)
                    });
                }
                Op::Fc(fc) => {
                    let shape = fc.weight.shape();
                    fill(&by_name, &mut used, &mut problems, format!("{name}.weight"), shape, &mut |d| {
                        fc.weight.data_mut().copy_from_slice(d)
                    });
                    let blen = fc.bias.len();
                    fill(&by_name, &mut used, &mut problems, format!("{name}.bias"), [1, 1, 1, blen], &mut |d| {
                        fc.bias.copy_from_slice(d)
                    });
                }
                Op::Bn(bn) => {
                    let c = bn.gamma.len();
                    fill(&by_name, &mut used, &mut problems, format!("{name}.gamma"), [1, 1, 1, c], &mut |d| {
                        bn.gamma.copy_from_slice(d)
                    });
                    fill(&by_name, &mut used, &mut problems, format!("{name}.beta"), [1, 1, 1, c], &mut |d| {
                        bn.beta.copy_from_slice(d)
                    });
                    fill(&by_name, &mut used, &mut problems, format!("{name}.running_mean"), [1, 1, 1, c], &mut |d| {
                        bn.running_mean.copy_from_slice(d)
                    });
                    fill(&by_name, &mut used, &mut problems, format!("{name}.running_var"), [1, 1, 1, c], &mut |d| {
                        bn.running_var.copy_from_slice(d)
                    });
                }
                Op::Act(ActOp::Pa(pa)) => {
                    let n = pa.n;
                    let v = by_name.get(format!("{name}.v").as_str()).copied();
                    let beta = by_name.get(format!("{name}.beta").as_str()).copied();
                    let lambda = by_name.get(format!("{name}.lambda").as_str()).copied();
                    match (v, beta, lambda) {
                        (Some(v), Some(beta), Some(lambda)) => {
                            used.insert(v.name.clone());
                            used.insert(beta.name.clone());
                            used.insert(lambda.name.clone());
                            if v.data.len() != n || beta.data.len() != n || lambda.data.len() != 2 {
                                problems.push(format!(
                                    "{name}: quantizer records sized for n={}, net has n={n}",
                                    v.data.len()
                                ));
                            } else {
                                match crate::activations::ActivationQuantizerState::new(
                                    v.data.clone(),
                                    beta.data.clone(),
                                    lambda.data[0],
                                    lambda.data[1],
                                ) {
                                    Ok(state) => pa.install(state),
                                    Err(e) => problems.push(format!("{name}: {e}")),
                                }
                            }
                        }
                        (None, None, None) if !strict => {}
                        _ => problems.push(format!("{name}: incomplete activation-quantizer records")),
                    }
                }
                _ => {}
            }
        }
        if strict {
            for r in records {
                if !used.contains(r.name.as_str()) {
                    problems.push(format!("{}: not used by this net", r.name));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint does not match net: {}",
                problems.join("; ")
            )))
        }
    }
}

/// Builds nodes in topological order; `input()` is node 0.
pub struct NetBuilder {
    nodes: Vec<Node>,
}

impl NetBuilder {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                inputs: Vec::new(),
                op: Op::Input,
            }],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    fn push(&mut self, name: &str, inputs: Vec<usize>, op: Op) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            inputs,
            op,
        });
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        from: usize,
        weight: Tensor,
        stride: usize,
        pad: usize,
        policy: QuantPolicy,
        lambda_w: f32,
    ) -> usize {
        self.push(name, vec![from], Op::Conv(ConvOp::new(weight, stride, pad, policy, lambda_w)))
    }

    pub fn bn(&mut self, name: &str, from: usize, channels: usize) -> usize {
        self.push(name, vec![from], Op::Bn(BnOp::new(channels)))
    }

    pub fn act(&mut self, name: &str, from: usize, op: ActOp) -> usize {
        self.push(name, vec![from], Op::Act(op))
    }

    pub fn maxpool2(&mut self, name: &str, from: usize) -> usize {
        self.push(name, vec![from], Op::MaxPool2)
    }

    pub fn global_avg_pool(&mut self, name: &str, from: usize) -> usize {
        self.push(name, vec![from], Op::GlobalAvgPool)
    }

    pub fn fc(
        &mut self,
        name: &str,
        from: usize,
        weight: Tensor,
        bias: Vec<f32>,
        policy: QuantPolicy,
        lambda_w: f32,
    ) -> usize {
        self.push(name, vec![from], Op::Fc(FcOp::new(weight, bias, policy, lambda_w)))
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> usize {
        self.push(name, vec![a, b], Op::Add)
    }

    pub fn finish(self, output: usize) -> Net {
        Net {
            nodes: self.nodes,
            output,
        }
    }
}

/// Net-level construction knobs. `policy` applies to the interior layers;
/// first conv and final classifier stay real-valued.
#[derive(Debug, Clone, Copy)]
pub struct NetConfig {
    pub policy: QuantPolicy,
    pub lambda_w: f32,
    pub lambda_a: f32,
    /// Fixed top-piece half-width for activation quantizers; `None` calibrates
    /// it from the first batch.
    pub lambda_delta: Option<f32>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            policy: QuantPolicy::Real,
            lambda_w: 1.0,
            lambda_a: 1.0,
            lambda_delta: None,
            seed: 0,
        }
    }
}

fn act_for(cfg: &NetConfig) -> ActOp {
    match cfg.policy {
        QuantPolicy::Real => ActOp::Relu,
        QuantPolicy::Pa { n, .. } => {
            ActOp::Pa(PaAct::new(n, cfg.lambda_a).with_lambda_delta(cfg.lambda_delta))
        }
        QuantPolicy::SignBinary => ActOp::Sign,
    }
}

fn kaiming(rng: &mut ChaCha20Rng, shape: [usize; 4]) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| normal.sample(rng) as f32).collect())
        .expect("shape matches data")
}

/// Two conv + two FC net for 28x28 single-channel inputs, quantized interior.
pub fn lenet(cfg: &NetConfig) -> Result<Net> {
    validate_policy(cfg.policy)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut b = NetBuilder::new();
    let x = b.input();
    let w1 = kaiming(&mut rng, [6, 1, 5, 5]);
    let c1 = b.conv("conv1", x, w1, 1, 2, QuantPolicy::Real, cfg.lambda_w);
    let b1 = b.bn("bn1", c1, 6);
    let p1 = b.maxpool2("pool1", b1);
    let a1 = b.act("act1", p1, act_for(cfg));
    let w2 = kaiming(&mut rng, [16, 6, 5, 5]);
    let c2 = b.conv("conv2", a1, w2, 1, 0, cfg.policy, cfg.lambda_w);
    let b2 = b.bn("bn2", c2, 16);
    let p2 = b.maxpool2("pool2", b2);
    let a2 = b.act("act2", p2, act_for(cfg));
    let w3 = kaiming(&mut rng, [120, 400, 1, 1]);
    let f1 = b.fc("fc1", a2, w3, vec![0.0; 120], cfg.policy, cfg.lambda_w);
    let b3 = b.bn("bn3", f1, 120);
    let a3 = b.act("act3", b3, act_for(cfg));
    let w4 = kaiming(&mut rng, [10, 120, 1, 1]);
    let f2 = b.fc("fc2", a3, w4, vec![0.0; 10], QuantPolicy::Real, cfg.lambda_w);
    Ok(b.finish(f2))
}

#[allow(clippy::too_many_arguments)]
fn basic_block(
    b: &mut NetBuilder,
    rng: &mut ChaCha20Rng,
    cfg: &NetConfig,
    prefix: &str,
    from: usize,
    cin: usize,
    cout: usize,
    stride: usize,
) -> usize {
    let w1 = kaiming(rng, [cout, cin, 3, 3]);
    let c1 = b.conv(&format!("{prefix}.conv1"), from, w1, stride, 1, cfg.policy, cfg.lambda_w);
    let n1 = b.bn(&format!("{prefix}.bn1"), c1, cout);
    let a1 = b.act(&format!("{prefix}.act1"), n1, act_for(cfg));
    let w2 = kaiming(rng, [cout, cout, 3, 3]);
    let c2 = b.conv(&format!("{prefix}.conv2"), a1, w2, 1, 1, cfg.policy, cfg.lambda_w);
    let n2 = b.bn(&format!("{prefix}.bn2"), c2, cout);
    let shortcut = if stride != 1 || cin != cout {
        // The 1x1 projection follows the block policy, so it is binarized in
        // quantized nets.
        let wd = kaiming(rng, [cout, cin, 1, 1]);
        let ds = b.conv(&format!("{prefix}.downsample"), from, wd, stride, 0, cfg.policy, cfg.lambda_w);
        b.bn(&format!("{prefix}.downsample_bn"), ds, cout)
    } else {
        from
    };
    let sum = b.add(&format!("{prefix}.add"), n2, shortcut);
    b.act(&format!("{prefix}.act2"), sum, act_for(cfg))
}

/// Three-stage residual net (16/32/64 channels, three blocks each) for 32x32
/// three-channel inputs.
pub fn resnet20(cfg: &NetConfig) -> Result<Net> {
    validate_policy(cfg.policy)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut b = NetBuilder::new();
    let x = b.input();
    let w1 = kaiming(&mut rng, [16, 3, 3, 3]);
    let c1 = b.conv("conv1", x, w1, 1, 1, QuantPolicy::Real, cfg.lambda_w);
    let n1 = b.bn("bn1", c1, 16);
    let mut cur = b.act("act1", n1, act_for(cfg));
    let mut cin = 16;
    for (stage, (ch, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
        for block in 0..3 {
            let s = if block == 0 { stride } else { 1 };
            let prefix = format!("layer{}.{}", stage + 1, block);
            cur = basic_block(&mut b, &mut rng, cfg, &prefix, cur, cin, ch, s);
            cin = ch;
        }
    }
    let pooled = b.global_avg_pool("avgpool", cur);
    let wf = kaiming(&mut rng, [10, 64, 1, 1]);
    let fc = b.fc("fc", pooled, wf, vec![0.0; 10], QuantPolicy::Real, cfg.lambda_w);
    Ok(b.finish(fc))
}

fn validate_policy(policy: QuantPolicy) -> Result<()> {
    if let QuantPolicy::Pa { m, n } = policy {
        if m < 2 || m % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "weight base count must be even and >= 2, got {m}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidConfig(
                "activation base count must be >= 1".into(),
            ));
        }
    }
    Ok(())
}

pub fn build_net(arch: &str, cfg: &NetConfig) -> Result<Net> {
    match arch {
        "lenet" => lenet(cfg),
        "resnet20" => resnet20(cfg),
        _ => Err(Error::UnknownArch {
            name: arch.into(),
            known: NET_ARCHS.to_vec(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn batch(rng: &mut ChaCha20Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn lenet_shapes_flow_through() {
        let mut net = lenet(&NetConfig::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = batch(&mut rng, [3, 1, 28, 28]);
        let tape = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(net.output_of(&tape).shape(), [3, 10, 1, 1]);
    }

    #[test]
    fn resnet20_shapes_flow_through() {
        let mut net = resnet20(&NetConfig::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = batch(&mut rng, [2, 3, 32, 32]);
        let tape = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(net.output_of(&tape).shape(), [2, 10, 1, 1]);
    }

    #[test]
    fn quantized_lenet_trains_one_step() {
        let cfg = NetConfig {
            policy: QuantPolicy::Pa { m: 4, n: 3 },
            ..NetConfig::default()
        };
        let mut net = lenet(&cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = batch(&mut rng, [4, 1, 28, 28]);
        net.zero_grads();
        let tape = net.forward(&x, Mode::Train).unwrap();
        let out = net.output_of(&tape).clone();
        let grad = out.map(|v| v * 2.0 / out.len() as f32); // d/dy of mean square
        net.backward(&tape, grad).unwrap();
        let has_nonzero = net
            .params_mut()
            .iter()
            .any(|p| p.grad.iter().any(|&g| g != 0.0));
        assert!(has_nonzero);
        net.post_step().unwrap();
    }

    #[test]
    fn residual_join_accumulates_gradients_from_both_paths() {
        // y = x + x doubles the gradient on the shared input.
        let mut b = NetBuilder::new();
        let x = b.input();
        let sum = b.add("join", x, x);
        let mut net = b.finish(sum);
        let input = Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let tape = net.forward(&input, Mode::Train).unwrap();
        assert_eq!(net.output_of(&tape).data(), &[2.0, 4.0]);
        net.backward(&tape, Tensor::new([1, 1, 1, 2], vec![1.0, 1.0]).unwrap())
            .unwrap();
    }

    #[test]
    fn unknown_arch_is_rejected() {
        let err = build_net("alexnet", &NetConfig::default()).unwrap_err();
        assert!(err.to_string().contains("lenet"));
    }

    #[test]
    fn odd_weight_base_count_is_rejected() {
        let cfg = NetConfig {
            policy: QuantPolicy::Pa { m: 3, n: 2 },
            ..NetConfig::default()
        };
        assert!(lenet(&cfg).is_err());
    }

    #[test]
    fn param_names_are_stable_and_unique() {
        let mut net = resnet20(&NetConfig {
            policy: QuantPolicy::Pa { m: 4, n: 5 },
            ..NetConfig::default()
        })
        .unwrap();
        let names: Vec<String> = net.params_mut().iter().map(|p| p.name.clone()).collect();
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(names.len(), unique.len());
        assert!(names.contains(&"layer2.0.downsample.weight".to_string()));
    }

    #[test]
    fn checkpoint_round_trip_restores_forward() {
        let cfg = NetConfig {
            policy: QuantPolicy::Pa { m: 4, n: 3 },
            seed: 9,
            ..NetConfig::default()
        };
        let mut net = lenet(&cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = batch(&mut rng, [2, 1, 28, 28]);
        net.forward(&x, Mode::Train).unwrap(); // calibrate quantizers
        let records = net.state_records();

        let mut restored = lenet(&NetConfig { seed: 77, ..cfg }).unwrap();
        restored.load_records(&records, true).unwrap();
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = restored.forward(&x, Mode::Eval).unwrap();
        assert_eq!(net.output_of(&a).data(), restored.output_of(&b).data());
    }

    #[test]
    fn strict_load_reports_missing_and_mismatched_slots() {
        let cfg = NetConfig::default();
        let net = lenet(&cfg).unwrap();
        let mut records = net.state_records();
        records.retain(|r| r.name != "conv2.weight");
        records[0].shape = [9, 9, 9, 9];
        let err = lenet(&cfg).unwrap().load_records(&records, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2.weight"), "{msg}");
        assert!(msg.contains("shape"), "{msg}");
    }

    #[test]
    fn lenient_load_accepts_full_precision_twin() {
        let fp = lenet(&NetConfig::default()).unwrap();
        let records = fp.state_records();
        let mut pa = lenet(&NetConfig {
            policy: QuantPolicy::Pa { m: 8, n: 7 },
            ..NetConfig::default()
        })
        .unwrap();
        pa.load_records(&records, false).unwrap();
        // Weights copied; activation quantizers still await calibration.
        let x = Tensor::zeros([1, 1, 28, 28]);
        assert!(pa.forward(&x, Mode::Eval).is_err());
    }

    #[test]
    fn binary_forward_matches_dense_on_quantized_lenet() {
        let cfg = NetConfig {
            policy: QuantPolicy::Pa { m: 4, n: 3 },
            seed: 5,
            ..NetConfig::default()
        };
        let mut net = lenet(&cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let calib = batch(&mut rng, [4, 1, 28, 28]);
        net.forward(&calib, Mode::Train).unwrap();
        let x = batch(&mut rng, [2, 1, 28, 28]);
        let dense = net.forward(&x, Mode::Eval).unwrap();
        let packed = net.forward_binary(&x).unwrap();
        let (a, b) = (net.output_of(&dense), net.output_of(&packed));
        let scale = a.data().iter().fold(1f32, |m, v| m.max(v.abs()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-4 * scale, "{x} vs {y}");
        }
    }
}
