//! Parameterized layer blocks: experts, gates, towers, and low-rank feature
//! gates. Each block owns its parameters and binds them onto a [`Tape`] at
//! forward time, so one training step sees every weight exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Activation, BnState, Mode, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("sigmoid gate requires arity 1, got {0}")]
    SigmoidArity(usize),
    #[error("LoRA count {lora_count} must divide gated width {width}")]
    LoraWidth { lora_count: usize, width: usize },
    #[error("normalized experts pair with swish; relu under normalization reproduces the zero-activation pathology and needs the explicit override flag")]
    NormReluRejected,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Trainable parameter block with a stable id (dense, per model) and a
/// hierarchical name used by checkpoints and diagnostics.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: usize,
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    HeUniform,
    GlorotUniform,
}

/// Allocates parameters with sequential ids from a seeded stream, so a
/// rebuild with the same config reproduces the same weights.
pub struct ParamCtx {
    next_id: usize,
    rng: ChaCha8Rng,
}

impl ParamCtx {
    pub fn new(seed: u64) -> Self {
        ParamCtx {
            next_id: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn count(&self) -> usize {
        self.next_id
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> Param {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::HeUniform => {
                let fan_in = shape[0] as f64;
                let bound = (6.0 / fan_in).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::GlorotUniform => {
                let (fan_in, fan_out) = (shape[0] as f64, shape[shape.len() - 1] as f64);
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        Param {
            id,
            name: name.into(),
            value: Tensor::from_vec(shape, data),
        }
    }

    /// Constant-initialized parameter (batch-norm scale starts at 1).
    pub fn alloc_const(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) -> Param {
        let n: usize = shape.iter().product();
        let id = self.next_id;
        self.next_id += 1;
        Param {
            id,
            name: name.into(),
            value: Tensor::from_vec(shape, vec![v; n]),
        }
    }
}

/// Parameter-id → tape-var map for one forward pass.
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new(param_count: usize) -> Self {
        Binding {
            vars: vec![None; param_count],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Param) -> Var {
        debug_assert!(self.vars[p.id].is_none(), "param {} bound twice", p.name);
        let v = tape.param(&p.value);
        self.vars[p.id] = Some(v);
        v
    }
}

impl std::ops::Index<usize> for Binding {
    type Output = Var;
    fn index(&self, id: usize) -> &Var {
        self.vars[id]
            .as_ref()
            .expect("parameter was not bound during forward")
    }
}

pub struct LinearLayer {
    pub w: Param,
    pub b: Param,
}

impl LinearLayer {
    pub fn new(ctx: &mut ParamCtx, prefix: &str, input: usize, output: usize, init: Init) -> Self {
        LinearLayer {
            w: ctx.alloc(format!("{prefix}.w"), vec![input, output], init),
            b: ctx.alloc(format!("{prefix}.b"), vec![output], Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var, TensorError> {
        let w = bind.bind(tape, &self.w);
        let b = bind.bind(tape, &self.b);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Plain MLP: activation after every hidden layer, raw output from the last.
pub struct MlpStack {
    layers: Vec<LinearLayer>,
    hidden_activation: Activation,
}

impl MlpStack {
    /// `dims` runs input → hidden… → output. `head_init` applies to the last
    /// layer (zero for gates/towers buys a uniform-routing fair start).
    pub fn new(
        ctx: &mut ParamCtx,
        prefix: &str,
        dims: &[usize],
        hidden_activation: Activation,
        hidden_init: Init,
        head_init: Init,
    ) -> Self {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let init = if i + 2 == dims.len() {
                head_init
            } else {
                hidden_init
            };
            layers.push(LinearLayer::new(
                ctx,
                &format!("{prefix}.mlp{i}"),
                dims[i],
                dims[i + 1],
                init,
            ));
        }
        MlpStack {
            layers,
            hidden_activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h)?;
            if i != last {
                h = tape.activate(self.hidden_activation, h);
            }
        }
        Ok(h)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

/// Expert output, pre- and post- final activation. With normalization the
/// pre-activation is the batch-norm output.
#[derive(Debug, Clone, Copy)]
pub struct ExpertOut {
    pub pre_act: Var,
    pub post_act: Var,
}

struct BnBlock {
    gamma: Param,
    beta: Param,
    state: BnState,
}

/// Expert network: MLP stack, optional batch normalization of the final
/// representation, then relu or swish.
pub struct ExpertUnit {
    mlp: MlpStack,
    bn: Option<BnBlock>,
    activation: Activation,
}

impl ExpertUnit {
    pub fn new(
        ctx: &mut ParamCtx,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        normalize: bool,
        allow_norm_relu: bool,
    ) -> Result<Self, LayerError> {
        if normalize && activation == Activation::Relu && !allow_norm_relu {
            return Err(LayerError::NormReluRejected);
        }
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mlp = MlpStack::new(
            ctx,
            prefix,
            &dims,
            activation,
            Init::HeUniform,
            Init::HeUniform,
        );
        let bn = normalize.then(|| BnBlock {
            gamma: ctx.alloc_const(format!("{prefix}.bn.gamma"), vec![output], 1.0),
            beta: ctx.alloc_const(format!("{prefix}.bn.beta"), vec![output], 0.0),
            state: BnState::new(output),
        });
        Ok(ExpertUnit {
            mlp,
            bn,
            activation,
        })
    }

    pub fn output_width(&self) -> usize {
        match &self.bn {
            Some(bn) => bn.state.running_mean.len(),
            None => {
                let last = &self.mlp.layers[self.mlp.layers.len() - 1];
                last.w.value.shape()[1]
            }
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        mode: Mode,
    ) -> Result<ExpertOut, LayerError> {
        let z = self.mlp.forward(tape, bind, x)?;
        let pre_act = match &mut self.bn {
            Some(bn) => {
                let gamma = bind.bind(tape, &bn.gamma);
                let beta = bind.bind(tape, &bn.beta);
                tape.batch_norm(z, gamma, beta, &mut bn.state, mode)?
            }
            None => z,
        };
        let post_act = tape.activate(self.activation, pre_act);
        Ok(ExpertOut { pre_act, post_act })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_params(f);
        if let Some(bn) = &mut self.bn {
            f(&mut bn.gamma);
            f(&mut bn.beta);
        }
    }

    pub fn visit_bn_state(&mut self, prefix_f: &mut dyn FnMut(&str, &mut BnState)) {
        if let Some(bn) = &mut self.bn {
            // bn.gamma is "<prefix>.bn.gamma"; reuse the prefix for the state.
            let name = bn.gamma.name.trim_end_matches(".gamma").to_string();
            prefix_f(&name, &mut bn.state);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Softmax,
    Sigmoid,
}

/// Gate network producing per-row expert weights: row-stochastic softmax, or
/// a scalar sigmoid weight when there is only one expert.
pub struct GateUnit {
    mlp: MlpStack,
    arity: usize,
    kind: GateKind,
}

impl GateUnit {
    pub fn new(
        ctx: &mut ParamCtx,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        arity: usize,
        kind: GateKind,
        head_init: Init,
    ) -> Result<Self, LayerError> {
        if kind == GateKind::Sigmoid && arity != 1 {
            return Err(LayerError::SigmoidArity(arity));
        }
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(arity);
        let mlp = MlpStack::new(
            ctx,
            prefix,
            &dims,
            Activation::Relu,
            Init::GlorotUniform,
            head_init,
        );
        Ok(GateUnit { mlp, arity, kind })
    }

    /// Self-gates follow the one-expert-sigmoid / otherwise-softmax rule.
    pub fn new_self_gate(
        ctx: &mut ParamCtx,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        arity: usize,
        head_init: Init,
    ) -> Result<Self, LayerError> {
        let kind = if arity == 1 {
            GateKind::Sigmoid
        } else {
            GateKind::Softmax
        };
        GateUnit::new(ctx, prefix, input, hidden, arity, kind, head_init)
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var, LayerError> {
        let logits = self.mlp.forward(tape, bind, x)?;
        let weights = match self.kind {
            GateKind::Softmax => tape.softmax(logits)?,
            GateKind::Sigmoid => tape.activate(Activation::Sigmoid, logits),
        };
        Ok(weights)
    }

    /// Gate the experts: weights from `x`, then the weighted sum.
    /// Returns (weights, mixture).
    pub fn mix(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        experts: &[Var],
    ) -> Result<(Var, Var), LayerError> {
        let weights = self.forward(tape, bind, x)?;
        let mixed = tape.weighted_sum(weights, experts)?;
        Ok((weights, mixed))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_params(f);
    }
}

/// Task head: MLP ending in one logit, sigmoid output in (0,1).
pub struct TowerUnit {
    mlp: MlpStack,
}

impl TowerUnit {
    pub fn new(
        ctx: &mut ParamCtx,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        head_init: Init,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(1);
        TowerUnit {
            mlp: MlpStack::new(
                ctx,
                prefix,
                &dims,
                Activation::Relu,
                Init::GlorotUniform,
                head_init,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var, LayerError> {
        let logit = self.mlp.forward(tape, bind, x)?;
        Ok(tape.activate(Activation::Sigmoid, logit))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_params(f);
    }
}

/// Low-rank element-wise importance gate: `2·σ(v·(B·A))`, rank(B·A) ≤ d.
/// `B` starts at zero so the gate opens as the identity.
pub struct FeaLoraUnit {
    b: Param,
    a: Param,
}

impl FeaLoraUnit {
    pub fn new(ctx: &mut ParamCtx, prefix: &str, width: usize, rank: usize) -> Self {
        FeaLoraUnit {
            b: ctx.alloc(format!("{prefix}.b"), vec![width, rank], Init::Zeros),
            a: ctx.alloc(
                format!("{prefix}.a"),
                vec![rank, width],
                Init::GlorotUniform,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, v: Var) -> Result<Var, LayerError> {
        let b = bind.bind(tape, &self.b);
        let a = bind.bind(tape, &self.a);
        let low = tape.matmul(v, b)?;
        let full = tape.matmul(low, a)?;
        let sig = tape.activate(Activation::Sigmoid, full);
        Ok(tape.scale(sig, 2.0))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.b);
        f(&mut self.a);
    }
}

/// Feature gate: a softmax mixture of `L` low-rank importance gates, each of
/// rank `width / L`. The result multiplies the features element-wise.
pub struct FeaGate {
    loras: Vec<FeaLoraUnit>,
    gate: GateUnit,
}

impl FeaGate {
    pub fn new(
        ctx: &mut ParamCtx,
        prefix: &str,
        width: usize,
        lora_count: usize,
        gate_hidden: &[usize],
        head_init: Init,
    ) -> Result<Self, LayerError> {
        if lora_count == 0 || !width.is_multiple_of(lora_count) {
            return Err(LayerError::LoraWidth { lora_count, width });
        }
        let rank = width / lora_count;
        let loras = (0..lora_count)
            .map(|i| FeaLoraUnit::new(ctx, &format!("{prefix}.lora{i}"), width, rank))
            .collect();
        let gate = GateUnit::new(
            ctx,
            &format!("{prefix}.gate"),
            width,
            gate_hidden,
            lora_count,
            GateKind::Softmax,
            head_init,
        )?;
        Ok(FeaGate { loras, gate })
    }

    /// Returns (gate weights over LoRAs, importance vector in (0,2)).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bind: &mut Binding,
        v: Var,
    ) -> Result<(Var, Var), LayerError> {
        let outs: Vec<Var> = self
            .loras
            .iter()
            .map(|l| l.forward(tape, bind, v))
            .collect::<Result<_, _>>()?;
        self.gate.mix(tape, bind, v, &outs)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.loras {
            l.visit_params(f);
        }
        self.gate.visit_params(f);
    }
}
