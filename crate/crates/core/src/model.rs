//! Desk-scale trainable models whose weight matrices carry a frozen base plus
//! optional factorized updates.
//!
//! Two architectures are supported: multinomial logistic regression (single
//! linear layer) and a two-layer tanh MLP. Each layer's effective weight is
//!
//! ```text
//! W_eff = base
//!       + alpha * (A + alpha_A A_d A_u)(B + alpha_B B_d B_u)   // update pair,
//!                                                              // nested factors
//!                                                              // when present
//!       + alpha_per * L * U                                    // personal pair
//! ```
//!
//! Gradients are analytic (chain rule through whichever factors the active
//! selector marks trainable) and are checked against central finite
//! differences in the tests. Biases are always trained full-rank.

use rand::SeedableRng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::{LowRankPair, NestedLowRankPair};
use crate::seeds::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

/// Which parameters the optimizer is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSelector {
    /// The frozen-base weights themselves plus biases (FedAvg, pFedLoRA
    /// global phase).
    FullWeight,
    /// The (A, B) update factors plus biases.
    Update,
    /// The four nested factors plus biases.
    Nested,
    /// The personal (L, U) factors only.
    Personal,
    /// Base weights, personal factors, and biases jointly.
    FullAndPersonal,
}

/// One linear layer with a frozen base and optional factorized updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub base: Matrix,
    pub bias: Vec<f64>,
    pub update: Option<LowRankPair>,
    pub nested: Option<NestedLowRankPair>,
    pub personal: Option<LowRankPair>,
    pub activation: Activation,
}

impl Layer {
    pub fn d_in(&self) -> usize {
        self.base.rows()
    }

    pub fn d_out(&self) -> usize {
        self.base.cols()
    }

    /// Materializes base + update(+nested) + personal contributions.
    pub fn effective_weight(&self) -> Result<Matrix> {
        let mut w = self.base.clone();
        if let Some(update) = &self.update {
            match &self.nested {
                Some(nested) => {
                    let a = nested.apply_to_a(update.a())?;
                    let b = nested.apply_to_b(update.b())?;
                    w.add_scaled(&a.matmul(&b)?, update.alpha())?;
                }
                None => {
                    w.add_scaled(&update.a().matmul(update.b())?, update.alpha())?;
                }
            }
        }
        if let Some(personal) = &self.personal {
            w.add_scaled(&personal.a().matmul(personal.b())?, personal.alpha())?;
        }
        Ok(w)
    }
}

/// A stack of layers; predictions are logits over `d_y` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    layers: Vec<Layer>,
}

impl FactorizedModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].d_out(),
                    pair[1].d_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Multinomial logistic regression with zero-initialized weights.
    pub fn logistic(d_x: usize, classes: usize) -> Self {
        Self {
            layers: vec![Layer {
                base: Matrix::zeros(d_x, classes),
                bias: vec![0.0; classes],
                update: None,
                nested: None,
                personal: None,
                activation: Activation::Identity,
            }],
        }
    }

    /// Seeded Gaussian base init (std 1/sqrt(d_in) per layer), zero biases.
    /// `dims` lists layer sizes, e.g. [16, 32, 10]; hidden layers use tanh.
    pub fn seeded(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Input("need input and output dims".into()));
        }
        let mut rng = Rng64::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let last = i + 2 == dims.len();
            layers.push(Layer {
                base: Matrix::gaussian(d_in, d_out, 1.0 / (d_in as f64).sqrt(), &mut rng),
                bias: vec![0.0; d_out],
                update: None,
                nested: None,
                personal: None,
                activation: if last {
                    Activation::Identity
                } else {
                    Activation::Tanh
                },
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    /// Logits for a batch (rows are samples).
    pub fn forward(&self, batch_inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(batch_inputs)?.activations.pop().unwrap())
    }

    fn forward_trace(&self, batch_inputs: &Matrix) -> Result<Trace> {
        if batch_inputs.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "input width {} does not match model input {}",
                batch_inputs.cols(),
                self.d_in()
            )));
        }
        let mut activations = vec![batch_inputs.clone()];
        for layer in &self.layers {
            let w = layer.effective_weight()?;
            let mut z = activations.last().unwrap().matmul(&w)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(layer.bias.iter()) {
                    *v += b;
                }
            }
            if layer.activation == Activation::Tanh {
                for v in z.data_mut().iter_mut() {
                    *v = v.tanh();
                }
            }
            activations.push(z);
        }
        Ok(Trace { activations })
    }
}

struct Trace {
    /// activations[0] is the input batch; activations[l+1] is layer l's
    /// post-activation output.
    activations: Vec<Matrix>,
}

/// Per-layer gradients for whichever factors are trainable.
#[derive(Debug, Clone, Default)]
pub struct LayerGradients {
    pub w: Option<Matrix>,
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
    pub a_down: Option<Matrix>,
    pub a_up: Option<Matrix>,
    pub b_down: Option<Matrix>,
    pub b_up: Option<Matrix>,
    pub l: Option<Matrix>,
    pub u: Option<Matrix>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean softmax cross-entropy of a batch.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let p = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::Data(format!("label {label} out of range")));
        }
        loss -= p.get(r, label).max(1e-300).ln();
    }
    Ok(loss / labels.len() as f64)
}

/// Mean loss and analytic gradients for the selected trainable factors.
pub fn loss_and_grad(
    model: &FactorizedModel,
    batch_inputs: &Matrix,
    batch_labels: &[usize],
    selector: TrainSelector,
) -> Result<(f64, Gradients)> {
    if batch_labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if batch_inputs.rows() != batch_labels.len() {
        return Err(Error::Shape(format!(
            "{} input rows for {} labels",
            batch_inputs.rows(),
            batch_labels.len()
        )));
    }
    let trace = model.forward_trace(batch_inputs)?;
    let logits = trace.activations.last().unwrap();
    let d_y = model.d_out();
    for &l in batch_labels {
        if l >= d_y {
            return Err(Error::Data(format!("label {l} out of range for {d_y} classes")));
        }
    }
    let loss = cross_entropy(logits, batch_labels)?;

    // dL/dlogits = (softmax - onehot) / batch
    let batch = batch_labels.len() as f64;
    let mut delta = softmax_rows(logits);
    for (r, &label) in batch_labels.iter().enumerate() {
        let v = delta.get(r, label);
        delta.set(r, label, v - 1.0);
    }
    let delta = delta.scale(1.0 / batch);

    let mut grads = Gradients {
        layers: vec![LayerGradients::default(); model.layers.len()],
    };
    let mut upstream = delta;
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let input = &trace.activations[l];
        let grad_w_eff = input.transpose().matmul(&upstream)?;
        let bias_grad: Vec<f64> = (0..layer.d_out())
            .map(|c| (0..upstream.rows()).map(|r| upstream.get(r, c)).sum())
            .collect();
        grads.layers[l] = factor_gradients(layer, &grad_w_eff, bias_grad, selector)?;

        if l > 0 {
            let w = layer.effective_weight()?;
            let mut g_prev = upstream.matmul(&w.transpose())?;
            // Backprop through the previous layer's activation;
            // activations[l] is that layer's post-activation output.
            if model.layers[l - 1].activation == Activation::Tanh {
                for r in 0..g_prev.rows() {
                    for c in 0..g_prev.cols() {
                        let h = trace.activations[l].get(r, c);
                        let v = g_prev.get(r, c) * (1.0 - h * h);
                        g_prev.set(r, c, v);
                    }
                }
            }
            upstream = g_prev;
        }
    }
    Ok((loss, grads))
}

fn factor_gradients(
    layer: &Layer,
    grad_w_eff: &Matrix,
    bias_grad: Vec<f64>,
    selector: TrainSelector,
) -> Result<LayerGradients> {
    let mut out = LayerGradients::default();
    match selector {
        TrainSelector::FullWeight => {
            out.w = Some(grad_w_eff.clone());
            out.bias = Some(bias_grad);
        }
        TrainSelector::Update => {
            let update = layer
                .update
                .as_ref()
                .ok_or_else(|| Error::Input("no update pair to train".into()))?;
            if layer.nested.is_some() {
                return Err(Error::Input(
                    "update selector with nested factors attached; train the nested factors"
                        .into(),
                ));
            }
            let alpha = update.alpha();
            out.a = Some(grad_w_eff.matmul(&update.b().transpose())?.scale(alpha));
            out.b = Some(update.a().transpose().matmul(grad_w_eff)?.scale(alpha));
            out.bias = Some(bias_grad);
        }
        TrainSelector::Nested => {
            let update = layer
                .update
                .as_ref()
                .ok_or_else(|| Error::Input("no update pair to train".into()))?;
            let nested = layer
                .nested
                .as_ref()
                .ok_or_else(|| Error::Input("no nested factors to train".into()))?;
            let alpha = update.alpha();
            let a_eff = nested.apply_to_a(update.a())?;
            let b_eff = nested.apply_to_b(update.b())?;
            let grad_a_eff = grad_w_eff.matmul(&b_eff.transpose())?.scale(alpha);
            let grad_b_eff = a_eff.transpose().matmul(grad_w_eff)?.scale(alpha);
            out.a_down = Some(
                grad_a_eff
                    .matmul(&nested.a_up().transpose())?
                    .scale(nested.alpha_a()),
            );
            out.a_up = Some(
                nested
                    .a_down()
                    .transpose()
                    .matmul(&grad_a_eff)?
                    .scale(nested.alpha_a()),
            );
            out.b_down = Some(
                grad_b_eff
                    .matmul(&nested.b_up().transpose())?
                    .scale(nested.alpha_b()),
            );
            out.b_up = Some(
                nested
                    .b_down()
                    .transpose()
                    .matmul(&grad_b_eff)?
                    .scale(nested.alpha_b()),
            );
            out.bias = Some(bias_grad);
        }
        TrainSelector::Personal => {
            let personal = layer
                .personal
                .as_ref()
                .ok_or_else(|| Error::Input("no personal pair to train".into()))?;
            let alpha = personal.alpha();
            out.l = Some(grad_w_eff.matmul(&personal.b().transpose())?.scale(alpha));
            out.u = Some(personal.a().transpose().matmul(grad_w_eff)?.scale(alpha));
        }
        TrainSelector::FullAndPersonal => {
            let personal = layer
                .personal
                .as_ref()
                .ok_or_else(|| Error::Input("no personal pair to train".into()))?;
            let alpha = personal.alpha();
            out.w = Some(grad_w_eff.clone());
            out.l = Some(grad_w_eff.matmul(&personal.b().transpose())?.scale(alpha));
            out.u = Some(personal.a().transpose().matmul(grad_w_eff)?.scale(alpha));
            out.bias = Some(bias_grad);
        }
    }
    Ok(out)
}

/// SGD-with-momentum state plus a cosine-annealing schedule over rounds.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub cycle: usize,
    velocity: Vec<LayerGradients>,
}

impl OptimizerState {
    pub fn new(lr_max: f64, lr_min: f64, momentum: f64, cycle: usize) -> Result<Self> {
        if !(lr_max >= 0.0) || lr_min < 0.0 || lr_min > lr_max {
            return Err(Error::Input(format!(
                "bad learning-rate range [{lr_min}, {lr_max}]"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Input(format!("momentum {momentum} not in [0, 1)")));
        }
        if cycle == 0 {
            return Err(Error::Input("cosine cycle must be positive".into()));
        }
        Ok(Self {
            lr_max,
            lr_min,
            momentum,
            cycle,
            velocity: Vec::new(),
        })
    }

    /// Cosine annealing: lr(0) = lr_max, lr(cycle) = lr_min; constant at
    /// lr_min past the cycle.
    pub fn learning_rate(&self, round: usize) -> f64 {
        let t = round.min(self.cycle) as f64 / self.cycle as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.clear();
    }

    /// One SGD step: v <- mu v + g; p <- p - lr v. Only parameters with a
    /// gradient move; the frozen base is untouched unless selected.
    pub fn step(&mut self, model: &mut FactorizedModel, grads: &Gradients, lr: f64) -> Result<()> {
        if self.velocity.len() != grads.layers.len() {
            self.velocity = vec![LayerGradients::default(); grads.layers.len()];
        }
        for ((layer, grad), vel) in model
            .layers
            .iter_mut()
            .zip(grads.layers.iter())
            .zip(self.velocity.iter_mut())
        {
            step_matrix(&mut layer.base, &grad.w, &mut vel.w, self.momentum, lr)?;
            if let Some(update) = layer.update.as_mut() {
                step_matrix(update.a_mut(), &grad.a, &mut vel.a, self.momentum, lr)?;
                step_matrix(update.b_mut(), &grad.b, &mut vel.b, self.momentum, lr)?;
            }
            if let Some(nested) = layer.nested.as_mut() {
                let (ad, au, bd, bu) = nested.factors_mut();
                step_matrix(ad, &grad.a_down, &mut vel.a_down, self.momentum, lr)?;
                step_matrix(au, &grad.a_up, &mut vel.a_up, self.momentum, lr)?;
                step_matrix(bd, &grad.b_down, &mut vel.b_down, self.momentum, lr)?;
                step_matrix(bu, &grad.b_up, &mut vel.b_up, self.momentum, lr)?;
            }
            if let Some(personal) = layer.personal.as_mut() {
                step_matrix(personal.a_mut(), &grad.l, &mut vel.l, self.momentum, lr)?;
                step_matrix(personal.b_mut(), &grad.u, &mut vel.u, self.momentum, lr)?;
            }
            if let Some(bias_grad) = &grad.bias {
                if bias_grad.len() != layer.bias.len() {
                    return Err(Error::Shape("bias gradient shape".into()));
                }
                let vel_bias = vel
                    .bias
                    .get_or_insert_with(|| vec![0.0; bias_grad.len()]);
                for ((p, g), v) in layer
                    .bias
                    .iter_mut()
                    .zip(bias_grad.iter())
                    .zip(vel_bias.iter_mut())
                {
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        Ok(())
    }
}

fn step_matrix(
    param: &mut Matrix,
    grad: &Option<Matrix>,
    velocity: &mut Option<Matrix>,
    momentum: f64,
    lr: f64,
) -> Result<()> {
    let Some(g) = grad else { return Ok(()) };
    if g.rows() != param.rows() || g.cols() != param.cols() {
        return Err(Error::Shape(format!(
            "gradient {}x{} for parameter {}x{}",
            g.rows(),
            g.cols(),
            param.rows(),
            param.cols()
        )));
    }
    let v = velocity.get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
    for (vij, gij) in v.data_mut().iter_mut().zip(g.data().iter()) {
        *vij = momentum * *vij + gij;
    }
    param.add_scaled(v, -lr)?;
    Ok(())
}

/// Shuffled mini-batch training for `epochs` passes over the given sample
/// indices. Returns the mean loss over all processed batches (or a single
/// evaluation pass when no batch runs).
pub fn train_epochs(
    model: &mut FactorizedModel,
    optimizer: &mut OptimizerState,
    dataset: &Dataset,
    indices: &[usize],
    selector: TrainSelector,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut Rng64,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    if batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = indices.to_vec();
    let mut total_loss = 0.0;
    let mut batches = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks_mut(batch_size) {
            // The shuffle decides batch membership; canonical order within a
            // batch keeps gradients independent of the draw order.
            chunk.sort_unstable();
            let batch = dataset.gather(chunk)?;
            let (loss, grads) = loss_and_grad(model, batch.inputs(), batch.labels(), selector)?;
            optimizer.step(model, &grads, lr)?;
            total_loss += loss;
            batches += 1;
        }
    }
    if batches == 0 {
        let subset = dataset.gather(indices)?;
        if subset.is_empty() {
            return Err(Error::Data("empty shard".into()));
        }
        let logits = model.forward(subset.inputs())?;
        return cross_entropy(&logits, subset.labels());
    }
    Ok(total_loss / batches as f64)
}

/// Fraction of correctly classified samples.
pub fn accuracy(model: &FactorizedModel, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("accuracy over an empty index set".into()));
    }
    let subset = dataset.gather(indices)?;
    let logits = model.forward(subset.inputs())?;
    let mut correct = 0usize;
    for (r, &label) in subset.labels().iter().enumerate() {
        let row = logits.row(r);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Mean loss of the model over the given samples, no training.
pub fn mean_loss(model: &FactorizedModel, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let subset = dataset.gather(indices)?;
    if subset.is_empty() {
        return Err(Error::Data("loss over an empty index set".into()));
    }
    let logits = model.forward(subset.inputs())?;
    cross_entropy(&logits, subset.labels())
}

/// Exact dense Hessian of the mean multinomial-logistic loss with respect to
/// the flattened (W, b) parameters, evaluated at the model's effective
/// weights. Parameter layout: W row-major (feature-major), then biases.
pub fn exact_hessian(model: &FactorizedModel, dataset: &Dataset, indices: &[usize]) -> Result<Matrix> {
    if model.layers.len() != 1 || model.layers[0].activation != Activation::Identity {
        return Err(Error::UnsupportedArchitecture(
            "exact Hessian requires single-layer logistic regression".into(),
        ));
    }
    let d_x = model.d_in();
    let classes = model.d_out();
    let d = d_x * classes + classes;
    if d > 2000 {
        return Err(Error::Size(format!(
            "Hessian dimension {d} exceeds the dense limit 2000"
        )));
    }
    if indices.is_empty() {
        return Err(Error::Data("Hessian over an empty index set".into()));
    }
    let subset = dataset.gather(indices)?;
    let logits = model.forward(subset.inputs())?;
    let probs = softmax_rows(&logits);
    let n = indices.len() as f64;
    let mut h = Matrix::zeros(d, d);
    // Augmented feature vector v = (x, 1); H += (v v^T) kron (diag(p) - p p^T) / n.
    let mut v = vec![0.0; d_x + 1];
    for s in 0..subset.len() {
        v[..d_x].copy_from_slice(subset.inputs().row(s));
        v[d_x] = 1.0;
        let p = probs.row(s);
        for i in 0..=d_x {
            if v[i] == 0.0 {
                continue;
            }
            for j in 0..=d_x {
                let scale = v[i] * v[j] / n;
                if scale == 0.0 {
                    continue;
                }
                let row_base = i * classes;
                let col_base = j * classes;
                for c in 0..classes {
                    let pc = p[c];
                    for c2 in 0..classes {
                        let s_cc = if c == c2 { pc * (1.0 - pc) } else { -pc * p[c2] };
                        let cur = h.get(row_base + c, col_base + c2);
                        h.set(row_base + c, col_base + c2, cur + scale * s_cc);
                    }
                }
            }
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: ordered matrix blocks, each introduced by a
// manifest line "layer_index kind rows cols".
// ---------------------------------------------------------------------------

impl FactorizedModel {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("layers {}\n", self.layers.len()));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "meta {i} {} {} {} {} {}\n",
                layer.activation.name(),
                layer
                    .update
                    .as_ref()
                    .map_or("-".to_string(), |u| format!("{}", u.alpha())),
                layer
                    .personal
                    .as_ref()
                    .map_or("-".to_string(), |p| format!("{}", p.alpha())),
                layer
                    .nested
                    .as_ref()
                    .map_or("-".to_string(), |n| format!("{}", n.alpha_a())),
                layer
                    .nested
                    .as_ref()
                    .map_or("-".to_string(), |n| format!("{}", n.alpha_b())),
            ));
            push_block(&mut out, i, "base", &layer.base);
            let bias = Matrix::new(1, layer.bias.len(), layer.bias.clone()).unwrap();
            push_block(&mut out, i, "bias", &bias);
            if let Some(u) = &layer.update {
                push_block(&mut out, i, "update_a", u.a());
                push_block(&mut out, i, "update_b", u.b());
            }
            if let Some(n) = &layer.nested {
                push_block(&mut out, i, "nested_a_down", n.a_down());
                push_block(&mut out, i, "nested_a_up", n.a_up());
                push_block(&mut out, i, "nested_b_down", n.b_down());
                push_block(&mut out, i, "nested_b_up", n.b_up());
            }
            if let Some(p) = &layer.personal {
                push_block(&mut out, i, "personal_l", p.a());
                push_block(&mut out, i, "personal_u", p.b());
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing checkpoint header".into()))?;
        let count: usize = header
            .strip_prefix("layers ")
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad checkpoint header {header:?}")))?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let meta = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing meta line for layer {i}")))?;
            let toks: Vec<&str> = meta.split_whitespace().collect();
            if toks.len() != 7 || toks[0] != "meta" {
                return Err(Error::Parse(format!("bad meta line {meta:?}")));
            }
            let activation = Activation::parse(toks[2])?;
            let alpha_update = parse_opt(toks[3])?;
            let alpha_personal = parse_opt(toks[4])?;
            let alpha_a = parse_opt(toks[5])?;
            let alpha_b = parse_opt(toks[6])?;

            let mut blocks: Vec<(String, Matrix)> = Vec::new();
            while let Some(peek) = lines.peek() {
                if peek.starts_with("meta ") {
                    break;
                }
                let manifest = lines.next().unwrap();
                let t: Vec<&str> = manifest.split_whitespace().collect();
                if t.len() != 4 {
                    return Err(Error::Parse(format!("bad manifest line {manifest:?}")));
                }
                let rows: usize = t[2]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad manifest line {manifest:?}")))?;
                let cols: usize = t[3]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad manifest line {manifest:?}")))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let line = lines
                        .next()
                        .ok_or_else(|| Error::Parse("truncated block".into()))?;
                    for tok in line.split_whitespace() {
                        data.push(
                            tok.parse()
                                .map_err(|_| Error::Parse(format!("bad entry {tok:?}")))?,
                        );
                    }
                }
                blocks.push((t[1].to_string(), Matrix::new(rows, cols, data)?));
            }
            let take = |name: &str, blocks: &mut Vec<(String, Matrix)>| -> Option<Matrix> {
                let pos = blocks.iter().position(|(k, _)| k == name)?;
                Some(blocks.remove(pos).1)
            };
            let base = take("base", &mut blocks)
                .ok_or_else(|| Error::Parse(format!("layer {i} missing base block")))?;
            let bias = take("bias", &mut blocks)
                .ok_or_else(|| Error::Parse(format!("layer {i} missing bias block")))?;
            let update = match (take("update_a", &mut blocks), take("update_b", &mut blocks)) {
                (Some(a), Some(b)) => Some(LowRankPair::new(
                    a,
                    b,
                    alpha_update.ok_or_else(|| Error::Parse("update without alpha".into()))?,
                )?),
                (None, None) => None,
                _ => return Err(Error::Parse("unpaired update block".into())),
            };
            let nested = match (
                take("nested_a_down", &mut blocks),
                take("nested_a_up", &mut blocks),
                take("nested_b_down", &mut blocks),
                take("nested_b_up", &mut blocks),
            ) {
                (Some(ad), Some(au), Some(bd), Some(bu)) => Some(NestedLowRankPair::new(
                    ad,
                    au,
                    bd,
                    bu,
                    alpha_a.ok_or_else(|| Error::Parse("nested without alpha_a".into()))?,
                    alpha_b.ok_or_else(|| Error::Parse("nested without alpha_b".into()))?,
                )?),
                (None, None, None, None) => None,
                _ => return Err(Error::Parse("incomplete nested blocks".into())),
            };
            let personal = match (
                take("personal_l", &mut blocks),
                take("personal_u", &mut blocks),
            ) {
                (Some(l), Some(u)) => Some(LowRankPair::new(
                    l,
                    u,
                    alpha_personal.ok_or_else(|| Error::Parse("personal without alpha".into()))?,
                )?),
                (None, None) => None,
                _ => return Err(Error::Parse("unpaired personal block".into())),
            };
            layers.push(Layer {
                base,
                bias: bias.data().to_vec(),
                update,
                nested,
                personal,
                activation,
            });
        }
        Self::new(layers)
    }
}

fn push_block(out: &mut String, layer: usize, kind: &str, m: &Matrix) {
    out.push_str(&format!("{layer} {kind} {} {}\n", m.rows(), m.cols()));
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn parse_opt(tok: &str) -> Result<Option<f64>> {
    if tok == "-" {
        return Ok(None);
    }
    tok.parse()
        .map(Some)
        .map_err(|_| Error::Parse(format!("bad alpha token {tok:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::lowrank::default_init_scale;
    use rand::Rng;

    fn rng(seed: u64) -> Rng64 {
        Rng64::seed_from_u64(seed)
    }

    fn random_pair(m: usize, n: usize, r: usize, alpha: f64, rng: &mut Rng64) -> LowRankPair {
        LowRankPair::new(
            Matrix::gaussian(m, r, 0.6, rng),
            Matrix::gaussian(r, n, 0.6, rng),
            alpha,
        )
        .unwrap()
    }

    fn random_nested(
        m: usize,
        n: usize,
        r: usize,
        ra: usize,
        rb: usize,
        rng: &mut Rng64,
    ) -> NestedLowRankPair {
        NestedLowRankPair::new(
            Matrix::gaussian(m, ra, 0.5, rng),
            Matrix::gaussian(ra, r, 0.5, rng),
            Matrix::gaussian(r, rb, 0.5, rng),
            Matrix::gaussian(rb, n, 0.5, rng),
            0.8,
            1.2,
        )
        .unwrap()
    }

    /// A single-layer model with every factor family attached.
    fn rich_layer_model(rng: &mut Rng64, with_nested: bool, with_personal: bool) -> FactorizedModel {
        let (d_in, d_out, r) = (5usize, 3usize, 2usize);
        let mut layer = Layer {
            base: Matrix::gaussian(d_in, d_out, 0.7, rng),
            bias: (0..d_out).map(|_| rng.random_range(-0.5..0.5)).collect(),
            update: Some(random_pair(d_in, d_out, r, 1.5, rng)),
            nested: None,
            personal: None,
            activation: Activation::Identity,
        };
        if with_nested {
            layer.nested = Some(random_nested(d_in, d_out, r, 1, 1, rng));
        }
        if with_personal {
            layer.personal = Some(random_pair(d_in, d_out, 2, 0.9, rng));
        }
        FactorizedModel::new(vec![layer]).unwrap()
    }

    fn random_batch(n: usize, d_in: usize, d_out: usize, rng: &mut Rng64) -> (Matrix, Vec<usize>) {
        let x = Matrix::gaussian(n, d_in, 1.0, rng);
        let labels = (0..n).map(|_| rng.random_range(0..d_out)).collect();
        (x, labels)
    }

    // ----- parameter plumbing for the finite-difference oracle -----

    #[derive(Debug, Clone, Copy, PartialEq)]
    enum Slot {
        W,
        A,
        B,
        Ad,
        Au,
        Bd,
        Bu,
        L,
        U,
        Bias,
    }

    fn slots_for(selector: TrainSelector) -> Vec<Slot> {
        match selector {
            TrainSelector::FullWeight => vec![Slot::W, Slot::Bias],
            TrainSelector::Update => vec![Slot::A, Slot::B, Slot::Bias],
            TrainSelector::Nested => vec![Slot::Ad, Slot::Au, Slot::Bd, Slot::Bu, Slot::Bias],
            TrainSelector::Personal => vec![Slot::L, Slot::U],
            TrainSelector::FullAndPersonal => vec![Slot::W, Slot::L, Slot::U, Slot::Bias],
        }
    }

    fn slot_len(model: &FactorizedModel, layer: usize, slot: Slot) -> usize {
        let l = &model.layers()[layer];
        match slot {
            Slot::W => l.base.data().len(),
            Slot::A => l.update.as_ref().unwrap().a().data().len(),
            Slot::B => l.update.as_ref().unwrap().b().data().len(),
            Slot::Ad => l.nested.as_ref().unwrap().a_down().data().len(),
            Slot::Au => l.nested.as_ref().unwrap().a_up().data().len(),
            Slot::Bd => l.nested.as_ref().unwrap().b_down().data().len(),
            Slot::Bu => l.nested.as_ref().unwrap().b_up().data().len(),
            Slot::L => l.personal.as_ref().unwrap().a().data().len(),
            Slot::U => l.personal.as_ref().unwrap().b().data().len(),
            Slot::Bias => l.bias.len(),
        }
    }

    fn nudge(model: &mut FactorizedModel, layer: usize, slot: Slot, idx: usize, eps: f64) {
        let l = &mut model.layers_mut()[layer];
        let target: &mut f64 = match slot {
            Slot::W => &mut l.base.data_mut()[idx],
            Slot::A => &mut l.update.as_mut().unwrap().a_mut().data_mut()[idx],
            Slot::B => &mut l.update.as_mut().unwrap().b_mut().data_mut()[idx],
            Slot::Ad => &mut l.nested.as_mut().unwrap().factors_mut().0.data_mut()[idx],
            Slot::Au => &mut l.nested.as_mut().unwrap().factors_mut().1.data_mut()[idx],
            Slot::Bd => &mut l.nested.as_mut().unwrap().factors_mut().2.data_mut()[idx],
            Slot::Bu => &mut l.nested.as_mut().unwrap().factors_mut().3.data_mut()[idx],
            Slot::L => &mut l.personal.as_mut().unwrap().a_mut().data_mut()[idx],
            Slot::U => &mut l.personal.as_mut().unwrap().b_mut().data_mut()[idx],
            Slot::Bias => &mut l.bias[idx],
        };
        *target += eps;
    }

    fn grad_entry(grads: &Gradients, layer: usize, slot: Slot, idx: usize) -> f64 {
        let g = &grads.layers[layer];
        match slot {
            Slot::W => g.w.as_ref().unwrap().data()[idx],
            Slot::A => g.a.as_ref().unwrap().data()[idx],
            Slot::B => g.b.as_ref().unwrap().data()[idx],
            Slot::Ad => g.a_down.as_ref().unwrap().data()[idx],
            Slot::Au => g.a_up.as_ref().unwrap().data()[idx],
            Slot::Bd => g.b_down.as_ref().unwrap().data()[idx],
            Slot::Bu => g.b_up.as_ref().unwrap().data()[idx],
            Slot::L => g.l.as_ref().unwrap().data()[idx],
            Slot::U => g.u.as_ref().unwrap().data()[idx],
            Slot::Bias => g.bias.as_ref().unwrap()[idx],
        }
    }

    /// Central finite differences against the analytic gradient, every slot
    /// of every layer the selector trains.
    fn finite_difference_check(model: &FactorizedModel, selector: TrainSelector, seed: u64) {
        let mut r = rng(seed);
        let (x, labels) = random_batch(6, model.d_in(), model.d_out(), &mut r);
        let (_, grads) = loss_and_grad(model, &x, &labels, selector).unwrap();
        let h = 1e-5;
        for layer in 0..model.layers().len() {
            for slot in slots_for(selector) {
                for idx in 0..slot_len(model, layer, slot) {
                    let mut plus = model.clone();
                    nudge(&mut plus, layer, slot, idx, h);
                    let (lp, _) = loss_and_grad(&plus, &x, &labels, selector).unwrap();
                    let mut minus = model.clone();
                    nudge(&mut minus, layer, slot, idx, -h);
                    let (lm, _) = loss_and_grad(&minus, &x, &labels, selector).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grad_entry(&grads, layer, slot, idx);
                    let scale = an.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        (fd - an).abs() <= 1e-5 * scale,
                        "{selector:?} layer {layer} {slot:?}[{idx}]: fd={fd} analytic={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_zero_model_gives_zero_logits() {
        let model = FactorizedModel::logistic(4, 3);
        let x = Matrix::gaussian(5, 4, 1.0, &mut rng(1));
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits, Matrix::zeros(5, 3));
    }

    #[test]
    fn forward_identity_layer_passes_input() {
        let model = FactorizedModel::new(vec![Layer {
            base: Matrix::identity(4),
            bias: vec![0.0; 4],
            update: None,
            nested: None,
            personal: None,
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Matrix::gaussian(3, 4, 1.0, &mut rng(2));
        assert_eq!(model.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_shape_error() {
        let model = FactorizedModel::logistic(4, 3);
        let x = Matrix::zeros(2, 5);
        assert!(model.forward(&x).is_err());
    }

    #[test]
    fn effective_weight_equivalence() {
        let mut r = rng(3);
        for (nested, personal) in [(false, false), (true, false), (false, true), (true, true)] {
            let model = rich_layer_model(&mut r, nested, personal);
            let w_eff = model.layers()[0].effective_weight().unwrap();
            let plain = FactorizedModel::new(vec![Layer {
                base: w_eff,
                bias: model.layers()[0].bias.clone(),
                update: None,
                nested: None,
                personal: None,
                activation: Activation::Identity,
            }])
            .unwrap();
            let x = Matrix::gaussian(4, 5, 1.0, &mut r);
            let diff = model
                .forward(&x)
                .unwrap()
                .sub(&plain.forward(&x).unwrap())
                .unwrap()
                .max_abs();
            assert!(diff < 1e-12, "nested={nested} personal={personal}: {diff}");
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let model = FactorizedModel::logistic(4, 7);
        let x = Matrix::gaussian(9, 4, 1.0, &mut rng(4));
        let labels = vec![0, 1, 2, 3, 4, 5, 6, 0, 1];
        let (loss, _) = loss_and_grad(&model, &x, &labels, TrainSelector::FullWeight).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_b_gives_zero_grad_a() {
        let mut r = rng(5);
        let pair = LowRankPair::init_random(5, 3, 2, 1.0, 0.4, 6).unwrap();
        let model = FactorizedModel::new(vec![Layer {
            base: Matrix::gaussian(5, 3, 0.5, &mut r),
            bias: vec![0.0; 3],
            update: Some(pair),
            nested: None,
            personal: None,
            activation: Activation::Identity,
        }])
        .unwrap();
        let (x, labels) = random_batch(4, 5, 3, &mut r);
        let (_, grads) = loss_and_grad(&model, &x, &labels, TrainSelector::Update).unwrap();
        assert_eq!(grads.layers[0].a.as_ref().unwrap().max_abs(), 0.0);
        assert!(grads.layers[0].b.as_ref().unwrap().max_abs() > 0.0);
    }

    #[test]
    fn gradcheck_full_weight() {
        let mut r = rng(7);
        let model = rich_layer_model(&mut r, false, false);
        finite_difference_check(&model, TrainSelector::FullWeight, 100);
    }

    #[test]
    fn gradcheck_update_pair() {
        let mut r = rng(8);
        let model = rich_layer_model(&mut r, false, false);
        finite_difference_check(&model, TrainSelector::Update, 101);
    }

    #[test]
    fn gradcheck_nested_factors() {
        let mut r = rng(9);
        let model = rich_layer_model(&mut r, true, false);
        finite_difference_check(&model, TrainSelector::Nested, 102);
    }

    #[test]
    fn gradcheck_personal_pair() {
        let mut r = rng(10);
        let model = rich_layer_model(&mut r, false, true);
        finite_difference_check(&model, TrainSelector::Personal, 103);
    }

    #[test]
    fn gradcheck_full_and_personal() {
        let mut r = rng(11);
        let model = rich_layer_model(&mut r, false, true);
        finite_difference_check(&model, TrainSelector::FullAndPersonal, 104);
    }

    #[test]
    fn gradcheck_mlp_through_tanh() {
        let mut model = FactorizedModel::seeded(&[4, 6, 3], 12).unwrap();
        let mut r = rng(13);
        for layer in model.layers_mut() {
            let (m, n) = (layer.base.rows(), layer.base.cols());
            let rank = 2.min(m.min(n));
            layer.update = Some(random_pair(m, n, rank, 1.0, &mut r));
        }
        finite_difference_check(&model, TrainSelector::Update, 105);
        finite_difference_check(&model, TrainSelector::FullWeight, 106);
    }

    #[test]
    fn sgd_zero_gradient_no_movement() {
        let mut model = FactorizedModel::logistic(3, 2);
        let before = model.clone();
        let grads = Gradients {
            layers: vec![LayerGradients {
                w: Some(Matrix::zeros(3, 2)),
                bias: Some(vec![0.0, 0.0]),
                ..Default::default()
            }],
        };
        let mut opt = OptimizerState::new(0.5, 0.0, 0.9, 10).unwrap();
        opt.step(&mut model, &grads, 0.5).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn sgd_single_step_no_momentum() {
        let mut model = FactorizedModel::logistic(2, 2);
        model.layers_mut()[0].base = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Matrix::new(2, 2, vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let grads = Gradients {
            layers: vec![LayerGradients {
                w: Some(g.clone()),
                ..Default::default()
            }],
        };
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0, 10).unwrap();
        opt.step(&mut model, &grads, 0.1).unwrap();
        let expected = Matrix::new(2, 2, vec![1.0 - 0.05, 2.0 + 0.1, 3.0 - 0.025, 4.0 - 0.2]).unwrap();
        assert!(model.layers()[0].base.sub(&expected).unwrap().max_abs() == 0.0);
    }

    /// Scalar quadratic bowl f(p) = p^2 / 2, driven through the optimizer via
    /// a 1x1 model whose gradient is p itself.
    fn run_bowl(momentum: f64, lr: f64, steps: usize) -> Vec<f64> {
        let mut model = FactorizedModel::logistic(1, 1);
        model.layers_mut()[0].base = Matrix::new(1, 1, vec![1.0]).unwrap();
        let mut opt = OptimizerState::new(lr, 0.0, momentum, 10).unwrap();
        let mut losses = Vec::new();
        for _ in 0..steps {
            let p = model.layers()[0].base.get(0, 0);
            losses.push(0.5 * p * p);
            let grads = Gradients {
                layers: vec![LayerGradients {
                    w: Some(Matrix::new(1, 1, vec![p]).unwrap()),
                    ..Default::default()
                }],
            };
            opt.step(&mut model, &grads, lr).unwrap();
        }
        let p = model.layers()[0].base.get(0, 0);
        losses.push(0.5 * p * p);
        losses
    }

    #[test]
    fn quadratic_bowl_monotone_descent() {
        let losses = run_bowl(0.0, 0.5, 100);
        for w in losses.windows(2) {
            assert!(w[1] < w[0] || w[0] == 0.0, "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(*losses.last().unwrap() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_momentum_converges() {
        let losses = run_bowl(0.9, 0.01, 300);
        assert!(*losses.last().unwrap() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let opt = OptimizerState::new(0.3, 0.01, 0.9, 100).unwrap();
        assert_eq!(opt.learning_rate(0), 0.3);
        assert!((opt.learning_rate(50) - (0.3 + 0.01) / 2.0).abs() < 1e-12);
        assert!((opt.learning_rate(100) - 0.01).abs() < 1e-15);
        assert!((opt.learning_rate(250) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn hessian_single_sample_hand_block() {
        // Zero weights, two classes, x = e1: p = (1/2, 1/2) and
        // S = diag(p) - p p^T = [[1/4, -1/4], [-1/4, 1/4]].
        let model = FactorizedModel::logistic(3, 2);
        let ds = Dataset::new(
            Matrix::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap(),
            vec![0],
            2,
        )
        .unwrap();
        let h = exact_hessian(&model, &ds, &[0]).unwrap();
        // W block for feature 0 equals S; other feature blocks are zero.
        assert!((h.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((h.get(0, 1) + 0.25).abs() < 1e-15);
        assert!((h.get(1, 1) - 0.25).abs() < 1e-15);
        assert_eq!(h.get(2, 2), 0.0);
        // Bias block (last two rows/cols) also equals S.
        let d = 3 * 2;
        assert!((h.get(d, d) - 0.25).abs() < 1e-15);
        assert!((h.get(d, d + 1) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn hessian_symmetric() {
        let ds = generate_synthetic(40, 4, 3, 0.5, 20).unwrap();
        let model = FactorizedModel::logistic(4, 3);
        let idx: Vec<usize> = (0..40).collect();
        let h = exact_hessian(&model, &ds, &idx).unwrap();
        let defect = h.sub(&h.transpose()).unwrap().max_abs();
        assert!(defect < 1e-12);
    }

    #[test]
    fn hessian_matches_finite_difference_of_gradient() {
        let mut r = rng(21);
        let ds = generate_synthetic(12, 3, 2, 0.8, 22).unwrap();
        let mut model = FactorizedModel::logistic(3, 2);
        model.layers_mut()[0].base = Matrix::gaussian(3, 2, 0.4, &mut r);
        model.layers_mut()[0].bias = vec![0.1, -0.2];
        let idx: Vec<usize> = (0..12).collect();
        let h = exact_hessian(&model, &ds, &idx).unwrap();
        let d = 3 * 2 + 2;
        assert_eq!(h.rows(), d);

        let flat_grad = |m: &FactorizedModel| -> Vec<f64> {
            let subset = ds.gather(&idx).unwrap();
            let (_, g) =
                loss_and_grad(m, subset.inputs(), subset.labels(), TrainSelector::FullWeight)
                    .unwrap();
            let mut v = g.layers[0].w.as_ref().unwrap().data().to_vec();
            v.extend_from_slice(g.layers[0].bias.as_ref().unwrap());
            v
        };
        let step = 1e-4;
        for col in 0..d {
            let mut plus = model.clone();
            let mut minus = model.clone();
            if col < 6 {
                plus.layers_mut()[0].base.data_mut()[col] += step;
                minus.layers_mut()[0].base.data_mut()[col] -= step;
            } else {
                plus.layers_mut()[0].bias[col - 6] += step;
                minus.layers_mut()[0].bias[col - 6] -= step;
            }
            let gp = flat_grad(&plus);
            let gm = flat_grad(&minus);
            for row in 0..d {
                let fd = (gp[row] - gm[row]) / (2.0 * step);
                assert!(
                    (fd - h.get(row, col)).abs() < 1e-4,
                    "H[{row},{col}] fd={fd} analytic={}",
                    h.get(row, col)
                );
            }
        }
    }

    #[test]
    fn hessian_positive_semidefinite() {
        let mut r = rng(23);
        let ds = generate_synthetic(60, 5, 4, 0.5, 24).unwrap();
        let mut model = FactorizedModel::logistic(5, 4);
        model.layers_mut()[0].base = Matrix::gaussian(5, 4, 0.8, &mut r);
        let idx: Vec<usize> = (0..60).collect();
        let h = exact_hessian(&model, &ds, &idx).unwrap();
        let eigs = crate::linalg::symmetric_eigenvalues(&h).unwrap();
        assert!(
            eigs.iter().all(|&v| v >= -1e-9),
            "negative eigenvalue {:?}",
            eigs.last()
        );
    }

    #[test]
    fn hessian_rejects_mlp() {
        let model = FactorizedModel::seeded(&[4, 5, 3], 25).unwrap();
        let ds = generate_synthetic(10, 4, 3, 0.5, 26).unwrap();
        assert!(matches!(
            exact_hessian(&model, &ds, &[0, 1]),
            Err(Error::UnsupportedArchitecture(_))
        ));
    }

    #[test]
    fn train_epochs_reduces_loss() {
        let ds = generate_synthetic(200, 6, 4, 0.3, 27).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let mut model = FactorizedModel::logistic(6, 4);
        let mut opt = OptimizerState::new(0.5, 0.0, 0.9, 10).unwrap();
        let before = mean_loss(&model, &ds, &idx).unwrap();
        let mut r = rng(28);
        train_epochs(
            &mut model,
            &mut opt,
            &ds,
            &idx,
            TrainSelector::FullWeight,
            5,
            32,
            0.5,
            &mut r,
        )
        .unwrap();
        let after = mean_loss(&model, &ds, &idx).unwrap();
        assert!(after < before, "loss {before} -> {after}");
        assert!(accuracy(&model, &ds, &idx).unwrap() > 0.5);
    }

    #[test]
    fn train_epochs_zero_epochs_is_noop_eval() {
        let ds = generate_synthetic(50, 4, 3, 0.3, 29).unwrap();
        let idx: Vec<usize> = (0..50).collect();
        let mut model = FactorizedModel::logistic(4, 3);
        let before = model.clone();
        let mut opt = OptimizerState::new(0.1, 0.0, 0.9, 10).unwrap();
        let mut r = rng(30);
        let loss = train_epochs(
            &mut model,
            &mut opt,
            &ds,
            &idx,
            TrainSelector::FullWeight,
            0,
            16,
            0.1,
            &mut r,
        )
        .unwrap();
        assert_eq!(model, before);
        assert!((loss - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_with_all_factors() {
        let mut r = rng(31);
        let model = rich_layer_model(&mut r, true, true);
        let text = model.to_text();
        let back = FactorizedModel::from_text(&text).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn checkpoint_round_trip_mlp() {
        let model = FactorizedModel::seeded(&[4, 6, 3], 32).unwrap();
        let back = FactorizedModel::from_text(&model.to_text()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn default_init_scale_is_inverse_sqrt_rank() {
        assert!((default_init_scale(4) - 0.5).abs() < 1e-15);
    }
}
