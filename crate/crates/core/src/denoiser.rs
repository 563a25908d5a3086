//! Transformer-encoder noise predictor with neighbor-masked self-attention.
//!
//! Window rows are tokens. Each token is projected to `d` dimensions and
//! summed with a sinusoidal position code plus the same code evaluated at the
//! diffusion step. `L` post-norm encoder blocks follow (masked multi-head
//! attention, add & norm, ReLU feed-forward, add & norm), then a linear map
//! back to `C` channels. The output projection starts at zero, so an
//! untrained model predicts zero noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adnm::MaskMatrix;
use crate::data::WindowBatch;
use crate::diffusion::{q_sample, standard_normal, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{sgd_step, ParamSet, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub window: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn", self.ffn),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("denoiser {name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::invalid("d_model must be even for sinusoidal conditioning"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Network hyperparameters plus every weight, by name.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub weights: ParamSet,
}

impl DenoiserParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero, layer-norm gains one,
    /// output projection zero.
    pub fn init(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, d, f, dk) = (config.channels, config.d_model, config.ffn, config.head_dim());
        let mut weights = ParamSet::new();
        let mut uniform = |name: String, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            weights.insert(name, Tensor::matrix(rows, cols, data).expect("shape"));
        };
        uniform("in_w".into(), c, d);
        for l in 0..config.layers {
            for h in 0..config.heads {
                for proj in ["wq", "wk", "wv"] {
                    uniform(format!("l{l}.h{h}.{proj}"), d, dk);
                }
                uniform(format!("l{l}.h{h}.wo"), dk, d);
            }
            uniform(format!("l{l}.ff1_w"), d, f);
            uniform(format!("l{l}.ff2_w"), f, d);
        }
        weights.insert("in_b".into(), Tensor::zeros(&[d]));
        for l in 0..config.layers {
            weights.insert(format!("l{l}.attn_b"), Tensor::zeros(&[d]));
            weights.insert(format!("l{l}.ff1_b"), Tensor::zeros(&[f]));
            weights.insert(format!("l{l}.ff2_b"), Tensor::zeros(&[d]));
            for ln in ["ln1", "ln2"] {
                weights.insert(format!("l{l}.{ln}_g"), Tensor::ones(&[d]));
                weights.insert(format!("l{l}.{ln}_b"), Tensor::zeros(&[d]));
            }
        }
        weights.insert("out_w".into(), Tensor::zeros(&[d, c]));
        weights.insert("out_b".into(), Tensor::zeros(&[c]));
        Ok(Self { config, weights })
    }
}

/// Sinusoidal position code over `0..window` plus the same code at step `t`,
/// broadcast to every row.
pub fn embed_conditioning(window: usize, d: usize, t: usize, steps: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid(format!("conditioning width must be even, got {d}")));
    }
    if t > steps {
        return Err(Error::invalid(format!("step {t} exceeds {steps}")));
    }
    let code = |pos: f64, j: usize| {
        let k = (j / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * k / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    Ok(Tensor::from_fn(window, d, |pos, j| code(pos as f64, j) + code(t as f64, j)))
}

/// The denoiser as an evaluable graph.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    steps: usize,
    graph: Graph,
    output: NodeId,
    loss: NodeId,
}

impl Denoiser {
    /// `steps` is the largest diffusion step the model will be conditioned on.
    pub fn new(params: &DenoiserParams, steps: usize) -> Result<Self> {
        let cfg = params.config.clone();
        cfg.validate()?;
        let (w, c, d) = (cfg.window, cfg.channels, cfg.d_model);
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mut g = Graph::new();
        let x = g.input("x", &[w, c])?;
        let cond = g.input("cond", &[w, d])?;
        let mask = g.input("mask", &[w, w])?;
        let target = g.input("target", &[w, c])?;
        let weight = |g: &mut Graph, name: &str| -> Result<NodeId> {
            let value = params
                .weights
                .get(name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("denoiser weight `{name}` missing")))?;
            g.param(name, value, true)
        };

        let in_w = weight(&mut g, "in_w")?;
        let in_b = weight(&mut g, "in_b")?;
        let projected = g.affine(x, in_w, in_b)?;
        let mut h = g.add(projected, cond)?;
        for l in 0..cfg.layers {
            let mut mixed = None;
            for head in 0..cfg.heads {
                let wq = weight(&mut g, &format!("l{l}.h{head}.wq"))?;
                let wk = weight(&mut g, &format!("l{l}.h{head}.wk"))?;
                let wv = weight(&mut g, &format!("l{l}.h{head}.wv"))?;
                let wo = weight(&mut g, &format!("l{l}.h{head}.wo"))?;
                let q = g.matmul(h, wq)?;
                let k = g.matmul(h, wk)?;
                let v = g.matmul(h, wv)?;
                let scores = g.matmul_nt(q, k)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.masked_softmax(scores, mask)?;
                let ctx = g.matmul(attn, v)?;
                let out = g.matmul(ctx, wo)?;
                mixed = Some(match mixed {
                    None => out,
                    Some(acc) => g.add(acc, out)?,
                });
            }
            let attn_b = weight(&mut g, &format!("l{l}.attn_b"))?;
            let attn = g.add_row(mixed.expect("at least one head"), attn_b)?;
            let res = g.add(h, attn)?;
            let (g1, b1) = (weight(&mut g, &format!("l{l}.ln1_g"))?, weight(&mut g, &format!("l{l}.ln1_b"))?);
            h = g.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

            let (w1, bias1) = (weight(&mut g, &format!("l{l}.ff1_w"))?, weight(&mut g, &format!("l{l}.ff1_b"))?);
            let (w2, bias2) = (weight(&mut g, &format!("l{l}.ff2_w"))?, weight(&mut g, &format!("l{l}.ff2_b"))?);
            let ff = g.affine(h, w1, bias1)?;
            let ff = g.relu(ff)?;
            let ff = g.affine(ff, w2, bias2)?;
            let res = g.add(h, ff)?;
            let (g2, b2) = (weight(&mut g, &format!("l{l}.ln2_g"))?, weight(&mut g, &format!("l{l}.ln2_b"))?);
            h = g.layer_norm(res, g2, b2, LAYER_NORM_EPS)?;
        }
        let out_w = weight(&mut g, "out_w")?;
        let out_b = weight(&mut g, "out_b")?;
        let output = g.affine(h, out_w, out_b)?;
        let loss = g.mse(output, target)?;
        if g.params().len() != params.weights.len() {
            return Err(Error::invalid(format!(
                "denoiser expects {} weights, bundle has {}",
                g.params().len(),
                params.weights.len()
            )));
        }
        Ok(Self {
            config: cfg,
            steps,
            graph: g,
            output,
            loss,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn params(&self) -> DenoiserParams {
        DenoiserParams {
            config: self.config.clone(),
            weights: self.graph.params().clone(),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Scalar node: MSE between the network output and the `target` input.
    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub(crate) fn weights_mut(&mut self) -> &mut ParamSet {
        self.graph.params_mut()
    }

    fn check_mask(&self, x: &Tensor, mask: &MaskMatrix) -> Result<()> {
        if x.shape() != [self.config.window, self.config.channels] {
            return Err(Error::invalid(format!(
                "denoiser expects a {}×{} window, got {:?}",
                self.config.window,
                self.config.channels,
                x.shape()
            )));
        }
        if mask.size() != self.config.window {
            return Err(Error::invalid(format!(
                "mask of size {} for window {}",
                mask.size(),
                self.config.window
            )));
        }
        Ok(())
    }

    /// Network output for input `x` conditioned on step `t` (0 for plain reconstruction).
    pub fn forward(&self, x: &Tensor, t: usize, mask: &MaskMatrix) -> Result<Tensor> {
        self.check_mask(x, mask)?;
        let cond = embed_conditioning(self.config.window, self.config.d_model, t, self.steps)?;
        let mask = mask.to_tensor();
        self.graph
            .evaluate(self.output, &[("x", x), ("cond", &cond), ("mask", &mask)])
    }

    /// Loss against `target` and its gradient for every weight.
    pub fn loss_and_grads(&self, x: &Tensor, t: usize, mask: &MaskMatrix, target: &Tensor) -> Result<(f64, ParamSet)> {
        self.check_mask(x, mask)?;
        let cond = embed_conditioning(self.config.window, self.config.d_model, t, self.steps)?;
        let mask = mask.to_tensor();
        let (loss, grads) = self.graph.evaluate_and_backprop(
            self.loss,
            &[("x", x), ("cond", &cond), ("mask", &mask), ("target", target)],
        )?;
        Ok((loss.item(), grads))
    }

    pub fn loss(&self, x: &Tensor, t: usize, mask: &MaskMatrix, target: &Tensor) -> Result<f64> {
        self.check_mask(x, mask)?;
        let cond = embed_conditioning(self.config.window, self.config.d_model, t, self.steps)?;
        let mask = mask.to_tensor();
        Ok(self
            .graph
            .evaluate(self.loss, &[("x", x), ("cond", &cond), ("mask", &mask), ("target", target)])?
            .item())
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, xt: &Tensor, t: usize, mask: &MaskMatrix) -> Result<Tensor> {
        self.forward(xt, t, mask)
    }
}

/// Network prediction for explicit parameters.
pub fn predict_noise(params: &DenoiserParams, steps: usize, xt: &Tensor, t: usize, mask: &MaskMatrix) -> Result<Tensor> {
    Denoiser::new(params, steps)?.forward(xt, t, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 256,
            max_epochs: 10,
            patience: 3,
        }
    }
}

/// What the network learns to output.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Predict the noise injected at a uniformly drawn step.
    Noise(&'a NoiseSchedule),
    /// Reproduce the clean window (step 0 conditioning, no noise).
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Loss of the initial weights on the fixed training and validation draws.
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub history: Vec<EpochStats>,
    /// Epoch whose weights were kept (0 = initial weights).
    pub best_epoch: usize,
}

/// Windows used for validation: the last 10% by index, at least one.
pub fn validation_split(n: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 windows for a validation split, got {n}"
        )));
    }
    Ok(n.div_ceil(10).min(n - 1))
}

struct Sample {
    input: Tensor,
    t: usize,
    target: Tensor,
}

fn draw_sample(objective: Objective<'_>, x0: &Tensor, rng: &mut ChaCha8Rng) -> Result<Sample> {
    match objective {
        Objective::Noise(sched) => {
            let t = rng.random_range(1..=sched.steps());
            let eps = standard_normal(rng, x0.shape());
            Ok(Sample {
                input: q_sample(sched, x0, t, &eps)?,
                t,
                target: eps,
            })
        }
        Objective::Reconstruction => Ok(Sample {
            input: x0.clone(),
            t: 0,
            target: x0.clone(),
        }),
    }
}

/// Minibatch SGD with early stopping on a held-out tail of the windows.
pub fn train_network(
    windows: &WindowBatch,
    masks: &[MaskMatrix],
    objective: Objective<'_>,
    config: DenoiserConfig,
    train: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if masks.len() != windows.len() {
        return Err(Error::invalid(format!(
            "{} masks for {} windows",
            masks.len(),
            windows.len()
        )));
    }
    if train.batch == 0 || !(train.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let n_val = validation_split(windows.len())?;
    let n_train = windows.len() - n_val;
    let steps = match objective {
        Objective::Noise(s) => s.steps(),
        Objective::Reconstruction => 0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = DenoiserParams::init(config, &mut rng)?;
    let mut model = Denoiser::new(&init, steps)?;

    // Fixed draws so losses are comparable across epochs.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    let fixed: Vec<Sample> = windows
        .windows
        .iter()
        .map(|w| draw_sample(objective, w, &mut eval_rng))
        .collect::<Result<_>>()?;
    let eval = |model: &Denoiser, range: std::ops::Range<usize>| -> Result<f64> {
        let len = range.len() as f64;
        let mut total = 0.0;
        for i in range {
            let s = &fixed[i];
            total += model.loss(&s.input, s.t, &masks[i], &s.target)?;
        }
        Ok(total / len)
    };
    let initial_train_loss = eval(&model, 0..n_train)?;
    let initial_val_loss = eval(&model, n_train..windows.len())?;

    let mut best = (initial_val_loss, 0usize, model.params());
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=train.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(train.batch) {
            let mut sum: Option<ParamSet> = None;
            for &i in chunk {
                let s = draw_sample(objective, &windows.windows[i], &mut rng)?;
                let (loss, grads) = model.loss_and_grads(&s.input, s.t, &masks[i], &s.target)?;
                epoch_loss += loss;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            let a = acc.get_mut(&name).expect("same parameter names");
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            let mut mean = sum.expect("non-empty batch");
            let inv = 1.0 / chunk.len() as f64;
            mean.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            sgd_step(model.weights_mut(), &mean, train.lr)?;
        }
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / n_train as f64,
            val_loss: eval(&model, n_train..windows.len())?,
        };
        on_epoch(&stats);
        if stats.val_loss < best.0 {
            best = (stats.val_loss, epoch, model.params());
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(stats);
        if stale >= train.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        initial_train_loss,
        initial_val_loss,
        history,
        best_epoch: best.1,
    })
}

/// Trains the noise predictor on windows and their masks.
pub fn train_denoiser(
    windows: &WindowBatch,
    masks: &[MaskMatrix],
    sched: &NoiseSchedule,
    config: DenoiserConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_network(windows, masks, Objective::Noise(sched), config, train, seed, |_| {})
}
