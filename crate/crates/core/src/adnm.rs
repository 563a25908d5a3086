//! Adaptive dynamic neighbor masks.
//!
//! A shallow pointwise autoencoder reconstructs every timestamp of a window.
//! The timestamps with the largest reconstruction errors become seeds; each
//! seed's attention row then blocks itself and the neighbors whose channel
//! vectors stay correlated with it, up to a fixed cap on either side.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ceil_count, WindowBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{sgd_step, ParamSet, Tensor};

/// Pointwise autoencoder `C → ⌈C/2⌉ → C` with a ReLU bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct AeParams {
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

impl AeParams {
    pub fn hidden_width(channels: usize) -> usize {
        channels.div_ceil(2)
    }

    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let h = Self::hidden_width(channels);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
                .expect("init shape")
        };
        Self {
            enc_w: uniform(&[channels, h], channels),
            enc_b: uniform(&[h], channels),
            dec_w: uniform(&[h, channels], h),
            dec_b: uniform(&[channels], h),
        }
    }

    pub fn channels(&self) -> usize {
        self.enc_w.rows()
    }

    pub fn to_param_set(&self) -> ParamSet {
        [
            ("dec_b", &self.dec_b),
            ("dec_w", &self.dec_w),
            ("enc_b", &self.enc_b),
            ("enc_w", &self.enc_w),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
    }

    pub fn from_param_set(params: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("autoencoder parameter `{name}` missing")))
        };
        let ae = Self {
            enc_w: get("enc_w")?,
            enc_b: get("enc_b")?,
            dec_w: get("dec_w")?,
            dec_b: get("dec_b")?,
        };
        let (c, h) = (ae.enc_w.rows(), ae.enc_w.cols());
        if ae.enc_b.shape() != [h] || ae.dec_w.shape() != [h, c] || ae.dec_b.shape() != [c] {
            return Err(Error::invalid("autoencoder parameter shapes are inconsistent"));
        }
        Ok(ae)
    }

    /// `decoder(ReLU(encoder(x)))` for every row of `window`.
    pub fn reconstruct(&self, window: &Tensor) -> Result<Tensor> {
        let c = self.channels();
        if window.cols() != c {
            return Err(Error::invalid(format!(
                "window has {} channels, autoencoder expects {c}",
                window.cols()
            )));
        }
        let h = self.enc_b.len();
        let mut hidden = vec![0.0; h];
        let mut out = Vec::with_capacity(window.len());
        for row in 0..window.rows() {
            let x = window.row(row);
            for (j, hv) in hidden.iter_mut().enumerate() {
                let z = self.enc_b.data()[j] + (0..c).map(|k| x[k] * self.enc_w.get(k, j)).sum::<f64>();
                *hv = z.max(0.0);
            }
            for k in 0..c {
                out.push(self.dec_b.data()[k] + (0..h).map(|j| hidden[j] * self.dec_w.get(j, k)).sum::<f64>());
            }
        }
        Tensor::matrix(window.rows(), c, out)
    }
}

struct AeGraph {
    graph: Graph,
    loss: crate::graph::NodeId,
}

fn ae_graph(params: &AeParams, rows: usize) -> Result<AeGraph> {
    let c = params.channels();
    let mut g = Graph::new();
    let x = g.input("x", &[rows, c])?;
    let enc_w = g.param("enc_w", params.enc_w.clone(), true)?;
    let enc_b = g.param("enc_b", params.enc_b.clone(), true)?;
    let dec_w = g.param("dec_w", params.dec_w.clone(), true)?;
    let dec_b = g.param("dec_b", params.dec_b.clone(), true)?;
    let h = g.affine(x, enc_w, enc_b)?;
    let h = g.relu(h)?;
    let y = g.affine(h, dec_w, dec_b)?;
    let loss = g.mse(y, x)?;
    Ok(AeGraph { graph: g, loss })
}

/// Outcome of [`train_autoencoder`]: final parameters plus the mean training
/// MSE before training (index 0) and after each epoch.
#[derive(Clone, Debug)]
pub struct AeTraining {
    pub params: AeParams,
    pub loss_history: Vec<f64>,
}

/// SGD on the mean squared reconstruction error, one step per window, windows
/// visited in a seeded random order each epoch.
pub fn train_autoencoder(windows: &WindowBatch, epochs: usize, lr: f64, seed: u64) -> Result<AeTraining> {
    if windows.is_empty() {
        return Err(Error::invalid("autoencoder training needs at least one window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = AeParams::init(windows.channels(), &mut rng);
    let AeGraph { mut graph, loss } = ae_graph(&init, windows.window)?;
    let mean_loss = |g: &Graph| -> Result<f64> {
        let mut total = 0.0;
        for w in &windows.windows {
            total += g.evaluate(loss, &[("x", w)])?.item();
        }
        Ok(total / windows.len() as f64)
    };
    let mut history = vec![mean_loss(&graph)?];
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (_, grads) = graph.evaluate_and_backprop(loss, &[("x", &windows.windows[i])])?;
            sgd_step(graph.params_mut(), &grads, lr)?;
        }
        history.push(mean_loss(&graph)?);
    }
    Ok(AeTraining {
        params: AeParams::from_param_set(graph.params())?,
        loss_history: history,
    })
}

/// Per-timestamp channel-mean squared reconstruction error.
pub fn reconstruction_error(params: &AeParams, window: &Tensor) -> Result<Vec<f64>> {
    let recon = params.reconstruct(window)?;
    Ok(row_mse(window, &recon))
}

pub(crate) fn row_mse(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let c = a.cols();
    (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / c as f64
        })
        .collect()
}

/// Pearson correlation of two equally long vectors; 0 when either is constant.
pub fn pearson(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "pearson: length mismatch");
    let n = u.len() as f64;
    if u.is_empty() {
        return 0.0;
    }
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut cov, mut vu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        cov += da * db;
        vu += da * da;
        vv += db * db;
    }
    if vu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    (cov / (vu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)
}

/// A `W × W` attention mask (`true` = blocked) with per-row mask scales.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    size: usize,
    blocked: Vec<bool>,
    scales: Vec<usize>,
    seeds: Vec<usize>,
}

impl MaskMatrix {
    /// Nothing blocked: plain attention.
    pub fn none(size: usize) -> Self {
        Self {
            size,
            blocked: vec![false; size * size],
            scales: vec![0; size],
            seeds: Vec::new(),
        }
    }

    /// Rebuilds a mask from seeds and their scales, applying the same
    /// blocking and visibility rules as [`build_mask`].
    pub fn from_seeds(size: usize, seeds: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::none(size);
        for &(seed, scale) in seeds {
            if seed >= size {
                return Err(Error::invalid(format!("seed {seed} outside window of size {size}")));
            }
            if mask.seeds.contains(&seed) {
                return Err(Error::invalid(format!("seed {seed} listed twice")));
            }
            mask.seeds.push(seed);
            mask.scales[seed] = scale;
            mask.block_row(seed, scale);
        }
        mask.seeds.sort_unstable();
        Ok(mask)
    }

    fn block_row(&mut self, i: usize, scale: usize) {
        let w = self.size;
        let lo = i.saturating_sub(scale);
        let hi = (i + scale).min(w - 1);
        let row = &mut self.blocked[i * w..(i + 1) * w];
        row[lo..=hi].iter_mut().for_each(|b| *b = true);
        if row.iter().all(|&b| b) {
            // keep one visible column: the farthest from the seed
            let far = (0..w).max_by_key(|&j| (j.abs_diff(i), std::cmp::Reverse(j))).expect("w > 0");
            row[far] = false;
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.size + col]
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn seeds(&self) -> &[usize] {
        &self.seeds
    }

    /// 0/1 tensor form for the attention graph input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.size, self.size],
            self.blocked.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }
}

/// Builds the neighbor mask for one window.
///
/// Seeds are the `⌈r·W⌉` largest errors (ties to the lower index). From each
/// seed, the left and right sides grow one step at a time while the Pearson
/// correlation between the seed row and the candidate row exceeds `rho`, the
/// distance stays within `cap` and the index stays inside the window. The
/// seed's scale is the longer of the two reaches and its row blocks
/// `[i - m, i + m]`. A single-channel window has no usable correlation, so
/// every seed gets the full `cap`.
pub fn build_mask(errors: &[f64], window: &Tensor, ratio: f64, rho: f64, cap: usize) -> Result<MaskMatrix> {
    let w = errors.len();
    if window.rows() != w {
        return Err(Error::invalid(format!(
            "{} errors for a window of {} rows",
            w,
            window.rows()
        )));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("anomaly ratio must lie in [0, 1), got {ratio}")));
    }
    if !rho.is_finite() {
        return Err(Error::invalid("pearson threshold must be finite"));
    }
    let n_seeds = ceil_count(ratio * w as f64);
    if n_seeds >= w {
        return Err(Error::invalid(format!(
            "ratio {ratio} selects {n_seeds} seeds in a window of {w}; at least one row must stay unseeded"
        )));
    }
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let single_channel = window.cols() < 2;

    let seeds: Vec<(usize, usize)> = order[..n_seeds]
        .iter()
        .map(|&i| {
            let scale = if single_channel {
                cap
            } else {
                let reach = |step: &dyn Fn(usize) -> Option<usize>| {
                    let mut k = 0;
                    while k < cap {
                        match step(k + 1) {
                            Some(j) if pearson(window.row(i), window.row(j)) > rho => k += 1,
                            _ => break,
                        }
                    }
                    k
                };
                let left = reach(&|k| i.checked_sub(k));
                let right = reach(&|k| Some(i + k).filter(|&j| j < w));
                left.max(right)
            };
            (i, scale)
        })
        .collect();
    MaskMatrix::from_seeds(w, &seeds)
}

/// Masks for every window in a batch, using autoencoder errors.
pub fn masks_for_windows(
    ae: &AeParams,
    windows: &WindowBatch,
    ratio: f64,
    rho: f64,
    cap: usize,
) -> Result<Vec<MaskMatrix>> {
    windows
        .windows
        .iter()
        .map(|win| build_mask(&reconstruction_error(ae, win)?, win, ratio, rho, cap))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(windows: Vec<Tensor>) -> WindowBatch {
        let window = windows[0].rows();
        let offsets = (0..windows.len()).map(|k| k * window).collect();
        WindowBatch {
            window,
            windows,
            offsets,
        }
    }

    #[test]
    fn zero_data_is_learned() {
        let b = batch(vec![Tensor::zeros(&[20, 1]); 4]);
        let trained = train_autoencoder(&b, 300, 0.1, 3).unwrap();
        let err = reconstruction_error(&trained.params, &b.windows[0]).unwrap();
        assert!(err.iter().all(|&e| e < 1e-8), "{err:?}");
    }

    #[test]
    fn training_is_seeded() {
        let w = Tensor::from_fn(10, 3, |i, c| ((i + c) as f64).sin());
        let b = batch(vec![w.clone(), w]);
        let a = train_autoencoder(&b, 2, 1e-3, 11).unwrap();
        let again = train_autoencoder(&b, 2, 1e-3, 11).unwrap();
        assert_eq!(a.params, again.params);
        assert_eq!(AeParams::hidden_width(3), 2);
        assert_eq!(a.params.enc_w.shape(), &[3, 2]);
    }

    #[test]
    fn perfect_and_single_offset_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ae = AeParams::init(4, &mut rng);
        let x = Tensor::from_fn(6, 4, |i, c| (i * 4 + c) as f64 * 0.1);
        let recon = ae.reconstruct(&x).unwrap();
        assert!(row_mse(&recon, &recon).iter().all(|&e| e == 0.0));
        let mut off = recon.clone();
        off.set(2, 1, off.get(2, 1) + 0.5);
        let e = row_mse(&off, &recon);
        assert_abs_diff_eq!(e[2], 0.25 / 4.0, epsilon = 1e-15);
        assert!(e.iter().enumerate().all(|(i, &v)| i == 2 || v == 0.0));
    }

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[4.0, 3.0, 2.0]), -1.0, epsilon = 1e-15);
        // cov = 3, var_u = 2, var_v = 14/3 (sums of squares)
        let expected = 3.0 / (2.0f64 * (14.0 / 3.0)).sqrt();
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.9820, epsilon = 1e-4);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn zero_ratio_gives_plain_attention() {
        let x = Tensor::from_fn(8, 3, |i, c| (i + c) as f64);
        let m = build_mask(&[1.0; 8], &x, 0.0, 0.5, 5).unwrap();
        assert_eq!(m, MaskMatrix::none(8));
    }

    #[test]
    fn seed_count_uses_ceiling() {
        let x = Tensor::from_fn(100, 3, |i, c| ((i * 7 + c * 3) % 11) as f64);
        let errors: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let m = build_mask(&errors, &x, 0.042, 0.6, 5).unwrap();
        assert_eq!(m.seeds(), &[95, 96, 97, 98, 99]);
        let m = build_mask(&errors, &x, 0.05, 0.6, 5).unwrap();
        assert_eq!(m.seeds().len(), 5);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let x = Tensor::from_fn(10, 2, |i, c| (i * 2 + c) as f64);
        let m = build_mask(&[0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &x, 0.2, 2.0, 3).unwrap();
        assert_eq!(m.seeds(), &[1, 2]);
    }

    #[test]
    fn left_edge_is_clipped() {
        // every row equals [0, 1, 2] + k so all correlations are exactly 1
        let x = Tensor::from_fn(10, 3, |i, c| (c + i) as f64);
        let mut errors = vec![0.0; 10];
        errors[0] = 1.0;
        let m = build_mask(&errors, &x, 0.1, 0.6, 2).unwrap();
        assert_eq!(m.seeds(), &[0]);
        assert_eq!(m.scales()[0], 2);
        let row: Vec<usize> = (0..10).filter(|&j| m.is_blocked(0, j)).collect();
        assert_eq!(row, vec![0, 1, 2]);
        for i in 1..10 {
            assert!((0..10).all(|j| !m.is_blocked(i, j)));
        }
    }

    #[test]
    fn seed_blocks_itself_when_uncorrelated() {
        let x = Tensor::from_fn(6, 3, |i, c| if i % 2 == 0 { c as f64 } else { -(c as f64) });
        let mut errors = vec![0.0; 6];
        errors[3] = 5.0;
        let m = build_mask(&errors, &x, 0.1, 0.6, 5).unwrap();
        assert_eq!(m.scales()[3], 0);
        let row: Vec<usize> = (0..6).filter(|&j| m.is_blocked(3, j)).collect();
        assert_eq!(row, vec![3]);
    }

    #[test]
    fn single_channel_uses_full_cap() {
        let x = Tensor::from_fn(12, 1, |i, _| i as f64);
        let mut errors = vec![0.0; 12];
        errors[6] = 1.0;
        let m = build_mask(&errors, &x, 0.05, 0.6, 3).unwrap();
        assert_eq!(m.scales()[6], 3);
    }

    #[test]
    fn fully_covered_row_keeps_farthest_column() {
        let x = Tensor::from_fn(4, 3, |i, c| (c + i) as f64);
        let mut errors = vec![0.0; 4];
        errors[0] = 1.0;
        let m = build_mask(&errors, &x, 0.25, 0.1, 5).unwrap();
        assert_eq!(m.scales()[0], 3);
        let row: Vec<bool> = (0..4).map(|j| m.is_blocked(0, j)).collect();
        assert_eq!(row, vec![true, true, true, false]);
    }

    #[test]
    fn degenerate_ratio_rejected() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(build_mask(&[0.0; 4], &x, 0.8, 0.5, 1).is_err());
    }
}
