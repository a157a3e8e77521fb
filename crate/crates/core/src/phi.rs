//! Video-to-energy estimator: a linear projection, two pre-norm
//! transformer encoder blocks, and a four-layer FC head producing one
//! energy value per video segment.

use crate::energy::{energy_mae, resize_nn, EnergyCurve};
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::graph::{Ctx, Eval, Graph, ParamSet};
use crate::numerics::store::{AdamW, Init, ParamStore};
use crate::numerics::{RngState, Tensor};

pub const EMBED_DIM: usize = 768;
pub const N_HEADS: usize = 8;
pub const MLP_RATIO: usize = 4;
pub const MAX_SEGMENTS: usize = 256;
const HEAD_WIDTHS: [usize; 4] = [128, 64, 16, 1];

/// S x C sequence of per-segment video features.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    data: Vec<f64>,
    segments: usize,
    seg_rate: f64,
}

impl VideoEmbedding {
    pub fn new(data: Vec<f64>, segments: usize, seg_rate: f64) -> Result<VideoEmbedding> {
        if segments == 0 || data.len() != segments * EMBED_DIM {
            return Err(Error::shape(format!(
                "video embedding: {} values is not {segments}x{EMBED_DIM}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite video embedding value"));
        }
        if seg_rate <= 0.0 {
            return Err(Error::config("segment rate must be positive".to_string()));
        }
        Ok(VideoEmbedding { data, segments, seg_rate })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Segments per second.
    pub fn seg_rate(&self) -> f64 {
        self.seg_rate
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.segments, EMBED_DIM], self.data.clone())
    }
}

/// The estimator's parameters.
pub struct PhiModel {
    pub store: ParamStore,
}

impl PhiModel {
    pub fn init(seed: u64) -> Result<PhiModel> {
        let root = RngState::new(seed).derive("phi");
        let mut store = ParamStore::new();
        nn::init_linear(&mut store, &root, "proj", EMBED_DIM, EMBED_DIM)?;
        store.init(&root, "pos", &[MAX_SEGMENTS, EMBED_DIM], Init::Normal { std: 0.02 })?;
        for blk in 0..2 {
            let p = format!("block{blk}");
            nn::init_layer_norm(&mut store, &root, &format!("{p}.ln1"), EMBED_DIM)?;
            for w in ["wq", "wk", "wv", "wo"] {
                nn::init_linear(&mut store, &root, &format!("{p}.attn.{w}"), EMBED_DIM, EMBED_DIM)?;
            }
            nn::init_layer_norm(&mut store, &root, &format!("{p}.ln2"), EMBED_DIM)?;
            nn::init_linear(&mut store, &root, &format!("{p}.mlp.fc1"), EMBED_DIM, EMBED_DIM * MLP_RATIO)?;
            nn::init_linear(&mut store, &root, &format!("{p}.mlp.fc2"), EMBED_DIM * MLP_RATIO, EMBED_DIM)?;
        }
        nn::init_layer_norm(&mut store, &root, "head.ln", EMBED_DIM)?;
        let mut fan_in = EMBED_DIM;
        for (i, &width) in HEAD_WIDTHS.iter().enumerate() {
            nn::init_linear(&mut store, &root, &format!("head.fc{i}"), fan_in, width)?;
            fan_in = width;
        }
        // The final width-1 layer starts at zero so an untrained model
        // emits an all-zero curve.
        let last = HEAD_WIDTHS.len() - 1;
        store.set(&format!("head.fc{last}.w"), Tensor::zeros(&[HEAD_WIDTHS[last - 1], 1]))?;
        Ok(PhiModel { store })
    }

    pub fn load(path: &std::path::Path) -> Result<PhiModel> {
        Ok(PhiModel { store: ParamStore::load(path)? })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }
}

/// Shared forward pass; one scalar per segment.
pub fn phi_graph<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, ev: &C::T) -> Result<C::T> {
    let segments = ctx.shape_of(ev)[0];
    if ctx.shape_of(ev)[1] != EMBED_DIM {
        return Err(Error::shape(format!(
            "expected {EMBED_DIM} channels, got {}",
            ctx.shape_of(ev)[1]
        )));
    }
    if segments > MAX_SEGMENTS {
        return Err(Error::shape(format!(
            "sequence of {segments} segments exceeds the positional cap {MAX_SEGMENTS}"
        )));
    }
    let mut x = nn::linear(ctx, set, "proj", ev)?;
    let pos_table = ctx.param(set, "pos")?;
    let pos = ctx.slice_first(&pos_table, 0, segments)?;
    x = ctx.add(&x, &pos)?;

    let head_dim = EMBED_DIM / N_HEADS;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for blk in 0..2 {
        let p = format!("block{blk}");
        let h = nn::layer_norm(ctx, set, &format!("{p}.ln1"), &x)?;
        let q = nn::linear(ctx, set, &format!("{p}.attn.wq"), &h)?;
        let k = nn::linear(ctx, set, &format!("{p}.attn.wk"), &h)?;
        let v = nn::linear(ctx, set, &format!("{p}.attn.wv"), &h)?;
        let mut heads = Vec::with_capacity(N_HEADS);
        for hd in 0..N_HEADS {
            let (c0, c1) = (hd * head_dim, (hd + 1) * head_dim);
            let qh = ctx.slice_last(&q, c0, c1)?;
            let kh = ctx.slice_last(&k, c0, c1)?;
            let vh = ctx.slice_last(&v, c0, c1)?;
            let kt = ctx.transpose(&kh)?;
            let scores = ctx.matmul(&qh, &kt)?;
            let scores = ctx.mul_scalar(&scores, scale)?;
            let attn = ctx.softmax_rows(&scores)?;
            heads.push(ctx.matmul(&attn, &vh)?);
        }
        let cat = ctx.concat_last(&heads)?;
        let attn_out = nn::linear(ctx, set, &format!("{p}.attn.wo"), &cat)?;
        x = ctx.add(&x, &attn_out)?;

        let h = nn::layer_norm(ctx, set, &format!("{p}.ln2"), &x)?;
        let h = nn::linear(ctx, set, &format!("{p}.mlp.fc1"), &h)?;
        let h = ctx.gelu(&h)?;
        let h = nn::linear(ctx, set, &format!("{p}.mlp.fc2"), &h)?;
        x = ctx.add(&x, &h)?;
    }

    let mut h = nn::layer_norm(ctx, set, "head.ln", &x)?;
    for i in 0..HEAD_WIDTHS.len() {
        h = nn::linear(ctx, set, &format!("head.fc{i}"), &h)?;
        if i + 1 < HEAD_WIDTHS.len() {
            h = ctx.gelu(&h)?;
        }
    }
    ctx.reshape(&h, &[segments])
}

/// Deterministic inference over frozen parameters.
pub fn phi_forward(model: &PhiModel, ev: &VideoEmbedding) -> Result<EnergyCurve> {
    let mut ctx = Eval::new();
    let set = ParamSet::frozen(&model.store);
    let x = ctx.constant(ev.tensor());
    let y = phi_graph(&mut ctx, &set, &x)?;
    EnergyCurve::new(y.to_vec(), ev.seg_rate())
}

/// Sum of squared residuals against the target resized to S segments.
pub fn phi_loss(model: &PhiModel, ev: &VideoEmbedding, target: &EnergyCurve) -> Result<f64> {
    let mut ctx = Eval::new();
    let set = ParamSet::frozen(&model.store);
    let x = ctx.constant(ev.tensor());
    let pred = phi_graph(&mut ctx, &set, &x)?;
    let resized = resize_nn(target, ev.segments())?;
    let t = ctx.constant(Tensor::from_parts(vec![ev.segments()], resized.values().to_vec()));
    let d = ctx.sub(&pred, &t)?;
    let sq = ctx.mul(&d, &d)?;
    Ok(ctx.sum_all(&sq)?.item())
}

/// In-graph loss used by the trainer: sum of squared residuals.
fn phi_loss_graph(
    g: &mut Graph,
    set: &ParamSet<'_>,
    ev: &VideoEmbedding,
    target: &EnergyCurve,
) -> Result<crate::numerics::Value> {
    let x = g.constant(ev.tensor());
    let pred = phi_graph(g, set, &x)?;
    let resized = resize_nn(target, ev.segments())?;
    let t = g.constant(Tensor::from_parts(vec![ev.segments()], resized.values().to_vec()));
    let d = g.sub(&pred, &t)?;
    let sq = g.mul(&d, &d)?;
    g.sum_all(&sq)
}

#[derive(Debug, Clone)]
pub struct PhiTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub val_fraction: f64,
    /// Stop once validation normalized energy MAE falls below this.
    pub early_stop_mae: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PhiTrainConfig {
    fn default() -> Self {
        PhiTrainConfig {
            lr: 3e-5,
            steps: 4000,
            batch: 2,
            val_fraction: 0.125,
            early_stop_mae: 0.05,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            seed: 42,
            log_every: 100,
        }
    }
}

/// Single-pass validation: mean normalized energy MAE over the held-out set.
pub fn phi_validation_mae(
    model: &PhiModel,
    val: &[(VideoEmbedding, EnergyCurve)],
) -> Result<f64> {
    let mut acc = 0.0;
    for (ev, target) in val {
        let pred = phi_forward(model, ev)?;
        let resized = resize_nn(target, ev.segments())?;
        acc += energy_mae(&pred, &resized, true)?;
    }
    Ok(acc / val.len() as f64)
}

/// Trains the estimator; returns the model and its final validation MAE.
/// The dataset tail (by `val_fraction`) is held out for validation.
pub fn train_phi(
    dataset: &[(VideoEmbedding, EnergyCurve)],
    cfg: &PhiTrainConfig,
) -> Result<(PhiModel, f64)> {
    if dataset.is_empty() {
        return Err(Error::config("train_phi: empty dataset".to_string()));
    }
    let n_val = ((dataset.len() as f64 * cfg.val_fraction) as usize).min(dataset.len() - 1);
    let (train, val) = dataset.split_at(dataset.len() - n_val);
    let mut model = PhiModel::init(cfg.seed)?;
    let opt = AdamW {
        lr: cfg.lr,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut order_rng = RngState::new(cfg.seed).derive("phi-order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len(); // force an initial shuffle
    let mut val_mae = f64::INFINITY;
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let set = ParamSet::trainable(&model.store);
        let mut batch_loss = None;
        for _ in 0..cfg.batch {
            if cursor >= order.len() {
                // Fisher-Yates reshuffle per epoch.
                for i in (1..order.len()).rev() {
                    let j = order_rng.below(i as u64 + 1) as usize;
                    order.swap(i, j);
                }
                cursor = 0;
            }
            let (ev, target) = &train[order[cursor]];
            cursor += 1;
            let loss = phi_loss_graph(&mut g, &set, ev, target)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(prev) => g.add(&prev, &loss)?,
            });
        }
        let loss = g.mul_scalar(&batch_loss.unwrap(), 1.0 / cfg.batch as f64)?;
        let loss_val = g.value(&loss).item();
        model.store.zero_grads();
        g.backward(loss, &mut model.store)?;
        model.store.adamw_step(&opt)?;

        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            if !val.is_empty() {
                val_mae = phi_validation_mae(&model, val)?;
            }
            eprintln!("train-phi\t{step}\t{loss_val:.6}\t{val_mae:.4}");
            if val_mae < cfg.early_stop_mae {
                break;
            }
        }
    }
    if !val.is_empty() {
        val_mae = phi_validation_mae(&model, val)?;
    }
    Ok((model, val_mae))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_embedding(seed: u64, segments: usize) -> VideoEmbedding {
        let mut rng = RngState::new(seed);
        VideoEmbedding::new(rng.normal_vec(segments * EMBED_DIM), segments, 22.4).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_curve() {
        let model = PhiModel::init(1).unwrap();
        let ev = tiny_embedding(2, 7);
        let out = phi_forward(&model, &ev).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_segment_output_length() {
        let model = PhiModel::init(1).unwrap();
        let ev = tiny_embedding(3, 1);
        assert_eq!(phi_forward(&model, &ev).unwrap().len(), 1);
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        assert!(VideoEmbedding::new(vec![0.0; 100], 1, 22.4).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m1 = PhiModel::init(9).unwrap();
        let m2 = PhiModel::init(9).unwrap();
        let ev = tiny_embedding(4, 5);
        // Break the zero head so the output is nontrivial.
        let mut rng = RngState::new(5);
        let w = Tensor::randn(&[16, 1], &mut rng);
        let mut m1 = m1;
        let mut m2 = m2;
        m1.store.set("head.fc3.w", w.clone()).unwrap();
        m2.store.set("head.fc3.w", w).unwrap();
        let a = phi_forward(&m1, &ev).unwrap();
        let b = phi_forward(&m2, &ev).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn parameter_count_matches_architecture() {
        // proj + positional + 2 blocks + head LN + 4 FC head layers.
        // The reference total for this architecture works out to 15.07M;
        // the count is asserted exactly so accidental width changes fail.
        let model = PhiModel::init(1).unwrap();
        let block = 2 * (2 * EMBED_DIM)
            + 4 * (EMBED_DIM * EMBED_DIM + EMBED_DIM)
            + EMBED_DIM * (EMBED_DIM * MLP_RATIO) + EMBED_DIM * MLP_RATIO
            + (EMBED_DIM * MLP_RATIO) * EMBED_DIM + EMBED_DIM;
        let head = 2 * EMBED_DIM
            + EMBED_DIM * 128 + 128
            + 128 * 64 + 64
            + 64 * 16 + 16
            + 16 + 1;
        let expect = EMBED_DIM * EMBED_DIM + EMBED_DIM
            + MAX_SEGMENTS * EMBED_DIM
            + 2 * block
            + head;
        assert_eq!(model.param_count(), expect);
        assert_eq!(model.param_count(), 15_072_225);
    }

    #[test]
    fn output_is_sensitive_to_its_own_segment() {
        let mut model = PhiModel::init(11).unwrap();
        let mut rng = RngState::new(12);
        model.store.set("head.fc3.w", Tensor::randn(&[16, 1], &mut rng)).unwrap();
        let ev = tiny_embedding(13, 6);
        let base = phi_forward(&model, &ev).unwrap();
        let mut data = ev.data().to_vec();
        for v in &mut data[3 * EMBED_DIM..4 * EMBED_DIM] {
            *v += 0.5;
        }
        let perturbed = VideoEmbedding::new(data, 6, 22.4).unwrap();
        let out = phi_forward(&model, &perturbed).unwrap();
        assert!((out.values()[3] - base.values()[3]).abs() > 1e-9);
    }

    #[test]
    fn loss_zero_when_output_equals_target_and_hand_case() {
        let model = PhiModel::init(1).unwrap();
        let ev = tiny_embedding(21, 2);
        // Zero-init head: prediction is [0, 0].
        let zero_target = EnergyCurve::new(vec![0.0, 0.0], 22.4).unwrap();
        assert_eq!(phi_loss(&model, &ev, &zero_target).unwrap(), 0.0);
        let ones = EnergyCurve::new(vec![1.0, 1.0], 22.4).unwrap();
        assert_eq!(phi_loss(&model, &ev, &ones).unwrap(), 2.0);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut model = PhiModel::init(31).unwrap();
        let mut rng = RngState::new(32);
        model.store.set("head.fc3.w", Tensor::randn(&[16, 1], &mut rng)).unwrap();
        let ev = tiny_embedding(33, 3);
        let target = EnergyCurve::new(vec![0.3, -0.2, 0.5], 22.4).unwrap();

        let mut probe_rng = RngState::new(34);
        // Restrict probes to head parameters by checking them via the
        // store-wide harness (head params included among probes).
        let report = crate::numerics::gradient_check(
            &mut model.store,
            &mut probe_rng,
            48,
            1e-4,
            &mut |s| {
                let mut g = Graph::new();
                let set = ParamSet::trainable(s);
                let x = g.constant(ev.tensor());
                let pred = phi_graph(&mut g, &set, &x)?;
                let t = g.constant(Tensor::from_parts(vec![3], target.values().to_vec()));
                let d = g.sub(&pred, &t)?;
                let sq = g.mul(&d, &d)?;
                let loss = g.sum_all(&sq)?;
                g.backward(loss, s)
            },
            &mut |s| {
                let mut ctx = Eval::new();
                let set = ParamSet::frozen(s);
                let x = ctx.constant(ev.tensor());
                let pred = phi_graph(&mut ctx, &set, &x)?;
                let t = ctx.constant(Tensor::from_parts(vec![3], target.values().to_vec()));
                let d = ctx.sub(&pred, &t)?;
                let sq = ctx.mul(&d, &d)?;
                Ok(ctx.sum_all(&sq)?.item())
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn empty_dataset_is_config_error() {
        assert!(matches!(
            train_phi(&[], &PhiTrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
