use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{poly_lr, AdamW};
use super::{Mode, SegNet};
use crate::error::{invalid, Error, Result};
use crate::pseudo::{argmax_onehot, PseudoLabel};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            classes: super::DEFAULT_CLASSES,
            epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            poly_power: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

pub(crate) fn stack_batch(items: &[&(Tensor, PseudoLabel)]) -> Result<(Tensor, Vec<u16>)> {
    let images: Vec<&Tensor> = items.iter().map(|(x, _)| x).collect();
    let labels = items.iter().flat_map(|(_, l)| l.data.iter().copied()).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Supervised cross-entropy training on labeled `(3, H, W)` crops.
pub fn pretrain_source(data: &[(Tensor, PseudoLabel)], cfg: &PretrainConfig) -> Result<(SegNet, PretrainReport)> {
    if data.is_empty() {
        return Err(invalid("empty pretraining set"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut net = SegNet::new(cfg.classes, cfg.seed)?;
    let mut opt = AdamW::new(net.params(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut report = PretrainReport::default();
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&(Tensor, PseudoLabel)> = chunk.iter().map(|&i| &data[i]).collect();
            let (x, labels) = stack_batch(&items)?;
            let mut g = Graph::new();
            let pv = net.register(&mut g, true);
            let xv = g.constant(&x);
            let out = net.forward(&mut g, &pv, xv, Mode::Train)?;
            let loss = g.cross_entropy(out.logits, &labels, cfg.classes as u16)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss at epoch {epoch}, seed {}",
                    cfg.seed
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = pv.0.iter().map(|&v| g.grad(v)).collect();
            let lr = poly_lr(cfg.lr, iter, total, cfg.poly_power);
            let trainable = net.trainable().to_vec();
            opt.step(net.params_mut(), &grads, &trainable, lr)?;
            net.apply_bn_updates(&out.bn_updates);
            sum += value;
            iter += 1;
        }
        let mean = sum / per_epoch as f64;
        info!("pretrain epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    Ok((net, report))
}

/// Eval-mode pixel accuracy over labeled samples, ignoring the ignore id.
pub fn pixel_accuracy(net: &SegNet, data: &[(Tensor, PseudoLabel)]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, label) in data {
        let batch = Tensor::stack(&[x])?;
        let (logits, _) = net.predict(&batch, 1)?;
        let logits = logits.reshape(&logits.shape()[1..])?;
        let pred = argmax_onehot(&logits)?;
        for (&p, &t) in pred.data.iter().zip(&label.data) {
            if (t as usize) < label.k {
                total += 1;
                correct += usize::from(p == t);
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyReduction("pixel_accuracy"));
    }
    Ok(correct as f64 / total as f64)
}
