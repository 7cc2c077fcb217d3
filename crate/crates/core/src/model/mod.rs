//! The small segmentation network used for both the source and the target
//! model, its optimizer, checkpoints, and supervised pretraining.

pub mod checkpoint;
pub mod optim;
pub mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cdam::BnStats;
use crate::error::{invalid, Result};
use crate::tensor::{BnMode, Graph, Tensor, Var};

pub use checkpoint::{architecture_hash, load_checkpoint, save_checkpoint};
pub use optim::{poly_lr, AdamW};
pub use pretrain::{pixel_accuracy, pretrain_source, PretrainConfig, PretrainReport};

/// Width of the feature tap.
pub const FEATURE_CHANNELS: usize = 32;
pub const DEFAULT_CLASSES: usize = 8;
pub const BN_MOMENTUM: f32 = 0.1;
/// Name of the batch-norm layer whose running moments anchor the
/// batch-statistics loss.
pub const BNS_LAYER: &str = "bns";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct ConvSpec {
    name: &'static str,
    bn: &'static str,
    cin: usize,
    cout: usize,
    stride: usize,
}

const STAGES: [ConvSpec; 3] = [
    ConvSpec {
        name: "stem.conv",
        bn: "stem.bn",
        cin: 3,
        cout: 16,
        stride: 1,
    },
    ConvSpec {
        name: "down1.conv",
        bn: "down1.bn",
        cin: 16,
        cout: 32,
        stride: 2,
    },
    ConvSpec {
        name: "down2.conv",
        bn: BNS_LAYER,
        cin: 32,
        cout: FEATURE_CHANNELS,
        stride: 2,
    },
];

/// Running moments of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Batch moments observed during a train-mode forward, to be folded into
/// the running statistics with [`SegNet::apply_bn_updates`].
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Graph handles for every parameter of one network.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

pub struct ForwardOut {
    /// `(B, K, H, W)`.
    pub logits: Var,
    /// `(B, 32, H/4, W/4)`: output of the last convolution, before the
    /// `bns` normalization.
    pub features: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// Three conv stages (3->16, 16->32 stride 2, 32->32 stride 2), each
/// followed by batch norm and relu, then a 1x1 class head whose logits are
/// bilinearly upsampled to the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    classes: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
    trainable: Vec<bool>,
    running: Vec<RunningStats>,
}

impl SegNet {
    pub fn new(classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(invalid(format!("need at least two classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut running = Vec::new();
        for st in &STAGES {
            let fan_in = st.cin * 9;
            names.push(format!("{}.weight", st.name));
            params.push(kaiming(&[st.cout, st.cin, 3, 3], fan_in, &mut rng));
            names.push(format!("{}.gamma", st.bn));
            params.push(Tensor::full(&[st.cout], 1.0));
            names.push(format!("{}.beta", st.bn));
            params.push(Tensor::zeros(&[st.cout]));
            running.push(RunningStats {
                name: st.bn.to_string(),
                mean: vec![0.0; st.cout],
                var: vec![1.0; st.cout],
            });
        }
        names.push("head.weight".into());
        params.push(kaiming(&[classes, FEATURE_CHANNELS, 1, 1], FEATURE_CHANNELS, &mut rng));
        names.push("head.bias".into());
        params.push(Tensor::zeros(&[classes]));
        let trainable = vec![true; params.len()];
        Ok(Self {
            classes,
            names,
            params,
            trainable,
            running,
        })
    }

    pub(crate) fn from_parts(
        classes: usize,
        names: Vec<String>,
        params: Vec<Tensor>,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        let reference = Self::new(classes, 0)?;
        if names != reference.names {
            return Err(invalid("parameter names do not match the architecture"));
        }
        for (p, r) in params.iter().zip(&reference.params) {
            if p.shape() != r.shape() {
                return Err(invalid(format!("parameter shape {:?} where {:?} expected", p.shape(), r.shape())));
            }
        }
        let stats_ok = running.len() == reference.running.len()
            && running
                .iter()
                .zip(&reference.running)
                .all(|(a, b)| a.name == b.name && a.mean.len() == b.mean.len() && a.var.len() == b.var.len());
        if params.len() != reference.params.len() || !stats_ok {
            return Err(invalid("checkpoint does not match the architecture"));
        }
        let trainable = vec![true; params.len()];
        Ok(Self {
            classes,
            names,
            params,
            trainable,
            running,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// Running moments of the `bns` layer.
    pub fn bn_stats(&self) -> BnStats {
        let r = self
            .running
            .iter()
            .find(|r| r.name == BNS_LAYER)
            .expect("architecture always contains the bns layer");
        BnStats {
            mean: r.mean.clone(),
            var: r.var.clone(),
        }
    }

    fn scope_indices(&self, scope: &str) -> Result<Vec<usize>> {
        let prefixes: &[&str] = match scope {
            "all" => &[""],
            "encoder" => &["stem.", "down1.", "down2.", "bns."],
            "head" => &["head."],
            "stem" => &["stem."],
            "down1" => &["down1."],
            "down2" => &["down2.", "bns."],
            other => return Err(invalid(format!("unknown parameter scope '{other}'"))),
        };
        Ok((0..self.names.len())
            .filter(|&i| prefixes.iter().any(|p| self.names[i].starts_with(p)))
            .collect())
    }

    /// Excludes a parameter group from optimizer updates.
    pub fn freeze(&mut self, scope: &str) -> Result<()> {
        for i in self.scope_indices(scope)? {
            self.trainable[i] = false;
        }
        Ok(())
    }

    pub fn unfreeze(&mut self, scope: &str) -> Result<()> {
        for i in self.scope_indices(scope)? {
            self.trainable[i] = true;
        }
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.trainable.iter().all(|t| !t)
    }

    /// Registers parameters; trainable ones become differentiable leaves
    /// when `with_grad` is set.
    pub fn register(&self, g: &mut Graph, with_grad: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .zip(&self.trainable)
                .map(|(p, &t)| if with_grad && t { g.param(p) } else { g.constant(p) })
                .collect(),
        )
    }

    /// Runs the network on `(B, 3, H, W)` input with `H` and `W` divisible by 4.
    pub fn forward(&self, g: &mut Graph, params: &ParamVars, x: Var, mode: Mode) -> Result<ForwardOut> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(invalid(format!("network input must be (B, 3, H, W), got {s:?}")));
        }
        if !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) || s[2] == 0 || s[3] == 0 {
            return Err(invalid(format!("input size {}x{} must be divisible by 4", s[2], s[3])));
        }
        let p = &params.0;
        let mut h = x;
        let mut features = x;
        let mut bn_updates = Vec::new();
        for (layer, st) in STAGES.iter().enumerate() {
            let base = layer * 3;
            let conv = g.conv2d(h, p[base], None, st.stride, 1)?;
            if layer == STAGES.len() - 1 {
                features = conv;
            }
            let r = &self.running[layer];
            let bn_mode = match mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval {
                    mean: &r.mean,
                    var: &r.var,
                },
            };
            let out = g.batch_norm(conv, p[base + 1], p[base + 2], bn_mode)?;
            if let (Some(mean), Some(var)) = (out.batch_mean, out.batch_var) {
                bn_updates.push(BnUpdate { layer, mean, var });
            }
            h = g.relu(out.y);
        }
        let n = STAGES.len() * 3;
        let head = g.conv2d(h, p[n], Some(p[n + 1]), 1, 0)?;
        let logits = g.resize_bilinear(head, s[2], s[3])?;
        Ok(ForwardOut {
            logits,
            features,
            bn_updates,
        })
    }

    /// `running = (1 - m) running + m batch` for each observed layer.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let r = &mut self.running[u.layer];
            for (rm, &bm) in r.mean.iter_mut().zip(&u.mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bm as f32;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&u.var) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bv as f32;
            }
        }
    }

    /// Eval-mode logits and features for a batch, processed in chunks.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
        if images.rank() != 4 {
            return Err(invalid(format!("images must be (B, 3, H, W), got {:?}", images.shape())));
        }
        let b = images.dim(0);
        let chunk = chunk.max(1);
        let mut logits = Vec::new();
        let mut feats = Vec::new();
        let mut start = 0;
        while start < b {
            let len = chunk.min(b - start);
            let part = images.narrow(0, start, len)?;
            let mut g = Graph::new();
            let pv = self.register(&mut g, false);
            let x = g.constant(&part);
            let out = self.forward(&mut g, &pv, x, Mode::Eval)?;
            logits.push(g.value(out.logits));
            feats.push(g.value(out.features));
            start += len;
        }
        let lr: Vec<&Tensor> = logits.iter().collect();
        let fr: Vec<&Tensor> = feats.iter().collect();
        Ok((Tensor::concat(&lr, 0)?, Tensor::concat(&fr, 0)?))
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}
