//! The adaptation loop: knowledge extraction from the source model through
//! tangent and fixed-FoV projections, prototype and attention losses on the
//! target model, and the optimizer steps for both models.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cdam::{batch_cda_loss, bns_loss, N_MAX};
use crate::error::{invalid, mismatch, Error, Result};
use crate::metrics::{miou, ConfusionMatrix};
use crate::model::{poly_lr, AdamW, Mode, ParamVars, SegNet};
use crate::prototypes::{
    aggregate_patch_prototypes, fuse_prototypes, loss_ppa, loss_sft, loss_un, masked_average_pool, pool_on_graph,
    GlobalPrototypeBank, GraphPrototypes, PrototypeSet,
};
use crate::pseudo::{argmax_onehot, assess_confidence, masked_labels, ConfidenceMasks, PseudoLabel};
use crate::sphere::{
    ffp_count, ffp_rebuild, make_tangent_grid, rebuild_width, slice_width, FfpPatchSet, TangentGrid, TangentProjector,
};
use crate::synth::TargetSample;
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};

/// Which loss terms take part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LossToggles {
    pub sup: bool,
    pub un: bool,
    pub ppa: bool,
    pub sft: bool,
    pub cda: bool,
    pub bns: bool,
}

impl LossToggles {
    pub fn all() -> Self {
        Self {
            sup: true,
            un: true,
            ppa: true,
            sft: true,
            cda: true,
            bns: true,
        }
    }

    pub fn sup_only() -> Self {
        Self {
            sup: true,
            un: false,
            ppa: false,
            sft: false,
            cda: false,
            bns: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BankSchedule {
    PerIteration,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptConfig {
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub ffp_fov_deg: f64,
    pub tp_rings: usize,
    pub tp_lons: usize,
    pub tp_fov_deg: f64,
    pub tp_patch: usize,
    pub n_max: usize,
    pub seed: u64,
    pub toggles: LossToggles,
    pub init_from_source: bool,
    pub bank_schedule: BankSchedule,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            epochs: 10,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 0.01,
            poly_power: 0.9,
            ffp_fov_deg: 90.0,
            tp_rings: 3,
            tp_lons: 6,
            tp_fov_deg: 80.0,
            tp_patch: 128,
            n_max: N_MAX,
            seed: 0,
            toggles: LossToggles::all(),
            init_from_source: false,
            bank_schedule: BankSchedule::PerIteration,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(invalid(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if [self.lr, self.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(invalid("learning rate and weight decay must be nonnegative"));
        }
        ffp_count(self.ffp_fov_deg)?;
        Ok(())
    }

    pub fn tangent_grid(&self) -> Result<TangentGrid> {
        make_tangent_grid(self.tp_rings, self.tp_lons, self.tp_fov_deg, self.tp_patch, self.tp_patch)
    }
}

/// Loss values of one step. `total` covers the target objective only;
/// `l_sft` drives the source model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_sup: f64,
    pub l_un: f64,
    pub l_ppa: f64,
    pub l_sft: f64,
    pub l_cda: f64,
    pub l_bns: f64,
    pub total: f64,
}

impl LossBundle {
    fn check_finite(&self) -> Result<()> {
        let terms = [
            ("l_sup", self.l_sup),
            ("l_un", self.l_un),
            ("l_ppa", self.l_ppa),
            ("l_sft", self.l_sft),
            ("l_cda", self.l_cda),
            ("l_bns", self.l_bns),
            ("total", self.total),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite(format!("loss term {name}"))),
            None => Ok(()),
        }
    }
}

/// Everything the frozen-side pipeline contributes to one batch.
pub struct SourceKnowledge {
    pub label_ffp: Vec<PseudoLabel>,
    pub label_tp: Vec<PseudoLabel>,
    pub tau_p: PrototypeSet,
    pub tau_f: PrototypeSet,
    /// Rebuilt strip features, `(B, C, H/4, W/4)`.
    pub f_prime: Tensor,
    pub l_sft: f64,
    /// Source parameter gradients of `l_sft`, when it was differentiated.
    pub sft_grads: Option<Vec<Vec<f64>>>,
}

fn batch_item(t: &Tensor, b: usize) -> Result<Tensor> {
    let item = t.narrow(0, b, 1)?;
    item.reshape(&t.shape()[1..])
}

/// Runs the source model on the tangent patches and strips of a batch of
/// `(B, 3, H, W)` panoramas.
pub fn extract_source_knowledge(
    src: &SegNet,
    images: &Tensor,
    projector: &TangentProjector,
    cfg: &AdaptConfig,
) -> Result<SourceKnowledge> {
    let (bsz, h, w) = (images.dim(0), images.dim(2), images.dim(3));
    let n_tp = projector.n_patches();

    // tangent patches
    let mut patches = Vec::with_capacity(bsz * n_tp);
    for b in 0..bsz {
        patches.extend(projector.erp_to_tangent(&batch_item(images, b)?)?);
    }
    let refs: Vec<&Tensor> = patches.iter().collect();
    let (tp_logits, tp_feats) = src.predict(&Tensor::stack(&refs)?, n_tp)?;
    let mut label_tp = Vec::with_capacity(bsz);
    let mut tp_sets = Vec::with_capacity(bsz * n_tp);
    for b in 0..bsz {
        let logits: Vec<Tensor> = (0..n_tp)
            .map(|p| batch_item(&tp_logits, b * n_tp + p))
            .collect::<Result<_>>()?;
        let (merged, _) = projector.tangent_to_erp(&logits)?;
        label_tp.push(argmax_onehot(&merged)?);
        for (p, l) in logits.iter().enumerate() {
            let y = argmax_onehot(l)?;
            tp_sets.push(masked_average_pool(&batch_item(&tp_feats, b * n_tp + p)?, &y)?);
        }
    }
    let tau_p = aggregate_patch_prototypes(&tp_sets)?;

    // fixed-FoV strips
    let n = ffp_count(cfg.ffp_fov_deg)?;
    let mut strips = Vec::with_capacity(bsz * n);
    for b in 0..bsz {
        strips.extend(slice_width(&batch_item(images, b)?, n)?);
    }
    let refs: Vec<&Tensor> = strips.iter().collect();
    let strip_batch = Tensor::stack(&refs)?;
    let sft_on = cfg.toggles.sft;
    let mut g = Graph::new();
    let pv = src.register(&mut g, sft_on);
    let x = g.constant(&strip_batch);
    let out = src.forward(&mut g, &pv, x, Mode::Eval)?;
    let strip_logits = g.value(out.logits);
    let strip_feats = g.value(out.features);

    let mut label_ffp = Vec::with_capacity(bsz);
    let mut ffp_sets = Vec::with_capacity(bsz * n);
    let mut graph_sets: Vec<Vec<GraphPrototypes>> = Vec::with_capacity(bsz);
    let mut f_prime = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let logits: Vec<Tensor> = (0..n)
            .map(|s| batch_item(&strip_logits, b * n + s))
            .collect::<Result<_>>()?;
        label_ffp.push(argmax_onehot(&rebuild_width(&logits)?)?);
        let feats: Vec<Tensor> = (0..n)
            .map(|s| batch_item(&strip_feats, b * n + s))
            .collect::<Result<_>>()?;
        f_prime.push(rebuild_width(&feats)?);
        let mut per_image = Vec::with_capacity(n);
        for (s, l) in logits.iter().enumerate() {
            let y = argmax_onehot(l)?;
            let fv = g.narrow(out.features, 0, b * n + s, 1)?;
            let set = pool_on_graph(&mut g, fv, &[&y])?;
            ffp_sets.push(set.detach(&g));
            per_image.push(set);
        }
        graph_sets.push(per_image);
    }
    let tau_f = aggregate_patch_prototypes(&ffp_sets)?;

    let (l_sft, sft_grads) = if sft_on && n >= 2 {
        let mut total = None;
        for sets in &graph_sets {
            let l = loss_sft(&mut g, sets)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.expect("batch is nonempty");
        let loss = g.scale(total, 1.0 / bsz as f64);
        let value = g.item(loss);
        g.backward(loss)?;
        (value, Some(pv.0.iter().map(|&v| g.grad(v)).collect()))
    } else {
        (0.0, None)
    };
    let fp_refs: Vec<&Tensor> = f_prime.iter().collect();
    let f_prime = Tensor::stack(&fp_refs)?;
    debug_assert_eq!(f_prime.dim(2) * 4, h);
    debug_assert_eq!(f_prime.dim(3) * 4, w);
    Ok(SourceKnowledge {
        label_ffp,
        label_tp,
        tau_p,
        tau_f,
        f_prime,
        l_sft,
        sft_grads,
    })
}

/// Pseudo label of the stitched strip logits.
pub fn sup_pseudo_label(ffp_logits: &FfpPatchSet) -> Result<PseudoLabel> {
    argmax_onehot(ffp_rebuild(ffp_logits)?.tensor())
}

fn sup_from_labels(g: &mut Graph, target_logits: Var, labels: &[PseudoLabel]) -> Result<Var> {
    let shape = g.shape(target_logits).to_vec();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(mismatch("sup_loss", &shape, &[labels.len()]));
    }
    if let Some(l) = labels.iter().find(|l| (l.h, l.w) != (shape[2], shape[3]) || l.k != shape[1]) {
        return Err(mismatch("sup_loss", &shape, &[l.k, l.h, l.w]));
    }
    let targets: Vec<u16> = labels.iter().flat_map(|l| l.data.iter().copied()).collect();
    g.cross_entropy(target_logits, &targets, shape[1] as u16)
}

/// Cross-entropy of `(B, K, H, W)` target logits against the argmax of the
/// rebuilt source strip logits, one strip set per panorama.
pub fn sup_loss(g: &mut Graph, target_logits: Var, ffp_logits: &[&FfpPatchSet]) -> Result<Var> {
    let labels: Vec<PseudoLabel> = ffp_logits.iter().map(|s| sup_pseudo_label(s)).collect::<Result<_>>()?;
    sup_from_labels(g, target_logits, &labels)
}

/// Loss nodes of the target objective. Disabled terms are `None`.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub sup: Option<Var>,
    pub un: Option<Var>,
    pub ppa: Option<Var>,
    pub cda: Option<Var>,
    pub bns: Option<Var>,
    pub total: Var,
}

/// Side results of building the target objective.
pub struct TargetState {
    pub losses: LossVars,
    pub masks: Vec<ConfidenceMasks>,
    pub tau_pf: PrototypeSet,
    /// Bank used by the prototype adaptation loss.
    pub bank: GlobalPrototypeBank,
    pub bn_updates: Vec<crate::model::BnUpdate>,
    /// Detached confident prototypes, when they were pooled.
    pub tau_con: Option<PrototypeSet>,
    /// Target argmax label of every batch item.
    pub label_erp: Vec<PseudoLabel>,
}

/// Non-differentiable parts of the target objective held fixed: the
/// target's own argmax labels and the detached confident prototypes.
#[derive(Clone, Debug)]
pub struct FrozenTargets {
    pub label_erp: Vec<PseudoLabel>,
    pub tau_con: Option<PrototypeSet>,
}

/// Builds the target objective on `g` for target parameters `pv`. Pure with
/// respect to the bank: the updated bank is returned, not written back.
/// `frozen` replaces the target argmax labels and the detached confident
/// prototypes with fixed values.
#[allow(clippy::too_many_arguments)]
pub fn target_objective(
    g: &mut Graph,
    tgt: &SegNet,
    pv: &ParamVars,
    images: &Tensor,
    knowledge: &SourceKnowledge,
    bank: &GlobalPrototypeBank,
    bn_stats: &crate::cdam::BnStats,
    cfg: &AdaptConfig,
    frozen: Option<&FrozenTargets>,
) -> Result<TargetState> {
    let bsz = images.dim(0);
    let t = cfg.toggles;
    let x = g.constant(images);
    let out = tgt.forward(g, pv, x, Mode::Train)?;
    let logits = g.value(out.logits);

    let mut masks = Vec::with_capacity(bsz);
    let mut con = Vec::with_capacity(bsz);
    let mut un = Vec::with_capacity(bsz);
    let mut labels = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let label_erp = match frozen {
            Some(f) => f.label_erp.get(b).cloned().ok_or_else(|| invalid("frozen labels shorter than the batch"))?,
            None => argmax_onehot(&batch_item(&logits, b)?)?,
        };
        let m = assess_confidence(&label_erp, &knowledge.label_ffp[b], &knowledge.label_tp[b])?;
        let (c, u) = masked_labels(&label_erp, &m)?;
        labels.push(label_erp);
        masks.push(m);
        con.push(c);
        un.push(u);
    }

    let tau_pf = fuse_prototypes(&knowledge.tau_p, &knowledge.tau_f)?;
    let bank = match cfg.bank_schedule {
        BankSchedule::PerIteration => crate::prototypes::update_global(bank, &tau_pf)?,
        BankSchedule::PerEpoch => bank.clone(),
    };

    let mut terms: Vec<Var> = Vec::new();
    let needs_con = t.un || t.ppa;
    let tau_con = if needs_con {
        let refs: Vec<&PseudoLabel> = con.iter().collect();
        Some(pool_on_graph(g, out.features, &refs)?)
    } else {
        None
    };
    let un_var = if t.un {
        let refs: Vec<&PseudoLabel> = un.iter().collect();
        let tau_un = pool_on_graph(g, out.features, &refs)?;
        let l = match frozen.and_then(|f| f.tau_con.as_ref()) {
            Some(p) => {
                let fixed = GraphPrototypes {
                    vectors: g.constant(&p.vectors),
                    present: p.present.clone(),
                };
                loss_un(g, &fixed, &tau_un)?
            }
            None => loss_un(g, tau_con.as_ref().expect("pooled above"), &tau_un)?,
        };
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let ppa_var = if t.ppa {
        let l = loss_ppa(g, &bank, tau_con.as_ref().expect("pooled above"))?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let f_prime = if t.bns || (t.cda && cfg.gamma > 0.0) {
        Some(g.constant(&knowledge.f_prime))
    } else {
        None
    };
    let bns_var = if t.bns {
        let l = bns_loss(g, out.features, f_prime.expect("set above"), bn_stats)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let cda_var = if t.cda && cfg.gamma > 0.0 {
        let l = batch_cda_loss(g, out.features, f_prime.expect("set above"), cfg.n_max)?;
        let weighted = g.scale(l, cfg.gamma);
        terms.push(weighted);
        Some(l)
    } else {
        None
    };
    let sup_var = if t.sup {
        let l = sup_from_labels(g, out.logits, &knowledge.label_ffp)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let mut total = match terms.first() {
        Some(&v) => v,
        None => g.scalar_const(0.0),
    };
    for &v in terms.iter().skip(1) {
        total = g.add(total, v)?;
    }
    Ok(TargetState {
        losses: LossVars {
            sup: sup_var,
            un: un_var,
            ppa: ppa_var,
            cda: cda_var,
            bns: bns_var,
            total,
        },
        masks,
        tau_pf,
        bank,
        bn_updates: out.bn_updates,
        tau_con: tau_con.map(|p| p.detach(g)),
        label_erp: labels,
    })
}

fn value_or_zero(g: &Graph, v: Option<Var>) -> f64 {
    v.map(|v| g.item(v)).unwrap_or(0.0)
}

/// Outcome of one adaptation step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: LossBundle,
    pub confident_fraction: f64,
    pub masks: Vec<ConfidenceMasks>,
}

/// Owns both models, both optimizers and the prototype bank.
pub struct Adapter {
    pub cfg: AdaptConfig,
    pub src: SegNet,
    pub tgt: SegNet,
    pub bank: GlobalPrototypeBank,
    /// Every fused prototype set folded into the bank, in order.
    pub bank_history: Vec<PrototypeSet>,
    projector: Option<TangentProjector>,
    opt_tgt: AdamW,
    opt_src: AdamW,
    epoch_tau: Vec<PrototypeSet>,
    iter: usize,
    total_iters: usize,
}

impl Adapter {
    pub fn new(cfg: AdaptConfig, src: SegNet) -> Result<Self> {
        cfg.validate()?;
        let k = src.classes();
        let tgt = if cfg.init_from_source {
            src.clone()
        } else {
            SegNet::new(k, cfg.seed.wrapping_add(0x7a_49e7))?
        };
        let mut src = src;
        // the source model only ever moves under the strip-consistency loss
        src.freeze("all")?;
        if cfg.toggles.sft {
            src.unfreeze("all")?;
        }
        let opt_tgt = AdamW::new(tgt.params(), cfg.weight_decay);
        let opt_src = AdamW::new(src.params(), cfg.weight_decay);
        Ok(Self {
            bank: GlobalPrototypeBank::new(k, crate::model::FEATURE_CHANNELS),
            bank_history: Vec::new(),
            projector: None,
            opt_tgt,
            opt_src,
            epoch_tau: Vec::new(),
            iter: 0,
            total_iters: 0,
            cfg,
            src,
            tgt,
        })
    }

    /// Sets the horizon of the poly schedule.
    pub fn set_total_iters(&mut self, n: usize) {
        self.total_iters = n;
    }

    fn projector(&mut self, h: usize, w: usize) -> Result<&TangentProjector> {
        let stale = match &self.projector {
            Some(p) => p.erp_size() != (h, w),
            None => true,
        };
        if stale {
            self.projector = Some(TangentProjector::new(&self.cfg.tangent_grid()?, h, w)?);
        }
        Ok(self.projector.as_ref().expect("set above"))
    }

    /// One iteration on a `(B, 3, H, W)` batch of target panoramas.
    pub fn step(&mut self, images: &Tensor) -> Result<StepReport> {
        if images.rank() != 4 || images.dim(1) != 3 {
            return Err(invalid(format!("batch must be (B, 3, H, W), got {:?}", images.shape())));
        }
        let (h, w) = (images.dim(2), images.dim(3));
        let cfg = self.cfg.clone();
        let knowledge = {
            let proj = self.projector(h, w)?.clone();
            extract_source_knowledge(&self.src, images, &proj, &cfg)?
        };
        let bn_stats = self.src.bn_stats();
        let mut g = Graph::new();
        let pv = self.tgt.register(&mut g, true);
        let state = target_objective(&mut g, &self.tgt, &pv, images, &knowledge, &self.bank, &bn_stats, &cfg, None)?;
        let l = &state.losses;
        let bundle = LossBundle {
            l_sup: value_or_zero(&g, l.sup),
            l_un: value_or_zero(&g, l.un),
            l_ppa: value_or_zero(&g, l.ppa),
            l_sft: knowledge.l_sft,
            l_cda: value_or_zero(&g, l.cda),
            l_bns: value_or_zero(&g, l.bns),
            total: g.item(l.total),
        };
        bundle.check_finite()?;

        let lr = poly_lr(cfg.lr, self.iter, self.total_iters.max(self.iter + 1), cfg.poly_power);
        if g.requires_grad(l.total) {
            g.backward(l.total)?;
            let grads: Vec<Vec<f64>> = pv.0.iter().map(|&v| g.grad(v)).collect();
            let trainable = self.tgt.trainable().to_vec();
            self.opt_tgt.step(self.tgt.params_mut(), &grads, &trainable, lr)?;
        }
        self.tgt.apply_bn_updates(&state.bn_updates);
        if let Some(grads) = &knowledge.sft_grads {
            let trainable = self.src.trainable().to_vec();
            self.opt_src.step(self.src.params_mut(), grads, &trainable, lr)?;
        }
        match cfg.bank_schedule {
            BankSchedule::PerIteration => {
                self.bank = state.bank;
                self.bank_history.push(state.tau_pf);
            }
            BankSchedule::PerEpoch => self.epoch_tau.push(state.tau_pf),
        }
        self.iter += 1;
        let confident_fraction =
            state.masks.iter().map(|m| m.confident_fraction()).sum::<f64>() / state.masks.len() as f64;
        debug!("step {}: {:?}", self.iter, bundle);
        Ok(StepReport {
            losses: bundle,
            confident_fraction,
            masks: state.masks,
        })
    }

    /// Closes an epoch; with the per-epoch bank schedule this folds the
    /// epoch's averaged fused prototypes into the bank.
    pub fn end_epoch(&mut self) -> Result<()> {
        if self.cfg.bank_schedule == BankSchedule::PerEpoch && !self.epoch_tau.is_empty() {
            let tau = aggregate_patch_prototypes(&self.epoch_tau)?;
            self.bank.update(&tau)?;
            self.bank_history.push(tau);
            self.epoch_tau.clear();
        }
        Ok(())
    }
}

/// Per-epoch log record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub seed: u64,
    pub epoch: usize,
    pub losses: LossBundle,
    pub confident_fraction: f64,
    pub miou: f64,
}

/// Passed to the per-epoch observer.
pub struct EpochSnapshot<'a> {
    pub metrics: &'a EpochMetrics,
    pub adapter: &'a Adapter,
    /// Confidence masks from the last step of the epoch.
    pub last_masks: &'a [ConfidenceMasks],
}

pub struct RunResult {
    pub target: SegNet,
    pub source: SegNet,
    pub bank: GlobalPrototypeBank,
    pub bank_history: Vec<PrototypeSet>,
    pub metrics: Vec<EpochMetrics>,
}

/// Eval-mode confusion matrix and mIoU of a model on labeled panoramas.
pub fn evaluate(net: &SegNet, samples: &[TargetSample]) -> Result<(ConfusionMatrix, f64)> {
    let mut cm = ConfusionMatrix::new(net.classes());
    for s in samples {
        let (logits, _) = net.predict(&Tensor::stack(&[&s.image])?, 1)?;
        let pred = argmax_onehot(&batch_item(&logits, 0)?)?;
        cm.add_labels(&pred, &s.labels)?;
    }
    let (_, m) = miou(&cm)?;
    Ok((cm, m))
}

/// Trains the target model for `cfg.epochs` epochs over `train`, reporting
/// mIoU on `test` after every epoch.
pub fn run(
    cfg: &AdaptConfig,
    src: &SegNet,
    train: &[TargetSample],
    test: &[TargetSample],
    on_epoch: &mut dyn FnMut(&EpochSnapshot) -> Result<()>,
) -> Result<RunResult> {
    if train.is_empty() && cfg.epochs > 0 {
        return Err(invalid("no target panoramas to adapt on"));
    }
    let mut adapter = Adapter::new(cfg.clone(), src.clone())?;
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    adapter.set_total_iters(per_epoch * cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xada9_7000);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBundle::default();
        let mut conf = 0.0;
        let mut last_masks = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &train[i].image).collect();
            let report = adapter.step(&Tensor::stack(&refs)?)?;
            let l = report.losses;
            sum.l_sup += l.l_sup;
            sum.l_un += l.l_un;
            sum.l_ppa += l.l_ppa;
            sum.l_sft += l.l_sft;
            sum.l_cda += l.l_cda;
            sum.l_bns += l.l_bns;
            sum.total += l.total;
            conf += report.confident_fraction;
            last_masks = report.masks;
        }
        adapter.end_epoch()?;
        let n = per_epoch as f64;
        let losses = LossBundle {
            l_sup: sum.l_sup / n,
            l_un: sum.l_un / n,
            l_ppa: sum.l_ppa / n,
            l_sft: sum.l_sft / n,
            l_cda: sum.l_cda / n,
            l_bns: sum.l_bns / n,
            total: sum.total / n,
        };
        let miou = if test.is_empty() {
            f64::NAN
        } else {
            evaluate(&adapter.tgt, test)?.1
        };
        let m = EpochMetrics {
            seed: cfg.seed,
            epoch,
            losses,
            confident_fraction: conf / n,
            miou,
        };
        info!(
            "epoch {epoch}: total {:.4} confident {:.3} mIoU {:.4}",
            m.losses.total, m.confident_fraction, m.miou
        );
        on_epoch(&EpochSnapshot {
            metrics: &m,
            adapter: &adapter,
            last_masks: &last_masks,
        })?;
        metrics.push(m);
    }
    Ok(RunResult {
        target: adapter.tgt,
        source: adapter.src,
        bank: adapter.bank,
        bank_history: adapter.bank_history,
        metrics,
    })
}

/// A scalar parameter of the target model: `(parameter index, flat element)`.
pub type Probe = (usize, usize);

/// Finite-difference check of the full target objective with respect to a
/// handful of target parameters, all other parameters held constant.
#[allow(clippy::too_many_arguments)]
pub fn objective_grad_check(
    src: &SegNet,
    tgt: &SegNet,
    images: &Tensor,
    bank: &GlobalPrototypeBank,
    cfg: &AdaptConfig,
    probes: &[Probe],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if probes.is_empty() {
        return Err(invalid("no probe parameters"));
    }
    for &(p, e) in probes {
        let numel = tgt.params().get(p).map(|t| t.numel()).unwrap_or(0);
        if e >= numel {
            return Err(invalid(format!("probe ({p}, {e}) outside the parameter list")));
        }
    }
    let grid = cfg.tangent_grid()?;
    let projector = TangentProjector::new(&grid, images.dim(2), images.dim(3))?;
    let mut src_cfg = cfg.clone();
    src_cfg.toggles.sft = false;
    let knowledge = extract_source_knowledge(src, images, &projector, &src_cfg)?;
    let bn_stats = src.bn_stats();
    let n = probes.len();
    let frozen = {
        let mut g = Graph::new();
        let pv = tgt.register(&mut g, false);
        let st = target_objective(&mut g, tgt, &pv, images, &knowledge, bank, &bn_stats, cfg, None)?;
        FrozenTargets {
            label_erp: st.label_erp,
            tau_con: st.tau_con,
        }
    };
    let point = Tensor::new(
        vec![n],
        probes.iter().map(|&(p, e)| tgt.params()[p].data()[e]).collect(),
    )?;
    let f = |g: &mut Graph, x: Var| -> Result<Var> {
        let col = g.reshape(x, &[n, 1])?;
        let mut vars = Vec::with_capacity(tgt.params().len());
        for (i, t) in tgt.params().iter().enumerate() {
            let mine: Vec<(usize, usize)> = probes
                .iter()
                .enumerate()
                .filter(|(_, &(p, _))| p == i)
                .map(|(j, &(_, e))| (j, e))
                .collect();
            if mine.is_empty() {
                vars.push(g.constant(t));
                continue;
            }
            let mut base = t.clone();
            let mut sel = Tensor::zeros(&[t.numel(), n]);
            for &(j, e) in &mine {
                base.data_mut()[e] = 0.0;
                sel.data_mut()[e * n + j] = 1.0;
            }
            let sel = g.constant(&sel);
            let spread = g.matmul(sel, col)?;
            let spread = g.reshape(spread, t.shape())?;
            let base = g.constant(&base);
            vars.push(g.add(base, spread)?);
        }
        let state = target_objective(g, tgt, &ParamVars(vars), images, &knowledge, bank, &bn_stats, cfg, Some(&frozen))?;
        Ok(state.losses.total)
    };
    grad_check(f, &point, h, tol)
}

/// Spatial and channel attention maps `(m_sp, m_sp', m_ch, m_ch')` between
/// the target features of one `(3, H, W)` panorama and the rebuilt source
/// strip features.
pub fn attention_snapshot(src: &SegNet, tgt: &SegNet, image: &Tensor, cfg: &AdaptConfig) -> Result<[Tensor; 4]> {
    let n = ffp_count(cfg.ffp_fov_deg)?;
    let strips = slice_width(image, n)?;
    let refs: Vec<&Tensor> = strips.iter().collect();
    let (_, strip_feats) = src.predict(&Tensor::stack(&refs)?, n)?;
    let parts: Vec<Tensor> = (0..n).map(|s| batch_item(&strip_feats, s)).collect::<Result<_>>()?;
    let f_prime = rebuild_width(&parts)?;
    let (_, f) = tgt.predict(&Tensor::stack(&[image])?, 1)?;
    let mut g = Graph::new();
    let fv = g.constant(&f);
    let fp = g.constant(&Tensor::stack(&[&f_prime])?);
    let a = crate::cdam::to_positions(&mut g, fv, cfg.n_max)?;
    let b = crate::cdam::to_positions(&mut g, fp, cfg.n_max)?;
    let maps = crate::cdam::attention_maps(&mut g, a[0], b[0])?;
    Ok([
        g.value(maps.m_sp),
        g.value(maps.m_sp_prime),
        g.value(maps.m_ch),
        g.value(maps.m_ch_prime),
    ])
}
