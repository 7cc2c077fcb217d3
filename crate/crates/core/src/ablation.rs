//! Seeded sweeps over the strip FoV, the attention-loss weight and the loss
//! combination, rendered as small text tables.

use std::fmt::Write as _;

use log::info;
use serde::Serialize;

use crate::adapt::{evaluate, run, AdaptConfig, LossToggles};
use crate::error::{invalid, Result};
use crate::model::{pretrain_source, PretrainConfig, SegNet};
use crate::sphere::ffp_count;
use crate::synth::{gen_benchmark, Benchmark, BenchmarkConfig};

pub const FOV_LIST: [f64; 6] = [60.0, 72.0, 90.0, 120.0, 180.0, 360.0];
pub const GAMMA_LIST: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2];

/// Benchmark, pretraining and adaptation settings used together.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub bench: BenchmarkConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
}

impl Preset {
    /// Small enough for a few seconds per run on one core.
    pub fn desk() -> Self {
        Self {
            bench: BenchmarkConfig {
                source_scenes: 60,
                crop: 48,
                target_train: 16,
                target_test: 8,
                target_h: 64,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 10,
                lr: 3e-3,
                ..Default::default()
            },
            adapt: AdaptConfig {
                epochs: 5,
                tp_patch: 32,
                init_from_source: true,
                ..Default::default()
            },
        }
    }

    /// Same preset with every seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.bench.seed = seed;
        p.pretrain.seed = seed;
        p.adapt.seed = seed;
        p
    }
}

/// A benchmark with its pretrained source model, for one seed.
pub struct Prepared {
    pub seed: u64,
    pub bench: Benchmark,
    pub source: SegNet,
    /// Target test mIoU of the source model without adaptation.
    pub source_miou: f64,
}

pub fn prepare(preset: &Preset, seed: u64) -> Result<Prepared> {
    let p = preset.with_seed(seed);
    let bench = gen_benchmark(&p.bench)?;
    let (source, _) = pretrain_source(&bench.source, &p.pretrain)?;
    let (_, source_miou) = evaluate(&source, &bench.target_test)?;
    info!("seed {seed}: source-only target mIoU {source_miou:.4}");
    Ok(Prepared {
        seed,
        bench,
        source,
        source_miou,
    })
}

/// Final-epoch target test mIoU of one adaptation run.
pub fn adapt_miou(prep: &Prepared, cfg: &AdaptConfig) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.seed = prep.seed;
    if cfg.epochs == 0 {
        return Ok(prep.source_miou);
    }
    let r = run(&cfg, &prep.source, &prep.bench.target_train, &prep.bench.target_test, &mut |_| Ok(()))?;
    Ok(r.metrics.last().map(|m| m.miou).unwrap_or(f64::NAN))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepKind {
    Fov,
    Gamma,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub label: String,
    pub toggles: Option<LossToggles>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

impl SweepEntry {
    fn new(label: impl Into<String>, toggles: Option<LossToggles>, per_seed: Vec<f64>) -> Self {
        let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        Self {
            label: label.into(),
            toggles,
            per_seed,
            mean,
        }
    }
}

/// Sweep results; deltas are taken against the first entry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub seeds: Vec<u64>,
    pub entries: Vec<SweepEntry>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn delta(v: f64, base: f64) -> String {
    format!("{:+.2}", 100.0 * (v - base))
}

impl SweepTable {
    pub fn baseline(&self) -> &SweepEntry {
        &self.entries[0]
    }

    pub fn entry(&self, label: &str) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// Text table: FoV and gamma sweeps as a header row with mIoU and delta
    /// rows beneath, the loss grid as one row per combination.
    pub fn render(&self) -> String {
        let base = self.baseline().mean;
        let mut out = String::new();
        match self.kind {
            SweepKind::Fov | SweepKind::Gamma => {
                let head = if self.kind == SweepKind::Fov { "FoV" } else { "gamma" };
                let mut rows = [vec![head.to_string()], vec!["mIoU".to_string()], vec!["delta".to_string()]];
                for (i, e) in self.entries.iter().enumerate() {
                    rows[0].push(e.label.clone());
                    rows[1].push(pct(e.mean));
                    rows[2].push(if i == 0 { "-".into() } else { delta(e.mean, base) });
                }
                let widths: Vec<usize> = (0..rows[0].len())
                    .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
                    .collect();
                for r in &rows {
                    let cells: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
                    let _ = writeln!(out, "{}", cells.join(" | "));
                }
            }
            SweepKind::Loss => {
                let _ = writeln!(out, "sup | un | ppa | sft | cda | bns |  mIoU |  delta");
                for (i, e) in self.entries.iter().enumerate() {
                    let t = e.toggles.unwrap_or(LossToggles::sup_only());
                    let mark = |b: bool| if b { "x" } else { " " };
                    let d = if i == 0 { "-".to_string() } else { delta(e.mean, base) };
                    let _ = writeln!(
                        out,
                        "{:>3} | {:>2} | {:>3} | {:>3} | {:>3} | {:>3} | {:>5} | {:>6}",
                        mark(t.sup),
                        mark(t.un),
                        mark(t.ppa),
                        mark(t.sft),
                        mark(t.cda),
                        mark(t.bns),
                        pct(e.mean),
                        d
                    );
                }
            }
        }
        out
    }
}

fn sweep<F>(prepared: &[Prepared], mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&Prepared) -> Result<f64>,
{
    if prepared.is_empty() {
        return Err(invalid("sweep needs at least one seed"));
    }
    prepared.iter().map(&mut f).collect()
}

fn seeds(prepared: &[Prepared]) -> Vec<u64> {
    prepared.iter().map(|p| p.seed).collect()
}

/// Checks that every strip FoV slices the panorama width into strips whose
/// width survives the network's total stride.
pub fn check_fov_widths(width: usize, fovs: &[f64]) -> Result<()> {
    for &fov in fovs {
        let n = ffp_count(fov)?;
        if !width.is_multiple_of(4 * n) {
            return Err(invalid(format!(
                "panorama width {width} cannot hold {n} strips of a width divisible by 4 (FoV {fov})"
            )));
        }
    }
    Ok(())
}

/// One entry for the unadapted source model, then one per FoV.
pub fn ablation_fov(prepared: &[Prepared], base: &AdaptConfig, fovs: &[f64]) -> Result<SweepTable> {
    if let Some(s) = prepared.first().and_then(|p| p.bench.target_train.first()) {
        check_fov_widths(s.image.dim(2), fovs)?;
    }
    let mut entries = vec![SweepEntry::new("w/o", None, sweep(prepared, |p| Ok(p.source_miou))?)];
    for &fov in fovs {
        let cfg = AdaptConfig {
            ffp_fov_deg: fov,
            ..base.clone()
        };
        let vals = sweep(prepared, |p| adapt_miou(p, &cfg))?;
        info!("fov {fov}: {vals:?}");
        entries.push(SweepEntry::new(format!("{fov}"), Some(cfg.toggles), vals));
    }
    Ok(SweepTable {
        kind: SweepKind::Fov,
        seeds: seeds(prepared),
        entries,
    })
}

/// One entry per weight of the attention loss.
pub fn ablation_gamma(prepared: &[Prepared], base: &AdaptConfig, gammas: &[f64]) -> Result<SweepTable> {
    let mut entries = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let cfg = AdaptConfig { gamma, ..base.clone() };
        let vals = sweep(prepared, |p| adapt_miou(p, &cfg))?;
        info!("gamma {gamma}: {vals:?}");
        entries.push(SweepEntry::new(format!("{gamma}"), Some(cfg.toggles), vals));
    }
    Ok(SweepTable {
        kind: SweepKind::Gamma,
        seeds: seeds(prepared),
        entries,
    })
}

/// The loss combinations of the ablation grid, supervised-only first and
/// all losses last.
pub fn loss_grid() -> Vec<(&'static str, LossToggles)> {
    let s = LossToggles::sup_only();
    vec![
        ("sup", s),
        ("sup+un", LossToggles { un: true, ..s }),
        ("sup+un+ppa", LossToggles { un: true, ppa: true, ..s }),
        (
            "sup+un+ppa+sft",
            LossToggles {
                un: true,
                ppa: true,
                sft: true,
                ..s
            },
        ),
        ("sup+cda", LossToggles { cda: true, ..s }),
        ("sup+cda+bns", LossToggles { cda: true, bns: true, ..s }),
        ("all", LossToggles::all()),
    ]
}

pub fn ablation_loss(
    prepared: &[Prepared],
    base: &AdaptConfig,
    grid: &[(&str, LossToggles)],
) -> Result<SweepTable> {
    let mut entries = Vec::with_capacity(grid.len());
    for &(label, toggles) in grid {
        let cfg = AdaptConfig { toggles, ..base.clone() };
        let vals = sweep(prepared, |p| adapt_miou(p, &cfg))?;
        info!("{label}: {vals:?}");
        entries.push(SweepEntry::new(label, Some(toggles), vals));
    }
    Ok(SweepTable {
        kind: SweepKind::Loss,
        seeds: seeds(prepared),
        entries,
    })
}
