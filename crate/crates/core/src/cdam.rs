//! Cross-projection dual attention: batch-statistics alignment plus spatial
//! and channel attention maps compared by KL divergence.

use crate::error::{invalid, mismatch, Result};
use crate::sphere::rebuild_width;
use crate::tensor::{Graph, Tensor, Var};

/// Default cap on the number of spatial positions entering attention.
pub const N_MAX: usize = 1024;
/// Lower clamp on the second KL argument.
pub const KL_FLOOR: f64 = 1e-8;

/// Per-channel reference moments.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn new(mean: Vec<f32>, var: Vec<f32>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(mismatch("bn stats", &[mean.len()], &[var.len()]));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(invalid("negative variance in batch-norm statistics"));
        }
        Ok(Self { mean, var })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Stitches strip features `(.., C, Hf, Wf/n)` back to full width.
pub fn rebuild_features(parts: &[Tensor]) -> Result<Tensor> {
    rebuild_width(parts)
}

/// Per-channel mean and biased variance of `(B, C, H, W)` over batch and
/// space, as `(C)` nodes.
pub fn channel_moments(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(invalid(format!("moments expect (B, C, H, W), got {s:?}")));
    }
    let cb = g.permute(x, &[1, 0, 2, 3])?;
    let flat = g.reshape(cb, &[s[1], s[0] * s[2] * s[3]])?;
    let mean = g.mean_axis(flat, 1)?;
    let sq = g.square(flat);
    let mean_sq = g.mean_axis(sq, 1)?;
    let mean2 = g.square(mean);
    let var = g.sub(mean_sq, mean2)?;
    Ok((mean, var))
}

fn moment_gap(g: &mut Graph, x: Var, stats: &BnStats) -> Result<Var> {
    let (mean, var) = channel_moments(g, x)?;
    if g.shape(mean) != [stats.channels()] {
        return Err(mismatch("bns_loss", g.shape(mean), &[stats.channels()]));
    }
    let mu_ref = g.constant(&Tensor::new(vec![stats.channels()], stats.mean.clone())?);
    let var_ref = g.constant(&Tensor::new(vec![stats.channels()], stats.var.clone())?);
    let dm = g.sub(mean, mu_ref)?;
    let dv = g.sub(var, var_ref)?;
    let dm2 = g.square(dm);
    let dv2 = g.square(dv);
    let a = g.sum(dm2);
    let b = g.sum(dv2);
    g.add(a, b)
}

/// Squared distance of the channel moments of `f` and `f_prime` to `stats`.
pub fn bns_loss(g: &mut Graph, f: Var, f_prime: Var, stats: &BnStats) -> Result<Var> {
    let a = moment_gap(g, f, stats)?;
    let b = moment_gap(g, f_prime, stats)?;
    g.add(a, b)
}

/// Smallest pooling factor dividing both sides that leaves at most `n_max`
/// positions.
pub fn pool_factor(h: usize, w: usize, n_max: usize) -> Result<usize> {
    (1..=h.min(w))
        .find(|&k| h.is_multiple_of(k) && w.is_multiple_of(k) && (h / k) * (w / k) <= n_max)
        .ok_or_else(|| invalid(format!("cannot pool {h}x{w} features to at most {n_max} positions")))
}

/// Average-pools `(B, C, H, W)` features to at most `n_max` positions and
/// returns one `(N, C)` node per batch item.
pub fn to_positions(g: &mut Graph, x: Var, n_max: usize) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(invalid(format!("features must be (B, C, H, W), got {s:?}")));
    }
    let k = pool_factor(s[2], s[3], n_max)?;
    let pooled = if k > 1 { g.avg_pool(x, k, k)? } else { x };
    let n = (s[2] / k) * (s[3] / k);
    (0..s[0])
        .map(|b| {
            let item = g.narrow(pooled, 0, b, 1)?;
            let cn = g.reshape(item, &[s[1], n])?;
            g.transpose(cn)
        })
        .collect()
}

/// Spatial and channel attention maps of one feature pair.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub m_sp: Var,
    pub m_sp_prime: Var,
    pub m_ch: Var,
    pub m_ch_prime: Var,
}

/// `m_sp = rowsoftmax(f f'^T)`, `m_sp' = rowsoftmax(f' f^T)` for `(N, C)`
/// inputs.
pub fn spatial_attention(g: &mut Graph, f: Var, f_prime: Var) -> Result<(Var, Var)> {
    if g.shape(f) != g.shape(f_prime) {
        return Err(mismatch("spatial_attention", g.shape(f), g.shape(f_prime)));
    }
    let fpt = g.transpose(f_prime)?;
    let s = g.matmul(f, fpt)?;
    let m = g.softmax(s)?;
    let ft = g.transpose(f)?;
    let sp = g.matmul(f_prime, ft)?;
    let mp = g.softmax(sp)?;
    Ok((m, mp))
}

/// `m_ch = rowsoftmax(f^T f')`, `m_ch' = rowsoftmax(f'^T f)`.
pub fn channel_attention(g: &mut Graph, f: Var, f_prime: Var) -> Result<(Var, Var)> {
    if g.shape(f) != g.shape(f_prime) {
        return Err(mismatch("channel_attention", g.shape(f), g.shape(f_prime)));
    }
    let ft = g.transpose(f)?;
    let s = g.matmul(ft, f_prime)?;
    let m = g.softmax(s)?;
    let fpt = g.transpose(f_prime)?;
    let sp = g.matmul(fpt, f)?;
    let mp = g.softmax(sp)?;
    Ok((m, mp))
}

pub fn attention_maps(g: &mut Graph, f: Var, f_prime: Var) -> Result<AttentionMaps> {
    let (m_sp, m_sp_prime) = spatial_attention(g, f, f_prime)?;
    let (m_ch, m_ch_prime) = channel_attention(g, f, f_prime)?;
    Ok(AttentionMaps {
        m_sp,
        m_sp_prime,
        m_ch,
        m_ch_prime,
    })
}

/// Row-averaged `sum p log(p / q)` with `q` clamped at [`KL_FLOOR`].
pub fn kl_rows(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    if g.shape(p) != g.shape(q) || g.shape(p).len() != 2 {
        return Err(mismatch("kl_rows", g.shape(p), g.shape(q)));
    }
    let rows = g.shape(p)[0];
    let lp = g.log(p);
    let lq = g.log_floor(q, KL_FLOOR);
    let d = g.sub(lp, lq)?;
    let t = g.mul(p, d)?;
    let s = g.sum(t);
    Ok(g.scale(s, 1.0 / rows as f64))
}

pub fn cda_loss(g: &mut Graph, maps: &AttentionMaps) -> Result<Var> {
    let a = kl_rows(g, maps.m_sp, maps.m_sp_prime)?;
    let b = kl_rows(g, maps.m_ch, maps.m_ch_prime)?;
    g.add(a, b)
}

/// Attention loss averaged over a batch of `(B, C, H, W)` feature pairs.
pub fn batch_cda_loss(g: &mut Graph, f: Var, f_prime: Var, n_max: usize) -> Result<Var> {
    if g.shape(f) != g.shape(f_prime) {
        return Err(mismatch("batch_cda_loss", g.shape(f), g.shape(f_prime)));
    }
    let fs = to_positions(g, f, n_max)?;
    let fps = to_positions(g, f_prime, n_max)?;
    let mut total = None;
    for (&a, &b) in fs.iter().zip(&fps) {
        let maps = attention_maps(g, a, b)?;
        let l = cda_loss(g, &maps)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| invalid("empty feature batch"))?;
    Ok(g.scale(total, 1.0 / fs.len() as f64))
}
