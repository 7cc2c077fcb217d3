//! Class prototypes: masked average pooling, aggregation across patches,
//! fusion of projections, the running global bank, and the prototype losses.

use log::debug;

use crate::error::{invalid, mismatch, Result};
use crate::pseudo::PseudoLabel;
use crate::tensor::{Graph, Tensor, Var};

/// Per-class centroids with presence flags. Absent rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Tensor,
    pub present: Vec<bool>,
}

impl PrototypeSet {
    pub fn empty(k: usize, c: usize) -> Self {
        Self {
            vectors: Tensor::zeros(&[k, c]),
            present: vec![false; k],
        }
    }

    pub fn new(vectors: Tensor, present: Vec<bool>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.dim(0) != present.len() {
            return Err(mismatch("prototype set", vectors.shape(), &[present.len()]));
        }
        Ok(Self { vectors, present })
    }

    pub fn classes(&self) -> usize {
        self.present.len()
    }

    pub fn channels(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn row(&self, k: usize) -> &[f32] {
        let c = self.channels();
        &self.vectors.data()[k * c..(k + 1) * c]
    }
}

/// Prototypes still attached to a tape.
#[derive(Clone, Debug)]
pub struct GraphPrototypes {
    pub vectors: Var,
    pub present: Vec<bool>,
}

impl GraphPrototypes {
    pub fn detach(&self, g: &Graph) -> PrototypeSet {
        PrototypeSet {
            vectors: g.value(self.vectors),
            present: self.present.clone(),
        }
    }
}

/// Pools `(C, Hf, Wf)` features under an `(H, W)` label map after bilinearly
/// upsampling the features to the label resolution.
pub fn masked_average_pool(features: &Tensor, labels: &PseudoLabel) -> Result<PrototypeSet> {
    if features.rank() != 3 {
        return Err(invalid(format!("features must be (C, H, W), got {:?}", features.shape())));
    }
    let c = features.dim(0);
    let up = if (features.dim(1), features.dim(2)) == (labels.h, labels.w) {
        features.clone()
    } else {
        features.resize_bilinear(labels.h, labels.w)?
    };
    let plane = labels.h * labels.w;
    let k = labels.k;
    let mut sums = vec![0f64; k * c];
    let mut counts = vec![0usize; k];
    for (p, &l) in labels.data.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            continue;
        }
        counts[l] += 1;
        for ch in 0..c {
            sums[l * c + ch] += up.data()[ch * plane + p] as f64;
        }
    }
    let mut data = vec![0f32; k * c];
    for cls in 0..k {
        if counts[cls] > 0 {
            for ch in 0..c {
                data[cls * c + ch] = (sums[cls * c + ch] / counts[cls] as f64) as f32;
            }
        }
    }
    PrototypeSet::new(Tensor::new(vec![k, c], data)?, counts.iter().map(|&n| n > 0).collect())
}

/// Differentiable pooling of batched features `(B, C, Hf, Wf)` under one
/// label map per batch item, all pooled together.
pub fn pool_on_graph(g: &mut Graph, features: Var, labels: &[&PseudoLabel]) -> Result<GraphPrototypes> {
    let s = g.shape(features).to_vec();
    if s.len() != 4 || s[0] != labels.len() || labels.is_empty() {
        return Err(mismatch("pool_on_graph", &s, &[labels.len()]));
    }
    let (h, w, k) = (labels[0].h, labels[0].w, labels[0].k);
    if labels.iter().any(|l| (l.h, l.w, l.k) != (h, w, k)) {
        return Err(invalid("pooled label maps must share resolution and class count"));
    }
    let up = if (s[2], s[3]) == (h, w) {
        features
    } else {
        g.resize_bilinear(features, h, w)?
    };
    let cbhw = g.permute(up, &[1, 0, 2, 3])?;
    let flat = g.reshape(cbhw, &[s[1], s[0] * h * w])?;
    let all: Vec<u16> = labels.iter().flat_map(|l| l.data.iter().copied()).collect();
    let (vectors, counts) = g.masked_mean(flat, &all, k)?;
    Ok(GraphPrototypes {
        vectors,
        present: counts.iter().map(|&n| n > 0).collect(),
    })
}

/// Per class, the mean over the sets in which the class is present.
pub fn aggregate_patch_prototypes(sets: &[PrototypeSet]) -> Result<PrototypeSet> {
    let first = sets.first().ok_or_else(|| invalid("no prototype sets to aggregate"))?;
    let (k, c) = (first.classes(), first.channels());
    for s in sets {
        if s.vectors.shape() != first.vectors.shape() {
            return Err(mismatch("aggregate_patch_prototypes", first.vectors.shape(), s.vectors.shape()));
        }
    }
    let mut data = vec![0f32; k * c];
    let mut present = vec![false; k];
    for cls in 0..k {
        let members: Vec<&PrototypeSet> = sets.iter().filter(|s| s.present[cls]).collect();
        if members.is_empty() {
            continue;
        }
        present[cls] = true;
        for ch in 0..c {
            let sum: f64 = members.iter().map(|s| s.row(cls)[ch] as f64).sum();
            data[cls * c + ch] = (sum / members.len() as f64) as f32;
        }
    }
    PrototypeSet::new(Tensor::new(vec![k, c], data)?, present)
}

/// Elementwise mean where both are present, the present one otherwise.
pub fn fuse_prototypes(tp: &PrototypeSet, ffp: &PrototypeSet) -> Result<PrototypeSet> {
    if tp.vectors.shape() != ffp.vectors.shape() {
        return Err(mismatch("fuse_prototypes", tp.vectors.shape(), ffp.vectors.shape()));
    }
    let (k, c) = (tp.classes(), tp.channels());
    let mut data = vec![0f32; k * c];
    let mut present = vec![false; k];
    for cls in 0..k {
        let row = &mut data[cls * c..(cls + 1) * c];
        match (tp.present[cls], ffp.present[cls]) {
            (true, true) => {
                for (ch, v) in row.iter_mut().enumerate() {
                    *v = ((tp.row(cls)[ch] as f64 + ffp.row(cls)[ch] as f64) / 2.0) as f32;
                }
            }
            (true, false) => row.copy_from_slice(tp.row(cls)),
            (false, true) => row.copy_from_slice(ffp.row(cls)),
            (false, false) => continue,
        }
        present[cls] = true;
    }
    PrototypeSet::new(Tensor::new(vec![k, c], data)?, present)
}

/// Running per-class mean of fused prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPrototypeBank {
    vectors: Vec<f64>,
    counts: Vec<u64>,
    channels: usize,
}

impl GlobalPrototypeBank {
    pub fn new(k: usize, c: usize) -> Self {
        Self {
            vectors: vec![0.0; k * c],
            counts: vec![0; k],
            channels: c,
        }
    }

    /// Restores a bank from stored vectors and counts.
    pub fn from_parts(vectors: &Tensor, counts: Vec<u64>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.dim(0) != counts.len() {
            return Err(mismatch("bank", vectors.shape(), &[counts.len()]));
        }
        let bank = Self {
            vectors: vectors.data().iter().map(|&v| v as f64).collect(),
            counts,
            channels: vectors.dim(1),
        };
        for (k, &n) in bank.counts.iter().enumerate() {
            if n == 0 && bank.row(k).iter().any(|&v| v != 0.0) {
                return Err(invalid(format!("bank class {k} has a vector but no updates")));
            }
        }
        Ok(bank)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.channels..(k + 1) * self.channels]
    }

    pub fn vectors(&self) -> Tensor {
        Tensor::new(
            vec![self.classes(), self.channels],
            self.vectors.iter().map(|&v| v as f32).collect(),
        )
        .expect("bank storage matches its shape")
    }

    /// `n_k += 1; v_k = tau_k / n_k + (1 - 1/n_k) v_k` for every present class.
    pub fn update(&mut self, tau_pf: &PrototypeSet) -> Result<()> {
        if tau_pf.classes() != self.classes() || tau_pf.channels() != self.channels {
            return Err(mismatch(
                "update_global",
                &[self.classes(), self.channels],
                tau_pf.vectors.shape(),
            ));
        }
        let c = self.channels;
        for k in 0..self.classes() {
            if !tau_pf.present[k] {
                continue;
            }
            self.counts[k] += 1;
            let inv = 1.0 / self.counts[k] as f64;
            for ch in 0..c {
                let v = &mut self.vectors[k * c + ch];
                *v = inv * tau_pf.row(k)[ch] as f64 + (1.0 - inv) * *v;
            }
        }
        Ok(())
    }
}

/// Functional form of the bank update.
pub fn update_global(bank: &GlobalPrototypeBank, tau_pf: &PrototypeSet) -> Result<GlobalPrototypeBank> {
    let mut next = bank.clone();
    next.update(tau_pf)?;
    Ok(next)
}

/// Mean over `classes` of `||a_k - b_k||^2 / C` for `(K, C)` nodes; a zero
/// constant when `classes` is empty.
pub fn class_mse(g: &mut Graph, a: Var, b: Var, classes: &[usize]) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s.len() != 2 || g.shape(b) != s.as_slice() {
        return Err(mismatch("class_mse", &s, g.shape(b)));
    }
    if classes.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    let (k, c) = (s[0], s[1]);
    let mut weights = vec![0.0; k];
    for &cls in classes {
        weights[cls] = 1.0 / (classes.len() * c) as f64;
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let per_class = g.sum_axis(sq, 1)?;
    let wv = g.leaf_f64(&[k], weights, false)?;
    let weighted = g.mul(per_class, wv)?;
    Ok(g.sum(weighted))
}

fn joint(a: &[bool], b: &[bool]) -> Vec<usize> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter_map(|(k, (&x, &y))| (x && y).then_some(k))
        .collect()
}

/// Confident-to-uncertain prototype loss; the confident side is detached.
pub fn loss_un(g: &mut Graph, tau_con: &GraphPrototypes, tau_un: &GraphPrototypes) -> Result<Var> {
    let classes = joint(&tau_con.present, &tau_un.present);
    if classes.is_empty() {
        debug!("loss_un: no class present in both confident and uncertain sets");
    }
    let target = g.detach(tau_con.vectors);
    class_mse(g, target, tau_un.vectors, &classes)
}

/// Global-bank to confident prototype loss; the bank is a constant.
pub fn loss_ppa(g: &mut Graph, bank: &GlobalPrototypeBank, tau_con: &GraphPrototypes) -> Result<Var> {
    if bank.classes() != tau_con.present.len() {
        return Err(mismatch("loss_ppa", &[bank.classes()], &[tau_con.present.len()]));
    }
    let in_bank: Vec<bool> = bank.counts.iter().map(|&n| n > 0).collect();
    let classes = joint(&in_bank, &tau_con.present);
    if classes.is_empty() {
        debug!("loss_ppa: no class present in both bank and confident set");
    }
    let target = g.leaf_f64(&[bank.classes(), bank.channels], bank.vectors.clone(), false)?;
    class_mse(g, target, tau_con.vectors, &classes)
}

/// Mean over the six unordered strip pairs of the pairwise prototype MSE.
pub fn loss_sft(g: &mut Graph, sets: &[GraphPrototypes]) -> Result<Var> {
    if sets.len() < 2 {
        return Err(invalid(format!("loss_sft needs at least two strip sets, got {}", sets.len())));
    }
    let mut terms = Vec::new();
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            let classes = joint(&sets[a].present, &sets[b].present);
            terms.push(class_mse(g, sets[a].vectors, sets[b].vectors, &classes)?);
        }
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / n))
}

/// Evaluates a prototype loss on detached sets; convenient for inspection.
pub fn loss_value(
    sets: &[&PrototypeSet],
    f: impl Fn(&mut Graph, &[GraphPrototypes]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<GraphPrototypes> = sets
        .iter()
        .map(|s| GraphPrototypes {
            vectors: g.constant(&s.vectors),
            present: s.present.clone(),
        })
        .collect();
    let l = f(&mut g, &vars)?;
    Ok(g.item(l))
}
