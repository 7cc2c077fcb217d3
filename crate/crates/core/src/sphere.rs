//! Sphere geometry: equirectangular sampling, gnomonic tangent patches, and
//! fixed-FoV vertical strips.
//!
//! ERP pixel `(i, j)` of an `H x W` map sits at latitude
//! `pi/2 - pi (i + 0.5) / H` and longitude `2 pi (j + 0.5) / W - pi`.
//! Tangent patch pixel `(v, u)` of an `h x w` patch sits at plane coordinates
//! `x = (u - w/2) / fx`, `y = (h/2 - v) / fy` with `fx = (w/2) / tan(fov/2)`,
//! so pixel `(h/2, w/2)` is the tangent point.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{invalid, mismatch, Error, Result};
use crate::tensor::Tensor;

/// What an ERP-shaped tensor holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErpKind {
    Image,
    Logits,
    Label,
    Feature,
}

/// A `(C, H, W)` equirectangular map.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpTensor {
    tensor: Tensor,
    kind: ErpKind,
}

impl ErpTensor {
    pub fn new(tensor: Tensor, kind: ErpKind) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(invalid(format!("ERP tensor must be (C, H, W), got {:?}", tensor.shape())));
        }
        let (c, h, w) = (tensor.dim(0), tensor.dim(1), tensor.dim(2));
        if kind != ErpKind::Feature && w != 2 * h {
            return Err(invalid(format!("ERP {kind:?} needs W == 2H, got {h}x{w}")));
        }
        if kind == ErpKind::Label {
            if c != 1 {
                return Err(invalid(format!("label ERP must have one channel, got {c}")));
            }
            if tensor.data().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                return Err(invalid("label ERP holds non-integer or negative entries"));
            }
        }
        Ok(Self { tensor, kind })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn kind(&self) -> ErpKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn height(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn width(&self) -> usize {
        self.tensor.dim(2)
    }
}

// ---- coordinates -----------------------------------------------------------

/// Latitude of ERP row `i` (pixel centre).
pub fn row_lat(i: usize, h: usize) -> f64 {
    FRAC_PI_2 - PI * (i as f64 + 0.5) / h as f64
}

/// Longitude of ERP column `j` (pixel centre), in `(-pi, pi)`.
pub fn col_lon(j: usize, w: usize) -> f64 {
    2.0 * PI * (j as f64 + 0.5) / w as f64 - PI
}

/// Continuous ERP pixel coordinates `(row, col)` of a direction.
pub fn erp_coords(lat: f64, lon: f64, h: usize, w: usize) -> (f64, f64) {
    let row = (FRAC_PI_2 - lat) / PI * h as f64 - 0.5;
    let col = (lon + PI) / (2.0 * PI) * w as f64 - 0.5;
    (row, col)
}

/// Forward gnomonic projection about `(lat0, lon0)`; `None` on the far
/// hemisphere.
pub fn gnomonic_forward(lat0: f64, lon0: f64, lat: f64, lon: f64) -> Option<(f64, f64)> {
    let dl = lon - lon0;
    let cos_c = lat0.sin() * lat.sin() + lat0.cos() * lat.cos() * dl.cos();
    if cos_c <= 1e-9 {
        return None;
    }
    let x = lat.cos() * dl.sin() / cos_c;
    let y = (lat0.cos() * lat.sin() - lat0.sin() * lat.cos() * dl.cos()) / cos_c;
    Some((x, y))
}

/// Inverse gnomonic projection about `(lat0, lon0)`.
pub fn gnomonic_inverse(lat0: f64, lon0: f64, x: f64, y: f64) -> (f64, f64) {
    let rho = x.hypot(y);
    if rho < 1e-15 {
        return (lat0, lon0);
    }
    let c = rho.atan();
    let (sc, cc) = c.sin_cos();
    let lat = (cc * lat0.sin() + y * sc * lat0.cos() / rho).clamp(-1.0, 1.0).asin();
    let lon = lon0 + (x * sc).atan2(rho * lat0.cos() * cc - y * lat0.sin() * sc);
    (lat, lon)
}

/// Great-circle distance in radians.
pub fn angular_distance(lat_a: f64, lon_a: f64, lat_b: f64, lon_b: f64) -> f64 {
    let s_lat = ((lat_b - lat_a) / 2.0).sin();
    let s_lon = ((lon_b - lon_a) / 2.0).sin();
    let hav = s_lat * s_lat + lat_a.cos() * lat_b.cos() * s_lon * s_lon;
    2.0 * hav.clamp(0.0, 1.0).sqrt().asin()
}

/// Four bilinear taps into a flat plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

impl Taps {
    fn gather(&self, plane: &[f32]) -> f64 {
        (0..4).map(|k| plane[self.idx[k]] as f64 * self.w[k]).sum()
    }
}

/// Bilinear taps into an `h x w` ERP plane with horizontal wrap and vertical
/// clamp.
pub(crate) fn erp_taps(lat: f64, lon: f64, h: usize, w: usize) -> Taps {
    let (row, col) = erp_coords(lat, lon, h, w);
    let row = row.clamp(0.0, (h - 1) as f64);
    let i0 = row.floor() as usize;
    let i1 = (i0 + 1).min(h - 1);
    let fi = row - i0 as f64;
    let c0 = col.floor();
    let fj = col - c0;
    let j0 = (c0 as i64).rem_euclid(w as i64) as usize;
    let j1 = (j0 + 1) % w;
    Taps {
        idx: [i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1],
        w: [(1.0 - fi) * (1.0 - fj), (1.0 - fi) * fj, fi * (1.0 - fj), fi * fj],
    }
}

/// Index of the ERP pixel nearest a direction.
pub(crate) fn erp_nearest(lat: f64, lon: f64, h: usize, w: usize) -> usize {
    let (row, col) = erp_coords(lat, lon, h, w);
    let i = (row.round().max(0.0) as usize).min(h - 1);
    let j = (col.round() as i64).rem_euclid(w as i64) as usize;
    i * w + j
}

/// Bilinearly samples every channel of a `(C, H, W)` ERP at one direction.
pub fn sample_erp(erp: &Tensor, lat: f64, lon: f64) -> Vec<f64> {
    let (c, h, w) = (erp.dim(0), erp.dim(1), erp.dim(2));
    let taps = erp_taps(lat, lon, h, w);
    (0..c)
        .map(|ch| taps.gather(&erp.data()[ch * h * w..(ch + 1) * h * w]))
        .collect()
}

// ---- tangent grid ----------------------------------------------------------

/// Tangent points and patch geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentGrid {
    /// `(latitude, longitude)` in radians.
    pub centers: Vec<(f64, f64)>,
    pub fov_deg: f64,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl TangentGrid {
    fn focal(&self) -> (f64, f64) {
        let t = (self.fov_deg.to_radians() / 2.0).tan();
        (self.patch_w as f64 / 2.0 / t, self.patch_h as f64 / 2.0 / t)
    }

    /// Plane coordinates of patch pixel `(v, u)`.
    pub fn pixel_to_plane(&self, v: usize, u: usize) -> (f64, f64) {
        let (fx, fy) = self.focal();
        (
            (u as f64 - self.patch_w as f64 / 2.0) / fx,
            (self.patch_h as f64 / 2.0 - v as f64) / fy,
        )
    }

    /// Continuous patch pixel `(v, u)` of plane coordinates.
    pub fn plane_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let (fx, fy) = self.focal();
        (self.patch_h as f64 / 2.0 - y * fy, self.patch_w as f64 / 2.0 + x * fx)
    }

    /// Continuous pixel position of a direction inside patch `p`, if it lies
    /// within the patch's sampling footprint.
    pub fn locate(&self, p: usize, lat: f64, lon: f64) -> Option<(f64, f64)> {
        let (lat0, lon0) = self.centers[p];
        let (x, y) = gnomonic_forward(lat0, lon0, lat, lon)?;
        let (v, u) = self.plane_to_pixel(x, y);
        let inside = v >= -1e-9
            && u >= -1e-9
            && v <= (self.patch_h - 1) as f64 + 1e-9
            && u <= (self.patch_w - 1) as f64 + 1e-9;
        inside.then_some((v.max(0.0), u.max(0.0)))
    }

    /// Sweeps the sphere on a `step_deg` lattice and returns the first
    /// direction outside every patch footprint.
    pub fn first_uncovered(&self, step_deg: f64) -> Option<(f64, f64)> {
        let n_lat = (180.0 / step_deg).round() as usize;
        let n_lon = (360.0 / step_deg).round() as usize;
        for a in 0..=n_lat {
            let lat_deg = -90.0 + a as f64 * step_deg;
            for b in 0..n_lon {
                let lon_deg = -180.0 + b as f64 * step_deg;
                let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
                if (0..self.centers.len()).all(|p| self.locate(p, lat, lon).is_none()) {
                    return Some((lat_deg, lon_deg));
                }
            }
        }
        None
    }

    /// Rejects grids that leave some direction of a 1-degree sweep uncovered.
    pub fn check_coverage(&self) -> Result<()> {
        match self.first_uncovered(1.0) {
            None => Ok(()),
            Some((lat_deg, lon_deg)) => Err(Error::Coverage { lat_deg, lon_deg }),
        }
    }

    /// Same grid with every tangent longitude shifted by `delta` radians.
    pub fn rotated(&self, delta: f64) -> Self {
        let mut g = self.clone();
        g.centers.iter_mut().for_each(|c| c.1 += delta);
        g
    }
}

/// Builds `n_rings` latitude rings at `-90 + 180 (r + 0.5) / n_rings` degrees,
/// each with `lons_per_ring` equally spaced tangent points starting at 0.
pub fn make_tangent_grid(
    n_rings: usize,
    lons_per_ring: usize,
    fov_deg: f64,
    patch_h: usize,
    patch_w: usize,
) -> Result<TangentGrid> {
    if n_rings == 0 || lons_per_ring == 0 {
        return Err(invalid("tangent grid needs at least one ring and one longitude"));
    }
    if !(fov_deg > 0.0 && fov_deg < 120.0) {
        return Err(invalid(format!("tangent FoV must lie in (0, 120) degrees, got {fov_deg}")));
    }
    if patch_h < 2 || patch_w < 2 {
        return Err(invalid(format!("patch size {patch_h}x{patch_w} too small")));
    }
    let mut centers = Vec::with_capacity(n_rings * lons_per_ring);
    for r in 0..n_rings {
        let lat = -90.0 + 180.0 * (r as f64 + 0.5) / n_rings as f64;
        for k in 0..lons_per_ring {
            let lon = 360.0 * k as f64 / lons_per_ring as f64;
            centers.push((lat.to_radians(), lon.to_radians()));
        }
    }
    let grid = TangentGrid {
        centers,
        fov_deg,
        patch_h,
        patch_w,
    };
    grid.check_coverage()?;
    Ok(grid)
}

/// The 18-patch layout: rings at -60, 0, 60 degrees, six longitudes, 80 degree FoV.
pub fn default_tangent_grid(patch_h: usize, patch_w: usize) -> Result<TangentGrid> {
    make_tangent_grid(3, 6, 80.0, patch_h, patch_w)
}

/// Patches sampled from one ERP.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentPatchSet {
    pub grid: TangentGrid,
    pub patches: Vec<Tensor>,
}

/// Precomputed remap tables between one ERP resolution and one grid.
#[derive(Clone, Debug)]
pub struct TangentProjector {
    grid: TangentGrid,
    erp_h: usize,
    erp_w: usize,
    /// ERP taps for every patch pixel, patch-major.
    to_patch: Vec<Taps>,
    /// Per ERP pixel, the range into `from_patch` of its contributors.
    offsets: Vec<usize>,
    from_patch: Vec<(usize, Taps)>,
}

impl TangentProjector {
    pub fn new(grid: &TangentGrid, erp_h: usize, erp_w: usize) -> Result<Self> {
        if erp_h == 0 || erp_w == 0 {
            return Err(invalid("empty ERP resolution"));
        }
        let (ph, pw) = (grid.patch_h, grid.patch_w);
        let mut to_patch = Vec::with_capacity(grid.centers.len() * ph * pw);
        for &(lat0, lon0) in &grid.centers {
            for v in 0..ph {
                for u in 0..pw {
                    let (x, y) = grid.pixel_to_plane(v, u);
                    let (lat, lon) = gnomonic_inverse(lat0, lon0, x, y);
                    to_patch.push(erp_taps(lat, lon, erp_h, erp_w));
                }
            }
        }
        let mut offsets = Vec::with_capacity(erp_h * erp_w + 1);
        let mut from_patch = Vec::new();
        offsets.push(0);
        for i in 0..erp_h {
            let lat = row_lat(i, erp_h);
            for j in 0..erp_w {
                let lon = col_lon(j, erp_w);
                for p in 0..grid.centers.len() {
                    if let Some((v, u)) = grid.locate(p, lat, lon) {
                        from_patch.push((p, patch_taps(v, u, ph, pw)));
                    }
                }
                offsets.push(from_patch.len());
            }
        }
        Ok(Self {
            grid: grid.clone(),
            erp_h,
            erp_w,
            to_patch,
            offsets,
            from_patch,
        })
    }

    pub fn grid(&self) -> &TangentGrid {
        &self.grid
    }

    pub fn erp_size(&self) -> (usize, usize) {
        (self.erp_h, self.erp_w)
    }

    pub fn n_patches(&self) -> usize {
        self.grid.centers.len()
    }

    /// Number of patches contributing to each ERP pixel.
    pub fn contribution_counts(&self) -> Vec<u32> {
        self.offsets.windows(2).map(|w| (w[1] - w[0]) as u32).collect()
    }

    /// Samples all patches from a `(C, H, W)` ERP.
    pub fn erp_to_tangent(&self, erp: &Tensor) -> Result<Vec<Tensor>> {
        if erp.rank() != 3 || erp.dim(1) != self.erp_h || erp.dim(2) != self.erp_w {
            return Err(mismatch("erp_to_tangent", erp.shape(), &[0, self.erp_h, self.erp_w]));
        }
        let c = erp.dim(0);
        let plane = self.erp_h * self.erp_w;
        let pp = self.grid.patch_h * self.grid.patch_w;
        let mut out = Vec::with_capacity(self.n_patches());
        for p in 0..self.n_patches() {
            let taps = &self.to_patch[p * pp..(p + 1) * pp];
            let mut data = Vec::with_capacity(c * pp);
            for ch in 0..c {
                let src = &erp.data()[ch * plane..(ch + 1) * plane];
                data.extend(taps.iter().map(|t| t.gather(src) as f32));
            }
            out.push(Tensor::new(vec![c, self.grid.patch_h, self.grid.patch_w], data)?);
        }
        Ok(out)
    }

    /// Merges `(C, h, w)` patches back onto the ERP grid by a uniform average
    /// over contributing patches. Returns the map and per-pixel counts.
    pub fn tangent_to_erp(&self, patches: &[Tensor]) -> Result<(Tensor, Vec<u32>)> {
        if patches.len() != self.n_patches() {
            return Err(invalid(format!(
                "expected {} patches, got {}",
                self.n_patches(),
                patches.len()
            )));
        }
        let c = patches[0].dim(0);
        let want = [c, self.grid.patch_h, self.grid.patch_w];
        for p in patches {
            if p.shape() != want {
                return Err(mismatch("tangent_to_erp", p.shape(), &want));
            }
        }
        let counts = self.contribution_counts();
        if let Some(pix) = counts.iter().position(|&n| n == 0) {
            let (i, j) = (pix / self.erp_w, pix % self.erp_w);
            return Err(Error::Coverage {
                lat_deg: row_lat(i, self.erp_h).to_degrees(),
                lon_deg: col_lon(j, self.erp_w).to_degrees(),
            });
        }
        let plane = self.erp_h * self.erp_w;
        let pp = self.grid.patch_h * self.grid.patch_w;
        let mut data = vec![0f32; c * plane];
        for ch in 0..c {
            for pix in 0..plane {
                let entries = &self.from_patch[self.offsets[pix]..self.offsets[pix + 1]];
                let sum: f64 = entries
                    .iter()
                    .map(|(p, t)| t.gather(&patches[*p].data()[ch * pp..(ch + 1) * pp]))
                    .sum();
                data[ch * plane + pix] = (sum / entries.len() as f64) as f32;
            }
        }
        Ok((Tensor::new(vec![c, self.erp_h, self.erp_w], data)?, counts))
    }
}

fn patch_taps(v: f64, u: f64, h: usize, w: usize) -> Taps {
    let v = v.min((h - 1) as f64);
    let u = u.min((w - 1) as f64);
    let i0 = v.floor() as usize;
    let j0 = u.floor() as usize;
    let i1 = (i0 + 1).min(h - 1);
    let j1 = (j0 + 1).min(w - 1);
    let fi = v - i0 as f64;
    let fj = u - j0 as f64;
    Taps {
        idx: [i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1],
        w: [(1.0 - fi) * (1.0 - fj), (1.0 - fi) * fj, fi * (1.0 - fj), fi * fj],
    }
}

/// Samples tangent patches from an image, logit or feature ERP.
pub fn erp_to_tangent(erp: &ErpTensor, grid: &TangentGrid) -> Result<TangentPatchSet> {
    if erp.kind() == ErpKind::Label {
        return Err(invalid("labels cannot be bilinearly resampled into tangent patches"));
    }
    let proj = TangentProjector::new(grid, erp.height(), erp.width())?;
    Ok(TangentPatchSet {
        grid: grid.clone(),
        patches: proj.erp_to_tangent(erp.tensor())?,
    })
}

/// Merges tangent patches back to an `out_h x out_w` ERP of the given kind.
pub fn tangent_to_erp(
    set: &TangentPatchSet,
    out_h: usize,
    out_w: usize,
    kind: ErpKind,
) -> Result<(ErpTensor, Vec<u32>)> {
    if kind == ErpKind::Label {
        return Err(invalid("tangent merging averages values and cannot produce labels"));
    }
    let proj = TangentProjector::new(&set.grid, out_h, out_w)?;
    let (t, counts) = proj.tangent_to_erp(&set.patches)?;
    Ok((ErpTensor::new(t, kind)?, counts))
}

/// Gnomonic view of an ERP with arbitrary orientation, used for pinhole
/// crops. Images are sampled bilinearly, labels by nearest neighbour.
pub fn gnomonic_view(
    erp: &Tensor,
    lat0: f64,
    lon0: f64,
    fov_deg: f64,
    out_h: usize,
    out_w: usize,
    nearest: bool,
) -> Result<Tensor> {
    if erp.rank() != 3 {
        return Err(invalid(format!("view source must be (C, H, W), got {:?}", erp.shape())));
    }
    let grid = TangentGrid {
        centers: vec![(lat0, lon0)],
        fov_deg,
        patch_h: out_h,
        patch_w: out_w,
    };
    let (c, h, w) = (erp.dim(0), erp.dim(1), erp.dim(2));
    let mut data = vec![0f32; c * out_h * out_w];
    for v in 0..out_h {
        for u in 0..out_w {
            let (x, y) = grid.pixel_to_plane(v, u);
            let (lat, lon) = gnomonic_inverse(lat0, lon0, x, y);
            let pix = v * out_w + u;
            if nearest {
                let src = erp_nearest(lat, lon, h, w);
                for ch in 0..c {
                    data[ch * out_h * out_w + pix] = erp.data()[ch * h * w + src];
                }
            } else {
                let taps = erp_taps(lat, lon, h, w);
                for ch in 0..c {
                    data[ch * out_h * out_w + pix] = taps.gather(&erp.data()[ch * h * w..(ch + 1) * h * w]) as f32;
                }
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

// ---- fixed-FoV strips ------------------------------------------------------

/// Vertical ERP strips of equal horizontal FoV, in longitude order.
#[derive(Clone, Debug, PartialEq)]
pub struct FfpPatchSet {
    pub patches: Vec<Tensor>,
    pub fov_deg: f64,
    pub kind: ErpKind,
}

/// Number of strips for a FoV, requiring `360 / fov` to be a whole number.
pub fn ffp_count(fov_deg: f64) -> Result<usize> {
    if !(fov_deg > 0.0 && fov_deg <= 360.0) {
        return Err(invalid(format!("strip FoV must lie in (0, 360], got {fov_deg}")));
    }
    let n = 360.0 / fov_deg;
    if (n - n.round()).abs() > 1e-9 {
        return Err(invalid(format!("360 is not a multiple of the strip FoV {fov_deg}")));
    }
    Ok(n.round() as usize)
}

/// Slices a `(C, H, W)` tensor into strips along the width.
pub fn slice_width(t: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let w = *t.shape().last().ok_or_else(|| invalid("cannot slice a scalar"))?;
    if n == 0 || w % n != 0 {
        return Err(invalid(format!("width {w} is not divisible into {n} strips")));
    }
    let sw = w / n;
    let axis = t.rank() - 1;
    (0..n).map(|k| t.narrow(axis, k * sw, sw)).collect()
}

pub fn erp_to_ffp(erp: &ErpTensor, fov_deg: f64) -> Result<FfpPatchSet> {
    let n = ffp_count(fov_deg)?;
    Ok(FfpPatchSet {
        patches: slice_width(erp.tensor(), n)?,
        fov_deg,
        kind: erp.kind(),
    })
}

/// Concatenates strips along the width.
pub fn ffp_rebuild(set: &FfpPatchSet) -> Result<ErpTensor> {
    ErpTensor::new(rebuild_width(&set.patches)?, set.kind)
}

pub fn rebuild_width(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("no strips to rebuild"))?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, first.rank().saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_layout() {
        let g = default_tangent_grid(16, 16).unwrap();
        assert_eq!(g.centers.len(), 18);
        let lats: Vec<i64> = g.centers.iter().step_by(6).map(|c| c.0.to_degrees().round() as i64).collect();
        assert_eq!(lats, vec![-60, 0, 60]);
        let lons: Vec<i64> = g.centers[..6].iter().map(|c| c.1.to_degrees().round() as i64).collect();
        assert_eq!(lons, vec![0, 60, 120, 180, 240, 300]);
    }

    #[test]
    fn narrow_fov_fails_coverage_with_direction() {
        let err = make_tangent_grid(3, 6, 40.0, 16, 16).unwrap_err();
        assert!(matches!(err, Error::Coverage { .. }), "{err}");
        assert!(make_tangent_grid(3, 6, 120.0, 16, 16).is_err());
    }

    #[test]
    fn gnomonic_roundtrip_on_plane() {
        for &(lat0, lon0) in &[(0.0, 0.0), (1.0, -2.0), (-1.2, 3.0)] {
            for &(x, y) in &[(0.0, 0.0), (0.3, -0.7), (-1.1, 0.4)] {
                let (lat, lon) = gnomonic_inverse(lat0, lon0, x, y);
                let (x2, y2) = gnomonic_forward(lat0, lon0, lat, lon).unwrap();
                assert!((x - x2).abs() < 1e-9 && (y - y2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ffp_strip_arithmetic() {
        assert_eq!(ffp_count(90.0).unwrap(), 4);
        assert_eq!(ffp_count(72.0).unwrap(), 5);
        assert!(ffp_count(100.0).is_err());
        let t = Tensor::zeros(&[3, 4, 2048]);
        let erp = ErpTensor::new(Tensor::zeros(&[3, 1024, 2048]), ErpKind::Image).unwrap();
        let set = erp_to_ffp(&erp, 90.0).unwrap();
        assert_eq!(set.patches.len(), 4);
        assert!(set.patches.iter().all(|p| p.shape() == [3, 1024, 512]));
        assert!(slice_width(&t, 3).is_err());
    }

    #[test]
    fn label_kind_validation() {
        assert!(ErpTensor::new(Tensor::full(&[1, 2, 4], 1.5), ErpKind::Label).is_err());
        assert!(ErpTensor::new(Tensor::full(&[2, 2, 4], 1.0), ErpKind::Label).is_err());
        assert!(ErpTensor::new(Tensor::full(&[1, 2, 5], 1.0), ErpKind::Image).is_err());
        assert!(ErpTensor::new(Tensor::full(&[1, 2, 4], 3.0), ErpKind::Label).is_ok());
    }
}
