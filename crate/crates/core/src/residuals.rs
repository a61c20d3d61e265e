//! Reconstruction losses, residual anomaly maps and image scores.
//!
//! Both the objective and the score compare reconstructed and original
//! features in two ways: squared Euclidean distance (intensity) and one minus
//! cosine similarity (orientation). Losses compare flattened patches; maps
//! compare the `C`-dimensional vectors at each location.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid_input, Error, Result};
use crate::fptd::{unfold, GridShape};
use crate::interp::{gaussian_filter, resize_bilinear_2d};
use crate::lpsr::Pfdf;
use crate::model::Carf;
use crate::real::Real;

pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const DEFAULT_SIGMA: f64 = 4.0;
/// Floor on `‖u‖·‖v‖` in cosine similarity.
pub const COS_EPS: f64 = 1e-8;

/// Which residuals enter the objective and the anomaly map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossModality {
    Intensity,
    Orientation,
    #[default]
    Both,
}

impl LossModality {
    pub const ALL: [LossModality; 3] = [LossModality::Intensity, LossModality::Orientation, LossModality::Both];

    pub fn name(self) -> &'static str {
        match self {
            LossModality::Intensity => "intensity",
            LossModality::Orientation => "orientation",
            LossModality::Both => "both",
        }
    }

    /// `(w_int, w_ori)` in `total = w_int·L_int + w_ori·L_ori`.
    pub fn weights(self, lambda: f64) -> (f64, f64) {
        match self {
            LossModality::Intensity => (1.0, 0.0),
            LossModality::Orientation => (0.0, lambda),
            LossModality::Both => (1.0, lambda),
        }
    }
}

impl fmt::Display for LossModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossModality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err!("unknown loss modality `{s}` (expected intensity, orientation or both)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_int: f64,
    pub l_ori: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_int.is_finite() && self.l_ori.is_finite() && self.total.is_finite()
    }
}

struct CosParts {
    dot: f64,
    uu: f64,
    vv: f64,
}

impl CosParts {
    fn of<T: Real>(u: ArrayView1<T>, v: ArrayView1<T>) -> Self {
        let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
        for (&a, &b) in u.iter().zip(v.iter()) {
            let (a, b) = (a.as_f64(), b.as_f64());
            dot += a * b;
            uu += a * a;
            vv += b * b;
        }
        Self { dot, uu, vv }
    }

    fn norm_product(&self) -> f64 {
        (self.uu * self.vv).sqrt()
    }

    fn cos(&self) -> f64 {
        (self.dot / self.norm_product().max(COS_EPS)).clamp(-1.0, 1.0)
    }
}

fn check_same_shape<T>(recon: &ArrayView2<T>, target: &ArrayView2<T>) -> Result<()> {
    if recon.dim() != target.dim() {
        return Err(invalid_input!(
            "reconstruction is {:?} but target is {:?}",
            recon.dim(),
            target.dim()
        ));
    }
    Ok(())
}

/// Loss over flattened patch rows and its gradient with respect to
/// `recon`. Sums run over all rows, then divide by `samples` so the report
/// and gradient are per-sample means over a batch.
pub fn patch_loss<T: Real>(
    recon: ArrayView2<T>,
    target: ArrayView2<T>,
    samples: usize,
    lambda: f64,
    modality: LossModality,
) -> Result<(LossReport, Array2<T>)> {
    check_same_shape(&recon, &target)?;
    if lambda < 0.0 {
        return Err(config_err!("loss weight lambda must be non-negative, got {lambda}"));
    }
    let scale = 1.0 / samples.max(1) as f64;
    let (w_int, w_ori) = modality.weights(lambda);
    let mut grad = Array2::<T>::zeros(recon.raw_dim());
    let (mut l_int, mut l_ori) = (0.0, 0.0);
    for ((u, v), mut g) in recon.rows().into_iter().zip(target.rows()).zip(grad.rows_mut()) {
        let parts = CosParts::of(u, v);
        // Direct sum keeps small differences exact where the expanded form cancels.
        l_int += u.iter().zip(v.iter()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>();
        l_ori += 1.0 - parts.cos();
        // d(1 − cos)/du = −v/n + (u·v)·u·‖v‖/(‖u‖·n²) when n = ‖u‖‖v‖ ≥ ε.
        let n = parts.norm_product();
        let (cu, cv) = if n >= COS_EPS {
            (parts.dot / (parts.uu * n), -1.0 / n)
        } else {
            (0.0, -1.0 / COS_EPS)
        };
        let (a, b) = (T::of(2.0 * w_int * scale), T::of(w_ori * scale));
        let (cu, cv) = (T::of(cu), T::of(cv));
        Zip::from(&mut g).and(&u).and(&v).for_each(|g, &ui, &vi| {
            *g = a * (ui - vi) + b * (cu * ui + cv * vi);
        });
    }
    let (l_int, l_ori) = (l_int * scale, l_ori * scale);
    Ok((
        LossReport {
            l_int,
            l_ori,
            total: w_int * l_int + w_ori * l_ori,
            lambda,
        },
        grad,
    ))
}

fn patch_rows(carf: &Carf, pfdf: &Pfdf, k: usize) -> Result<(Array2<f32>, Array2<f32>)> {
    if carf.data.dim() != pfdf.dim() {
        return Err(invalid_input!(
            "reconstruction is {:?} but features are {:?}",
            carf.data.dim(),
            pfdf.dim()
        ));
    }
    let (h, w, c) = pfdf.dim();
    let grid = GridShape::new(h, w, c, k)?;
    Ok((unfold(carf.data.view(), grid), unfold(pfdf.data.view(), grid)))
}

/// `Σ_n ‖p̂_n − p_n‖²` over flattened `K×K` patches.
pub fn intensity_loss(carf: &Carf, pfdf: &Pfdf, k: usize) -> Result<f64> {
    total_loss(carf, pfdf, 0.0, k).map(|r| r.l_int)
}

/// `Σ_n (1 − cos(p̂_n, p_n))` over flattened `K×K` patches.
pub fn orientation_loss(carf: &Carf, pfdf: &Pfdf, k: usize) -> Result<f64> {
    total_loss(carf, pfdf, 0.0, k).map(|r| r.l_ori)
}

pub fn total_loss(carf: &Carf, pfdf: &Pfdf, lambda: f64, k: usize) -> Result<LossReport> {
    let (r, t) = patch_rows(carf, pfdf, k)?;
    patch_loss(r.view(), t.view(), 1, lambda, LossModality::Both).map(|(report, _)| report)
}

/// Per-location squared distance `A_i` and `1 − cos` `A_o` over channels.
pub fn residual_maps(recon: ArrayView3<f32>, target: ArrayView3<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
    if recon.dim() != target.dim() {
        return Err(invalid_input!("maps differ in shape: {:?} vs {:?}", recon.dim(), target.dim()));
    }
    let (h, w, _) = target.dim();
    let mut a_i = Array2::<f32>::zeros((h, w));
    let mut a_o = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let u = recon.slice(ndarray::s![y, x, ..]);
            let v = target.slice(ndarray::s![y, x, ..]);
            let parts = CosParts::of(u, v);
            a_i[[y, x]] = u.iter().zip(v.iter()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() as f32;
            a_o[[y, x]] = (1.0 - parts.cos()) as f32;
        }
    }
    Ok((a_i, a_o))
}

/// Element-wise product.
pub fn fuse_maps(a_i: &Array2<f32>, a_o: &Array2<f32>) -> Result<Array2<f32>> {
    if a_i.dim() != a_o.dim() {
        return Err(invalid_input!("maps differ in shape: {:?} vs {:?}", a_i.dim(), a_o.dim()));
    }
    Ok(a_i * a_o)
}

/// Combines the residuals that the chosen modality keeps.
pub fn combine_maps(a_i: &Array2<f32>, a_o: &Array2<f32>, modality: LossModality) -> Result<Array2<f32>> {
    match modality {
        LossModality::Both => fuse_maps(a_i, a_o),
        LossModality::Intensity => Ok(a_i.clone()),
        LossModality::Orientation => Ok(a_o.clone()),
    }
}

/// Bilinear upsampling to `image_size`, then Gaussian smoothing.
pub fn postprocess(a: &Array2<f32>, image_size: (usize, usize), sigma: f64) -> Array2<f32> {
    let up = resize_bilinear_2d(a.view(), image_size.0, image_size.1);
    let smooth = if sigma > 0.0 { gaussian_filter(up.view(), sigma) } else { up };
    smooth.mapv(|v| v.max(0.0))
}

/// Population standard deviation of the map.
pub fn image_score(map: &Array2<f32>) -> f64 {
    let n = map.len().max(1) as f64;
    let mean = map.iter().map(|&v| v as f64).sum::<f64>() / n;
    (map.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// Smoothed map at image resolution.
    pub map: Array2<f32>,
    pub image_score: f64,
    /// Intensity residual at feature resolution.
    pub a_i: Array2<f32>,
    /// Orientation residual at feature resolution.
    pub a_o: Array2<f32>,
}

/// Scoring settings shared by evaluation and inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub sigma: f64,
    pub modality: LossModality,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            modality: LossModality::Both,
        }
    }
}

/// Residual maps of several reconstructions of one target, averaged before
/// smoothing.
pub fn score_reconstructions(
    recons: &[ArrayView3<f32>],
    target: ArrayView3<f32>,
    image_size: (usize, usize),
    cfg: &ScoreConfig,
) -> Result<AnomalyMap> {
    if recons.is_empty() {
        return Err(invalid_input!("no reconstructions to score"));
    }
    let (h, w, _) = target.dim();
    let mut a_i = Array2::<f32>::zeros((h, w));
    let mut a_o = Array2::<f32>::zeros((h, w));
    let mut fused = Array2::<f32>::zeros((h, w));
    let m = recons.len() as f32;
    for r in recons {
        let (i, o) = residual_maps(*r, target)?;
        fused += &(combine_maps(&i, &o, cfg.modality)? / m);
        a_i += &(i / m);
        a_o += &(o / m);
    }
    let map = postprocess(&fused, image_size, cfg.sigma);
    Ok(AnomalyMap {
        image_score: image_score(&map),
        map,
        a_i,
        a_o,
    })
}

pub fn anomaly_map(carf: &Carf, pfdf: &Pfdf, image_size: (usize, usize), cfg: &ScoreConfig) -> Result<AnomalyMap> {
    score_reconstructions(&[carf.data.view()], pfdf.data.view(), image_size, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array, Array3};
    use proptest::prelude::*;

    fn pf(data: Array3<f32>) -> Pfdf {
        Pfdf { data, source: "t".into() }
    }

    fn carf(data: Array3<f32>) -> Carf {
        Carf { data }
    }

    fn field(h: usize, w: usize, c: usize, salt: f32) -> Array3<f32> {
        Array::from_shape_fn((h, w, c), |(y, x, ch)| ((y * 7 + x * 3 + ch * 11) as f32 * 0.37 + salt).sin())
    }

    #[test]
    fn intensity_examples() {
        let a = field(4, 4, 3, 0.0);
        assert_eq!(intensity_loss(&carf(a.clone()), &pf(a.clone()), 2).unwrap(), 0.0);
        let ones = Array3::from_elem((2, 2, 1), 1.0);
        let zeros = Array3::zeros((2, 2, 1));
        assert_eq!(intensity_loss(&carf(ones), &pf(zeros), 2).unwrap(), 4.0);
        let b = field(4, 4, 3, 1.0);
        let base = intensity_loss(&carf(a.clone()), &pf(b.clone()), 2).unwrap();
        let scaled = intensity_loss(&carf(&a * 3.0), &pf(&b * 3.0), 2).unwrap();
        assert_abs_diff_eq!(scaled, 9.0 * base, epsilon = 1e-4);
        let sym = intensity_loss(&carf(b), &pf(a), 2).unwrap();
        assert_abs_diff_eq!(sym, base, epsilon = 1e-9);
    }

    #[test]
    fn orientation_examples() {
        let a = field(4, 4, 3, 0.0);
        assert_abs_diff_eq!(orientation_loss(&carf(a.clone()), &pf(a), 2).unwrap(), 0.0, epsilon = 1e-6);
        let e1 = array![[[1.0f32, 0.0]]];
        let e2 = array![[[0.0f32, 1.0]]];
        assert_abs_diff_eq!(orientation_loss(&carf(e1), &pf(e2), 1).unwrap(), 1.0, epsilon = 1e-12);
        let v = array![[[0.3f32, -1.2, 2.0]]];
        assert_abs_diff_eq!(orientation_loss(&carf(-&v), &pf(v), 1).unwrap(), 2.0, epsilon = 1e-7);
    }

    #[test]
    fn zero_patches_are_guarded() {
        let z = Array3::<f32>::zeros((2, 2, 2));
        let r = total_loss(&carf(z.clone()), &pf(z), 5.0, 1).unwrap();
        assert!(r.is_finite());
        assert_eq!(r.l_ori, 4.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let (a, b) = (field(4, 4, 2, 0.0), field(4, 4, 2, 0.5));
        let r = total_loss(&carf(a.clone()), &pf(b.clone()), 5.0, 2).unwrap();
        assert_abs_diff_eq!(r.total, r.l_int + 5.0 * r.l_ori, epsilon = 1e-9);
        let r0 = total_loss(&carf(a.clone()), &pf(b.clone()), 0.0, 2).unwrap();
        assert_eq!(r0.total, intensity_loss(&carf(a), &pf(b), 2).unwrap());
        let composed = LossModality::Both.weights(5.0);
        assert_eq!(composed.0 * 4.0 + composed.1 * 1.0, 9.0);
    }

    #[test]
    fn identical_inputs_have_zero_total() {
        let a = field(4, 4, 3, 2.0);
        assert!(total_loss(&carf(a.clone()), &pf(a), 5.0, 2).unwrap().total.abs() < 1e-6);
    }

    #[test]
    fn residual_map_examples() {
        let (i, o) = residual_maps(array![[[1.0f32, 0.0]]].view(), array![[[0.0f32, 1.0]]].view()).unwrap();
        assert_eq!((i[[0, 0]], o[[0, 0]]), (2.0, 1.0));
        assert_eq!(fuse_maps(&i, &o).unwrap()[[0, 0]], 2.0);
        let phi = array![[[0.6f32, 0.8, 0.0]]];
        let (i, o) = residual_maps((&phi * 2.0).view(), phi.view()).unwrap();
        assert_abs_diff_eq!(i[[0, 0]], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(o[[0, 0]], 0.0, epsilon = 1e-6);
        let a = field(3, 3, 4, 0.0);
        let (i, o) = residual_maps(a.view(), a.view()).unwrap();
        assert!(i.iter().chain(o.iter()).all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn fusion_properties() {
        let a = field(3, 3, 1, 0.0).into_shape_with_order((3, 3)).unwrap().mapv(f32::abs);
        let b = field(3, 3, 1, 1.0).into_shape_with_order((3, 3)).unwrap().mapv(f32::abs);
        assert_eq!(fuse_maps(&a, &b).unwrap(), fuse_maps(&b, &a).unwrap());
        assert!(fuse_maps(&a, &Array2::zeros((3, 3))).unwrap().iter().all(|&v| v == 0.0));
        assert!(fuse_maps(&a, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn postprocess_examples() {
        let c = Array2::from_elem((64, 64), 0.7f32);
        let out = postprocess(&c, (256, 256), 4.0);
        assert_eq!(out.dim(), (256, 256));
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-5));
        let mut impulse = Array2::<f32>::zeros((65, 65));
        impulse[[32, 32]] = 1.0;
        let smooth = postprocess(&impulse, (65, 65), 4.0);
        let k = crate::interp::gaussian_kernel(4.0, 4.0);
        assert_abs_diff_eq!(smooth[[32, 32]], k[16] * k[16], epsilon = 1e-7);
        assert_abs_diff_eq!(smooth[[32, 32]] as f64, 1.0 / (2.0 * std::f64::consts::PI * 16.0), epsilon = 1e-3);
    }

    #[test]
    fn image_score_examples() {
        assert_eq!(image_score(&Array2::from_elem((4, 4), 3.0)), 0.0);
        assert_abs_diff_eq!(image_score(&array![[0.0, 0.0], [0.0, 2.0]]), 0.75f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn modality_parsing() {
        for m in LossModality::ALL {
            assert_eq!(m.name().parse::<LossModality>().unwrap(), m);
        }
        assert!("cosine".parse::<LossModality>().is_err());
    }

    #[test]
    fn shape_mismatch_is_invalid_input() {
        let r = total_loss(&carf(Array3::zeros((2, 2, 1))), &pf(Array3::zeros((2, 2, 2))), 5.0, 1);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let u = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.71).sin());
        let v = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.29 + 1.0).cos());
        for modality in LossModality::ALL {
            let (_, g) = patch_loss(u.view(), v.view(), 2, 5.0, modality).unwrap();
            let h = 1e-6;
            for idx in 0..u.len() {
                let mut p = u.clone();
                let mut m = u.clone();
                p.as_slice_mut().unwrap()[idx] += h;
                m.as_slice_mut().unwrap()[idx] -= h;
                let f = |x: &Array2<f64>| patch_loss(x.view(), v.view(), 2, 5.0, modality).unwrap().0.total;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                let ana = g.as_slice().unwrap()[idx];
                assert!((num - ana).abs() / num.abs().max(1e-6) < 1e-6, "{modality}: {num} vs {ana}");
            }
        }
    }

    proptest! {
        #[test]
        fn orientation_terms_are_bounded(vals in proptest::collection::vec(-5.0f32..5.0, 24)) {
            let a = Array3::from_shape_vec((2, 2, 6), vals[..24].to_vec()).unwrap();
            let b = a.mapv(|v| (v * 1.7).sin() - 0.2);
            let (_, o) = residual_maps(a.view(), b.view()).unwrap();
            prop_assert!(o.iter().all(|&x| (0.0..=2.0).contains(&x)));
        }

        #[test]
        fn intensity_loss_matches_summed_map_at_unit_patch(seed in 0.0f32..10.0) {
            let a = field(4, 4, 5, seed);
            let b = field(4, 4, 5, seed + 0.3);
            let (i, _) = residual_maps(a.view(), b.view()).unwrap();
            let loss = intensity_loss(&carf(a), &pf(b), 1).unwrap();
            prop_assert!((loss - i.iter().map(|&v| v as f64).sum::<f64>()).abs() < 1e-5);
        }

        #[test]
        fn image_score_shift_and_scale(offset in -3.0f32..3.0, scale in 0.1f32..4.0) {
            let m = field(6, 6, 1, 0.0).into_shape_with_order((6, 6)).unwrap();
            let s = image_score(&m);
            prop_assert!((image_score(&(&m + offset)) - s).abs() < 1e-5);
            prop_assert!((image_score(&(&m * scale)) - scale as f64 * s).abs() < 1e-5);
        }
    }
}
