//! Weight statistics, Hessian sensitivity and loss-landscape slices.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::VisionTransformer;
use crate::quantization::policy::QuantizationPolicy;
use crate::quantization::ternary::scales;
use crate::quantization::Granularity;
use crate::tensor::Tensor;

/// Channel-wise absolute mean: `cam[j] = (1/n_w)·Σ_k |W[k, j]|`.
///
/// This is the same computation that yields the ternary scales, so
/// `cam(W)[j] as f32 == ternarize(W).alpha()[j]`.
pub fn cam(w: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = w.dims2("cam")?;
    Ok(scales(w, rows, cols, Granularity::ChannelWise).0)
}

/// Population standard deviation of a CAM vector.
pub fn sdam_of(cam: &[f64]) -> f64 {
    if cam.is_empty() {
        return 0.0;
    }
    let n = cam.len() as f64;
    let mean = cam.iter().sum::<f64>() / n;
    (cam.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn sdam(w: &Tensor) -> Result<f64> {
    Ok(sdam_of(&cam(w)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeadChannels {
    pub threshold: f64,
    pub channels: Vec<usize>,
}

impl DeadChannels {
    pub fn count(&self) -> usize {
        self.channels.len()
    }
}

/// Channels whose CAM is strictly below `reference_min_cam`.
pub fn dead_channels(w: &Tensor, reference_min_cam: f64) -> Result<DeadChannels> {
    if reference_min_cam.is_nan() || reference_min_cam < 0.0 {
        return Err(Error::Value {
            op: "dead_channels",
            detail: format!("reference CAM must be nonnegative, got {reference_min_cam}"),
        });
    }
    let channels = cam(w)?
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < reference_min_cam)
        .map(|(j, _)| j)
        .collect();
    Ok(DeadChannels {
        threshold: reference_min_cam,
        channels,
    })
}

/// Fraction of `subject`'s channels whose CAM falls below the smallest CAM
/// of `reference` (e.g. a model trained without vs. with the proxy phase).
pub fn dead_fraction(subject: &Tensor, reference: &Tensor) -> Result<f64> {
    let min = cam(reference)?.into_iter().fold(f64::INFINITY, f64::min);
    let dead = dead_channels(subject, min)?;
    Ok(dead.count() as f64 / subject.dims2("dead_fraction")?.1 as f64)
}

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `½ θᵀ A θ` for a dense symmetric `A`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Quadratic {
    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut a = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            a[i * n + i] = *d;
        }
        Self { n, a }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * x[j]).sum())
            .collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.n
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(0.5 * dot(theta, &self.apply(theta)))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(theta))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of power iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianEstimate {
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the Hessian-vector product vanished (e.g. zero gradient
    /// everywhere); the eigenvalue is then reported as 0.
    pub degenerate: bool,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

/// Finite-difference Hessian-vector product,
/// `(∇L(θ + εv) − ∇L(θ − εv)) / 2ε` with `ε = 1e-3·‖θ‖/‖v‖`.
pub fn hessian_vector_product(obj: &dyn Objective, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let tn = norm(theta);
    // at θ = 0 the relative step has no scale; fall back to an absolute one
    let eps = if tn > 0.0 { 1e-3 * tn / vn } else { 1e-3 / vn };
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = obj.gradient(&plus)?;
    let gm = obj.gradient(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Top Hessian eigenvalue at `theta` by power iteration.
pub fn power_iteration(
    obj: &dyn Objective,
    theta: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<HessianEstimate> {
    if iters == 0 {
        return Err(Error::config("hessian.iters", "must be at least 1"));
    }
    let n = obj.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let vn = norm(&v);
    v.iter_mut().for_each(|x| *x /= vn);

    let mut history = Vec::new();
    let mut prev: Option<f64> = None;
    for it in 1..=iters {
        let hv = hessian_vector_product(obj, theta, &v)?;
        let hn = norm(&hv);
        if hn == 0.0 || !hn.is_finite() {
            return Ok(HessianEstimate {
                eigenvalue: 0.0,
                iterations: it,
                converged: false,
                degenerate: true,
                history,
            });
        }
        let lambda = dot(&v, &hv);
        history.push(lambda);
        v = hv.iter().map(|x| x / hn).collect();
        if let Some(p) = prev {
            if (lambda - p).abs() <= tol * lambda.abs() {
                return Ok(HessianEstimate {
                    eigenvalue: lambda,
                    iterations: it,
                    converged: true,
                    degenerate: false,
                    history,
                });
            }
        }
        prev = Some(lambda);
    }
    Ok(HessianEstimate {
        eigenvalue: prev.unwrap_or(0.0),
        iterations: iters,
        converged: false,
        degenerate: false,
        history,
    })
}

/// Cross-entropy of a model as a function of one layer's parameters.
pub struct LayerObjective<'a> {
    model: &'a VisionTransformer,
    names: Vec<String>,
    images: &'a Tensor,
    labels: &'a [usize],
    policy: &'a QuantizationPolicy,
}

impl<'a> LayerObjective<'a> {
    /// `layer` is a linear layer id; its weight and bias are the variables.
    pub fn new(
        model: &'a VisionTransformer,
        layer: &str,
        images: &'a Tensor,
        labels: &'a [usize],
        policy: &'a QuantizationPolicy,
    ) -> Result<Self> {
        let names: Vec<String> = model
            .named_parameters()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n == &format!("{layer}.weight") || n == &format!("{layer}.bias"))
            .collect();
        if names.is_empty() {
            return Err(Error::config(
                format!("diagnose.layer.{layer}"),
                "layer has no parameters",
            ));
        }
        Ok(Self {
            model,
            names,
            images,
            labels,
            policy,
        })
    }

    /// Current values of the layer's parameters.
    pub fn theta(&self) -> Vec<f64> {
        self.names
            .iter()
            .flat_map(|n| self.model.parameter(n).expect("bound name").data().to_vec())
            .map(|v| v as f64)
            .collect()
    }

    fn with_theta(&self, theta: &[f64]) -> VisionTransformer {
        let mut m = self.model.clone();
        let mut off = 0;
        for n in &self.names {
            let p = m.parameter_mut(n).expect("bound name");
            let len = p.len();
            for (dst, src) in p.data_mut().iter_mut().zip(&theta[off..off + len]) {
                *dst = *src as f32;
            }
            off += len;
        }
        m
    }
}

impl Objective for LayerObjective<'_> {
    fn dim(&self) -> usize {
        self.names
            .iter()
            .map(|n| self.model.parameter(n).expect("bound name").len())
            .sum()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self
            .with_theta(theta)
            .evaluate_batch(self.images, self.labels, self.policy)?
            .loss)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut m = self.with_theta(theta);
        m.zero_grad();
        m.loss_and_backward(self.images, self.labels, self.policy)?;
        Ok(self
            .names
            .iter()
            .flat_map(|n| {
                let p = m.parameter(n).expect("bound name");
                p.grad().expect("gradient after backward").to_vec()
            })
            .map(|g| g as f64)
            .collect())
    }
}

/// Top eigenvalue of the loss Hessian restricted to one linear layer.
#[allow(clippy::too_many_arguments)]
pub fn hessian_top_eigenvalue(
    model: &VisionTransformer,
    layer: &str,
    images: &Tensor,
    labels: &[usize],
    policy: &QuantizationPolicy,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<HessianEstimate> {
    let obj = LayerObjective::new(model, layer, images, labels, policy)?;
    let theta = obj.theta();
    power_iteration(&obj, &theta, iters, tol, seed)
}

/// Loss values on a square grid of `(a, b)` offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    /// Shared coordinates of both axes, from `−span` to `span`.
    pub coords: Vec<f64>,
    /// `values[i][j]` is the loss at `a = coords[j]`, `b = coords[i]`.
    pub values: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn resolution(&self) -> usize {
        self.coords.len()
    }

    pub fn center(&self) -> f64 {
        let c = self.coords.len() / 2;
        self.values[c][c]
    }

    /// First row holds the `a` coordinates, first column the `b` coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("b\\a");
        for a in &self.coords {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
        for (b, row) in self.coords.iter().zip(&self.values) {
            let _ = write!(out, "{b}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn grid_coords(resolution: usize, span: f64) -> Result<Vec<f64>> {
    if resolution < 3 || resolution.is_multiple_of(2) {
        return Err(Error::config(
            "landscape.resolution",
            format!("must be odd and at least 3 so (0, 0) lies on the grid, got {resolution}"),
        ));
    }
    if !(span.is_finite() && span > 0.0) {
        return Err(Error::config("landscape.span", format!("must be positive, got {span}")));
    }
    let half = (resolution / 2) as f64;
    // the middle index is exactly zero
    Ok((0..resolution).map(|i| span * (i as f64 - half) / half).collect())
}

fn evaluate_grid(coords: &[f64], eval: impl Fn(f64, f64) -> Result<f64> + Sync) -> Result<Vec<Vec<f64>>> {
    let n = coords.len();
    let flat = (0..n * n)
        .into_par_iter()
        .map(|idx| eval(coords[idx % n], coords[idx / n]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(flat.chunks(n).map(|r| r.to_vec()).collect())
}

/// Random direction over every parameter tensor. Matrices are rescaled per
/// output column to the norm of the matching weight column; vectors (biases,
/// norm parameters) get a zero direction.
pub fn filter_normalized_direction(model: &VisionTransformer, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    model
        .named_parameters()
        .into_iter()
        .map(|(_, p)| {
            let mut d: Vec<f64> = (0..p.len()).map(|_| StandardNormal.sample(&mut *rng)).collect();
            match *p.shape() {
                [rows, cols] => {
                    for j in 0..cols {
                        let wn = (0..rows)
                            .map(|k| (p.data()[k * cols + j] as f64).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        let dn = (0..rows).map(|k| d[k * cols + j].powi(2)).sum::<f64>().sqrt();
                        let s = if dn > 0.0 { wn / dn } else { 0.0 };
                        for k in 0..rows {
                            d[k * cols + j] *= s;
                        }
                    }
                }
                _ => d.iter_mut().for_each(|x| *x = 0.0),
            }
            d
        })
        .collect()
}

/// Loss over the plane `θ + a·δ₁ + b·δ₂`, `(a, b) ∈ [−span, span]²`, with
/// the policy's quantizers applied to the perturbed latents. The model is
/// only read; every grid point uses its own copy.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape_2d(
    model: &VisionTransformer,
    images: &Tensor,
    labels: &[usize],
    policy: &QuantizationPolicy,
    resolution: usize,
    span: f64,
    seed: u64,
) -> Result<LandscapeGrid> {
    let coords = grid_coords(resolution, span)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = filter_normalized_direction(model, &mut rng);
    let d2 = filter_normalized_direction(model, &mut rng);
    let values = evaluate_grid(&coords, |a, b| {
        let mut m = model.clone();
        for (i, (_, p)) in m.named_parameters_mut().into_iter().enumerate() {
            for (k, v) in p.data_mut().iter_mut().enumerate() {
                *v = (*v as f64 + a * d1[i][k] + b * d2[i][k]) as f32;
            }
        }
        Ok(m.evaluate_batch(images, labels, policy)?.loss)
    })?;
    Ok(LandscapeGrid { coords, values })
}

/// The same grid for an arbitrary objective, with two seeded random unit
/// directions scaled to `‖θ‖` (or to 1 when `θ = 0`).
pub fn objective_landscape_2d(
    obj: &dyn Objective,
    theta: &[f64],
    resolution: usize,
    span: f64,
    seed: u64,
) -> Result<LandscapeGrid> {
    let coords = grid_coords(resolution, span)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if norm(theta) > 0.0 { norm(theta) } else { 1.0 };
    let mut dir = || {
        let d: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&d);
        d.into_iter().map(|x| x * scale / n).collect::<Vec<f64>>()
    };
    let (d1, d2) = (dir(), dir());
    let values = evaluate_grid(&coords, |a, b| {
        let p: Vec<f64> = (0..theta.len()).map(|k| theta[k] + a * d1[k] + b * d2[k]).collect();
        obj.loss(&p)
    })?;
    Ok(LandscapeGrid { coords, values })
}

/// Per-layer weight statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer: String,
    pub cam: Vec<f64>,
    pub sdam: f64,
    pub dead: DeadChannels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub layers: Vec<LayerStats>,
    /// `(layer id, estimate)` for each layer analysed.
    pub hessian: Vec<(String, HessianEstimate)>,
    pub landscape: Option<LandscapeGrid>,
}

impl DiagnosticsReport {
    /// CAM/SDAM of every linear layer. With a `reference` model, dead
    /// channels are those below the reference layer's smallest CAM;
    /// otherwise the threshold is 0 and nothing counts as dead.
    pub fn weight_stats(model: &VisionTransformer, reference: Option<&VisionTransformer>) -> Result<Self> {
        let layers = model
            .config
            .linear_shapes()
            .into_iter()
            .map(|(id, _, _)| {
                let w = &model.linear(&id).expect("configured layer").weight;
                let c = cam(w)?;
                let threshold = match reference {
                    Some(r) => {
                        let rw = &r
                            .linear(&id)
                            .ok_or_else(|| Error::Contract(format!("reference lacks layer {id}")))?
                            .weight;
                        cam(rw)?.into_iter().fold(f64::INFINITY, f64::min)
                    }
                    None => 0.0,
                };
                Ok(LayerStats {
                    sdam: sdam_of(&c),
                    dead: dead_channels(w, threshold)?,
                    cam: c,
                    layer: id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            hessian: Vec::new(),
            landscape: None,
        })
    }

    /// `layer,channel,cam`
    pub fn cam_csv(&self) -> String {
        let mut out = String::from("layer,channel,cam\n");
        for l in &self.layers {
            for (j, c) in l.cam.iter().enumerate() {
                let _ = writeln!(out, "{},{j},{c}", l.layer);
            }
        }
        out
    }

    /// `layer,sdam,dead_channels,dead_threshold,channels`
    pub fn sdam_csv(&self) -> String {
        let mut out = String::from("layer,sdam,dead_channels,dead_threshold,channels\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l.layer,
                l.sdam,
                l.dead.count(),
                l.dead.threshold,
                l.cam.len()
            );
        }
        out
    }

    /// `layer,eigenvalue,iterations,converged,degenerate`
    pub fn hessian_csv(&self) -> String {
        let mut out = String::from("layer,eigenvalue,iterations,converged,degenerate\n");
        for (id, h) in &self.hessian {
            let _ = writeln!(
                out,
                "{id},{},{},{},{}",
                h.eigenvalue, h.iterations, h.converged, h.degenerate
            );
        }
        out
    }
}

/// Median of the block-layer eigenvalues next to the patch-embedding one.
pub fn patch_embed_vs_block_median(hessian: &[(String, HessianEstimate)]) -> Option<(f64, f64)> {
    let pe = hessian.iter().find(|(id, _)| id == "patch_embed")?.1.eigenvalue;
    let mut blocks: Vec<f64> = hessian
        .iter()
        .filter(|(id, _)| id.starts_with("blocks."))
        .map(|(_, h)| h.eigenvalue)
        .collect();
    if blocks.is_empty() {
        return None;
    }
    blocks.sort_by(|a, b| a.total_cmp(b));
    let m = blocks.len();
    let median = if m % 2 == 1 {
        blocks[m / 2]
    } else {
        0.5 * (blocks[m / 2 - 1] + blocks[m / 2])
    };
    Some((pe, median))
}
