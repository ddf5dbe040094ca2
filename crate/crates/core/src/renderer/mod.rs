//! Volumetric renderer conditioned on a particle cloud.
//!
//! A query point gathers its nearest particles and sums their features under a
//! bank of annular kernels. An MLP maps these features (and, in the fine tier,
//! an encoding of the view direction) to density and color, which are alpha
//! composited along the ray in a coarse pass and an importance-sampled fine
//! pass.

mod ops;
pub mod sampling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpd_diff::{Graph, ParameterStore, Real, Tensor, Var};

pub use ops::{composite_weights, kernel_weight, Composite, KernelFeatures, NORMALIZE_EPS};

use crate::error::{Error, Result};
use crate::geometry::{to_point, CameraModel, Point3, Ray, SpatialIndex, Workspace};
use crate::particles::{ParticleSet, ParticleVars};
use crate::seed;

pub const PREFIX: &str = "renderer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub radii: Vec<f64>,
    pub bandwidths: Vec<f64>,
    /// Neighbours gathered per query point.
    pub knn: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub near: f64,
    pub far: f64,
    pub posenc_degree: usize,
    #[serde(default)]
    pub normalize_features: bool,
    /// Initial value of the learned background color.
    pub background: [f64; 3],
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub head_width: usize,
    /// The trunk input is concatenated back in before every layer whose index
    /// is a positive multiple of this.
    pub skip_every: usize,
    pub feature_dim: usize,
    /// Restrict samples to the part of `[near, far]` inside the workspace.
    #[serde(default = "yes")]
    pub clip_to_workspace: bool,
}

fn yes() -> bool {
    true
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            radii: vec![0.0, 0.05, 0.1, 0.5],
            bandwidths: vec![0.05, 0.05, 0.05, 0.5],
            knn: 16,
            n_coarse: 128,
            n_fine: 256,
            near: 0.3,
            far: 5.0,
            posenc_degree: 4,
            normalize_features: false,
            background: [0.5; 3],
            trunk_layers: 8,
            trunk_width: 256,
            head_width: 128,
            skip_every: 4,
            feature_dim: 16,
            clip_to_workspace: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Coarse,
    Fine,
}

impl Tier {
    fn key(self) -> &'static str {
        match self {
            Tier::Coarse => "coarse",
            Tier::Fine => "fine",
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.radii.is_empty() || self.radii.len() != self.bandwidths.len() {
            return bad(format!(
                "need matching nonempty kernel radii and bandwidths, got {} and {}",
                self.radii.len(),
                self.bandwidths.len()
            ));
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r >= 0.0))
            || self.bandwidths.iter().any(|b| !(b.is_finite() && *b > 0.0))
        {
            return bad("kernel radii must be >= 0 and bandwidths > 0".into());
        }
        if !(self.near >= 0.0 && self.near < self.far && self.far.is_finite()) {
            return bad(format!("need 0 <= near < far, got {} and {}", self.near, self.far));
        }
        if self.knn == 0 || self.n_coarse == 0 || self.feature_dim == 0 {
            return bad("knn, n_coarse and feature_dim must be positive".into());
        }
        if self.trunk_layers == 0 || self.trunk_width == 0 || self.head_width == 0 {
            return bad("field MLP sizes must be positive".into());
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background color must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Width of the concatenated kernel features.
    pub fn field_input(&self) -> usize {
        self.radii.len() * self.feature_dim
    }

    pub fn posenc_width(&self, tier: Tier) -> usize {
        match tier {
            Tier::Coarse => 0,
            Tier::Fine => 6 * self.posenc_degree,
        }
    }

    fn skips_into(&self, layer: usize) -> bool {
        self.skip_every > 0 && layer > 0 && layer.is_multiple_of(self.skip_every)
    }
}

fn name(tier: Tier, part: &str) -> String {
    format!("{PREFIX}.{}.{part}", tier.key())
}

pub fn init_renderer<T: Real>(
    store: &mut ParameterStore<T>,
    spec: &RenderSpec,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    spec.validate()?;
    let (input, w) = (spec.field_input(), spec.trunk_width);
    for tier in [Tier::Coarse, Tier::Fine] {
        for i in 0..spec.trunk_layers {
            let fan_in = match i {
                0 => input,
                _ if spec.skips_into(i) => w + input,
                _ => w,
            };
            store.init_linear(&name(tier, &format!("trunk.{i}")), fan_in, w, rng);
        }
        store.init_linear(&name(tier, "sigma"), w, 1, rng);
        store.init_linear(&name(tier, "feat"), w, w, rng);
        store.init_linear(&name(tier, "head"), w + spec.posenc_width(tier), spec.head_width, rng);
        store.init_linear(&name(tier, "rgb"), spec.head_width, 3, rng);
    }
    let logit = |c: f64| {
        let c = c.clamp(1e-4, 1.0 - 1e-4);
        T::lit((c / (1.0 - c)).ln())
    };
    store.insert(
        format!("{PREFIX}.background"),
        Tensor::new(vec![3], spec.background.iter().map(|&c| logit(c)).collect())?,
    );
    Ok(())
}

/// Density `[M, 1]` and color `[M, 3]` at `M` query points with kernel
/// features `[M, m * F]` and, for the fine tier, view encodings `[M, 6L]`.
pub fn query_field<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    spec: &RenderSpec,
    tier: Tier,
    features: Var,
    view: Option<Var>,
) -> Result<(Var, Var)> {
    let lin = |g: &mut Graph<T>, part: &str, x: Var| -> Result<Var> {
        let w = g.param(params, &format!("{}.w", name(tier, part)))?;
        let b = g.param(params, &format!("{}.b", name(tier, part)))?;
        Ok(g.linear(x, w, b)?)
    };
    let mut h = features;
    for i in 0..spec.trunk_layers {
        if spec.skips_into(i) {
            h = g.concat_cols(&[h, features])?;
        }
        h = lin(g, &format!("trunk.{i}"), h)?;
        h = g.relu(h);
    }
    let sigma = lin(g, "sigma", h)?;
    let sigma = g.softplus(sigma);
    let mut f = lin(g, "feat", h)?;
    match (tier, view) {
        (Tier::Fine, Some(v)) => f = g.concat_cols(&[f, v])?,
        (Tier::Coarse, None) => {}
        _ => return Err(Error::invalid("view encoding goes with the fine tier only")),
    }
    let f = lin(g, "head", f)?;
    let f = g.relu(f);
    let rgb = lin(g, "rgb", f)?;
    Ok((sigma, g.sigmoid(rgb)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Jittered strata and quantiles, from this seed.
    Stratified(u64),
    /// Segment midpoints; deterministic.
    Midpoint,
}

/// Colors `[R, 3]` of both tiers plus per-ray summaries of the fine pass.
pub struct RenderOutput {
    pub coarse: Var,
    pub fine: Var,
    /// Sum of compositing weights.
    pub opacity: Vec<f64>,
    /// Weighted mean sample distance along the ray, or `far` when empty.
    pub depth: Vec<f64>,
}

/// Particle cloud prepared for rendering: tape handles plus a spatial index
/// over its current positions.
pub struct Scene<'a> {
    pub particles: &'a ParticleVars,
    pub index: SpatialIndex,
}

impl<'a> Scene<'a> {
    pub fn new(particles: &'a ParticleVars) -> Self {
        Self {
            particles,
            index: SpatialIndex::build_for_knn(particles.points.clone(), 4),
        }
    }
}

struct Pass {
    /// `[R * S]` sample distances.
    ts: Vec<f64>,
    deltas: Vec<f64>,
    samples: usize,
}

fn sample_points(rays: &[Ray], pass: &Pass) -> Vec<Point3> {
    let mut pts = Vec::with_capacity(pass.ts.len());
    for (r, ray) in rays.iter().enumerate() {
        for &t in &pass.ts[r * pass.samples..(r + 1) * pass.samples] {
            pts.push(to_point(&ray.at(t)));
        }
    }
    pts
}

/// Concatenated kernel features `[M, m * F]` of `scene` at the query points.
pub fn point_features<T: Real>(
    g: &mut Graph<T>,
    spec: &RenderSpec,
    scene: &Scene,
    pts: &[Point3],
) -> Result<Var> {
    let k = spec.knn.min(scene.index.len());
    let mut neighbors = Vec::with_capacity(pts.len() * k);
    for p in pts {
        neighbors.extend(scene.index.knn(p, k).into_iter().map(|i| i as u32));
    }
    let op = KernelFeatures {
        samples: pts.iter().map(|p| p.map(T::lit)).collect(),
        neighbors,
        k,
        radii: spec.radii.iter().map(|&r| T::lit(r)).collect(),
        bandwidths: spec.bandwidths.iter().map(|&b| T::lit(b)).collect(),
        normalize: spec.normalize_features,
    };
    let (pos, feat) = (scene.particles.pos, scene.particles.feat);
    let out = op.forward(g.value(pos), g.value(feat));
    Ok(g.custom(Box::new(op), &[pos, feat], out))
}

/// Runs one tier over `pass` and returns `(color [R, 3], density values)`.
#[allow(clippy::too_many_arguments)]
fn shade<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    spec: &RenderSpec,
    tier: Tier,
    scene: &Scene,
    rays: &[Ray],
    pass: &Pass,
    background: Var,
) -> Result<(Var, Vec<T>)> {
    let pts = sample_points(rays, pass);
    let feats = point_features(g, spec, scene, &pts)?;
    let view = match tier {
        Tier::Coarse => None,
        Tier::Fine => {
            let width = spec.posenc_width(tier);
            let mut data = Vec::with_capacity(pts.len() * width);
            for ray in rays {
                let d = to_point(&ray.direction);
                let enc: Vec<T> = sampling::posenc(&d, spec.posenc_degree)
                    .into_iter()
                    .map(T::lit)
                    .collect();
                for _ in 0..pass.samples {
                    data.extend_from_slice(&enc);
                }
            }
            Some(g.constant(Tensor::new(vec![pts.len(), width], data)?))
        }
    };
    let (sigma, rgb) = query_field(g, params, spec, tier, feats, view)?;
    let op = Composite {
        rays: rays.len(),
        samples: pass.samples,
        deltas: pass.deltas.iter().map(|&d| T::lit(d)).collect(),
    };
    let out = op.forward(g.value(sigma), g.value(rgb), g.value(background));
    let densities = g.value(sigma).data().to_vec();
    Ok((g.custom(Box::new(op), &[sigma, rgb, background], out), densities))
}

/// Renders a batch of rays through both tiers.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    spec: &RenderSpec,
    scene: &Scene,
    rays: &[Ray],
    workspace: Option<&Workspace>,
    sampling: Sampling,
) -> Result<RenderOutput> {
    spec.validate()?;
    let logits = g.param(params, &format!("{PREFIX}.background"))?;
    let background = g.sigmoid(logits);
    let n_rays = rays.len();
    if scene.particles.is_empty() || n_rays == 0 {
        let bg = g.reshape(background, &[1, 3])?;
        let c = g.gather_rows(bg, vec![0; n_rays])?;
        return Ok(RenderOutput {
            coarse: c,
            fine: c,
            opacity: vec![0.0; n_rays],
            depth: vec![spec.far; n_rays],
        });
    }
    let mut rng = match sampling {
        Sampling::Stratified(s) => Some(ChaCha8Rng::seed_from_u64(seed::derive(s, 0))),
        Sampling::Midpoint => None,
    };

    // Sample intervals; rays that miss the workspace get zero-length segments
    // and composite to pure background.
    let intervals: Vec<Option<(f64, f64)>> = rays
        .iter()
        .map(|ray| {
            let (mut t0, mut t1) = (spec.near, spec.far);
            if let (true, Some(ws)) = (spec.clip_to_workspace, workspace) {
                let (a, b) = ws.ray_interval(ray)?;
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
            (t1 > t0).then_some((t0, t1))
        })
        .collect();

    let sc = spec.n_coarse;
    let mut coarse = Pass {
        ts: Vec::with_capacity(n_rays * sc),
        deltas: Vec::with_capacity(n_rays * sc),
        samples: sc,
    };
    for iv in &intervals {
        let (t0, t1) = iv.unwrap_or((spec.near, spec.far));
        let ts = sampling::stratified(t0, t1, sc, rng.as_mut());
        match iv {
            Some(_) => coarse.deltas.extend(sampling::deltas(&ts, t1)),
            None => coarse.deltas.extend(std::iter::repeat_n(0.0, sc)),
        }
        coarse.ts.extend(ts);
    }
    let (coarse_rgb, coarse_sigma) =
        shade(g, params, spec, Tier::Coarse, scene, rays, &coarse, background)?;

    let sf = sc + spec.n_fine;
    let mut fine = Pass {
        ts: Vec::with_capacity(n_rays * sf),
        deltas: Vec::with_capacity(n_rays * sf),
        samples: sf,
    };
    let sigma64: Vec<f64> = coarse_sigma.iter().map(|s| s.to_f64_lossy()).collect();
    for (r, iv) in intervals.iter().enumerate() {
        let (t0, t1) = iv.unwrap_or((spec.near, spec.far));
        let range = r * sc..(r + 1) * sc;
        let mut ts = coarse.ts[range.clone()].to_vec();
        if spec.n_fine > 0 {
            let (w, _) = composite_weights(&sigma64[range.clone()], &coarse.deltas[range]);
            let edges: Vec<f64> = (0..=sc)
                .map(|i| t0 + (t1 - t0) * i as f64 / sc as f64)
                .collect();
            ts.extend(sampling::importance(&edges, &w, spec.n_fine, rng.as_mut()));
            ts.sort_by(f64::total_cmp);
        }
        match iv {
            Some(_) => fine.deltas.extend(sampling::deltas(&ts, t1)),
            None => fine.deltas.extend(std::iter::repeat_n(0.0, sf)),
        }
        fine.ts.extend(ts);
    }
    let (fine_rgb, fine_sigma) =
        shade(g, params, spec, Tier::Fine, scene, rays, &fine, background)?;

    let mut opacity = Vec::with_capacity(n_rays);
    let mut depth = Vec::with_capacity(n_rays);
    for r in 0..n_rays {
        let range = r * sf..(r + 1) * sf;
        let s: Vec<f64> = fine_sigma[range.clone()].iter().map(|x| x.to_f64_lossy()).collect();
        let (w, _) = composite_weights(&s, &fine.deltas[range.clone()]);
        let total: f64 = w.iter().sum();
        let mean = w.iter().zip(&fine.ts[range]).map(|(w, t)| w * t).sum::<f64>();
        opacity.push(total);
        depth.push(if total > 1e-6 { mean / total } else { spec.far });
    }
    for v in [coarse_rgb, fine_rgb] {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite("rendered color".into()));
        }
    }
    Ok(RenderOutput {
        coarse: coarse_rgb,
        fine: fine_rgb,
        opacity,
        depth,
    })
}

/// A rendered frame; `rgb` is `[H, W, 3]` row-major in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    /// Expected distance along each pixel ray.
    pub depth: Vec<f32>,
    pub opacity: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, i: usize, j: usize) -> [f32; 3] {
        let at = (j * self.width + i) * 3;
        [self.rgb[at], self.rgb[at + 1], self.rgb[at + 2]]
    }
}

/// Renders every pixel of `cam` in chunks of `chunk` rays, one tape per chunk.
pub fn render_image(
    params: &ParameterStore<f32>,
    spec: &RenderSpec,
    particles: &ParticleSet,
    cam: &CameraModel,
    workspace: Option<&Workspace>,
    sampling: Sampling,
    chunk: usize,
) -> Result<Image> {
    cam.validate()?;
    let mut img = Image {
        width: cam.width,
        height: cam.height,
        rgb: Vec::with_capacity(cam.num_pixels() * 3),
        depth: Vec::with_capacity(cam.num_pixels()),
        opacity: Vec::with_capacity(cam.num_pixels()),
    };
    let rays: Vec<Ray> = (0..cam.height)
        .flat_map(|j| (0..cam.width).map(move |i| (i, j)))
        .map(|(i, j)| cam.ray_through_pixel(i, j))
        .collect();
    for (c, batch) in rays.chunks(chunk.max(1)).enumerate() {
        let mut g = Graph::<f32>::new();
        let vars = particles.to_vars(&mut g);
        let scene = Scene::new(&vars);
        let sampling = match sampling {
            Sampling::Stratified(s) => Sampling::Stratified(seed::derive(s, c as u64)),
            m => m,
        };
        let out = render_rays(&mut g, params, spec, &scene, batch, workspace, sampling)?;
        img.rgb.extend_from_slice(g.value(out.fine).data());
        img.depth.extend(out.depth.iter().map(|&d| d as f32));
        img.opacity.extend(out.opacity.iter().map(|&o| o as f32));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_checks() {
        assert!(RenderSpec::default().validate().is_ok());
        let mut s = RenderSpec::default();
        s.bandwidths.pop();
        assert!(s.validate().is_err());
        let s = RenderSpec {
            near: 5.0,
            far: 1.0,
            ..RenderSpec::default()
        };
        assert!(s.validate().is_err());
        assert_eq!(RenderSpec::default().field_input(), 64);
        assert_eq!(RenderSpec::default().posenc_width(Tier::Fine), 24);
    }

    #[test]
    fn skip_layers() {
        let s = RenderSpec::default();
        let skips: Vec<usize> = (0..8).filter(|&i| s.skips_into(i)).collect();
        assert_eq!(skips, vec![4]);
    }
}
