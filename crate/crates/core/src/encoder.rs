//! RGB-D frames to latent particles.
//!
//! A UNet shared by all cameras maps each RGB image to per-pixel features.
//! Pixels are unprojected with their depth, merged across cameras, cropped to
//! the workspace and subsampled to the particle budget. The UNet never sees
//! depth or camera parameters; depth only enters through unprojection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vpd_diff::{Graph, ParameterStore, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{subsample_uniform, CameraModel, Point3, Workspace};
use crate::particles::{ParticleSet, ParticleVars};
use crate::synth::RgbdFrame;

pub const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Encoder path, then decoder path, then the output width. With `L`
    /// pooling levels the first `len - L - 1` entries run on the way down
    /// (the first `L` of them followed by a 2x max pool), the next `L` each
    /// follow an upsample and skip concatenation, and the last is a 1x1 output
    /// convolution.
    pub unet_channels: Vec<usize>,
    pub pool_levels: usize,
    pub feature_dim: usize,
    pub particle_budget: usize,
    pub predict_depth: bool,
    /// Initial output of the depth channel, meters.
    #[serde(default = "default_depth_prior")]
    pub depth_prior: f64,
}

fn default_depth_prior() -> f64 {
    2.5
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            unet_channels: vec![16, 32, 64, 32, 16, 16],
            pool_levels: 2,
            feature_dim: 16,
            particle_budget: 1 << 14,
            predict_depth: false,
            depth_prior: default_depth_prior(),
        }
    }
}

impl EncoderSpec {
    fn down_count(&self) -> usize {
        self.unet_channels.len().saturating_sub(self.pool_levels + 1)
    }

    pub fn output_channels(&self) -> usize {
        self.feature_dim + usize::from(self.predict_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.pool_levels;
        if self.unet_channels.len() < 2 * l + 2 {
            return Err(Error::Config(format!(
                "unet_channels needs at least {} entries for {l} pooling levels, got {}",
                2 * l + 2,
                self.unet_channels.len()
            )));
        }
        if self.unet_channels.contains(&0) {
            return Err(Error::Config("unet channel counts must be positive".into()));
        }
        let last = *self.unet_channels.last().expect("nonempty");
        if last != self.output_channels() {
            return Err(Error::Config(format!(
                "final unet width {last} must equal feature_dim{} = {}",
                if self.predict_depth { " + 1" } else { "" },
                self.output_channels()
            )));
        }
        if self.feature_dim == 0 || self.particle_budget == 0 {
            return Err(Error::Config("feature_dim and particle_budget must be positive".into()));
        }
        Ok(())
    }

    /// Images must survive `pool_levels` halvings.
    pub fn check_resolution(&self, width: usize, height: usize) -> Result<()> {
        let m = 1usize << self.pool_levels;
        if !width.is_multiple_of(m) || !height.is_multiple_of(m) || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "{width}x{height} image is not divisible by {m} ({} pooling levels)",
                self.pool_levels
            )));
        }
        Ok(())
    }
}

fn conv_init<T: Real>(store: &mut ParameterStore<T>, name: &str, o: usize, c: usize, k: usize, rng: &mut impl Rng) {
    let bound = (6.0 / (c * k * k) as f64).sqrt();
    store.init_uniform(&format!("{name}.w"), &[o, c, k, k], bound, rng);
    store.insert(format!("{name}.b"), Tensor::zeros(&[o]));
}

pub fn init_encoder<T: Real>(store: &mut ParameterStore<T>, spec: &EncoderSpec, rng: &mut impl Rng) -> Result<()> {
    spec.validate()?;
    let ch = &spec.unet_channels;
    let (d, l) = (spec.down_count(), spec.pool_levels);
    let mut c = 3;
    let mut skips = Vec::new();
    for k in 0..d {
        if k >= 1 && k <= l {
            skips.push(c);
        }
        conv_init(store, &format!("{PREFIX}.down.{k}"), ch[k], c, 3, rng);
        c = ch[k];
    }
    for k in 0..l {
        let skip = skips[l - 1 - k];
        conv_init(store, &format!("{PREFIX}.up.{k}"), ch[d + k], c + skip, 3, rng);
        c = ch[d + k];
    }
    let out = spec.output_channels();
    conv_init(store, &format!("{PREFIX}.out"), out, c, 1, rng);
    if spec.predict_depth {
        // Start the depth channel near a plausible distance.
        let b = store.get_mut(&format!("{PREFIX}.out.b"))?;
        b.data_mut()[spec.feature_dim] = T::lit(inverse_softplus(spec.depth_prior));
    }
    Ok(())
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `[3, H, W]` planar copy of an interleaved RGB frame.
pub fn planar_rgb<T: Real>(f: &RgbdFrame) -> Tensor<T> {
    let hw = f.width * f.height;
    let mut data = vec![T::zero(); 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = T::lit(f.rgb[3 * p + c] as f64);
        }
    }
    Tensor::new(vec![3, f.height, f.width], data).expect("rgb shape")
}

fn conv<T: Real>(g: &mut Graph<T>, params: &ParameterStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, b)?)
}

/// UNet on a `[3, H, W]` image; returns `[out, H, W]` after the final softplus.
pub fn unet_forward<T: Real>(g: &mut Graph<T>, params: &ParameterStore<T>, spec: &EncoderSpec, x: Var) -> Result<Var> {
    let (d, l) = (spec.down_count(), spec.pool_levels);
    let mut h = x;
    let mut skips = Vec::new();
    for k in 0..d {
        if k >= 1 && k <= l {
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        let y = conv(g, params, &format!("{PREFIX}.down.{k}"), h)?;
        h = g.relu(y);
    }
    for k in 0..l {
        let up = g.upsample2(h)?;
        let cat = g.concat_rows(&[up, skips[l - 1 - k]])?;
        let y = conv(g, params, &format!("{PREFIX}.up.{k}"), cat)?;
        h = g.relu(y);
    }
    let y = conv(g, params, &format!("{PREFIX}.out"), h)?;
    Ok(g.softplus(y))
}

/// One camera's input to the encoder.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub frame: &'a RgbdFrame,
    pub camera: &'a CameraModel,
}

pub struct Encoded {
    pub particles: ParticleVars,
    /// Camera index (into the input views) and pixel index of each particle.
    pub sources: Vec<(usize, usize)>,
    /// Mean squared depth error over pixels with valid depth, in predicted
    /// depth mode.
    pub depth_loss: Option<Var>,
    /// Predicted depth per view, `[H * W, 1]`, in predicted depth mode.
    pub depth_maps: Vec<Var>,
}

fn valid_depth(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

/// Encodes one timestep seen from several cameras.
///
/// With `spec.predict_depth` the positions come from the UNet's extra depth
/// channel and the frames' depth is only used as the auxiliary target.
pub fn encode_timestep<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    spec: &EncoderSpec,
    views: &[View<'_>],
    ws: &Workspace,
    seed: u64,
) -> Result<Encoded> {
    if views.is_empty() {
        return Err(Error::invalid("encoder needs at least one view"));
    }
    let t0 = views[0].frame.timestep;
    if views.iter().any(|v| v.frame.timestep != t0) {
        return Err(Error::invalid("views come from different timesteps"));
    }
    let fd = spec.feature_dim;
    let mut per_view = Vec::with_capacity(views.len());
    let mut offsets = Vec::with_capacity(views.len());
    let mut total = 0;
    for v in views {
        let f = v.frame;
        spec.check_resolution(f.width, f.height)?;
        if (f.width, f.height) != (v.camera.width, v.camera.height) {
            return Err(Error::invalid("frame and camera resolution differ"));
        }
        let x = g.constant(planar_rgb(f));
        let out = unet_forward(g, params, spec, x)?;
        let hw = f.width * f.height;
        let flat = g.reshape(out, &[spec.output_channels(), hw])?;
        per_view.push(g.transpose(flat)?);
        offsets.push(total);
        total += hw;
    }
    let all = if per_view.len() == 1 {
        per_view[0]
    } else {
        g.concat_rows(&per_view)?
    };

    // Candidate pixels: (view, pixel, world point).
    let mut cand: Vec<(usize, usize, Point3)> = Vec::new();
    let mut depth_maps = Vec::new();
    let mut depth_col = None;
    if spec.predict_depth {
        let d = g.slice_cols(all, fd, 1)?;
        for (vi, v) in views.iter().enumerate() {
            let hw = v.frame.width * v.frame.height;
            let rows: Vec<usize> = (offsets[vi]..offsets[vi] + hw).collect();
            depth_maps.push(g.gather_rows(d, rows)?);
        }
        depth_col = Some(d);
    }
    for (vi, v) in views.iter().enumerate() {
        let f = v.frame;
        for j in 0..f.height {
            for i in 0..f.width {
                let p = j * f.width + i;
                let depth = match depth_col {
                    Some(d) => g.value(d).data()[offsets[vi] + p].to_f64_lossy(),
                    None => {
                        let d = f.depth[p];
                        if !valid_depth(d) {
                            continue;
                        }
                        d as f64
                    }
                };
                let (u, vv) = CameraModel::pixel_center(i, j);
                let Ok(x) = v.camera.unproject(u, vv, depth) else { continue };
                let x = [x.x, x.y, x.z];
                if ws.contains(&x) {
                    cand.push((vi, p, x));
                }
            }
        }
    }
    if cand.is_empty() {
        return Err(Error::EmptyScene(format!(
            "no valid pixels inside the workspace at timestep {t0}"
        )));
    }
    let keep = subsample_uniform(cand.len(), spec.particle_budget, seed);
    let rows: Vec<usize> = keep.iter().map(|&k| offsets[cand[k].0] + cand[k].1).collect();
    let gathered = g.gather_rows(all, rows.clone())?;
    let feat = if spec.predict_depth {
        g.slice_cols(gathered, 0, fd)?
    } else {
        gathered
    };
    let pos = match depth_col {
        None => {
            let data: Vec<T> = keep.iter().flat_map(|&k| cand[k].2).map(T::lit).collect();
            g.constant(Tensor::new(vec![keep.len(), 3], data)?)
        }
        Some(d) => {
            // x = center + depth * axis keeps positions differentiable in depth.
            let mut axes = Vec::with_capacity(keep.len() * 3);
            let mut centers = Vec::with_capacity(keep.len() * 3);
            for &k in &keep {
                let (vi, p, _) = cand[k];
                let v = &views[vi];
                let (u, vv) = CameraModel::pixel_center(p % v.frame.width, p / v.frame.width);
                let a = v.camera.depth_axis(u, vv);
                let c = v.camera.center();
                axes.extend([a.x, a.y, a.z].map(T::lit));
                centers.extend([c.x, c.y, c.z].map(T::lit));
            }
            let axes = g.constant(Tensor::new(vec![keep.len(), 3], axes)?);
            let centers = g.constant(Tensor::new(vec![keep.len(), 3], centers)?);
            let dk = g.gather_rows(d, rows)?;
            let dk = g.reshape(dk, &[keep.len()])?;
            let off = g.scale_rows(axes, dk)?;
            g.add(centers, off)?
        }
    };
    let depth_loss = match depth_col {
        None => None,
        Some(d) => {
            let mut rows = Vec::new();
            let mut target = Vec::new();
            for (vi, v) in views.iter().enumerate() {
                for (p, &z) in v.frame.depth.iter().enumerate() {
                    if valid_depth(z) {
                        rows.push(offsets[vi] + p);
                        target.push(T::lit(z as f64));
                    }
                }
            }
            if rows.is_empty() {
                None
            } else {
                let n = rows.len();
                let pred = g.gather_rows(d, rows)?;
                Some(g.mse(pred, &Tensor::new(vec![n, 1], target)?)?)
            }
        }
    };
    let particles = ParticleVars::from_vars(g, pos, feat);
    if !g.value(feat).all_finite() || particles.points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(Encoded {
        particles,
        sources: keep.iter().map(|&k| (cand[k].0, cand[k].1)).collect(),
        depth_loss,
        depth_maps,
    })
}

/// Encodes without keeping a tape around.
pub fn encode_to_set(
    params: &ParameterStore<f32>,
    spec: &EncoderSpec,
    views: &[View<'_>],
    ws: &Workspace,
    seed: u64,
) -> Result<ParticleSet> {
    let mut g = Graph::new();
    let enc = encode_timestep(&mut g, params, spec, views, ws, seed)?;
    Ok(enc.particles.to_set(&g, views[0].frame.timestep))
}
