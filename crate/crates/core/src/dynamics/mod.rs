//! Hierarchical graph network that advances a latent particle cloud by one
//! timestep from the two most recent clouds.
//!
//! Particles of both input timesteps send messages to a sparse set of abstract
//! nodes sampled from the current cloud. The abstract nodes exchange messages
//! for `K` rounds with untied weights and then send them back to the current
//! particles, which decode a bounded position delta and a feature delta.

mod graph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vpd_diff::{forward_mlp, init_mlp, Graph, MlpSpec, ParameterStore, Real, Tensor, Var};

pub use graph::{build_graph, sample_abstract_nodes, DynamicsGraph};

use crate::error::{Error, Result};
use crate::particles::{ParticleSet, ParticleVars};
use crate::seed;

pub const PREFIX: &str = "dynamics";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    /// Particle to abstract node radius.
    pub r_s: f64,
    /// Abstract to abstract radius.
    pub r_s_abstract: f64,
    /// Fixed abstract node count; when unset `|P^t| / abstract_ratio`.
    #[serde(default)]
    pub n_abstract: Option<usize>,
    #[serde(default = "default_ratio")]
    pub abstract_ratio: usize,
    pub message_steps: usize,
    pub latent: usize,
    /// Hidden layers in encoder and updater MLPs, all of width `latent`.
    pub mlp_layers: usize,
    /// Hidden layers in the two decoders.
    pub decoder_layers: usize,
    pub location_scale: f64,
    pub feature_dim: usize,
}

fn default_ratio() -> usize {
    16
}

impl Default for DynamicsSpec {
    fn default() -> Self {
        Self {
            r_s: 0.1,
            r_s_abstract: 0.3,
            n_abstract: None,
            abstract_ratio: 16,
            message_steps: 10,
            latent: 128,
            mlp_layers: 2,
            decoder_layers: 3,
            location_scale: 0.1,
            feature_dim: 16,
        }
    }
}

impl DynamicsSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.r_s > 0.0 && self.r_s.is_finite()) {
            return bad(format!("r_s must be positive, got {}", self.r_s));
        }
        if !(self.r_s < self.r_s_abstract) || !self.r_s_abstract.is_finite() {
            return bad(format!(
                "r_s ({}) must be below r_s_abstract ({})",
                self.r_s, self.r_s_abstract
            ));
        }
        if self.message_steps == 0 {
            return bad("message_steps must be at least 1".into());
        }
        if !(self.location_scale > 0.0 && self.location_scale.is_finite()) {
            return bad(format!("location_scale must be positive, got {}", self.location_scale));
        }
        if self.latent == 0 || self.mlp_layers == 0 || self.feature_dim == 0 {
            return bad("latent, mlp_layers and feature_dim must be positive".into());
        }
        if self.n_abstract == Some(0) || self.abstract_ratio == 0 {
            return bad("abstract node count must be positive".into());
        }
        Ok(())
    }

    pub fn abstract_count(&self, particles: usize) -> usize {
        self.n_abstract
            .unwrap_or(particles / self.abstract_ratio)
            .max(1)
    }

    fn encoder(&self, input: usize) -> MlpSpec {
        MlpSpec::new(input, &vec![self.latent; self.mlp_layers]).with_layer_norm()
    }

    fn updater(&self, inputs: usize) -> MlpSpec {
        MlpSpec::new(inputs * self.latent, &vec![self.latent; self.mlp_layers]).with_layer_norm()
    }

    fn decoder(&self, out: usize) -> MlpSpec {
        let mut widths = vec![self.latent; self.decoder_layers];
        widths.push(out);
        MlpSpec::new(self.latent, &widths)
    }

    /// Every MLP of the model with its parameter prefix.
    fn mlps(&self) -> Vec<(String, MlpSpec)> {
        let mut out = vec![
            (name("node_enc.prev"), self.encoder(self.feature_dim)),
            (name("node_enc.cur"), self.encoder(self.feature_dim)),
            (name("edge_enc.prev_a"), self.encoder(3)),
            (name("edge_enc.cur_a"), self.encoder(3)),
            (name("edge_enc.a_a"), self.encoder(3)),
            (name("edge_enc.a_cur"), self.encoder(3)),
            (name("edge_up.prev_a"), self.updater(2)),
            (name("edge_up.cur_a"), self.updater(2)),
            (name("node_up.a_init"), self.updater(2)),
        ];
        for k in 0..self.message_steps {
            out.push((name(&format!("mp.{k}.edge")), self.updater(3)));
            out.push((name(&format!("mp.{k}.node")), self.updater(2)));
        }
        out.push((name("edge_up.a_cur"), self.updater(3)));
        out.push((name("node_up.cur"), self.updater(2)));
        out.push((name("dec.loc"), self.decoder(3)));
        out.push((name("dec.feat"), self.decoder(self.feature_dim)));
        out
    }
}

fn name(s: &str) -> String {
    format!("{PREFIX}.{s}")
}

pub fn init_dynamics<T: Real>(
    store: &mut ParameterStore<T>,
    spec: &DynamicsSpec,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    spec.validate()?;
    for (prefix, mlp) in spec.mlps() {
        init_mlp(store, &prefix, &mlp, rng)?;
    }
    Ok(())
}

/// Zeroes the last layer of both decoders, which makes `step` the identity.
pub fn zero_decoders<T: Real>(store: &mut ParameterStore<T>, spec: &DynamicsSpec) -> Result<()> {
    for d in ["dec.loc", "dec.feat"] {
        for part in ["w", "b"] {
            let t = store.get_mut(&format!("{}.{}.{part}", name(d), spec.decoder_layers))?;
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
    Ok(())
}

fn check<T: Real>(g: &Graph<T>, v: Var, stage: &str) -> Result<Var> {
    if g.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("dynamics stage '{stage}'")))
    }
}

struct Net<'a, T: Real> {
    params: &'a ParameterStore<T>,
    spec: &'a DynamicsSpec,
}

impl<T: Real> Net<'_, T> {
    fn mlp(&self, g: &mut Graph<T>, prefix: &str, mlp: &MlpSpec, x: Var) -> Result<Var> {
        Ok(forward_mlp(g, self.params, &name(prefix), mlp, x)?)
    }

    /// Encodes `receiver - sender` scaled by the edge radius.
    fn encode_edges(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        send_pos: Var,
        recv_pos: Var,
        edges: &[(usize, usize)],
        radius: f64,
    ) -> Result<Var> {
        let s = g.gather_rows(send_pos, edges.iter().map(|e| e.0).collect())?;
        let r = g.gather_rows(recv_pos, edges.iter().map(|e| e.1).collect())?;
        let rel = g.sub(r, s)?;
        let rel = g.scale(rel, T::lit(1.0 / radius));
        self.mlp(g, prefix, &self.spec.encoder(3), rel)
    }

    /// `e + LN(MLP([e, sender, receiver?]))`.
    fn update_edges(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        e: Var,
        senders: Var,
        receivers: Option<Var>,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let mut parts = vec![e, g.gather_rows(senders, edges.iter().map(|e| e.0).collect())?];
        if let Some(r) = receivers {
            parts.push(g.gather_rows(r, edges.iter().map(|e| e.1).collect())?);
        }
        let n = parts.len();
        let x = g.concat_cols(&parts)?;
        let d = self.mlp(g, prefix, &self.spec.updater(n), x)?;
        Ok(g.add(e, d)?)
    }

    /// Sums edge latents into their receivers, in edge order.
    fn aggregate(
        &self,
        g: &mut Graph<T>,
        e: Option<Var>,
        edges: &[(usize, usize)],
        n: usize,
    ) -> Result<Var> {
        match e {
            Some(e) => Ok(g.scatter_add_rows(e, edges.iter().map(|e| e.1).collect(), n)?),
            None => Ok(g.constant(Tensor::zeros(&[n, self.spec.latent]))),
        }
    }
}

/// Runs the message passing on a prebuilt graph and returns the estimate of
/// the next cloud.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    spec: &DynamicsSpec,
    prev: &ParticleVars,
    cur: &ParticleVars,
    graph: &DynamicsGraph,
) -> Result<ParticleVars> {
    spec.validate()?;
    let (fp, fc) = (g.shape(prev.feat)[1], g.shape(cur.feat)[1]);
    if fp != spec.feature_dim || fc != spec.feature_dim {
        return Err(Error::invalid(format!(
            "feature widths {fp} and {fc} do not match the dynamics width {}",
            spec.feature_dim
        )));
    }
    for v in [prev.pos, prev.feat, cur.pos, cur.feat] {
        check(g, v, "input")?;
    }
    let net = Net { params, spec };
    let na = graph.num_abstract();
    let a_pos = g.gather_rows(cur.pos, graph.abstract_idx.clone())?;

    // Encode particle nodes and all edge types.
    let enc = spec.encoder(spec.feature_dim);
    let v_prev = net.mlp(g, "node_enc.prev", &enc, prev.feat)?;
    let v_cur = net.mlp(g, "node_enc.cur", &enc, cur.feat)?;
    check(g, v_prev, "node encoding")?;
    check(g, v_cur, "node encoding")?;
    let enc_edges = |g: &mut Graph<T>,
                     prefix: &str,
                     s: Var,
                     r: Var,
                     edges: &[(usize, usize)],
                     radius: f64|
     -> Result<Option<Var>> {
        if edges.is_empty() {
            return Ok(None);
        }
        let e = net.encode_edges(g, prefix, s, r, edges, radius)?;
        check(g, e, "edge encoding").map(Some)
    };
    let e_prev = enc_edges(g, "edge_enc.prev_a", prev.pos, a_pos, &graph.prev_to_a, spec.r_s)?;
    let e_cur = enc_edges(g, "edge_enc.cur_a", cur.pos, a_pos, &graph.cur_to_a, spec.r_s)?;
    let mut e_aa = enc_edges(g, "edge_enc.a_a", a_pos, a_pos, &graph.a_to_a, spec.r_s_abstract)?;
    let e_ac = enc_edges(g, "edge_enc.a_cur", a_pos, cur.pos, &graph.a_to_cur, spec.r_s)?;

    // Particle to abstract edges; abstract nodes carry no features yet.
    let e_prev = match e_prev {
        Some(e) => Some(net.update_edges(g, "edge_up.prev_a", e, v_prev, None, &graph.prev_to_a)?),
        None => None,
    };
    let e_cur = match e_cur {
        Some(e) => Some(net.update_edges(g, "edge_up.cur_a", e, v_cur, None, &graph.cur_to_a)?),
        None => None,
    };
    let agg_prev = net.aggregate(g, e_prev, &graph.prev_to_a, na)?;
    let agg_cur = net.aggregate(g, e_cur, &graph.cur_to_a, na)?;
    check(g, agg_prev, "particle to abstract edges")?;
    check(g, agg_cur, "particle to abstract edges")?;

    // First abstract update from the empty state.
    let x = g.concat_cols(&[agg_prev, agg_cur])?;
    let mut a = net.mlp(g, "node_up.a_init", &spec.updater(2), x)?;
    check(g, a, "abstract init")?;

    for k in 0..spec.message_steps {
        if let Some(e) = e_aa {
            let e = net.update_edges(g, &format!("mp.{k}.edge"), e, a, Some(a), &graph.a_to_a)?;
            e_aa = Some(check(g, e, "abstract message passing")?);
        }
        let agg = net.aggregate(g, e_aa, &graph.a_to_a, na)?;
        let x = g.concat_cols(&[a, agg])?;
        let d = net.mlp(g, &format!("mp.{k}.node"), &spec.updater(2), x)?;
        a = g.add(a, d)?;
        check(g, a, "abstract message passing")?;
    }

    // Abstract back to current particles.
    let e_ac = match e_ac {
        Some(e) => {
            let e = net.update_edges(g, "edge_up.a_cur", e, a, Some(v_cur), &graph.a_to_cur)?;
            Some(check(g, e, "abstract to particle edges")?)
        }
        None => None,
    };
    let agg = net.aggregate(g, e_ac, &graph.a_to_cur, cur.len())?;
    let x = g.concat_cols(&[v_cur, agg])?;
    let d = net.mlp(g, "node_up.cur", &spec.updater(2), x)?;
    let v = g.add(v_cur, d)?;
    check(g, v, "particle update")?;

    let dx = net.mlp(g, "dec.loc", &spec.decoder(3), v)?;
    let dz = net.mlp(g, "dec.feat", &spec.decoder(spec.feature_dim), v)?;
    let dx = g.tanh(dx);
    let dx = g.scale(dx, T::lit(spec.location_scale));
    let pos = g.add(cur.pos, dx)?;
    let feat = g.add(cur.feat, dz)?;
    check(g, pos, "decode")?;
    check(g, feat, "decode")?;
    Ok(ParticleVars::from_vars(g, pos, feat))
}

/// Samples abstract nodes, builds the graph and runs one step.
pub fn step<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    spec: &DynamicsSpec,
    prev: &ParticleVars,
    cur: &ParticleVars,
    seed: u64,
) -> Result<ParticleVars> {
    spec.validate()?;
    let idx = sample_abstract_nodes(cur.len(), spec.abstract_count(cur.len()), seed)?;
    let graph = build_graph(&prev.points, &cur.points, &idx, spec.r_s, spec.r_s_abstract)?;
    forward(g, params, spec, prev, cur, &graph)
}

/// Adds zero-mean Gaussian noise to the positions of `p`.
pub fn jitter<T: Real>(
    g: &mut Graph<T>,
    p: &ParticleVars,
    sigma: f64,
    seed: u64,
) -> Result<ParticleVars> {
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::invalid(format!("bad noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<T> = (0..p.len() * 3).map(|_| T::lit(normal.sample(&mut rng))).collect();
    let noise = g.constant(Tensor::new(vec![p.len(), 3], noise)?);
    let pos = g.add(p.pos, noise)?;
    Ok(ParticleVars::from_vars(g, pos, p.feat))
}

/// Applies `step` `steps` times on one tape, feeding predictions back. With a
/// positive `noise_sigma` both inputs of every step are jittered.
#[allow(clippy::too_many_arguments)]
pub fn rollout_vars<T: Real>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    spec: &DynamicsSpec,
    p1: ParticleVars,
    p2: ParticleVars,
    steps: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<ParticleVars>> {
    if steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    let (mut prev, mut cur) = (p1, p2);
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps as u64 {
        let a = jitter(g, &prev, noise_sigma, seed::derive_all(seed, &[k, 1]))?;
        let b = jitter(g, &cur, noise_sigma, seed::derive_all(seed, &[k, 2]))?;
        let next = step(g, params, spec, &a, &b, seed::derive_all(seed, &[k, 0]))?;
        prev = cur;
        cur = next.clone();
        out.push(next);
    }
    Ok(out)
}

/// Inference rollout that keeps only values, one short tape per step.
pub fn rollout(
    p1: &ParticleSet,
    p2: &ParticleSet,
    params: &ParameterStore<f32>,
    spec: &DynamicsSpec,
    steps: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<ParticleSet>> {
    if steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    let (mut prev, mut cur) = (p1.clone(), p2.clone());
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut g = Graph::new();
        let (a, b) = (prev.to_vars(&mut g), cur.to_vars(&mut g));
        let mut r = rollout_vars(
            &mut g,
            params,
            spec,
            a,
            b,
            1,
            noise_sigma,
            seed::derive(seed, k as u64),
        )?;
        let next = r.pop().expect("one step").to_set(&g, cur.timestep + 1);
        prev = std::mem::replace(&mut cur, next.clone());
        out.push(next);
    }
    Ok(out)
}
