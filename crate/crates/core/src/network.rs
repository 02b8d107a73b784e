//! The U-Net noise predictor over joint (clip, trajectory) samples.
//!
//! The clip stack enters as trivial channels and is lifted to regular
//! fields of `C_n`. Hidden features stay regular through the residual,
//! attention and resampling blocks; the image decoder projects back to
//! trivial channels so the state noise transforms like an image. The
//! trajectory noise comes from an MLP branch at the bottleneck that reads
//! group-pooled features and is symmetrized over the group orbit.
//!
//! With `network.equivariant = false` the same topology is built from
//! unconstrained layers of identical width.

use std::sync::Arc;

use eqdiff_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::group::{rotation_index, FieldRep};
use crate::layers::{conv_regular, element_turns, Conv, Linear, Norm};
use crate::types::rotate_point_quarter;

/// Width and symmetry settings shared by all blocks of one model.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Flavor {
    pub equivariant: bool,
    pub n: usize,
}

/// `(2N, 2N)` block-diagonal matrix rotating every waypoint by `turns`.
fn waypoint_rotation(points: usize, turns: usize) -> Vec<f32> {
    let d = 2 * points;
    let mut m = vec![0.0; d * d];
    for i in 0..points {
        for col in 0..2 {
            let mut e = [0.0f32; 2];
            e[col] = 1.0;
            let r = rotate_point_quarter(e, turns);
            m[(2 * i) * d + 2 * i + col] = r[0];
            m[(2 * i + 1) * d + 2 * i + col] = r[1];
        }
    }
    m
}

/// Rows `j * 2N ..` hold the rotation by `g_j^-1`.
fn inverse_orbit_stack(points: usize, n: usize) -> Tensor {
    let d = 2 * points;
    let mut data = Vec::with_capacity(n * d * d);
    for j in 0..n {
        data.extend(waypoint_rotation(points, (4 - element_turns(j, n)) % 4));
    }
    Tensor::new(&[n * d, d], data).unwrap()
}

/// `(2N, n*2N)`: averages `g_j . o_j` over the orbit.
fn orbit_average_matrix(points: usize, n: usize) -> Tensor {
    let d = 2 * points;
    let blocks: Vec<Vec<f32>> = (0..n).map(|j| waypoint_rotation(points, element_turns(j, n))).collect();
    let mut data = vec![0.0; d * n * d];
    for r in 0..d {
        for (j, b) in blocks.iter().enumerate() {
            for c in 0..d {
                data[r * n * d + j * d + c] = b[r * d + c] / n as f32;
            }
        }
    }
    Tensor::new(&[d, n * d], data).unwrap()
}

/// Sinusoidal features of the diffusion step, `(B, dim)`.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; t.len() * dim];
    for (b, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let arg = step as f64 * freq;
            data[b * dim + i] = arg.sin() as f32;
            data[b * dim + half + i] = arg.cos() as f32;
        }
    }
    Tensor::new(&[t.len(), dim], data).unwrap()
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        flavor: Flavor,
        fields_in: usize,
        fields_out: usize,
        emb_fields: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let Flavor { equivariant, n } = flavor;
        let emb = emb_fields.map(|e| {
            if equivariant {
                Linear::group(store, &format!("{name}.emb"), e, fields_out, n, rng)
            } else {
                Linear::new(store, &format!("{name}.emb"), e * n, fields_out * n, rng)
            }
        });
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), fields_in, n, equivariant),
            conv1: conv_regular(store, &format!("{name}.conv1"), equivariant, fields_in, fields_out, n, 3, rng),
            emb,
            norm2: Norm::new(store, &format!("{name}.norm2"), fields_out, n, equivariant),
            conv2: conv_regular(store, &format!("{name}.conv2"), equivariant, fields_out, fields_out, n, 3, rng),
            skip: (fields_in != fields_out).then(|| {
                conv_regular(store, &format!("{name}.skip"), equivariant, fields_in, fields_out, n, 1, rng)
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h);
        if let (Some(proj), Some(e)) = (&self.emb, emb) {
            let e = proj.forward(g, e);
            h = g.add_broadcast(h, e);
        }
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(h, skip)
    }
}

/// Single-head self-attention over spatial positions. Scores are channel
/// dot products, which a cyclic channel shift leaves unchanged.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, flavor: Flavor, fields: usize, rng: &mut R) -> Self {
        let Flavor { equivariant, n } = flavor;
        let mut c = |s: &str, rng: &mut R| conv_regular(store, &format!("{name}.{s}"), equivariant, fields, fields, n, 1, rng);
        let q = c("q", rng);
        let k = c("k", rng);
        let v = c("v", rng);
        let proj = c("proj", rng);
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), fields, n, equivariant),
            q,
            k,
            v,
            proj,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, c, p) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let q = g.reshape(q, &[b, c, p]);
        let k = g.reshape(k, &[b, c, p]);
        let v = g.reshape(v, &[b, c, p]);
        let scores = g.bmm(q, true, k, false);
        let scores = g.scale(scores, 1.0 / (c as f32).sqrt());
        let attn = g.softmax_last(scores);
        let out = g.bmm(v, false, attn, true);
        let out = g.reshape(out, &s);
        let out = self.proj.forward(g, out);
        g.add(x, out)
    }
}

/// Lifting convolution followed by one residual block per resolution
/// level, then attention and a residual block at the bottleneck.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    lift: Conv,
    levels: Vec<ResBlock>,
    attention: Option<Attention>,
    mid: ResBlock,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        flavor: Flavor,
        channels_in: usize,
        fields: &[usize],
        emb_fields: Option<usize>,
        attention: bool,
        rng: &mut R,
    ) -> Self {
        let Flavor { equivariant, n } = flavor;
        let lift = if equivariant {
            Conv::lifting(store, &format!("{name}.lift"), channels_in, fields[0], n, 3, rng)
        } else {
            Conv::unconstrained(
                store,
                &format!("{name}.lift"),
                FieldRep::trivial(n, channels_in),
                FieldRep::regular(n, fields[0]),
                3,
                rng,
            )
        };
        let mut levels = Vec::new();
        for (i, &f) in fields.iter().enumerate() {
            let fin = if i == 0 { fields[0] } else { fields[i - 1] };
            levels.push(ResBlock::new(store, &format!("{name}.down{i}"), flavor, fin, f, emb_fields, rng));
        }
        let last = *fields.last().unwrap();
        let attention = attention.then(|| Attention::new(store, &format!("{name}.attn"), flavor, last, rng));
        let mid = ResBlock::new(store, &format!("{name}.mid"), flavor, last, last, emb_fields, rng);
        Self {
            lift,
            levels,
            attention,
            mid,
        }
    }

    /// Returns the per-level skip features and the bottleneck.
    pub fn forward(&self, g: &mut Graph, x: Var, emb: Option<Var>) -> (Vec<Var>, Var) {
        let mut h = self.lift.forward(g, x);
        let mut skips = Vec::with_capacity(self.levels.len());
        for (i, block) in self.levels.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = block.forward(g, h, emb);
            skips.push(h);
        }
        if let Some(a) = &self.attention {
            h = a.forward(g, h);
        }
        (skips, self.mid.forward(g, h, emb))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    levels: Vec<ResBlock>,
    norm: Norm,
    out: Conv,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        flavor: Flavor,
        fields: &[usize],
        channels_out: usize,
        emb_fields: usize,
        rng: &mut R,
    ) -> Self {
        let Flavor { equivariant, n } = flavor;
        let mut levels = Vec::new();
        for i in (0..fields.len() - 1).rev() {
            levels.push(ResBlock::new(
                store,
                &format!("dec.up{i}"),
                flavor,
                fields[i + 1] + fields[i],
                fields[i],
                Some(emb_fields),
                rng,
            ));
        }
        let out = if equivariant {
            Conv::to_trivial(store, "dec.out", fields[0], channels_out, n, 3, rng)
        } else {
            Conv::unconstrained(
                store,
                "dec.out",
                FieldRep::regular(n, fields[0]),
                FieldRep::trivial(n, channels_out),
                3,
                rng,
            )
        };
        Self {
            levels,
            norm: Norm::new(store, "dec.norm", fields[0], n, equivariant),
            out,
        }
    }

    fn forward(&self, g: &mut Graph, skips: &[Var], bottleneck: Var, emb: Var) -> Var {
        let mut h = bottleneck;
        for (block, &skip) in self.levels.iter().zip(skips.iter().rev().skip(1)) {
            h = g.upsample2(h);
            h = g.concat(&[h, skip]);
            h = block.forward(g, h, Some(emb));
        }
        let h = self.norm.forward(g, h);
        let h = g.silu(h);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TimeEmbedding {
    features: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dout: usize, rng: &mut R) -> Self {
        let features = 32;
        Self {
            features,
            l1: Linear::new(store, &format!("{name}.l1"), features, dout, rng),
            l2: Linear::new(store, &format!("{name}.l2"), dout, dout, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim()
    }

    pub fn forward(&self, g: &mut Graph, t: &[usize]) -> Var {
        let f = g.input(timestep_features(t, self.features));
        let h = self.l1.forward(g, f);
        let h = g.silu(h);
        self.l2.forward(g, h)
    }
}

/// Embeds the noisy trajectory into feature channels. In the equivariant
/// flavour the MLP is evaluated on every rotated copy `g_j^-1 a`, and
/// copy `j` fills channel `j` of each regular field.
#[derive(Clone, Debug)]
struct TrajectoryEmbedding {
    flavor: Flavor,
    stack: Option<Tensor>,
    l1: Linear,
    l2: Linear,
}

impl TrajectoryEmbedding {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, flavor: Flavor, points: usize, fields: usize, rng: &mut R) -> Self {
        let d = 2 * points;
        if flavor.equivariant {
            Self {
                flavor,
                stack: Some(inverse_orbit_stack(points, flavor.n)),
                l1: Linear::new(store, "traj.l1", d, fields, rng),
                l2: Linear::new(store, "traj.l2", fields, fields, rng),
            }
        } else {
            let c = fields * flavor.n;
            Self {
                flavor,
                stack: None,
                l1: Linear::new(store, "traj.l1", d, c, rng),
                l2: Linear::new(store, "traj.l2", c, c, rng),
            }
        }
    }

    fn forward(&self, g: &mut Graph, action: Var) -> Var {
        let b = g.shape(action)[0];
        let d = g.shape(action)[1];
        let Some(stack) = &self.stack else {
            let h = self.l1.forward(g, action);
            let h = g.silu(h);
            return self.l2.forward(g, h);
        };
        let n = self.flavor.n;
        let m = g.input(stack.clone());
        let copies = g.linear(action, m, None);
        let copies = g.reshape(copies, &[b * n, d]);
        let h = self.l1.forward(g, copies);
        let h = g.silu(h);
        let h = self.l2.forward(g, h);
        let e = self.l2.out_dim();
        // (b, j, e) -> (b, e, j)
        let idx: Arc<[u32]> = (0..b)
            .flat_map(|bb| (0..e).flat_map(move |ee| (0..n).map(move |j| ((bb * n + j) * e + ee) as u32)))
            .collect();
        g.gather(h, idx, &[b, e * n])
    }
}

/// Bottleneck MLP branch producing a flat `(B, 2N)` output.
///
/// In the equivariant flavour the bottleneck fields are first averaged over
/// their group channels (invariant pooling); the MLP is then evaluated on
/// every canonicalized copy `(g_j^-1 z, g_j^-1 a)` and the outputs are
/// rotated back and averaged, which makes the branch exactly equivariant.
#[derive(Clone, Debug)]
pub(crate) struct ActionHead {
    flavor: Flavor,
    points: usize,
    with_action: bool,
    pool: Option<Tensor>,
    inv_stack: Tensor,
    average: Tensor,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl ActionHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        flavor: Flavor,
        fields: usize,
        spatial: usize,
        points: usize,
        with_action: bool,
        context_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let n = flavor.n;
        let feat = if flavor.equivariant {
            fields * spatial * spatial
        } else {
            fields * n * spatial * spatial
        };
        let din = feat + context_dim + if with_action { 2 * points } else { 0 };
        let pool = flavor.equivariant.then(|| {
            let mut w = vec![0.0; fields * fields * n];
            for f in 0..fields {
                for j in 0..n {
                    w[f * fields * n + f * n + j] = 1.0 / n as f32;
                }
            }
            Tensor::new(&[fields, fields * n, 1, 1], w).unwrap()
        });
        Self {
            flavor,
            points,
            with_action,
            pool,
            inv_stack: inverse_orbit_stack(points, n),
            average: orbit_average_matrix(points, n),
            l1: Linear::new(store, &format!("{name}.l1"), din, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, hidden, rng),
            l3: Linear::new(store, &format!("{name}.l3"), hidden, 2 * points, rng),
        }
    }

    fn mlp(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.silu(h);
        let h = self.l2.forward(g, h);
        let h = g.silu(h);
        self.l3.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph, features: Var, action: Option<Var>, context: Option<Var>) -> Var {
        assert_eq!(action.is_some(), self.with_action, "action input mismatch");
        let s = g.shape(features).to_vec();
        let b = s[0];
        let Some(pool) = &self.pool else {
            let mut parts = vec![g.reshape(features, &[b, s[1] * s[2] * s[3]])];
            parts.extend(action);
            parts.extend(context);
            let x = g.concat(&parts);
            return self.mlp(g, x);
        };
        let n = self.flavor.n;
        let pw = g.input(pool.clone());
        let pooled = g.conv2d(features, pw, None, 0);
        let (fields, size) = (g.shape(pooled)[1], s[2]);
        let plane = size * size;
        // Rows ordered (b, j): copy j holds g_j^-1 applied to sample b.
        let maps: Vec<Vec<usize>> = (0..n)
            .map(|j| rotation_index(size, (4 - element_turns(j, n)) % 4))
            .collect();
        let mut idx = Vec::with_capacity(b * n * fields * plane);
        for bb in 0..b {
            for map in &maps {
                for f in 0..fields {
                    for &src in map {
                        idx.push(((bb * fields + f) * plane + src) as u32);
                    }
                }
            }
        }
        let z = g.gather(pooled, idx.into(), &[b * n, fields * plane]);
        let mut parts = vec![z];
        if let Some(a) = action {
            let d = 2 * self.points;
            let m = g.input(self.inv_stack.clone());
            let copies = g.linear(a, m, None);
            parts.push(g.reshape(copies, &[b * n, d]));
        }
        if let Some(c) = context {
            let dc = g.shape(c)[1];
            let idx: Arc<[u32]> = (0..b)
                .flat_map(|bb| (0..n).flat_map(move |_| (0..dc).map(move |k| (bb * dc + k) as u32)))
                .collect();
            parts.push(g.gather(c, idx, &[b * n, dc]));
        }
        let x = g.concat(&parts);
        let o = self.mlp(g, x);
        let o = g.reshape(o, &[b, n * 2 * self.points]);
        let avg = g.input(self.average.clone());
        g.linear(o, avg, None)
    }
}

/// Output of one network evaluation.
#[derive(Clone, Copy, Debug)]
pub struct NoisePrediction {
    /// `(B, L*3, H, W)`.
    pub state: Var,
    /// `(B, 2N)`.
    pub action: Var,
}

/// The joint noise predictor `eps_theta(x_t, t)`.
#[derive(Clone, Debug)]
pub struct PolicyNetwork {
    config: DiffusionConfig,
    params: ParamStore,
    time: TimeEmbedding,
    traj: TrajectoryEmbedding,
    encoder: Encoder,
    decoder: Decoder,
    head: ActionHead,
}

pub(crate) fn check_network_dims(cfg: &DiffusionConfig) -> Result<Flavor> {
    cfg.validate()?;
    let n = cfg.group_order;
    if cfg.network.embed_fields == 0 || cfg.network.fields.contains(&0) {
        return Err(Error::config("field counts must be positive"));
    }
    Ok(Flavor {
        equivariant: cfg.network.equivariant,
        n,
    })
}

impl PolicyNetwork {
    pub fn new(cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        let flavor = check_network_dims(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = cfg.network.embed_fields;
        let fields = &cfg.network.fields;
        let time_dim = if flavor.equivariant { e } else { e * flavor.n };
        let time = TimeEmbedding::new(&mut store, "time", time_dim, &mut rng);
        let traj = TrajectoryEmbedding::new(&mut store, flavor, cfg.points, e, &mut rng);
        let encoder = Encoder::new(
            &mut store,
            "enc",
            flavor,
            cfg.state_channels(),
            fields,
            Some(e),
            cfg.network.attention,
            &mut rng,
        );
        let decoder = Decoder::new(&mut store, flavor, fields, cfg.state_channels(), e, &mut rng);
        let bottleneck = cfg.height >> (fields.len() - 1);
        let head = ActionHead::new(
            &mut store,
            "head",
            flavor,
            *fields.last().unwrap(),
            bottleneck,
            cfg.points,
            true,
            time_dim,
            cfg.network.head_hidden,
            &mut rng,
        );
        Ok(Self {
            config: cfg.clone(),
            params: store,
            time,
            traj,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_equivariant(&self) -> bool {
        self.config.network.equivariant
    }

    /// `state`: `(B, L*3, H, W)`, `action`: `(B, 2N)`, one step per row.
    pub fn forward(&self, g: &mut Graph, state: Var, action: Var, t: &[usize]) -> NoisePrediction {
        let b = g.shape(state)[0];
        assert_eq!(t.len(), b, "one diffusion step per batch row");
        let temb = self.time.forward(g, t);
        let traj = self.traj.forward(g, action);
        let temb_fields = if self.is_equivariant() {
            let n = self.config.group_order;
            let e = self.time.out_dim();
            let idx: Arc<[u32]> = (0..b * e * n).map(|i| (i / n) as u32).collect();
            g.gather(temb, idx, &[b, e * n])
        } else {
            temb
        };
        let emb = g.add(temb_fields, traj);
        let emb = g.silu(emb);
        let (skips, bottleneck) = self.encoder.forward(g, state, Some(emb));
        let eps_state = self.decoder.forward(g, &skips, bottleneck, emb);
        let eps_action = self.head.forward(g, bottleneck, Some(action), Some(temb));
        NoisePrediction {
            state: eps_state,
            action: eps_action,
        }
    }

    /// Value-only evaluation.
    pub fn predict(&self, state: &Tensor, action: &Tensor, t: &[usize]) -> (Tensor, Tensor) {
        let mut g = Graph::inference(&self.params);
        let s = g.input(state.clone());
        let a = g.input(action.clone());
        let out = self.forward(&mut g, s, a, t);
        (g.value(out.state).clone(), g.value(out.action).clone())
    }

    /// Replaces every parameter with standard-normal noise scaled by
    /// `scale`. Used by tests that must not rely on zero-initialized
    /// parameters.
    pub fn randomize(&mut self, seed: u64, scale: f32) {
        randomize_store(&mut self.params, seed, scale);
    }
}

pub(crate) fn randomize_store(store: &mut ParamStore, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = scale * rng.sample::<f32, _>(rand_distr::StandardNormal);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_matrices_are_consistent() {
        // stacking g_j^-1 then averaging g_j . (.) is the identity
        for n in [1, 2, 4] {
            let inv = inverse_orbit_stack(3, n);
            let avg = orbit_average_matrix(3, n);
            let mut g = Graph::detached();
            let x = g.input(Tensor::new(&[1, 6], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
            let a = g.input(inv);
            let stacked = g.linear(x, a, None);
            let m = g.input(avg);
            let back = g.linear(stacked, m, None);
            assert!(g.value(back).max_abs_diff(g.value(x)) < 1e-6);
        }
    }

    #[test]
    fn timestep_features_are_bounded() {
        let f = timestep_features(&[1, 50, 100], 32);
        assert_eq!(f.shape(), &[3, 32]);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
    }
}
