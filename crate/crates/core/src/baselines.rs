//! Comparison models: behaviour cloning and an explicit conditional
//! diffusion policy that denoises the action given the clean clip.

use eqdiff_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DiffusionConfig;
use crate::diffusion::{add_posterior_noise, check_clip_shape, normal_vec, posterior_mean, JointBatch, SampleDims};
use crate::error::{Error, Result};
use crate::network::{check_network_dims, ActionHead, Encoder, Flavor, TimeEmbedding};
use crate::sampler::{SampledTrajectory, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::train::{Trainable, Trainer};
use crate::types::{StateActionPair, TrajectoryAction, VideoClipState};

fn clips_tensor(clips: &[VideoClipState]) -> Result<Tensor> {
    let first = clips.first().ok_or_else(|| Error::param("no clips"))?;
    let data: Vec<f32> = clips.iter().flat_map(|c| c.to_channels_first()).collect();
    Ok(Tensor::new(&[clips.len(), first.frames() * 3, first.height(), first.width()], data)?)
}

fn bottleneck_size(cfg: &DiffusionConfig) -> usize {
    cfg.height >> (cfg.network.fields.len() - 1)
}

/// CNN encoder plus MLP regressor `F(s) -> a`, with the same encoder depth
/// and channel widths as the diffusion backbone.
#[derive(Clone, Debug)]
pub struct BcModel {
    config: DiffusionConfig,
    params: ParamStore,
    encoder: Encoder,
    head: ActionHead,
}

impl BcModel {
    pub fn new(cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        let flavor = Flavor {
            equivariant: false,
            ..check_network_dims(cfg)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fields = &cfg.network.fields;
        let encoder = Encoder::new(
            &mut store,
            "enc",
            flavor,
            cfg.state_channels(),
            fields,
            None,
            cfg.network.attention,
            &mut rng,
        );
        let head = ActionHead::new(
            &mut store,
            "head",
            flavor,
            *fields.last().unwrap(),
            bottleneck_size(cfg),
            cfg.points,
            false,
            0,
            cfg.network.head_hidden,
            &mut rng,
        );
        Ok(Self {
            config: cfg.clone(),
            params: store,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, state: Var) -> Var {
        let (_, z) = self.encoder.forward(g, state, None);
        self.head.forward(g, z, None, None)
    }

    /// One deterministic trajectory per clip, clipped to `[-1, 1]`.
    pub fn predict_batch(&self, clips: &[VideoClipState]) -> Result<Vec<TrajectoryAction>> {
        let dims = SampleDims::of(&self.config);
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(64) {
            for c in chunk {
                check_clip_shape(dims, c)?;
            }
            let mut g = Graph::inference(&self.params);
            let s = g.input(clips_tensor(chunk)?);
            let a = self.forward(&mut g, s);
            for row in g.value(a).data().chunks(2 * self.config.points) {
                out.push(TrajectoryAction::from_flat(row)?.clipped());
            }
        }
        Ok(out)
    }

    pub fn predict(&self, clip: &VideoClipState) -> Result<TrajectoryAction> {
        Ok(self.predict_batch(std::slice::from_ref(clip))?.pop().expect("one clip"))
    }
}

impl Trainable for BcModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn batch_loss(&self, g: &mut Graph, batch: &JointBatch, _: &mut ChaCha8Rng) -> Var {
        let s = g.input(batch.state.clone());
        let pred = self.forward(g, s);
        let target = g.input(batch.action.clone());
        g.mse(pred, target)
    }
}

/// Conditional DDPM over actions only. The clean clip is encoded once and
/// the bottleneck features condition every denoising step; the clip itself
/// is never noised.
#[derive(Clone, Debug)]
pub struct ExplicitDiffusionModel {
    config: DiffusionConfig,
    params: ParamStore,
    time: TimeEmbedding,
    encoder: Encoder,
    head: ActionHead,
}

impl ExplicitDiffusionModel {
    pub fn new(cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        let flavor = check_network_dims(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = cfg.network.embed_fields;
        let time_dim = if flavor.equivariant { e } else { e * flavor.n };
        let time = TimeEmbedding::new(&mut store, "time", time_dim, &mut rng);
        let fields = &cfg.network.fields;
        let encoder = Encoder::new(
            &mut store,
            "enc",
            flavor,
            cfg.state_channels(),
            fields,
            None,
            cfg.network.attention,
            &mut rng,
        );
        let head = ActionHead::new(
            &mut store,
            "head",
            flavor,
            *fields.last().unwrap(),
            bottleneck_size(cfg),
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
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::from_config(&self.config).expect("validated config")
    }

    fn noise(&self, g: &mut Graph, z: Var, action: Var, t: &[usize]) -> Var {
        let temb = self.time.forward(g, t);
        self.head.forward(g, z, Some(action), Some(temb))
    }

    /// Reverse process over actions for a batch of clips.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        clips: &[VideoClipState],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<Vec<SampledTrajectory>> {
        let sched = self.schedule();
        let dims = SampleDims::of(&self.config);
        let al = 2 * dims.points;
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(64) {
            for c in chunk {
                check_clip_shape(dims, c)?;
                c.validate_clean()?;
            }
            let b = chunk.len();
            let z = {
                let mut g = Graph::inference(&self.params);
                let s = g.input(clips_tensor(chunk)?);
                let (_, z) = self.encoder.forward(&mut g, s, None);
                g.value(z).clone()
            };
            let mut action = Tensor::new(&[b, al], normal_vec(b * al, rng))?;
            let mut snaps: Vec<Vec<TrajectoryAction>> = vec![Vec::new(); b];
            let mut record = |a: &Tensor| {
                for (s, row) in snaps.iter_mut().zip(a.data().chunks(al)) {
                    s.push(TrajectoryAction::from_flat(row).expect("finite"));
                }
            };
            if cfg.record_intermediates {
                record(&action);
            }
            for t in (1..=sched.steps()).rev() {
                let eps = {
                    let mut g = Graph::inference(&self.params);
                    let zv = g.input(z.clone());
                    let av = g.input(action.clone());
                    let e = self.noise(&mut g, zv, av, &vec![t; b]);
                    g.value(e).clone()
                };
                posterior_mean(action.data_mut(), eps.data(), t, &sched);
                if !cfg.deterministic {
                    add_posterior_noise(action.data_mut(), t, &sched, rng);
                }
                if let Some(i) = action.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        what: "sampled action".into(),
                        index: out.len() + i / al,
                    });
                }
                if cfg.record_intermediates {
                    record(&action);
                }
            }
            for (row, mut s) in action.data().chunks(al).zip(snaps) {
                let a = TrajectoryAction::from_flat(row)?.clipped();
                if let Some(last) = s.last_mut() {
                    *last = a.clone();
                }
                out.push(SampledTrajectory {
                    intermediates: cfg.record_intermediates.then_some(s),
                    action: a,
                });
            }
        }
        Ok(out)
    }

    pub fn predict<R: Rng + ?Sized>(&self, clip: &VideoClipState, cfg: &SamplerConfig, rng: &mut R) -> Result<SampledTrajectory> {
        Ok(self.sample_batch(std::slice::from_ref(clip), cfg, rng)?.pop().expect("one clip"))
    }
}

impl Trainable for ExplicitDiffusionModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn batch_loss(&self, g: &mut Graph, batch: &JointBatch, rng: &mut ChaCha8Rng) -> Var {
        let sched = self.schedule();
        let b = batch.len();
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = Tensor::new(batch.action.shape(), normal_vec(batch.action.numel(), rng)).unwrap();
        let noisy = crate::diffusion::diffuse_rows(&batch.action, eps.data(), &t, &sched);
        let s = g.input(batch.state.clone());
        let (_, z) = self.encoder.forward(g, s, None);
        let a = g.input(noisy);
        let pred = self.noise(g, z, a, &t);
        let target = g.input(eps);
        g.mse(pred, target)
    }
}

/// Fits a BC model for `cfg.optimizer.epochs` epochs.
pub fn train_bc(
    cfg: &DiffusionConfig,
    train: &[StateActionPair],
    val: &[StateActionPair],
    seed: u64,
    callback: impl FnMut(&crate::train::EpochRecord),
) -> Result<Trainer<BcModel>> {
    let mut trainer = Trainer::new(BcModel::new(cfg, seed)?, cfg.optimizer.clone(), seed);
    trainer.run(train, val, cfg.optimizer.epochs, callback)?;
    Ok(trainer)
}

/// Fits an explicit conditional diffusion model.
pub fn train_explicit_diffusion(
    cfg: &DiffusionConfig,
    train: &[StateActionPair],
    val: &[StateActionPair],
    seed: u64,
    callback: impl FnMut(&crate::train::EpochRecord),
) -> Result<Trainer<ExplicitDiffusionModel>> {
    let mut trainer = Trainer::new(ExplicitDiffusionModel::new(cfg, seed)?, cfg.optimizer.clone(), seed);
    trainer.run(train, val, cfg.optimizer.epochs, callback)?;
    Ok(trainer)
}
