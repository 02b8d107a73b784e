//! Forward process, training objective and the reverse denoising step.

use eqdiff_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::network::PolicyNetwork;
use crate::schedule::NoiseSchedule;
use crate::types::{StateActionPair, TrajectoryAction, VideoClipState};

/// Gaussian noise for one joint sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    /// Channels-first, like [`JointBatch::state`] rows.
    pub eps_s: Vec<f32>,
    pub eps_a: Vec<f32>,
}

impl NoisePair {
    pub fn sample<R: Rng + ?Sized>(state_len: usize, action_len: usize, rng: &mut R) -> Self {
        Self {
            eps_s: normal_vec(state_len, rng),
            eps_a: normal_vec(action_len, rng),
        }
    }

    pub fn zeros(state_len: usize, action_len: usize) -> Self {
        Self {
            eps_s: vec![0.0; state_len],
            eps_a: vec![0.0; action_len],
        }
    }
}

pub(crate) fn normal_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// A batch of joint samples: states `(B, L*3, H, W)` and actions `(B, 2N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBatch {
    pub state: Tensor,
    pub action: Tensor,
}

impl JointBatch {
    pub fn from_pairs(pairs: &[StateActionPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::config("empty batch"))?;
        let (l, h, w) = (first.state.frames(), first.state.height(), first.state.width());
        let n = first.action.len();
        let mut s = Vec::with_capacity(pairs.len() * l * 3 * h * w);
        let mut a = Vec::with_capacity(pairs.len() * 2 * n);
        for p in pairs {
            if !p.state.same_shape(&first.state) || p.action.len() != n {
                return Err(Error::shape("pairs in a batch must share their shapes"));
            }
            s.extend(p.state.to_channels_first());
            a.extend(p.action.flat());
        }
        Ok(Self {
            state: Tensor::new(&[pairs.len(), l * 3, h, w], s)?,
            action: Tensor::new(&[pairs.len(), 2 * n], a)?,
        })
    }

    pub fn len(&self) -> usize {
        self.state.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_row(&self, i: usize) -> &[f32] {
        let len = self.state.numel() / self.len();
        &self.state.data()[i * len..(i + 1) * len]
    }

    pub fn action_row(&self, i: usize) -> &[f32] {
        let len = self.action.numel() / self.len();
        &self.action.data()[i * len..(i + 1) * len]
    }

    pub fn to_pairs(&self, noise_level: usize) -> Result<Vec<StateActionPair>> {
        let frames = self.state.shape()[1] / 3;
        let size = self.state.shape()[2];
        (0..self.len())
            .map(|i| {
                Ok(StateActionPair {
                    state: VideoClipState::from_channels_first(frames, size, self.state_row(i))?,
                    action: TrajectoryAction::from_flat(self.action_row(i))?,
                    noise_level,
                })
            })
            .collect()
    }
}

/// Shapes of the joint samples a predictor works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub points: usize,
}

impl SampleDims {
    pub fn of(cfg: &DiffusionConfig) -> Self {
        Self {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            points: cfg.points,
        }
    }
}

/// `eps_theta` evaluated without gradients.
pub trait NoisePredictor {
    fn predict_noise(&self, state: &Tensor, action: &Tensor, t: &[usize]) -> (Tensor, Tensor);
    fn dims(&self) -> SampleDims;
}

impl NoisePredictor for PolicyNetwork {
    fn predict_noise(&self, state: &Tensor, action: &Tensor, t: &[usize]) -> (Tensor, Tensor) {
        self.predict(state, action, t)
    }

    fn dims(&self) -> SampleDims {
        SampleDims::of(self.config())
    }
}

fn mix(x: &mut [f32], a: f32, eps: &[f32], b: f32) {
    for (v, e) in x.iter_mut().zip(eps) {
        *v = a * *v + b * e;
    }
}

/// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`, applied to both parts.
pub fn forward_diffuse(x0: &StateActionPair, t: usize, eps: &NoisePair, sched: &NoiseSchedule) -> Result<StateActionPair> {
    if x0.noise_level != 0 {
        return Err(Error::param("forward diffusion starts from clean data"));
    }
    let abar = sched.alpha_bar(t)?;
    let (a, b) = (abar.sqrt() as f32, (1.0 - abar).sqrt() as f32);
    let mut s = x0.state.to_channels_first();
    let mut act = x0.action.flat();
    if eps.eps_s.len() != s.len() || eps.eps_a.len() != act.len() {
        return Err(Error::shape("noise does not match the sample"));
    }
    mix(&mut s, a, &eps.eps_s, b);
    mix(&mut act, a, &eps.eps_a, b);
    Ok(StateActionPair {
        state: VideoClipState::from_channels_first(x0.state.frames(), x0.state.height(), &s)?,
        action: TrajectoryAction::from_flat(&act)?,
        noise_level: t,
    })
}

/// Batched forward diffusion of the state part, with one step per row.
pub(crate) fn diffuse_rows(x0: &Tensor, eps: &[f32], t: &[usize], sched: &NoiseSchedule) -> Tensor {
    let rows = t.len();
    let len = x0.numel() / rows;
    let mut out = x0.clone();
    for (i, &step) in t.iter().enumerate() {
        let abar = sched.alpha_bars()[step - 1];
        let r = i * len..(i + 1) * len;
        mix(&mut out.data_mut()[r.clone()], abar.sqrt() as f32, &eps[r], (1.0 - abar).sqrt() as f32);
    }
    out
}

/// Steps and noise drawn for one training batch. Drawing order is fixed:
/// all steps, then state noise, then action noise.
#[derive(Clone, Debug)]
pub struct TrainingDraw {
    pub t: Vec<usize>,
    pub eps_s: Tensor,
    pub eps_a: Tensor,
}

impl TrainingDraw {
    pub fn sample<R: Rng + ?Sized>(batch: &JointBatch, steps: usize, rng: &mut R) -> Self {
        let t: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(1..=steps)).collect();
        let eps_s = Tensor::new(batch.state.shape(), normal_vec(batch.state.numel(), rng)).unwrap();
        let eps_a = Tensor::new(batch.action.shape(), normal_vec(batch.action.numel(), rng)).unwrap();
        Self { t, eps_s, eps_a }
    }

    /// The noisy joint sample `x_t`.
    pub fn apply(&self, batch: &JointBatch, sched: &NoiseSchedule) -> JointBatch {
        JointBatch {
            state: diffuse_rows(&batch.state, self.eps_s.data(), &self.t, sched),
            action: diffuse_rows(&batch.action, self.eps_a.data(), &self.t, sched),
        }
    }
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Action and state noise-prediction errors, each a mean over its own
/// elements and over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub action: f64,
    pub state: f64,
}

impl LossTerms {
    pub fn combine(self, gamma: f64) -> f64 {
        (1.0 - gamma) * self.action + gamma * self.state
    }
}

/// Value-only objective. Validates the batch and surfaces the first
/// non-finite row.
pub fn training_loss_terms<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    batch: &JointBatch,
    net: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::param("training batch is empty"));
    }
    let draw = TrainingDraw::sample(batch, sched.steps(), rng);
    let xt = draw.apply(batch, sched);
    let (ps, pa) = net.predict_noise(&xt.state, &xt.action, &draw.t);
    let rows = batch.len();
    let (sl, al) = (ps.numel() / rows, pa.numel() / rows);
    let mut terms = LossTerms { action: 0.0, state: 0.0 };
    for i in 0..rows {
        let s = mse(&ps.data()[i * sl..(i + 1) * sl], &draw.eps_s.data()[i * sl..(i + 1) * sl]);
        let a = mse(&pa.data()[i * al..(i + 1) * al], &draw.eps_a.data()[i * al..(i + 1) * al]);
        if !s.is_finite() || !a.is_finite() {
            return Err(Error::Numeric {
                what: "training loss".into(),
                index: i,
            });
        }
        terms.state += s / rows as f64;
        terms.action += a / rows as f64;
    }
    Ok(terms)
}

/// `(1 - gamma) * MSE(eps^a) + gamma * MSE(eps^s)` at uniformly drawn steps.
pub fn training_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    batch: &JointBatch,
    net: &P,
    gamma: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(training_loss_terms(batch, net, sched, rng)?.combine(gamma))
}

/// Differentiable objective for one batch.
pub fn training_loss_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &PolicyNetwork,
    batch: &JointBatch,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Var {
    let gamma = net.config().gamma as f32;
    let draw = TrainingDraw::sample(batch, sched.steps(), rng);
    let xt = draw.apply(batch, sched);
    let s = g.input(xt.state);
    let a = g.input(xt.action);
    let out = net.forward(g, s, a, &draw.t);
    let es = g.input(draw.eps_s);
    let ea = g.input(draw.eps_a);
    let ls = g.mse(out.state, es);
    let la = g.mse(out.action, ea);
    let ls = g.scale(ls, gamma);
    let la = g.scale(la, 1.0 - gamma);
    g.add(ls, la)
}

/// Posterior mean `(x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`
/// applied in place.
pub(crate) fn posterior_mean(x: &mut [f32], eps: &[f32], t: usize, sched: &NoiseSchedule) {
    let beta = sched.betas()[t - 1];
    let abar = sched.alpha_bars()[t - 1];
    let alpha = sched.alphas()[t - 1];
    let c = beta / (1.0 - abar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    for (v, e) in x.iter_mut().zip(eps) {
        *v = ((*v as f64 - c * *e as f64) * inv) as f32;
    }
}

/// Adds `sigma_t z` with `sigma_t^2 = beta_t` for `t > 1`.
pub(crate) fn add_posterior_noise<R: Rng + ?Sized>(x: &mut [f32], t: usize, sched: &NoiseSchedule, rng: &mut R) {
    if t > 1 {
        let sigma = sched.betas()[t - 1].sqrt() as f32;
        for v in x.iter_mut() {
            *v += sigma * rng.sample::<f32, _>(StandardNormal);
        }
    }
}

/// One ancestral step `x_t -> x_{t-1}` on a batch at a common level `t`.
pub fn reverse_step_batch<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    xt: &JointBatch,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    deterministic: bool,
) -> Result<JointBatch> {
    if t == 0 || t > sched.steps() {
        return Err(Error::param(format!("step {t} outside 1..={}", sched.steps())));
    }
    let steps = vec![t; xt.len()];
    let (es, ea) = net.predict_noise(&xt.state, &xt.action, &steps);
    let mut out = xt.clone();
    posterior_mean(out.state.data_mut(), es.data(), t, sched);
    posterior_mean(out.action.data_mut(), ea.data(), t, sched);
    if !deterministic {
        add_posterior_noise(out.state.data_mut(), t, sched, rng);
        add_posterior_noise(out.action.data_mut(), t, sched, rng);
    }
    Ok(out)
}

/// One ancestral step on a single joint sample.
pub fn reverse_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    xt: &StateActionPair,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    deterministic: bool,
) -> Result<StateActionPair> {
    if xt.noise_level != t {
        return Err(Error::param(format!("sample is at level {} not {t}", xt.noise_level)));
    }
    let batch = JointBatch::from_pairs(std::slice::from_ref(xt))?;
    let out = reverse_step_batch(net, &batch, t, sched, rng, deterministic)?;
    Ok(out.to_pairs(t - 1)?.pop().expect("one row"))
}

/// Checks that a clip has the shape a model expects.
pub fn check_clip_shape(dims: SampleDims, state: &VideoClipState) -> Result<()> {
    if state.frames() != dims.frames || state.height() != dims.height || state.width() != dims.width {
        return Err(Error::config(format!(
            "clip is {}x{}x{} but the model expects {}x{}x{}",
            state.frames(),
            state.height(),
            state.width(),
            dims.frames,
            dims.height,
            dims.width
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::ScheduleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predicts the exact noise of a known clean batch.
    pub(crate) struct Oracle {
        pub x0: JointBatch,
        pub sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, state: &Tensor, action: &Tensor, t: &[usize]) -> (Tensor, Tensor) {
            let inv = |xt: &Tensor, x0: &Tensor| {
                let len = xt.numel() / t.len();
                let mut out = xt.clone();
                for (i, &step) in t.iter().enumerate() {
                    let abar = self.sched.alpha_bars()[step - 1];
                    for k in i * len..(i + 1) * len {
                        out.data_mut()[k] =
                            ((xt.data()[k] as f64 - abar.sqrt() * x0.data()[k] as f64) / (1.0 - abar).sqrt()) as f32;
                    }
                }
                out
            };
            (inv(state, &self.x0.state), inv(action, &self.x0.action))
        }

        fn dims(&self) -> SampleDims {
            let s = self.x0.state.shape();
            SampleDims {
                frames: s[1] / 3,
                height: s[2],
                width: s[3],
                points: self.x0.action.shape()[1] / 2,
            }
        }
    }

    const TOY_DIMS: SampleDims = SampleDims {
        frames: 2,
        height: 4,
        width: 4,
        points: 3,
    };

    pub(crate) struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, s: &Tensor, a: &Tensor, _: &[usize]) -> (Tensor, Tensor) {
            (Tensor::zeros(s.shape()), Tensor::zeros(a.shape()))
        }

        fn dims(&self) -> SampleDims {
            TOY_DIMS
        }
    }

    pub(crate) fn toy_pairs(count: usize, rng: &mut ChaCha8Rng) -> Vec<StateActionPair> {
        (0..count)
            .map(|_| {
                let s = Tensor::uniform(&[2 * 4 * 4 * 3], 1.0, rng).into_data();
                let a = Tensor::uniform(&[6], 1.0, rng).into_data();
                StateActionPair::clean(
                    VideoClipState::clean(2, 4, 4, s).unwrap(),
                    TrajectoryAction::from_flat(&a).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn forward_diffuse_limits() {
        let sched = NoiseSchedule::new(2, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = toy_pairs(1, &mut rng).pop().unwrap();
        let z = NoisePair::zeros(96, 6);
        let xt = forward_diffuse(&x0, 2, &z, &sched).unwrap();
        assert_eq!(xt.noise_level, 2);
        for (a, b) in xt.action.flat().iter().zip(x0.action.flat()) {
            assert!((a - 0.63f32.sqrt() * b).abs() < 1e-6);
        }
        let zero = StateActionPair::clean(VideoClipState::zeros(2, 4), TrajectoryAction::from_flat(&[0.0; 6]).unwrap());
        let eps = NoisePair::sample(96, 6, &mut rng);
        let xt = forward_diffuse(&zero, 1, &eps, &sched).unwrap();
        for (a, b) in xt.state.to_channels_first().iter().zip(&eps.eps_s) {
            assert!((a - 0.1f32.sqrt() * b).abs() < 1e-6);
        }
        assert!(forward_diffuse(&x0, 3, &z, &sched).is_err());
        assert!(forward_diffuse(&x0, 0, &z, &sched).is_err());
    }

    #[test]
    fn forward_marginal_statistics() {
        let sched = NoiseSchedule::new(100, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = StateActionPair::clean(VideoClipState::zeros(1, 2), TrajectoryAction::from_flat(&[0.5, -0.8]).unwrap());
        let t = 30;
        let abar = sched.alpha_bar(t).unwrap();
        let draws = 10_000;
        let mut sum = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..draws {
            let xt = forward_diffuse(&x0, t, &NoisePair::sample(12, 2, &mut rng), &sched).unwrap();
            for (k, v) in xt.action.flat().iter().enumerate() {
                sum[k] += *v as f64;
                sq[k] += (*v as f64).powi(2);
            }
        }
        for (k, target) in [0.5f64, -0.8].iter().enumerate() {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            let se = ((1.0 - abar) / draws as f64).sqrt();
            assert!((mean - abar.sqrt() * target).abs() < 4.0 * se);
            assert!((var / (1.0 - abar) - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn loss_boundaries_and_linearity() {
        let sched = NoiseSchedule::new(10, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = JointBatch::from_pairs(&toy_pairs(5, &mut rng)).unwrap();
        let oracle = Oracle { x0: batch.clone(), sched: sched.clone() };
        let l = training_loss(&batch, &oracle, 0.5, &sched, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(l < 1e-8, "{l}");

        let at = |gamma| training_loss(&batch, &Zero, gamma, &sched, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (a, s) = (at(0.0), at(1.0));
        for gamma in [0.1, 0.25, 0.5, 0.9] {
            assert!((at(gamma) - ((1.0 - gamma) * a + gamma * s)).abs() < 1e-12);
        }
        assert!(training_loss(&batch, &Zero, 1.5, &sched, &mut rng).is_err());
    }

    #[test]
    fn gamma_boundaries_ignore_the_other_head() {
        struct Noisy(bool);
        impl NoisePredictor for Noisy {
            fn predict_noise(&self, s: &Tensor, a: &Tensor, _: &[usize]) -> (Tensor, Tensor) {
                let junk = |x: &Tensor| Tensor::full(x.shape(), 3.0);
                if self.0 {
                    (Tensor::zeros(s.shape()), junk(a))
                } else {
                    (junk(s), Tensor::zeros(a.shape()))
                }
            }

            fn dims(&self) -> SampleDims {
                TOY_DIMS
            }
        }
        let sched = NoiseSchedule::new(10, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let batch = JointBatch::from_pairs(&toy_pairs(3, &mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        let loss = |p: &dyn NoisePredictor, gamma| training_loss(&batch, p, gamma, &sched, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(loss(&Noisy(true), 1.0), loss(&Zero, 1.0));
        assert_eq!(loss(&Noisy(false), 0.0), loss(&Zero, 0.0));
    }

    #[test]
    fn non_finite_loss_names_the_row() {
        struct Bad;
        impl NoisePredictor for Bad {
            fn predict_noise(&self, s: &Tensor, a: &Tensor, _: &[usize]) -> (Tensor, Tensor) {
                let mut a = Tensor::zeros(a.shape());
                let last = a.numel() - 1;
                a.data_mut()[last] = f32::NAN;
                (Tensor::zeros(s.shape()), a)
            }

            fn dims(&self) -> SampleDims {
                TOY_DIMS
            }
        }
        let sched = NoiseSchedule::new(10, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let batch = JointBatch::from_pairs(&toy_pairs(4, &mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        match training_loss(&batch, &Bad, 0.5, &sched, &mut ChaCha8Rng::seed_from_u64(0)) {
            Err(Error::Numeric { index, .. }) => assert_eq!(index, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reverse_step_inverts_the_first_step() {
        let sched = NoiseSchedule::new(1, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = toy_pairs(1, &mut rng).pop().unwrap();
        let eps = NoisePair::sample(96, 6, &mut rng);
        let x1 = forward_diffuse(&x0, 1, &eps, &sched).unwrap();
        let oracle = Oracle {
            x0: JointBatch::from_pairs(std::slice::from_ref(&x0)).unwrap(),
            sched: sched.clone(),
        };
        for det in [true, false] {
            let back = reverse_step(&oracle, &x1, 1, &sched, &mut rng, det).unwrap();
            assert_eq!(back.noise_level, 0);
            for (a, b) in back.action.flat().iter().zip(x0.action.flat()) {
                assert!((a - b).abs() < 1e-5);
            }
            for (a, b) in back.state.data().iter().zip(x0.state.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn reverse_step_fixed_point_and_reproducibility() {
        let sched = NoiseSchedule::new(10, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let zero = StateActionPair {
            state: VideoClipState::zeros(2, 4),
            action: TrajectoryAction::from_flat(&[0.0; 6]).unwrap(),
            noise_level: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = reverse_step(&Zero, &zero, 5, &sched, &mut rng, true).unwrap();
        assert!(out.action.flat().iter().all(|v| *v == 0.0));
        let run = |seed| reverse_step(&Zero, &zero, 5, &sched, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
