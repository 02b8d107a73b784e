//! Building blocks with an explicit transformation law.
//!
//! Equivariant layers store a small *base* parameter tensor and expand it
//! into the full convolution kernel with a gather: every entry of the full
//! kernel is a copy of one base entry, rotated and cyclically shifted along
//! the group orbit. The kernel therefore satisfies
//! `K(g x) = rho_out(g) K(x) rho_in(g)^-1` for every `g` by construction,
//! and gradients flow back to the shared base weights through the gather.

use std::sync::Arc;

use eqdiff_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::group::{rotation_index, FeatureField, FieldRep};

/// Quarter turns of group element `j` in `C_n`, `n | 4`.
pub(crate) fn element_turns(j: usize, n: usize) -> usize {
    (4 * j / n) % 4
}

fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f32).sqrt();
    Tensor::uniform(shape, bound, rng)
}

fn regular_bias_index(fields: usize, n: usize) -> Arc<[u32]> {
    (0..fields * n).map(|c| (c / n) as u32).collect()
}

/// A 2-D convolution between feature fields.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    expand: Option<Arc<[u32]>>,
    bias_expand: Option<Arc<[u32]>>,
    kernel_shape: [usize; 4],
    pad: usize,
    in_rep: FieldRep,
    out_rep: FieldRep,
}

impl Conv {
    /// Trivial input channels to `fields_out` regular fields.
    pub fn lifting<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels_in: usize,
        fields_out: usize,
        n: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = channels_in * k * k;
        let weight = store.add(
            format!("{name}.w"),
            init_uniform(&[fields_out, channels_in, k, k], fan_in, rng),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fields_out]));
        let maps: Vec<Vec<usize>> = (0..n).map(|j| rotation_index(k, element_turns(j, n))).collect();
        let kk = k * k;
        let mut idx = Vec::with_capacity(fields_out * n * channels_in * kk);
        for f in 0..fields_out {
            for map in &maps {
                for ci in 0..channels_in {
                    for &tap in map {
                        idx.push(((f * channels_in + ci) * kk + tap) as u32);
                    }
                }
            }
        }
        Self {
            weight,
            bias: Some(bias),
            expand: Some(idx.into()),
            bias_expand: Some(regular_bias_index(fields_out, n)),
            kernel_shape: [fields_out * n, channels_in, k, k],
            pad: k / 2,
            in_rep: FieldRep::trivial(n, channels_in),
            out_rep: FieldRep::regular(n, fields_out),
        }
    }

    /// Regular fields to regular fields (group convolution).
    pub fn group<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fields_in: usize,
        fields_out: usize,
        n: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = fields_in * n * k * k;
        let weight = store.add(
            format!("{name}.w"),
            init_uniform(&[fields_out, fields_in, n, k, k], fan_in, rng),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fields_out]));
        let maps: Vec<Vec<usize>> = (0..n).map(|j| rotation_index(k, element_turns(j, n))).collect();
        let kk = k * k;
        let mut idx = Vec::with_capacity(fields_out * n * fields_in * n * kk);
        for f in 0..fields_out {
            for (j, map) in maps.iter().enumerate() {
                for fi in 0..fields_in {
                    for i in 0..n {
                        let rel = (i + n - j) % n;
                        for &tap in map {
                            idx.push((((f * fields_in + fi) * n + rel) * kk + tap) as u32);
                        }
                    }
                }
            }
        }
        Self {
            weight,
            bias: Some(bias),
            expand: Some(idx.into()),
            bias_expand: Some(regular_bias_index(fields_out, n)),
            kernel_shape: [fields_out * n, fields_in * n, k, k],
            pad: k / 2,
            in_rep: FieldRep::regular(n, fields_in),
            out_rep: FieldRep::regular(n, fields_out),
        }
    }

    /// Regular fields to trivial output channels.
    pub fn to_trivial<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fields_in: usize,
        channels_out: usize,
        n: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = fields_in * n * k * k;
        let weight = store.add(
            format!("{name}.w"),
            init_uniform(&[channels_out, fields_in, k, k], fan_in, rng),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[channels_out]));
        let maps: Vec<Vec<usize>> = (0..n).map(|j| rotation_index(k, element_turns(j, n))).collect();
        let kk = k * k;
        let mut idx = Vec::with_capacity(channels_out * fields_in * n * kk);
        for c in 0..channels_out {
            for fi in 0..fields_in {
                for map in &maps {
                    for &tap in map {
                        idx.push(((c * fields_in + fi) * kk + tap) as u32);
                    }
                }
            }
        }
        Self {
            weight,
            bias: Some(bias),
            expand: Some(idx.into()),
            bias_expand: None,
            kernel_shape: [channels_out, fields_in * n, k, k],
            pad: k / 2,
            in_rep: FieldRep::regular(n, fields_in),
            out_rep: FieldRep::trivial(n, channels_out),
        }
    }

    /// Ordinary convolution with independent weights. `in_rep`/`out_rep`
    /// only describe the channel counts; no constraint is imposed.
    pub fn unconstrained<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_rep: FieldRep,
        out_rep: FieldRep,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let (ci, co) = (in_rep.channels(), out_rep.channels());
        let weight = store.add(format!("{name}.w"), init_uniform(&[co, ci, k, k], ci * k * k, rng));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[co]));
        Self {
            weight,
            bias: Some(bias),
            expand: None,
            bias_expand: None,
            kernel_shape: [co, ci, k, k],
            pad: k / 2,
            in_rep,
            out_rep,
        }
    }

    pub fn in_rep(&self) -> &FieldRep {
        &self.in_rep
    }

    pub fn out_rep(&self) -> &FieldRep {
        &self.out_rep
    }

    pub fn is_constrained(&self) -> bool {
        self.expand.is_some()
    }

    /// The full `(Cout, Cin, K, K)` kernel.
    pub fn kernel(&self, g: &mut Graph) -> Var {
        let w = g.param(self.weight);
        match &self.expand {
            Some(idx) => g.gather(w, idx.clone(), &self.kernel_shape),
            None => w,
        }
    }

    pub fn kernel_tensor(&self, store: &ParamStore) -> Tensor {
        let mut g = Graph::inference(store);
        let k = self.kernel(&mut g);
        g.value(k).clone()
    }

    fn bias(&self, g: &mut Graph) -> Option<Var> {
        let b = g.param(self.bias?);
        Some(match &self.bias_expand {
            Some(idx) => g.gather(b, idx.clone(), &[idx.len()]),
            None => b,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(
            g.shape(x)[1],
            self.in_rep.channels(),
            "conv input does not match its representation"
        );
        let w = self.kernel(g);
        let b = self.bias(g);
        g.conv2d(x, w, b, self.pad)
    }

    /// Value-only evaluation on a batched `(B, C, H, W)` field tensor.
    pub fn apply(&self, store: &ParamStore, x: &FeatureField) -> Result<FeatureField> {
        if x.rep != self.in_rep {
            return Err(Error::config(format!(
                "conv expects {:?} input fields, got {:?}",
                self.in_rep.blocks(),
                x.rep.blocks()
            )));
        }
        let s = x.data.shape().to_vec();
        let mut g = Graph::inference(store);
        let v = g.input(x.data.clone().reshape(&[1, s[0], s[1], s[2]]).expect("same size"));
        let y = self.forward(&mut g, v);
        let out = g.value(y).clone();
        let os = out.shape().to_vec();
        FeatureField::new(out.reshape(&os[1..]).expect("same size"), self.out_rep.clone())
    }
}

/// Fully connected layer on `(B, in)` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    /// Index maps from free parameters to the full weight and bias.
    #[allow(clippy::type_complexity)]
    expand: Option<(Arc<[u32]>, Arc<[u32]>)>,
    shape: [usize; 2],
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.w"), init_uniform(&[dout, din], din, rng));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self {
            weight,
            bias,
            expand: None,
            shape: [dout, din],
        }
    }

    /// Regular-to-regular map on `(B, fields * n)` vectors: a 1x1 group
    /// convolution without spatial extent.
    pub fn group<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fields_in: usize,
        fields_out: usize,
        n: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            init_uniform(&[fields_out, fields_in, n], fields_in * n, rng),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fields_out]));
        let mut idx = Vec::with_capacity(fields_out * n * fields_in * n);
        for f in 0..fields_out {
            for j in 0..n {
                for fi in 0..fields_in {
                    for i in 0..n {
                        idx.push(((f * fields_in + fi) * n + (i + n - j) % n) as u32);
                    }
                }
            }
        }
        Self {
            weight,
            bias,
            expand: Some((idx.into(), regular_bias_index(fields_out, n))),
            shape: [fields_out * n, fields_in * n],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.shape[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let (w, b) = match &self.expand {
            Some((wi, bi)) => (
                g.gather(w, wi.clone(), &self.shape),
                g.gather(b, bi.clone(), &[self.shape[0]]),
            ),
            None => (w, b),
        };
        g.linear(x, w, Some(b))
    }
}

/// Group normalization whose groups hold whole fields, with per-field
/// affine parameters shared across a field's channels.
#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    expand: Option<Arc<[u32]>>,
    groups: usize,
}

/// Largest of 4, 2, 1 dividing `fields`.
pub fn norm_groups(fields: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| fields.is_multiple_of(*g)).unwrap_or(1)
}

impl Norm {
    /// `n = 1` gives an ordinary per-channel group norm over `fields`
    /// channels.
    pub fn new(store: &mut ParamStore, name: &str, fields: usize, n: usize, shared: bool) -> Self {
        let (params, expand) = if shared {
            (fields, Some(regular_bias_index(fields, n)))
        } else {
            (fields * n, None)
        };
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[params], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[params])),
            expand,
            groups: norm_groups(fields),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.group_norm(x, self.groups, 1e-5);
        let mut gamma = g.param(self.gamma);
        let mut beta = g.param(self.beta);
        if let Some(idx) = &self.expand {
            gamma = g.gather(gamma, idx.clone(), &[idx.len()]);
            beta = g.gather(beta, idx.clone(), &[idx.len()]);
        }
        let y = g.mul_channels(y, gamma);
        g.add_channels(y, beta)
    }
}

/// Either flavour of a field-to-field convolution, chosen at build time.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_regular<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    equivariant: bool,
    fields_in: usize,
    fields_out: usize,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Conv {
    if equivariant {
        Conv::group(store, name, fields_in, fields_out, n, k, rng)
    } else {
        Conv::unconstrained(
            store,
            name,
            FieldRep::regular(n, fields_in),
            FieldRep::regular(n, fields_out),
            k,
            rng,
        )
    }
}

