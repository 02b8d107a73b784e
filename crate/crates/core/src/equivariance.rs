//! Numerical audit of `f(g x) = g f(x)`.

use eqdiff_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::group::{rotate_tensor, CyclicGroup, FieldRep, GroupElement};
use crate::layers::{Conv, Linear, Norm};
use crate::network::{randomize_store, ActionHead, Attention, Flavor, PolicyNetwork, ResBlock};
use crate::types::rotate_point_quarter;

/// Worst relative error observed for one group element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementError {
    pub element: usize,
    pub degrees: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub name: String,
    pub samples: usize,
    pub tolerance: f64,
    pub per_element: Vec<ElementError>,
}

impl EquivarianceReport {
    pub fn max_error(&self) -> f64 {
        self.per_element.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        diff += (*x as f64 - *y as f64).powi(2);
        norm += (*y as f64).powi(2);
    }
    if norm == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (diff / norm).sqrt()
}

fn per_row_max(a: &Tensor, b: &Tensor) -> f64 {
    let rows = a.shape()[0];
    let len = a.numel() / rows;
    (0..rows)
        .map(|r| rel_err(&a.data()[r * len..(r + 1) * len], &b.data()[r * len..(r + 1) * len]))
        .fold(0.0, f64::max)
}

/// Checks a field-to-field map on `samples` Gaussian inputs of shape
/// `(C_in, size, size)`.
#[allow(clippy::too_many_arguments)]
pub fn check_field_map<F>(
    name: &str,
    f: F,
    in_rep: &FieldRep,
    out_rep: &FieldRep,
    size: usize,
    samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivarianceReport>
where
    F: Fn(&Tensor) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[samples, in_rep.channels(), size, size], &mut rng);
    let fx = f(&x);
    let group = CyclicGroup::new(in_rep.order())?;
    let mut per_element = Vec::new();
    for g in group.elements() {
        let lhs = f(&rotate_tensor(&x, in_rep, g)?);
        let rhs = rotate_tensor(&fx, out_rep, g)?;
        per_element.push(ElementError {
            element: g.index(),
            degrees: g.degrees(),
            max_rel_error: per_row_max(&lhs, &rhs),
        });
    }
    Ok(EquivarianceReport {
        name: name.to_string(),
        samples,
        tolerance,
        per_element,
    })
}

/// Convolution layer audit.
pub fn check_conv(conv: &Conv, store: &ParamStore, size: usize, samples: usize, tolerance: f64, seed: u64) -> Result<EquivarianceReport> {
    let f = |x: &Tensor| {
        let mut g = Graph::inference(store);
        let v = g.input(x.clone());
        let y = conv.forward(&mut g, v);
        g.value(y).clone()
    };
    check_field_map("conv", f, conv.in_rep(), conv.out_rep(), size, samples, tolerance, seed)
}

fn rotate_actions(a: &Tensor, g: GroupElement) -> Result<Tensor> {
    let k = g.quarter_turns()?;
    let data = a
        .data()
        .chunks(2)
        .flat_map(|p| rotate_point_quarter([p[0], p[1]], k))
        .collect();
    Ok(Tensor::new(a.shape(), data).expect("same shape"))
}

/// End-to-end audit of the noise predictor: rotating `(s_t, a_t)` must
/// rotate `eps^s` as an image and `eps^a` as waypoints. The reported error
/// is the larger of the two heads.
pub fn check_network(net: &PolicyNetwork, samples: usize, tolerance: f64, seed: u64) -> Result<EquivarianceReport> {
    let cfg = net.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rep = FieldRep::trivial(cfg.group_order, cfg.state_channels());
    let s = Tensor::randn(&[samples, cfg.state_channels(), cfg.height, cfg.width], &mut rng);
    let a = Tensor::uniform(&[samples, cfg.action_len()], 1.0, &mut rng);
    let t: Vec<usize> = (0..samples).map(|_| rng.random_range(1..=cfg.steps)).collect();
    let chunk = 10;
    let run = |s: &Tensor, a: &Tensor| -> (Tensor, Tensor) {
        let (mut outs, mut outa) = (Vec::new(), Vec::new());
        let sl = s.numel() / samples;
        let al = a.numel() / samples;
        for start in (0..samples).step_by(chunk) {
            let end = (start + chunk).min(samples);
            let mut ss = s.shape().to_vec();
            ss[0] = end - start;
            let sb = Tensor::new(&ss, s.data()[start * sl..end * sl].to_vec()).unwrap();
            let ab = Tensor::new(&[end - start, al], a.data()[start * al..end * al].to_vec()).unwrap();
            let (es, ea) = net.predict(&sb, &ab, &t[start..end]);
            outs.extend_from_slice(es.data());
            outa.extend_from_slice(ea.data());
        }
        (
            Tensor::new(s.shape(), outs).unwrap(),
            Tensor::new(a.shape(), outa).unwrap(),
        )
    };
    let (fs, fa) = run(&s, &a);
    let group = CyclicGroup::new(cfg.group_order)?;
    let mut per_element = Vec::new();
    for g in group.elements() {
        let (ls, la) = run(&rotate_tensor(&s, &rep, g)?, &rotate_actions(&a, g)?);
        let rs = rotate_tensor(&fs, &rep, g)?;
        let ra = rotate_actions(&fa, g)?;
        per_element.push(ElementError {
            element: g.index(),
            degrees: g.degrees(),
            max_rel_error: per_row_max(&ls, &rs).max(per_row_max(&la, &ra)),
        });
    }
    Ok(EquivarianceReport {
        name: if net.is_equivariant() { "network" } else { "network (unconstrained)" }.to_string(),
        samples,
        tolerance,
        per_element,
    })
}

/// Builds one randomly initialized instance of every layer kind used by
/// the equivariant network and audits each. Parameters, including norm
/// gains and biases, are redrawn from a Gaussian so no check passes
/// because of a zero initialization.
pub fn layer_suite(n: usize, samples: usize, tolerance: f64, seed: u64) -> Result<Vec<EquivarianceReport>> {
    let flavor = Flavor { equivariant: true, n };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lift = Conv::lifting(&mut store, "lift", 3, 2, n, 3, &mut rng);
    let conv = Conv::group(&mut store, "group", 2, 3, n, 3, &mut rng);
    let conv1 = Conv::group(&mut store, "group1x1", 3, 2, n, 1, &mut rng);
    let out = Conv::to_trivial(&mut store, "out", 2, 3, n, 3, &mut rng);
    let lin = Linear::group(&mut store, "linear", 3, 2, n, &mut rng);
    let norm = Norm::new(&mut store, "norm", 4, n, true);
    let block = ResBlock::new(&mut store, "res", flavor, 2, 3, Some(2), &mut rng);
    let attn = Attention::new(&mut store, "attn", flavor, 2, &mut rng);
    let head = ActionHead::new(&mut store, "head", flavor, 2, 4, 3, true, 5, 16, &mut rng);
    randomize_store(&mut store, seed ^ 0x5eed, 0.5);
    let store = &store;
    let size = 8;
    let reg = |f| FieldRep::regular(n, f);
    let mut reports = Vec::new();
    let convs = [("lifting conv", &lift), ("group conv 3x3", &conv), ("group conv 1x1", &conv1), ("to-trivial conv", &out)];
    for (i, (name, c)) in convs.into_iter().enumerate() {
        let mut r = check_conv(c, store, size, samples, tolerance, seed + i as u64)?;
        r.name = name.to_string();
        reports.push(r);
    }
    let eval = |f: &dyn Fn(&mut Graph, eqdiff_tensor::Var) -> eqdiff_tensor::Var, x: &Tensor| {
        let mut g = Graph::inference(store);
        let v = g.input(x.clone());
        let y = f(&mut g, v);
        g.value(y).clone()
    };
    reports.push(check_field_map(
        "group linear",
        |x| {
            let b = x.shape()[0];
            let flat = x.clone().reshape(&[b, 3 * n]).unwrap();
            eval(&|g, v| lin.forward(g, v), &flat).reshape(&[b, 2 * n, 1, 1]).unwrap()
        },
        &reg(3),
        &reg(2),
        1,
        samples,
        tolerance,
        seed + 10,
    )?);
    reports.push(check_field_map("norm", |x| eval(&|g, v| norm.forward(g, v), x), &reg(4), &reg(4), size, samples, tolerance, seed + 11)?);
    // The residual block's embedding is a fixed regular vector per sample
    // that is rotated along with the input: its channels are part of x.
    reports.push(check_field_map(
        "residual block",
        |x| {
            let b = x.shape()[0];
            let plane = size * size;
            let feat = Tensor::new(&[b, 2 * n, size, size], x.data()[..].chunks(4 * n * plane).flat_map(|c| c[..2 * n * plane].to_vec()).collect()).unwrap();
            // embedding: spatial mean of the remaining channels (invariant pooling keeps it regular)
            let emb: Vec<f32> = x
                .data()
                .chunks(4 * n * plane)
                .flat_map(|c| c[2 * n * plane..].chunks(plane).map(|p| p.iter().sum::<f32>() / plane as f32).collect::<Vec<_>>())
                .collect();
            let emb = Tensor::new(&[b, 2 * n], emb).unwrap();
            let mut g = Graph::inference(store);
            let v = g.input(feat);
            let e = g.input(emb);
            let y = block.forward(&mut g, v, Some(e));
            g.value(y).clone()
        },
        &reg(4),
        &reg(3),
        size,
        samples,
        tolerance,
        seed + 12,
    )?);
    reports.push(check_field_map("attention", |x| eval(&|g, v| attn.forward(g, v), x), &reg(2), &reg(2), size, samples, tolerance, seed + 13)?);
    reports.push(check_field_map("downsample", |x| eval(&|g, v| g.avg_pool2(v), x), &reg(2), &reg(2), size, samples, tolerance, seed + 14)?);
    reports.push(check_field_map("upsample", |x| eval(&|g, v| g.upsample2(v), x), &reg(2), &reg(2), size, samples, tolerance, seed + 15)?);
    reports.push(check_action_head(&head, store, n, samples, tolerance, seed + 16)?);
    Ok(reports)
}

fn check_action_head(head: &ActionHead, store: &ParamStore, n: usize, samples: usize, tolerance: f64, seed: u64) -> Result<EquivarianceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rep = FieldRep::regular(n, 2);
    let z = Tensor::randn(&[samples, 2 * n, 4, 4], &mut rng);
    let a = Tensor::uniform(&[samples, 6], 1.0, &mut rng);
    let c = Tensor::randn(&[samples, 5], &mut rng);
    let run = |z: &Tensor, a: &Tensor| {
        let mut g = Graph::inference(store);
        let (zv, av, cv) = (g.input(z.clone()), g.input(a.clone()), g.input(c.clone()));
        let y = head.forward(&mut g, zv, Some(av), Some(cv));
        g.value(y).clone()
    };
    let fx = run(&z, &a);
    let mut per_element = Vec::new();
    for g in CyclicGroup::new(n)?.elements() {
        let lhs = run(&rotate_tensor(&z, &rep, g)?, &rotate_actions(&a, g)?);
        let rhs = rotate_actions(&fx, g)?;
        per_element.push(ElementError {
            element: g.index(),
            degrees: g.degrees(),
            max_rel_error: per_row_max(&lhs, &rhs),
        });
    }
    Ok(EquivarianceReport {
        name: "action head".into(),
        samples,
        tolerance,
        per_element,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DiffusionConfig;
    use crate::group::FieldRep;

    #[test]
    fn every_layer_commutes_with_the_group() {
        for n in [1, 2, 4] {
            for r in layer_suite(n, 20, 1e-5, 3).unwrap() {
                assert!(r.passed(), "n={n} {}: {:?}", r.name, r.per_element);
                assert_eq!(r.per_element[0].max_rel_error, 0.0, "{}", r.name);
            }
        }
    }

    #[test]
    fn unshared_kernel_breaks_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = Conv::unconstrained(&mut store, "c", FieldRep::regular(4, 2), FieldRep::regular(4, 2), 3, &mut rng);
        let r = check_conv(&c, &store, 8, 10, 1e-5, 0).unwrap();
        assert_eq!(r.per_element[0].max_rel_error, 0.0);
        assert!(r.per_element[1..].iter().all(|e| e.max_rel_error > 0.1), "{:?}", r.per_element);
    }

    #[test]
    fn network_is_equivariant_end_to_end() {
        let mut net = PolicyNetwork::new(&DiffusionConfig::default(), 0).unwrap();
        net.randomize(4, 0.2);
        let r = check_network(&net, 10, 1e-4, 1).unwrap();
        assert!(r.passed(), "{:?}", r.per_element);
    }

    #[test]
    fn unconstrained_network_is_not() {
        let mut cfg = DiffusionConfig::default();
        cfg.network.equivariant = false;
        let net = PolicyNetwork::new(&cfg, 0).unwrap();
        let r = check_network(&net, 4, 1e-4, 1).unwrap();
        assert_eq!(r.per_element[0].max_rel_error, 0.0);
        assert!(r.max_error() > 1e-2, "{:?}", r.per_element);
    }
}
