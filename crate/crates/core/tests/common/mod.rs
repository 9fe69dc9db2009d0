#![allow(dead_code)]

pub mod gauss;

use moarm::mask::{Mechanism, ObservationMask};
use moarm::model::{missingness_term_backward, observed_term_backward, sample_order_context, ModelConfig, MoArm, OrderContext};
use moarm::nn::Params;
use moarm::rng::Stream;

/// Small random model for finite-difference checks (< 1000 parameters in
/// each group).
pub fn random_model(dim: usize, seed: u64, scale: f64) -> MoArm {
    let cfg = ModelConfig {
        dim,
        hidden: vec![8, 8],
        time_dim: 8,
        head_hidden: vec![8],
        mode: Mechanism::Mnar,
    };
    let mut m = MoArm::new(cfg, seed).unwrap();
    let mut rng = Stream::new(seed ^ 0xabc);
    for t in m.backbone.tensors_mut() {
        for v in t.iter_mut() {
            *v = scale * rng.normal();
        }
    }
    for t in m.head.as_mut().unwrap().tensors_mut() {
        for v in t.iter_mut() {
            *v = scale * rng.normal();
        }
    }
    m
}

pub struct Fixture {
    pub rows: Vec<Vec<f64>>,
    pub masks: Vec<ObservationMask>,
    pub contexts: Vec<OrderContext>,
}

pub fn fixture(dim: usize, n: usize, seed: u64) -> Fixture {
    let mut rng = Stream::new(seed);
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    let mut contexts = Vec::new();
    for r in 0..n {
        rows.push((0..dim).map(|_| rng.normal()).collect());
        let mut bits: Vec<bool> = (0..dim).map(|_| rng.uniform() < 0.6).collect();
        bits[r % dim] = true;
        let m = ObservationMask::from_binary(&bits);
        contexts.push(sample_order_context(&m, &mut rng).unwrap());
        masks.push(m);
    }
    Fixture { rows, masks, contexts }
}

pub fn observed_objective(m: &MoArm, f: &Fixture) -> f64 {
    let rows: Vec<&[f64]> = f.rows.iter().map(|r| r.as_slice()).collect();
    let mut sink = m.backbone.zeros_like();
    observed_term_backward(&m.backbone, &rows, &f.contexts, 1.0, &mut sink).iter().sum()
}

pub fn missingness_objective(m: &MoArm, f: &Fixture, k: usize, seed: u64) -> f64 {
    let head = m.head.as_ref().unwrap();
    let mut gt = m.backbone.zeros_like();
    let mut gp = head.zeros_like();
    let mut total = 0.0;
    for (n, (row, mask)) in f.rows.iter().zip(&f.masks).enumerate() {
        total += missingness_term_backward(&m.backbone, head, row, mask, n, k, None, seed, 0.0, 1.0, &mut gt, &mut gp).unwrap();
    }
    total
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between `analytic` and Richardson-extrapolated
/// central differences of `f` over every parameter of the tensors selected by
/// `pick`.
pub fn max_fd_error<F>(model: &MoArm, analytic: &[Vec<f64>], pick: fn(&mut MoArm) -> Vec<&mut [f64]>, h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&MoArm) -> f64,
{
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let n_tensors = pick(&mut probe).len();
    for t in 0..n_tensors {
        let len = pick(&mut probe)[t].len();
        for i in 0..len {
            let orig = pick(&mut probe)[t][i];
            let mut central = |step: f64| {
                pick(&mut probe)[t][i] = orig + step;
                let up = f(&probe);
                pick(&mut probe)[t][i] = orig - step;
                let down = f(&probe);
                pick(&mut probe)[t][i] = orig;
                (up - down) / (2.0 * step)
            };
            let (coarse, fine) = (central(h), central(h / 2.0));
            let numeric = (4.0 * fine - coarse) / 3.0;
            worst = worst.max(rel_err(analytic[t][i], numeric, floor));
        }
    }
    worst
}

pub fn backbone_tensors(m: &mut MoArm) -> Vec<&mut [f64]> {
    m.backbone.tensors_mut()
}

pub fn head_tensors(m: &mut MoArm) -> Vec<&mut [f64]> {
    m.head.as_mut().unwrap().tensors_mut()
}

pub fn to_vecs<P: Params>(p: &P) -> Vec<Vec<f64>> {
    p.tensors().iter().map(|t| t.to_vec()).collect()
}

pub fn verdict(name: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    // written past the test harness capture so plain `cargo test` shows it
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
