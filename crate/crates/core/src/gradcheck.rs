//! Finite-difference checks of the training losses.
//!
//! Runs in f64 so the comparison measures the backward pass rather than
//! single-precision rounding. A sample whose `theta +- h` evaluations put any
//! leaky-ReLU input or L1 residual on different sides of zero straddles a
//! kink; it is reported as excluded rather than failed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Tensor};
use crate::cube::{HsiCube, PanImage};
use crate::error::Result;
use crate::nets::{cube_tensor, gdn_graph, gsrn_graph, init_state, pan_tensor, prn_graph, ArchConfig, ModelState};
use crate::train::{bind_data, step_graph, AblationFlags, StepVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossTerm {
    Denoise,
    PanLow,
    SrStage1,
    SrStage2,
    PanHigh,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Denoise,
        LossTerm::PanLow,
        LossTerm::SrStage1,
        LossTerm::SrStage2,
        LossTerm::PanHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Denoise => "L_D",
            LossTerm::PanLow => "L_Q",
            LossTerm::SrStage1 => "L_S1",
            LossTerm::SrStage2 => "L_S2",
            LossTerm::PanHigh => "L_P",
        }
    }

    fn stage(self) -> u8 {
        match self {
            LossTerm::SrStage2 | LossTerm::PanHigh => 2,
            _ => 1,
        }
    }

    fn pick(self, v: &StepVars) -> crate::autograd::Var {
        match self {
            LossTerm::Denoise => v.l_d,
            LossTerm::PanLow => v.l_q,
            LossTerm::SrStage1 | LossTerm::SrStage2 => v.l_s,
            LossTerm::PanHigh => v.l_p,
        }
        .expect("term active without ablations")
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub arch: ArchConfig,
    pub step: f64,
    pub rel_tol: f64,
    /// Gradients smaller than this are compared absolutely.
    pub abs_floor: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig {
                channels: 8,
                rank_gdn: 3,
                rank_gsrn: 3,
                ..ArchConfig::default()
            },
            step: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            samples: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub term: LossTerm,
    pub checked: usize,
    pub passed: usize,
    pub excluded: usize,
    pub worst_rel: f64,
}

impl GradCheckReport {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Independent construction of each term with the SR target frozen at
/// `target`, which is what the detached analytic gradient differentiates.
fn term_value(
    state: &ModelState<f64>,
    term: LossTerm,
    obs: (&HsiCube, &PanImage, &PanImage),
    s: usize,
    target: &Tensor<f64>,
) -> (f64, Vec<bool>) {
    let (n, p, q) = obs;
    let arch = &state.arch;
    let mut g = Graph::<f64>::new();
    let params = state.bind(&mut g, false);
    let nv = g.constant(cube_tensor(n));
    let pv = g.constant(pan_tensor(p));
    let qv = g.constant(pan_tensor(q));
    let l_hat = gdn_graph(&mut g, &params, arch.hpf_layers, nv, qv).out;
    let out = match term {
        LossTerm::Denoise => g.l1_mean(nv, l_hat),
        LossTerm::PanLow => {
            let q_hat = prn_graph(&mut g, &params, arch.prn_depth, l_hat);
            g.sobel_l1(qv, q_hat)
        }
        LossTerm::SrStage1 => {
            let low = g.downsample(l_hat, s);
            let pred = gsrn_graph(&mut g, &params, arch.hpf_layers, low, qv, s).out;
            let t = g.constant(target.clone());
            g.mse_mean(pred, t)
        }
        LossTerm::SrStage2 => {
            let h_hat = gsrn_graph(&mut g, &params, arch.hpf_layers, l_hat, pv, s).out;
            let down = g.downsample(h_hat, s);
            let t = g.constant(target.clone());
            g.mse_mean(down, t)
        }
        LossTerm::PanHigh => {
            let h_hat = gsrn_graph(&mut g, &params, arch.hpf_layers, l_hat, pv, s).out;
            let p_hat = prn_graph(&mut g, &params, arch.prn_depth, h_hat);
            g.sobel_l1(pv, p_hat)
        }
    };
    (g.value(out).item(), g.kink_signature())
}

/// Checks `term` on the observation `(n, p, q)` with freshly initialized
/// networks.
pub fn check_loss(
    term: LossTerm,
    n: &HsiCube,
    p: &PanImage,
    q: &PanImage,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let s = crate::train::infer_scale(n, p, q)?;
    let state = init_state(&config.arch, n.bands(), config.seed)?.cast::<f64>();

    let mut g = Graph::<f64>::new();
    let params = state.bind(&mut g, true);
    let data = bind_data(&mut g, n, p, q, false);
    let vars = step_graph(&mut g, &params, &state.arch, &data, s, term.stage(), &AblationFlags::default());
    let grads = g.backward(term.pick(&vars));
    let target = g.value(vars.l_hat).clone();

    // every scalar parameter reachable from the loss
    let mut candidates = Vec::new();
    for (name, var) in params.vars() {
        if let Some(grad) = grads.get(*var) {
            candidates.extend((0..grad.len()).map(|i| (name.clone(), i, grad.data[i])));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport {
        term,
        checked: 0,
        passed: 0,
        excluded: 0,
        worst_rel: 0.0,
    };
    let eval = |name: &str, i: usize, h: f64| {
        let mut shifted = state.clone();
        shifted.params_mut().get_mut(name).unwrap().data[i] += h;
        term_value(&shifted, term, (n, p, q), s, &target)
    };
    for _ in 0..config.samples.min(candidates.len()) {
        let (name, i, analytic) = candidates.swap_remove(rng.random_range(0..candidates.len()));
        let (plus, plus_sig) = eval(&name, i, config.step);
        let (minus, minus_sig) = eval(&name, i, -config.step);
        if plus_sig != minus_sig {
            report.excluded += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * config.step);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(config.abs_floor);
        report.checked += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if rel < config.rel_tol {
            report.passed += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{downsample, downsample_pan};

    #[test]
    fn all_losses_pass_on_tiny_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = HsiCube::from_fn(16, 16, 4, |_, _, _| rng.random::<f32>());
        let p = PanImage::from_fn(16, 16, |r, c| (0..4).map(|k| h.get(r, c, k)).sum::<f32>() / 4.0);
        let n = downsample(&h, 2).unwrap();
        let q = downsample_pan(&p, 2).unwrap();
        let config = GradCheckConfig {
            samples: 40,
            ..GradCheckConfig::default()
        };
        for term in LossTerm::ALL {
            let r = check_loss(term, &n, &p, &q, &config).unwrap();
            assert!(r.checked >= 10, "{r:?}");
            assert_eq!(r.checked + r.excluded, 40);
            assert!(r.pass_rate() >= 0.95, "{r:?}");
        }
    }
}
