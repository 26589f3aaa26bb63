//! Central finite differences against the analytic backward, per loss term
//! and for the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport, LossWeights, Phase, Targets};
use crate::model::{backward, forward, Model, ModelConfig};
use crate::nn::Params;
use crate::numerics::Rng;
use crate::scene::{CategoryTable, Scene};

pub const TERMS: [&str; 6] = ["l_cls", "l_mask", "l_depth", "l_sg", "l_dg", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    /// Distinct parameters sampled; every term is compared at each.
    pub samples: usize,
    pub tolerance: f64,
    /// Step is `step · (1 + |θ|)`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, per unit of loss
    /// magnitude. Central differences of smaller gradients are dominated by
    /// roundoff.
    pub floor: f64,
    /// Scales the analytic gradient by `1 + x` before comparing. Any nonzero
    /// value above the tolerance must make the check fail.
    pub corrupt: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-6,
            corrupt: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub checked: usize,
    /// Samples dropped because the difference quotient is not smooth there
    /// (matching flips, ReLU or hinge kinks, mask thresholds).
    pub skipped: usize,
    pub worst_rel_error: f64,
    pub worst_param: Option<usize>,
    /// Analytic and numeric derivative at `worst_param`.
    pub worst_values: Option<(f64, f64)>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub num_params: usize,
    pub terms: Vec<TermCheck>,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Draws up to `samples` distinct coordinates, taking turns between the
/// terms so each term's support is represented.
fn sample_coordinates(analytic: &[Vec<f64>], samples: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pools: Vec<Vec<usize>> = analytic
        .iter()
        .map(|g| {
            let mut s: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
            rng.shuffle(&mut s);
            s.reverse();
            s
        })
        .collect();
    let mut chosen = Vec::with_capacity(samples);
    let mut seen = std::collections::HashSet::new();
    while chosen.len() < samples && pools.iter().any(|p| !p.is_empty()) {
        for pool in &mut pools {
            if chosen.len() == samples {
                break;
            }
            while let Some(i) = pool.pop() {
                if seen.insert(i) {
                    chosen.push(i);
                    break;
                }
            }
        }
    }
    chosen
}

/// Compares every analytic gradient in `analytic` (one per term) at a shared
/// set of sampled coordinates. `eval(i, v)` returns every term's value with
/// coordinate `i` set to `v`.
pub fn check_gradients(
    names: &[&str],
    base: &[f64],
    analytic: &[Vec<f64>],
    mut eval: impl FnMut(usize, f64) -> Result<Vec<f64>>,
    cfg: &GradcheckConfig,
    rng: &mut Rng,
) -> Result<GradcheckReport> {
    let floors: Vec<f64> = match base.first() {
        Some(&v) => eval(0, v)?.iter().map(|l| cfg.floor * l.abs().max(1.0)).collect(),
        None => vec![cfg.floor; names.len()],
    };
    let mut diff = |i: usize, h: f64| -> Result<Vec<f64>> {
        let plus = eval(i, base[i] + h)?;
        let minus = eval(i, base[i] - h)?;
        Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect())
    };
    let mut terms: Vec<TermCheck> = names
        .iter()
        .map(|n| TermCheck {
            term: n.to_string(),
            checked: 0,
            skipped: 0,
            worst_rel_error: 0.0,
            worst_param: None,
            worst_values: None,
            passed: true,
        })
        .collect();
    for i in sample_coordinates(analytic, cfg.samples, rng) {
        let h = cfg.step * (1.0 + base[i].abs());
        let num = diff(i, h)?;
        let mut half: Option<Vec<f64>> = None;
        for (t, check) in terms.iter_mut().enumerate() {
            let a = analytic[t][i] * (1.0 + cfg.corrupt);
            let floor = floors[t];
            let mut n = num[t];
            let mut err = rel_error(a, n, floor);
            if err > cfg.tolerance {
                if half.is_none() {
                    half = Some(diff(i, h / 2.0)?);
                }
                let hv = half.as_ref().expect("computed above")[t];
                if rel_error(hv, num[t], floor) > cfg.tolerance {
                    check.skipped += 1;
                    continue;
                }
                if rel_error(a, hv, floor) < err {
                    err = rel_error(a, hv, floor);
                    n = hv;
                }
            }
            check.checked += 1;
            if err >= check.worst_rel_error {
                check.worst_rel_error = err;
                check.worst_param = Some(i);
                check.worst_values = Some((a, n));
            }
        }
    }
    for t in &mut terms {
        t.passed = t.worst_rel_error < cfg.tolerance;
    }
    Ok(GradcheckReport {
        num_params: base.len(),
        passed: terms.iter().all(|t| t.passed),
        terms,
    })
}

fn term_value(r: &LossReport, t: usize) -> f64 {
    [r.l_cls, r.l_mask, r.l_depth, r.l_sg, r.l_dg, r.total][t]
}

fn isolate(weights: LossWeights, t: usize) -> LossWeights {
    let mut w = LossWeights::zero();
    match t {
        0 => w.cls = 1.0,
        1 => w.mask = 1.0,
        2 => w.depth = 1.0,
        3 => w.sg = 1.0,
        4 => w.dg = 1.0,
        _ => w = weights,
    }
    w
}

/// Full-model gradient check on one scene in the joint phase.
pub fn gradcheck_model(
    model: &Model,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    scene: &Scene,
    table: &CategoryTable,
    cfg: &GradcheckConfig,
    rng: &mut Rng,
) -> Result<GradcheckReport> {
    let targets = Targets::new(scene, table)?;
    let out = forward(model, mcfg, &scene.image)?;
    let mut analytic = Vec::with_capacity(TERMS.len());
    for t in 0..TERMS.len() {
        let c = LossConfig {
            weights: isolate(lcfg.weights, t),
            ..lcfg.clone()
        };
        let (_, grads) = total_loss(&out, &targets, &c, Phase::Joint)?;
        let mut acc = model.zeros_like();
        backward(model, mcfg, &out, &grads, &mut acc);
        analytic.push(acc.flatten());
    }
    let base = model.flatten();
    let mut probe = model.clone();
    let eval = |i: usize, v: f64| -> Result<Vec<f64>> {
        probe.set_flat(i, v);
        let out = forward(&probe, mcfg, &scene.image);
        probe.set_flat(i, base[i]);
        let (r, _) = total_loss(&out?, &targets, lcfg, Phase::Joint)?;
        let vals: Vec<f64> = (0..TERMS.len()).map(|t| term_value(&r, t)).collect();
        if vals.iter().all(|v| v.is_finite()) {
            Ok(vals)
        } else {
            Err(Error::NonFinite("loss under perturbation".into()))
        }
    };
    check_gradients(&TERMS, &base, &analytic, eval, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(corrupt: f64) -> GradcheckReport {
        let base: Vec<f64> = vec![0.5, -1.0, 2.0];
        let f = |x: &[f64]| vec![x[0] * x[0] * x[1], (x[2]).sin() + x[0]];
        let analytic = vec![
            vec![2.0 * base[0] * base[1], base[0] * base[0], 0.0],
            vec![1.0, 0.0, base[2].cos()],
        ];
        let eval = |i: usize, v: f64| {
            let mut x = base.clone();
            x[i] = v;
            Ok(f(&x))
        };
        let cfg = GradcheckConfig {
            corrupt,
            ..GradcheckConfig::default()
        };
        check_gradients(&["a", "b"], &base, &analytic, eval, &cfg, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn exact_gradients_pass() {
        let r = quadratic(0.0);
        assert!(r.passed);
        assert_eq!(r.terms[0].checked, 3);
        assert_eq!(r.terms[1].checked, 3);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = quadratic(1e-3);
        assert!(!r.passed);
        assert!(r.terms.iter().all(|t| !t.passed));
    }

    #[test]
    fn sampling_covers_every_support() {
        let mut g = vec![vec![0.0; 100], vec![0.0; 100]];
        g[0][3] = 1.0;
        g[1].iter_mut().for_each(|v| *v = 1.0);
        let s = sample_coordinates(&g, 5, &mut Rng::new(4));
        assert_eq!(s.len(), 5);
        assert!(s.contains(&3));
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 5);
    }

    #[test]
    fn empty_parameter_set_passes_vacuously() {
        let eval = |_: usize, _: f64| -> Result<Vec<f64>> { unreachable!() };
        let r = check_gradients(&["a"], &[], &[vec![]], eval, &GradcheckConfig::default(), &mut Rng::new(0)).unwrap();
        assert!(r.passed);
        assert_eq!(r.num_params, 0);
        assert_eq!(r.terms[0].checked, 0);
    }

    #[test]
    fn kinks_are_skipped_not_failed() {
        let base = vec![1e-7];
        let analytic = vec![vec![1.0]];
        let eval = |_: usize, v: f64| Ok(vec![v.abs()]);
        let r = check_gradients(&["relu"], &base, &analytic, eval, &GradcheckConfig::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(r.terms[0].skipped, 1);
        assert!(r.passed);
    }
}
