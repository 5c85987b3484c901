//! Finite-difference verification of the analytic gradient.

use serde::Serialize;

use super::{cross_entropy, layer_names, Architecture, LayerSpec, Model, NnError};
use crate::data::Action;
use crate::rng::Rng64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// L2 weight included in the checked objective.
    pub l2: f64,
    /// Check at most this many coordinates per weight/bias tensor, picked at
    /// random; `None` checks all of them.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-4,
            l2: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation moved a ReLU input across zero;
    /// the finite difference is meaningless there.
    pub excluded: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub layers: Vec<LayerReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn excluded(&self) -> usize {
        self.layers.iter().map(|l| l.excluded).sum()
    }
}

/// |a − n| / max(|a|, |n|), with the denominator floored so that
/// coordinates whose gradient is numerically zero compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn pick(range: std::ops::Range<usize>, limit: Option<usize>, rng: &mut Rng64) -> Vec<usize> {
    let mut idx: Vec<usize> = range.collect();
    if let Some(k) = limit {
        if k < idx.len() {
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
        }
    }
    idx
}

/// Compares the backprop gradient of the loss with central differences,
/// coordinate by coordinate, and reports the worst relative error per layer.
pub fn grad_check(
    model: &Model<f64>,
    input: &[f64],
    batch: usize,
    actions: &[Action],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError> {
    let analytic = model.loss_and_grad(input, batch, actions, cfg.l2)?.grad;
    let base_signs = model.forward(input, batch)?.relu_signs(model.layers());
    let names = layer_names(model.layers());
    let mut rng = Rng64::new(cfg.seed);
    let mut probe = model.clone();
    let mut layers = Vec::new();

    let eval = |probe: &Model<f64>| -> Result<(f64, Vec<i8>), NnError> {
        let acts = probe.forward(input, batch)?;
        let signs = acts.relu_signs(probe.layers());
        let (data, _) = cross_entropy(acts.logits(), probe.heads(), actions, false);
        Ok((data + probe.l2_penalty(cfg.l2), signs))
    };

    for (li, layer) in model.layers().iter().enumerate() {
        if !layer.has_params() {
            continue;
        }
        let mut report = LayerReport {
            layer: names[li].clone(),
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
        };
        let coords = [layer.weights.clone(), layer.bias.clone()]
            .into_iter()
            .flat_map(|r| pick(r, cfg.max_coords_per_tensor, &mut rng))
            .collect::<Vec<_>>();
        for i in coords {
            let orig = probe.params[i];
            probe.params[i] = orig + cfg.eps;
            let (plus, s_plus) = eval(&probe)?;
            probe.params[i] = orig - cfg.eps;
            let (minus, s_minus) = eval(&probe)?;
            probe.params[i] = orig;
            if s_plus != base_signs || s_minus != base_signs {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric));
        }
        layers.push(report);
    }
    Ok(GradCheckReport {
        layers,
        tolerance: cfg.tolerance,
    })
}

/// One named model of [`gradcheck_suite`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub params: usize,
    pub report: GradCheckReport,
}

fn suite_architectures() -> Vec<(&'static str, Architecture, usize)> {
    use crate::data::ActionSpace;
    let buttons = ActionSpace::buttons(&["up", "down", "left", "right"]).expect("valid space");
    let eighteen = ActionSpace::multi_class("action", 18).expect("valid space");
    let three = ActionSpace::multi_class("move", 3).expect("valid space");
    let mlp = Architecture {
        input: [3, 5, 5],
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 16 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 9 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 3 },
        ],
        heads: vec![3],
    };
    let strided = Architecture {
        input: [3, 12, 12],
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 4,
                kernel: 4,
                stride: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                out_channels: 6,
                kernel: 3,
                stride: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 5 },
        ],
        heads: vec![2, 3],
    };
    vec![
        ("mlp 3x5x5 -> 3", mlp, 4),
        ("strided conv 3x12x12 -> 2+3", strided, 3),
        ("compact 3x9x9 -> 4 buttons", Architecture::compact_cnn([3, 9, 9], &buttons), 2),
        ("compact 3x11x11 -> 18", Architecture::compact_cnn([3, 11, 11], &eighteen), 2),
        ("nature 3x84x84 -> 3", Architecture::nature_cnn([3, 84, 84], &three), 1),
    ]
}

/// Gradient checks of five randomly initialized models of increasing size,
/// the last being the full Nature stack at 84×84×3. Large tensors are
/// sampled at `coords_per_tensor` random coordinates.
pub fn gradcheck_suite(seed: u64, coords_per_tensor: usize) -> Result<Vec<SuiteEntry>, NnError> {
    suite_architectures()
        .into_iter()
        .enumerate()
        .map(|(i, (name, arch, batch))| {
            let model = Model::<f64>::init(arch, Rng64::derive(seed, i as u64))?;
            let mut rng = Rng64::new(Rng64::derive(seed, 100 + i as u64));
            let input: Vec<f64> = (0..batch * model.input_size()).map(|_| rng.next_f64()).collect();
            let actions: Vec<Action> = (0..batch)
                .map(|_| {
                    Action::new(model.heads().iter().map(|&h| rng.below(h as u64) as u32).collect())
                })
                .collect();
            let cfg = GradCheckConfig {
                max_coords_per_tensor: Some(coords_per_tensor),
                seed: Rng64::derive(seed, 200 + i as u64),
                ..GradCheckConfig::default()
            };
            Ok(SuiteEntry {
                name: name.to_string(),
                params: model.params().len(),
                report: grad_check(&model, &input, batch, &actions, &cfg)?,
            })
        })
        .collect()
}
