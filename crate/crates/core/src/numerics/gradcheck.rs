//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, StapError};
use crate::numerics::kernels::{
    Add, Concat, Cosine, Differentiable, HuberLoss, KlDivergence, L2Norm, LayerNorm, Matmul,
    MeanPool, Mul, SoftmaxRows, Unary, UnaryKernel, KL_EPS, LN_EPS,
};
use crate::numerics::tensor::{dot, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Coordinates probed per check; all coordinates when there are fewer.
    pub probes: usize,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to round-off are compared on an absolute scale.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tol: 1e-4,
            probes: 20,
            scale_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub kernel: String,
    pub max_rel_error: f64,
    pub pass: bool,
    pub probes: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn validate(cfg: &GradCheckConfig) -> Result<()> {
    if !(1e-7..=1e-3).contains(&cfg.step) {
        return Err(StapError::invalid(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            cfg.step
        )));
    }
    Ok(())
}

/// Picks `probes` distinct coordinates out of `total`.
pub fn probe_coordinates(total: usize, probes: usize, rng: &mut impl Rng) -> Vec<usize> {
    if total <= probes {
        (0..total).collect()
    } else {
        let mut v = index::sample(rng, total, probes).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares `analytic[c]` with a central difference of `eval` at each probed
/// coordinate. `eval(c, x)` must return the objective with coordinate `c` set
/// to `x`; `base[c]` is the unperturbed value.
pub fn compare_at(
    name: &str,
    analytic: &[f64],
    base: &[f64],
    coords: &[usize],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    validate(cfg)?;
    let mut max_rel: f64 = 0.0;
    for &c in coords {
        let x0 = base[c];
        let plus = eval(c, x0 + cfg.step)?;
        let minus = eval(c, x0 - cfg.step)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        max_rel = max_rel.max(relative_error(analytic[c], numeric, cfg.scale_floor));
    }
    Ok(GradCheckReport {
        kernel: name.to_string(),
        max_rel_error: max_rel,
        pass: max_rel <= cfg.tol,
        probes: coords.len(),
    })
}

fn projected(kernel: &dyn Differentiable, inputs: &[Tensor], proj: &Tensor) -> Result<f64> {
    let y = kernel.forward(inputs)?;
    if let Some(i) = y.data().iter().position(|v| !v.is_finite()) {
        return Err(StapError::Evaluation {
            kernel: kernel.name(),
            location: format!("output index {i} of shape {:?}", y.shape()),
        });
    }
    Ok(dot(y.data(), proj.data()))
}

/// Checks a kernel's backward pass at `point`. Tensor outputs are reduced to a
/// scalar with a fixed random projection.
pub fn grad_check(
    kernel: &dyn Differentiable,
    point: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let y = kernel.forward(point)?;
    if let Some(i) = y.data().iter().position(|v| !v.is_finite()) {
        return Err(StapError::Evaluation {
            kernel: kernel.name(),
            location: format!("output index {i} at the base point"),
        });
    }
    let proj = if y.len() == 1 {
        Tensor::filled(y.shape(), 1.0)
    } else {
        let mut p = y.zeros_like();
        for v in p.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        p
    };
    let grads = kernel.backward(point, &proj)?;
    if grads.len() != point.len() {
        return Err(StapError::invalid(format!(
            "{} backward returned {} gradients for {} inputs",
            kernel.name(),
            grads.len(),
            point.len()
        )));
    }

    // Flatten inputs into one coordinate space.
    let offsets: Vec<usize> = point
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let base: Vec<f64> = point.iter().flat_map(|t| t.data().to_vec()).collect();
    let coords = probe_coordinates(base.len(), cfg.probes, &mut rng);

    let mut work = point.to_vec();
    compare_at(&kernel.name(), &analytic, &base, &coords, cfg, |c, x| {
        let which = offsets.iter().rposition(|&o| o <= c).unwrap();
        let local = c - offsets[which];
        let saved = work[which].data()[local];
        work[which].data_mut()[local] = x;
        let v = projected(kernel, &work, &proj);
        work[which].data_mut()[local] = saved;
        v
    })
}

/// A kernel paired with a sampler of valid evaluation points.
pub struct SuiteEntry {
    pub kernel: Box<dyn Differentiable>,
    pub sample: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

fn simplex(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    Tensor::vector(v)
}

/// The full set of kernels the model relies on.
pub fn kernel_suite() -> Vec<SuiteEntry> {
    fn unary(op: Unary) -> SuiteEntry {
        SuiteEntry {
            kernel: Box::new(UnaryKernel(op)),
            sample: |rng| vec![normal(&[7], rng)],
        }
    }
    vec![
        SuiteEntry {
            kernel: Box::new(Matmul),
            sample: |rng| vec![normal(&[4, 3], rng), normal(&[3, 2], rng)],
        },
        SuiteEntry {
            kernel: Box::new(Add),
            sample: |rng| vec![normal(&[3, 4], rng), normal(&[3, 4], rng)],
        },
        SuiteEntry {
            kernel: Box::new(Mul),
            sample: |rng| vec![normal(&[3, 4], rng), normal(&[3, 4], rng)],
        },
        unary(Unary::Tanh),
        unary(Unary::Sigmoid),
        unary(Unary::Gelu),
        unary(Unary::Softplus),
        unary(Unary::Exp),
        SuiteEntry {
            kernel: Box::new(L2Norm),
            sample: |rng| vec![normal(&[6], rng)],
        },
        SuiteEntry {
            kernel: Box::new(MeanPool),
            sample: |rng| vec![normal(&[5, 3], rng)],
        },
        SuiteEntry {
            kernel: Box::new(Concat),
            sample: |rng| vec![normal(&[3], rng), normal(&[2], rng), normal(&[4], rng)],
        },
        SuiteEntry {
            kernel: Box::new(SoftmaxRows {
                axis: 1,
                temperature: 0.7,
            }),
            sample: |rng| vec![normal(&[3, 5], rng)],
        },
        SuiteEntry {
            kernel: Box::new(LayerNorm { eps: LN_EPS }),
            sample: |rng| vec![normal(&[6], rng), normal(&[6], rng), normal(&[6], rng)],
        },
        SuiteEntry {
            kernel: Box::new(HuberLoss { delta: 1.0 }),
            sample: |rng| {
                let p = normal(&[6], rng).map(|v| 2.0 * v);
                vec![p, normal(&[6], rng)]
            },
        },
        SuiteEntry {
            kernel: Box::new(KlDivergence { eps: KL_EPS }),
            sample: |rng| vec![simplex(5, rng), simplex(5, rng)],
        },
        SuiteEntry {
            kernel: Box::new(Cosine),
            sample: |rng| vec![normal(&[5], rng), normal(&[5], rng)],
        },
    ]
}

/// Worst report per kernel over `points` random evaluation points.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub kernel: String,
    pub points: usize,
    pub worst_rel_error: f64,
    pub pass: bool,
}

pub fn run_kernel_suite(points: usize, cfg: &GradCheckConfig) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for entry in kernel_suite() {
        let mut worst: f64 = 0.0;
        for i in 0..points {
            let point = (entry.sample)(&mut rng);
            let local = GradCheckConfig {
                seed: cfg.seed.wrapping_add(i as u64 + 1),
                ..cfg.clone()
            };
            let r = grad_check(entry.kernel.as_ref(), &point, &local)?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(SuiteResult {
            kernel: entry.kernel.name(),
            points,
            worst_rel_error: worst,
            pass: worst <= cfg.tol,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::matmul_backward;

    struct Sabotaged;

    impl Differentiable for Sabotaged {
        fn name(&self) -> String {
            "matmul_sabotaged".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Matmul.forward(inputs)
        }
        fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
            let (ga, gb) = matmul_backward(&inputs[0], &inputs[1], g)?;
            Ok(vec![ga.map(|v| 1.01 * v), gb.map(|v| 1.01 * v)])
        }
    }

    struct Blowup;

    impl Differentiable for Blowup {
        fn name(&self) -> String {
            "blowup".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Ok(inputs[0].map(|v| 1.0 / v))
        }
        fn backward(&self, inputs: &[Tensor], _g: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![inputs[0].clone()])
        }
    }

    #[test]
    fn huber_linear_branch_passes_tight_tolerance() {
        let cfg = GradCheckConfig {
            tol: 1e-6,
            ..Default::default()
        };
        let point = [Tensor::scalar(2.0), Tensor::scalar(0.0)];
        let r = grad_check(&HuberLoss { delta: 1.0 }, &point, &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        let grads = HuberLoss { delta: 1.0 }
            .backward(&point, &Tensor::scalar(1.0))
            .unwrap();
        assert_eq!(grads[0].value(), 1.0);
    }

    #[test]
    fn matmul_random_point_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = [normal(&[4, 3], &mut rng), normal(&[3, 2], &mut rng)];
        let r = grad_check(&Matmul, &point, &GradCheckConfig::default()).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.probes, 18);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = [normal(&[4, 3], &mut rng), normal(&[3, 2], &mut rng)];
        let r = grad_check(&Sabotaged, &point, &GradCheckConfig::default()).unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_error > 5e-3);
    }

    #[test]
    fn non_finite_forward_is_an_evaluation_error() {
        let point = [Tensor::vector(vec![1.0, 0.0])];
        let err = grad_check(&Blowup, &point, &GradCheckConfig::default()).unwrap_err();
        match err {
            StapError::Evaluation { location, .. } => assert!(location.contains("index 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let cfg = GradCheckConfig {
            step: 1e-2,
            ..Default::default()
        };
        let point = [Tensor::scalar(2.0), Tensor::scalar(0.0)];
        assert!(grad_check(&HuberLoss { delta: 1.0 }, &point, &cfg).is_err());
    }
}
