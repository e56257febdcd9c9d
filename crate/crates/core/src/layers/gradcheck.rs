//! Central finite-difference checks for analytic gradients.

use std::fmt;

use crate::error::Result;
use crate::tensor::{Rng, Shape, Tensor};

use super::{
    concat_channels, conv_backward, conv_forward, deconv_backward, deconv_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, split_channels, ConvLayer,
    DeconvLayer, MaxPoolLayer,
};

/// Gradients smaller than this are compared on an absolute scale.
///
/// Central differences at `eps = 1e-5` carry round-off of roughly
/// `2e-11 · |objective|`; for objectives of order 10 that is a few 1e-10,
/// so derivatives much below 1e-5 cannot be resolved to 1e-4 relative.
pub const ABS_FLOOR: f64 = 1e-5;

pub const DEFAULT_EPS: f64 = 1e-5;

/// One-sided slopes further apart than this (relative) mark a coordinate
/// whose ±eps interval straddles a ReLU or max-pool switch.
pub const KINK_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many elements per variable, chosen at random.
    /// `None` checks every element.
    pub max_samples_per_tensor: Option<usize>,
    /// Skip coordinates whose forward and backward one-sided differences
    /// disagree. Every variable enters the checked objectives linearly between
    /// switches, so away from a switch the two slopes agree to round-off.
    pub skip_kinks: bool,
    /// Multiplies analytic gradients by `1 + analytic_perturbation` before
    /// comparing. Negative control for the checker itself.
    #[doc(hidden)]
    pub analytic_perturbation: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: DEFAULT_EPS,
            max_samples_per_tensor: None,
            skip_kinks: true,
            analytic_perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(variable, element)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    /// Coordinates skipped because the finite difference crossed a switch.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let worst = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        GradCheckReport {
            max_rel_error: worst.max_rel_error,
            worst: worst.worst,
            worst_values: worst.worst_values,
            checked: self.checked + other.checked,
            kinks: self.kinks + other.kinks,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic[i]` with central differences of `objective` taken
/// with respect to `vars[i]`, for every variable.
pub fn check_gradients<F>(
    vars: &mut [Tensor],
    analytic: &[Tensor],
    opts: &GradCheckOptions,
    rng: &mut Rng,
    mut objective: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
        kinks: 0,
    };
    let base = objective(vars)?;
    for i in 0..vars.len() {
        vars[i].expect_same_shape(&analytic[i], "gradient check")?;
        let len = vars[i].len();
        let mut picks: Vec<usize> = (0..len).collect();
        if let Some(limit) = opts.max_samples_per_tensor {
            if limit < len {
                rng.shuffle(&mut picks);
                picks.truncate(limit);
                picks.sort_unstable();
            }
        }
        for j in picks {
            let orig = vars[i].data()[j];
            vars[i].data_mut()[j] = orig + opts.eps;
            let plus = objective(vars)?;
            vars[i].data_mut()[j] = orig - opts.eps;
            let minus = objective(vars)?;
            vars[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if opts.skip_kinks {
                let right = (plus - base) / opts.eps;
                let left = (base - minus) / opts.eps;
                if relative_error(right, left) > KINK_THRESHOLD {
                    report.kinks += 1;
                    continue;
                }
            }
            let a = analytic[i].data()[j] * (1.0 + opts.analytic_perturbation);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}

/// Layer families distinguished in gradient-check reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    Conv3,
    Conv1,
    MaxPoolS1,
    MaxPoolS2,
    Deconv,
    Relu,
    Concat,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv3,
        LayerKind::Conv1,
        LayerKind::MaxPoolS1,
        LayerKind::MaxPoolS2,
        LayerKind::Deconv,
        LayerKind::Relu,
        LayerKind::Concat,
    ];
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv3 => "conv3",
            LayerKind::Conv1 => "conv1",
            LayerKind::MaxPoolS1 => "maxpool(s1)",
            LayerKind::MaxPoolS2 => "maxpool(s2)",
            LayerKind::Deconv => "deconv",
            LayerKind::Relu => "relu",
            LayerKind::Concat => "concat",
        })
    }
}

/// A single layer instance together with its parameters.
#[derive(Debug, Clone)]
pub enum LayerUnderTest {
    Conv(ConvLayer),
    Deconv(DeconvLayer),
    MaxPool(MaxPoolLayer),
    Relu,
    /// Concatenates the checked input with `other`.
    Concat {
        other: Tensor,
    },
}

impl LayerUnderTest {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerUnderTest::Conv(c) if c.kernel() == 1 => LayerKind::Conv1,
            LayerUnderTest::Conv(_) => LayerKind::Conv3,
            LayerUnderTest::Deconv(_) => LayerKind::Deconv,
            LayerUnderTest::MaxPool(p) if p.stride() == 1 => LayerKind::MaxPoolS1,
            LayerUnderTest::MaxPool(_) => LayerKind::MaxPoolS2,
            LayerUnderTest::Relu => LayerKind::Relu,
            LayerUnderTest::Concat { .. } => LayerKind::Concat,
        }
    }

    /// Input followed by the layer's own differentiable operands.
    fn variables(&self, input: &Tensor) -> Vec<Tensor> {
        let mut vars = vec![input.clone()];
        match self {
            LayerUnderTest::Conv(c) => {
                vars.push(c.weight.clone());
                vars.push(c.bias.clone());
            }
            LayerUnderTest::Deconv(d) => vars.push(d.weight.clone()),
            LayerUnderTest::Concat { other } => vars.push(other.clone()),
            LayerUnderTest::MaxPool(_) | LayerUnderTest::Relu => {}
        }
        vars
    }

    fn forward(&self, vars: &[Tensor]) -> Result<Tensor> {
        match self {
            LayerUnderTest::Conv(_) => conv_forward(&vars[0], &vars[1], &vars[2]),
            LayerUnderTest::Deconv(_) => deconv_forward(&vars[0], &vars[1]),
            LayerUnderTest::MaxPool(p) => Ok(maxpool_forward(&vars[0], p)?.0),
            LayerUnderTest::Relu => Ok(relu_forward(&vars[0])),
            LayerUnderTest::Concat { .. } => concat_channels(&vars[0], &vars[1]),
        }
    }

    fn backward(&self, vars: &[Tensor], grad_output: &Tensor) -> Result<Vec<Tensor>> {
        Ok(match self {
            LayerUnderTest::Conv(_) => {
                let g = conv_backward(&vars[0], &vars[1], grad_output)?;
                vec![g.grad_input, g.grad_weight.unwrap(), g.grad_bias.unwrap()]
            }
            LayerUnderTest::Deconv(_) => {
                let g = deconv_backward(&vars[0], &vars[1], grad_output)?;
                vec![g.grad_input, g.grad_weight.unwrap()]
            }
            LayerUnderTest::MaxPool(p) => {
                let (_, ctx) = maxpool_forward(&vars[0], p)?;
                vec![maxpool_backward(&ctx, grad_output)?]
            }
            LayerUnderTest::Relu => vec![relu_backward(&vars[0], grad_output)?],
            LayerUnderTest::Concat { .. } => {
                let (a, b) = split_channels(grad_output, vars[0].shape().c)?;
                vec![a, b]
            }
        })
    }
}

/// Worst relative error between backward-pass gradients and central
/// differences, for the scalar `<r, layer(input)>` with a random probe `r`.
pub fn grad_check(
    layer: &LayerUnderTest,
    input: &Tensor,
    rng: &mut Rng,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut vars = layer.variables(input);
    let out_shape: Shape = layer.forward(&vars)?.shape();
    let probe = Tensor::randn(out_shape, rng, 1.0)?;
    let analytic = layer.backward(&vars, &probe)?;
    check_gradients(&mut vars, &analytic, opts, rng, |v| {
        layer.forward(v)?.dot(&probe)
    })
}

/// Distinct values 0.1 apart in random order, so no perturbation of size
/// `eps` can change which element wins a pooling window.
fn spaced_permutation(shape: Shape, rng: &mut Rng) -> Result<Tensor> {
    let mut vals: Vec<f64> = (0..shape.numel()).map(|v| v as f64 * 0.1).collect();
    rng.shuffle(&mut vals);
    Tensor::from_vec(shape, vals)
}

/// One randomized instance of every layer kind, checked exhaustively.
/// Channel counts follow the tiny preset's first two blocks.
pub fn layer_suite(
    rng: &mut Rng,
    opts: &GradCheckOptions,
) -> Result<Vec<(LayerKind, GradCheckReport)>> {
    let conv = |rng: &mut Rng, c_in: usize, c_out: usize, k: usize| -> Result<ConvLayer> {
        ConvLayer::new(
            Tensor::randn(
                Shape::new(c_out, c_in, k, k)?,
                rng,
                (2.0 / (c_in * k * k) as f64).sqrt(),
            )?,
            Tensor::randn(Shape::new(1, c_out, 1, 1)?, rng, 0.1)?,
        )
    };
    let mut out = Vec::with_capacity(LayerKind::ALL.len());
    for kind in LayerKind::ALL {
        let (layer, input) = match kind {
            LayerKind::Conv3 => (
                LayerUnderTest::Conv(conv(rng, 4, 8, 3)?),
                Tensor::randn(Shape::new(1, 4, 6, 6)?, rng, 1.0)?,
            ),
            LayerKind::Conv1 => (
                LayerUnderTest::Conv(conv(rng, 8, 1, 1)?),
                Tensor::randn(Shape::new(1, 8, 4, 4)?, rng, 1.0)?,
            ),
            LayerKind::MaxPoolS1 => (
                LayerUnderTest::MaxPool(MaxPoolLayer::new(1)?),
                spaced_permutation(Shape::new(1, 4, 6, 6)?, rng)?,
            ),
            LayerKind::MaxPoolS2 => (
                LayerUnderTest::MaxPool(MaxPoolLayer::new(2)?),
                spaced_permutation(Shape::new(1, 4, 6, 6)?, rng)?,
            ),
            LayerKind::Deconv => (
                LayerUnderTest::Deconv(DeconvLayer::new(Tensor::randn(
                    Shape::new(8, 8, 2, 2)?,
                    rng,
                    0.5,
                )?)?),
                Tensor::randn(Shape::new(1, 8, 3, 3)?, rng, 1.0)?,
            ),
            LayerKind::Relu => (
                LayerUnderTest::Relu,
                Tensor::randn(Shape::new(1, 4, 6, 6)?, rng, 1.0)?,
            ),
            LayerKind::Concat => (
                LayerUnderTest::Concat {
                    other: Tensor::randn(Shape::new(1, 8, 4, 4)?, rng, 1.0)?,
                },
                Tensor::randn(Shape::new(1, 4, 4, 4)?, rng, 1.0)?,
            ),
        };
        out.push((kind, grad_check(&layer, &input, rng, opts)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    fn conv(rng: &mut Rng, c_in: usize, c_out: usize, k: usize) -> ConvLayer {
        ConvLayer::new(
            Tensor::randn(shape(c_out, c_in, k, k), rng, 0.5).unwrap(),
            Tensor::randn(shape(1, c_out, 1, 1), rng, 0.5).unwrap(),
        )
        .unwrap()
    }

    fn check(layer: LayerUnderTest, input: Tensor, seed: u64) -> f64 {
        let mut rng = Rng::seed(seed);
        let report = grad_check(&layer, &input, &mut rng, &GradCheckOptions::default()).unwrap();
        assert_eq!(
            report.checked,
            layer
                .variables(&input)
                .iter()
                .map(Tensor::len)
                .sum::<usize>()
        );
        report.max_rel_error
    }

    #[test]
    fn conv3_matches_finite_differences() {
        let mut rng = Rng::seed(1);
        let layer = conv(&mut rng, 2, 3, 3);
        let x = Tensor::randn(shape(1, 2, 5, 5), &mut rng, 1.0).unwrap();
        let err = check(LayerUnderTest::Conv(layer), x, 10);
        assert!(err < 1e-6, "conv3 rel error {err}");
    }

    #[test]
    fn conv1_matches_finite_differences() {
        let mut rng = Rng::seed(2);
        let layer = conv(&mut rng, 3, 2, 1);
        let x = Tensor::randn(shape(2, 3, 3, 4), &mut rng, 1.0).unwrap();
        let err = check(LayerUnderTest::Conv(layer), x, 11);
        assert!(err < 1e-6, "conv1 rel error {err}");
    }

    #[test]
    fn deconv_matches_finite_differences() {
        let mut rng = Rng::seed(3);
        let w = Tensor::randn(shape(2, 3, 2, 2), &mut rng, 0.5).unwrap();
        let x = Tensor::randn(shape(1, 2, 3, 3), &mut rng, 1.0).unwrap();
        let err = check(LayerUnderTest::Deconv(DeconvLayer::new(w).unwrap()), x, 12);
        assert!(err < 1e-6, "deconv rel error {err}");
    }

    #[test]
    fn maxpool_matches_finite_differences() {
        // A permutation of 0..25 keeps every pair of values 1 apart, far
        // outside the eps window, so no argmax flips under perturbation.
        let mut vals: Vec<f64> = (0..25).map(f64::from).collect();
        Rng::seed(4).shuffle(&mut vals);
        let x = Tensor::from_vec(shape(1, 1, 5, 5), vals).unwrap();
        let s1 = LayerUnderTest::MaxPool(MaxPoolLayer::new(1).unwrap());
        let err = check(s1, x, 13);
        assert!(err < 1e-6, "maxpool s1 rel error {err}");

        let mut vals: Vec<f64> = (0..36).map(|v| f64::from(v) * 0.1).collect();
        Rng::seed(5).shuffle(&mut vals);
        let x = Tensor::from_vec(shape(1, 1, 6, 6), vals).unwrap();
        let err = check(
            LayerUnderTest::MaxPool(MaxPoolLayer::new(2).unwrap()),
            x,
            14,
        );
        assert!(err < 1e-6, "maxpool s2 rel error {err}");
    }

    #[test]
    fn relu_and_concat_match_finite_differences() {
        let mut rng = Rng::seed(6);
        let x = Tensor::randn(shape(1, 2, 4, 4), &mut rng, 1.0).unwrap();
        assert!(check(LayerUnderTest::Relu, x.clone(), 15) < 1e-6);
        let other = Tensor::randn(shape(1, 3, 4, 4), &mut rng, 1.0).unwrap();
        assert!(check(LayerUnderTest::Concat { other }, x, 16) < 1e-6);
    }

    #[test]
    fn suite_covers_every_kind() {
        let report = layer_suite(&mut Rng::seed(9), &GradCheckOptions::default()).unwrap();
        let kinds: Vec<LayerKind> = report.iter().map(|(k, _)| *k).collect();
        assert_eq!(kinds, LayerKind::ALL);
        for (kind, r) in report {
            assert!(r.max_rel_error < 1e-6, "{kind}: {r:?}");
        }
    }

    #[test]
    fn straddled_relu_switch_is_skipped() {
        // 3e-6 sits inside the ±1e-5 window around the ReLU switch.
        let x = Tensor::from_vec(shape(1, 1, 1, 2), vec![3e-6, 0.7]).unwrap();
        let mut rng = Rng::seed(1);
        let report = grad_check(
            &LayerUnderTest::Relu,
            &x,
            &mut rng,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!((report.checked, report.kinks), (1, 1));
        assert!(report.max_rel_error < 1e-8);
        let strict = GradCheckOptions {
            skip_kinks: false,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&LayerUnderTest::Relu, &x, &mut Rng::seed(1), &strict).unwrap();
        assert_eq!((report.checked, report.kinks), (2, 0));
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn perturbed_analytic_gradient_is_caught() {
        let mut rng = Rng::seed(7);
        let layer = LayerUnderTest::Conv(conv(&mut rng, 1, 1, 3));
        let x = Tensor::randn(shape(1, 1, 4, 4), &mut rng, 1.0).unwrap();
        let opts = GradCheckOptions {
            analytic_perturbation: 0.01,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&layer, &x, &mut rng, &opts).unwrap();
        assert!(report.max_rel_error > 1e-3);
    }

    #[test]
    fn sampling_limits_checked_elements() {
        let mut rng = Rng::seed(8);
        let layer = LayerUnderTest::Conv(conv(&mut rng, 2, 2, 3));
        let x = Tensor::randn(shape(1, 2, 4, 4), &mut rng, 1.0).unwrap();
        let opts = GradCheckOptions {
            max_samples_per_tensor: Some(5),
            ..GradCheckOptions::default()
        };
        let report = grad_check(&layer, &x, &mut rng, &opts).unwrap();
        // input 32 -> 5, weight 36 -> 5, bias 2 -> 2
        assert_eq!(report.checked, 12);
    }
}
