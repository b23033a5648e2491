//! Closed-form arithmetic-cost accounting for every canceler architecture.
//!
//! Running a canceler in real time costs a fixed number of floating-point
//! operations per received sample plus a fixed number of stored parameters.
//! Both follow from the architecture alone, so this module computes them
//! analytically instead of instrumenting the execution path — which also
//! lets it price the complex-valued structures (`cv_tdnn`, `lwgs`, `mwgs`)
//! that the training engine does not implement.
//!
//! # Counting conventions
//!
//! All figures count *real* floating-point operations per output sample:
//!
//! * real multiply 1, real add 1 — so a length-`n` real dot product costs
//!   `2n−1` and adding a bias brings a real neuron to `2n` plus its
//!   activation;
//! * a complex multiply-accumulate costs 10 (four real multiplies, four
//!   additions to form and combine the products, two to accumulate), and a
//!   bare complex add costs 2 — so an `M`-tap complex FIR costs `10M−2`,
//!   the first tap having nothing to accumulate onto;
//! * activations per evaluation: identity 0, ReLU 1, sigmoid 4, tanh 6, and
//!   the split complex ReLU 8;
//! * forming input features (delay lines, polynomial basis monomials) is
//!   not charged — the same convention the published reference figures use,
//!   since those values are shared across taps and stages.
//!
//! The two-stage cancelers always include the linear FIR stage in their
//! totals. A network stage runs beside the linear filter and its output is
//! combined with one complex add (+2); the polynomial stage extends the
//! linear filter's own accumulation chain, so no combine is charged.

use crate::architectures::ArchitectureConfig;
use crate::nn_engine::Activation;
use crate::poly_canceler::PolyBasisSpec;
use crate::Result;

/// Per-evaluation cost of the split complex ReLU (real and imaginary parts
/// rectified independently). Only the complexity-only architectures use it.
pub const COMPLEX_RELU_FLOPS: usize = 8;

/// Real-operation cost of one activation evaluation.
pub fn flops_per_activation(kind: Activation) -> usize {
    match kind {
        Activation::Linear => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 4,
        Activation::Tanh => 6,
    }
}

/// Arithmetic cost of one canceler: stored parameters (real-valued count;
/// complex coefficients count as two) and real FLOPs per cancelled sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    /// Stored real parameters.
    pub params: usize,
    /// Real floating-point operations per output sample.
    pub flops: usize,
}

/// Linear FIR stage: `M` complex taps.
fn linear_cost(memory: usize) -> ComplexityReport {
    ComplexityReport {
        params: 2 * memory,
        flops: 10 * memory - 2,
    }
}

/// Real dense layer, `n_in → n_out`.
fn dense_cost(n_in: usize, n_out: usize, activation: Activation) -> ComplexityReport {
    ComplexityReport {
        params: n_out * (n_in + 1),
        flops: n_out * (2 * n_in - 1) + flops_per_activation(activation) * n_out + n_out,
    }
}

/// Simple recurrent layer, one time step: every neuron consumes the `n_in`
/// inputs and the `n_h` previous states.
fn recurrent_step_cost(n_in: usize, n_h: usize, activation: Activation) -> ComplexityReport {
    ComplexityReport {
        params: n_h * (n_in + n_h + 1),
        flops: n_h * (2 * n_in + 2 * n_h - 1) + flops_per_activation(activation) * n_h + n_h,
    }
}

/// Valid 2-D convolution producing `b·c` positions for each of `l` maps,
/// with `r·s·z`-element kernels.
fn conv_cost(
    l: usize,
    r: usize,
    s: usize,
    z: usize,
    b: usize,
    c: usize,
    activation: Activation,
) -> ComplexityReport {
    let positions = b * c * l;
    ComplexityReport {
        params: l * (r * s * z + 1),
        flops: positions * (2 * r * s * z - 1)
            + flops_per_activation(activation) * positions
            + positions,
    }
}

fn add(a: ComplexityReport, b: ComplexityReport) -> ComplexityReport {
    ComplexityReport {
        params: a.params + b.params,
        flops: a.flops + b.flops,
    }
}

/// Computes the full per-sample cost of an architecture, linear stage
/// included.
pub fn complexity_of(arch: &ArchitectureConfig) -> Result<ComplexityReport> {
    arch.validate()?;
    let linear = linear_cost(arch.memory());

    let report = match arch {
        ArchitectureConfig::Linear { .. } => linear,

        ArchitectureConfig::Polynomial { order, memory } => {
            // The nonlinear basis functions feed the same accumulation chain
            // as the linear taps: one fused complex FIR over M·(K+1) basis
            // values, so the nonlinear part adds exactly 10·M·K FLOPs.
            let kinds = PolyBasisSpec {
                order: *order,
                memory: *memory,
                ..PolyBasisSpec::default()
            }
            .kinds_per_tap();
            ComplexityReport {
                params: linear.params + 2 * memory * kinds,
                flops: linear.flops + 10 * memory * kinds,
            }
        }

        ArchitectureConfig::Hcrnn {
            maps,
            kernel_rows,
            kernel_cols,
            kernel_depth,
            rec_units,
            conv_activation,
            rec_activation,
            ..
        } => {
            let (b, c) = arch.conv_output_dims().expect("conv kind");
            let conv = conv_cost(
                *maps,
                *kernel_rows,
                *kernel_cols,
                *kernel_depth,
                b,
                c,
                *conv_activation,
            );
            // The recurrence advances one step per received sample; its
            // input row is the C·L reshaped feature vector.
            let rec = recurrent_step_cost(c * maps, *rec_units, *rec_activation);
            let out = dense_cost(*rec_units, 2, Activation::Linear);
            combined_with_linear(add(add(conv, rec), out), linear)
        }

        ArchitectureConfig::Hcrdnn {
            maps,
            kernel_rows,
            kernel_cols,
            kernel_depth,
            rec_units,
            dense_units,
            conv_activation,
            rec_activation,
            dense_activation,
            ..
        } => {
            let (b, c) = arch.conv_output_dims().expect("conv kind");
            let conv = conv_cost(
                *maps,
                *kernel_rows,
                *kernel_cols,
                *kernel_depth,
                b,
                c,
                *conv_activation,
            );
            let rec = recurrent_step_cost(c * maps, *rec_units, *rec_activation);
            let dense = dense_cost(*rec_units, *dense_units, *dense_activation);
            let out = dense_cost(*dense_units, 2, Activation::Linear);
            combined_with_linear(add(add(add(conv, rec), dense), out), linear)
        }

        ArchitectureConfig::RvTdnn {
            memory,
            hidden,
            activation,
        } => {
            let mut nn = ComplexityReport { params: 0, flops: 0 };
            let mut width = 2 * memory;
            for &h in hidden {
                nn = add(nn, dense_cost(width, h, *activation));
                width = h;
            }
            nn = add(nn, dense_cost(width, 2, Activation::Linear));
            combined_with_linear(nn, linear)
        }

        ArchitectureConfig::Rnn {
            hidden, activation, ..
        } => {
            // Every layer, the 2-neuron output included, is priced as one
            // recurrent step; the output layer is then corrected back to a
            // plain dense layer by removing its fictitious n_out×n_out
            // state matrix (n_out² params, 2·n_out² FLOPs).
            let mut nn = ComplexityReport { params: 0, flops: 0 };
            let mut width = 2;
            for &h in hidden {
                nn = add(nn, recurrent_step_cost(width, h, *activation));
                width = h;
            }
            nn = add(nn, recurrent_step_cost(width, 2, Activation::Linear));
            nn.params -= 2 * 2;
            nn.flops -= 2 * 2 * 2;
            combined_with_linear(nn, linear)
        }

        ArchitectureConfig::CvTdnn { memory, hidden } => {
            // Complex-valued dense stack, M inputs to one complex output.
            // A complex neuron with n inputs costs 10n (n complex MACs, the
            // bias folding into the chain) plus its activation.
            let mut nn = ComplexityReport { params: 0, flops: 0 };
            let mut width = *memory;
            for &h in hidden {
                nn = add(
                    nn,
                    ComplexityReport {
                        params: 2 * (width * h + h),
                        flops: 10 * width * h + COMPLEX_RELU_FLOPS * h,
                    },
                );
                width = h;
            }
            nn = add(
                nn,
                ComplexityReport {
                    params: 2 * (width + 1),
                    flops: 10 * width,
                },
            );
            combined_with_linear(nn, linear)
        }

        ArchitectureConfig::Lwgs { n_input, n_hidden } => {
            // Ladder-wise grid: hidden neuron j (1-based) sees j lattice
            // inputs; the single complex output neuron sees all n_input
            // delay-line values. Complex arithmetic throughout.
            let fan_in_total: usize = (1..=*n_hidden).sum();
            let nn = ComplexityReport {
                params: 2 * (fan_in_total + n_input + n_hidden + 1),
                flops: 10 * (fan_in_total + n_input) + COMPLEX_RELU_FLOPS * n_hidden,
            };
            combined_with_linear(nn, linear)
        }

        ArchitectureConfig::Mwgs {
            n_input,
            n_hidden,
            window,
        } => {
            // Moving-window grid: the first hidden neuron sees the full
            // window once; each of the remaining n_hidden−1 sees `window`
            // inputs; the complex output sees the n_input delay line plus
            // all n_hidden hidden outputs.
            let hidden_fan_in = window * (n_hidden - 1) + n_hidden;
            let nn = ComplexityReport {
                params: 2 * (n_input + window * (n_hidden - 1) + 2 * n_hidden + 1),
                flops: 10 * (n_input + hidden_fan_in) + COMPLEX_RELU_FLOPS * n_hidden,
            };
            combined_with_linear(nn, linear)
        }
    };
    Ok(report)
}

/// A network stage runs in parallel with the linear FIR; combining the two
/// replicas costs one complex add.
fn combined_with_linear(nn: ComplexityReport, linear: ComplexityReport) -> ComplexityReport {
    ComplexityReport {
        params: nn.params + linear.params,
        flops: nn.flops + linear.flops + 2,
    }
}

/// Signed percentage change of `value` relative to `baseline`
/// (negative = cheaper than the baseline).
pub fn percent_change(value: usize, baseline: usize) -> f64 {
    (value as f64 - baseline as f64) / baseline as f64 * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{build_network, preset, PRESET_NAMES};
    use proptest::prelude::*;

    fn report(name: &str) -> ComplexityReport {
        complexity_of(&preset(name).unwrap().arch).unwrap()
    }

    #[test]
    fn linear_and_polynomial_costs() {
        assert_eq!(
            report("linear"),
            ComplexityReport { params: 26, flops: 128 }
        );
        let poly = report("poly_p5");
        assert_eq!(poly, ComplexityReport { params: 312, flops: 1558 });
        // The polynomial canceler is one fused FIR over M·(K+1) basis
        // functions: its FLOPs must match that closed form exactly.
        assert_eq!(poly.flops, 10 * 13 * (11 + 1) - 2);
    }

    #[test]
    fn named_presets_match_reference_costs() {
        let expected: [(&str, usize, usize); 12] = [
            ("poly_p5", 312, 1558),
            ("rv_tdnn", 550, 1156),
            ("rnn", 528, 1210),
            ("cv_tdnn", 238, 1166),
            ("lwgs", 162, 782),
            ("mwgs", 212, 1026),
            ("deep_rv_tdnn", 538, 1120),
            ("deep_rnn", 1420, 3106),
            ("deep_cv_tdnn", 228, 1106),
            ("hcrnn_opt", 229, 745),
            ("hcrdnn1", 248, 700),
            ("hcrdnn2", 223, 725),
        ];
        for (name, params, flops) in expected {
            assert_eq!(
                report(name),
                ComplexityReport { params, flops },
                "{name}"
            );
        }
    }

    /// Spot rows from the conv-recurrent design grids, including the two
    /// corner cases where a kernel spans both graph columns (S = 2).
    #[test]
    fn conv_recurrent_grid_spot_checks() {
        let hcrnn = |maps, kernel_rows, kernel_cols, rec_units| ArchitectureConfig::Hcrnn {
            memory: 13,
            maps,
            kernel_rows,
            kernel_cols,
            kernel_depth: 1,
            rec_units,
            conv_activation: Activation::Relu,
            rec_activation: Activation::Relu,
        };
        // (maps, rows, cols, rec units) → params, flops
        for (l, r, s, nhr, params, flops) in [
            (2, 4, 1, 6, 116, 640),
            (2, 12, 2, 9, 204, 569),
            (3, 12, 1, 9, 229, 745),
            (3, 12, 2, 10, 263, 734),
        ] {
            assert_eq!(
                complexity_of(&hcrnn(l, r, s, nhr)).unwrap(),
                ComplexityReport { params, flops },
                "hcrnn l={l} r={r} s={s} nhr={nhr}"
            );
        }

        let hcrdnn = |maps, kernel_rows, rec_units, dense_units| ArchitectureConfig::Hcrdnn {
            memory: 13,
            maps,
            kernel_rows,
            kernel_cols: 1,
            kernel_depth: 1,
            rec_units,
            dense_units,
            conv_activation: Activation::Relu,
            rec_activation: Activation::Relu,
            dense_activation: Activation::Relu,
        };
        for (l, r, nhr, nhd, params, flops) in [
            (2, 7, 5, 9, 166, 780),
            (2, 12, 7, 11, 248, 700),
            (3, 12, 5, 12, 223, 725),
            (3, 12, 6, 12, 253, 784),
        ] {
            assert_eq!(
                complexity_of(&hcrdnn(l, r, nhr, nhd)).unwrap(),
                ComplexityReport { params, flops },
                "hcrdnn l={l} r={r} nhr={nhr} nhd={nhd}"
            );
        }
    }

    /// The analytic parameter count of every trainable architecture must
    /// equal the literal number of weights in the network it builds, plus
    /// the 2M linear-stage taps.
    #[test]
    fn analytic_params_match_built_networks() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            if !p.arch.is_trainable_network() {
                continue;
            }
            let analytic = complexity_of(&p.arch).unwrap().params;
            let literal = build_network(&p.arch, 0).unwrap().num_params();
            assert_eq!(analytic, literal + 2 * p.arch.memory(), "{name}");
        }
    }

    #[test]
    fn percent_change_is_signed() {
        // −813/1558 → −52.18% at two decimals.
        let d = percent_change(745, 1558);
        assert_eq!((d * 100.0).round() / 100.0, -52.18);
        assert_eq!(percent_change(1558, 1558), 0.0);
        assert_eq!(percent_change(2000, 1000), 100.0);
    }

    fn hcrnn_strategy() -> impl Strategy<Value = ArchitectureConfig> {
        (1usize..=16, 1usize..=4, 1usize..=2, 1usize..=12).prop_flat_map(
            |(memory, maps, cols, rec)| {
                (1usize..=memory).prop_map(move |rows| ArchitectureConfig::Hcrnn {
                    memory,
                    maps,
                    kernel_rows: rows,
                    kernel_cols: cols,
                    kernel_depth: 1,
                    rec_units: rec,
                    conv_activation: Activation::Relu,
                    rec_activation: Activation::Tanh,
                })
            },
        )
    }

    fn dense_kind_strategy() -> impl Strategy<Value = ArchitectureConfig> {
        (
            1usize..=16,
            prop::collection::vec(1usize..=24, 1..=3),
            prop::bool::ANY,
        )
            .prop_map(|(memory, hidden, recurrent)| {
                if recurrent {
                    ArchitectureConfig::Rnn {
                        memory,
                        hidden,
                        activation: Activation::Tanh,
                    }
                } else {
                    ArchitectureConfig::RvTdnn {
                        memory,
                        hidden,
                        activation: Activation::Relu,
                    }
                }
            })
    }

    proptest! {
        /// Property: for every buildable architecture, the closed-form
        /// parameter count equals literal weight enumeration.
        #[test]
        fn params_formula_matches_weight_count_conv(arch in hcrnn_strategy()) {
            let analytic = complexity_of(&arch).unwrap().params;
            let literal = build_network(&arch, 0).unwrap().num_params();
            prop_assert_eq!(analytic, literal + 2 * arch.memory());
        }

        #[test]
        fn params_formula_matches_weight_count_dense(arch in dense_kind_strategy()) {
            let analytic = complexity_of(&arch).unwrap().params;
            let literal = build_network(&arch, 0).unwrap().num_params();
            prop_assert_eq!(analytic, literal + 2 * arch.memory());
        }
    }
}
