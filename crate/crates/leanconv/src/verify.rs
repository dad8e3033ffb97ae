//! Seeded randomized verification suites: every kernel path against the
//! materialized dense operator, adjoint and gradient identities, separable
//! composition, and the derivative-stencil properties. Each suite reports its
//! worst-case relative error against a fixed tolerance.

use crate::kernels::{
    apply, apply_reference, backward, transpose_spec, KernelPath, TileConfig,
};
use crate::ops::{Direction, LeanConvSpec, StencilKind};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Layout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn new(name: &str, cases: usize, max_rel_err: f64, tolerance: f64) -> Self {
        SuiteReport {
            name: name.to_string(),
            cases,
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        }
    }
}

/// Perturbation knob for the sensitivity check: flips one weight in the
/// middle of the named suite so that a correct harness must fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultInjection {
    Oracle,
    Adjoint,
    Gradient,
}

/// Apply the exact dense operator, logically indexed, as the oracle.
fn apply_dense<S: Scalar>(spec: &LeanConvSpec<S>, x: &FeatureMap<S>) -> FeatureMap<S> {
    let (h, w) = (x.height(), x.width());
    let hw = h * w;
    let m = spec.materialize_dense(h, w).expect("oracle sizes stay under the guard");
    let cols = spec.c_in * hw;
    let mut out = FeatureMap::zeros_with_layout(x.batch(), spec.c_out, h, w, x.layout());
    let mut xf = vec![S::zero(); cols];
    for b in 0..x.batch() {
        for i in 0..spec.c_in {
            for y in 0..h {
                for xx in 0..w {
                    xf[i * hw + y * w + xx] = x.get(b, i, y, xx);
                }
            }
        }
        for o in 0..spec.c_out {
            for y in 0..h {
                for xx in 0..w {
                    let row = o * hw + y * w + xx;
                    let mut acc = S::zero();
                    for (c, &v) in xf.iter().enumerate() {
                        acc += m[row * cols + c] * v;
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

fn rel_err_map<S: Scalar>(got: &FeatureMap<S>, want: &FeatureMap<S>) -> f64 {
    let scale = want
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.to_f64().abs()))
        .max(1e-30);
    let mut worst = 0.0f64;
    for b in 0..want.batch() {
        for c in 0..want.channels() {
            for y in 0..want.height() {
                for x in 0..want.width() {
                    let d = (got.get(b, c, y, x).to_f64() - want.get(b, c, y, x).to_f64()).abs();
                    worst = worst.max(d / scale);
                }
            }
        }
    }
    worst
}

struct CasePlan {
    stencil: StencilKind,
    group_pick: usize,
    with_pointwise: bool,
}

fn case_plans() -> Vec<CasePlan> {
    let stencils = [
        StencilKind::Full9,
        StencilKind::Five,
        StencilKind::Three1D(Direction::Horizontal),
        StencilKind::Three1D(Direction::Vertical),
        StencilKind::PointwiseOnly,
    ];
    let mut plans = Vec::new();
    for (i, &stencil) in stencils.iter().enumerate() {
        for group_pick in 0..4 {
            plans.push(CasePlan { stencil, group_pick, with_pointwise: (i + group_pick) % 4 != 3 });
        }
    }
    plans
}

fn random_case<S: Scalar>(
    rng: &mut ChaCha8Rng,
    plan: &CasePlan,
) -> (LeanConvSpec<S>, FeatureMap<S>) {
    let c = [4usize, 8, 16][rng.gen_range(0..3)];
    // group picks: 1, 4, 8 (clamped), c_in
    let g = match plan.group_pick {
        0 => 1,
        1 => 4.min(c),
        2 => 8.min(c),
        _ => c,
    };
    let spec = LeanConvSpec::random(rng, c, c, g, plan.stencil, plan.with_pointwise)
        .expect("generated dims are always divisible");
    let b = rng.gen_range(1..=4);
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let layout = match plan.stencil {
        StencilKind::Three1D(Direction::Vertical) => Layout::HeightFastest,
        StencilKind::Three1D(Direction::Horizontal) => Layout::WidthFastest,
        _ => {
            if rng.gen_bool(0.5) {
                Layout::WidthFastest
            } else {
                Layout::HeightFastest
            }
        }
    };
    let x = FeatureMap::from_fn(b, c, h, w, layout, |_, _, _, _| {
        S::from_f64(rng.gen_range(-1.0..1.0))
    });
    (spec, x)
}

/// All three kernel paths against the dense oracle over >=200 random cases.
pub fn oracle_suite<S: Scalar>(
    seed: u64,
    tolerance: f64,
    name: &str,
    fault: bool,
) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = case_plans();
    let tile = TileConfig::default();
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for round in 0..10 {
        for plan in &plans {
            let (mut spec, x) = random_case::<S>(&mut rng, plan);
            let want = apply_dense(&spec, &x);
            if fault && round == 5 {
                // sensitivity hook: a perturbed weight must be caught
                if let Some(w) = spec.spatial.first_mut() {
                    *w += S::from_f64(0.5);
                } else if let Some(pw) = spec.pointwise.as_mut() {
                    pw[0] += S::from_f64(0.5);
                }
            }
            for path in [KernelPath::Reference, KernelPath::ShiftIm2col, KernelPath::FusedTiled] {
                let got = apply(&spec, &x, path, &tile).expect("case construction is valid");
                worst = worst.max(rel_err_map(&got, &want));
            }
            cases += 1;
        }
    }
    SuiteReport::new(name, cases, worst, tolerance)
}

/// `<A x, z> == <x, A^T z>` over random operators.
pub fn adjoint_suite(seed: u64, fault: bool) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = case_plans();
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for (i, plan) in plans.iter().cycle().take(60).enumerate() {
        let (spec, x) = random_case::<f64>(&mut rng, plan);
        let mut t = transpose_spec(&spec);
        if fault && i == 30 {
            if let Some(w) = t.spatial.first_mut() {
                *w += 0.5;
            } else if let Some(pw) = t.pointwise.as_mut() {
                pw[0] += 0.5;
            }
        }
        let z = FeatureMap::from_fn(
            x.batch(),
            spec.c_out,
            x.height(),
            x.width(),
            x.layout(),
            |_, _, _, _| rng.gen_range(-1.0..1.0),
        );
        let ax = apply_reference(&spec, &x).unwrap();
        let atz = apply_reference(&t, &z).unwrap();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for b in 0..x.batch() {
            for c in 0..spec.c_out {
                for y in 0..x.height() {
                    for xx in 0..x.width() {
                        lhs += ax.get(b, c, y, xx) * z.get(b, c, y, xx);
                    }
                }
            }
            for c in 0..spec.c_in {
                for y in 0..x.height() {
                    for xx in 0..x.width() {
                        rhs += x.get(b, c, y, xx) * atz.get(b, c, y, xx);
                    }
                }
            }
        }
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        cases += 1;
    }
    SuiteReport::new("adjoint", cases, worst, 1e-10)
}

/// Analytic weight/input gradients against central differences on a
/// subsample of coordinates per case.
pub fn gradient_suite(seed: u64, fault: bool) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = case_plans();
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for (i, plan) in plans.iter().cycle().take(40).enumerate() {
        let c = 4;
        let g = match plan.group_pick {
            0 => 1,
            1 | 2 => 2,
            _ => c,
        };
        let spec =
            LeanConvSpec::<f64>::random(&mut rng, c, c, g, plan.stencil, plan.with_pointwise)
                .unwrap();
        let x = FeatureMap::from_fn(2, c, 4, 5, Layout::WidthFastest, |_, _, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let r = FeatureMap::from_fn(2, c, 4, 5, Layout::WidthFastest, |_, _, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let loss = |s: &LeanConvSpec<f64>, xx: &FeatureMap<f64>| -> f64 {
            let out = apply_reference(s, xx).unwrap();
            out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = backward(&spec, &x, &r).unwrap();
        if fault && i == 20 {
            for w in grads.d_input.data_mut() {
                *w += 0.5;
            }
        }
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * step);
            worst = worst.max((analytic - fd).abs() / fd.abs().max(1.0));
        };
        // subsample a handful of coordinates of each gradient family
        for _ in 0..4 {
            if !spec.spatial.is_empty() {
                let k = rng.gen_range(0..spec.spatial.len());
                let mut sp = spec.clone();
                sp.spatial[k] += step;
                let mut sm = spec.clone();
                sm.spatial[k] -= step;
                check(grads.d_spatial[k], loss(&sp, &x), loss(&sm, &x));
            }
            if let Some(dpw) = &grads.d_pointwise {
                let k = rng.gen_range(0..dpw.len());
                let mut sp = spec.clone();
                sp.pointwise.as_mut().unwrap()[k] += step;
                let mut sm = spec.clone();
                sm.pointwise.as_mut().unwrap()[k] -= step;
                check(dpw[k], loss(&sp, &x), loss(&sm, &x));
            }
            let k = rng.gen_range(0..x.data().len());
            let mut xp = x.clone();
            xp.data_mut()[k] += step;
            let mut xm = x.clone();
            xm.data_mut()[k] -= step;
            check(grads.d_input.data()[k], loss(&spec, &xp), loss(&spec, &xm));
        }
        cases += 1;
    }
    SuiteReport::new("gradient", cases, worst, 1e-6)
}

/// Horizontal-then-vertical 1D applications equal the explicit separable 3x3
/// oracle, and the layout is restored after the pair.
pub fn separable_suite(seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tile = TileConfig::default();
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for _ in 0..25 {
        // depth-wise so each channel composes independently
        let c = [2usize, 4, 8][rng.gen_range(0..3)];
        let kh =
            LeanConvSpec::<f64>::random(&mut rng, c, c, c, StencilKind::Three1D(Direction::Horizontal), false)
                .unwrap();
        let kv =
            LeanConvSpec::<f64>::random(&mut rng, c, c, c, StencilKind::Three1D(Direction::Vertical), false)
                .unwrap();
        let h = rng.gen_range(3..10);
        let w = rng.gen_range(3..10);
        let x = FeatureMap::from_fn(2, c, h, w, Layout::WidthFastest, |_, _, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let mid = apply(&kh, &x, KernelPath::FusedTiled, &tile).unwrap();
        let got = apply(&kv, &mid, KernelPath::FusedTiled, &tile).unwrap();
        assert_eq!(got.layout(), x.layout(), "layout must be restored after the pair");

        // explicit separable 3x3 oracle: u (vertical) outer v (horizontal),
        // composed with zero padding exactly as two 1D passes
        let mut want = FeatureMap::zeros_with_layout(2, c, h, w, x.layout());
        for b in 0..2 {
            for ch in 0..c {
                let v3 = kh.pair_weights(ch); // horizontal pair of channel ch
                let u3 = kv.pair_weights(ch);
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = 0.0;
                        for (uy, &uw) in u3.iter().enumerate() {
                            let sy = y + uy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for (vx, &vw) in v3.iter().enumerate() {
                                let sx = xx + vx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += uw * vw * x.get(b, ch, sy as usize, sx as usize);
                            }
                        }
                        want.set(b, ch, y as usize, xx as usize, acc);
                    }
                }
            }
        }
        worst = worst.max(rel_err_map(&got, &want));
        cases += 1;
    }
    SuiteReport::new("separable_composition", cases, worst, 1e-10)
}

/// The five-point stencil spans the first and second derivative operators:
/// exact on a ramp and a parabola at interior pixels.
pub fn derivative_suite() -> SuiteReport {
    let (h, w) = (8usize, 9usize);
    let mut worst = 0.0f64;

    // d/dx via (c2, c3) = (-1/2, 1/2) on f(x, y) = x: interior derivative 1
    let mut ddx = LeanConvSpec::<f64>::zeros(1, 1, 1, StencilKind::Five, true).unwrap();
    ddx.spatial[1] = -0.5;
    ddx.spatial[2] = 0.5;
    let ramp = FeatureMap::from_fn(1, 1, h, w, Layout::WidthFastest, |_, _, _, x| x as f64);
    let out = apply_reference(&ddx, &ramp).unwrap();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            worst = worst.max((out.get(0, 0, y, x) - 1.0).abs());
        }
    }

    // d2/dx2 via (c2, center, c3) = (1, -2, 1) on f(x, y) = x^2: interior 2
    let mut dxx = LeanConvSpec::<f64>::zeros(1, 1, 1, StencilKind::Five, true).unwrap();
    dxx.spatial[1] = 1.0;
    dxx.spatial[2] = 1.0;
    dxx.pointwise.as_mut().unwrap()[0] = -2.0;
    let parabola =
        FeatureMap::from_fn(1, 1, h, w, Layout::WidthFastest, |_, _, _, x| (x * x) as f64);
    let out = apply_reference(&dxx, &parabola).unwrap();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            worst = worst.max((out.get(0, 0, y, x) - 2.0).abs());
        }
    }

    // same along y with the vertical weights (c1, c4)
    let mut dyy = LeanConvSpec::<f64>::zeros(1, 1, 1, StencilKind::Five, true).unwrap();
    dyy.spatial[0] = 1.0;
    dyy.spatial[3] = 1.0;
    dyy.pointwise.as_mut().unwrap()[0] = -2.0;
    let parab_y =
        FeatureMap::from_fn(1, 1, h, w, Layout::WidthFastest, |_, _, y, _| (y * y) as f64);
    let out = apply_reference(&dyy, &parab_y).unwrap();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            worst = worst.max((out.get(0, 0, y, x) - 2.0).abs());
        }
    }

    SuiteReport::new("derivative_span", 3, worst, 1e-12)
}

/// A Five operator embedded into Full9 with zero mixed entries computes the
/// identical map: the cross is an exact restriction of the full stencil.
pub fn restriction_suite(seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    // Full9 off-center order: corners at 0, 2, 5, 7; cross at 1, 3, 4, 6.
    const CROSS_IN_FULL9: [usize; 4] = [1, 3, 4, 6];
    for _ in 0..20 {
        let c = [2usize, 4][rng.gen_range(0..2)];
        let g = [1, c][rng.gen_range(0..2)];
        let five = LeanConvSpec::<f64>::random(&mut rng, c, c, g, StencilKind::Five, true).unwrap();
        let mut nine = LeanConvSpec::<f64>::zeros(c, c, g, StencilKind::Full9, true).unwrap();
        nine.pointwise = five.pointwise.clone();
        let pairs = five.in_group_pairs();
        for pair in 0..pairs {
            for (q5, &q9) in CROSS_IN_FULL9.iter().enumerate() {
                nine.spatial[pair * 8 + q9] = five.spatial[pair * 4 + q5];
            }
        }
        let x = FeatureMap::from_fn(2, c, 6, 7, Layout::WidthFastest, |_, _, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let a = apply_reference(&five, &x).unwrap();
        let b = apply_reference(&nine, &x).unwrap();
        worst = worst.max(rel_err_map(&a, &b));
        cases += 1;
    }
    SuiteReport::new("five_restricts_full9", cases, worst, 1e-12)
}

/// Every suite in a fixed order (the order defines the CLI exit codes).
pub fn run_all(seed: u64, fault: Option<FaultInjection>) -> Vec<SuiteReport> {
    vec![
        oracle_suite::<f64>(seed, 1e-10, "oracle_f64", fault == Some(FaultInjection::Oracle)),
        oracle_suite::<f32>(seed ^ 0x5f32, 1e-4, "oracle_f32", false),
        adjoint_suite(seed ^ 0xad01, fault == Some(FaultInjection::Adjoint)),
        gradient_suite(seed ^ 0x6ead, fault == Some(FaultInjection::Gradient)),
        separable_suite(seed ^ 0x5e9a),
        derivative_suite(),
        restriction_suite(seed ^ 0xf17e),
    ]
}
