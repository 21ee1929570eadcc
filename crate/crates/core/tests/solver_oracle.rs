//! Mild solver against the fractional Adams stepper, and properties of the
//! fixed-point machinery on the heat-equation preset.

use fracctl::mittag::ml;
use fracctl::model::{uniform_grid, NonlinearitySpec, NonlocalPoint, NonlocalSpec, SpectralModel, Trajectory, Weight};
use fracctl::oracle::adams_pece;
use fracctl::solver::{picard_solve, solve_mild, theta_map, FixedPointConfig, GSource, Synthesizer};
use fracctl::varmin::{assemble_gramian, control_value, eval_hn, initial_offset, minimize_j, ControlLaw, Smoothing};
use nalgebra::{DMatrix, DVector};

struct Preset {
    model: SpectralModel,
    g: NonlocalSpec,
    f: NonlinearitySpec,
}

fn preset() -> Preset {
    let y0 = DVector::from_vec(vec![1.0, 0.5, -0.5, 0.25, 0.0, 0.1]);
    let yb = DVector::from_vec(vec![0.3, -0.2, 0.1]);
    let model = SpectralModel::heat1d(6, 2.0 / 3.0, 1.0, &[1, 2, 3], y0, yb).unwrap();
    let g = NonlocalSpec::new(0.5, vec![NonlocalPoint { t: 0.6, weight: Weight::Scalar(0.1) }], &model).unwrap();
    Preset { model, g, f: NonlinearitySpec::sine(6, 0.5, 3.0) }
}

fn stepper_gap(p: &Preset, law: &ControlLaw, steps: usize) -> f64 {
    let z = Trajectory::constant(uniform_grid(1.0, steps), p.model.y0()).unwrap();
    let y = solve_mild(&p.model, &p.g, &p.f, &|s| control_value(law, s).unwrap(), GSource::Frozen(&z), steps).unwrap();
    let start = initial_offset(&p.model, &p.g, &z, Smoothing::Infinite).unwrap();
    let rhs = |s: f64, y: &DVector<f64>| p.model.bmat() * control_value(law, s).unwrap() + p.f.eval(s, y);
    let reference = adams_pece(&p.model, &rhs, &start, steps).unwrap();
    y.sup_distance(&reference).unwrap()
}

#[test]
fn mild_solver_converges_to_the_adams_stepper() {
    let p = preset();
    let law = ControlLaw::new(&p.model, DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
    let gaps: Vec<f64> = [64, 128, 256].iter().map(|&t| stepper_gap(&p, &law, t)).collect();
    for w in gaps.windows(2) {
        assert!(w[0] / w[1] >= 1.7, "{gaps:?}");
    }
    assert!(gaps[2] * 256.0 <= 5.0, "{gaps:?}");
}

#[test]
fn stepper_reproduces_mittag_leffler_decay() {
    let m = SpectralModel::new(2.0 / 3.0, 1.0, DVector::from_element(1, 1.0), DMatrix::identity(1, 1), &[1], DVector::zeros(1), DVector::zeros(1)).unwrap();
    let exact = ml(2.0 / 3.0, 1.0, -1.0).unwrap();
    let mut prev = f64::INFINITY;
    for steps in [64, 256, 1024] {
        let y = adams_pece(&m, &|_, y| DVector::zeros(y.len()), &DVector::from_element(1, 1.0), steps).unwrap();
        let err = (y.final_state()[0] - exact).abs();
        assert!(err < prev);
        prev = err;
    }
    assert!(prev < 1e-4, "{prev:e}");
}

#[test]
fn one_map_application_is_the_composition_of_its_stages() {
    let p = preset();
    let gram = assemble_gramian(&p.model).unwrap();
    let cfg = FixedPointConfig { grid_t: 64, ..FixedPointConfig::new(1e-2) };
    let z = Trajectory::constant(uniform_grid(1.0, 64), &DVector::zeros(6)).unwrap();
    let (y, law) = theta_map(&p.model, &p.g, &p.f, &cfg, &gram, &z).unwrap();

    let h = eval_hn(&p.model, &p.g, &p.f, &z, Smoothing::Infinite).unwrap();
    let phi = minimize_j(&gram, &h, cfg.epsilon).unwrap().phi_hat;
    assert_eq!(law.phi_hat, phi);
    let staged = solve_mild(&p.model, &p.g, &p.f, &|s| control_value(&law, s).unwrap(), GSource::Frozen(&z), 64).unwrap();
    assert_eq!(staged, y);
}

#[test]
fn nonlocal_term_never_reads_the_early_history() {
    let p = preset();
    let gram = assemble_gramian(&p.model).unwrap();
    let cfg = FixedPointConfig { grid_t: 64, smoothing: Smoothing::Finite(4), ..FixedPointConfig::new(1e-2) };
    let synth = Synthesizer::new(&p.model, &p.g, &p.f, &gram, cfg).unwrap();
    let z0 = synth.initial_guess().unwrap();
    let mut perturbed = z0.clone();
    for (i, &t) in z0.grid().iter().enumerate() {
        if t < p.g.delta() {
            for k in 0..6 {
                perturbed.values_mut()[(k, i)] += 3.0 * (k as f64 + t).sin();
            }
        }
    }
    let a = initial_offset(&p.model, &p.g, &z0, cfg.smoothing).unwrap();
    let b = initial_offset(&p.model, &p.g, &perturbed, cfg.smoothing).unwrap();
    assert_eq!(a, b);
    // Without the semilinear term the whole map output is unaffected.
    let linear = NonlinearitySpec::zero();
    let synth = Synthesizer::new(&p.model, &p.g, &linear, &gram, cfg).unwrap();
    assert_eq!(synth.theta(&z0).unwrap().trajectory, synth.theta(&perturbed).unwrap().trajectory);
}

#[test]
fn semilinear_runs_stay_in_the_ball_and_reach_the_target() {
    let p = preset();
    let gram = assemble_gramian(&p.model).unwrap();
    let mut errors = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3] {
        let cfg = FixedPointConfig { grid_t: 128, ..FixedPointConfig::new(eps) };
        let r = picard_solve(&p.model, &p.g, &p.f, &cfg, &gram).unwrap();
        assert!(r.converged);
        assert!(r.iterates_bounded(), "{:?} vs {:?}", r.iterate_sup_norms, r.iterate_bounds);
        assert!(r.final_error <= eps + 10.0 * r.identity_residual, "eps={eps}: {} ({})", r.final_error, r.identity_residual);
        assert!(r.minimizer_residuals.iter().all(|&res| res <= 1e-9 * r.h_norm.max(1.0)));
        errors.push(r.final_error);
    }
    assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
}

#[test]
fn identity_residual_shrinks_with_the_grid() {
    let p = preset();
    let gram = assemble_gramian(&p.model).unwrap();
    let residual = |t: usize| {
        let cfg = FixedPointConfig { grid_t: t, ..FixedPointConfig::new(1e-2) };
        picard_solve(&p.model, &p.g, &p.f, &cfg, &gram).unwrap().identity_residual
    };
    let (coarse, fine) = (residual(64), residual(128));
    assert!(fine < coarse / 1.7, "{coarse:e} -> {fine:e}");
}
