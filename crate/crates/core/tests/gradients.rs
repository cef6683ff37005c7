use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subadj_core::attention::{linear_attention, map_phi, sacon, Side};
use subadj_core::model::{Model, ModelConfig};
use subadj_core::numcore::gradcheck::check_gradients;
use subadj_core::train::loss_total_tape;
use subadj_core::{MappingConfig, MappingKind, SubAdjacentSpan, Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const FLOOR: f64 = 1e-5;

/// Entries drawn away from zero so the negative clamp never straddles a
/// finite-difference step.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Var {
    let y = tape.mul_const(x, w.clone()).unwrap();
    tape.sum(y)
}

#[test]
fn map_phi_every_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[6, 4]);
    let w = rand_tensor(&mut rng, &[6, 4]);
    for kind in MappingKind::ALL {
        if kind == MappingKind::VanillaSelfAttention {
            continue;
        }
        let cfg = MappingConfig {
            kind,
            ..Default::default()
        };
        for side in [Side::Query, Side::Key] {
            let r = check_gradients(&[x.clone(), Tensor::scalar(0.7)], H, FLOOR, |t, v| {
                let tau = kind.uses_tau().then_some(v[1]);
                let y = map_phi(t, v[0], tau, &cfg, side)?;
                Ok(weighted_sum(t, y, &w))
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "{kind:?} {side:?}: {r:?}");
        }
    }
}

#[test]
fn temperature_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let cfg = MappingConfig::default();
    for tau in [0.05, 0.3, 1.0, 4.0] {
        let r = check_gradients(&[Tensor::scalar(tau)], H * tau, FLOOR, |t, v| {
            let xc = t.constant(x.clone());
            let y = map_phi(t, xc, Some(v[0]), &cfg, Side::Query)?;
            Ok(weighted_sum(t, y, &w))
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "tau {tau}: {r:?}");
    }
}

#[test]
fn linear_attention_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (win, d) = (10, 4);
    let inputs = [
        rand_tensor(&mut rng, &[win, d]),
        rand_tensor(&mut rng, &[win, d]),
        rand_tensor(&mut rng, &[win, d]),
        Tensor::scalar(0.8),
    ];
    let w = rand_tensor(&mut rng, &[win, d]);
    let wa = rand_tensor(&mut rng, &[win, win]);
    for kind in MappingKind::ALL {
        for renormalize in [false, true] {
            let cfg = MappingConfig {
                kind,
                renormalize,
                ..Default::default()
            };
            let r = check_gradients(&inputs, H, FLOOR, |t, v| {
                let tau = kind.uses_tau().then_some(v[3]);
                let (out, a) = linear_attention(t, v[0], v[1], v[2], tau, &cfg)?;
                let lo = weighted_sum(t, out, &w);
                let la = weighted_sum(t, a, &wa);
                t.add(lo, la)
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "{kind:?} renorm={renormalize}: {r:?}");
        }
    }
}

#[test]
fn sacon_gradient_is_stripe_mask() {
    for (k1, k2, win) in [(1, 3, 10), (2, 7, 12), (0, 0, 8), (3, 9, 16)] {
        let span = SubAdjacentSpan::new(k1, k2, win).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(&[win, win], 0.1), true);
        let s = sacon(&mut tape, a, &span).unwrap();
        let total = tape.sum(s);
        tape.backward(total).unwrap();
        let g = tape.grad(a).unwrap();
        for j in 0..win {
            for i in 0..win {
                let mut count = 0.0;
                for d in -(k2 as isize)..=(k2 as isize) {
                    if d.unsigned_abs() >= k1 && (i as isize + d).rem_euclid(win as isize) as usize == j {
                        count += 1.0;
                    }
                }
                assert_eq!(g.get2(j, i), count, "span {k1}:{k2} win {win} cell ({j},{i})");
            }
        }
    }
}

#[test]
fn sacon_weighted_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let span = SubAdjacentSpan::new(2, 5, 16).unwrap();
    let a = rand_tensor(&mut rng, &[16, 16]);
    let w = rand_tensor(&mut rng, &[16]);
    let r = check_gradients(&[a], H, FLOOR, |t, v| {
        let s = sacon(t, v[0], &span)?;
        Ok(weighted_sum(t, s, &w))
    })
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn loss_total_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        rand_tensor(&mut rng, &[8, 3]),
        rand_tensor(&mut rng, &[8, 3]),
        rand_tensor(&mut rng, &[8]),
    ];
    for lambda in [0.0, 10.0] {
        let r = check_gradients(&inputs, H, FLOOR, |t, v| {
            Ok(loss_total_tape(t, v[0], v[1], Some(v[2]), lambda)?.total)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "lambda {lambda}: {r:?}");
    }
}

fn micro_cfg(renormalize: bool, kind: MappingKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(2);
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.win_size = 16;
    cfg.span = SubAdjacentSpan::new(2, 4, 16).unwrap();
    cfg.mapping = MappingConfig {
        kind,
        renormalize,
        ..Default::default()
    };
    cfg
}

#[test]
fn full_forward_and_objective() {
    for (renormalize, kind) in [
        (false, MappingKind::LearnableRowSoftmax),
        (true, MappingKind::LearnableRowSoftmax),
        (false, MappingKind::VanillaSelfAttention),
    ] {
        let cfg = micro_cfg(renormalize, kind);
        let model = Model::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[16, 2]);
        let params: Vec<Tensor> = model.params.iter().cloned().collect();
        // losses here are O(100), so differences carry ~1e-8 of round-off;
        // exactly-zero gradients (e.g. key biases under row softmax) need the
        // larger floor
        let r = check_gradients(&params, 1e-5, 1e-4, |t, v| {
            let p = model.params.rebuild(v.iter().copied())?;
            let xc = t.constant(x.clone());
            let fv = model.forward_tape(t, &p, xc, None)?;
            let s = model.mean_sacon_tape(t, &fv.attention)?;
            Ok(loss_total_tape(t, xc, fv.x_hat, Some(s), 10.0)?.total)
        })
        .unwrap();
        let names = model.params.names();
        assert!(
            r.max_rel_err < TOL,
            "renorm={renormalize} {kind:?}: worst at {}: {r:?}",
            names[r.worst.0]
        );
    }
}
