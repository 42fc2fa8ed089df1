use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, Continuous, Normal};

use super::nets::normalized_aggregation;
use super::*;
use crate::smc::{apg_run, BlockKernel, Encoder, SweepOptions};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn setup(n: usize, seed: u64) -> (DmmHyper, DmmInstance, Decoder, ParamStore, DmmNets, ParamStore) {
    let hyper = DmmHyper::default();
    let mut r = rng(seed);
    let inst = generate_instance(n, &hyper, &mut r).unwrap();
    let dec = Decoder::new();
    let mut theta = ParamStore::new();
    dec.init(&mut theta, Init::Xavier, &mut r).unwrap();
    let nets = DmmNets::new(hyper.m).unwrap();
    let mut phi = ParamStore::new();
    nets.init_with(&mut phi, Init::Xavier, &mut r).unwrap();
    (hyper, inst, dec, theta, nets, phi)
}

fn random_latent(n: usize, hyper: &DmmHyper, r: &mut ChaCha8Rng) -> DmmLatent {
    DmmLatent {
        mu: (0..hyper.m).map(|_| [r.gen_range(-8.0..8.0), r.gen_range(-8.0..8.0)]).collect(),
        c: (0..n).map(|_| r.gen_range(0..hyper.m)).collect(),
        h: (0..n).map(|_| r.gen_range(0.02..0.98)).collect(),
    }
}

#[test]
fn generation_is_deterministic() {
    let h = DmmHyper::default();
    let a = generate_instance(20, &h, &mut rng(1)).unwrap();
    let b = generate_instance(20, &h, &mut rng(1)).unwrap();
    assert_eq!(a, b);
    assert!(generate_instance(0, &h, &mut rng(1)).is_err());
}

#[test]
fn ring_offsets_have_the_circle_moments() {
    let h = DmmHyper::default();
    let inst = generate_instance(20_000, &h, &mut rng(2)).unwrap();
    let truth = inst.truth.as_ref().unwrap();
    let n = inst.len() as f64;
    let mut mean = [0.0; DIM];
    let mut sq = 0.0;
    for (i, x) in inst.points.iter().enumerate() {
        let mu = truth.mu[truth.c[i]];
        let off = [x[0] - mu[0], x[1] - mu[1]];
        mean[0] += off[0] / n;
        mean[1] += off[1] / n;
        sq += (off[0] * off[0] + off[1] * off[1]) / n;
    }
    // offsets are uniform on a circle of radius 3 plus N(0, 0.1²) noise
    let r2 = h.radius * h.radius;
    let se = (r2 / 2.0 / n).sqrt();
    assert!(mean[0].abs() < 4.0 * se && mean[1].abs() < 4.0 * se, "{mean:?}");
    let want = r2 + 2.0 * h.sigma_eps * h.sigma_eps;
    assert!((sq - want).abs() < 0.01, "{sq} vs {want}");
    for (i, x) in inst.points.iter().take(50).enumerate() {
        let g = ring(truth.h[i], h.radius);
        let mu = truth.mu[truth.c[i]];
        assert!(((x[0] - g[0] - mu[0]).powi(2) + (x[1] - g[1] - mu[1]).powi(2)).sqrt() < 0.6);
    }
}

#[test]
fn log_joint_matches_density_oracle() {
    let (h, inst, dec, theta, _, _) = setup(7, 3);
    let z = random_latent(7, &h, &mut rng(4));
    let g = dec.forward(&theta, &z.h).unwrap();
    let prior = Normal::new(h.mu0, h.sigma0).unwrap();
    let noise = Normal::new(0.0, h.sigma_eps).unwrap();
    let beta = Beta::new(h.alpha, h.beta).unwrap();
    let mut want = 0.0;
    for mu in &z.mu {
        want += prior.ln_pdf(mu[0]) + prior.ln_pdf(mu[1]);
    }
    for (i, x) in inst.points.iter().enumerate() {
        want += (0.25f64).ln() + beta.ln_pdf(z.h[i]);
        for d in 0..DIM {
            want += noise.ln_pdf(x[d] - g.get(i, d) - z.mu[z.c[i]][d]);
        }
    }
    let got = log_joint(&inst, &z, &dec, &theta, &h).unwrap();
    assert!((got - want).abs() < 1e-9 * want.abs(), "{got} vs {want}");
}

#[test]
fn batched_log_joints_match_single_evaluations() {
    let (h, inst, dec, theta, _, _) = setup(9, 5);
    let mut r = rng(6);
    let zs: Vec<DmmLatent> = (0..5).map(|_| random_latent(9, &h, &mut r)).collect();
    let model = DmmModel { instance: &inst, hyper: &h, decoder: &dec, theta: &theta };
    let batch = model.log_joints(&zs).unwrap();
    for (z, b) in zs.iter().zip(batch) {
        assert_eq!(model.log_joint(z).unwrap(), b);
    }
}

#[test]
fn embeddings_outside_the_unit_interval_are_rejected() {
    let (h, inst, dec, theta, _, _) = setup(3, 7);
    let mut z = random_latent(3, &h, &mut rng(8));
    z.h[1] = 1.0;
    assert!(matches!(log_joint(&inst, &z, &dec, &theta, &h), Err(Error::Domain { .. })));
    z.h[1] = 0.5;
    z.c[0] = h.m;
    assert!(log_joint(&inst, &z, &dec, &theta, &h).is_err());
}

#[test]
fn unconstrained_conditional_adds_the_jacobian_and_differentiates() {
    let (h, inst, dec, theta, _, _) = setup(6, 9);
    let z = random_latent(6, &h, &mut rng(10));
    let mut q: Vec<f64> = z.mu.iter().flatten().copied().collect();
    q.extend(z.h.iter().map(|v| (v / (1.0 - v)).ln()));
    let (value, grad) = conditional_unconstrained(&inst, &z.c, &q, &dec, &theta, &h).unwrap();
    let jac: f64 = z.h.iter().map(|v| (v * (1.0 - v)).ln()).sum();
    let lj = log_joint(&inst, &z, &dec, &theta, &h).unwrap();
    assert!((value - lj - jac).abs() < 1e-8 * lj.abs().max(1.0), "{value} vs {}", lj + jac);
    let eps = 1e-6;
    for i in 0..q.len() {
        let mut a = q.clone();
        let mut b = q.clone();
        a[i] += eps;
        b[i] -= eps;
        let fd = (conditional_unconstrained(&inst, &z.c, &a, &dec, &theta, &h).unwrap().0
            - conditional_unconstrained(&inst, &z.c, &b, &dec, &theta, &h).unwrap().0)
            / (2.0 * eps);
        assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1.0), "coord {i}: {fd} vs {}", grad[i]);
    }
}

#[test]
fn theta_gradient_matches_finite_differences() {
    let (h, inst, dec, theta, _, _) = setup(8, 11);
    let mut r = rng(12);
    let zs: Vec<DmmLatent> = (0..4).map(|_| random_latent(8, &h, &mut r)).collect();
    let w = [0.1, 0.0, 0.6, 0.3];
    let model = DmmModel { instance: &inst, hyper: &h, decoder: &dec, theta: &theta };
    let mut buf = theta.grad_buffer();
    model.theta_grad(&zs, &w, &mut buf).unwrap();
    let eps = 1e-6;
    for p in 0..theta.len() {
        for k in 0..theta.value_at(p).len() {
            let eval = |delta: f64| {
                let mut s = theta.clone();
                s.value_at_mut(p).data_mut()[k] += delta;
                let m = DmmModel { theta: &s, ..model };
                zs.iter().zip(&w).map(|(z, w)| w * m.log_joint(z).unwrap()).sum::<f64>()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = buf.get(p).data()[k];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1.0), "{} [{k}]: {fd} vs {an}", theta.name_at(p));
        }
    }
}

#[test]
fn recon_error_of_a_zero_decoder_is_the_ring_radius() {
    let h = DmmHyper::default();
    let inst = generate_instance(5000, &h, &mut rng(13)).unwrap();
    let dec = Decoder::new();
    let mut theta = ParamStore::new();
    dec.init(&mut theta, Init::ZeroLast, &mut rng(14)).unwrap();
    let mse = recon_mse(&inst, inst.truth.as_ref().unwrap(), &dec, &theta).unwrap();
    let truth = inst.truth.as_ref().unwrap();
    let exact: f64 = inst
        .points
        .iter()
        .enumerate()
        .map(|(i, x)| (x[0] - truth.mu[truth.c[i]][0]).powi(2) + (x[1] - truth.mu[truth.c[i]][1]).powi(2))
        .sum::<f64>()
        / inst.len() as f64;
    assert!((mse - exact).abs() < 1e-9, "{mse} vs {exact}");
    let want = h.radius * h.radius + 2.0 * h.sigma_eps * h.sigma_eps;
    assert!((mse - want).abs() < 0.05, "{mse} vs {want}");
    assert!(inst.variance_baseline() > 5.0 * mse);
}

#[test]
fn aggregation_ignores_order_and_duplication() {
    let (h, inst, _, _, nets, phi) = setup(10, 15);
    let base = neural_global_proposal(&inst, None, &phi, &nets, &h).unwrap();
    let mut shuffled = inst.clone();
    shuffled.points.reverse();
    shuffled.points.swap(2, 7);
    let perm = neural_global_proposal(&shuffled, None, &phi, &nets, &h).unwrap();
    let mut doubled = inst.clone();
    doubled.points.extend(inst.points.clone());
    let dup = neural_global_proposal(&doubled, None, &phi, &nets, &h).unwrap();
    for other in [&perm, &dup] {
        for k in 0..h.m {
            for d in 0..DIM {
                assert!((base.mean[k][d] - other.mean[k][d]).abs() < 1e-12);
                assert!((base.var[k][d] - other.var[k][d]).abs() < 1e-9 * base.var[k][d]);
            }
        }
    }
}

#[test]
fn single_point_statistics_equal_its_features() {
    let (h, inst, _, _, nets, phi) = setup(1, 16);
    let prop = neural_global_proposal(&inst, None, &phi, &nets, &h).unwrap();
    let s = nets.enc_s.eval(&phi, &Tensor::from_vec(1, DIM, inst.points[0].to_vec())).unwrap();
    for col in &prop.statistics {
        for j in 0..nets::FEATURES {
            assert!((col[j] - s.get(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_columns_are_zeroed() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let t = tape.constant(Tensor::from_vec(3, 2, vec![0.5, 0.0, 0.25, 1e-8, 0.25, 0.0]));
    let agg = normalized_aggregation(&mut tape, s, t, 1);
    let v = tape.value(agg);
    assert!((v.get(0, 0) - (0.5 + 0.75 + 1.25) / 1.0).abs() < 1e-12);
    assert!((v.get(0, 1) - (1.0 + 1.0 + 1.5) / 1.0).abs() < 1e-12);
    assert_eq!(v.row_slice(1), &[0.0, 0.0]);
}

#[test]
fn zero_initialized_proposals_are_the_prior() {
    let h = DmmHyper::default();
    let inst = generate_instance(6, &h, &mut rng(17)).unwrap();
    let nets = DmmNets::new(h.m).unwrap();
    let mut phi = ParamStore::new();
    nets.init(&mut phi, &mut rng(18)).unwrap();
    let z = inst.truth.clone().unwrap();
    for locals in [None, Some((z.c.as_slice(), z.h.as_slice()))] {
        let g = neural_global_proposal(&inst, locals, &phi, &nets, &h).unwrap();
        for k in 0..h.m {
            assert_eq!(g.mean[k], [h.mu0; DIM]);
            for v in g.var[k] {
                assert!((v - h.sigma0 * h.sigma0).abs() < 1e-9);
            }
        }
    }
    let l = neural_local_proposal(&inst, &z.mu, &z.c, &phi, &nets, &h).unwrap();
    for row in &l.pi {
        for p in row {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }
    assert!(l.alpha.iter().chain(&l.beta).all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn kernel_log_density_reproduces_proposal() {
    let (h, inst, dec, theta, nets, phi) = setup(8, 19);
    let model = DmmModel { instance: &inst, hyper: &h, decoder: &dec, theta: &theta };
    let mut r = rng(20);
    let states: Vec<DmmLatent> = (0..4).map(|_| random_latent(8, &h, &mut r)).collect();
    let kernels: [&dyn BlockKernel<DmmLatent>; 4] = [
        &NeuralGlobalKernel { model, nets: &nets, store: &phi },
        &NeuralLocalKernel { model, nets: &nets, store: &phi },
        &PriorGlobalKernel { hyper: &h },
        &PriorLocalKernel { hyper: &h },
    ];
    for k in kernels {
        let prop = k.propose(&states, &mut r, false).unwrap();
        for l in 0..4 {
            let fwd = k.log_density(&prop.states[l]).unwrap();
            assert!((fwd - prop.log_q[l]).abs() < 1e-9 * fwd.abs().max(1.0), "{fwd} vs {}", prop.log_q[l]);
            let rev = k.log_density(&states[l]).unwrap();
            assert!((rev - prop.log_q_reverse[l]).abs() < 1e-9 * rev.abs().max(1.0));
        }
    }
    let encoders: [&dyn Encoder<DmmLatent>; 2] =
        [&NeuralEncoder { model, nets: &nets, store: &phi }, &PriorEncoder { instance: &inst, hyper: &h }];
    for e in encoders {
        let prop = e.sample(4, &mut r, false).unwrap();
        for l in 0..4 {
            let v = e.log_density(&prop.states[l]).unwrap();
            assert!((v - prop.log_q[l]).abs() < 1e-9 * v.abs().max(1.0));
        }
    }
}

#[test]
fn prior_encoder_density_is_the_prior_part_of_the_joint() {
    let (h, inst, dec, _, _, _) = setup(5, 21);
    let mut theta = ParamStore::new();
    dec.init(&mut theta, Init::ZeroLast, &mut rng(22)).unwrap();
    let z = random_latent(5, &h, &mut rng(23));
    let enc = PriorEncoder { instance: &inst, hyper: &h };
    let lik: f64 = inst
        .points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mu = z.mu[z.c[i]];
            let noise = Normal::new(0.0, h.sigma_eps).unwrap();
            noise.ln_pdf(x[0] - mu[0]) + noise.ln_pdf(x[1] - mu[1])
        })
        .sum();
    let lj = log_joint(&inst, &z, &dec, &theta, &h).unwrap();
    assert!((enc.log_density(&z).unwrap() + lik - lj).abs() < 1e-9 * lj.abs());
}

/// Worst mixed error between the score-tape gradient of
/// `Σ_l seed_l log q(z^l)` and central differences of `log_density`, over a
/// few entries of every parameter tensor.
fn score_fd_check(
    propose: &dyn Fn(&ParamStore, &mut ChaCha8Rng) -> crate::smc::Proposal<DmmLatent>,
    density: &dyn Fn(&ParamStore, &DmmLatent) -> f64,
    store: &ParamStore,
) -> (f64, usize) {
    let mut r = rng(99);
    let prop = propose(store, &mut r);
    let seed: Vec<f64> = (0..prop.states.len()).map(|_| r.gen_range(0.1..1.0)).collect();
    let mut buf = store.grad_buffer();
    prop.score.unwrap().backward(&seed, &mut buf).unwrap();
    let (mut worst, mut live) = (0.0f64, 0);
    let eps = 1e-5;
    for p in 0..store.len() {
        for _ in 0..3 {
            let k = r.gen_range(0..store.value_at(p).len());
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.value_at_mut(p).data_mut()[k] += delta;
                prop.states.iter().zip(&seed).map(|(z, w)| w * density(&s, z)).sum::<f64>()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = buf.get(p).data()[k];
            live += (an.abs() > 1e-8) as usize;
            worst = worst.max((fd - an).abs() / fd.abs().max(1.0));
        }
    }
    (worst, live)
}

#[test]
fn proposal_networks_pass_finite_differences() {
    let (h, inst, dec, theta, nets, phi) = setup(6, 24);
    let model = DmmModel { instance: &inst, hyper: &h, decoder: &dec, theta: &theta };
    let mut r = rng(25);
    let states: Vec<DmmLatent> = (0..3).map(|_| random_latent(6, &h, &mut r)).collect();

    let (worst, live) = score_fd_check(
        &|s, r| NeuralGlobalKernel { model, nets: &nets, store: s }.propose(&states, r, true).unwrap(),
        &|s, z| NeuralGlobalKernel { model, nets: &nets, store: s }.log_density(z).unwrap(),
        &phi,
    );
    assert!(worst <= 1e-4 && live > 10, "global kernel: {worst}, {live} live");
    let (worst, live) = score_fd_check(
        &|s, r| NeuralLocalKernel { model, nets: &nets, store: s }.propose(&states, r, true).unwrap(),
        &|s, z| NeuralLocalKernel { model, nets: &nets, store: s }.log_density(z).unwrap(),
        &phi,
    );
    assert!(worst <= 1e-4 && live > 10, "local kernel: {worst}, {live} live");
    let (worst, live) = score_fd_check(
        &|s, r| NeuralEncoder { model, nets: &nets, store: s }.sample(3, r, true).unwrap(),
        &|s, z| NeuralEncoder { model, nets: &nets, store: s }.log_density(z).unwrap(),
        &phi,
    );
    assert!(worst <= 1e-4 && live > 10, "encoder: {worst}, {live} live");
}

#[test]
fn decoder_passes_finite_differences() {
    let (_, _, dec, theta, _, _) = setup(1, 26);
    let hs = [0.1, 0.45, 0.9];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::column(hs.to_vec()));
    let out = dec.net.forward(&mut tape, &theta, x).unwrap();
    let w = Tensor::from_vec(3, 2, vec![0.3, -1.0, 0.7, 0.2, -0.4, 1.1]);
    let mut buf = theta.grad_buffer();
    tape.backward(out, &w, Some(&mut buf)).unwrap();
    let eps = 1e-6;
    for p in 0..theta.len() {
        for k in 0..theta.value_at(p).len() {
            let eval = |delta: f64| {
                let mut s = theta.clone();
                s.value_at_mut(p).data_mut()[k] += delta;
                let g = dec.forward(&s, &hs).unwrap();
                g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = buf.get(p).data()[k];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1.0), "{fd} vs {an}");
        }
    }
}

#[test]
fn sweeps_run_and_keep_finite_weights() {
    let (h, inst, dec, theta, nets, phi) = setup(20, 27);
    let model = DmmModel { instance: &inst, hyper: &h, decoder: &dec, theta: &theta };
    let enc = NeuralEncoder { model, nets: &nets, store: &phi };
    let g = NeuralGlobalKernel { model, nets: &nets, store: &phi };
    let l = NeuralLocalKernel { model, nets: &nets, store: &phi };
    let kernels: [&dyn BlockKernel<DmmLatent>; 2] = [&g, &l];
    let (sys, metrics) = apg_run(&model, &enc, &kernels, 3, 5, &mut rng(28), None, SweepOptions::default()).unwrap();
    assert_eq!(metrics.len(), 3);
    assert!(sys.log_weights.iter().all(|w| w.is_finite()));
    assert!(sys.particles.iter().all(|z| z.h.iter().all(|v| *v > 0.0 && *v < 1.0)));
}

/// Proposes blocks concentrated on the generating latent.
struct CheatingKernel<'a> {
    truth: &'a DmmLatent,
    m: usize,
    global: bool,
}

impl CheatingKernel<'_> {
    const MU_SD: f64 = 0.1;
    const C_HIT: f64 = 0.97;
    const H_CONC: f64 = 200.0;

    fn c_log_prob(&self, n: usize, k: usize) -> f64 {
        if k == self.truth.c[n] {
            Self::C_HIT.ln()
        } else {
            ((1.0 - Self::C_HIT) / (self.m - 1) as f64).ln()
        }
    }

    fn h_dist(&self, n: usize) -> Beta {
        let h = self.truth.h[n];
        Beta::new(Self::H_CONC * h, Self::H_CONC * (1.0 - h)).unwrap()
    }
}

impl BlockKernel<DmmLatent> for CheatingKernel<'_> {
    fn propose(&self, states: &[DmmLatent], rng: &mut dyn rand::RngCore, _want_grad: bool) -> crate::Result<crate::smc::Proposal<DmmLatent>> {
        let mut out = Vec::new();
        let (mut lq, mut rev) = (Vec::new(), Vec::new());
        for s in states {
            let mut z = s.clone();
            if self.global {
                z.mu = self
                    .truth
                    .mu
                    .iter()
                    .map(|m| [m[0] + Self::MU_SD * rng.sample::<f64, _>(rand_distr::StandardNormal), m[1] + Self::MU_SD * rng.sample::<f64, _>(rand_distr::StandardNormal)])
                    .collect();
            } else {
                for n in 0..z.c.len() {
                    z.c[n] = if rng.gen::<f64>() < Self::C_HIT {
                        self.truth.c[n]
                    } else {
                        let others: Vec<usize> = (0..self.m).filter(|&k| k != self.truth.c[n]).collect();
                        others[rng.gen_range(0..others.len())]
                    };
                    let b = self.truth.h[n];
                    z.h[n] = crate::exp_family::sample_beta(Self::H_CONC * b, Self::H_CONC * (1.0 - b), &mut *rng).clamp(1e-12, 1.0 - 1e-12);
                }
            }
            lq.push(self.log_density(&z)?);
            rev.push(self.log_density(s)?);
            out.push(z);
        }
        Ok(crate::smc::Proposal { states: out, log_q: lq, log_q_reverse: rev, score: None })
    }

    fn log_density(&self, z: &DmmLatent) -> crate::Result<f64> {
        if self.global {
            let d = Normal::new(0.0, Self::MU_SD).unwrap();
            Ok(z.mu.iter().zip(&self.truth.mu).map(|(a, b)| d.ln_pdf(a[0] - b[0]) + d.ln_pdf(a[1] - b[1])).sum())
        } else {
            Ok((0..z.c.len()).map(|n| self.c_log_prob(n, z.c[n]) + self.h_dist(n).ln_pdf(z.h[n])).sum())
        }
    }
}

#[test]
fn cheating_kernels_beat_prior_kernels_on_every_seed() {
    for seed in 0..20 {
        let (h, inst, dec, theta, _, _) = setup(30, 500 + seed);
        let truth = inst.truth.clone().unwrap();
        let model = DmmModel { instance: &inst, hyper: &h, decoder: &dec, theta: &theta };
        let enc = PriorEncoder { instance: &inst, hyper: &h };
        let cg = CheatingKernel { truth: &truth, m: h.m, global: true };
        let cl = CheatingKernel { truth: &truth, m: h.m, global: false };
        let (pg, pl) = (PriorGlobalKernel { hyper: &h }, PriorLocalKernel { hyper: &h });
        let cheat: [&dyn BlockKernel<DmmLatent>; 2] = [&cg, &cl];
        let prior: [&dyn BlockKernel<DmmLatent>; 2] = [&pg, &pl];
        let run = |kernels: &[&dyn BlockKernel<DmmLatent>]| {
            let (sys, _) = apg_run(&model, &enc, kernels, 3, 10, &mut rng(900 + seed), None, SweepOptions::default()).unwrap();
            sys.mean_log_joint().unwrap()
        };
        let (a, b) = (run(&cheat), run(&prior));
        assert!(a > b, "seed {seed}: cheating {a} vs prior {b}");
    }
}
