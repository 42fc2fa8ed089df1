//! One optimizer step of amortized training over a batch of instances.
//!
//! Each instance runs a full APG pass with a gradient sink; sinks are merged
//! in batch order, averaged, and descended with the store's optimizer. The
//! sink holds ascent directions, hence the `−1/B` scale.

use rand::RngCore;

use crate::dmm::{self, DmmHyper, DmmInstance, DmmModel, DmmNets};
use crate::error::{argument, Result};
use crate::estimators::GradSink;
use crate::gmm::{self, GmmHyper, GmmInstance, GmmModel, GmmNets};
use crate::smc::{apg_run, BlockKernel, SweepOptions};
use crate::{GradBuffer, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    /// Sweeps per instance, the first being importance sampling.
    pub sweeps: usize,
    pub particles: usize,
    pub lr: f64,
}

impl Schedule {
    fn check(&self, batch: usize) -> Result<()> {
        if self.sweeps == 0 || self.particles == 0 || batch == 0 || !(self.lr > 0.0) {
            return Err(argument(format!("invalid training step: {self:?}, batch {batch}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    /// Batch mean of the final SNIS log-joint.
    pub log_joint: f64,
    /// Batch mean of the final ESS over `L`.
    pub ess_fraction: f64,
    pub phi_grad_norm: f64,
    pub theta_grad_norm: f64,
}

fn finish(store: &mut ParamStore, buf: &GradBuffer, batch: usize, lr: f64) -> Result<f64> {
    let norm = buf.norm() / batch as f64;
    store.accumulate(buf, -1.0 / batch as f64)?;
    store.apply(lr)?;
    Ok(norm)
}

pub fn gmm_step(
    store: &mut ParamStore,
    nets: &GmmNets,
    hyper: &GmmHyper,
    batch: &[&GmmInstance],
    schedule: Schedule,
    rng: &mut dyn RngCore,
) -> Result<StepReport> {
    schedule.check(batch.len())?;
    let mut total = GradSink::new(store.grad_buffer(), GradBuffer::default());
    let mut report = StepReport::default();
    for inst in batch {
        let model = GmmModel::new(inst, hyper);
        let enc = gmm::NeuralEncoder { model, nets, store };
        let g = gmm::NeuralGlobalKernel { model, nets, store };
        let l = gmm::NeuralLocalKernel { model, nets, store };
        let kernels: [&dyn BlockKernel<_>; 2] = [&g, &l];
        let mut sink = GradSink::new(store.grad_buffer(), GradBuffer::default());
        let (_, metrics) =
            apg_run(&model, &enc, &kernels, schedule.sweeps, schedule.particles, rng, Some(&mut sink), SweepOptions::default())?;
        total.merge(&sink)?;
        let last = metrics.last().expect("at least one sweep");
        report.log_joint += last.mean_log_joint / batch.len() as f64;
        report.ess_fraction += last.ess / (schedule.particles * batch.len()) as f64;
    }
    report.phi_grad_norm = finish(store, &total.phi, batch.len(), schedule.lr)?;
    Ok(report)
}

/// Updates the proposal parameters `phi` and the decoder parameters `theta`
/// from the same sweeps.
#[allow(clippy::too_many_arguments)]
pub fn dmm_step(
    phi: &mut ParamStore,
    theta: &mut ParamStore,
    nets: &DmmNets,
    decoder: &dmm::Decoder,
    hyper: &DmmHyper,
    batch: &[&DmmInstance],
    schedule: Schedule,
    rng: &mut dyn RngCore,
) -> Result<StepReport> {
    schedule.check(batch.len())?;
    let mut total = GradSink::new(phi.grad_buffer(), theta.grad_buffer());
    let mut report = StepReport::default();
    for inst in batch {
        let model = DmmModel { instance: inst, hyper, decoder, theta };
        let store = &*phi;
        let enc = dmm::NeuralEncoder { model, nets, store };
        let g = dmm::NeuralGlobalKernel { model, nets, store };
        let l = dmm::NeuralLocalKernel { model, nets, store };
        let kernels: [&dyn BlockKernel<_>; 2] = [&g, &l];
        let mut sink = GradSink::new(phi.grad_buffer(), theta.grad_buffer());
        let (_, metrics) =
            apg_run(&model, &enc, &kernels, schedule.sweeps, schedule.particles, rng, Some(&mut sink), SweepOptions::default())?;
        total.merge(&sink)?;
        let last = metrics.last().expect("at least one sweep");
        report.log_joint += last.mean_log_joint / batch.len() as f64;
        report.ess_fraction += last.ess / (schedule.particles * batch.len()) as f64;
    }
    report.phi_grad_norm = finish(phi, &total.phi, batch.len(), schedule.lr)?;
    report.theta_grad_norm = finish(theta, &total.theta, batch.len(), schedule.lr)?;
    Ok(report)
}

/// Mean inclusive KL of both blocks at the generating latents.
pub fn gmm_mean_kl(store: &ParamStore, nets: &GmmNets, hyper: &GmmHyper, instances: &[GmmInstance]) -> Result<(f64, f64)> {
    let mut acc = (0.0, 0.0);
    let mut n = 0;
    for inst in instances {
        let Some(truth) = inst.truth.as_ref() else { continue };
        let (g, l) = gmm::kl_to_exact(inst, truth, store, nets, hyper)?;
        acc.0 += g;
        acc.1 += l;
        n += 1;
    }
    if n == 0 {
        return Err(argument("KL needs instances with generating latents"));
    }
    Ok((acc.0 / n as f64, acc.1 / n as f64))
}
