//! Central-difference check of every parameter gradient of a small APL
//! network, skipping coordinates whose perturbation crosses a hinge.

use aplnet::autodiff::{finite_diff_check, GradCheckOptions, ParamId, Probe, Tape};
use aplnet::layers::Mode;
use aplnet::network::{ActivationKind, Network, NetworkInit, NetworkSpec};
use aplnet::tensor::Tensor;

fn loss(net: &Network, x: &Tensor, labels: &[usize], tracking: bool) -> aplnet::error::Result<(Tape, aplnet::autodiff::Var)> {
    let mut tape = if tracking { Tape::with_kink_tracking() } else { Tape::new() };
    let logits = net.forward(&mut tape, x.clone(), Mode::Eval, 0)?;
    let loss = tape.softmax_xent(logits, labels)?;
    Ok((tape, loss))
}

fn main() -> aplnet::error::Result<()> {
    let spec = NetworkSpec::mlp(8, &[16, 16], 4, ActivationKind::apl(2));
    let net = Network::<f64>::new(spec, NetworkInit::seeded(7))?;
    let x = Tensor::new(vec![5, 8], (0..40).map(|i| ((i * 37 % 23) as f64 / 11.0) - 1.0).collect())?;
    let labels = [0, 1, 2, 3, 1];

    let (tape, l) = loss(&net, &x, &labels, false)?;
    let grads = tape.backward(l)?;
    let mut analytic = Vec::new();
    let mut theta = Vec::new();
    for (i, p) in net.params().iter().enumerate() {
        theta.extend_from_slice(p.value.data());
        analytic.extend(grads.param(ParamId(i)).map_or(vec![0.0; p.value.len()], |g| g.data().to_vec()));
    }

    let mut probe_net = net.clone();
    let report = finite_diff_check(
        |point| {
            let mut offset = 0;
            for p in probe_net.params_mut() {
                let n = p.value.len();
                p.value.data_mut().copy_from_slice(&point[offset..offset + n]);
                offset += n;
            }
            let (tape, l) = loss(&probe_net, &x, &labels, true)?;
            Ok(Probe {
                value: tape.value(l).item()?,
                kinks: tape.kink_offsets().to_vec(),
            })
        },
        &theta,
        &analytic,
        GradCheckOptions::default(),
    )?;
    println!(
        "{} parameters: max relative error {:.2e} over {} checked, {} near a hinge",
        theta.len(),
        report.max_rel_error,
        report.checked,
        report.excluded.len()
    );
    Ok(())
}
