//! Central finite-difference checks of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::vit::{Phase, VitModel};

/// Relative error `|a − n| / max(|a| + |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// `∂f/∂xᵢ ≈ (f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn batch_loss(model: &VitModel, images: &[&[f64]], labels: &[usize]) -> Result<(f64, Graph, crate::vit::Forward, crate::graph::Var)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, images, Phase::Train, None)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let v = g.value(loss).data()[0];
    Ok((v, g, out, loss))
}

/// Compares the analytic gradient of the train-phase batch loss with central
/// differences for every scalar of the parameters selected by `select`.
/// Selected parameters must be trainable.
pub fn check_params(
    model: &VitModel,
    images: &[&[f64]],
    labels: &[usize],
    mut select: impl FnMut(&str) -> bool,
    h: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = model.params().names().filter(|n| select(n)).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::contract("gradient check selected no parameters"));
    }
    let (_, g, out, loss) = batch_loss(model, images, labels)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    for name in names {
        let id = model.params().id(&name).expect("selected from the store");
        if !model.params().by_id(id).tensor.requires_grad() {
            return Err(Error::contract(format!("{name} is frozen")));
        }
        let analytic = grads
            .get(out.bound.var(id))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.params().by_id(id).tensor.numel()]);
        let x = model.params().by_id(id).tensor.data().to_vec();
        let mut probe = model.clone();
        let numeric = numeric_grad(
            |v| {
                probe.params_mut().by_id_mut(id).tensor.data_mut().copy_from_slice(v);
                batch_loss(&probe, images, labels).map(|r| r.0)
            },
            &x,
            h,
        )?;
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            report.entries.push(GradCheckEntry { name: name.clone(), index: i, analytic: a, numeric: n, rel_err: rel_err(a, n) });
        }
    }
    Ok(report)
}
