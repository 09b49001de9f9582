//! Minimal dense tensors with tape-based reverse-mode differentiation.

mod eager;
mod graph;
pub mod kernels;
mod ops;
mod params;
mod tensor;

pub use eager::Eager;
pub use graph::{Graph, NodeId};
pub use ops::{Ops, NORM_EPS};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

/// Largest relative discrepancy between analytic gradients and central
/// finite differences of `loss`, over every scalar of every parameter in
/// `ids`. Entries where both gradients are below `floor` in magnitude are
/// compared absolutely against `floor`.
pub fn max_gradient_error(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.get(id).data()[i];
            let scale = numeric.abs().max(exact.abs()).max(floor);
            worst = worst.max((numeric - exact).abs() / scale);
        }
    }
    worst
}
