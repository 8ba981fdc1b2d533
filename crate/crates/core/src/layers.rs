//! Small building blocks shared by several modules.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{channel_vec, he_kernel, ParamKind, ParamStore};

/// Bottleneck width of squeeze-and-excitation style gates.
pub fn se_hidden(channels: usize) -> usize {
    (channels / 16).max(4)
}

pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
) {
    store.insert(format!("{name}.weight"), ParamKind::Trainable, he_kernel(rng, cout, cin, k));
    if bias {
        store.insert(format!("{name}.bias"), ParamKind::Trainable, channel_vec(cout, 0.0));
    }
}

pub fn init_batch_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), ParamKind::Trainable, channel_vec(c, 1.0));
    store.insert(format!("{name}.beta"), ParamKind::Trainable, channel_vec(c, 0.0));
    store.insert(format!("{name}.running_mean"), ParamKind::Buffer, channel_vec(c, 0.0));
    store.insert(format!("{name}.running_var"), ParamKind::Buffer, channel_vec(c, 1.0));
}

/// Two 1×1 convs (`{prefix}.fc1`, `{prefix}.fc2`) around a ReLU, squeezed to
/// `se_hidden(c)` channels.
pub fn init_se_gate<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, c: usize) {
    let hidden = se_hidden(c);
    init_conv(store, rng, &format!("{prefix}.fc1"), hidden, c, 1, true);
    init_conv(store, rng, &format!("{prefix}.fc2"), c, hidden, 1, true);
}

/// sigmoid(fc2(ReLU(fc1(pooled)))) for a pooled (N, C, 1, 1) descriptor.
pub fn se_gate(g: &mut Graph, prefix: &str, pooled: Var) -> Result<Var> {
    let h = g.conv_named(pooled, &format!("{prefix}.fc1"))?;
    let h = g.relu(h);
    let h = g.conv_named(h, &format!("{prefix}.fc2"))?;
    Ok(g.sigmoid(h))
}

/// (w ⊗ x) ⊕ x
pub fn residual_gate(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let wx = g.mul(w, x)?;
    g.add(wx, x)
}
