//! Noise stream front end: a constrained (Bayar) convolution plus three fixed
//! SRM residual filters, summed.

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{reflect_pad, Tensor};

pub const KERNEL: usize = 5;
const CENTER: usize = KERNEL / 2;

/// Tolerance used when the forward pass checks that the constrained kernels
/// were projected. Projected kernels meet the constraint exactly; the slack
/// admits finite-difference perturbations.
pub const BAYAR_CHECK_TOL: f64 = 1e-5;

/// Trainable 3→3 constrained kernels, shape (3, 3, 5, 5).
#[derive(Clone, Debug, PartialEq)]
pub struct BayarKernelBank {
    pub kernels: Tensor,
}

/// Fixed 3→3 residual kernels, shape (3, 3, 5, 5).
#[derive(Clone, Debug, PartialEq)]
pub struct SrmKernelBank {
    kernels: Tensor,
}

impl SrmKernelBank {
    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }
}

impl BayarKernelBank {
    /// Uniform positive non-center weights, then projected.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kernels = Tensor::from_shape_simple_fn((3, 3, KERNEL, KERNEL), || rng.random_range(0.0..1.0));
        let mut bank = Self { kernels };
        bayar_project(&mut bank).expect("positive weights have nonzero sum");
        bank
    }

    /// Largest violation of the constraint over all slices.
    pub fn constraint_error(&self) -> f64 {
        constraint_error(&self.kernels)
    }
}

fn non_center_sum(kernels: &Tensor, o: usize, i: usize) -> f64 {
    let slice = kernels.slice(s![o, i, .., ..]);
    slice.sum() - slice[[CENTER, CENTER]]
}

pub(crate) fn constraint_error(kernels: &Tensor) -> f64 {
    let (co, ci, _, _) = kernels.dim();
    let mut worst: f64 = 0.0;
    for o in 0..co {
        for i in 0..ci {
            let center = kernels[[o, i, CENTER, CENTER]];
            worst = worst.max((center + 1.0).abs()).max((non_center_sum(kernels, o, i) - 1.0).abs());
        }
    }
    worst
}

/// Per (out, in) slice: set the center to −1 and rescale the other 24
/// weights so they sum to 1.
pub fn bayar_project(bank: &mut BayarKernelBank) -> Result<()> {
    project_kernels(&mut bank.kernels)
}

/// Rounds the weights to a shared power-of-two grid with 24-bit resolution
/// relative to the largest of them, then moves the rounding residual onto
/// `w[absorb]` so the weights sum exactly to `target`. The results are exact
/// in f32, so single-precision parameter storage keeps the sum intact.
fn snap_to_f32_grid(w: &mut [f64], target: f64, absorb: usize) {
    let largest = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if largest == 0.0 {
        return;
    }
    let grid = (2.0f64).powi(largest.log2().ceil() as i32 - 23);
    for v in w.iter_mut() {
        *v = (*v / grid).round() * grid;
    }
    let residual = target - w.iter().sum::<f64>();
    w[absorb] += residual;
}

pub(crate) fn project_kernels(kernels: &mut Tensor) -> Result<()> {
    let (co, ci, _, _) = kernels.dim();
    for o in 0..co {
        for i in 0..ci {
            if kernels.slice(s![o, i, .., ..]).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite bayar weight in slice ({o}, {i})")));
            }
            let sum = non_center_sum(kernels, o, i);
            if sum.abs() <= 1e-12 {
                return Err(Error::Projection { out: o, input: i });
            }
            let mut slice = kernels.slice_mut(s![o, i, .., ..]);
            let mut rest: Vec<f64> = slice
                .indexed_iter()
                .filter(|((y, x), _)| (*y, *x) != (CENTER, CENTER))
                .map(|(_, v)| v / sum)
                .collect();
            let smallest = (0..rest.len()).min_by(|&a, &b| rest[a].abs().total_cmp(&rest[b].abs())).expect("24 weights");
            snap_to_f32_grid(&mut rest, 1.0, smallest);
            if rest.iter().sum::<f64>() != 1.0 || rest.iter().any(|v| f64::from(*v as f32) != *v) {
                return Err(Error::Projection { out: o, input: i });
            }
            let mut it = rest.into_iter();
            for ((y, x), v) in slice.indexed_iter_mut() {
                *v = if (y, x) == (CENTER, CENTER) { -1.0 } else { it.next().expect("24 weights") };
            }
        }
    }
    Ok(())
}

/// The three residual filters, normalized by their divisors: the 5×5 "KV"
/// kernel (/12), the 3×3 square kernel (/4) and the horizontal second-order
/// kernel (/2), the latter two centered in a 5×5 window.
pub fn srm_base_kernels() -> [Array2<f64>; 3] {
    let kv = Array2::from_shape_vec(
        (5, 5),
        vec![
            -1., 2., -2., 2., -1., //
            2., -6., 8., -6., 2., //
            -2., 8., -12., 8., -2., //
            2., -6., 8., -6., 2., //
            -1., 2., -2., 2., -1.,
        ],
    )
    .expect("5x5")
        / 12.0;
    let mut square = Array2::zeros((5, 5));
    square.slice_mut(s![1..4, 1..4]).assign(
        &(Array2::from_shape_vec((3, 3), vec![-1., 2., -1., 2., -4., 2., -1., 2., -1.]).expect("3x3") / 4.0),
    );
    let mut horizontal = Array2::zeros((5, 5));
    horizontal[[2, 1]] = 0.5;
    horizontal[[2, 2]] = -1.0;
    horizontal[[2, 3]] = 0.5;
    [kv, square, horizontal]
}

/// Output channel o applies base kernel o to every input channel, each
/// weighted by 1/3. Taps are snapped to f32-exact values that still sum to
/// exactly zero.
pub fn srm_kernels() -> SrmKernelBank {
    let base = srm_base_kernels();
    let mut kernels = Tensor::zeros((3, 3, KERNEL, KERNEL));
    for (o, k) in base.iter().enumerate() {
        let mut taps: Vec<f64> = k.iter().map(|v| v / 3.0).collect();
        snap_to_f32_grid(&mut taps, 0.0, CENTER * KERNEL + CENTER);
        let k = Array2::from_shape_vec((KERNEL, KERNEL), taps).expect("5x5 taps");
        for i in 0..3 {
            kernels.slice_mut(s![o, i, .., ..]).assign(&k);
        }
    }
    SrmKernelBank { kernels }
}

pub fn init_noise_front<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str) {
    store.insert(format!("{prefix}.bayar.weight"), ParamKind::Trainable, BayarKernelBank::random(rng).kernels);
    store.insert(format!("{prefix}.srm.weight"), ParamKind::Frozen, srm_kernels().kernels);
}

/// Re-applies the constraint to the stored constrained kernels. A slice whose
/// non-center weights cancel out is redrawn from `rng` and projected again.
pub fn project_in_store<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str) -> Result<()> {
    let kernels = store.tensor_mut(&format!("{prefix}.bayar.weight"))?;
    loop {
        match project_kernels(kernels) {
            Ok(()) => return Ok(()),
            Err(Error::Projection { out, input }) => {
                let mut slice = kernels.slice_mut(s![out, input, .., ..]);
                slice.mapv_inplace(|_| rng.random_range(0.0..1.0));
            }
            Err(e) => return Err(e),
        }
    }
}

/// conv(image, bayar) ⊕ conv(image, srm); stride 1, no bias. The image is
/// padded by 2 with mirror reflection, so a constant image (or a constant
/// offset) produces exactly zero response everywhere.
pub fn noise_extractor_forward(g: &mut Graph, prefix: &str, image: Var) -> Result<Var> {
    let bayar = g.param(&format!("{prefix}.bayar.weight"))?;
    let err = constraint_error(g.value(bayar));
    if !(err <= BAYAR_CHECK_TOL) {
        return Err(Error::Contract(format!("bayar kernels are not projected (violation {err:.3e})")));
    }
    let srm = g.param(&format!("{prefix}.srm.weight"))?;
    let [_, _, h, w] = g.shape(image);
    let pad = CENTER;
    let padded = g.input(reflect_pad(g.value(image), pad)?);
    let a = g.conv(padded, bayar, None)?;
    let b = g.conv(padded, srm, None)?;
    let sum = g.add(a, b)?;
    g.crop(sum, pad, pad, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_examples() {
        let mut bank = BayarKernelBank { kernels: Tensor::from_elem((3, 3, 5, 5), 1.0 / 24.0) };
        bank.kernels[[0, 0, 2, 2]] = 7.0;
        bayar_project(&mut bank).unwrap();
        assert_eq!(bank.kernels[[0, 0, 2, 2]], -1.0);
        assert!((bank.kernels[[0, 0, 0, 0]] - 1.0 / 24.0).abs() < 1e-6);

        let mut bank = BayarKernelBank { kernels: Tensor::from_elem((3, 3, 5, 5), 2.0) };
        bayar_project(&mut bank).unwrap();
        assert!(bank.kernels.iter().filter(|v| **v != -1.0).all(|v| (v - 1.0 / 24.0).abs() < 1e-6));
        let once = bank.clone();
        bayar_project(&mut bank).unwrap();
        assert_eq!(bank, once);
        assert_eq!(bank.constraint_error(), 0.0);
    }

    #[test]
    fn projection_survives_f32_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut k = Tensor::from_shape_simple_fn((3, 3, 5, 5), || rng.random_range(-40.0..60.0));
        project_kernels(&mut k).unwrap();
        assert_eq!(constraint_error(&k), 0.0);
        assert_eq!(k.mapv(|v| v as f32 as f64), k);
    }

    #[test]
    fn projection_rejects_cancelling_slice() {
        let mut k = Tensor::from_elem((3, 3, 5, 5), 1.0 / 24.0);
        k.slice_mut(s![1, 2, .., ..]).fill(0.0);
        let mut bank = BayarKernelBank { kernels: k };
        assert!(matches!(bayar_project(&mut bank), Err(Error::Projection { out: 1, input: 2 })));
    }

    #[test]
    fn projection_rejects_near_cancelling_slice() {
        let mut k = Tensor::from_elem((1, 1, 5, 5), 0.25);
        k[[0, 0, 0, 0]] = -5.75 + (2.0f64).powi(-40);
        let mut bank = BayarKernelBank { kernels: k };
        assert!(matches!(bayar_project(&mut bank), Err(Error::Projection { out: 0, input: 0 })));
    }

    #[test]
    fn srm_bank_properties() {
        let base = srm_base_kernels();
        assert_eq!(base[0][[2, 2]], -1.0);
        for k in &base {
            assert!(k.sum().abs() < 1e-15);
        }
        let bank = srm_kernels();
        assert_eq!(bank.kernels().mapv(|v| v as f32 as f64), *bank.kernels());
        for o in 0..3 {
            for i in 0..3 {
                let slice = bank.kernels().slice(s![o, i, .., ..]);
                assert_eq!(slice.sum(), 0.0);
                let exact = base[o].mapv(|v| v / 3.0);
                assert!(slice.iter().zip(&exact).all(|(a, b)| (a - b).abs() < 1e-6));
            }
        }
    }

    fn store() -> ParamStore {
        let mut st = ParamStore::new();
        init_noise_front(&mut st, &mut ChaCha8Rng::seed_from_u64(9), "noise");
        st
    }

    fn forward(st: &ParamStore, img: Tensor) -> Result<Tensor> {
        let mut g = Graph::new(st, Mode::Eval);
        let x = g.input(img);
        let y = noise_extractor_forward(&mut g, "noise", x)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn constant_image_gives_zero() {
        let out = forward(&store(), Tensor::from_elem((1, 3, 12, 12), 77.0)).unwrap();
        assert_eq!(out.dim(), (1, 3, 12, 12));
        assert!(out.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn constant_offset_is_invisible() {
        let st = store();
        let img = Tensor::from_shape_fn((1, 3, 16, 16), |(_, c, y, x)| ((c * 7 + y * y + 3 * x) % 200) as f64);
        let a = forward(&st, img.clone()).unwrap();
        let b = forward(&st, img + 37.5).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_response_is_flipped_kernel_sum() {
        let st = store();
        // impulse far enough from the border that reflection never reaches it
        let mut img = Tensor::zeros((1, 3, 11, 11));
        img[[0, 1, 5, 5]] = 1.0;
        let out = forward(&st, img).unwrap();
        let total = st.tensor("noise.bayar.weight").unwrap() + st.tensor("noise.srm.weight").unwrap();
        for o in 0..3 {
            for dy in 0..5 {
                for dx in 0..5 {
                    // out[o, 5+2-dy, 5+2-dx] = k[o, 1, dy, dx]
                    let got = out[[0, o, 7 - dy, 7 - dx]];
                    assert!((got - total[[o, 1, dy, dx]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unprojected_bank_is_rejected() {
        let mut st = store();
        st.tensor_mut("noise.bayar.weight").unwrap()[[0, 0, 2, 2]] = 0.5;
        assert!(matches!(forward(&st, Tensor::zeros((1, 3, 8, 8))), Err(Error::Contract(_))));
        project_in_store(&mut st, &mut ChaCha8Rng::seed_from_u64(0), "noise").unwrap();
        assert!(forward(&st, Tensor::zeros((1, 3, 8, 8))).is_ok());
    }
}
