use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convflat::flatness::{
    dense_hessian, dense_hessian_batch, lipschitz_constant, relative_flatness,
    relative_flatness_full, softmax_curvature, symbolic_trace_batch, symbolic_trace_single,
};
use convflat::head::{forward_classes, gradient_classes, logits, softmax};
use convflat::oracles::{analytic_hvp_batch, hutchinson_trace, ProbeConfig};
use convflat::{
    ConvSpec, FlatnessVariant, KernelBank, KernelBankF32, PatchSummary, PatchSummaryF32, Tensor3,
    Tensor3F32, Tensor3F64,
};

const CAP: usize = 1 << 14;

#[derive(Clone, Debug)]
struct Instance {
    spec: ConvSpec,
    xs: Vec<Tensor3F64>,
    k: KernelBank<f64>,
    classes: Vec<usize>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (
        1usize..=3,
        3usize..=7,
        1usize..=3,
        2usize..=5,
        1usize..=4,
        1usize..=2,
        0usize..=1,
        any::<u64>(),
    )
        .prop_filter("kernel fits", |&(_, hw, k, _, _, _, pad, _)| {
            k <= hw + 2 * pad
        })
        .prop_map(|(c_in, hw, ks, c_out, batch, stride, pad, seed)| {
            let spec = ConvSpec::new(c_in, c_out, ks, ks, stride, pad, hw, hw).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = (0..batch)
                .map(|_| Tensor3::from_fn(c_in, hw, hw, |_, _, _| rng.random_range(-1.0..1.0)))
                .collect();
            let k = KernelBank::uniform(&spec, -0.5, 0.5, &mut rng);
            let classes = (0..batch).map(|_| rng.random_range(0..c_out)).collect();
            Instance {
                spec,
                xs,
                k,
                classes,
            }
        })
}

/// Pooled logits by direct sliding-window convolution.
fn conv_gap(x: &Tensor3F64, k: &KernelBank<f64>, spec: &ConvSpec) -> Vec<f64> {
    let (oh, ow) = (spec.out_h(), spec.out_w());
    (0..spec.c_out)
        .map(|j| {
            let mut total = 0.0;
            for oy in 0..oh {
                for ox in 0..ow {
                    for s in 0..spec.c_in {
                        let w = k.filter_channel(j, s);
                        for u in 0..spec.k_h {
                            for v in 0..spec.k_w {
                                let y = (oy * spec.stride + u) as isize - spec.padding as isize;
                                let xx = (ox * spec.stride + v) as isize - spec.padding as isize;
                                if y < 0 || xx < 0 || y >= spec.h as isize || xx >= spec.w as isize
                                {
                                    continue;
                                }
                                total += w[u * spec.k_w + v] * x.at(s, y as usize, xx as usize);
                            }
                        }
                    }
                }
            }
            total / (oh * ow) as f64
        })
        .collect()
}

fn cross_entropy(z: &[f64], class: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[class]
}

fn direct_loss(inst: &Instance, k: &KernelBank<f64>) -> f64 {
    inst.xs
        .iter()
        .zip(&inst.classes)
        .map(|(x, &c)| cross_entropy(&conv_gap(x, k, &inst.spec), c))
        .sum::<f64>()
        / inst.xs.len() as f64
}

fn perturbed(k: &KernelBank<f64>, spec: &ConvSpec, i: usize, delta: f64) -> KernelBank<f64> {
    let mut w = k.weights().clone();
    w.as_mut_slice()[i] += delta;
    KernelBank::new(spec, w).unwrap()
}

/// `(diag p - p p^T) kron (phi phi^T)`.
fn kron_hessian(p: &[f64], phi: &[f64]) -> DMatrix<f64> {
    let pv = DVector::from_column_slice(p);
    let a = DMatrix::from_diagonal(&pv) - &pv * pv.transpose();
    let f = DVector::from_column_slice(phi);
    a.kronecker(&(&f * f.transpose()))
}

fn to_dmatrix(m: &convflat::Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gap_commutes_with_convolution(inst in instance()) {
        let summary = PatchSummary::from_inputs(&inst.xs, &inst.spec).unwrap();
        let z = logits(&summary, &inst.k).unwrap();
        for (b, x) in inst.xs.iter().enumerate() {
            let direct = conv_gap(x, &inst.k, &inst.spec);
            for (j, d) in direct.iter().enumerate() {
                prop_assert!((z.get(b, j) - d).abs() <= 1e-12 * (1.0 + d.abs()));
            }
        }
    }

    #[test]
    fn average_patch_is_linear(inst in instance(), a in -3.0f64..3.0, c in -3.0f64..3.0) {
        let x = &inst.xs[0];
        let y = Tensor3::from_fn(x.channels(), x.height(), x.width(), |s, r, q| x.at(s, q % x.height(), r % x.width()) + 0.5);
        let mixed = Tensor3::from_fn(x.channels(), x.height(), x.width(), |s, r, q| a * x.at(s, r, q) + c * y.at(s, r, q));
        let sx = PatchSummary::from_inputs(std::slice::from_ref(x), &inst.spec).unwrap();
        let sy = PatchSummary::from_inputs(&[y], &inst.spec).unwrap();
        let sm = PatchSummary::from_inputs(&[mixed], &inst.spec).unwrap();
        for ((m, px), py) in sm.sample(0).iter().zip(sx.sample(0)).zip(sy.sample(0)) {
            prop_assert!((m - (a * px + c * py)).abs() <= 1e-12 * (1.0 + m.abs()));
        }
    }

    #[test]
    fn constant_logit_shift_leaves_trace(inst in instance(), shift in -5.0f64..5.0) {
        // adding the same filter to every kernel shifts all logits equally
        let summary = PatchSummary::from_inputs(&inst.xs, &inst.spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let common: Vec<f64> = (0..inst.spec.flat_dim()).map(|_| shift * rng.random::<f64>()).collect();
        let mut w = inst.k.weights().clone();
        for j in 0..inst.spec.c_out {
            for (v, c) in w.row_mut(j).iter_mut().zip(&common) {
                *v += c;
            }
        }
        let shifted = KernelBank::new(&inst.spec, w).unwrap();
        let a = forward_classes(&summary, &inst.k, &inst.classes).unwrap();
        let b = forward_classes(&summary, &shifted, &inst.classes).unwrap();
        let ta = symbolic_trace_batch(&a, &summary).unwrap();
        let tb = symbolic_trace_batch(&b, &summary).unwrap();
        prop_assert!((ta - tb).abs() <= 1e-10 * ta.abs().max(1e-12));
    }

    #[test]
    fn gradient_matches_central_differences(inst in instance()) {
        let summary = PatchSummary::from_inputs(&inst.xs, &inst.spec).unwrap();
        let out = forward_classes(&summary, &inst.k, &inst.classes).unwrap();
        let g = gradient_classes(&out, &summary, &inst.classes).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..inst.k.param_count() {
            let fd = (direct_loss(&inst, &perturbed(&inst.k, &inst.spec, i, h))
                - direct_loss(&inst, &perturbed(&inst.k, &inst.spec, i, -h)))
                / (2.0 * h);
            worst = worst.max((fd - g.as_slice()[i]).abs());
        }
        let scale = g.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
        prop_assert!(worst / scale < 1e-6, "relative error {}", worst / scale);
    }

    #[test]
    fn dense_hessian_matches_kronecker_oracle(inst in instance()) {
        let summary = PatchSummary::from_inputs(&inst.xs, &inst.spec).unwrap();
        let out = forward_classes(&summary, &inst.k, &inst.classes).unwrap();
        let mut oracle = DMatrix::zeros(inst.k.param_count(), inst.k.param_count());
        for b in 0..summary.batch_size() {
            let single = summary.single(b);
            let h = dense_hessian(out.probs.row(b), &single, CAP).unwrap();
            let o = kron_hessian(out.probs.row(b), summary.sample(b));
            prop_assert!((to_dmatrix(&h) - &o).amax() <= 1e-12 * (1.0 + o.amax()));
            oracle += o;
        }
        oracle /= summary.batch_size() as f64;
        let h = to_dmatrix(&dense_hessian_batch(&out, &summary, CAP).unwrap());
        prop_assert!((&h - &oracle).amax() <= 1e-12 * (1.0 + oracle.amax()));

        let sym = symbolic_trace_batch(&out, &summary).unwrap();
        prop_assert!((h.trace() - sym).abs() <= 1e-10 * sym.abs().max(1e-300));

        let eig = SymmetricEigen::new(h.clone()).eigenvalues;
        let top = eig.amax();
        prop_assert!(eig.iter().all(|&l| l >= -1e-10 * top.max(1e-12)));
        prop_assert!((eig.sum() - sym).abs() <= 1e-9 * sym.max(1e-12));
    }

    #[test]
    fn hvp_matches_dense_product(inst in instance(), seed in any::<u64>()) {
        let summary = PatchSummary::from_inputs(&inst.xs, &inst.spec).unwrap();
        let out = forward_classes(&summary, &inst.k, &inst.classes).unwrap();
        let h = to_dmatrix(&dense_hessian_batch(&out, &summary, CAP).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..h.ncols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = analytic_hvp_batch(&out, &summary, &v).unwrap();
        let dense = &h * DVector::from_column_slice(&v);
        for (a, b) in hv.iter().zip(dense.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn rescaling_symmetry(inst in instance(), lambda in prop::sample::select(vec![0.1, 1.0, 10.0, 100.0])) {
        let summary = PatchSummary::from_inputs(&inst.xs, &inst.spec).unwrap();
        let scaled_x: Vec<Tensor3F64> = inst.xs.iter().map(|x| x.scaled(lambda)).collect();
        let scaled_s = PatchSummary::from_inputs(&scaled_x, &inst.spec).unwrap();
        let scaled_k = inst.k.scaled(1.0 / lambda);
        let a = forward_classes(&summary, &inst.k, &inst.classes).unwrap();
        let b = forward_classes(&scaled_s, &scaled_k, &inst.classes).unwrap();
        for v in [FlatnessVariant::Table, FlatnessVariant::Definition] {
            let ka = relative_flatness(&a, &summary, &inst.k, v).unwrap();
            let kb = relative_flatness(&b, &scaled_s, &scaled_k, v).unwrap();
            prop_assert!((ka - kb).abs() <= 1e-9 * ka.abs().max(1e-300));
        }
        let fa = relative_flatness_full(&a, &summary, &inst.k).unwrap();
        let fb = relative_flatness_full(&b, &scaled_s, &scaled_k).unwrap();
        prop_assert!((fa - fb).abs() <= 1e-9 * fa.abs().max(1e-12));
        let ta = symbolic_trace_batch(&a, &summary).unwrap();
        let tb = symbolic_trace_batch(&b, &scaled_s).unwrap();
        prop_assert!((tb - lambda * lambda * ta).abs() <= 1e-9 * tb.abs().max(1e-300));
    }

    #[test]
    fn flatness_variant_ordering(inst in instance()) {
        let summary = PatchSummary::from_inputs(&inst.xs, &inst.spec).unwrap();
        let out = forward_classes(&summary, &inst.k, &inst.classes).unwrap();
        let table = relative_flatness(&out, &summary, &inst.k, FlatnessVariant::Table).unwrap();
        let def = relative_flatness(&out, &summary, &inst.k, FlatnessVariant::Definition).unwrap();
        let full = relative_flatness_full(&out, &summary, &inst.k).unwrap();
        prop_assert!(def >= 0.0 && full >= -1e-12 * table);
        prop_assert!(def <= table * (1.0 + 1e-12));
    }

    #[test]
    fn trace_is_lipschitz_in_weights(inst in instance(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = &inst.xs[0];
        let summary = PatchSummary::from_inputs(std::slice::from_ref(x), &inst.spec).unwrap();
        let l = lipschitz_constant(&summary, inst.spec.c_out).unwrap();
        let trace_at = |k: &KernelBank<f64>| {
            let out = forward_classes(&summary, k, &inst.classes[..1]).unwrap();
            symbolic_trace_single(out.probs.row(0), &summary).unwrap()
        };
        for _ in 0..8 {
            let k1 = KernelBank::uniform(&inst.spec, -1.0, 1.0, &mut rng);
            let k2 = KernelBank::uniform(&inst.spec, -1.0, 1.0, &mut rng);
            let dist: f64 = k1.as_slice().iter().zip(k2.as_slice()).map(|(a, b): (&f64, &f64)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!((trace_at(&k1) - trace_at(&k2)).abs() <= l * dist * (1.0 + 1e-12));
        }
    }
}

proptest! {
    #[test]
    fn curvature_mass_bounds(z in prop::collection::vec(-20.0f64..20.0, 2..12)) {
        let p = softmax(&z);
        let c = p.len() as f64;
        let alpha = softmax_curvature(&p);
        prop_assert!(alpha >= 0.0);
        prop_assert!(alpha <= (c - 1.0) / c + 1e-12);
        let uniform = softmax_curvature(&vec![1.0 / c; p.len()]);
        prop_assert!((uniform - (c - 1.0) / c).abs() < 1e-12);
    }
}

#[test]
fn hutchinson_is_unbiased_on_the_hessian() {
    let spec = ConvSpec::square(2, 4, 6, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<Tensor3F64> = (0..3)
        .map(|_| Tensor3::from_fn(2, 6, 6, |_, _, _| rng.random::<f64>()))
        .collect();
    let k = KernelBank::uniform(&spec, -0.3, 0.3, &mut rng);
    let summary = PatchSummary::from_inputs(&xs, &spec).unwrap();
    let out = forward_classes(&summary, &k, &[0, 1, 3]).unwrap();
    let exact = symbolic_trace_batch(&out, &summary).unwrap();
    let est = hutchinson_trace(
        |v: &[f64], hv: &mut [f64]| {
            hv.copy_from_slice(&analytic_hvp_batch(&out, &summary, v).unwrap());
        },
        k.param_count(),
        &ProbeConfig::new(4000, 5),
    )
    .unwrap();
    assert!(
        (est.estimate - exact).abs() < 4.0 * est.std_error,
        "{} vs {exact} (se {})",
        est.estimate,
        est.std_error
    );
}

#[test]
fn single_precision_aliases_track_double() {
    let spec = ConvSpec::square(3, 5, 10, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs64: Vec<Tensor3F64> = (0..4)
        .map(|_| Tensor3::from_fn(3, 10, 10, |_, _, _| rng.random::<f64>()))
        .collect();
    let k64 = KernelBank::uniform(&spec, -0.2, 0.2, &mut rng);
    let xs32: Vec<Tensor3F32> = xs64
        .iter()
        .map(|x| Tensor3::from_fn(3, 10, 10, |c, y, w| x.at(c, y, w) as f32))
        .collect();
    let w32 = convflat::MatrixF32::from_vec(
        5,
        spec.flat_dim(),
        k64.as_slice().iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let k32: KernelBankF32 = KernelBank::new(&spec, w32).unwrap();
    let classes = [0, 2, 4, 1];

    let s64 = PatchSummary::from_inputs(&xs64, &spec).unwrap();
    let s32: PatchSummaryF32 = PatchSummary::from_inputs(&xs32, &spec).unwrap();
    let o64 = forward_classes(&s64, &k64, &classes).unwrap();
    let o32 = forward_classes(&s32, &k32, &classes).unwrap();
    let t64 = symbolic_trace_batch(&o64, &s64).unwrap();
    let t32 = symbolic_trace_batch(&o32, &s32).unwrap();
    assert_relative_eq!(t32 as f64, t64, max_relative = 1e-5);
    let f64v = relative_flatness(&o64, &s64, &k64, FlatnessVariant::Table).unwrap();
    let f32v = relative_flatness(&o32, &s32, &k32, FlatnessVariant::Table).unwrap();
    assert_relative_eq!(f32v as f64, f64v, max_relative = 1e-5);
}
