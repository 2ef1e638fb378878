//! Block-level oracles: the RFE against an explicit convolution-as-matrix
//! construction, the redistribution blocks against scalar-loop references,
//! and the algebraic block invariants (homogeneity, batch independence,
//! determinism).

mod util;

use polypseg_core::blocks::{Cpfr, Pfr, Rfe, RfeConfig, ScaleMode};
use polypseg_core::params::ParamStore;
use polypseg_core::rng::Rng;
use polypseg_core::tensor::Tensor;
use util::{random_tensor, redistribution_oracle, ConvMatrix, ProjOracle};

fn proj_oracle(store: &ParamStore<f64>, path: &str) -> ProjOracle {
    let w = store.value(store.id_of(&format!("{path}.weight")).unwrap());
    let b = store.value(store.id_of(&format!("{path}.bias")).unwrap());
    ProjOracle::from_params(w, b)
}

#[test]
fn rfe_matches_dense_matrix_oracle() {
    // use_norm_act off so the block is an exact linear map.
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::seeded(42);
    let cfg = RfeConfig {
        in_channels: 8,
        out_channels: 4,
        branch_kernels: vec![1, 3, 5, 7],
        use_norm_act: false,
    };
    let rfe = Rfe::init(&mut store, &mut rng, "rfe", cfg).unwrap();
    let (h, w) = (9, 9);
    let x = random_tensor(&[1, 8, h, w], 7, -1.0, 1.0);

    let mat = |path: &str| {
        let wt = store.value(store.id_of(&format!("{path}.weight")).unwrap());
        let bt = store.value(store.id_of(&format!("{path}.bias")).unwrap());
        ConvMatrix::from_weights(wt, bt, h, w)
    };

    // Branch 1 is a plain 1x1; branches j > 1 compose 1x1 -> 1xj -> jx1.
    let mut branch_outputs = Vec::new();
    branch_outputs.push(mat("rfe.branch1.conv").apply(x.data()));
    for j in [3usize, 5, 7] {
        let pre = mat(&format!("rfe.branch{j}.pre.conv")).apply(x.data());
        let horiz = mat(&format!("rfe.branch{j}.horiz.conv")).apply(&pre);
        let vert = mat(&format!("rfe.branch{j}.vert.conv")).apply(&horiz);
        branch_outputs.push(vert);
    }
    let concat: Vec<f64> = branch_outputs.concat();
    let expected = mat("rfe.reduce.conv").apply(&concat);

    let actual = rfe.apply(&store, &x).unwrap();
    assert_eq!(actual.shape(), [1, 4, h, w]);
    let max_diff = actual
        .data()
        .iter()
        .zip(&expected)
        .map(|(a, e)| (a - e).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-10, "max abs diff {max_diff}");
}

#[test]
fn pfr_matches_dot_scalar_oracle_on_many_shapes() {
    // Batch-matmul path against the flatten-and-dot loop, 100 random shapes.
    let mut shape_rng = Rng::seeded(99);
    for case in 0..100 {
        let c = 1 + shape_rng.below(6);
        let n = 1 + shape_rng.below(3);
        let h = 1 + shape_rng.below(7);
        let w = 1 + shape_rng.below(7);
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seeded(1000 + case);
        let pfr = Pfr::init(&mut store, &mut rng, "pfr", c, ScaleMode::Raw);
        let x = random_tensor(&[n, c, h, w], 2000 + case, -1.5, 1.5);
        let actual = pfr.apply(&store, &x).unwrap();
        let expected = redistribution_oracle(
            &x,
            &proj_oracle(&store, "pfr.q"),
            &proj_oracle(&store, "pfr.k"),
            &proj_oracle(&store, "pfr.v"),
            false,
        );
        let denom = expected
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(1e-12f64, f64::max);
        let rel = actual.max_abs_diff(&expected) / denom;
        assert!(rel < 1e-6, "case {case} shape ({n},{c},{h},{w}): rel err {rel}");
    }
}

#[test]
fn pfr_inv_chw_matches_scaled_oracle() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::seeded(5);
    let pfr = Pfr::init(&mut store, &mut rng, "pfr", 4, ScaleMode::InvChw);
    let x = random_tensor(&[2, 4, 5, 5], 6, -1.0, 1.0);
    let actual = pfr.apply(&store, &x).unwrap();
    let expected = redistribution_oracle(
        &x,
        &proj_oracle(&store, "pfr.q"),
        &proj_oracle(&store, "pfr.k"),
        &proj_oracle(&store, "pfr.v"),
        true,
    );
    assert!(actual.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn cpfr_matches_concat_oracle() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::seeded(8);
    let c = 3;
    let cpfr = Cpfr::init(&mut store, &mut rng, "cpfr", c, ScaleMode::Raw);
    let low = random_tensor(&[2, c, 4, 6], 9, -1.0, 1.0);
    let high = random_tensor(&[2, c, 4, 6], 10, -1.0, 1.0);
    let actual = cpfr.apply(&store, &low, &high).unwrap();

    // Concatenate channels, redistribute over 2C, then reduce via the out
    // projection — all with the scalar-loop oracle.
    let (n, _, h, w) = low.dims4();
    let mut cat = Tensor::<f64>::zeros(&[n, 2 * c, h, w]);
    let hw = h * w;
    for i in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                cat.data_mut()[(i * 2 * c + ch) * hw + p] = low.data()[(i * c + ch) * hw + p];
                cat.data_mut()[(i * 2 * c + c + ch) * hw + p] =
                    high.data()[(i * c + ch) * hw + p];
            }
        }
    }
    let allocated = redistribution_oracle(
        &cat,
        &proj_oracle(&store, "cpfr.q"),
        &proj_oracle(&store, "cpfr.k"),
        &proj_oracle(&store, "cpfr.v"),
        false,
    );
    let out_proj = proj_oracle(&store, "cpfr.out");
    let mut expected = Tensor::<f64>::zeros(&[n, c, h, w]);
    for i in 0..n {
        let slice = &allocated.data()[i * 2 * c * hw..(i + 1) * 2 * c * hw];
        let reduced = out_proj.apply(slice, hw);
        expected.data_mut()[i * c * hw..(i + 1) * c * hw].copy_from_slice(&reduced);
    }
    let denom = expected
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(1e-12f64, f64::max);
    assert!(actual.max_abs_diff(&expected) / denom < 1e-10);
}

#[test]
fn pfr_is_cubically_homogeneous() {
    // With zero biases and raw scaling, Q, K, V are linear, so scaling the
    // input by alpha scales the output by alpha^3.
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::seeded(11);
    let pfr = Pfr::init(&mut store, &mut rng, "pfr", 5, ScaleMode::Raw);
    for proj in ["pfr.q.bias", "pfr.k.bias", "pfr.v.bias"] {
        store.set(proj, Tensor::zeros(&[5])).unwrap();
    }
    let x = random_tensor(&[2, 5, 4, 4], 12, -1.0, 1.0);
    let base = pfr.apply(&store, &x).unwrap();
    for alpha in [2.0f64, -1.5, 0.25] {
        let scaled = pfr.apply(&store, &x.map(|v| v * alpha)).unwrap();
        let expected = base.map(|v| v * alpha.powi(3));
        let denom = expected
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(1e-12f64, f64::max);
        assert!(
            scaled.max_abs_diff(&expected) / denom < 1e-10,
            "alpha {alpha}"
        );
    }
}

#[test]
fn blocks_treat_batch_elements_independently() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::seeded(13);
    let pfr = Pfr::init(&mut store, &mut rng, "pfr", 4, ScaleMode::Raw);
    let rfe = Rfe::init(&mut store, &mut rng, "rfe", RfeConfig::new(4, 4)).unwrap();

    let x = random_tensor(&[3, 4, 5, 5], 14, -1.0, 1.0);
    let per = 4 * 25;
    // Reverse the batch order.
    let mut reversed = Tensor::<f64>::zeros(&[3, 4, 5, 5]);
    for i in 0..3 {
        reversed.data_mut()[i * per..(i + 1) * per]
            .copy_from_slice(&x.data()[(2 - i) * per..(3 - i) * per]);
    }
    for (label, out, out_rev) in [
        (
            "pfr",
            pfr.apply(&store, &x).unwrap(),
            pfr.apply(&store, &reversed).unwrap(),
        ),
        (
            "rfe",
            rfe.apply(&store, &x).unwrap(),
            rfe.apply(&store, &reversed).unwrap(),
        ),
    ] {
        for i in 0..3 {
            assert_eq!(
                &out.data()[i * per..(i + 1) * per],
                &out_rev.data()[(2 - i) * per..(3 - i) * per],
                "{label}: batch element {i} changed under permutation"
            );
        }
    }
}

#[test]
fn block_outputs_are_bit_deterministic() {
    let build = || {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seeded(21);
        let rfe = Rfe::init(&mut store, &mut rng, "rfe", RfeConfig::new(6, 4)).unwrap();
        let x = random_tensor(&[2, 6, 7, 7], 22, -1.0, 1.0);
        rfe.apply(&store, &x).unwrap()
    };
    let a = build();
    let b = build();
    assert_eq!(a.data(), b.data());
}

#[test]
fn pfr_reports_magnitude_blow_up_with_batch_index() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::seeded(30);
    let pfr = Pfr::init(&mut store, &mut rng, "pfr", 2, ScaleMode::Raw);
    // Second batch element overflows the correlation scalar.
    let mut x = Tensor::<f64>::full(&[2, 2, 2, 2], 1.0);
    for v in x.data_mut()[8..].iter_mut() {
        *v = 1e200;
    }
    match pfr.apply(&store, &x) {
        Err(polypseg_core::Error::NonFinite { batch, .. }) => assert_eq!(batch, Some(1)),
        other => panic!("expected non-finite error, got {:?}", other.map(|t| t.shape().to_vec())),
    }
}
