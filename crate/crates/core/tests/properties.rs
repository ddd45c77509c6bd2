use nalgebra::DMatrix;
use proptest::prelude::*;

use pipe_rom::bench::{error_curve, rmse};
use pipe_rom::field_data::{
    read_snp1, reynolds, write_snp1, FieldLayout, FieldSpec, FluidProperties, PipeGeometry, SnapshotMatrix,
};
use pipe_rom::opinf::{kron_compressed, quadratic_index, quadratic_width};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1e3..1e3f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn triple() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c), matrix(r, c)))
}

proptest! {
    #[test]
    fn rmse_is_symmetric_and_triangle_bounded((x, y, z) in triple()) {
        let xy = rmse(&x, &y, None).unwrap();
        prop_assert_eq!(xy, rmse(&y, &x, None).unwrap());
        let xz = rmse(&x, &z, None).unwrap();
        let yz = rmse(&y, &z, None).unwrap();
        prop_assert!(xz <= xy + yz + 1e-9 * (xy + yz).max(1.0));
    }

    #[test]
    fn curve_squares_average_to_rmse_squared((x, y, _) in triple()) {
        let r = rmse(&x, &y, None).unwrap();
        let c = error_curve(&x, &y, None).unwrap();
        let mean_sq = c.iter().map(|e| e * e).sum::<f64>() / c.len() as f64;
        prop_assert!((mean_sq - r * r).abs() <= 1e-12 * (r * r).max(1.0));
    }

    #[test]
    fn scaling_round_trips(
        offset in -1e5..1e5f64,
        factor in 1e-3..1e4f64,
        raw in matrix(4, 3),
    ) {
        let mut spec = FieldSpec::new("p", 1, 4);
        spec.scale_offset = vec![offset];
        spec.scale_factor = vec![factor];
        let layout = FieldLayout::new(vec![spec]).unwrap();
        let back = layout.unscale(&layout.scale(&raw));
        prop_assert!((back - &raw).amax() <= 1e-9 * (1.0 + offset.abs() + raw.amax()));
    }

    #[test]
    fn snp1_round_trips(values in matrix(6, 4), t0 in -10.0..10.0f64, dt in 1e-4..1.0f64) {
        let layout = FieldLayout::new(vec![FieldSpec::new("p", 1, 2), FieldSpec::new("U", 2, 2)]).unwrap();
        let s = SnapshotMatrix::with_spacing(layout, t0, dt, values).unwrap();
        let back = read_snp1(&write_snp1(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn reynolds_is_homogeneous(speed in 0.1..100.0f64, k in 0.1..10.0f64) {
        let fluid = FluidProperties::HYDROGEN;
        let pipe = PipeGeometry::TABLE_PIPE;
        let a = reynolds(&fluid, speed, &pipe).unwrap().value;
        let b = reynolds(&fluid, k * speed, &pipe).unwrap().value;
        prop_assert!((b - k * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn compressed_kron_holds_every_product_once(x in prop::collection::vec(-5.0..5.0f64, 1..7)) {
        let r = x.len();
        let k = kron_compressed(&x);
        prop_assert_eq!(k.len(), quadratic_width(r));
        for i in 0..r {
            for j in i..r {
                prop_assert_eq!(k[quadratic_index(r, i, j)], x[i] * x[j]);
            }
        }
    }
}
