use wgicp::covariance::CovarianceParams;
use wgicp::geometry::{Point3, PointCloud};
use wgicp::gradcheck::{run_gradcheck, GradcheckConfig};
use wgicp::registration::{pose_gradients, LmParams, WgicpProblem};
use wgicp::synthetic::{outlier_pair, rigid_pair, OutlierParams, PairParams};
use wgicp::weights::{train, TrainConfig, TrainPair, WeightModel};

#[test]
fn weight_gradients_match_finite_differences_on_50_points() {
    let report = run_gradcheck(&GradcheckConfig {
        problems: 1,
        points: 50,
        iterations: 5,
        check_model: false,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(report.checked, 100);
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn parameter_gradients_match_finite_differences_on_30_points() {
    let report = run_gradcheck(&GradcheckConfig {
        problems: 1,
        points: 30,
        iterations: 5,
        ..Default::default()
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn corrupted_adjoint_is_caught() {
    let report = run_gradcheck(&GradcheckConfig {
        problems: 1,
        points: 20,
        iterations: 2,
        check_model: false,
        corrupt_adjoint: true,
        ..Default::default()
    })
    .unwrap();
    assert!(!report.passes(1e-3), "{report:?}");
}

#[test]
fn mismatched_source_point_gradient_lowers_its_weight() {
    let pair = rigid_pair(
        5,
        &PairParams {
            points: 80,
            noise: 0.0,
            max_angle: 2f64.to_radians(),
            max_translation: 0.05,
            ..Default::default()
        },
    );
    // A source point 0.4 m off the surface its neighbors lie on.
    let p = pair.source.points()[0];
    let mut points = pair.source.points().to_vec();
    points.push(Point3::new(p.x + 0.4, p.y + 0.4, p.z + 0.4));
    let cov = CovarianceParams {
        k_neighbors: 10,
        ..Default::default()
    };
    let source = wgicp::covariance::estimate_covariances(&PointCloud::new(points).unwrap(), &cov).unwrap();
    let target = wgicp::covariance::estimate_covariances(&pair.target, &cov).unwrap();
    let n = source.len();
    let loss_at = |w: f64| {
        let mut weights = vec![1.0; n];
        weights[n - 1] = w;
        let problem = WgicpProblem::new(source.clone().with_weights(weights).unwrap(), target.clone())
            .with_lm(LmParams::differentiable().with_iterations(10));
        pose_gradients(&problem, &pair.gt).unwrap()
    };
    let tape = loss_at(0.5).source[n - 1];
    let h = 1e-4;
    let fd = (loss_at(0.5 + h).loss - loss_at(0.5 - h).loss) / (2.0 * h);
    assert!(tape > 0.0, "tape {tape}");
    assert!(fd > 0.0, "finite difference {fd}");
}

#[test]
fn training_is_reproducible() {
    let cov = CovarianceParams {
        k_neighbors: 10,
        ..Default::default()
    };
    let pairs: Vec<TrainPair> = (0..2)
        .map(|s| {
            let p = outlier_pair(s, &OutlierParams::default()).with_covariances(&cov).unwrap();
            TrainPair {
                source: p.source,
                target: p.target,
                gt: p.gt,
            }
        })
        .collect();
    let config = TrainConfig {
        epochs: 2,
        solver: LmParams::differentiable().with_iterations(3),
        ..Default::default()
    };
    let model = WeightModel::new(1);
    let a = train(&model, &pairs, &config).unwrap();
    let b = train(&model, &pairs, &config).unwrap();
    assert_eq!(a.loss_history.len(), 2);
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.model.params(), b.model.params());
}
