use dualtask::experiment::{validation_batches, TrainRunConfig};
use dualtask::model::{
    init_model, DenoiserParams, DiffusionSchedule, LossModel, ModelError, PreparedSample,
    VPredictionLoss,
};
use dualtask::telemetry::{
    flatten, measure_checkpoint, parse_telemetry_csv, presync_gradient, unflatten,
    write_telemetry_header, write_telemetry_row, MeasureSpec,
};
use dualtask::tensor::{Gradients, RngStream, Tensor};

fn setup(shards: usize) -> (DenoiserParams, VPredictionLoss, MeasureSpec) {
    let cfg = TrainRunConfig::default();
    let params = init_model(&cfg.model, 11).unwrap();
    let schedule = DiffusionSchedule::cosine(cfg.data.diffusion_steps).unwrap();
    let (val_img, val_vid) = validation_batches(&cfg, 11).unwrap();
    let spec = MeasureSpec {
        val_img,
        val_vid,
        opts: cfg.switch.measure_options(),
        schedule: schedule.clone(),
        seed: 99,
        shards,
    };
    (params, VPredictionLoss { schedule }, spec)
}

#[test]
fn shard_count_does_not_change_presync_gradient() {
    let (params, model, spec) = setup(1);
    let (l1, g1) = presync_gradient(&params, &model, &spec.val_img, &spec, 0).unwrap();
    for shards in [2, 4, 8] {
        let spec = MeasureSpec {
            shards,
            ..spec.clone()
        };
        let (l, g) = presync_gradient(&params, &model, &spec.val_img, &spec, 0).unwrap();
        assert!((l - l1).abs() <= 1e-10 * l1.abs().max(1.0));
        let scale = g1.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g.values.iter().zip(&g1.values) {
            assert!(
                (a - b).abs() <= 1e-10 * scale,
                "shards {shards}: {a} vs {b}"
            );
        }
    }
    let spec = MeasureSpec { shards: 3, ..spec };
    assert!(presync_gradient(&params, &model, &spec.val_img, &spec, 0).is_err());
}

#[test]
fn repeated_measurement_is_bit_identical() {
    let (params, model, spec) = setup(2);
    let a = measure_checkpoint(&params, &model, &spec, 5).unwrap();
    let b = measure_checkpoint(&params, &model, &spec, 5).unwrap();
    assert_eq!(a, b);
    let phi = a.phi.unwrap();
    assert!((-1.0..=1.0).contains(&phi));
    assert!(a.norm_img > 0.0 && a.norm_vid > 0.0);
}

#[test]
fn flatten_round_trip_is_exact() {
    let (params, model, spec) = setup(1);
    let mut rng = RngStream::new(3, 0);
    let grads: Gradients = params
        .trainable_index()
        .iter()
        .map(|e| {
            let n = e.shape.iter().product();
            (
                e.id,
                Tensor::new(e.shape.clone(), (0..n).map(|_| rng.normal()).collect()).unwrap(),
            )
        })
        .collect();
    let flat = flatten(
        &grads,
        params.trainable_index(),
        dualtask::model::TaskKind::Identity,
        0,
    )
    .unwrap();
    assert_eq!(unflatten(&flat).unwrap(), grads);
    let (_, g) = presync_gradient(&params, &model, &spec.val_vid, &spec, 0).unwrap();
    let back = flatten(
        &unflatten(&g).unwrap(),
        params.trainable_index(),
        g.task,
        g.step,
    )
    .unwrap();
    assert_eq!(back.values, g.values);
}

/// Predicts every target exactly: zero loss, zero gradient.
struct Perfect;

impl LossModel for Perfect {
    fn sample_loss(
        &self,
        params: &DenoiserParams,
        _: &PreparedSample,
    ) -> Result<(f64, Gradients), ModelError> {
        let zeros = params
            .trainable_index()
            .iter()
            .map(|e| (e.id, Tensor::zeros(&e.shape)))
            .collect();
        Ok((0.0, zeros))
    }
}

#[test]
fn perfect_predictor_is_degenerate_and_logs_nan() {
    let (params, _, spec) = setup(2);
    let rec = measure_checkpoint(&params, &Perfect, &spec, 0).unwrap();
    assert!(rec.degenerate);
    assert_eq!(rec.phi, None);
    assert_eq!((rec.norm_img, rec.norm_vid), (0.0, 0.0));
    let mut csv = Vec::new();
    write_telemetry_header(&mut csv).unwrap();
    write_telemetry_row(&mut csv, &rec).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("0,nan,0,0"));
    let rows = parse_telemetry_csv(&text).unwrap();
    assert!(rows[0].phi.is_nan());
}

#[test]
fn telemetry_csv_round_trip() {
    let (params, model, spec) = setup(2);
    let rec = measure_checkpoint(&params, &model, &spec, 50).unwrap();
    let mut csv = Vec::new();
    write_telemetry_header(&mut csv).unwrap();
    write_telemetry_row(&mut csv, &rec).unwrap();
    let rows = parse_telemetry_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].step, 50);
    assert_eq!(rows[0].phi, rec.phi.unwrap());
    assert_eq!(
        (rows[0].norm_img, rows[0].norm_vid),
        (rec.norm_img, rec.norm_vid)
    );
}
