//! Shared fixtures for the kernel benchmarks.

use fedunlearn_core::data::generate_synthetic;
use fedunlearn_core::model::Batch;
use fedunlearn_core::rng::{rng_for, stream};
use fedunlearn_core::{Model, ModelSpec, ParamVector};

/// A model at the default desk-scale size, its initial parameters and one batch.
pub struct Fixture {
    pub model: Model,
    pub theta: ParamVector,
    pub batch: Batch,
}

pub fn fixture(batch_size: usize) -> Fixture {
    let spec = ModelSpec::default();
    let data = generate_synthetic(spec.num_classes, spec.input_dim, batch_size.div_ceil(spec.num_classes), 3.0, 7)
        .expect("synthetic data");
    // rows are grouped by class, so stride across them
    let stride = data.len() / batch_size;
    let idx: Vec<usize> = (0..batch_size).map(|i| i * stride).collect();
    let batch = data.batch(&idx).expect("batch");
    let mut model = Model::new(spec).expect("valid spec");
    let theta = model.init_params(&mut rng_for(7, &[stream::MODEL_INIT]));
    model.fit_centroid_head(&theta, &data.as_batch().expect("batch")).expect("head");
    Fixture { model, theta, batch }
}

/// A deterministic small perturbation of `theta`, usable as a task vector.
pub fn perturbation(theta: &ParamVector, scale: f64) -> ParamVector {
    let values = theta.iter().enumerate().map(|(i, _)| scale * ((i % 7) as f64 - 3.0)).collect();
    ParamVector::new(values).expect("finite")
}
