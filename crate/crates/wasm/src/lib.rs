use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use zoo_core::attackspace::{importance_map, AttackSpace, Stage};
use zoo_core::dataset::{synthetic_dataset, LabeledImage};
use zoo_core::loss::AttackGoal;
use zoo_core::model::{accuracy, softmax, train, Network, TrainConfig};
use zoo_core::numerics::Tensor;
use zoo_core::optimizer::{solve, SolverConfig};
use zoo_core::oracle::{NetworkOracle, Oracle};

const SIDE: usize = 16;
const CLASSES: usize = 4;

fn js(e: zoo_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Bar classifier trained in the page, plus the images it is tested on.
#[wasm_bindgen]
pub struct Demo {
    net: Network,
    samples: Vec<LabeledImage>,
    accuracy: f64,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Demo::build(u64::from(seed)).map_err(js)
    }

    pub fn side(&self) -> usize {
        SIDE
    }

    pub fn classes(&self) -> usize {
        CLASSES
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn image(&self, index: usize) -> Vec<f64> {
        self.samples[index % self.samples.len()].image.data().to_vec()
    }

    pub fn label(&self, index: usize) -> usize {
        self.samples[index % self.samples.len()].label
    }

    pub fn probabilities(&self, pixels: &[f64]) -> Result<Vec<f64>, JsError> {
        let x = Tensor::new(vec![SIDE, SIDE, 1], pixels.to_vec()).map_err(js)?;
        Ok(softmax(self.net.forward_logits(&x).map_err(js)?.data()))
    }

    /// Attacks sample `index`; `target < 0` means untargeted.
    pub fn attack(
        &self,
        index: usize,
        target: i32,
        iterations: usize,
        step_size: f64,
        c: f64,
        seed: u32,
    ) -> Result<Outcome, JsError> {
        self.run_attack(index, usize::try_from(target).ok(), iterations, step_size, c, u64::from(seed))
            .map_err(js)
    }
}

impl Demo {
    fn build(seed: u64) -> zoo_core::Result<Demo> {
        let train_set = synthetic_dataset(seed, 400, SIDE, CLASSES)?;
        let samples = synthetic_dataset(seed.wrapping_add(1), 40, SIDE, CLASSES)?;
        let init = Network::mlp(&[SIDE, SIDE, 1], &[32], CLASSES, seed)?;
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.1,
            seed,
            ..TrainConfig::default()
        };
        let (net, _) = train(&init, &train_set, &cfg)?;
        let accuracy = accuracy(&net, &samples)?;
        Ok(Demo { net, samples, accuracy })
    }

    fn run_attack(
        &self,
        index: usize,
        target: Option<usize>,
        iterations: usize,
        step_size: f64,
        c: f64,
        seed: u64,
    ) -> zoo_core::Result<Outcome> {
        let sample = &self.samples[index % self.samples.len()];
        let goal = match target {
            Some(t) => AttackGoal::targeted(t),
            None => AttackGoal::untargeted(sample.label),
        };
        let cfg = SolverConfig {
            step_size,
            max_iterations: iterations,
            batch: 32,
            ..SolverConfig::default()
        };
        let oracle = NetworkOracle::new(self.net.clone());
        let space = AttackSpace::full(&[SIDE, SIDE, 1])?;
        let r = solve(&sample.image, &goal, c, &cfg, &space, &oracle, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let noise = r.adversarial_image.sub(&sample.image)?;
        Ok(Outcome {
            success: r.success,
            l2: r.l2_distortion,
            queries: oracle.total_queries() as f64,
            iterations: r.iterations,
            predicted: self.net.predict(&r.adversarial_image)?,
            adversarial: r.adversarial_image.into_data(),
            noise: noise.into_data(),
            losses: r.loss_trace.iter().map(|p| p.total_loss).collect(),
        })
    }
}

#[wasm_bindgen]
pub struct Outcome {
    success: bool,
    l2: f64,
    queries: f64,
    iterations: usize,
    predicted: usize,
    adversarial: Vec<f64>,
    noise: Vec<f64>,
    losses: Vec<f64>,
}

#[wasm_bindgen]
impl Outcome {
    #[wasm_bindgen(getter)]
    pub fn success(&self) -> bool {
        self.success
    }

    #[wasm_bindgen(getter)]
    pub fn l2(&self) -> f64 {
        self.l2
    }

    #[wasm_bindgen(getter)]
    pub fn queries(&self) -> f64 {
        self.queries
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    #[wasm_bindgen(getter)]
    pub fn predicted(&self) -> usize {
        self.predicted
    }

    pub fn adversarial(&self) -> Vec<f64> {
        self.adversarial.clone()
    }

    pub fn noise(&self) -> Vec<f64> {
        self.noise.clone()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }
}

fn decode(y: &[f64], grid_h: usize, grid_w: usize, height: usize, width: usize) -> zoo_core::Result<Vec<f64>> {
    let space = AttackSpace::new(&[height, width, 1], vec![Stage::new(grid_h, grid_w, 0)], None)?;
    let y = Tensor::new(vec![grid_h, grid_w, 1], y.to_vec())?;
    Ok(space.decode(&y)?.into_data())
}

/// Bilinear decode of a one-channel `grid_h×grid_w` noise grid to `height×width`.
#[wasm_bindgen]
pub fn upscale_noise(y: &[f64], grid_h: usize, grid_w: usize, height: usize, width: usize) -> Result<Vec<f64>, JsError> {
    decode(y, grid_h, grid_w, height, width).map_err(js)
}

fn importance(delta: &[f64], height: usize, width: usize, grid_h: usize, grid_w: usize) -> zoo_core::Result<Vec<f64>> {
    let dx = Tensor::new(vec![height, width, 1], delta.to_vec())?;
    let kernel = (height.min(width) / 8).max(1);
    Ok(importance_map(&dx, kernel, grid_h, grid_w)?.probs().to_vec())
}

/// Sampling probabilities over a `grid_h×grid_w` grid from a one-channel
/// `height×width` perturbation.
#[wasm_bindgen]
pub fn importance_probabilities(
    delta: &[f64],
    height: usize,
    width: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<Vec<f64>, JsError> {
    importance(delta, height, width, grid_h, grid_w).map_err(js)
}
