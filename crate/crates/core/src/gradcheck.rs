//! Central finite-difference check of the analytic query-encoder gradient
//! of the filtered dual-view loss.

use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{Activation, EncoderParams, EncoderSpec, Gradients, Tensors};
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numeric::Matrix;
use crate::objective::{filtered_dual_view_loss, LossConfig};
use crate::rng::SeededRng;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries whose true gradient
/// is zero (dead ReLUs) compare on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub const MAX_DIM: usize = 32;
pub const MAX_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Input and embedding width; the hidden layer is twice as wide.
    pub dim: usize,
    pub batch: usize,
    pub queue: usize,
    pub activation: Activation,
    pub loss: LossConfig,
    /// Adds 1e-2 to one analytic gradient entry, to confirm the detector fires.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 8,
            batch: 4,
            queue: 32,
            activation: Activation::Relu,
            loss: LossConfig::default(),
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Problem instance: encoder, paired views, key embeddings and bank.
pub struct Instance {
    pub params: EncoderParams,
    pub view1: Matrix,
    pub keys: Matrix,
    pub bank: MemoryBank,
    pub loss: LossConfig,
}

impl Instance {
    pub fn new(cfg: &GradCheckConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.dim > MAX_DIM || cfg.batch == 0 || cfg.batch > MAX_BATCH {
            return Err(Error::ConfigInvalid(format!(
                "grad-check is limited to 1 <= dim <= {MAX_DIM} and 1 <= batch <= {MAX_BATCH}, got dim {} batch {}",
                cfg.dim, cfg.batch
            )));
        }
        if cfg.queue == 0 || !cfg.queue.is_multiple_of(cfg.batch) {
            return Err(Error::ConfigInvalid(format!(
                "queue {} must be a positive multiple of batch {}",
                cfg.queue, cfg.batch
            )));
        }
        let spec = EncoderSpec::new(vec![cfg.dim, 2 * cfg.dim, cfg.dim], cfg.activation);
        let mut rng = SeededRng::new(cfg.seed);
        let params = EncoderParams::init(&spec, rng.next_seed())?;
        let key_params = EncoderParams::init(&spec, rng.next_seed())?;
        let mut draw = |rows: usize| {
            let v = (0..rows * cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cfg.dim, v)
        };
        let view1 = draw(cfg.batch)?;
        let view2 = draw(cfg.batch)?;
        let keys = key_params.embed(&view2)?;
        let bank = MemoryBank::new(cfg.queue, cfg.dim, cfg.seed.wrapping_add(1))?;
        Ok(Self { params, view1, keys, bank, loss: cfg.loss })
    }

    pub fn loss_at(&self, params: &EncoderParams) -> Result<f64> {
        let q = params.embed(&self.view1)?;
        Ok(filtered_dual_view_loss(&q, &self.keys, &self.bank, &self.loss)?.total)
    }

    pub fn analytic(&self) -> Result<Gradients> {
        let cache = self.params.forward(&self.view1)?;
        let out = filtered_dual_view_loss(cache.output(), &self.keys, &self.bank, &self.loss)?;
        self.params.backward(&cache, &out.grad_q)
    }

    /// Central differences over every parameter entry.
    pub fn numeric(&self, h: f64) -> Result<Vec<Vec<f64>>> {
        let mut probe = self.params.clone();
        let shapes: Vec<usize> = self.params.tensors().iter().map(|t| t.len()).collect();
        let mut out = Vec::with_capacity(shapes.len());
        for (t, &len) in shapes.iter().enumerate() {
            let mut g = Vec::with_capacity(len);
            for i in 0..len {
                let orig = probe.tensors()[t][i];
                probe.tensors_mut()[t][i] = orig + h;
                let plus = self.loss_at(&probe)?;
                probe.tensors_mut()[t][i] = orig - h;
                let minus = self.loss_at(&probe)?;
                probe.tensors_mut()[t][i] = orig;
                g.push((plus - minus) / (2.0 * h));
            }
            out.push(g);
        }
        Ok(out)
    }
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inst = Instance::new(cfg)?;
    let mut analytic = inst.analytic()?;
    if cfg.corrupt {
        analytic.tensors_mut()[0][0] += 1e-2;
    }
    let numeric = inst.numeric(STEP)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for (a, n) in analytic.tensors().iter().zip(&numeric) {
        for (a, n) in a.iter().zip(n) {
            report.max_rel_error = report.max_rel_error.max(relative_error(*a, *n));
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
