//! The guiding model: spatial embedding plus decoder producing vMF
//! mixtures, the KL-gradient training machinery driven by noisy radiance
//! estimates, and the BSDF/guide one-sample combination used by the
//! renderer.
//!
//! All trainable parameters (decoder weights followed by grid features)
//! live in one flat `f64` vector shared by the optimizer, the EMA shadow
//! copy, and checkpointing. Inference queries read the EMA copy; training
//! reads and updates the live copy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{GridEmbedding, ShEncoding};
use crate::math::{Aabb, Vec3};
use crate::nn::{ema_update, AdamState, DecoderNet, ForwardCache, DEFAULT_EMA_DECAY, DEFAULT_LEARNING_RATE};
use crate::scene::{bsdf_eval, bsdf_pdf, bsdf_sample, Material};
use crate::vmf::{
    activate_params, mixture_logpdf_grad, mixture_pdf, mixture_sample, raw_param_len, VmfLobe,
    VmfMixture, PDF_FLOOR,
};

/// Concentration of the constant normal-aligned lobe that approximates the
/// clamped cosine; least-squares fit of v(ω | n, κ) to max(cos θ, 0).
pub const COSINE_LOBE_KAPPA: f64 = 2.143772;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideMode {
    /// Target ∝ incident radiance L_i(x, ω).
    Radiance,
    /// Target ∝ the full integrand f_s · L_i · |cos θ|, conditioned on
    /// (x, ω_o) plus auxiliary features.
    Product,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: GuideMode,
    pub lobes: usize,
    pub levels: usize,
    pub grid_coarse: u32,
    pub grid_fine: u32,
    pub grid_features: usize,
    pub sh_bands: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub selection_prob: f64,
    pub learning_rate: f64,
    pub ema_decay: f64,
    /// Multiply the decoded mixture by a constant cosine lobe at sampling
    /// time instead of leaving the cosine in the learned target.
    pub cosine_lobe: bool,
}

impl ModelConfig {
    pub fn new(mode: GuideMode) -> ModelConfig {
        ModelConfig {
            mode,
            lobes: 8,
            levels: GridEmbedding::DEFAULT_LEVELS,
            grid_coarse: GridEmbedding::DEFAULT_COARSE,
            grid_fine: GridEmbedding::DEFAULT_FINE,
            grid_features: GridEmbedding::DEFAULT_FEATURES,
            sh_bands: ShEncoding::DEFAULT_BANDS,
            hidden_width: 64,
            hidden_layers: 2,
            selection_prob: 0.5,
            learning_rate: DEFAULT_LEARNING_RATE,
            ema_decay: DEFAULT_EMA_DECAY,
            cosine_lobe: false,
        }
    }
}

/// Directional query context for product mode; ignored in radiance mode.
#[derive(Debug, Clone, Copy)]
pub struct QueryAux {
    pub omega_o: Vec3,
    pub normal: Vec3,
    pub roughness: f64,
}

/// Reusable per-thread scratch for queries and training.
#[derive(Debug, Default)]
pub struct QueryScratch {
    input: Vec<f64>,
    cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct NpmModel {
    pub config: ModelConfig,
    emb: GridEmbedding,
    sh: ShEncoding,
    net: DecoderNet,
    params: Vec<f64>,
    ema: Vec<f64>,
    adam: AdamState,
    net_len: usize,
}

impl NpmModel {
    pub fn new(config: ModelConfig, scene_aabb: Aabb, seed: u64) -> NpmModel {
        let emb = GridEmbedding::new(
            config.levels,
            config.grid_coarse,
            config.grid_fine,
            config.grid_features,
            scene_aabb,
        )
        .expect("invalid grid configuration");
        let sh = ShEncoding::new(config.sh_bands);
        let input_dim = match config.mode {
            GuideMode::Radiance => emb.output_dim(),
            GuideMode::Product => emb.output_dim() + 2 * sh.output_dim() + 1,
        };
        let net = DecoderNet::new(
            input_dim,
            config.hidden_width,
            config.hidden_layers,
            raw_param_len(config.lobes),
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::math::splitmix64(seed));
        use rand::SeedableRng;
        let mut params = net.init_params(&mut rng);
        // Head init: shrink the output layer and bias it so that a fresh
        // model decodes to an almost-uniform mixture (low-concentration
        // lobes, equal weights, directions spread by the random biases).
        let last = net.dims().len() - 1;
        for w in &mut params[net.weight_range(last)] {
            *w *= 0.01;
        }
        let k = config.lobes;
        let bias = &mut params[net.bias_range(last)];
        for i in 0..k {
            bias[i] = 0.0;
            bias[k + i] = (0.15f64).ln();
            bias[2 * k + i] = rand::Rng::gen_range(&mut rng, -1.5..1.5);
            bias[3 * k + i] = rand::Rng::gen_range(&mut rng, -1.5..1.5);
        }
        let net_len = params.len();
        params.extend(emb.init_features(&mut rng));
        let ema = params.clone();
        let adam = AdamState::new(params.len(), config.learning_rate);
        NpmModel {
            config,
            emb,
            sh,
            net,
            params,
            ema,
            adam,
            net_len,
        }
    }

    pub fn embedding(&self) -> &GridEmbedding {
        &self.emb
    }

    pub fn decoder(&self) -> &DecoderNet {
        &self.net
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn train_steps(&self) -> u64 {
        self.adam.t
    }

    /// One-line model summary (architecture and exact parameter counts).
    pub fn summary(&self) -> String {
        format!(
            "mode={:?} lobes={} grid={:?}x{}f ({} params) mlp={:?} ({} params) total={}",
            self.config.mode,
            self.config.lobes,
            self.emb.resolutions(),
            self.emb.feature_dim(),
            self.emb.param_count(),
            self.net.dims(),
            self.net.param_count(),
            self.params.len()
        )
    }

    fn assemble_input(&self, x: Vec3, aux: Option<&QueryAux>, input: &mut Vec<f64>, features: &[f64]) {
        let grid_dim = self.emb.output_dim();
        let total = match self.config.mode {
            GuideMode::Radiance => grid_dim,
            GuideMode::Product => grid_dim + 2 * self.sh.output_dim() + 1,
        };
        input.resize(total, 0.0);
        let u = self.emb.normalize(x);
        self.emb.query(u, features, &mut input[..grid_dim]);
        if self.config.mode == GuideMode::Product {
            let aux = aux.expect("product mode requires directional inputs");
            let sh_dim = self.sh.output_dim();
            self.sh
                .encode(aux.omega_o, &mut input[grid_dim..grid_dim + sh_dim]);
            self.sh.encode(
                aux.normal,
                &mut input[grid_dim + sh_dim..grid_dim + 2 * sh_dim],
            );
            input[grid_dim + 2 * sh_dim] = aux.roughness;
        }
    }

    fn select_params(&self, use_ema: bool) -> &[f64] {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    /// Decoded guiding distribution at x: encode, decode, activate.
    /// Inference passes `use_ema = true`; the gradient path reads the live
    /// weights.
    pub fn query(
        &self,
        x: Vec3,
        aux: Option<&QueryAux>,
        use_ema: bool,
        scratch: &mut QueryScratch,
    ) -> VmfMixture {
        let params = self.select_params(use_ema);
        let (net_params, grid) = params.split_at(self.net_len);
        let mut input = std::mem::take(&mut scratch.input);
        self.assemble_input(x, aux, &mut input, grid);
        let raw = self.net.forward(net_params, &input, &mut scratch.cache);
        let mut mix = activate_params(raw);
        scratch.input = input;
        if self.config.cosine_lobe && self.config.mode == GuideMode::Product {
            let aux = aux.expect("product mode requires directional inputs");
            let cos_lobe = VmfLobe {
                mu: aux.normal,
                kappa: COSINE_LOBE_KAPPA,
            };
            mix = mix.product_with_lobe(&cos_lobe);
        }
        mix
    }

    /// Lat-long map of the decoded pdf; rows are polar angle from +z,
    /// columns azimuth. Riemann quadrature with sin θ weights ≈ 1.
    pub fn probe_distribution(
        &self,
        x: Vec3,
        aux: Option<&QueryAux>,
        width: usize,
        height: usize,
    ) -> Vec<f64> {
        let mut scratch = QueryScratch::default();
        let mix = self.query(x, aux, true, &mut scratch);
        probe_map(&mix, width, height)
    }
}

/// Equirectangular pdf map of a mixture.
pub fn probe_map(mix: &VmfMixture, width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for j in 0..height {
        let theta = std::f64::consts::PI * (j as f64 + 0.5) / height as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        for i in 0..width {
            let phi = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / width as f64;
            let omega = crate::math::vec3(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
            out[j * width + i] = mixture_pdf(omega, mix);
        }
    }
    out
}

/// Solid-angle-weighted Riemann sum of a probe map; ≈ 1 for a pdf.
pub fn probe_map_integral(map: &[f64], width: usize, height: usize) -> f64 {
    let dtheta = std::f64::consts::PI / height as f64;
    let dphi = 2.0 * std::f64::consts::PI / width as f64;
    let mut acc = 0.0;
    for j in 0..height {
        let theta = std::f64::consts::PI * (j as f64 + 0.5) / height as f64;
        let w = theta.sin() * dtheta * dphi;
        for i in 0..width {
            acc += map[j * width + i] * w;
        }
    }
    acc
}

/// One path-vertex training tuple feeding the KL gradient estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRecord {
    pub position: Vec3,
    pub omega_i: Vec3,
    pub omega_o: Vec3,
    pub normal: Vec3,
    pub roughness: f64,
    /// D̂: luminance of the MC estimate of the target at (x, ω_i).
    pub target: f64,
    /// p̃: pdf the direction was actually drawn from.
    pub sample_pdf: f64,
}

/// SoA batch of training records.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub position: Vec<Vec3>,
    pub omega_i: Vec<Vec3>,
    pub omega_o: Vec<Vec3>,
    pub normal: Vec<Vec3>,
    pub roughness: Vec<f64>,
    pub target: Vec<f64>,
    pub sample_pdf: Vec<f64>,
}

pub const DEFAULT_BATCH_SIZE: usize = 1 << 14;

impl TrainBatch {
    pub fn push(&mut self, r: &TrainingRecord) {
        self.position.push(r.position);
        self.omega_i.push(r.omega_i);
        self.omega_o.push(r.omega_o);
        self.normal.push(r.normal);
        self.roughness.push(r.roughness);
        self.target.push(r.target);
        self.sample_pdf.push(r.sample_pdf);
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn clear(&mut self) {
        self.position.clear();
        self.omega_i.clear();
        self.omega_o.clear();
        self.normal.clear();
        self.roughness.clear();
        self.target.clear();
        self.sample_pdf.clear();
    }
}

/// Gradient accumulators reused across steps. The grid part is dense but
/// only `touched` entries are nonzero (and only they are cleared).
#[derive(Debug, Default)]
pub struct GradBuffers {
    pub net: Vec<f64>,
    pub grid: Vec<f64>,
    pub touched: Vec<u32>,
    touched_flags: Vec<bool>,
    input_grad: Vec<f64>,
    raw_grad: Vec<f64>,
    sparse: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_proxy: f64,
    pub grad_norm_net: f64,
    pub grad_norm_grid: f64,
    /// Records with non-finite target/pdf, excluded from the gradient.
    pub dropped: usize,
    /// Records with D̂ = 0; retained in the batch, zero gradient.
    pub zero_target: usize,
    pub used: usize,
}

impl NpmModel {
    /// MC estimate of the KL gradient over a batch: per-sample upstream
    /// gradient w.r.t. the raw mixture parameters is
    /// −(D̂ / p̃) · ∂log V(ω) / ∂Θ_raw, averaged over the batch and
    /// backpropagated through the decoder and the grid.
    ///
    /// The reported loss proxy is the mean of −(D̂ / p̃) · log V, the
    /// Θ-dependent term of the MC KL estimate.
    pub fn loss_grad_batch(
        &self,
        batch: &TrainBatch,
        grads: &mut GradBuffers,
        scratch: &mut QueryScratch,
    ) -> StepMetrics {
        let n = batch.len();
        assert!(n > 0, "empty training batch");
        grads.net.resize(self.net_len, 0.0);
        grads.grid.resize(self.params.len() - self.net_len, 0.0);
        grads
            .touched_flags
            .resize(self.params.len() - self.net_len, false);
        grads.raw_grad.resize(self.net.output_dim(), 0.0);
        grads.input_grad.resize(self.net.input_dim(), 0.0);

        let (net_params, grid) = self.params.split_at(self.net_len);
        let inv_n = 1.0 / n as f64;
        let grid_dim = self.emb.output_dim();
        let mut metrics = StepMetrics::default();

        for j in 0..n {
            let target = batch.target[j];
            let pdf = batch.sample_pdf[j];
            if !(target.is_finite() && pdf.is_finite() && pdf > 0.0) {
                metrics.dropped += 1;
                continue;
            }
            if target == 0.0 {
                metrics.zero_target += 1;
                continue;
            }
            let aux = QueryAux {
                omega_o: batch.omega_o[j],
                normal: batch.normal[j],
                roughness: batch.roughness[j],
            };
            let mut input = std::mem::take(&mut scratch.input);
            self.assemble_input(batch.position[j], Some(&aux).filter(|_| self.config.mode == GuideMode::Product), &mut input, grid);
            let raw = self
                .net
                .forward(net_params, &input, &mut scratch.cache)
                .to_vec();
            let log_v = mixture_logpdf_grad(batch.omega_i[j], &raw, &mut grads.raw_grad);
            let scale = -(target / pdf.max(PDF_FLOOR)) * inv_n;
            metrics.loss_proxy += scale * log_v; // == -(D̂/p̃)·logV / N
            for g in grads.raw_grad.iter_mut() {
                *g *= scale;
            }
            self.net.backward(
                net_params,
                &scratch.cache,
                &grads.raw_grad,
                &mut grads.net,
                &mut grads.input_grad,
            );
            let u = self.emb.normalize(batch.position[j]);
            grads.sparse.clear();
            self.emb
                .backward(u, &grads.input_grad[..grid_dim], &mut grads.sparse);
            for &(idx, g) in &grads.sparse {
                let i = idx as usize;
                grads.grid[i] += g;
                if !grads.touched_flags[i] {
                    grads.touched_flags[i] = true;
                    grads.touched.push(idx);
                }
            }
            scratch.input = input;
            metrics.used += 1;
        }
        metrics.grad_norm_net = grads.net.iter().map(|g| g * g).sum::<f64>().sqrt();
        metrics.grad_norm_grid = grads
            .touched
            .iter()
            .map(|&i| grads.grid[i as usize].powi(2))
            .sum::<f64>()
            .sqrt();
        metrics
    }

    /// One optimization step: batch gradient, Adam on the decoder and the
    /// touched grid entries, then EMA update of all trainables.
    pub fn train_step(
        &mut self,
        batch: &TrainBatch,
        grads: &mut GradBuffers,
        scratch: &mut QueryScratch,
    ) -> StepMetrics {
        grads.touched.clear();
        let mut metrics = self.loss_grad_batch(batch, grads, scratch);
        self.adam.begin_step();
        // Net and grid moments share one Adam state; the grid range is
        // offset by net_len inside the flat layout.
        let net_len = self.net_len;
        {
            let dropped = self
                .adam
                .step_dense(&mut self.params[..net_len], &grads.net, 0..net_len);
            metrics.dropped += dropped;
        }
        {
            // Shift grid indices into the flat layout for the shared state.
            let (_, grid_params) = self.params.split_at_mut(net_len);
            let mut shifted = GridAdamView {
                adam: &mut self.adam,
                offset: net_len,
            };
            metrics.dropped += shifted.step(grid_params, &grads.grid, &grads.touched);
        }
        ema_update(&mut self.ema, &self.params, self.config.ema_decay);
        // Clear only what this step touched.
        for &i in &grads.touched {
            grads.grid[i as usize] = 0.0;
            grads.touched_flags[i as usize] = false;
        }
        grads.net.iter_mut().for_each(|g| *g = 0.0);
        metrics
    }

    /// Copies the EMA weights into the live parameters (used when training
    /// ends and the model is frozen for pure inference).
    pub fn freeze_to_ema(&mut self) {
        self.params.copy_from_slice(&self.ema);
    }

    /// Direct access to one live parameter (finite-difference probes).
    pub fn param(&self, i: usize) -> f64 {
        self.params[i]
    }

    /// Overwrites one live parameter; the EMA copy is untouched.
    pub fn set_param(&mut self, i: usize, v: f64) {
        self.params[i] = v;
    }

    pub(crate) fn raw_parts(
        &self,
    ) -> (&GridEmbedding, &ShEncoding, &DecoderNet, &[f64], &[f64], &AdamState, usize) {
        (
            &self.emb,
            &self.sh,
            &self.net,
            &self.params,
            &self.ema,
            &self.adam,
            self.net_len,
        )
    }

    pub(crate) fn from_raw_parts(
        config: ModelConfig,
        emb: GridEmbedding,
        sh: ShEncoding,
        net: DecoderNet,
        params: Vec<f64>,
        ema: Vec<f64>,
        adam: AdamState,
        net_len: usize,
    ) -> NpmModel {
        NpmModel {
            config,
            emb,
            sh,
            net,
            params,
            ema,
            adam,
            net_len,
        }
    }
}

/// Adam over the grid slice of the flat layout: public indices are
/// grid-relative, moments live at `offset + i`.
struct GridAdamView<'a> {
    adam: &'a mut AdamState,
    offset: usize,
}

impl GridAdamView<'_> {
    fn step(&mut self, grid_params: &mut [f64], grid_grads: &[f64], touched: &[u32]) -> usize {
        use crate::nn::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
        let t = self.adam.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = self.adam.learning_rate;
        let mut dropped = 0;
        for &i in touched {
            let gi = i as usize;
            let si = self.offset + gi;
            let mut g = grid_grads[gi];
            if !g.is_finite() {
                g = 0.0;
                dropped += 1;
            }
            self.adam.m[si] = ADAM_BETA1 * self.adam.m[si] + (1.0 - ADAM_BETA1) * g;
            self.adam.v[si] = ADAM_BETA2 * self.adam.v[si] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.adam.m[si] / c1;
            let v_hat = self.adam.v[si] / c2;
            grid_params[gi] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        dropped
    }
}

/// Which technique produced a sampled direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Technique {
    Bsdf,
    Guide,
    /// Delta BSDF vertex; guiding bypassed, pdf in the discrete measure.
    Delta,
}

#[derive(Debug, Clone, Copy)]
pub struct DirectionSample {
    pub omega_i: Vec3,
    /// Balance-heuristic pdf p̃ = α p_bsdf + (1−α) p_guide (or the
    /// discrete 1 for delta vertices). This exact value is stored in the
    /// training record and divides the contribution.
    pub pdf: f64,
    /// f_s at the sampled direction (throughput weight for deltas).
    pub f: Vec3,
    pub technique: Technique,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SampleCounters {
    pub guide_fallbacks: usize,
}

/// One-sample combination of BSDF importance sampling and the decoded
/// guiding distribution with selection probability α. Queries the model
/// and delegates to [`combined_sample_with`].
#[allow(clippy::too_many_arguments)]
pub fn combined_sample(
    model: &NpmModel,
    material: &Material,
    x: Vec3,
    normal: Vec3,
    omega_o: Vec3,
    rng: &mut impl Rng,
    scratch: &mut QueryScratch,
    counters: &mut SampleCounters,
) -> Option<DirectionSample> {
    let alpha = model.config.selection_prob;
    let mix = if material.is_delta() || alpha >= 1.0 {
        None
    } else {
        let aux = QueryAux {
            omega_o,
            normal,
            roughness: material.guide_roughness(),
        };
        Some(model.query(x, Some(&aux), true, scratch))
    };
    combined_sample_with(material, alpha, mix.as_ref(), normal, omega_o, rng, counters)
}

/// Sampling half of [`combined_sample`]: the mixture (when guiding
/// applies) has already been decoded, so batched renderers can run the
/// query and sampling stages separately. `mix` must be `Some` exactly
/// when the material is non-delta and α < 1.
pub fn combined_sample_with(
    material: &Material,
    alpha: f64,
    mix: Option<&VmfMixture>,
    normal: Vec3,
    omega_o: Vec3,
    rng: &mut impl Rng,
    counters: &mut SampleCounters,
) -> Option<DirectionSample> {
    if material.is_delta() {
        let s = bsdf_sample(material, normal, omega_o, rng.gen(), rng.gen())?;
        return Some(DirectionSample {
            omega_i: s.omega_i,
            pdf: 1.0,
            f: s.f,
            technique: Technique::Delta,
        });
    }
    if alpha >= 1.0 {
        // Degenerates to the unguided tracer, including its random stream.
        let s = bsdf_sample(material, normal, omega_o, rng.gen(), rng.gen())?;
        return Some(DirectionSample {
            omega_i: s.omega_i,
            pdf: s.pdf,
            f: s.f,
            technique: Technique::Bsdf,
        });
    }
    let mix = mix.expect("guided sampling requires a decoded mixture");
    let pick_bsdf = rng.gen::<f64>() < alpha;
    if pick_bsdf {
        let s = bsdf_sample(material, normal, omega_o, rng.gen(), rng.gen())?;
        let p_guide = mixture_pdf(s.omega_i, &mix);
        let pdf = alpha * s.pdf + (1.0 - alpha) * p_guide;
        if !(pdf > 0.0 && pdf.is_finite()) {
            return None;
        }
        Some(DirectionSample {
            omega_i: s.omega_i,
            pdf,
            f: s.f,
            technique: Technique::Bsdf,
        })
    } else {
        let (omega_i, p_guide) = mixture_sample(&mix, rng.gen(), rng.gen(), rng.gen());
        if !(p_guide > PDF_FLOOR && p_guide.is_finite()) {
            // Degenerate decoded pdf: fall back to BSDF sampling.
            counters.guide_fallbacks += 1;
            let s = bsdf_sample(material, normal, omega_o, rng.gen(), rng.gen())?;
            let p_guide = mixture_pdf(s.omega_i, &mix).max(0.0);
            let pdf = alpha * s.pdf + (1.0 - alpha) * p_guide;
            if !(pdf > 0.0 && pdf.is_finite()) {
                return None;
            }
            return Some(DirectionSample {
                omega_i: s.omega_i,
                pdf,
                f: s.f,
                technique: Technique::Bsdf,
            });
        }
        let p_bsdf = bsdf_pdf(material, normal, omega_o, omega_i);
        let pdf = alpha * p_bsdf + (1.0 - alpha) * p_guide;
        if !(pdf > 0.0 && pdf.is_finite()) {
            return None;
        }
        let f = bsdf_eval(material, normal, omega_o, omega_i);
        Some(DirectionSample {
            omega_i,
            pdf,
            f,
            technique: Technique::Guide,
        })
    }
}

/// Per-vertex data stored while tracing, consumed by the backward unwind.
#[derive(Debug, Clone, Copy)]
pub struct PathVertex {
    pub position: Vec3,
    pub normal: Vec3,
    pub omega_o: Vec3,
    pub omega_i: Vec3,
    pub roughness: f64,
    /// p̃ at this vertex (1 for delta vertices).
    pub sample_pdf: f64,
    /// Throughput multiplier f_s · |cos| / p̃ applied when leaving this
    /// vertex (the delta weight for delta vertices).
    pub weight: Vec3,
    /// f_s · |cos| at this vertex (product-mode target numerator).
    pub fs_cos: Vec3,
    /// Emitted radiance encountered at the *next* path vertex.
    pub emitted_next: Vec3,
    pub delta: bool,
}

/// Backward unwind of a completed path into training records:
/// ⟨L_i(x_v)⟩ = L_e(x_{v+1}) + [f_s ⟨L_i⟩ |cos| / p̃] at x_{v+1}.
/// Delta vertices contribute to the unwind but produce no records.
pub fn make_training_records(
    path: &[PathVertex],
    mode: GuideMode,
    out: &mut Vec<TrainingRecord>,
) {
    let n = path.len();
    if n == 0 {
        return;
    }
    let mut incident = vec![Vec3::ZERO; n];
    for v in (0..n).rev() {
        let next = if v + 1 < n {
            path[v + 1].weight.mul_elem(incident[v + 1])
        } else {
            Vec3::ZERO
        };
        incident[v] = path[v].emitted_next + next;
    }
    for v in 0..n {
        if path[v].delta {
            continue;
        }
        let target = match mode {
            GuideMode::Radiance => incident[v].luminance(),
            GuideMode::Product => path[v].fs_cos.mul_elem(incident[v]).luminance(),
        };
        out.push(TrainingRecord {
            position: path[v].position,
            omega_i: path[v].omega_i,
            omega_o: path[v].omega_o,
            normal: path[v].normal,
            roughness: path[v].roughness,
            target,
            sample_pdf: path[v].sample_pdf,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{uniform_sphere, vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_aabb() -> Aabb {
        Aabb::new(Vec3::ZERO, Vec3::ONE)
    }

    fn tiny_config(mode: GuideMode) -> ModelConfig {
        let mut c = ModelConfig::new(mode);
        c.levels = 3;
        c.grid_coarse = 2;
        c.grid_fine = 6;
        c.grid_features = 2;
        c.hidden_width = 16;
        c.lobes = 4;
        c
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let model = NpmModel::new(ModelConfig::new(GuideMode::Radiance), unit_aabb(), 7);
        let mut scratch = QueryScratch::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = vec3(rng.gen(), rng.gen(), rng.gen());
            let mix = model.query(x, None, true, &mut scratch);
            let mut lo = f64::INFINITY;
            let mut hi = 0.0_f64;
            for _ in 0..1000 {
                let p = mixture_pdf(uniform_sphere(rng.gen(), rng.gen()), &mix);
                lo = lo.min(p);
                hi = hi.max(p);
            }
            assert!(hi / lo < 1.5, "pdf ratio {}", hi / lo);
        }
    }

    #[test]
    fn query_is_deterministic() {
        let model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 3);
        let mut scratch = QueryScratch::default();
        let x = vec3(0.3, 0.6, 0.2);
        let a = model.query(x, None, true, &mut scratch);
        let b = model.query(x, None, true, &mut scratch);
        assert_eq!(a, b);
    }

    #[test]
    fn query_continuous_along_segment() {
        let model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 5);
        let mut scratch = QueryScratch::default();
        let omega = vec3(0.0, 0.0, 1.0);
        let delta = 1e-5;
        let mut prev: Option<f64> = None;
        for i in 0..200 {
            let s = i as f64 / 200.0;
            let x = vec3(0.05 + 0.9 * s, 0.4, 0.7);
            let mix = model.query(x, None, true, &mut scratch);
            let p = mixture_pdf(omega, &mix);
            if let Some(pv) = prev {
                assert!((p - pv).abs() < 1.0, "jump {} at {s}", (p - pv).abs());
            }
            prev = Some(p);
            // Tight continuity across a small step.
            let mix2 = model.query(x + vec3(delta, 0.0, 0.0), None, true, &mut scratch);
            let p2 = mixture_pdf(omega, &mix2);
            assert!((p2 - p).abs() < 1e-2);
        }
    }

    #[test]
    fn ema_decay_zero_matches_live_query() {
        let mut model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 11);
        model.config.ema_decay = 0.0;
        // Perturb live params, then one EMA update with decay 0 syncs them.
        let batch = synthetic_batch(&model, 64, 17);
        let mut grads = GradBuffers::default();
        let mut scratch = QueryScratch::default();
        model.train_step(&batch, &mut grads, &mut scratch);
        let x = vec3(0.4, 0.4, 0.4);
        let live = model.query(x, None, false, &mut scratch);
        let ema = model.query(x, None, true, &mut scratch);
        assert_eq!(live, ema);
    }

    fn synthetic_batch(model: &NpmModel, n: usize, seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target_lobe = VmfLobe::new(vec3(0.0, 0.0, 1.0), 8.0).unwrap();
        let mut batch = TrainBatch::default();
        for _ in 0..n {
            let omega = crate::vmf::vmf_sample(&target_lobe, rng.gen(), rng.gen());
            let pdf = crate::vmf::vmf_pdf(omega, &target_lobe);
            batch.push(&TrainingRecord {
                position: vec3(0.5, 0.5, 0.5),
                omega_i: omega,
                omega_o: vec3(0.0, 0.0, 1.0),
                normal: vec3(0.0, 0.0, 1.0),
                roughness: 1.0,
                target: pdf,
                sample_pdf: pdf,
            });
        }
        let _ = model;
        batch
    }

    #[test]
    fn zero_target_batch_gives_zero_gradients() {
        let model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 13);
        let mut batch = TrainBatch::default();
        for _ in 0..16 {
            batch.push(&TrainingRecord {
                position: vec3(0.2, 0.2, 0.2),
                omega_i: vec3(0.0, 0.0, 1.0),
                omega_o: vec3(0.0, 0.0, 1.0),
                normal: vec3(0.0, 0.0, 1.0),
                roughness: 1.0,
                target: 0.0,
                sample_pdf: 0.25,
            });
        }
        let mut grads = GradBuffers::default();
        let mut scratch = QueryScratch::default();
        let metrics = model.loss_grad_batch(&batch, &mut grads, &mut scratch);
        assert_eq!(metrics.zero_target, 16);
        assert_eq!(metrics.used, 0);
        assert!(grads.net.iter().all(|g| *g == 0.0));
        assert!(grads.touched.is_empty());
    }

    #[test]
    fn non_finite_records_dropped_and_counted() {
        let model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 13);
        let mut batch = TrainBatch::default();
        for t in [f64::NAN, f64::INFINITY, 1.0] {
            batch.push(&TrainingRecord {
                position: vec3(0.2, 0.2, 0.2),
                omega_i: vec3(0.0, 0.0, 1.0),
                omega_o: vec3(0.0, 0.0, 1.0),
                normal: vec3(0.0, 0.0, 1.0),
                roughness: 1.0,
                target: t,
                sample_pdf: 0.25,
            });
        }
        let mut grads = GradBuffers::default();
        let mut scratch = QueryScratch::default();
        let metrics = model.loss_grad_batch(&batch, &mut grads, &mut scratch);
        assert_eq!(metrics.dropped, 2);
        assert_eq!(metrics.used, 1);
    }

    /// End-to-end single-sample gradient vs finite differences of
    /// −(D̂/p̃)·log V with respect to every trainable parameter the
    /// sample touches.
    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut model = NpmModel::new(tiny_config(GuideMode::Product), unit_aabb(), 19);
        let mut batch = TrainBatch::default();
        let rec = TrainingRecord {
            position: vec3(0.31, 0.62, 0.47),
            omega_i: vec3(0.3, -0.4, 0.866_025).normalized(),
            omega_o: vec3(0.0, 0.6, 0.8),
            normal: vec3(0.0, 0.0, 1.0),
            roughness: 0.4,
            target: 1.7,
            sample_pdf: 0.2,
        };
        batch.push(&rec);
        let mut grads = GradBuffers::default();
        let mut scratch = QueryScratch::default();
        model.loss_grad_batch(&batch, &mut grads, &mut scratch);

        let loss = |model: &NpmModel| -> f64 {
            let mut scratch = QueryScratch::default();
            let aux = QueryAux {
                omega_o: rec.omega_o,
                normal: rec.normal,
                roughness: rec.roughness,
            };
            let (net_params, grid) = model.params.split_at(model.net_len);
            let mut input = Vec::new();
            model.assemble_input(rec.position, Some(&aux), &mut input, grid);
            let raw = model.net.forward(net_params, &input, &mut scratch.cache);
            let mut sink = vec![0.0; raw.len()];
            let log_v = mixture_logpdf_grad(rec.omega_i, raw, &mut sink);
            -(rec.target / rec.sample_pdf) * log_v
        };

        let h = 1e-5;
        // Every net parameter.
        let mut checked = 0;
        for idx in (0..model.net_len).step_by(7) {
            let orig = model.params[idx];
            model.params[idx] = orig + h;
            let fp = loss(&model);
            model.params[idx] = orig - h;
            let fm = loss(&model);
            model.params[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let got = grads.net[idx];
            let scale = fd.abs().max(got.abs()).max(1e-3);
            assert!(
                (fd - got).abs() / scale < 1e-3,
                "net param {idx}: {fd} vs {got}"
            );
            checked += 1;
        }
        assert!(checked > 50);
        // Every touched grid feature.
        assert!(!grads.touched.is_empty());
        for &gi in &grads.touched {
            let idx = model.net_len + gi as usize;
            let orig = model.params[idx];
            model.params[idx] = orig + h;
            let fp = loss(&model);
            model.params[idx] = orig - h;
            let fm = loss(&model);
            model.params[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let got = grads.grid[gi as usize];
            let scale = fd.abs().max(got.abs()).max(1e-3);
            assert!(
                (fd - got).abs() / scale < 1e-3,
                "grid feature {gi}: {fd} vs {got}"
            );
        }
    }

    #[test]
    fn gradient_sparsity_matches_sample_positions() {
        // Samples confined to one octant must leave far-corner features of
        // the finest grid untouched.
        let model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 23);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut batch = TrainBatch::default();
        for _ in 0..64 {
            let omega = uniform_sphere(rng.gen(), rng.gen());
            batch.push(&TrainingRecord {
                position: vec3(
                    rng.gen_range(0.0..0.2),
                    rng.gen_range(0.0..0.2),
                    rng.gen_range(0.0..0.2),
                ),
                omega_i: omega,
                omega_o: vec3(0.0, 0.0, 1.0),
                normal: vec3(0.0, 0.0, 1.0),
                roughness: 1.0,
                target: 1.0,
                sample_pdf: 0.3,
            });
        }
        let mut grads = GradBuffers::default();
        let mut scratch = QueryScratch::default();
        model.loss_grad_batch(&batch, &mut grads, &mut scratch);
        assert!(!grads.touched.is_empty());
        // Finest level is 6³ here; positions in [0, 0.2] touch lattice
        // indices 0..=1 per axis only.
        let emb = model.embedding();
        let finest_base: usize = emb
            .resolutions()
            .iter()
            .take(2)
            .map(|d| (*d as usize).pow(3) * emb.feature_dim())
            .sum();
        let d = *emb.resolutions().last().unwrap() as usize;
        for &idx in &grads.touched {
            let idx = idx as usize;
            if idx >= finest_base {
                let cell = (idx - finest_base) / emb.feature_dim();
                let ix = cell / (d * d);
                let iy = (cell / d) % d;
                let iz = cell % d;
                assert!(ix <= 1 && iy <= 1 && iz <= 1, "touched far feature {idx}");
            }
        }
    }

    #[test]
    fn descent_on_repeated_batch() {
        let mut ok = 0;
        let trials = 20;
        for seed in 0..trials {
            let mut model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), seed);
            let batch = synthetic_batch(&model, 256, seed * 31 + 7);
            let mut grads = GradBuffers::default();
            let mut scratch = QueryScratch::default();
            let first = model.train_step(&batch, &mut grads, &mut scratch);
            let mut last = first;
            for _ in 0..10 {
                last = model.train_step(&batch, &mut grads, &mut scratch);
            }
            if last.loss_proxy < first.loss_proxy {
                ok += 1;
            }
        }
        assert!(ok * 100 >= trials * 95, "descent in {ok}/{trials}");
    }

    #[test]
    fn train_step_deterministic() {
        let run = || {
            let mut model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 77);
            let mut grads = GradBuffers::default();
            let mut scratch = QueryScratch::default();
            for i in 0..5 {
                let batch = synthetic_batch(&model, 128, 1000 + i);
                model.train_step(&batch, &mut grads, &mut scratch);
            }
            model.params.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn unwind_one_bounce_emitter() {
        // Vertex 0 sampled toward an emitter: D̂ = luminance(L_e).
        let le = vec3(4.0, 4.0, 4.0);
        let path = [PathVertex {
            position: vec3(0.5, 0.0, 0.5),
            normal: vec3(0.0, 1.0, 0.0),
            omega_o: vec3(0.0, 1.0, 0.0),
            omega_i: vec3(0.0, 1.0, 0.0),
            roughness: 1.0,
            sample_pdf: 0.5,
            weight: vec3(0.6, 0.6, 0.6),
            fs_cos: vec3(0.3, 0.3, 0.3),
            emitted_next: le,
            delta: false,
        }];
        let mut recs = Vec::new();
        make_training_records(&path, GuideMode::Radiance, &mut recs);
        assert_eq!(recs.len(), 1);
        assert!((recs[0].target - le.luminance()).abs() < 1e-12);
    }

    #[test]
    fn unwind_black_environment_all_zero() {
        let mk = |_: usize| PathVertex {
            position: Vec3::ZERO,
            normal: vec3(0.0, 1.0, 0.0),
            omega_o: vec3(0.0, 1.0, 0.0),
            omega_i: vec3(0.0, 1.0, 0.0),
            roughness: 1.0,
            sample_pdf: 0.5,
            weight: vec3(0.5, 0.5, 0.5),
            fs_cos: vec3(0.25, 0.25, 0.25),
            emitted_next: Vec3::ZERO,
            delta: false,
        };
        let path: Vec<PathVertex> = (0..4).map(mk).collect();
        let mut recs = Vec::new();
        make_training_records(&path, GuideMode::Radiance, &mut recs);
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.target == 0.0));
    }

    #[test]
    fn unwind_matches_recursive_oracle() {
        // Handcrafted 3-vertex path with an emitter hit at the end.
        let w = [
            vec3(0.9, 0.8, 0.7),
            vec3(0.5, 0.5, 0.5),
            vec3(0.2, 0.3, 0.4),
        ];
        let le = [Vec3::ZERO, vec3(0.1, 0.1, 0.1), vec3(5.0, 4.0, 3.0)];
        let path: Vec<PathVertex> = (0..3)
            .map(|v| PathVertex {
                position: vec3(v as f64, 0.0, 0.0),
                normal: vec3(0.0, 1.0, 0.0),
                omega_o: vec3(0.0, 1.0, 0.0),
                omega_i: vec3(0.0, 1.0, 0.0),
                roughness: 1.0,
                sample_pdf: 0.5,
                weight: w[v],
                fs_cos: w[v] * 0.5,
                emitted_next: le[v],
                delta: false,
            })
            .collect();

        // Independent recursion: L_i(v) = le[v] + w[v+1] * L_i(v+1).
        fn li(v: usize, w: &[Vec3], le: &[Vec3]) -> Vec3 {
            if v >= w.len() {
                return Vec3::ZERO;
            }
            le[v] + if v + 1 < w.len() {
                w[v + 1].mul_elem(li(v + 1, w, le))
            } else {
                Vec3::ZERO
            }
        }

        let mut recs = Vec::new();
        make_training_records(&path, GuideMode::Radiance, &mut recs);
        for v in 0..3 {
            let expect = li(v, &w, &le).luminance();
            assert!(
                (recs[v].target - expect).abs() < 1e-6,
                "vertex {v}: {} vs {expect}",
                recs[v].target
            );
        }
    }

    #[test]
    fn probe_map_quadrature() {
        let uniform = VmfMixture::uniform(4);
        let map = probe_map(&uniform, 64, 32);
        for v in &map {
            assert!((v - crate::math::FRAC_1_4PI).abs() < 1e-12);
        }
        assert!((probe_map_integral(&map, 64, 32) - 1.0).abs() < 0.01);

        let sharp = VmfMixture::new(
            vec![VmfLobe::new(vec3(0.0, 1.0, 0.0), 50.0).unwrap()],
            vec![1.0],
        )
        .unwrap();
        let map = probe_map(&sharp, 64, 32);
        assert!((probe_map_integral(&map, 64, 32) - 1.0).abs() < 0.01);
        // Max at μ's lat-long pixel: θ = π/2 and φ = π/2 both land between
        // sample rows/columns 15 and 16.
        let (mut bi, mut bv) = (0, 0.0);
        for (i, v) in map.iter().enumerate() {
            if *v > bv {
                bv = *v;
                bi = i;
            }
        }
        assert!((15..=16).contains(&(bi / 64)), "row {}", bi / 64);
        assert!((15..=16).contains(&(bi % 64)), "col {}", bi % 64);
    }

    #[test]
    fn cosine_lobe_kappa_is_least_squares_fit() {
        // 1D quadrature oracle over t = cos θ; scans κ for the minimal
        // residual of c·v against the clamped cosine.
        let residual = |kappa: f64| -> f64 {
            let c_norm = kappa / (2.0 * std::f64::consts::PI * (1.0 - (-2.0 * kappa).exp()));
            let n = 20_000;
            let (mut fg, mut gg, mut ff) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let t = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
                let g = c_norm * (kappa * (t - 1.0)).exp();
                let f = t.max(0.0);
                fg += f * g;
                gg += g * g;
                ff += f * f;
            }
            let c = fg / gg;
            ff - 2.0 * c * fg + c * c * gg
        };
        let mut best = (0.0, f64::INFINITY);
        let mut k = 0.5;
        while k < 8.0 {
            let r = residual(k);
            if r < best.1 {
                best = (k, r);
            }
            k += 0.005;
        }
        assert!(
            (best.0 - COSINE_LOBE_KAPPA).abs() < 0.01,
            "argmin {} vs frozen {}",
            best.0,
            COSINE_LOBE_KAPPA
        );
    }

    #[test]
    fn combined_sample_balance_pdf_symmetry() {
        let model = NpmModel::new(tiny_config(GuideMode::Radiance), unit_aabb(), 31);
        let material = Material {
            name: "d".into(),
            kind: crate::scene::MaterialKind::Lambertian,
            albedo: vec3(0.8, 0.8, 0.8),
            emission: Vec3::ZERO,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut scratch = QueryScratch::default();
        let mut counters = SampleCounters::default();
        let n = vec3(0.0, 0.0, 1.0);
        let wo = vec3(0.0, 0.6, 0.8);
        let x = vec3(0.5, 0.5, 0.5);
        let aux = QueryAux {
            omega_o: wo,
            normal: n,
            roughness: 1.0,
        };
        let mix = model.query(x, Some(&aux), true, &mut scratch);
        for _ in 0..2000 {
            if let Some(s) = combined_sample(
                &model, &material, x, n, wo, &mut rng, &mut scratch, &mut counters,
            ) {
                // Whatever branch produced ω, the pdf must equal the
                // balance-heuristic mixture evaluated at ω.
                let expect = 0.5 * bsdf_pdf(&material, n, wo, s.omega_i)
                    + 0.5 * mixture_pdf(s.omega_i, &mix);
                assert!(
                    (s.pdf - expect).abs() / expect < 1e-9,
                    "{:?}: {} vs {expect}",
                    s.technique,
                    s.pdf
                );
            }
        }
        assert_eq!(counters.guide_fallbacks, 0);
    }
}
