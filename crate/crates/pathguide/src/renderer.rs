//! Wavefront path tracer with optional learned guiding.
//!
//! Each sample-per-pixel wave traces every pixel's path through batched
//! stages (intersect, emission, guide query, direction sampling) over
//! structure-of-arrays state. During the training phase the completed
//! paths are unwound into training records and the model takes
//! optimization steps at the wave boundary; afterwards the weights are
//! frozen to the EMA snapshot.
//!
//! No next-event estimation and no Russian roulette: paths run to the
//! fixed maximum length so the estimator stays a plain unidirectional one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::guiding::{
    combined_sample_with, make_training_records, GradBuffers, GuideMode, ModelConfig, NpmModel,
    PathVertex, QueryAux, QueryScratch, SampleCounters, Technique, TrainBatch, TrainingRecord,
    DEFAULT_BATCH_SIZE,
};
use crate::image::ImageBuffer;
use crate::math::{splitmix64, Vec3};
use crate::metrics::{mape, rel_mse};
use crate::scene::{Intersection, Ray, Scene};
use crate::vmf::VmfMixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideSetting {
    Off,
    Radiance,
    Product,
}

impl GuideSetting {
    pub fn mode(self) -> Option<GuideMode> {
        match self {
            GuideSetting::Off => None,
            GuideSetting::Radiance => Some(GuideMode::Radiance),
            GuideSetting::Product => Some(GuideMode::Product),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub spp: usize,
    pub max_path_length: usize,
    pub guide: GuideSetting,
    /// Fraction of the spp budget that trains the model; the rest renders
    /// with frozen EMA weights.
    pub train_frac: f64,
    /// BSDF selection probability α of the one-sample combination.
    pub selection_prob: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Optimization steps per training wave; the wave's record pool is
    /// recycled (reshuffled) if one pass cannot fill the budget.
    pub train_steps_per_wave: usize,
    /// 0 = one worker per core.
    pub threads: usize,
    /// Product mode only: multiply decoded mixtures by a constant
    /// normal-aligned cosine lobe at sampling time.
    pub cosine_lobe: bool,
}

impl Default for RenderConfig {
    fn default() -> RenderConfig {
        RenderConfig {
            width: 256,
            height: 256,
            spp: 16,
            max_path_length: 10,
            guide: GuideSetting::Off,
            train_frac: 0.25,
            selection_prob: 0.5,
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            train_steps_per_wave: 8,
            threads: 0,
            cosine_lobe: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        if self.spp == 0 {
            return Err("spp must be positive".into());
        }
        if self.max_path_length < 1 {
            return Err("max path length must be at least 1".into());
        }
        if !(self.train_frac >= 0.0 && self.train_frac < 1.0) {
            return Err("training fraction must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.selection_prob) {
            return Err("selection probability must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.train_steps_per_wave == 0 {
            return Err("batch size and steps per wave must be positive".into());
        }
        Ok(())
    }

    /// Number of leading spp waves that train the model.
    pub fn train_waves(&self) -> usize {
        if self.guide == GuideSetting::Off {
            return 0;
        }
        (self.spp as f64 * self.train_frac).round() as usize
    }

    /// Model hyperparameters implied by this render configuration.
    pub fn model_config(&self) -> Option<ModelConfig> {
        let mode = self.guide.mode()?;
        let mut mc = ModelConfig::new(mode);
        mc.selection_prob = self.selection_prob;
        mc.cosine_lobe = self.cosine_lobe;
        Some(mc)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WaveLog {
    pub spp: usize,
    pub seconds: f64,
    pub rel_mse: Option<f64>,
    pub mape: Option<f64>,
    pub loss_proxy: f64,
    pub train_steps: usize,
    pub dropped: usize,
}

#[derive(Debug)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    pub log: Vec<WaveLog>,
    pub seconds: f64,
    /// Paths whose final radiance was non-finite, clamped to black.
    pub nonfinite_paths: usize,
    /// Guide draws that fell back to BSDF sampling on a degenerate pdf.
    pub guide_fallbacks: usize,
}

/// Counter-based per-path stream: (seed, pixel, wave) fully determines the
/// generator, so scheduling order cannot affect the output.
pub fn pixel_rng(seed: u64, pixel: u64, wave: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ pixel) ^ wave);
    ChaCha8Rng::seed_from_u64(s)
}

struct ChunkResult {
    contributions: Vec<Vec3>,
    records: Vec<TrainingRecord>,
    nonfinite: usize,
    counters: SampleCounters,
}

/// Renders one full image. `model` is trained in place during the leading
/// `train_waves` and frozen to EMA afterwards; pass `None` for the
/// unguided tracer. `reference` enables per-wave error logging.
pub fn render(
    scene: &Scene,
    config: &RenderConfig,
    mut model: Option<&mut NpmModel>,
    reference: Option<&ImageBuffer>,
) -> RenderOutput {
    config.validate().expect("invalid render config");
    if let Some(r) = reference {
        assert_eq!((r.width, r.height), (config.width, config.height));
    }
    let guiding = config.guide != GuideSetting::Off;
    assert_eq!(guiding, model.is_some(), "model must match guide setting");
    let mode = config.guide.mode();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .expect("thread pool");

    let pixel_count = config.width * config.height;
    let chunk = 4096usize;
    let train_waves = config.train_waves();
    let mut accum = vec![Vec3::ZERO; pixel_count];
    let mut log = Vec::with_capacity(config.spp);
    let mut nonfinite = 0usize;
    let mut fallbacks = 0usize;
    let mut records: Vec<TrainingRecord> = Vec::new();
    let mut grads = GradBuffers::default();
    let mut train_scratch = QueryScratch::default();
    let mut batch = TrainBatch::default();
    // Records carry between waves but are bounded so a long render cannot
    // hoard memory; the pool is shuffled, so a random subset survives.
    let carry_cap = 4 * config.batch_size;
    let t0 = std::time::Instant::now();

    for wave in 0..config.spp {
        let training = wave < train_waves;
        let model_ref: Option<&NpmModel> = model.as_deref();
        let results: Vec<ChunkResult> = pool.install(|| {
            (0..pixel_count.div_ceil(chunk))
                .into_par_iter()
                .map(|c| {
                    let start = c * chunk;
                    let len = chunk.min(pixel_count - start);
                    trace_chunk(scene, model_ref, config, wave as u64, start, len, training)
                })
                .collect()
        });
        for (c, r) in results.into_iter().enumerate() {
            let start = c * chunk;
            for (i, v) in r.contributions.into_iter().enumerate() {
                accum[start + i] = accum[start + i] + v;
            }
            nonfinite += r.nonfinite;
            fallbacks += r.counters.guide_fallbacks;
            if training {
                records.extend(r.records);
            }
        }

        let mut entry = WaveLog {
            spp: wave + 1,
            ..WaveLog::default()
        };
        if training {
            let m = model.as_deref_mut().expect("training requires a model");
            let mut shuffle_rng =
                ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(config.seed) ^ (wave as u64) << 1));
            shuffle(&mut records, &mut shuffle_rng);
            // Per-wave step budget. Desk-scale waves rarely fill the budget
            // with fresh full batches, so cycle over the wave's shuffled
            // pool (reshuffling at each wrap) until the budget is spent;
            // too few total steps leaves the guide near its initialization
            // and only adds variance.
            let steps = if records.len() >= 512 {
                config.train_steps_per_wave
            } else {
                0
            };
            let take = config.batch_size.min(records.len());
            let mut pos = 0usize;
            for _ in 0..steps {
                if pos + take > records.len() {
                    shuffle(&mut records, &mut shuffle_rng);
                    pos = 0;
                }
                batch.clear();
                for r in &records[pos..pos + take] {
                    batch.push(r);
                }
                pos += take;
                let metrics = m.train_step(&batch, &mut grads, &mut train_scratch);
                entry.loss_proxy += metrics.loss_proxy;
                entry.dropped += metrics.dropped;
                entry.train_steps += 1;
            }
            if entry.train_steps > 0 {
                entry.loss_proxy /= entry.train_steps as f64;
            }
            if records.len() > carry_cap {
                records.drain(..records.len() - carry_cap);
            }
            if wave + 1 == train_waves {
                m.freeze_to_ema();
                records.clear();
                records.shrink_to_fit();
            }
        }
        entry.seconds = t0.elapsed().as_secs_f64();
        if let Some(r) = reference {
            let mean = mean_image(&accum, config.width, config.height, wave + 1);
            entry.rel_mse = Some(rel_mse(&mean, r));
            entry.mape = Some(mape(&mean, r));
        }
        let _ = mode;
        log.push(entry);
    }

    RenderOutput {
        image: mean_image(&accum, config.width, config.height, config.spp),
        log,
        seconds: t0.elapsed().as_secs_f64(),
        nonfinite_paths: nonfinite,
        guide_fallbacks: fallbacks,
    }
}

fn mean_image(accum: &[Vec3], width: usize, height: usize, samples: usize) -> ImageBuffer {
    let inv = 1.0 / samples as f64;
    let mut img = ImageBuffer::new(width, height);
    for (p, a) in img.pixels.iter_mut().zip(accum) {
        *p = *a * inv;
    }
    img
}

/// Fisher-Yates over the record buffer.
fn shuffle(records: &mut [TrainingRecord], rng: &mut ChaCha8Rng) {
    for i in (1..records.len()).rev() {
        let j = rng.gen_range(0..=i);
        records.swap(i, j);
    }
}

/// Traces `len` paths (one per pixel in `[start, start+len)`) through the
/// staged wavefront loop.
fn trace_chunk(
    scene: &Scene,
    model: Option<&NpmModel>,
    config: &RenderConfig,
    wave: u64,
    start: usize,
    len: usize,
    collect: bool,
) -> ChunkResult {
    let alpha = if model.is_some() {
        config.selection_prob
    } else {
        1.0
    };
    let aspect = config.width as f64 / config.height as f64;
    let mut counters = SampleCounters::default();
    let mut scratch = QueryScratch::default();

    // SoA path state.
    let mut rngs: Vec<ChaCha8Rng> = (0..len)
        .map(|i| pixel_rng(config.seed, (start + i) as u64, wave))
        .collect();
    let mut rays: Vec<Ray> = rngs
        .iter_mut()
        .enumerate()
        .map(|(i, rng)| {
            let p = start + i;
            let (x, y) = (p % config.width, p / config.width);
            let u1: f64 = rng.gen();
            let u2: f64 = rng.gen();
            scene.camera.primary_ray(
                (x as f64 + u1) / config.width as f64,
                (y as f64 + u2) / config.height as f64,
                aspect,
            )
        })
        .collect();
    let mut throughput = vec![Vec3::ONE; len];
    let mut radiance = vec![Vec3::ZERO; len];
    let mut verts: Vec<Vec<PathVertex>> = if collect {
        (0..len)
            .map(|_| Vec::with_capacity(config.max_path_length))
            .collect()
    } else {
        Vec::new()
    };
    let mut active: Vec<u32> = (0..len as u32).collect();
    let mut hits: Vec<Intersection> = Vec::with_capacity(len);
    let mut survivors: Vec<u32> = Vec::with_capacity(len);
    let mut mixes: Vec<Option<VmfMixture>> = Vec::new();

    for depth in 1..=config.max_path_length {
        if active.is_empty() {
            break;
        }
        // Intersect + emission stage: dead paths (miss into the black
        // environment) drop out, emitter hits accumulate and feed the
        // previous vertex's unwind term.
        survivors.clear();
        hits.clear();
        for &i in &active {
            let iu = i as usize;
            let Some(hit) = scene.intersect(&rays[iu]) else {
                continue;
            };
            let m = scene.material(hit.material);
            if m.is_emissive() {
                radiance[iu] = radiance[iu] + throughput[iu].mul_elem(m.emission);
                if collect {
                    if let Some(v) = verts[iu].last_mut() {
                        v.emitted_next = v.emitted_next + m.emission;
                    }
                }
            }
            survivors.push(i);
            hits.push(hit);
        }
        if depth == config.max_path_length {
            break;
        }

        // Guide query stage: decode one mixture per surviving non-delta
        // vertex (reads frozen EMA weights only).
        mixes.clear();
        if let Some(m) = model {
            if alpha < 1.0 {
                for (k, &i) in survivors.iter().enumerate() {
                    let hit = &hits[k];
                    let mat = scene.material(hit.material);
                    mixes.push(if mat.is_delta() {
                        None
                    } else {
                        let aux = QueryAux {
                            omega_o: hit.omega_o,
                            normal: hit.normal,
                            roughness: mat.guide_roughness(),
                        };
                        Some(m.query(hit.position, Some(&aux), true, &mut scratch))
                    });
                    let _ = i;
                }
            }
        }

        // Sampling stage: draw the next direction, update throughput,
        // spawn the continuation ray.
        active.clear();
        for (k, &i) in survivors.iter().enumerate() {
            let iu = i as usize;
            let hit = &hits[k];
            let mat = scene.material(hit.material);
            let mix = mixes.get(k).and_then(|m| m.as_ref());
            let Some(s) = combined_sample_with(
                mat,
                alpha,
                mix,
                hit.normal,
                hit.omega_o,
                &mut rngs[iu],
                &mut counters,
            ) else {
                continue;
            };
            let (weight, fs_cos) = if s.technique == Technique::Delta {
                (s.f, s.f)
            } else {
                let cos = hit.normal.dot(s.omega_i).max(0.0);
                (s.f * (cos / s.pdf), s.f * cos)
            };
            if collect {
                verts[iu].push(PathVertex {
                    position: hit.position,
                    normal: hit.normal,
                    omega_o: hit.omega_o,
                    omega_i: s.omega_i,
                    roughness: mat.guide_roughness(),
                    sample_pdf: s.pdf,
                    weight,
                    fs_cos,
                    emitted_next: Vec3::ZERO,
                    delta: s.technique == Technique::Delta,
                });
            }
            let t = throughput[iu].mul_elem(weight);
            if t == Vec3::ZERO || !t.is_finite() {
                if !t.is_finite() {
                    // Poison the path so the clamp below catches it.
                    radiance[iu] = radiance[iu] + t;
                }
                continue;
            }
            throughput[iu] = t;
            rays[iu] = Ray::new(hit.position, s.omega_i);
            active.push(i);
        }
    }

    let mut nonfinite = 0usize;
    let contributions = radiance
        .into_iter()
        .map(|r| {
            if r.is_finite() {
                r
            } else {
                nonfinite += 1;
                Vec3::ZERO
            }
        })
        .collect();
    let mut records = Vec::new();
    if collect {
        let mode = model.expect("collection implies guiding").config.mode;
        for v in &verts {
            make_training_records(v, mode, &mut records);
        }
    }
    ChunkResult {
        contributions,
        records,
        nonfinite,
        counters,
    }
}
