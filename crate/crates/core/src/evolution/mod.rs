//! The cooperative dual-evolution loop.
//!
//! Every generator iteration runs `K` discriminator evolution rounds and
//! then one generator evolution round. A round clones each parent once per
//! offspring, mutates each clone with one optimizer step on its assigned
//! loss, scores all offspring on one shared evaluation batch, and keeps
//! the best as the next parents ((mu, lambda) selection: parents never
//! survive directly).

mod checkpoint;
mod select;
mod streams;

pub use checkpoint::{Checkpoint, Manifest, MemberInfo};
pub use select::{select_survivors, SelectOrder};
pub use streams::Streams;

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{GaussianRingSpec, NoiseSpec};
use crate::error::{Error, Result};
use crate::fitness::{evaluate_discriminator, evaluate_generator, DFitness, GFitness};
use crate::metrics::{mode_coverage, MetricsRecord, MetricsSink, DEFAULT_THRESHOLD_SIGMAS};
use crate::nets::{
    adam_step, build_mlp, forward, forward_generators, AdamConfig, AdamState, Architecture,
    ParamSet,
};
use crate::objectives::{d_training_loss, g_loss, gradient_penalty, DMutation, GMutation};
use crate::par;

/// Every knob of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Generator iterations.
    #[serde(rename = "T")]
    pub iterations: usize,
    /// Discriminator evolution rounds per iteration.
    #[serde(rename = "K")]
    pub d_steps: usize,
    /// Generator parents.
    #[serde(rename = "J")]
    pub g_parents: usize,
    /// Discriminator parents.
    #[serde(rename = "I")]
    pub d_parents: usize,
    /// Offspring per generator parent.
    #[serde(rename = "M")]
    pub g_offspring: usize,
    /// Offspring per discriminator parent.
    #[serde(rename = "N")]
    pub d_offspring: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    /// Weight of the diversity term in generator fitness.
    pub gamma: f64,
    /// Softmax temperature of the discriminator ensemble.
    pub delta: f64,
    pub adam: AdamConfig,
    /// Gradient penalty weight; zero disables it.
    pub gp_lambda: f64,
    pub seed: u64,
    /// Which end of the discriminator fitness ranking survives.
    pub d_select_order: SelectOrder,
    /// Generator mutations, assigned to offspring cyclically.
    pub g_mutations: Vec<GMutation>,
    /// Discriminator mutations, assigned to offspring cyclically.
    pub d_mutations: Vec<DMutation>,
    pub architecture: Architecture,
    pub noise_dim: usize,
    pub dataset: GaussianRingSpec,
    /// Emit a metrics record every this many iterations.
    pub metrics_interval: usize,
    /// Write a checkpoint every this many iterations.
    pub checkpoint_interval: usize,
    /// Samples drawn for the logged mode-coverage figures.
    pub eval_samples: usize,
    pub threshold_sigmas: f64,
    /// Record wall-clock time in the log. Off makes logs bit-reproducible.
    pub wall_clock: bool,
    /// Evaluate offspring on the rayon pool (needs the `parallel` feature).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            d_steps: 3,
            g_parents: 1,
            d_parents: 2,
            g_offspring: 3,
            d_offspring: 2,
            batch_size: 32,
            gamma: 0.1,
            delta: 1.0,
            adam: AdamConfig::default(),
            gp_lambda: 0.0,
            seed: 0,
            d_select_order: SelectOrder::Min,
            g_mutations: GMutation::ALL.to_vec(),
            d_mutations: DMutation::ALL.to_vec(),
            architecture: Architecture::Mlp3,
            noise_dim: 256,
            dataset: GaussianRingSpec::default(),
            metrics_interval: 100,
            checkpoint_interval: 10_000,
            eval_samples: 512,
            threshold_sigmas: DEFAULT_THRESHOLD_SIGMAS,
            wall_clock: true,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K", self.d_steps),
            ("J", self.g_parents),
            ("I", self.d_parents),
            ("M", self.g_offspring),
            ("N", self.d_offspring),
            ("B", self.batch_size),
            ("noise_dim", self.noise_dim),
            ("metrics_interval", self.metrics_interval),
            ("checkpoint_interval", self.checkpoint_interval),
            ("eval_samples", self.eval_samples),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.batch_size < self.g_parents {
            return Err(Error::config(
                "B",
                "batch must hold at least one sample per generator parent",
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::config("delta", "must be finite and >= 0"));
        }
        if !(self.gp_lambda.is_finite() && self.gp_lambda >= 0.0) {
            return Err(Error::config("gp_lambda", "must be finite and >= 0"));
        }
        if self.threshold_sigmas.is_nan() || self.threshold_sigmas <= 0.0 {
            return Err(Error::config("threshold_sigmas", "must be positive"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::config(
                "adam",
                "needs lr > 0, betas in [0, 1), eps > 0",
            ));
        }
        if self.g_mutations.is_empty() {
            return Err(Error::config(
                "g_mutations",
                "must list at least one mutation",
            ));
        }
        if self.d_mutations.is_empty() {
            return Err(Error::config(
                "d_mutations",
                "must list at least one mutation",
            ));
        }
        self.dataset.validate()
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            dim: self.noise_dim,
        }
    }

    /// Mutation assigned to generator offspring `m`, and how many full
    /// passes over the mutation list precede it.
    pub fn g_assignment(&self, m: usize) -> (GMutation, usize) {
        let n = self.g_mutations.len();
        (self.g_mutations[m % n], m / n)
    }

    pub fn d_assignment(&self, n: usize) -> (DMutation, usize) {
        let k = self.d_mutations.len();
        (self.d_mutations[n % k], n / k)
    }
}

/// One member of either population.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual<Tag> {
    pub genome: ParamSet,
    pub optimizer: AdamState,
    /// Mutation that produced this individual; `None` for initial parents.
    pub mutation: Option<Tag>,
    pub fitness: Option<f64>,
    /// Index of the parent this individual was cloned from.
    pub parent: usize,
}

pub type Generator = Individual<GMutation>;
pub type Discriminator = Individual<DMutation>;

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub g_parents: Vec<Generator>,
    pub d_parents: Vec<Discriminator>,
    /// Completed generator iterations.
    pub iteration: usize,
    pub config: TrainConfig,
}

impl PopulationState {
    /// Builds `J` generators and `I` discriminators from seeded streams.
    pub fn initialize(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let streams = Streams::new(config.seed);
        let g_spec = config.architecture.generator(config.noise_dim, 2);
        let d_spec = config.architecture.discriminator(2);
        let g_parents = (0..config.g_parents)
            .map(|j| {
                let genome = build_mlp(&g_spec, &mut streams.init_generator(j))?;
                let optimizer = AdamState::new(&genome, config.adam);
                Ok(Individual {
                    genome,
                    optimizer,
                    mutation: None,
                    fitness: None,
                    parent: j,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d_parents = (0..config.d_parents)
            .map(|i| {
                let genome = build_mlp(&d_spec, &mut streams.init_discriminator(i))?;
                let optimizer = AdamState::new(&genome, config.adam);
                Ok(Individual {
                    genome,
                    optimizer,
                    mutation: None,
                    fitness: None,
                    parent: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            g_parents,
            d_parents,
            iteration: 0,
            config: config.clone(),
        })
    }

    pub fn generator_genomes(&self) -> Vec<ParamSet> {
        self.g_parents.iter().map(|g| g.genome.clone()).collect()
    }

    pub fn discriminator_genomes(&self) -> Vec<ParamSet> {
        self.d_parents.iter().map(|d| d.genome.clone()).collect()
    }

    /// The generator parent with the highest recorded fitness (the first
    /// parent when none has been scored yet).
    pub fn best_generator(&self) -> usize {
        let mut best = 0;
        for (j, g) in self.g_parents.iter().enumerate() {
            if let (Some(f), Some(b)) = (g.fitness, self.g_parents[best].fitness) {
                if f > b {
                    best = j;
                }
            } else if g.fitness.is_some() && self.g_parents[best].fitness.is_none() {
                best = j;
            }
        }
        best
    }
}

/// Outcome of one discriminator evolution round.
#[derive(Debug, Clone, PartialEq)]
pub struct DRoundReport {
    pub fitness: Vec<DFitness>,
    pub mutations: Vec<DMutation>,
    /// Flat offspring indices (`i * N + n`) of the survivors, best first.
    pub survivors: Vec<usize>,
    /// Minimized training loss of each offspring before its update.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GRoundReport {
    pub fitness: Vec<GFitness>,
    pub mutations: Vec<GMutation>,
    /// Flat offspring indices (`j * M + m`) of the survivors, best first.
    pub survivors: Vec<usize>,
    pub losses: Vec<f64>,
}

fn check_loss(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { what: what.into() })
    }
}

/// Runs `K`-loop round `k` of iteration `t` and replaces the discriminator
/// parents with the survivors.
pub fn d_evolution_round(
    pop: &mut PopulationState,
    streams: &Streams,
    t: usize,
    k: usize,
) -> Result<DRoundReport> {
    let cfg = pop.config.clone();
    let ring = &cfg.dataset;
    let noise = cfg.noise();
    let gens = pop.generator_genomes();
    let cycles = cfg.d_offspring.div_ceil(cfg.d_mutations.len());

    // variation batches, one per (parent, pass over the mutation list)
    let mut batches = Vec::with_capacity(cfg.d_parents * cycles);
    for i in 0..cfg.d_parents {
        for c in 0..cycles {
            let real = ring.sample(cfg.batch_size, &mut streams.d_real(t, k, i, c))?;
            let z = noise.sample(cfg.batch_size, &mut streams.d_noise(t, k, i, c))?;
            let fake = forward_generators(&gens, &z)?;
            batches.push((real, fake));
        }
    }

    let tasks: Vec<(usize, usize)> = (0..cfg.d_parents)
        .flat_map(|i| (0..cfg.d_offspring).map(move |n| (i, n)))
        .collect();
    let parents = &pop.d_parents;
    let offspring = par::map(
        &tasks,
        cfg.parallel,
        |_, &(i, n)| -> Result<(Discriminator, f64)> {
            let (kind, cycle) = cfg.d_assignment(n);
            let (real, fake) = &batches[i * cycles + cycle];
            let parent = &parents[i];
            let mut genome = parent.genome.clone();
            let mut optimizer = parent.optimizer.clone();

            let mut g = Graph::new();
            let bound = genome.bind(&mut g);
            let r = g.constant(real.clone());
            let f = g.constant(fake.clone());
            let mut loss = d_training_loss(&mut g, kind, genome.spec(), &bound, r, f)?;
            if cfg.gp_lambda > 0.0 {
                let gp = gradient_penalty(
                    &mut g,
                    genome.spec(),
                    &bound,
                    real,
                    fake,
                    &mut streams.d_penalty(t, k, i, n),
                    cfg.gp_lambda,
                )?;
                loss = g.add(loss, gp)?;
            }
            let value = check_loss(g.scalar(loss)?, "discriminator loss")?;
            let mut grads = g.backward(loss)?;
            genome.load_grads(&mut grads, &bound)?;
            adam_step(&mut genome, &mut optimizer)?;
            genome.clear_grads();
            Ok((
                Individual {
                    genome,
                    optimizer,
                    mutation: Some(kind),
                    fitness: None,
                    parent: i,
                },
                value,
            ))
        },
    );
    let (mut offspring, losses): (Vec<_>, Vec<_>) = offspring
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();

    let real_eval = ring.sample(cfg.batch_size, &mut streams.d_eval_real(t, k))?;
    let z_eval = noise.sample(cfg.batch_size, &mut streams.d_eval_noise(t, k))?;
    let fake_eval = forward_generators(&gens, &z_eval)?;
    let fitness = par::map(&offspring, cfg.parallel, |_, o: &Discriminator| {
        evaluate_discriminator(&o.genome, &real_eval, &fake_eval)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    for (o, f) in offspring.iter_mut().zip(&fitness) {
        o.fitness = Some(f.value);
    }

    let values: Vec<f64> = fitness.iter().map(|f| f.value).collect();
    let survivors = select_survivors(&values, cfg.d_parents, cfg.d_select_order);
    let mutations = offspring
        .iter()
        .map(|o| o.mutation.expect("offspring are tagged"))
        .collect();
    pop.d_parents = survivors.iter().map(|&s| offspring[s].clone()).collect();
    Ok(DRoundReport {
        fitness,
        mutations,
        survivors,
        losses,
    })
}

/// Runs the generator round of iteration `t` and replaces the generator
/// parents with the survivors.
pub fn g_evolution_round(
    pop: &mut PopulationState,
    streams: &Streams,
    t: usize,
) -> Result<GRoundReport> {
    let cfg = pop.config.clone();
    let noise = cfg.noise();
    let discs = pop.discriminator_genomes();
    let cycles = cfg.g_offspring.div_ceil(cfg.g_mutations.len());

    let mut batches = Vec::with_capacity(cfg.g_parents * cycles);
    for j in 0..cfg.g_parents {
        for c in 0..cycles {
            batches.push(noise.sample(cfg.batch_size, &mut streams.g_noise(t, j, c))?);
        }
    }

    let tasks: Vec<(usize, usize)> = (0..cfg.g_parents)
        .flat_map(|j| (0..cfg.g_offspring).map(move |m| (j, m)))
        .collect();
    let parents = &pop.g_parents;
    let offspring = par::map(
        &tasks,
        cfg.parallel,
        |_, &(j, m)| -> Result<(Generator, f64)> {
            let (kind, cycle) = cfg.g_assignment(m);
            let z = &batches[j * cycles + cycle];
            let parent = &parents[j];
            let mut genome = parent.genome.clone();
            let mut optimizer = parent.optimizer.clone();

            let mut g = Graph::new();
            let bound = genome.bind(&mut g);
            let zv = g.constant(z.clone());
            let fake = forward(&mut g, genome.spec(), &bound, zv)?;
            let (loss, _) = g_loss(&mut g, kind, fake, &discs, cfg.delta)?;
            let value = check_loss(g.scalar(loss)?, "generator loss")?;
            let mut grads = g.backward(loss)?;
            genome.load_grads(&mut grads, &bound)?;
            adam_step(&mut genome, &mut optimizer)?;
            genome.clear_grads();
            Ok((
                Individual {
                    genome,
                    optimizer,
                    mutation: Some(kind),
                    fitness: None,
                    parent: j,
                },
                value,
            ))
        },
    );
    let (mut offspring, losses): (Vec<_>, Vec<_>) = offspring
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();

    let real_eval = cfg
        .dataset
        .sample(cfg.batch_size, &mut streams.g_eval_real(t))?;
    let z_eval = noise.sample(cfg.batch_size, &mut streams.g_eval_noise(t))?;
    let fitness = par::map(&offspring, cfg.parallel, |_, o: &Generator| {
        evaluate_generator(&o.genome, &discs, &real_eval, &z_eval, cfg.gamma, cfg.delta)
            .map(|(f, _)| f)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    for (o, f) in offspring.iter_mut().zip(&fitness) {
        o.fitness = Some(f.combined);
    }

    let values: Vec<f64> = fitness.iter().map(|f| f.combined).collect();
    let survivors = select_survivors(&values, cfg.g_parents, SelectOrder::Max);
    let mutations = offspring
        .iter()
        .map(|o| o.mutation.expect("offspring are tagged"))
        .collect();
    pop.g_parents = survivors.iter().map(|&s| offspring[s].clone()).collect();
    Ok(GRoundReport {
        fitness,
        mutations,
        survivors,
        losses,
    })
}

/// Reports from one full generator iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub d_rounds: Vec<DRoundReport>,
    pub g_round: GRoundReport,
}

/// Runs iteration `pop.iteration + 1` in place. On error `pop` is left
/// exactly as it was.
pub fn step(pop: &mut PopulationState, streams: &Streams) -> Result<IterationReport> {
    let t = pop.iteration + 1;
    let mut next = pop.clone();
    let mut d_rounds = Vec::with_capacity(next.config.d_steps);
    for k in 0..next.config.d_steps {
        d_rounds.push(d_evolution_round(&mut next, streams, t, k)?);
    }
    let g_round = g_evolution_round(&mut next, streams, t)?;
    next.iteration = t;
    *pop = next;
    Ok(IterationReport {
        iteration: t,
        d_rounds,
        g_round,
    })
}

/// Draws `n` points from generator parent `j`.
pub fn generate(
    pop: &PopulationState,
    j: usize,
    n: usize,
    rng: &mut crate::data::RngStream,
) -> Result<Tensor> {
    let z = pop.config.noise().sample(n, rng)?;
    crate::nets::forward_generator(&pop.g_parents[j].genome, &z)
}

fn build_record(
    pop: &PopulationState,
    streams: &Streams,
    report: &IterationReport,
    started: Instant,
) -> Result<MetricsRecord> {
    let cfg = &pop.config;
    let best = pop.best_generator();
    let samples = generate(
        pop,
        best,
        cfg.eval_samples,
        &mut streams.coverage(report.iteration),
    )?;
    let coverage = mode_coverage(&samples, &cfg.dataset, cfg.threshold_sigmas)?;
    let last = report.d_rounds.last().expect("K >= 1");
    let g = &report.g_round;
    Ok(MetricsRecord {
        iteration: report.iteration,
        t_wall_s: cfg.wall_clock.then(|| started.elapsed().as_secs_f64()),
        g_fit: g.fitness.iter().map(|f| f.combined).collect(),
        g_mut: g.mutations.clone(),
        g_survivor_muts: g.survivors.iter().map(|&s| g.mutations[s]).collect(),
        d_fit: last.fitness.iter().map(|f| f.value).collect(),
        d_survivor_idx: last.survivors.clone(),
        covered_modes: Some(coverage.covered_modes),
        hq_ratio: Some(coverage.hq_ratio),
        d_grad_norm_mean: last.fitness.iter().map(|f| f.grad_norm).sum::<f64>()
            / last.fitness.len() as f64,
        g_losses: g.losses.clone(),
        d_losses: report
            .d_rounds
            .iter()
            .flat_map(|r| r.losses.iter().copied())
            .collect(),
    })
}

/// Number of fitness-history entries kept in checkpoint manifests.
pub const HISTORY_TAIL: usize = 100;

/// Runs the full loop from a fresh population.
///
/// Metrics go to every sink each `metrics_interval` iterations. With a
/// `checkpoint_dir`, checkpoints are written each `checkpoint_interval`
/// iterations, after the last iteration, and before returning a numeric
/// failure (holding the last good population).
pub fn train(
    config: &TrainConfig,
    sinks: &mut [&mut dyn MetricsSink],
    checkpoint_dir: Option<&Path>,
) -> Result<PopulationState> {
    let pop = PopulationState::initialize(config)?;
    resume(pop, config.iterations, sinks, checkpoint_dir)
}

/// Continues `pop` until it has completed `until` iterations, with the
/// same metrics and checkpoint behavior as [`train`].
pub fn resume(
    mut pop: PopulationState,
    until: usize,
    sinks: &mut [&mut dyn MetricsSink],
    checkpoint_dir: Option<&Path>,
) -> Result<PopulationState> {
    let config = pop.config.clone();
    let streams = Streams::new(config.seed);
    let started = Instant::now();
    let mut history: VecDeque<(usize, f64)> = VecDeque::with_capacity(HISTORY_TAIL);

    while pop.iteration < until {
        let report = match step(&mut pop, &streams) {
            Ok(r) => r,
            Err(e @ (Error::NonFinite { .. } | Error::Domain { .. })) => {
                let iteration = pop.iteration + 1;
                let checkpoint = match checkpoint_dir {
                    Some(dir) => {
                        Checkpoint::capture(&pop, &streams, &history).save(dir)?;
                        Some(dir.to_path_buf())
                    }
                    None => None,
                };
                return Err(Error::Diverged {
                    iteration,
                    what: e.to_string(),
                    checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        let best = pop.g_parents[pop.best_generator()]
            .fitness
            .unwrap_or(f64::NAN);
        if history.len() == HISTORY_TAIL {
            history.pop_front();
        }
        history.push_back((report.iteration, best));

        if report.iteration % config.metrics_interval == 0 {
            let record = build_record(&pop, &streams, &report, started)?;
            for sink in sinks.iter_mut() {
                sink.record(&record)?;
            }
        }
        if let Some(dir) = checkpoint_dir {
            if report.iteration % config.checkpoint_interval == 0 || report.iteration == until {
                Checkpoint::capture(&pop, &streams, &history).save(dir)?;
            }
        }
    }
    Ok(pop)
}
