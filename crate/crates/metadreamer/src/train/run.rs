//! The outer training loop. Each iteration collects real rollouts,
//! updates the encoder and world model jointly, probes disentanglement,
//! dreams extra data for real and interpolated tasks, and improves the
//! policy on the mixture.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoreSnapshot};
use crate::env::{
    make_env_with, sample_initial_state, sample_task_specs, schema_for, EnvOptions, EnvSchema,
    RandomWalkExplorer, TaskSpec,
};
use crate::error::{Error, Result};
use crate::imagine::{FactorMap, FactorSweep, ImaginaryTask};
use crate::infer::{ContextTuple, LatentPosterior, TaskEncoder};
use crate::metrics::{
    disentanglement_score, emit_learning_curve, emit_profile_plot, emit_traversal_heatmaps,
    intra_cluster_variance, reconstruction_error, sci_error, sfi_error, Measured, MetricReport,
    ProbeConfig,
};
use crate::nn::ParameterStore;
use crate::policy::{Provenance, SacAgent, SacLosses, ReplayBuffer, Transition};
use crate::rng::derive_rng;
use crate::world::{PhysicsTemplate, WorldModel};

use super::{ed_step, ElboTerms, ElboWeights, TaskEdData, TrainConfig};

/// Values evaluated per factor when mapping factors to latent dims.
const SWEEP_POINTS: usize = 5;
/// Header of the per-iteration metric log.
pub const METRICS_HEADER: &str = "iteration,wall_clock,elbo_total,nll,state_mse,reward_mse,kl,\
     intra,inter,critic_loss,actor_loss,disentanglement,mean_return,real_steps,imagined_real,\
     imagined,gate_open";

/// One row of the metric log.
#[derive(Debug, Clone, Copy)]
pub struct IterationLog {
    pub iteration: usize,
    pub wall_clock: f64,
    pub elbo: ElboTerms,
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// Quick probe score in percent.
    pub disentanglement: f64,
    pub mean_return: f64,
    pub real_steps: usize,
    pub imagined_real: usize,
    pub imagined: usize,
    pub gate_open: bool,
}

impl IterationLog {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.wall_clock,
            self.elbo.total,
            self.elbo.nll,
            self.elbo.state_mse,
            self.elbo.reward_mse,
            self.elbo.kl,
            self.elbo.intra,
            self.elbo.inter,
            self.critic_loss,
            self.actor_loss,
            self.disentanglement,
            self.mean_return,
            self.real_steps,
            self.imagined_real,
            self.imagined,
            self.gate_open as u8,
        )
    }
}

/// Where a finished run left its files.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub imaginary_manifest: PathBuf,
    pub env_manifest: PathBuf,
    pub logs: Vec<IterationLog>,
}

/// Structural state saved alongside the parameter stores.
#[derive(serde::Serialize, serde::Deserialize)]
struct TrainerMeta {
    iteration: usize,
    total_env_steps: usize,
    tasks: Vec<TaskSpec>,
    task_latents: Vec<Vec<f64>>,
    factor_map: Option<FactorMap>,
}

pub struct Trainer {
    config: TrainConfig,
    schema: EnvSchema,
    options: EnvOptions,
    tasks: Vec<TaskSpec>,
    encoder: TaskEncoder,
    encoder_store: ParameterStore,
    wm: WorldModel,
    world_store: ParameterStore,
    agent: SacAgent,
    real: ReplayBuffer,
    imag: ReplayBuffer,
    /// Posterior-mean embedding per real task, refreshed each iteration.
    task_latents: Vec<Vec<f64>>,
    /// Latent used for each buffer task id during policy updates.
    imag_latents: BTreeMap<usize, Vec<f64>>,
    factor_map: Option<FactorMap>,
    /// Manifest rows (iteration, index, type tag, z) for composed tasks.
    imaginary_rows: Vec<(usize, usize, u8, Vec<f64>)>,
    iteration: usize,
    total_env_steps: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schema = schema_for(config.env);
        let options = config.env_options();
        let mut task_rng = derive_rng(config.seed, "tasks");
        let tasks = sample_task_specs(config.env, config.n_tasks, &mut task_rng);

        let mut encoder_store = ParameterStore::new("encoder");
        let mut init_rng = derive_rng(config.seed, "encoder-init");
        let encoder = TaskEncoder::new(
            &mut encoder_store,
            &schema,
            config.latent_dim,
            config.gru_hidden,
            &mut init_rng,
        )?;

        let template = if config.no_physics {
            PhysicsTemplate::no_physics(config.env)
        } else {
            PhysicsTemplate::for_env(config.env)
        };
        let mut world_store = ParameterStore::new("world");
        let mut world_rng = derive_rng(config.seed, "world-init");
        let wm = WorldModel::new(
            &mut world_store,
            &schema,
            template,
            config.latent_dim,
            &config.model_hidden,
            &mut world_rng,
        )?;

        let mut agent_rng = derive_rng(config.seed, "agent-init");
        let agent = SacAgent::new(&schema, config.latent_dim, config.sac.clone(), &mut agent_rng)?;

        let real = ReplayBuffer::new(config.buffer_capacity, config.recent_window);
        let imag = ReplayBuffer::new(config.buffer_capacity, config.recent_window);
        let task_latents = vec![vec![0.0; config.latent_dim]; config.n_tasks];

        Ok(Trainer {
            config,
            schema,
            options,
            tasks,
            encoder,
            encoder_store,
            wm,
            world_store,
            agent,
            real,
            imag,
            task_latents,
            imag_latents: BTreeMap::new(),
            factor_map: None,
            imaginary_rows: Vec::new(),
            iteration: 0,
            total_env_steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schema(&self) -> &EnvSchema {
        &self.schema
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn factor_map(&self) -> Option<&FactorMap> {
        self.factor_map.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn total_env_steps(&self) -> usize {
        self.total_env_steps
    }

    pub fn stores(&self) -> [&ParameterStore; 5] {
        let [actor, critic, target] = self.agent.stores();
        [&self.encoder_store, &self.world_store, actor, critic, target]
    }

    fn phase_rng(&self, phase: &str) -> ChaCha8Rng {
        derive_rng(
            self.config.seed,
            &format!("{phase}-{}", self.iteration),
        )
    }

    /// Latent the collection policy conditions on for `task`: a sample
    /// from the current posterior, or from the prior when the task has
    /// no context yet.
    fn sample_collection_latent(&self, task: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let tail = self.real.tail(task, self.config.context_window);
        if tail.is_empty() {
            return Ok(LatentPosterior::prior(self.config.latent_dim).sample(rng));
        }
        let tuples: Vec<Vec<f64>> = tail
            .iter()
            .map(|t| t.context_tuple().encode(&self.schema))
            .collect::<Result<_>>()?;
        let posterior = self
            .encoder
            .final_posterior(&self.encoder_store, &tuples)?;
        Ok(posterior.sample(rng))
    }

    /// Rolls real episodes for every task and stores them with
    /// provenance R. Most episodes follow the current policy; a few
    /// random-walk episodes per task keep coverage broad. Returns env
    /// steps taken.
    pub fn collect_phase(&mut self) -> Result<usize> {
        let mut rng = self.phase_rng("collect");
        let mut steps = 0;
        for task in 0..self.tasks.len() {
            for _ in 0..self.config.rollouts_per_task {
                let z = self.sample_collection_latent(task, &mut rng)?;
                let seed: u64 = rng.random();
                let mut env = make_env_with(&self.tasks[task], seed, self.options)?;
                let mut state = env.reset();
                while !state.done {
                    let (action, _) = self.agent.actor_sample(&state.observation, &z, &mut rng)?;
                    let (next, reward) = env.step(&action)?;
                    self.real.push(
                        task,
                        Transition {
                            state: state.observation.clone(),
                            action,
                            reward,
                            next_state: next.observation.clone(),
                            terminal: next.terminal,
                            provenance: Provenance::Real,
                        },
                    );
                    steps += 1;
                    state = next;
                }
            }
            for _ in 0..self.config.explore_episodes {
                let seed: u64 = rng.random();
                let mut env = make_env_with(&self.tasks[task], seed, self.options)?;
                let mut explorer = RandomWalkExplorer::new(&self.schema);
                let mut state = env.reset();
                while !state.done {
                    let action = explorer.act(&mut rng);
                    let (next, reward) = env.step(&action)?;
                    self.real.push(
                        task,
                        Transition {
                            state: state.observation.clone(),
                            action,
                            reward,
                            next_state: next.observation.clone(),
                            terminal: next.terminal,
                            provenance: Provenance::Real,
                        },
                    );
                    steps += 1;
                    state = next;
                }
            }
        }
        self.total_env_steps += steps;
        Ok(steps)
    }

    /// Context windows for one encoder-decoder step. Window length
    /// shrinks to what the recent slice actually holds so early
    /// iterations with short episodes still train.
    fn draw_ed_data(&self, rng: &mut ChaCha8Rng) -> Result<Vec<TaskEdData>> {
        let mut data = Vec::with_capacity(self.tasks.len());
        for task in 0..self.tasks.len() {
            let available = self.real.count(task, None);
            let len = self.config.context_window.min(available);
            if len == 0 {
                return Err(Error::InsufficientData(format!(
                    "task {task} has no real transitions; collect before training"
                )));
            }
            let mut windows = Vec::with_capacity(self.config.cluster_windows);
            for _ in 0..self.config.cluster_windows {
                let batch = self.real.sample(task, len, None, true, rng)?;
                windows.push(batch.iter().map(|t| t.context_tuple()).collect());
            }
            data.push(TaskEdData { windows });
        }
        Ok(data)
    }

    /// Joint encoder and world-model updates on the full objective.
    /// Returns the terms of the last step.
    pub fn ed_phase(&mut self) -> Result<ElboTerms> {
        let mut rng = self.phase_rng("ed");
        let weights = ElboWeights::from(&self.config);
        let mut last = None;
        for _ in 0..self.config.ed_steps {
            let data = self.draw_ed_data(&mut rng)?;
            let terms = ed_step(
                &self.encoder,
                &mut self.encoder_store,
                &self.wm,
                &mut self.world_store,
                &self.schema,
                &data,
                &weights,
                self.config.ed_lr,
                &mut rng,
            )?;
            last = Some(terms);
        }
        last.ok_or_else(|| Error::Config("ed_steps must be >= 1".into()))
    }

    /// Quick disentanglement probe, in percent. Spends its own env
    /// interactions; they are not counted against the training budget.
    pub fn probe_phase(&mut self) -> Result<f64> {
        let mut rng = self.phase_rng("probe");
        let config = ProbeConfig::quick(self.config.probe_pairs, self.config.probe_rollout_len);
        let (score, _) = disentanglement_score(
            &self.encoder,
            &self.encoder_store,
            self.config.env,
            self.options,
            &config,
            &mut rng,
        )?;
        Ok(score)
    }

    /// Refreshes the per-task posterior means from the freshest context.
    pub fn refresh_task_latents(&mut self) -> Result<()> {
        for task in 0..self.tasks.len() {
            let tail = self.real.tail(task, self.config.context_window);
            if tail.is_empty() {
                continue;
            }
            let tuples: Vec<Vec<f64>> = tail
                .iter()
                .map(|t| t.context_tuple().encode(&self.schema))
                .collect::<Result<_>>()?;
            self.task_latents[task] = self
                .encoder
                .final_posterior(&self.encoder_store, &tuples)?
                .mean;
        }
        Ok(())
    }

    /// Sweeps each factor across its range with the others at their
    /// midpoints, encodes one probe rollout per point, and fits the
    /// factor-to-dimension assignment.
    fn fit_factor_map(&self, rng: &mut ChaCha8Rng) -> Result<FactorMap> {
        let mut sweeps = Vec::with_capacity(self.schema.factors.len());
        for f in &self.schema.factors {
            let mut means = Vec::with_capacity(SWEEP_POINTS);
            for p in 0..SWEEP_POINTS {
                let value = f.lo + (f.hi - f.lo) * p as f64 / (SWEEP_POINTS - 1) as f64;
                let spec = crate::env::task_with_factor(self.config.env, &f.name, value)?;
                let seed: u64 = rng.random();
                let mut env = make_env_with(&spec, seed, self.options)?;
                let mut explorer = RandomWalkExplorer::new(&self.schema);
                let mut state = env.reset();
                let mut tuples = Vec::with_capacity(self.config.probe_rollout_len);
                for _ in 0..self.config.probe_rollout_len {
                    let action = explorer.act(rng);
                    let (next, reward) = env.step(&action)?;
                    tuples.push(
                        ContextTuple {
                            state: state.observation.clone(),
                            action,
                            reward,
                            next_state: next.observation.clone(),
                        }
                        .encode(&self.schema)?,
                    );
                    state = next;
                    if state.done {
                        state = env.reset();
                    }
                }
                means.push(
                    self.encoder
                        .final_posterior(&self.encoder_store, &tuples)?
                        .mean,
                );
            }
            sweeps.push(FactorSweep {
                factor: f.name.clone(),
                posterior_means: means,
            });
        }
        FactorMap::fit(&sweeps)
    }

    /// Composes interpolated latents once the factor map exists.
    fn compose_imaginary(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<ImaginaryTask>> {
        let Some(map) = &self.factor_map else {
            return Ok(Vec::new());
        };
        map.compose_imaginary(
            &self.task_latents,
            self.config.interpolation_density,
            self.config.interpolation_noise,
            self.config.imaginary_tasks,
            rng,
        )
    }

    /// Fills the imagination buffer for this iteration: dreamed rollouts
    /// of real tasks (provenance IR) always, dreamed rollouts of
    /// interpolated tasks (provenance I) once the probe gate is open.
    /// Returns (IR transitions, I transitions).
    pub fn imagination_phase(&mut self, gate_open: bool) -> Result<(usize, usize)> {
        let mut rng = self.phase_rng("imagine");
        self.imag.clear();
        self.imag_latents.clear();

        let mut n_ir = 0;
        if self.config.enable_ir {
            for task in 0..self.tasks.len() {
                let z = self.task_latents[task].clone();
                for _ in 0..self.config.ir_rollouts_per_task {
                    let s0 = sample_initial_state(self.config.env, &mut rng);
                    let rollout = self.wm.imagine_rollout(
                        &self.world_store,
                        &mut self.agent,
                        &z,
                        &s0,
                        self.config.imagination_horizon,
                        Provenance::ImaginedReal,
                        &mut rng,
                    )?;
                    n_ir += rollout.len();
                    for t in rollout {
                        self.imag.push(task, t);
                    }
                }
                self.imag_latents.insert(task, z);
            }
        }

        let mut n_i = 0;
        if gate_open && self.config.enable_i {
            if self.factor_map.is_none() {
                match self.fit_factor_map(&mut rng) {
                    Ok(map) => self.factor_map = Some(map),
                    // Entangled dimensions mean interpolation would mix
                    // factors; skip this iteration and retry later.
                    Err(Error::EntangledFactors { .. }) => return Ok((n_ir, 0)),
                    Err(e) => return Err(e),
                }
            }
            let composed = self.compose_imaginary(&mut rng)?;
            for (j, task) in composed.iter().enumerate() {
                let id = self.tasks.len() + j;
                self.imaginary_rows.push((
                    self.iteration,
                    j,
                    task.itype.tag(),
                    task.z.clone(),
                ));
                for _ in 0..self.config.i_rollouts_per_task {
                    let s0 = sample_initial_state(self.config.env, &mut rng);
                    let rollout = self.wm.imagine_rollout(
                        &self.world_store,
                        &mut self.agent,
                        &task.z,
                        &s0,
                        self.config.imagination_horizon,
                        Provenance::Imagined,
                        &mut rng,
                    )?;
                    n_i += rollout.len();
                    for t in rollout {
                        self.imag.push(id, t);
                    }
                }
                self.imag_latents.insert(id, task.z.clone());
            }
        }
        Ok((n_ir, n_i))
    }

    /// SAC updates on mixed real and imagined batches. Returns the mean
    /// losses over the steps taken.
    pub fn policy_phase(&mut self) -> Result<SacLosses> {
        let mut rng = self.phase_rng("policy");
        let batch = self.config.sac.batch_size;
        let imag_ids: Vec<usize> = self.imag.task_ids().collect();
        let mut sums = SacLosses {
            critic: 0.0,
            actor: 0.0,
        };
        let mut steps = 0;
        for step in 0..self.config.policy_steps {
            let task = step % self.tasks.len();
            let n_real = batch.min(self.real.count(task, None));
            if n_real == 0 {
                continue;
            }
            let real_batch: Vec<Transition> = self
                .real
                .sample(task, n_real, None, false, &mut rng)?
                .into_iter()
                .cloned()
                .collect();
            let z_real = self.task_latents[task].clone();

            let imagined = if imag_ids.is_empty() {
                None
            } else {
                let id = imag_ids[rng.random_range(0..imag_ids.len())];
                let n = batch.min(self.imag.count(id, None));
                if n == 0 {
                    None
                } else {
                    let transitions: Vec<Transition> = self
                        .imag
                        .sample(id, n, None, false, &mut rng)?
                        .into_iter()
                        .cloned()
                        .collect();
                    Some((self.imag_latents[&id].clone(), transitions))
                }
            };

            let losses = self.agent.train_step(
                Some((&z_real, &real_batch)),
                imagined.as_ref().map(|(z, t)| (z.as_slice(), t.as_slice())),
                &mut rng,
            )?;
            sums.critic += losses.critic;
            sums.actor += losses.actor;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::InsufficientData(
                "no policy step had data to train on".into(),
            ));
        }
        Ok(SacLosses {
            critic: sums.critic / steps as f64,
            actor: sums.actor / steps as f64,
        })
    }

    /// Mean return of the deterministic policy across training tasks,
    /// conditioned on the cached posterior means.
    pub fn eval_phase(&mut self) -> Result<f64> {
        let mut rng = self.phase_rng("eval");
        let mut returns = Vec::new();
        for task in 0..self.tasks.len() {
            let z = self.task_latents[task].clone();
            for _ in 0..self.config.eval_episodes {
                let seed: u64 = rng.random();
                let mut env = make_env_with(&self.tasks[task], seed, self.options)?;
                let mut state = env.reset();
                let mut total = 0.0;
                while !state.done {
                    let action = self.agent.act_deterministic(&state.observation, &z)?;
                    let (next, reward) = env.step(&action)?;
                    total += reward;
                    state = next;
                }
                returns.push(total);
            }
        }
        if returns.is_empty() {
            return Err(Error::InsufficientData("no evaluation episodes".into()));
        }
        Ok(returns.iter().sum::<f64>() / returns.len() as f64)
    }

    /// One full outer iteration.
    pub fn iterate(&mut self, started: Instant) -> Result<IterationLog> {
        let real_steps = self.collect_phase()?;
        let elbo = self.ed_phase()?;
        let probe = self.probe_phase()?;
        self.refresh_task_latents()?;
        let gate_open = probe / 100.0 >= self.config.probe_threshold;
        let (imagined_real, imagined) = self.imagination_phase(gate_open)?;
        let losses = if self.config.policy_steps > 0 {
            self.policy_phase()?
        } else {
            SacLosses {
                critic: 0.0,
                actor: 0.0,
            }
        };
        let mean_return = self.eval_phase()?;
        let log = IterationLog {
            iteration: self.iteration,
            wall_clock: started.elapsed().as_secs_f64(),
            elbo,
            critic_loss: losses.critic,
            actor_loss: losses.actor,
            disentanglement: probe,
            mean_return,
            real_steps,
            imagined_real,
            imagined,
            gate_open,
        };
        self.iteration += 1;
        Ok(log)
    }

    /// Runs the configured number of iterations and writes all artifacts
    /// into the output directory.
    pub fn run(&mut self) -> Result<RunArtifacts> {
        self.run_with(|_| {})
    }

    /// Like [`run`](Self::run), invoking `progress` after each iteration.
    pub fn run_with(&mut self, mut progress: impl FnMut(&IterationLog)) -> Result<RunArtifacts> {
        let out_dir = PathBuf::from(&self.config.out_dir);
        std::fs::create_dir_all(&out_dir)?;
        std::fs::write(out_dir.join("config.txt"), self.config.to_kv_text())?;
        let env_manifest = out_dir.join("env.txt");
        std::fs::write(&env_manifest, self.schema.manifest_text())?;

        let metrics_csv = out_dir.join("metrics.csv");
        let mut csv = String::from(METRICS_HEADER);
        csv.push('\n');
        let checkpoint = out_dir.join("checkpoint.bin");
        let started = Instant::now();
        let mut logs = Vec::with_capacity(self.config.iterations);
        for i in 0..self.config.iterations {
            let log = self.iterate(started)?;
            writeln!(csv, "{}", log.csv_row()).expect("string write");
            std::fs::write(&metrics_csv, &csv)?;
            progress(&log);
            logs.push(log);
            let last = i + 1 == self.config.iterations;
            if last || (i + 1) % self.config.checkpoint_every.max(1) == 0 {
                self.save(&checkpoint)?;
            }
        }

        let imaginary_manifest = out_dir.join("imaginary_tasks.csv");
        self.write_imaginary_manifest(&imaginary_manifest)?;
        Ok(RunArtifacts {
            out_dir,
            metrics_csv,
            checkpoint,
            imaginary_manifest,
            env_manifest,
            logs,
        })
    }

    fn manifest_text(&self, rows: &[(usize, usize, u8, Vec<f64>)]) -> String {
        let mut out = String::from("iteration,task,interpolation_type");
        for d in 0..self.config.latent_dim {
            write!(out, ",z{d}").expect("string write");
        }
        out.push('\n');
        for (iteration, index, tag, z) in rows {
            write!(out, "{iteration},{index},{tag}").expect("string write");
            for v in z {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Manifest of every composed imaginary task, one row each.
    pub fn write_imaginary_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_text(&self.imaginary_rows))?;
        Ok(())
    }

    /// Composes a fresh batch of interpolated tasks and returns their
    /// manifest text, fitting the factor map first when the current
    /// state lacks one.
    pub fn interpolate_manifest(&mut self, count: Option<usize>) -> Result<String> {
        let mut rng = self.phase_rng("interpolate");
        if self.factor_map.is_none() {
            self.factor_map = Some(self.fit_factor_map(&mut rng)?);
        }
        let n = count.unwrap_or(self.config.imaginary_tasks);
        let map = self.factor_map.as_ref().expect("fitted above");
        let composed = map.compose_imaginary(
            &self.task_latents,
            self.config.interpolation_density,
            self.config.interpolation_noise,
            n,
            &mut rng,
        )?;
        let rows: Vec<(usize, usize, u8, Vec<f64>)> = composed
            .into_iter()
            .enumerate()
            .map(|(j, t)| (self.iteration, j, t.itype.tag(), t.z))
            .collect();
        Ok(self.manifest_text(&rows))
    }

    /// Per-step traces from imagined rollouts for the profile plot: the
    /// rear neighbor's acceleration when the highway template exposes
    /// it, the predicted reward otherwise.
    pub fn profile_series(&mut self, rollouts: usize) -> Result<Vec<Vec<f64>>> {
        let mut rng = self.phase_rng("profile");
        let mut series = Vec::with_capacity(rollouts);
        for k in 0..rollouts {
            let z = self.task_latents[k % self.task_latents.len()].clone();
            let s0 = sample_initial_state(self.config.env, &mut rng);
            let rollout = self.wm.imagine_rollout(
                &self.world_store,
                &mut self.agent,
                &z,
                &s0,
                self.config.imagination_horizon,
                Provenance::ImaginedReal,
                &mut rng,
            )?;
            let mut trace = Vec::with_capacity(rollout.len());
            for t in &rollout {
                let nodes = self
                    .wm
                    .predict_nodes(&self.world_store, &t.state, &t.action, &z)?;
                let value = if self.config.env == crate::env::EnvId::Highway
                    && nodes.len() == crate::env::highway::N_NEIGHBORS
                {
                    nodes[crate::env::highway::REAR_SLOT]
                } else {
                    self.wm
                        .predict_reward(&self.world_store, &t.state, &t.action, &z)?
                };
                trace.push(value);
            }
            series.push(trace);
        }
        Ok(series)
    }

    /// All three plot kinds into `out_dir`: latent-traversal heatmaps,
    /// rollout profiles, and a learning curve over the given per-seed
    /// return histories. Returns the written paths.
    pub fn emit_plots(
        &mut self,
        out_dir: &Path,
        per_seed_returns: &[Vec<f64>],
    ) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out_dir)?;
        let sweep: Vec<f64> = (0..5).map(|i| -2.0 + i as f64).collect();
        let mut paths =
            emit_traversal_heatmaps(&self.wm, &self.world_store, &self.schema, &sweep, out_dir)?;
        let series = self.profile_series(4)?;
        let profile = out_dir.join("profile.png");
        emit_profile_plot(&series, &profile)?;
        paths.push(profile);
        let curve = out_dir.join("learning_curve.png");
        emit_learning_curve(per_seed_returns, &curve)?;
        paths.push(curve);
        Ok(paths)
    }

    /// Snapshot of every parameter store plus structural state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TrainerMeta {
            iteration: self.iteration,
            total_env_steps: self.total_env_steps,
            tasks: self.tasks.clone(),
            task_latents: self.task_latents.clone(),
            factor_map: self.factor_map.clone(),
        };
        let checkpoint = Checkpoint {
            config_hash: self.config.config_hash(),
            meta: serde_json::to_string(&meta)
                .map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?,
            stores: self.stores().iter().map(|s| StoreSnapshot::of(s)).collect(),
        };
        save_checkpoint(path, &checkpoint)
    }

    /// Rebuilds a trainer from a config and a matching checkpoint.
    pub fn load(config: TrainConfig, path: &Path) -> Result<Self> {
        let checkpoint = load_checkpoint(path)?;
        if checkpoint.config_hash != config.config_hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written by a different configuration \
                 ({} vs {})",
                checkpoint.config_hash,
                config.config_hash()
            )));
        }
        let mut trainer = Trainer::new(config)?;
        checkpoint
            .store("encoder")?
            .restore(&mut trainer.encoder_store)?;
        checkpoint
            .store("world")?
            .restore(&mut trainer.world_store)?;
        let [actor, critic, target] = trainer.agent.stores_mut();
        checkpoint.store("actor")?.restore(actor)?;
        checkpoint.store("critic")?.restore(critic)?;
        checkpoint.store("critic_target")?.restore(target)?;
        let meta: TrainerMeta = serde_json::from_str(&checkpoint.meta)
            .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;
        trainer.iteration = meta.iteration;
        trainer.total_env_steps = meta.total_env_steps;
        trainer.tasks = meta.tasks;
        trainer.task_latents = meta.task_latents;
        trainer.factor_map = meta.factor_map;
        Ok(trainer)
    }

    /// Adapts to one task the meta-test way: explore with prior-sampled
    /// latents for `context_budget` env steps, infer the posterior mean
    /// from what was seen, then evaluate deterministically. With a zero
    /// budget the policy runs on the prior mean.
    pub fn meta_test_adapt(
        &mut self,
        spec: &TaskSpec,
        context_budget: usize,
        eval_episodes: usize,
        seed: u64,
    ) -> Result<f64> {
        self.schema.validate_task(spec)?;
        let mut rng = derive_rng(seed, "meta-test");
        let mut tuples = Vec::with_capacity(context_budget);
        let mut steps = 0;
        while steps < context_budget {
            let z = LatentPosterior::prior(self.config.latent_dim).sample(&mut rng);
            let env_seed: u64 = rng.random();
            let mut env = make_env_with(spec, env_seed, self.options)?;
            let mut state = env.reset();
            while !state.done && steps < context_budget {
                let (action, _) = self.agent.actor_sample(&state.observation, &z, &mut rng)?;
                let (next, reward) = env.step(&action)?;
                tuples.push(
                    ContextTuple {
                        state: state.observation.clone(),
                        action,
                        reward,
                        next_state: next.observation.clone(),
                    }
                    .encode(&self.schema)?,
                );
                steps += 1;
                state = next;
            }
        }
        let z = if tuples.is_empty() {
            vec![0.0; self.config.latent_dim]
        } else {
            self.encoder
                .final_posterior(&self.encoder_store, &tuples)?
                .mean
        };

        let mut returns = Vec::with_capacity(eval_episodes);
        for _ in 0..eval_episodes {
            let env_seed: u64 = rng.random();
            let mut env = make_env_with(spec, env_seed, self.options)?;
            let mut state = env.reset();
            let mut total = 0.0;
            while !state.done {
                let action = self.agent.act_deterministic(&state.observation, &z)?;
                let (next, reward) = env.step(&action)?;
                total += reward;
                state = next;
            }
            returns.push(total);
        }
        if returns.is_empty() {
            return Err(Error::Config("eval_episodes must be >= 1".into()));
        }
        Ok(returns.iter().sum::<f64>() / returns.len() as f64)
    }

    /// Fresh per-task data for evaluation, collected the same way the
    /// training data is (the stochastic policy conditioned on the task
    /// embedding), split into (windows, held-out).
    #[allow(clippy::type_complexity)]
    fn evaluation_rollouts(
        &mut self,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(Vec<Vec<ContextTuple>>, Vec<ContextTuple>)>> {
        let mut per_task = Vec::with_capacity(self.tasks.len());
        for (task, spec) in self.tasks.clone().iter().enumerate() {
            let z = self.task_latents[task].clone();
            let mut episodes: Vec<Vec<ContextTuple>> = Vec::with_capacity(3);
            for _ in 0..3 {
                let seed: u64 = rng.random();
                let mut env = make_env_with(spec, seed, self.options)?;
                let mut state = env.reset();
                let mut tuples = Vec::with_capacity(self.config.context_window);
                for _ in 0..self.config.context_window {
                    let (action, _) = self.agent.actor_sample(&state.observation, &z, rng)?;
                    let (next, reward) = env.step(&action)?;
                    tuples.push(ContextTuple {
                        state: state.observation.clone(),
                        action,
                        reward,
                        next_state: next.observation.clone(),
                    });
                    state = next;
                    if state.done {
                        state = env.reset();
                    }
                }
                episodes.push(tuples);
            }
            let held_out = episodes.pop().expect("three episodes");
            per_task.push((episodes, held_out));
        }
        Ok(per_task)
    }

    /// Reconstruction error on fresh held-out rollouts, alone; the
    /// physics-ablation comparison wants this without paying for the
    /// rest of the metric suite.
    pub fn held_out_reconstruction(&mut self) -> Result<Measured> {
        let mut rng = self.phase_rng("held-out-recon");
        self.refresh_task_latents()?;
        let rollouts = self.evaluation_rollouts(&mut rng)?;
        let tasks: Vec<(Vec<ContextTuple>, Vec<ContextTuple>)> = rollouts
            .into_iter()
            .map(|(mut windows, held_out)| (windows.swap_remove(0), held_out))
            .collect();
        let (m, v) = reconstruction_error(
            &self.encoder,
            &self.encoder_store,
            &self.wm,
            &self.world_store,
            &self.schema,
            &tasks,
        )?;
        Ok(Measured::new(m, v))
    }

    /// The full metric suite on the current parameters. Spends fresh env
    /// interactions for probing and scoring.
    pub fn evaluate(&mut self, probe: &ProbeConfig) -> Result<MetricReport> {
        let mut rng = self.phase_rng("evaluate");
        self.refresh_task_latents()?;
        let disentanglement = {
            let (score, std) = disentanglement_score(
                &self.encoder,
                &self.encoder_store,
                self.config.env,
                self.options,
                probe,
                &mut rng,
            )?;
            Measured::new(score, std)
        };

        let rollouts = self.evaluation_rollouts(&mut rng)?;
        let mut means_by_task = Vec::with_capacity(rollouts.len());
        let mut recon_tasks = Vec::with_capacity(rollouts.len());
        for (windows, held_out) in &rollouts {
            let mut means = Vec::with_capacity(windows.len());
            for w in windows {
                let encoded: Vec<Vec<f64>> = w
                    .iter()
                    .map(|t| t.encode(&self.schema))
                    .collect::<Result<_>>()?;
                means.push(
                    self.encoder
                        .final_posterior(&self.encoder_store, &encoded)?
                        .mean,
                );
            }
            means_by_task.push(means);
            recon_tasks.push((windows[0].clone(), held_out.clone()));
        }
        let intra = {
            let (m, v) = intra_cluster_variance(&means_by_task)?;
            Measured::new(m, v)
        };
        let reconstruction = {
            let (m, v) = reconstruction_error(
                &self.encoder,
                &self.encoder_store,
                &self.wm,
                &self.world_store,
                &self.schema,
                &recon_tasks,
            )?;
            Measured::new(m, v)
        };

        let sfi = {
            let mut trajectories = Vec::new();
            for (task, spec) in self.tasks.clone().into_iter().enumerate() {
                let z = self.task_latents[task].clone();
                for _ in 0..2 {
                    let s0 = sample_initial_state(self.config.env, &mut rng);
                    let rollout = self.wm.imagine_rollout(
                        &self.world_store,
                        &mut self.agent,
                        &z,
                        &s0,
                        self.config.imagination_horizon.max(10),
                        Provenance::ImaginedReal,
                        &mut rng,
                    )?;
                    trajectories.push((spec.clone(), rollout));
                }
            }
            match sfi_error(&self.schema, &trajectories) {
                Ok((m, v)) => Some(Measured::new(m, v)),
                Err(Error::MissingSpeculator(_)) => None,
                Err(e) => return Err(e),
            }
        };

        if self.factor_map.is_none() {
            // A map may still be fittable even if training never opened
            // the imagination gate; entangled dims just leave SCI blank.
            match self.fit_factor_map(&mut rng) {
                Ok(map) => self.factor_map = Some(map),
                Err(Error::EntangledFactors { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let sci = if self.factor_map.is_none() {
            None
        } else {
            let zs: Vec<Vec<f64>> = self
                .compose_imaginary(&mut rng)?
                .into_iter()
                .map(|t| t.z)
                .collect();
            let map = self.factor_map.as_ref().expect("checked above");
            let active = map.active_dims();
            if zs.is_empty() {
                None
            } else {
                let (m, v) = sci_error(
                    &self.encoder,
                    &self.encoder_store,
                    &self.wm,
                    &self.world_store,
                    &mut self.agent,
                    &zs,
                    &active,
                    self.config.imagination_horizon,
                    &mut rng,
                )?;
                Some(Measured::new(m, v))
            }
        };

        let mean_return = self.eval_phase()?;
        let report = MetricReport {
            env: self.config.env.to_string(),
            disentanglement,
            intra_cluster: intra,
            reconstruction,
            sfi,
            sci,
            mean_return,
        };
        report.validate()?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvId;

    fn tiny_config(env: EnvId) -> TrainConfig {
        let mut c = TrainConfig::default_for(env);
        c.iterations = 1;
        c.n_tasks = 2;
        c.latent_dim = 2;
        c.gru_hidden = 8;
        c.model_hidden = vec![8];
        c.sac.hidden = vec![8];
        c.context_window = 8;
        c.ed_steps = 2;
        c.rollouts_per_task = 1;
        c.imagination_horizon = 4;
        c.ir_rollouts_per_task = 1;
        c.i_rollouts_per_task = 1;
        c.imaginary_tasks = 2;
        c.policy_steps = 4;
        c.sac.batch_size = 8;
        c.probe_pairs = 5;
        c.probe_rollout_len = 8;
        c.eval_episodes = 1;
        c.recent_window = 400;
        c
    }

    #[test]
    fn phases_touch_only_their_own_parameters() {
        let mut trainer = Trainer::new(tiny_config(EnvId::Nav2d)).unwrap();
        trainer.collect_phase().unwrap();

        let hash = |t: &Trainer| -> Vec<u64> {
            t.stores().iter().map(|s| s.content_hash()).collect()
        };
        let before = hash(&trainer);
        trainer.ed_phase().unwrap();
        let after_ed = hash(&trainer);
        assert_ne!(before[0], after_ed[0], "encoder must move");
        assert_ne!(before[1], after_ed[1], "world model must move");
        assert_eq!(before[2..], after_ed[2..], "policy must not move");

        trainer.refresh_task_latents().unwrap();
        trainer.imagination_phase(false).unwrap();
        let after_imagine = hash(&trainer);
        assert_eq!(after_ed, after_imagine, "imagination trains nothing");

        trainer.policy_phase().unwrap();
        let after_policy = hash(&trainer);
        assert_eq!(
            after_imagine[..2],
            after_policy[..2],
            "policy must not move encoder or world model"
        );
        assert_ne!(after_imagine[2], after_policy[2], "actor must move");
        assert_ne!(after_imagine[3], after_policy[3], "critic must move");
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_metric_log() {
        let run = |dir: &str| -> Vec<String> {
            let mut config = tiny_config(EnvId::Nav2d);
            config.out_dir = std::env::temp_dir()
                .join(dir)
                .to_string_lossy()
                .into_owned();
            let mut trainer = Trainer::new(config).unwrap();
            let artifacts = trainer.run().unwrap();
            let text = std::fs::read_to_string(&artifacts.metrics_csv).unwrap();
            let _ = std::fs::remove_dir_all(&artifacts.out_dir);
            // Wall clock is the one column allowed to differ.
            text.lines()
                .skip(1)
                .map(|line| {
                    let mut cells: Vec<&str> = line.split(',').collect();
                    cells.remove(1);
                    cells.join(",")
                })
                .collect()
        };
        assert_eq!(run("md_repro_a"), run("md_repro_b"));
    }

    #[test]
    fn run_writes_every_artifact() {
        let mut config = tiny_config(EnvId::CartPole);
        config.out_dir = std::env::temp_dir()
            .join("md_run_artifacts")
            .to_string_lossy()
            .into_owned();
        let mut trainer = Trainer::new(config).unwrap();
        let artifacts = trainer.run().unwrap();
        for path in [
            &artifacts.metrics_csv,
            &artifacts.checkpoint,
            &artifacts.imaginary_manifest,
            &artifacts.env_manifest,
        ] {
            assert!(path.exists(), "missing {}", path.display());
        }
        let csv = std::fs::read_to_string(&artifacts.metrics_csv).unwrap();
        assert!(csv.starts_with("iteration,wall_clock,"));
        assert_eq!(csv.lines().count(), 2);
        let _ = std::fs::remove_dir_all(&artifacts.out_dir);
    }

    #[test]
    fn checkpoint_roundtrip_restores_bitwise_state() {
        let mut config = tiny_config(EnvId::Nav2d);
        config.out_dir = std::env::temp_dir()
            .join("md_ckpt_roundtrip")
            .to_string_lossy()
            .into_owned();
        let mut trainer = Trainer::new(config.clone()).unwrap();
        let artifacts = trainer.run().unwrap();

        let restored = Trainer::load(config.clone(), &artifacts.checkpoint).unwrap();
        let a: Vec<u64> = trainer.stores().iter().map(|s| s.content_hash()).collect();
        let b: Vec<u64> = restored.stores().iter().map(|s| s.content_hash()).collect();
        assert_eq!(a, b);
        assert_eq!(restored.iteration(), trainer.iteration());
        assert_eq!(restored.tasks(), trainer.tasks());

        let mut other = config;
        other.seed = 99;
        assert!(matches!(
            Trainer::load(other, &artifacts.checkpoint),
            Err(Error::Checkpoint(_))
        ));
        let _ = std::fs::remove_dir_all(&artifacts.out_dir);
    }

    #[test]
    fn plots_and_interpolation_manifest_come_out_of_a_short_run() {
        let mut config = tiny_config(EnvId::Nav2d);
        config.iterations = 2;
        config.out_dir = std::env::temp_dir()
            .join("md_plots")
            .to_string_lossy()
            .into_owned();
        let mut trainer = Trainer::new(config).unwrap();
        let artifacts = trainer.run().unwrap();

        let returns: Vec<f64> = artifacts.logs.iter().map(|l| l.mean_return).collect();
        let plot_dir = artifacts.out_dir.join("plots");
        let paths = trainer.emit_plots(&plot_dir, &[returns]).unwrap();
        assert_eq!(paths.len(), 2 + 2, "one heatmap per latent dim plus two");
        for p in &paths {
            assert!(p.exists(), "missing {}", p.display());
        }

        // A synthetic, cleanly separated map keeps this independent of
        // how far two tiny iterations happen to train the encoder.
        let sweeps = vec![
            FactorSweep {
                factor: "goal_x".into(),
                posterior_means: (0..5).map(|i| vec![i as f64, 0.0]).collect(),
            },
            FactorSweep {
                factor: "goal_y".into(),
                posterior_means: (0..5).map(|i| vec![0.0, i as f64]).collect(),
            },
        ];
        trainer.factor_map = Some(FactorMap::fit(&sweeps).unwrap());
        trainer.task_latents = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let manifest = trainer.interpolate_manifest(Some(3)).unwrap();
        assert!(manifest.starts_with("iteration,task,interpolation_type,z0,z1"));
        assert_eq!(manifest.lines().count(), 1 + 3);
        let _ = std::fs::remove_dir_all(&artifacts.out_dir);
    }

    #[test]
    fn meta_test_adapt_reports_finite_returns_even_with_zero_budget() {
        let mut trainer = Trainer::new(tiny_config(EnvId::Nav2d)).unwrap();
        let spec = TaskSpec::nav2d(1.0, 1.0);
        let cold = trainer.meta_test_adapt(&spec, 0, 1, 5).unwrap();
        assert!(cold.is_finite());
        let adapted = trainer.meta_test_adapt(&spec, 50, 1, 5).unwrap();
        assert!(adapted.is_finite());
    }
}
