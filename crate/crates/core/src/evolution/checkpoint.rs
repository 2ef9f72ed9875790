use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Individual, PopulationState, Streams, TrainConfig};
use crate::data::RngState;
use crate::error::{Error, Result};
use crate::nets::NetCheckpoint;
use crate::objectives::{DMutation, GMutation};

/// Lineage of one saved individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInfo<Tag> {
    pub mutation: Option<Tag>,
    pub fitness: Option<f64>,
    pub parent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub iteration: usize,
    pub config: TrainConfig,
    pub rng_state: RngState,
    /// `(iteration, best generator fitness)` for the most recent iterations.
    pub fitness_history: Vec<(usize, f64)>,
    pub best_generator: usize,
    pub generators: Vec<MemberInfo<GMutation>>,
    pub discriminators: Vec<MemberInfo<DMutation>>,
}

/// A full population snapshot: `manifest.json`, `gen_{j}.json` and
/// `disc_{i}.json` in one directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub generators: Vec<NetCheckpoint>,
    pub discriminators: Vec<NetCheckpoint>,
}

fn info<T: Copy>(ind: &Individual<T>) -> MemberInfo<T> {
    MemberInfo {
        mutation: ind.mutation,
        fitness: ind.fitness,
        parent: ind.parent,
    }
}

fn write_json(path: &Path, body: String) -> Result<()> {
    // write then rename so a crash never leaves a torn file behind
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn capture(
        pop: &PopulationState,
        streams: &Streams,
        history: &VecDeque<(usize, f64)>,
    ) -> Self {
        Self {
            manifest: Manifest {
                iteration: pop.iteration,
                config: pop.config.clone(),
                rng_state: streams.root().state(),
                fitness_history: history.iter().copied().collect(),
                best_generator: pop.best_generator(),
                generators: pop.g_parents.iter().map(info).collect(),
                discriminators: pop.d_parents.iter().map(info).collect(),
            },
            generators: pop
                .g_parents
                .iter()
                .map(|g| NetCheckpoint::new(&g.genome, &g.optimizer, None))
                .collect(),
            discriminators: pop
                .d_parents
                .iter()
                .map(|d| NetCheckpoint::new(&d.genome, &d.optimizer, None))
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (j, g) in self.generators.iter().enumerate() {
            write_json(&dir.join(format!("gen_{j}.json")), g.to_json())?;
        }
        for (i, d) in self.discriminators.iter().enumerate() {
            write_json(&dir.join(format!("disc_{i}.json")), d.to_json())?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .expect("manifest serialization is infallible");
        write_json(&dir.join("manifest.json"), manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let generators = (0..manifest.generators.len())
            .map(|j| NetCheckpoint::load(&dir.join(format!("gen_{j}.json"))))
            .collect::<Result<Vec<_>>>()?;
        let discriminators = (0..manifest.discriminators.len())
            .map(|i| NetCheckpoint::load(&dir.join(format!("disc_{i}.json"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            generators,
            discriminators,
        })
    }

    /// Rebuilds the population, validating every tensor and optimizer state.
    pub fn into_population(self) -> Result<PopulationState> {
        let Checkpoint {
            manifest,
            generators,
            discriminators,
        } = self;
        manifest.config.validate()?;
        let g_parents = generators
            .into_iter()
            .zip(manifest.generators)
            .map(|(net, meta)| {
                let (genome, optimizer) = net.into_parts()?;
                Ok(Individual {
                    genome,
                    optimizer,
                    mutation: meta.mutation,
                    fitness: meta.fitness,
                    parent: meta.parent,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d_parents = discriminators
            .into_iter()
            .zip(manifest.discriminators)
            .map(|(net, meta)| {
                let (genome, optimizer) = net.into_parts()?;
                Ok(Individual {
                    genome,
                    optimizer,
                    mutation: meta.mutation,
                    fitness: meta.fitness,
                    parent: meta.parent,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = &manifest.config;
        let g_spec = cfg.architecture.generator(cfg.noise_dim, 2);
        let d_spec = cfg.architecture.discriminator(2);
        if g_parents.len() != cfg.g_parents
            || d_parents.len() != cfg.d_parents
            || g_parents.iter().any(|g| *g.genome.spec() != g_spec)
            || d_parents.iter().any(|d| *d.genome.spec() != d_spec)
        {
            return Err(Error::Checkpoint(
                "networks do not match the saved config".into(),
            ));
        }
        Ok(PopulationState {
            g_parents,
            d_parents,
            iteration: manifest.iteration,
            config: manifest.config,
        })
    }
}
