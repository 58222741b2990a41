//! Minibatch training of the multi-view model on corpus pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    read_checkpoint, write_checkpoint, CheckpointHeader, ParamStore, Real, Tensor,
};
use crate::config::RunConfig;
use crate::corpus::{write_atomic, Corpus};
use crate::error::{Error, Result};
use crate::evaluation::{emit_reports, evaluate, Factor, ProbeReport, Subspace};
use crate::model::{
    poe_backward, poe_fuse, reparameterize, reparameterize_backward, LatentNoise, LatentPosterior,
    MultiViewVae,
};
use crate::objective::{
    elbo_loss, ElboInputs, LatentSamples, LossBreakdown, ObjectiveConfig, ObjectiveWeights,
};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "checkpoint_last_good.ckpt";

/// Forward and backward pass of the negative ELBO for one batch of pairs.
/// Parameter gradients are accumulated into `store`; the caller zeroes them.
pub fn negative_elbo<T: Real>(
    model: &MultiViewVae,
    store: &mut ParamStore<T>,
    x: [&Tensor<T>; 2],
    noise: &LatentNoise<T>,
    objective: &ObjectiveConfig,
    n_data: usize,
) -> Result<LossBreakdown> {
    let cfg = model.config();
    let (dp, ds) = (cfg.d_private, cfg.d_shared);
    let batch = x[0].dim(0);
    let e1 = model.encode(store, x[0])?;
    let e2 = model.encode(store, x[1])?;
    let zs = poe_fuse(&[&e1.shared, &e2.shared], true)?;
    let samples = LatentSamples {
        zp1: reparameterize(&e1.private, &noise.p1)?,
        zp2: reparameterize(&e2.private, &noise.p2)?,
        zs: reparameterize(&zs, &noise.s)?,
    };
    let (xh1, tr1) = model.decode(store, &model.latent_rows(&samples.zp1, &samples.zs, batch)?)?;
    let (xh2, tr2) = model.decode(store, &model.latent_rows(&samples.zp2, &samples.zs, batch)?)?;
    let posterior = LatentPosterior {
        zp1: e1.private.clone(),
        zp2: e2.private.clone(),
        zs1: e1.shared.clone(),
        zs2: e2.shared.clone(),
        zs,
    };
    let inputs = ElboInputs {
        x,
        x_hat: [&xh1, &xh2],
        posterior: &posterior,
        samples: &samples,
    };
    let (loss, grads) = elbo_loss(&inputs, objective, n_data)?;

    let dz1 = model.decode_backward(store, &tr1, &grads.d_x_hat[0])?;
    let dz2 = model.decode_backward(store, &tr2, &grads.d_x_hat[1])?;
    let (mut d_zp1, mut d_zp2, mut d_zs) = (grads.p1.d_z, grads.p2.d_z, grads.s.d_z);
    for b in 0..batch {
        let (r1, r2) = (dz1.data(), dz2.data());
        let row = b * (dp + ds);
        for k in 0..dp {
            d_zp1[b * dp + k] += r1[row + k];
            d_zp2[b * dp + k] += r2[row + k];
        }
        for k in 0..ds {
            d_zs[b * ds + k] += r1[row + dp + k] + r2[row + dp + k];
        }
    }
    let group = |q: &crate::model::GaussianParams<T>,
                 d_mean: Vec<T>,
                 d_log_var: Vec<T>,
                 eps: &[T],
                 d_z: &[T]| {
        let mut g = crate::model::GaussianParams {
            batch: q.batch,
            dim: q.dim,
            mean: d_mean,
            log_var: d_log_var,
        };
        reparameterize_backward(q, eps, d_z, &mut g);
        g
    };
    let gp1 = group(
        &posterior.zp1,
        grads.p1.d_mean,
        grads.p1.d_log_var,
        &noise.p1,
        &d_zp1,
    );
    let gp2 = group(
        &posterior.zp2,
        grads.p2.d_mean,
        grads.p2.d_log_var,
        &noise.p2,
        &d_zp2,
    );
    let gs = group(
        &posterior.zs,
        grads.s.d_mean,
        grads.s.d_log_var,
        &noise.s,
        &d_zs,
    );
    let experts = poe_backward(
        &[&posterior.zs1, &posterior.zs2],
        &posterior.zs,
        &gs.mean,
        &gs.log_var,
    );
    model.encode_backward(store, &e1, &gp1, &experts[0])?;
    model.encode_backward(store, &e2, &gp2, &experts[1])?;
    Ok(loss)
}

/// Splits shuffled pair positions into batches; a trailing batch of one
/// pair is folded into its predecessor since the estimator needs two.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n.div_ceil(batch_size))
        .map(|i| i * batch_size..((i + 1) * batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Result of a training run.
pub struct Trained {
    pub model: MultiViewVae,
    pub store: ParamStore<f32>,
    pub log: Vec<LossBreakdown>,
    pub config_hash: String,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn log(&self) -> PathBuf {
        self.0.join(LOG_FILE)
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.0.join(FINAL_CHECKPOINT)
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.0.join(format!("checkpoint_epoch_{epoch:04}.ckpt"))
    }
}

fn log_text(log: &[LossBreakdown]) -> String {
    let mut s = String::from(LossBreakdown::CSV_HEADER);
    s.push('\n');
    for (e, row) in log.iter().enumerate() {
        let _ = writeln!(s, "{}", row.csv_row(e + 1));
    }
    s
}

/// Trains from scratch on the corpus's training pairs. With `out`, the
/// resolved config, the per-epoch log and checkpoints are written there.
/// `progress` is called after every epoch.
pub fn train(
    corpus: &Corpus,
    cfg: &RunConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(usize, &LossBreakdown),
) -> Result<Trained> {
    cfg.validate()?;
    let (h, w) = corpus.manifest.image_shape();
    if h != cfg.model.input_size || w != cfg.model.input_size {
        return Err(Error::Config(format!(
            "corpus images are {h}×{w}, model expects {}",
            cfg.model.input_size
        )));
    }
    let pairs = corpus.manifest.train_pairs();
    if pairs.len() < 2 {
        return Err(Error::Config(format!(
            "{} training pairs, need at least 2",
            pairs.len()
        )));
    }
    let config_hash = cfg.hash();
    let dir = out.map(|p| RunDir(p.to_path_buf()));
    if let Some(d) = &dir {
        cfg.write_snapshot(&d.0)?;
    }
    let run_json = serde_json::to_value(cfg)?;
    let save = |store: &ParamStore<f32>, path: &Path, epoch: usize| {
        write_checkpoint(path, store, &config_hash, epoch, run_json.clone())
    };

    let tc = &cfg.training;
    let (model, mut store) = MultiViewVae::new::<f32>(cfg.model.clone(), tc.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    noise_rng.set_stream(2);
    let n_data = pairs.len();
    let mut order: Vec<usize> = (0..n_data).collect();
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossBreakdown::default();
        for range in batch_ranges(n_data, tc.batch_size) {
            let batch = &order[range];
            let x1 = corpus.batch::<f32>(batch.iter().map(|&p| pairs[p].0));
            let x2 = corpus.batch::<f32>(batch.iter().map(|&p| pairs[p].1));
            let noise = LatentNoise::sample(batch.len(), &cfg.model, &mut noise_rng);
            store.zero_grad();
            let step = negative_elbo(
                &model,
                &mut store,
                [&x1, &x2],
                &noise,
                &cfg.objective,
                n_data,
            )
            .and_then(|loss| store.adam_step(&tc.adam).map(|_| loss));
            match step {
                Ok(loss) => epoch_loss.add_scaled(&loss, batch.len() as f64 / n_data as f64),
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(d) = &dir {
                        save(&store, &d.0.join(LAST_GOOD_CHECKPOINT), epoch - 1)?;
                    }
                    return Err(Error::NonFinite(format!("epoch {epoch}: {e}")));
                }
                Err(e) => return Err(e),
            }
        }
        progress(epoch, &epoch_loss);
        log.push(epoch_loss);
        if let Some(d) = &dir {
            write_atomic(&d.log(), log_text(&log).as_bytes())?;
            if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 {
                save(&store, &d.epoch_checkpoint(epoch), epoch)?;
            }
        }
    }
    if let Some(d) = &dir {
        save(&store, &d.final_checkpoint(), tc.epochs)?;
    }
    Ok(Trained {
        model,
        store,
        log,
        config_hash,
    })
}

/// A model restored from a checkpoint, with the run config it was trained under.
pub struct LoadedModel {
    pub config: RunConfig,
    pub header: CheckpointHeader,
    pub model: MultiViewVae,
    pub store: ParamStore<f32>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let (header, tensors) = read_checkpoint(path)?;
    let config: RunConfig =
        serde_json::from_value(header.model.clone()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("embedded run config: {e}"),
        })?;
    if config.hash() != header.config_hash {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "config hash does not match embedded config".into(),
        });
    }
    let (model, mut store) = MultiViewVae::new::<f32>(config.model.clone(), config.training.seed)?;
    model.load_values(&mut store, &tensors)?;
    Ok(LoadedModel {
        config,
        header,
        model,
        store,
    })
}

/// A sweep over objective weights, repeated over seeds, sharing one base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub points: Vec<ObjectiveWeights>,
    /// Training seeds; every point is run once per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunConfig,
    /// Corpus directory; synthesized from `base.synth` when absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<AblationGrid> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: AblationGrid = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if grid.points.is_empty() || grid.seeds.is_empty() {
            return Err(Error::Config(
                "ablation grid needs at least one point and one seed".into(),
            ));
        }
        grid.base.validate()?;
        for p in &grid.points {
            p.validate()?;
        }
        Ok(grid)
    }
}

/// Outcome of one grid point: scores, or the failure that stopped it.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub weights: ObjectiveWeights,
    pub seed: u64,
    pub outcome: std::result::Result<AblationScores, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationScores {
    pub probes: ProbeReport,
    pub timbre_ratio: f64,
    pub frequency_ratio: f64,
}

impl AblationScores {
    /// Product of the two MI concentration ratios.
    pub fn score(&self) -> f64 {
        self.timbre_ratio * self.frequency_ratio
    }
}

pub const ABLATION_CSV: &str = "ablation.csv";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("alpha,beta,gamma,seed,status");
    for sub in Subspace::ALL {
        for f in Factor::ALL {
            let _ = write!(s, ",{}_{}", sub.name(), f.name());
        }
    }
    s.push_str(",mi_timbre_ratio,mi_frequency_ratio,score\n");
    for r in rows {
        let w = r.weights;
        let _ = write!(s, "{},{},{},{}", w.alpha, w.beta, w.gamma, r.seed);
        match &r.outcome {
            Ok(sc) => {
                s.push_str(",ok");
                for sub in Subspace::ALL {
                    for f in Factor::ALL {
                        let _ = write!(s, ",{:.6}", sc.probes.get(sub, f));
                    }
                }
                let _ = writeln!(
                    s,
                    ",{:.6},{:.6},{:.6}",
                    sc.timbre_ratio,
                    sc.frequency_ratio,
                    sc.score()
                );
            }
            Err(msg) => {
                let _ = writeln!(s, ",\"failed: {}\"{}", msg.replace('"', "'"), ",".repeat(9));
            }
        }
    }
    s
}

/// Trains and evaluates every grid point. A failing point is recorded and
/// the sweep continues. Each run gets its own subdirectory of `out`, and
/// the summary table is rewritten after every run.
pub fn ablate(
    corpus: &Corpus,
    grid: &AblationGrid,
    out: &Path,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        for &weights in &grid.points {
            let mut cfg = grid.base.clone();
            cfg.objective.weights = weights;
            cfg.training.seed = seed;
            let dir = out.join(format!(
                "run_a{}_b{}_g{}_s{seed}",
                weights.alpha, weights.beta, weights.gamma
            ));
            let outcome = train(corpus, &cfg, Some(&dir), |_, _| {})
                .and_then(|t| evaluate(&t.model, &t.store, corpus, &cfg.evaluation))
                .and_then(|ev| {
                    emit_reports(Some(&ev.mi), Some(&ev.probes), &dir)?;
                    Ok(AblationScores {
                        timbre_ratio: ev.mi.timbre_ratio(),
                        frequency_ratio: ev.mi.frequency_ratio(),
                        probes: ev.probes,
                    })
                })
                .map_err(|e| e.to_string());
            let row = AblationRow {
                weights,
                seed,
                outcome,
            };
            progress(&row);
            rows.push(row);
            write_atomic(&out.join(ABLATION_CSV), ablation_csv(&rows).as_bytes())?;
        }
    }
    Ok(rows)
}
