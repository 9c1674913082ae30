use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{adam_step, evaluate, loss_and_grads, mae_report, predict_angles, AdamState, Batch, EpochRecord};
use super::{EvalMetrics, TrainConfig};
use crate::clustering::{kmeans, soft_assign, target_distribution, ClusterConfig, KMeansResult};
use crate::data::{feature_matrix, Sample};
use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::losses::{AngleBinSpec, LossWeights};
use crate::model::{checksum, encode_frozen, ModelParams};

/// Called after every epoch with the finished record and current parameters.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &ModelParams) -> Result<()> + 'a;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;
const ENCODE_CHUNK: usize = 512;

/// Sample order for a stage-local epoch. Depends only on `(n, seed, epoch)`,
/// so both stages visit identical batches for identical data.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Latent codes for every sample, encoded in parallel chunks.
pub fn encode_samples(params: &ModelParams, samples: &[Sample]) -> Result<Matrix> {
    let dim = params.input_dim();
    let chunks = samples
        .par_chunks(ENCODE_CHUNK)
        .map(|c| encode_frozen(params, &feature_matrix(c, dim)))
        .collect::<Result<Vec<_>>>()?;
    let data = chunks.iter().flat_map(|m| m.data().iter().copied()).collect();
    Matrix::from_vec(samples.len(), params.latent_dim(), data)
}

fn digest(m: &Matrix) -> String {
    let mut h = Sha256::new();
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    data: &[Sample],
    targets: Option<&Matrix>,
    epoch: usize,
    stage: u8,
    config: &TrainConfig,
    spec: &AngleBinSpec,
    beta: f64,
) -> Result<EpochRecord> {
    let weights = LossWeights {
        alpha: config.alpha,
        beta,
    };
    let lr = config.lr_at(epoch);
    let adam_cfg = config.adam();
    let dim = params.input_dim();
    let mut sums = [0.0; 5];
    for rows in epoch_order(data.len(), config.seed, epoch).chunks(config.batch_size) {
        let batch = Batch::gather(data, rows, dim);
        let p_rows = targets.map(|p| p.select_rows(rows));
        let out = loss_and_grads(params, &batch, p_rows.as_ref(), spec, weights)?;
        debug_assert!(out.report.decomposition_error() < 1e-9);
        adam_step(params, &out.grads, adam, lr, &adam_cfg, beta > 0.0)?;
        let r = out.report;
        let w = rows.len() as f64;
        for (s, v) in sums
            .iter_mut()
            .zip([r.yaw.total, r.pitch.total, r.roll.total, r.clustering, r.total])
        {
            *s += w * v;
        }
    }
    let n = data.len() as f64;
    let [l_yaw, l_pitch, l_roll, l_clustering, l_total] = sums.map(|s| s / n);
    Ok(EpochRecord {
        epoch: epoch + 1,
        stage,
        l_yaw,
        l_pitch,
        l_roll,
        l_clustering: (beta > 0.0).then_some(l_clustering),
        l_total,
        ..Default::default()
    })
}

fn record_validation(
    rec: &mut EpochRecord,
    params: &ModelParams,
    val: Option<&[Sample]>,
    spec: &AngleBinSpec,
) -> Result<()> {
    if let Some(val) = val.filter(|v| !v.is_empty()) {
        let mae = mae_report(val, &predict_angles(params, val, spec)?)?;
        rec.val_mae_clean = mae.clean.map(|m| m.mean);
        rec.val_mae_occluded = mae.occluded.map(|m| m.mean);
        rec.val_mae_combined = Some(mae.combined.mean);
    }
    Ok(())
}

fn check_training_set(data: &[Sample], epochs: usize, stage: u8) -> Result<()> {
    if data.is_empty() && epochs > 0 {
        return Err(Error::Config(format!("stage {stage} training set is empty")));
    }
    Ok(())
}

/// Stage 1: the three angle losses only; cluster centers are never touched.
pub fn train_stage1(
    params: &mut ModelParams,
    train: &[Sample],
    val: Option<&[Sample]>,
    config: &TrainConfig,
    spec: &AngleBinSpec,
    adam: &mut AdamState,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    check_training_set(train, config.stage1_epochs, 1)?;
    let mut history = Vec::with_capacity(config.stage1_epochs);
    for epoch in 0..config.stage1_epochs {
        let mut rec = run_epoch(params, adam, train, None, epoch, 1, config, spec, 0.0)?;
        record_validation(&mut rec, params, val, spec)?;
        log::info!(
            "stage 1 epoch {}: L_total {:.4}, val MAE {:?}",
            rec.epoch,
            rec.l_total,
            rec.val_mae_combined
        );
        hook(&rec, params)?;
        history.push(rec);
    }
    Ok(history)
}

/// Runs k-means on the latent codes of `samples` and installs the centers.
pub fn init_stage2(params: &mut ModelParams, samples: &[Sample], cluster: &ClusterConfig) -> Result<KMeansResult> {
    cluster.validate()?;
    let latents = encode_samples(params, samples)?;
    cluster.check_small_relative_to(samples.len());
    let result = kmeans(&latents, cluster)?;
    log::info!(
        "k-means: k = {}, wcss {:.4} after {} iterations (restart {})",
        cluster.k,
        result.wcss,
        result.iterations,
        result.restart
    );
    params.centers = Some(result.centers.clone());
    Ok(result)
}

/// Stage 2: angle losses plus `beta` times the clustering term.
///
/// The target distribution is recomputed from all of `train` at the start
/// of every `target_refresh`-th epoch and held fixed in between.
pub fn train_stage2(
    params: &mut ModelParams,
    train: &[Sample],
    val: Option<&[Sample]>,
    config: &TrainConfig,
    spec: &AngleBinSpec,
    adam: &mut AdamState,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    check_training_set(train, config.stage2_epochs, 2)?;
    if params.centers.is_none() {
        return Err(Error::Config(
            "stage 2 needs cluster centers; run init_stage2 first".into(),
        ));
    }
    let mut targets: Option<(Matrix, String)> = None;
    let mut history = Vec::with_capacity(config.stage2_epochs);
    for epoch in 0..config.stage2_epochs {
        if config.beta > 0.0 && epoch % config.target_refresh == 0 {
            let centers = params.centers.as_ref().expect("checked above");
            let q = soft_assign(&encode_samples(params, train)?, centers)?;
            let p = target_distribution(&q).0;
            let sum = digest(&p);
            targets = Some((p, sum));
        }
        let p = targets.as_ref().map(|(p, _)| p);
        let mut rec = run_epoch(params, adam, train, p, epoch, 2, config, spec, config.beta)?;
        rec.target_checksum = targets.as_ref().map(|(_, s)| s.clone());
        record_validation(&mut rec, params, val, spec)?;
        log::info!(
            "stage 2 epoch {}: L_total {:.4}, L_clustering {:?}, val MAE occluded {:?}",
            rec.epoch,
            rec.l_total,
            rec.l_clustering,
            rec.val_mae_occluded
        );
        hook(&rec, params)?;
        history.push(rec);
    }
    Ok(history)
}

/// Stage-2 training samples: the occluded ones, plus clean ones if requested.
pub fn stage2_samples(train: &[Sample], include_clean: bool) -> Vec<Sample> {
    train.iter().filter(|s| include_clean || s.occluded).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub beta: f64,
    pub stage1_checksum: String,
    pub final_checksum: String,
    pub metrics: EvalMetrics,
}

/// Stage 2 from one shared Stage-1 model for every `beta`, in parallel.
///
/// `stage1` must already carry its k-means centers; every run starts from
/// bit-identical parameters and differs only in the clustering weight.
pub fn ablate_beta(
    stage1: &ModelParams,
    stage2_train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    spec: &AngleBinSpec,
    betas: &[f64],
) -> Result<Vec<AblationRow>> {
    if !config.reset_adam_between_stages {
        return Err(Error::Config(
            "beta ablation starts every run from the Stage-1 checkpoint and needs fresh Adam moments".into(),
        ));
    }
    let stage1_checksum = checksum(stage1);
    betas
        .par_iter()
        .map(|&beta| {
            let cfg = TrainConfig { beta, ..config.clone() };
            cfg.validate()?;
            let mut params = stage1.clone();
            train_stage2(
                &mut params,
                stage2_train,
                Some(val),
                &cfg,
                spec,
                &mut AdamState::new(),
                &mut |_, _| Ok(()),
            )?;
            Ok(AblationRow {
                beta,
                stage1_checksum: stage1_checksum.clone(),
                final_checksum: checksum(&params),
                metrics: evaluate(&params, val, spec, cfg.weights())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorSpec};
    use crate::model::EncoderConfig;

    fn setup(n: usize) -> (ModelParams, Vec<Sample>, TrainConfig) {
        let data = generate_dataset(&GeneratorSpec {
            sample_count: n,
            ..Default::default()
        })
        .unwrap();
        let params = ModelParams::init(&EncoderConfig::default(), 66, 0).unwrap();
        let config = TrainConfig {
            stage1_epochs: 2,
            stage2_epochs: 3,
            batch_size: 16,
            cluster: ClusterConfig {
                k: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        (params, data, config)
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 7, 3);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 7, 3));
        assert_ne!(a, epoch_order(50, 7, 4));
        assert_ne!(a, epoch_order(50, 8, 3));
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let (mut params, data, config) = setup(40);
        let before = params.clone();
        let cfg = TrainConfig {
            stage1_epochs: 0,
            ..config
        };
        let h = train_stage1(
            &mut params,
            &data,
            None,
            &cfg,
            &AngleBinSpec::default(),
            &mut AdamState::new(),
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert!(h.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn stage2_requires_centers() {
        let (mut params, data, config) = setup(40);
        let err = train_stage2(
            &mut params,
            &data,
            None,
            &config,
            &AngleBinSpec::default(),
            &mut AdamState::new(),
            &mut |_, _| Ok(()),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn installed_centers_equal_kmeans_output() {
        let (mut params, data, config) = setup(60);
        let result = init_stage2(&mut params, &data, &config.cluster).unwrap();
        assert_eq!(params.centers.as_ref(), Some(&result.centers));
        let mut again = params.clone();
        again.centers = None;
        assert_eq!(init_stage2(&mut again, &data, &config.cluster).unwrap(), result);
    }

    #[test]
    fn targets_refresh_on_schedule_only() {
        let (mut params, data, config) = setup(60);
        init_stage2(&mut params, &data, &config.cluster).unwrap();
        let cfg = TrainConfig {
            stage2_epochs: 4,
            target_refresh: 2,
            beta: 5.0,
            ..config
        };
        let h = train_stage2(
            &mut params,
            &data,
            None,
            &cfg,
            &AngleBinSpec::default(),
            &mut AdamState::new(),
            &mut |_, _| Ok(()),
        )
        .unwrap();
        let sums: Vec<_> = h.iter().map(|r| r.target_checksum.clone().unwrap()).collect();
        assert_eq!(sums[0], sums[1]);
        assert_eq!(sums[2], sums[3]);
        assert_ne!(sums[1], sums[2]);
        assert!(h.iter().all(|r| r.l_clustering.is_some()));
    }

    #[test]
    fn hook_sees_every_epoch() {
        let (mut params, data, config) = setup(40);
        let mut seen = Vec::new();
        train_stage1(
            &mut params,
            &data,
            Some(&data),
            &config,
            &AngleBinSpec::default(),
            &mut AdamState::new(),
            &mut |r, _| {
                seen.push((r.stage, r.epoch));
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, vec![(1, 1), (1, 2)]);
    }
}
