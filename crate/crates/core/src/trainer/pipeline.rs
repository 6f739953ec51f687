use std::collections::BTreeMap;

use super::{train_stage1_with, train_stage2_with, EpochCallback, Fold, FoldData, TrainConfig, TrainError, TrainOutcome};
use crate::model::ModelConfig;
use crate::preprocess::{preprocess_volume, PreprocessConfig};
use crate::volume::Volume;

/// Both stages of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
}

/// Preprocesses every case with the same settings, keeping its id.
pub fn preprocess_cases(cases: &[(String, Volume)], config: &PreprocessConfig) -> Result<Vec<(String, Volume)>, TrainError> {
    cases
        .iter()
        .map(|(id, v)| Ok((id.clone(), preprocess_volume(v, config)?)))
        .collect()
}

/// Gathers the fold's cases by id. Training cases get offline flips when
/// `flips` is set; validation cases never do.
pub fn fold_data(cases: &[(String, Volume)], fold: &Fold, flips: bool) -> Result<FoldData, TrainError> {
    let by_id: BTreeMap<&str, &Volume> = cases.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let pick = |ids: &[String]| -> Result<Vec<(String, Volume)>, TrainError> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|v| (id.clone(), (*v).clone()))
                    .ok_or_else(|| TrainError::Data(format!("fold refers to unknown case {id}")))
            })
            .collect()
    };
    if let Some(id) = fold.train.iter().find(|id| fold.val.contains(id)) {
        return Err(TrainError::Data(format!("case {id} is in both training and validation")));
    }
    FoldData::build(&pick(&fold.train)?, &pick(&fold.val)?, flips)
}

/// Stage 1 followed by stage 2 from the best stage-1 weights.
pub fn run_fold(
    cases: &[(String, Volume)],
    fold: &Fold,
    model_config: &ModelConfig,
    config: &TrainConfig,
    flips: bool,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<FoldRun, TrainError> {
    let data = fold_data(cases, fold, flips)?;
    let stage1 = train_stage1_with(&data, model_config, config, on_epoch)?;
    let stage2 = train_stage2_with(&stage1.best, &data, model_config, config, on_epoch)?;
    Ok(FoldRun { stage1, stage2 })
}
