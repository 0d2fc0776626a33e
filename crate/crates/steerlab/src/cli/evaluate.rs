//! `evaluate` and `ablate`: metric suites over generated counterfactuals.

use std::fs;

use serde::{Deserialize, Serialize};
use serde_json::json;
use steerlab_nn::Tensor;

use crate::dit::{DiffusionSchedule, ModelParams};
use crate::error::{LabError, Result};
use crate::eval::{
    confidence_shift, ddr, downstream_experiment, effective_metrics, estimate_lesion_mask,
    feature_distance, flip_rate, invert_mask, lesion_presence_rate, masked_psnr, masked_ssim,
    mean_sd, AugmentationContext, MetricsReport, OracleClassifier,
};
use crate::steer::{CounterfactualPair, PathologyVectorBank, SteerConfig};
use crate::synth::{make_dataset, SceneClass, Split};

use super::artifacts;
use super::commands::mean_sigma_per_step;
use super::config::{AblateConfig, RunConfig};

fn write_json(path: &std::path::Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| LabError::json(path, e))?;
    fs::write(path, json).map_err(|e| LabError::io(path, e))?;
    Ok(())
}

/// Background fidelity of one pair, on the complement of the estimated
/// lesion region of the unsteered image.
struct BgScores {
    ssim: f32,
    psnr: f32,
    featdist: f32,
}

fn bg_scores(
    oracle: &OracleClassifier,
    unsteered: &Tensor,
    other: &Tensor,
) -> Result<Option<BgScores>> {
    let lesion = estimate_lesion_mask(unsteered)?;
    let bg = invert_mask(&lesion)?;
    // a pair whose unsteered image shows no concept at all has a full-image
    // "background"; that is fine. A fully-covered image is skipped.
    if bg.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let ssim = match masked_ssim(unsteered, other, &bg) {
        Ok(s) => s,
        Err(_) => return Ok(None), // no valid windows
    };
    Ok(Some(BgScores {
        ssim,
        psnr: masked_psnr(unsteered, other, &bg)?,
        featdist: feature_distance(oracle, unsteered, other, &bg)?,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct CounterfactualReport {
    metrics: MetricsReport,
    /// How often the steered branch preserves the background better than a
    /// re-prompted generation from the same seed.
    preservation_win_rate: f32,
    preservation_n: usize,
    sigma_per_step_mean: Vec<f32>,
    sigma_sparser_toward_end: bool,
}

fn eval_counterfactual(
    cfg: &RunConfig,
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    oracle: &OracleClassifier,
    bank: &PathologyVectorBank,
) -> Result<CounterfactualReport> {
    let steer = cfg.steer()?;
    let sc = steer.steer_config();
    let pairs = artifacts::gen_pairs(
        params,
        schedule,
        bank,
        &sc,
        &steer.concept,
        steer.n_pairs,
        steer.seed,
    )?;
    let reprompts =
        artifacts::gen_reprompts(params, schedule, &steer.concept, steer.n_pairs, steer.seed)?;

    let steered: Vec<Tensor> = pairs.iter().map(|p| p.steered.image.clone()).collect();
    let unsteered: Vec<Tensor> = pairs.iter().map(|p| p.unsteered.image.clone()).collect();

    let source = SceneClass::Lesion.index();
    let flip = flip_rate(oracle, &steered, source)?;
    let delta_p = confidence_shift(oracle, &steered, &unsteered, source)?;

    let mut ssims = Vec::new();
    let mut psnrs = Vec::new();
    let mut feats = Vec::new();
    let mut wins = 0usize;
    let mut comparisons = 0usize;
    for (p, reprompt) in pairs.iter().zip(reprompts.iter()) {
        if let Some(scores) = bg_scores(oracle, &p.unsteered.image, &p.steered.image)? {
            ssims.push(scores.ssim);
            psnrs.push(scores.psnr);
            feats.push(scores.featdist);
            if let Some(rep) = bg_scores(oracle, &p.unsteered.image, reprompt)? {
                comparisons += 1;
                if scores.ssim > rep.ssim {
                    wins += 1;
                }
            }
        }
    }
    let mean = |v: &[f32]| -> Option<f32> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f32>() / v.len() as f32)
        }
    };

    let sigma = mean_sigma_per_step(&pairs, schedule.t_sample());
    let sparser = sigma.last().zip(sigma.first()).map(|(l, f)| l < f).unwrap_or(false);
    let metrics = MetricsReport {
        flip_rate: Some(flip),
        delta_p: Some(delta_p),
        bg_ssim: mean(&ssims),
        bg_psnr: mean(&psnrs),
        bg_featdist: mean(&feats),
        n: pairs.len(),
        config_fingerprint: cfg.fingerprint()?,
        ..Default::default()
    };
    metrics.validate()?;
    Ok(CounterfactualReport {
        metrics,
        preservation_win_rate: if comparisons == 0 {
            0.0
        } else {
            wins as f32 / comparisons as f32
        },
        preservation_n: comparisons,
        sigma_per_step_mean: sigma,
        sigma_sparser_toward_end: sparser,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DyeReport {
    metrics: MetricsReport,
    ddr_unsteered: f32,
    ddr_steered: f32,
    lesion_presence_unsteered: f32,
    lesion_presence_steered: f32,
}

fn eval_dye(
    cfg: &RunConfig,
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    oracle: &OracleClassifier,
) -> Result<DyeReport> {
    let steer = cfg.steer()?;
    let bank = artifacts::load_bank(cfg, "dye")?;
    let sc = SteerConfig { ..steer.steer_config() };
    let pairs =
        artifacts::gen_pairs(params, schedule, &bank, &sc, "dye", steer.n_pairs, steer.seed)?;

    let steered: Vec<Tensor> = pairs.iter().map(|p| p.steered.image.clone()).collect();
    let unsteered: Vec<Tensor> = pairs.iter().map(|p| p.unsteered.image.clone()).collect();

    let ddr_unsteered = ddr(oracle, &unsteered)?;
    let ddr_steered = ddr(oracle, &steered)?;
    let lp_unsteered = lesion_presence_rate(oracle, &unsteered)?;
    let lp_steered = lesion_presence_rate(oracle, &steered)?;

    let mut ssims = Vec::new();
    let mut psnrs = Vec::new();
    let mut feats = Vec::new();
    for p in &pairs {
        if let Some(scores) = bg_scores(oracle, &p.unsteered.image, &p.steered.image)? {
            ssims.push(scores.ssim);
            psnrs.push(scores.psnr);
            feats.push(scores.featdist);
        }
    }
    let mean = |v: &[f32]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f32>() / v.len() as f32
        }
    };
    let (bg_ssim, bg_psnr, bg_feat) = (mean(&ssims), mean(&psnrs), mean(&feats));
    let eff = effective_metrics(bg_feat, bg_ssim, bg_psnr, ddr_steered)?;

    let metrics = MetricsReport {
        bg_ssim: Some(bg_ssim),
        bg_psnr: Some(bg_psnr),
        bg_featdist: Some(bg_feat),
        ddr: Some(ddr_steered),
        eff_lpips_proxy: eff.eff_lpips,
        eff_ssim: Some(eff.eff_ssim),
        eff_psnr: Some(eff.eff_psnr),
        n: pairs.len(),
        config_fingerprint: cfg.fingerprint()?,
        ..Default::default()
    };
    metrics.validate()?;
    Ok(DyeReport {
        metrics,
        ddr_unsteered,
        ddr_steered,
        lesion_presence_unsteered: lp_unsteered,
        lesion_presence_steered: lp_steered,
    })
}

fn eval_downstream(
    cfg: &RunConfig,
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    bank: &PathologyVectorBank,
) -> Result<serde_json::Value> {
    let data = cfg.data()?;
    let eval = cfg.eval()?;
    let steer = cfg.steer()?;
    let records = make_dataset(data.n_per_class, data.split_seed)?;

    // small real training pool: first n_real_per_class train scenes per class
    let mut real: Vec<(Tensor, bool)> = Vec::new();
    for class in SceneClass::ALL {
        let mut taken = 0usize;
        for r in records.iter().filter(|r| r.split == Split::Train && r.class() == class) {
            if taken >= eval.n_real_per_class {
                break;
            }
            let scene = crate::synth::render_scene(&r.spec(data.image_size))?;
            real.push((scene.image, class.has_lesion()));
            taken += 1;
        }
    }
    let test: Vec<(Tensor, bool)> = artifacts::render_split(&records, Split::Test, data.image_size)?
        .into_iter()
        .map(|s| (s.image, s.spec.class().has_lesion()))
        .collect();

    let sc = steer.steer_config();
    let ctx = AugmentationContext {
        params,
        schedule,
        bank: Some(bank),
        steer: Some(&sc),
        seed: eval.seed,
    };
    let results = downstream_experiment(
        &real,
        &test,
        &eval.conditions,
        eval.n_synth,
        &eval.detector_seeds,
        &eval.oracle,
        &ctx,
    )?;

    let auc_of = |name: &str| results.iter().find(|r| r.condition == name).map(|r| r.auc_mean);
    let margin = match (auc_of("counterfactual-pairs"), auc_of("none")) {
        (Some(cf), Some(real_only)) => Some(cf - real_only),
        _ => None,
    };
    Ok(json!({
        "conditions": results,
        "cf_minus_real_auc_margin": margin,
        "n_real": real.len(),
        "n_test": test.len(),
        "config_fingerprint": cfg.fingerprint()?,
    }))
}

/// `evaluate`: run the configured metric suites and write one report each.
pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let eval = cfg.eval()?;
    let (params, _) = artifacts::load_trained(cfg)?;
    let oracle = artifacts::load_oracle(cfg, eval.oracle_floor)?;
    cfg.write_resolved()?;
    let schedule = DiffusionSchedule::new(params.config.t_train, params.config.t_sample)?;
    let dir = artifacts::reports_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;

    for suite in &eval.suites {
        match suite.as_str() {
            "counterfactual" => {
                let bank = artifacts::load_bank(cfg, &cfg.steer()?.concept)?;
                let report = eval_counterfactual(cfg, &params, &schedule, &oracle, &bank)?;
                write_json(&dir.join("counterfactual.json"), &report)?;
                println!(
                    "evaluate/counterfactual: flip {:.3}, delta-p {:.3}, bg-ssim {:?}, preservation wins {:.3}",
                    report.metrics.flip_rate.unwrap_or(0.0),
                    report.metrics.delta_p.unwrap_or(0.0),
                    report.metrics.bg_ssim,
                    report.preservation_win_rate
                );
            }
            "dye" => {
                let report = eval_dye(cfg, &params, &schedule, &oracle)?;
                write_json(&dir.join("dye.json"), &report)?;
                println!(
                    "evaluate/dye: ddr {:.3} -> {:.3}, lesion presence {:.3} -> {:.3}, eff-ssim {:?}",
                    report.ddr_unsteered,
                    report.ddr_steered,
                    report.lesion_presence_unsteered,
                    report.lesion_presence_steered,
                    report.metrics.eff_ssim
                );
            }
            "downstream" => {
                let bank = artifacts::load_bank(cfg, &cfg.steer()?.concept)?;
                let report = eval_downstream(cfg, &params, &schedule, &bank)?;
                write_json(&dir.join("downstream.json"), &report)?;
                println!(
                    "evaluate/downstream: margin {:?}",
                    report.get("cf_minus_real_auc_margin")
                );
            }
            other => {
                return Err(LabError::Config(format!(
                    "unknown suite `{other}` (expected counterfactual, dye, downstream)"
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flip: f32,
    pub delta_p: f32,
    pub n: usize,
}

fn sweep_cell(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    oracle: &OracleClassifier,
    bank: &PathologyVectorBank,
    sc: &SteerConfig,
    n_pairs: usize,
    seed: u64,
    label: String,
) -> Result<AblationRow> {
    let pairs = artifacts::gen_pairs(params, schedule, bank, sc, "lesion", n_pairs, seed)?;
    let steered: Vec<Tensor> = pairs.iter().map(|p| p.steered.image.clone()).collect();
    let unsteered: Vec<Tensor> = pairs.iter().map(|p| p.unsteered.image.clone()).collect();
    let source = SceneClass::Lesion.index();
    Ok(AblationRow {
        label,
        flip: flip_rate(oracle, &steered, source)?,
        delta_p: confidence_shift(oracle, &steered, &unsteered, source)?,
        n: n_pairs,
    })
}

fn print_table(title: &str, rows: &[AblationRow]) {
    println!("{title}");
    println!("{:<16} {:>8} {:>8} {:>6}", "cell", "flip", "delta-p", "n");
    for row in rows {
        println!("{:<16} {:>8.3} {:>8.3} {:>6}", row.label, row.flip, row.delta_p, row.n);
    }
}

/// `ablate`: layer-window, strength, and seed-count grids, each reported as
/// a rows table.
pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (params, _) = artifacts::load_trained(cfg)?;
    let eval = cfg.eval()?;
    let steer = cfg.steer()?;
    let oracle = artifacts::load_oracle(cfg, eval.oracle_floor)?;
    let ablate = cfg
        .ablate
        .clone()
        .unwrap_or_else(|| AblateConfig::defaults_for_depth(params.config.n_layers, 9001));
    let resolved = RunConfig { ablate: Some(ablate.clone()), ..cfg.clone() };
    resolved.write_resolved()?;
    let schedule = DiffusionSchedule::new(params.config.t_train, params.config.t_sample)?;
    let bank = artifacts::load_bank(cfg, "lesion")?;
    let dir = artifacts::reports_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;

    // (a) layer windows at the configured strength
    let mut window_rows = Vec::new();
    for window in &ablate.windows {
        let sc = SteerConfig::remove(steer.alpha, window[0], window[1]);
        if !bank.covers(window[0], window[1], &sc.step_set(schedule.t_sample())) {
            return Err(LabError::BankMismatch(format!(
                "window {window:?} outside the bank's layers {}..={}",
                bank.manifest.layer_start, bank.manifest.layer_end
            )));
        }
        window_rows.push(sweep_cell(
            &params,
            &schedule,
            &oracle,
            &bank,
            &sc,
            ablate.n_pairs,
            ablate.seed,
            format!("{}-{} (w{})", window[0], window[1], window[1] - window[0] + 1),
        )?);
    }
    print_table(&format!("layer windows at alpha {}", steer.alpha), &window_rows);

    // (b) strengths at the configured window
    let mut alpha_rows = Vec::new();
    for &alpha in &ablate.alphas {
        let sc = SteerConfig::remove(alpha, steer.layer_start, steer.layer_end);
        alpha_rows.push(sweep_cell(
            &params,
            &schedule,
            &oracle,
            &bank,
            &sc,
            ablate.n_pairs,
            ablate.seed,
            format!("alpha {alpha}"),
        )?);
    }
    print_table(
        &format!("strengths at window {}-{}", steer.layer_start, steer.layer_end),
        &alpha_rows,
    );

    // (c) seed counts: fresh bank per Z, fixed window and strength
    let vectors = cfg.vectors()?;
    let mut z_rows = Vec::new();
    for &z in &ablate.z_grid {
        let zbank = super::commands::estimate_bank_for(
            &params,
            &schedule,
            &vectors.concept,
            z,
            vectors.seed,
            vectors.layer_start,
            vectors.layer_end,
        )?;
        let sc = SteerConfig::remove(steer.alpha, steer.layer_start, steer.layer_end);
        z_rows.push(sweep_cell(
            &params,
            &schedule,
            &oracle,
            &zbank,
            &sc,
            ablate.n_pairs,
            ablate.seed,
            format!("Z {z}"),
        )?);
    }
    print_table("seed counts", &z_rows);

    write_json(
        &dir.join("ablate.json"),
        &json!({
            "layer_windows": window_rows,
            "alphas": alpha_rows,
            "seed_counts": z_rows,
            "config_fingerprint": resolved.fingerprint()?,
        }),
    )?;
    Ok(())
}
