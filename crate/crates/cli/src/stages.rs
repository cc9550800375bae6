//! Pipeline stages. Each reads the previous stage's directory under the run
//! root and writes its own.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tafnet::baselines::ModelKind;
use tafnet::encoder::{Encoder, PREFIX as ENCODER_PREFIX};
use tafnet::experiment::{self, cross_validate, learning_curve, preprocess_all, pretrain_rng, ENCODER_INIT_STREAM};
use tafnet::interpret::{self, COEFFICIENT_NAMES};
use tafnet::stats::{self, FoldSplit};
use tafnet::synth::{generate_cohort, generate_pretrain_set};
use tafnet::trainer::{self, encode_pairs, finetune, load_features, save_features, FeaturePair, TrainedModel, VolumePair};
use tafnet::{manifest_load, Cohort, PairRecord, SeededRng, TafError, Volume};
use tafnet_nn::ParamStore;

use crate::error::{CliError, Result};
use crate::plot;
use crate::run::{csv_writer, write, RunContext};

const PRETRAIN_CSV: &str = "pretrain.csv";

fn file_name(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

fn flush(w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    let mut w = w;
    w.flush().map_err(CliError::io(path))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".into()
    }
}

/// `(id, path, label)` rows of a pretraining list; paths relative to the list.
fn read_pretrain_list(path: &Path) -> Result<Vec<(String, PathBuf, u8)>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut r = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let bad = || CliError::Taf(TafError::Schema(format!("{}: malformed row {:?}", path.display(), rec)));
        let id = rec.get(0).ok_or_else(bad)?.to_string();
        let p = base.join(rec.get(1).ok_or_else(bad)?);
        let label: u8 = rec.get(2).and_then(|s| s.parse().ok()).filter(|l| *l <= 1).ok_or_else(bad)?;
        out.push((id, p, label));
    }
    Ok(out)
}

fn write_pretrain_list(path: &Path, rows: &[(String, PathBuf, u8)]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv_writer(path)?;
    w.write_record(["id", "path", "label"]).map_err(CliError::csv(path))?;
    for (id, p, l) in rows {
        let rel = p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        w.write_record([id.clone(), rel, l.to_string()]).map_err(CliError::csv(path))?;
    }
    flush(w, path)
}

pub fn synth(ctx: &RunContext) -> Result<()> {
    let dir = ctx.begin("synth")?;
    let cfg = &ctx.cfg;
    let spec = cfg.phantom_spec();
    let (cohort, _) =
        generate_cohort(&spec, cfg.subjects(), cfg.converter_fraction(), &cfg.intervals(), &mut SeededRng::new(cfg.seed()), &dir)?;
    let items = generate_pretrain_set(&spec, cfg.pretrain_volumes(), &mut pretrain_rng(cfg.seed()))?;
    let pdir = dir.join("pretrain");
    fs::create_dir_all(&pdir).map_err(CliError::io(&pdir))?;
    let mut rows = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let id = format!("pt-{i:04}");
        let p = pdir.join(format!("{id}.tafvol"));
        item.volume.write(&p)?;
        rows.push((id, p, item.label));
    }
    write_pretrain_list(&dir.join(PRETRAIN_CSV), &rows)?;
    let (neg, pos) = cohort.subject_class_counts();
    println!(
        "synth: {} subjects ({pos} converters, {neg} stable), {} pairs, {} pretraining volumes -> {}",
        pos + neg,
        cohort.len(),
        items.len(),
        dir.display()
    );
    Ok(())
}

struct QcRow {
    id: String,
    outcome: tafnet::preprocess::PreprocessOutcome,
}

pub fn preprocess(ctx: &RunContext) -> Result<()> {
    let manifest = ctx.require("synth", "manifest.csv")?;
    let pretrain_list = ctx.require("synth", PRETRAIN_CSV)?;
    let dir = ctx.begin("preprocess")?;
    let vdir = dir.join("volumes");
    fs::create_dir_all(&vdir).map_err(CliError::io(&vdir))?;
    let prep = ctx.cfg.preprocess();

    let cohort = manifest_load(&manifest)?;
    let pretrain = read_pretrain_list(&pretrain_list)?;
    let mut sources: Vec<PathBuf> = Vec::new();
    for p in cohort.pairs() {
        for v in [&p.baseline, &p.followup] {
            if !sources.contains(v) {
                sources.push(v.clone());
            }
        }
    }
    sources.extend(pretrain.iter().map(|(_, p, _)| p.clone()));

    let raw: Vec<Volume> = sources.iter().map(Volume::read).collect::<tafnet::Result<_>>()?;
    let refs: Vec<&Volume> = raw.iter().collect();
    let outcomes = preprocess_all(&refs, &prep)?;
    let mut processed: HashMap<PathBuf, PathBuf> = HashMap::new();
    let mut failed: Vec<PathBuf> = Vec::new();
    let mut qc_rows = Vec::new();
    for (src, outcome) in sources.iter().zip(outcomes) {
        let dst = vdir.join(file_name(src));
        outcome.volume.write(&dst)?;
        if !outcome.qc.passed() {
            failed.push(src.clone());
        }
        processed.insert(src.clone(), dst);
        qc_rows.push(QcRow { id: stem(src), outcome });
    }

    let qc_path = dir.join("qc.csv");
    let mut w = csv_writer(&qc_path)?;
    w.write_record(["id", "dims_ok", "range_ok", "nonzero_count", "noise_before", "noise_after"]).map_err(CliError::csv(&qc_path))?;
    for r in &qc_rows {
        let o = &r.outcome;
        w.write_record([
            r.id.clone(),
            o.qc.dims_ok.to_string(),
            o.qc.range_ok.to_string(),
            o.qc.nonzero_count.to_string(),
            num(o.noise_before),
            num(o.noise_after),
        ])
        .map_err(CliError::csv(&qc_path))?;
    }
    flush(w, &qc_path)?;

    let kept: Vec<PairRecord> = cohort
        .pairs()
        .iter()
        .filter(|p| !failed.contains(&p.baseline) && !failed.contains(&p.followup))
        .map(|p| PairRecord { baseline: processed[&p.baseline].clone(), followup: processed[&p.followup].clone(), ..p.clone() })
        .collect();
    let dropped = cohort.len() - kept.len();
    Cohort::new(kept)?.write_manifest(dir.join("manifest.csv"))?;
    let pre_rows: Vec<(String, PathBuf, u8)> = pretrain
        .iter()
        .filter(|(_, p, _)| !failed.contains(p))
        .map(|(id, p, l)| (id.clone(), processed[p].clone(), *l))
        .collect();
    write_pretrain_list(&dir.join(PRETRAIN_CSV), &pre_rows)?;
    println!(
        "preprocess: {} volumes, {} failed QC, {dropped} pairs and {} pretraining volumes excluded",
        sources.len(),
        failed.len(),
        pretrain.len() - pre_rows.len()
    );
    Ok(())
}

pub fn pretrain(ctx: &RunContext) -> Result<()> {
    let list = ctx.require("preprocess", PRETRAIN_CSV)?;
    let dir = ctx.begin("pretrain")?;
    let enc_cfg = ctx.cfg.encoder()?;
    let cfg = ctx.cfg.pretrain()?;
    let rows = read_pretrain_list(&list)?;
    let vols: Vec<Volume> = rows.iter().map(|(_, p, _)| Volume::read(p)).collect::<tafnet::Result<_>>()?;
    let items: Vec<(&Volume, u8)> = vols.iter().zip(&rows).map(|(v, r)| (v, r.2)).collect();
    let mut ps = ParamStore::new();
    let encoder = Encoder::new(&mut ps, &enc_cfg, &mut SeededRng::new(ctx.cfg.seed()).stream(ENCODER_INIT_STREAM))?;
    let out = trainer::pretrain(&encoder, &mut ps, &items, &cfg)?;
    ps.save(dir.join("encoder.ckpt")).map_err(TafError::from)?;
    let mut csv = String::from("epoch,loss,val_auc\n");
    for (i, l) in out.epoch_losses.iter().enumerate() {
        let auc = out.val_aucs.get(i).copied().unwrap_or(f64::NAN);
        let _ = writeln!(csv, "{},{l:.10},{}", i + 1, num(auc));
    }
    write(&dir.join("loss.csv"), &csv)?;
    println!("pretrain: {} epochs on {} volumes, validation AUC {:.3}", out.epochs_run, items.len(), out.val_auc);
    Ok(())
}

pub fn train(ctx: &RunContext) -> Result<()> {
    let ckpt = ctx.require("pretrain", "encoder.ckpt")?;
    let manifest = ctx.require("preprocess", "manifest.csv")?;
    let dir = ctx.begin("train")?;
    let enc_cfg = ctx.cfg.encoder()?;
    let model_cfg = ctx.cfg.model()?;
    let cfg = ctx.cfg.train()?;

    let cohort = manifest_load(&manifest)?;
    let mut cache: BTreeMap<PathBuf, Volume> = BTreeMap::new();
    for p in cohort.pairs() {
        for v in [&p.baseline, &p.followup] {
            if !cache.contains_key(v) {
                cache.insert(v.clone(), Volume::read(v)?);
            }
        }
    }
    let pairs: Vec<VolumePair<'_>> = cohort
        .pairs()
        .iter()
        .map(|p| VolumePair {
            subject_id: &p.subject_id,
            interval_months: p.interval_months,
            label: p.label,
            baseline: &cache[&p.baseline],
            followup: &cache[&p.followup],
        })
        .collect();

    let (encoder, ps) = trainer::load_encoder(&ckpt, &enc_cfg)?;
    let before = ps.section_hash(ENCODER_PREFIX);
    let feats = encode_pairs(&encoder, &ps, &pairs, ctx.cfg.augment_copies(), cfg.seed, cfg.batch_size)?;
    let after = ps.section_hash(ENCODER_PREFIX);
    write(&dir.join("encoder_hash.txt"), &format!("before {before}\nafter {after}\n"))?;
    if before != after {
        return Err(TafError::State("encoder weights changed while frozen".into()).into());
    }
    save_features(&dir.join("features.ckpt"), &feats)?;

    for kind in ctx.cfg.models() {
        let out = finetune(kind, &model_cfg, &feats, &cfg)?;
        out.trained.save(&dir.join(format!("{kind}.ckpt")))?;
        write(&dir.join(format!("{kind}_loss.csv")), &trainer::loss_csv(&out.epoch_losses))?;
        let last = out.epoch_losses.last().copied().unwrap_or(f64::NAN);
        println!("train: {kind} {} epochs, final loss {last:.4}", out.trained.epochs_trained);
    }
    println!("train: {} feature pairs cached, encoder hash {}", feats.len(), &after[..12]);
    Ok(())
}

fn subject_labels(data: &[FeaturePair]) -> Vec<(String, u8)> {
    let m: BTreeMap<&str, u8> = data.iter().filter(|p| p.copy == 0).map(|p| (p.subject_id.as_str(), p.label)).collect();
    m.into_iter().map(|(s, l)| (s.to_string(), l)).collect()
}

fn write_folds(path: &Path, folds: &[FoldSplit]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["fold", "subject_id", "side"]).map_err(CliError::csv(path))?;
    for f in folds {
        for (side, list) in [("train", &f.train_subjects), ("val", &f.val_subjects)] {
            for s in list {
                w.write_record([f.fold_id.to_string(), s.clone(), side.to_string()]).map_err(CliError::csv(path))?;
            }
        }
    }
    flush(w, path)
}

pub fn eval(ctx: &RunContext) -> Result<()> {
    let feats_path = ctx.require("train", "features.ckpt")?;
    let dir = ctx.begin("eval")?;
    let model_cfg = ctx.cfg.model()?;
    let cfg = ctx.cfg.train()?;
    let kinds = ctx.cfg.models();
    let data = load_features(&feats_path)?;
    let folds = stats::make_folds_for_subjects(&subject_labels(&data), ctx.cfg.folds(), ctx.cfg.seed())?;
    stats::assert_no_leakage(&folds)?;
    write_folds(&dir.join("folds.csv"), &folds)?;

    let cv = cross_validate(&data, &folds, &kinds, &model_cfg, &cfg)?;

    let mpath = dir.join("metrics.csv");
    let mut w = csv_writer(&mpath)?;
    w.write_record(["method", "fold", "metric", "value"]).map_err(CliError::csv(&mpath))?;
    for kind in &kinds {
        for r in &cv.per_model[kind] {
            for (metric, v) in [("auc", r.auc), ("sensitivity", r.sensitivity), ("f1", r.f1)] {
                w.write_record([kind.name().to_string(), r.fold.to_string(), metric.to_string(), num(v)])
                    .map_err(CliError::csv(&mpath))?;
            }
        }
    }
    flush(w, &mpath)?;

    let rpath = dir.join("roc.csv");
    let mut w = csv_writer(&rpath)?;
    w.write_record(["method", "fpr", "tpr"]).map_err(CliError::csv(&rpath))?;
    for kind in &kinds {
        let pooled: Vec<stats::Scored> = cv.per_model[kind].iter().flat_map(|r| r.scores.iter().copied()).collect();
        for (fpr, tpr) in stats::roc_points(&pooled)? {
            w.write_record([kind.name().to_string(), num(fpr), num(tpr)]).map_err(CliError::csv(&rpath))?;
        }
    }
    flush(w, &rpath)?;

    let spath = dir.join("stats.csv");
    write(&spath, &stats_csv(&cv, &kinds))?;

    if ctx.cfg.learning_curve() {
        let mut intervals: Vec<u32> = data.iter().map(|p| p.interval_months).collect();
        intervals.sort_unstable();
        intervals.dedup();
        let cells = learning_curve(&data, &folds, &ctx.cfg.fractions(), &intervals, &kinds, &model_cfg, &cfg)?;
        let lpath = dir.join("learning_curve.csv");
        let mut w = csv_writer(&lpath)?;
        w.write_record(["interval_months", "fraction", "method", "mean_auc", "std_auc", "folds_scored"])
            .map_err(CliError::csv(&lpath))?;
        for c in cells {
            let (m, s) = c.auc.map_or(("NA".to_string(), "NA".to_string()), |(m, s)| (num(m), num(s)));
            w.write_record([c.interval_months.to_string(), num(c.fraction), c.model.name().to_string(), m, s, c.folds_scored.to_string()])
                .map_err(CliError::csv(&lpath))?;
        }
        flush(w, &lpath)?;
    }

    for kind in &kinds {
        let (m, s) = stats::aggregate(&cv.aucs(*kind))?;
        println!("eval: {:<13} AUC {}", kind.name(), stats::format_mean_std(m, s));
    }
    Ok(())
}

/// Long-format statistics: paired comparisons against TAF-Net and the
/// Friedman test over all methods.
fn stats_csv(cv: &experiment::CvResults, kinds: &[ModelKind]) -> String {
    let mut s = String::from("test,target,statistic,value\n");
    let mut row = |test: &str, target: &str, stat: &str, v: String| {
        let _ = writeln!(s, "{test},{target},{stat},{v}");
    };
    if kinds.contains(&ModelKind::TafNet) {
        let t = cv.aucs(ModelKind::TafNet);
        for k in kinds.iter().filter(|k| **k != ModelKind::TafNet) {
            let b = cv.aucs(*k);
            let target = format!("tafnet_vs_{}", k.name());
            let delta = t.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / t.len().max(1) as f64;
            row("paired", &target, "mean_delta_auc", num(delta));
            let (wins, ties, losses) = stats::win_tie_loss(&t, &b);
            row("paired", &target, "wins", wins.to_string());
            row("paired", &target, "ties", ties.to_string());
            row("paired", &target, "losses", losses.to_string());
            match stats::wilcoxon_signed_rank(&t, &b) {
                Ok(w) => {
                    row("wilcoxon", &target, "w_plus", num(w.w_plus));
                    row("wilcoxon", &target, "n", w.n.to_string());
                    row("wilcoxon", &target, "p_value", num(w.p_value));
                }
                Err(_) => row("wilcoxon", &target, "p_value", "NA".into()),
            }
        }
    }
    let matrix = cv.auc_matrix(kinds);
    match stats::friedman(&matrix) {
        Ok(f) => {
            row("friedman", "all", "chi2", num(f.chi2));
            row("friedman", "all", "p_value", num(f.p_value));
            row("friedman", "all", "chi2_tie_corrected", num(f.chi2_tie_corrected));
            row("friedman", "all", "p_value_tie_corrected", num(f.p_value_tie_corrected));
            for (k, r) in kinds.iter().zip(&f.mean_ranks) {
                row("friedman", k.name(), "mean_rank", num(*r));
            }
        }
        Err(_) => row("friedman", "all", "chi2", "NA".into()),
    }
    s
}

/// Geometric covariates per `(subject, interval)` from the generator's
/// ground truth: relative ventricle volume change and hippocampal radius change.
fn truth_covariates(path: &Path) -> Result<HashMap<(String, u32), [f64; 2]>> {
    let mut r = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let mut rows: HashMap<(String, String), [f64; 4]> = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let f = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
        rows.insert((rec[0].to_string(), rec[1].to_string()), [f(4), f(5), f(6), f(7)]);
    }
    let mut out = HashMap::new();
    for ((sub, scan), g) in &rows {
        let Some(months) = scan.strip_prefix('m').and_then(|m| m.parse::<u32>().ok()) else { continue };
        let Some(b) = rows.get(&(sub.clone(), "bl".to_string())) else { continue };
        let vent = g[0] * g[1] * g[2] / (b[0] * b[1] * b[2]) - 1.0;
        let hip = g[3] / b[3] - 1.0;
        out.insert((sub.clone(), months), [vent, hip]);
    }
    Ok(out)
}

const COVARIATES: [&str; 2] = ["ventricle_change", "hippocampus_change"];

pub fn interpret(ctx: &RunContext) -> Result<()> {
    let model_path = ctx.require("train", "tafnet.ckpt")?;
    let feats_path = ctx.require("train", "features.ckpt")?;
    let dir = ctx.begin("interpret")?;
    let model_cfg = ctx.cfg.model()?;
    let batch = ctx.cfg.train()?.batch_size;
    let input_grid = ctx.cfg.encoder()?.input_grid;
    let trained = TrainedModel::load(&model_path, &model_cfg)?;
    let data = load_features(&feats_path)?;

    let mut profiles = interpret::extract_gates(&trained, &data, batch)?;
    let truth = ctx.stage_dir("synth").join("truth.csv");
    if truth.exists() {
        let cov = truth_covariates(&truth)?;
        for p in &mut profiles {
            if let Some(c) = cov.get(&(p.subject_id.clone(), p.interval_months)) {
                for (name, v) in COVARIATES.iter().zip(c) {
                    p.covariates.insert(name.to_string(), *v);
                }
            }
        }
    }

    let mut g = String::from("subject_id,interval_months,label,alpha,beta,gamma,probability");
    for c in COVARIATES {
        let _ = write!(g, ",{c}");
    }
    g.push('\n');
    for p in &profiles {
        let _ = write!(g, "{},{},{},{},{},{},{}", p.subject_id, p.interval_months, p.label, p.gates.alpha, p.gates.beta, p.gates.gamma, p.probability);
        for c in COVARIATES {
            let _ = write!(g, ",{}", p.covariates.get(c).map_or("NA".into(), |v| num(*v)));
        }
        g.push('\n');
    }
    write(&dir.join("gates.csv"), &g)?;

    let summary = interpret::summarize_gates(&profiles)?;
    let mut s = String::from("coefficient,mean,std,min,max,t,p_value,dominant_count\n");
    for (r, d) in summary.rows.iter().zip(summary.dominance) {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{d}", r.coefficient, num(r.mean), num(r.std), num(r.min), num(r.max), num(r.t), num(r.p_value));
    }
    write(&dir.join("gate_summary.csv"), &s)?;

    let mut c = String::from("coefficient,target,r,p_value\n");
    let mut targets: Vec<(&str, Vec<f64>)> = vec![("probability", profiles.iter().map(|p| p.probability).collect())];
    for name in COVARIATES {
        let v: Vec<f64> = profiles.iter().map(|p| p.covariates.get(name).copied().unwrap_or(f64::NAN)).collect();
        if v.iter().all(|x| x.is_finite()) {
            targets.push((name, v));
        }
    }
    for (i, coef) in COEFFICIENT_NAMES.iter().enumerate() {
        let gv: Vec<f64> = profiles.iter().map(|p| p.gates.as_array()[i]).collect();
        for (target, tv) in &targets {
            let (r, p) = interpret::pearson(&gv, tv).unwrap_or((f64::NAN, f64::NAN));
            let _ = writeln!(c, "{coef},{target},{},{}", num(r), num(p));
        }
    }
    write(&dir.join("correlation.csv"), &c)?;

    let followups: HashMap<(String, u32), PathBuf> = match ctx.require("preprocess", "manifest.csv") {
        Ok(m) => manifest_load(&m)?.pairs().iter().map(|p| ((p.subject_id.clone(), p.interval_months), p.followup.clone())).collect(),
        Err(_) => HashMap::new(),
    };
    let mdir = dir.join("maps");
    fs::create_dir_all(&mdir).map_err(CliError::io(&mdir))?;
    let mut chosen: Vec<&FeaturePair> = data.iter().filter(|p| p.copy == 0).collect();
    chosen.sort_by_key(|p| std::cmp::Reverse(p.label));
    let mut index = String::from("subject_id,interval_months,label,mass,degenerate,map,overlay\n");
    for p in chosen.into_iter().take(ctx.cfg.interpret_maps()) {
        let map = interpret::extract_attention_map(&trained, p, input_grid)?;
        let name = format!("{}_m{:02}", p.subject_id, p.interval_months);
        let vol_path = mdir.join(format!("{name}.tafvol"));
        map.to_volume()?.write(&vol_path)?;
        let overlay = match followups.get(&(p.subject_id.clone(), p.interval_months)) {
            Some(fu) => {
                let png = mdir.join(format!("{name}.png"));
                let v = Volume::read(fu)?;
                plot::overlay_mid_slices(v.data(), &map.grid, 4, &png)?;
                file_name(&png)
            }
            None => String::new(),
        };
        let _ = writeln!(index, "{},{},{},{},{},{},{overlay}", p.subject_id, p.interval_months, p.label, num(map.mass()), map.degenerate, file_name(&vol_path));
    }
    write(&dir.join("maps.csv"), &index)?;

    for r in &summary.rows {
        println!("interpret: {} mean {:.3} (sd {:.3}), t = {:.2}, p = {:.3e}", r.coefficient, r.mean, r.std, r.t, r.p_value);
    }
    println!("interpret: {} profiles, dominance alpha/beta/gamma = {:?}", profiles.len(), summary.dominance);
    Ok(())
}

/// Per-method fold values of one metric, ordered by fold.
type MetricTable = BTreeMap<String, BTreeMap<String, BTreeMap<usize, f64>>>;

fn read_metrics(path: &Path) -> Result<MetricTable> {
    let mut r = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let headers = r.headers().map_err(CliError::csv(path))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Taf(TafError::Schema(format!("{}: missing column {name}", path.display()))))
    };
    let (cm, cf, ck, cv) = (col("method")?, col("fold")?, col("metric")?, col("value")?);
    let mut out: MetricTable = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let fold: usize = rec[cf].parse().map_err(|_| CliError::Input(format!("{}: bad fold {:?}", path.display(), &rec[cf])))?;
        let value: f64 = rec[cv].parse().unwrap_or(f64::NAN);
        out.entry(rec[cm].to_string()).or_default().entry(rec[ck].to_string()).or_default().insert(fold, value);
    }
    if out.is_empty() {
        return Err(CliError::Input(format!("{} holds no metrics", path.display())));
    }
    Ok(out)
}

fn method_order(table: &MetricTable) -> Vec<String> {
    let mut names: Vec<String> = ModelKind::ALL.iter().map(|k| k.name().to_string()).filter(|n| table.contains_key(n)).collect();
    let rest: Vec<String> = table.keys().filter(|k| !names.contains(k)).cloned().collect();
    names.extend(rest);
    names
}

fn read_roc(path: &Path) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut r = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let pt = (rec[1].parse().unwrap_or(f64::NAN), rec[2].parse().unwrap_or(f64::NAN));
        match out.last_mut() {
            Some((m, pts)) if *m == rec[0] => pts.push(pt),
            _ => out.push((rec[0].to_string(), vec![pt])),
        }
    }
    Ok(out)
}

/// Summary text over a metrics table.
pub fn summarize(table: &MetricTable) -> String {
    let methods = method_order(table);
    let metrics = ["auc", "sensitivity", "f1"];
    let mut s = String::new();
    let _ = write!(s, "{:<14}", "method");
    for m in metrics {
        let _ = write!(s, "{m:<18}");
    }
    s.push('\n');
    let column = |method: &str, metric: &str| -> Vec<f64> {
        table.get(method).and_then(|t| t.get(metric)).map(|f| f.values().copied().collect()).unwrap_or_default()
    };
    for method in &methods {
        let _ = write!(s, "{method:<14}");
        for metric in metrics {
            let cell = match stats::aggregate(&column(method, metric)) {
                Ok((m, sd)) => stats::format_mean_std(m, sd),
                Err(_) => "-".into(),
            };
            let _ = write!(s, "{cell:<18}");
        }
        s.push('\n');
    }
    let tafnet = ModelKind::TafNet.name();
    if methods.iter().any(|m| m == tafnet) {
        let t = column(tafnet, "auc");
        s.push('\n');
        for other in methods.iter().filter(|m| *m != tafnet) {
            let b = column(other, "auc");
            if b.len() != t.len() {
                continue;
            }
            let (w, ti, l) = stats::win_tie_loss(&t, &b);
            let delta = t.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / t.len().max(1) as f64;
            let p = stats::wilcoxon_signed_rank(&t, &b).map_or("NA".to_string(), |r| format!("{:.4}", r.p_value));
            let _ = writeln!(s, "tafnet vs {other:<13} mean delta {delta:+.3}  W/T/L {w}/{ti}/{l}  Wilcoxon p = {p}");
        }
    }
    let cols: Vec<Vec<f64>> = methods.iter().map(|m| column(m, "auc")).collect();
    let n = cols.iter().map(Vec::len).min().unwrap_or(0);
    let matrix: Vec<Vec<f64>> = (0..n).map(|f| cols.iter().map(|c| c[f]).collect()).collect();
    if let Ok(f) = stats::friedman(&matrix) {
        let _ = writeln!(
            s,
            "\nFriedman chi2 = {:.3} (p = {:.4}), tie-corrected {:.3} (p = {:.4})",
            f.chi2, f.p_value, f.chi2_tie_corrected, f.p_value_tie_corrected
        );
        for (m, r) in methods.iter().zip(&f.mean_ranks) {
            let _ = writeln!(s, "  mean rank {m:<13} {r:.2}");
        }
    }
    s
}

pub fn report(ctx: &RunContext, metrics: Option<&Path>) -> Result<()> {
    let metrics_path = match metrics {
        Some(p) if p.exists() => p.to_path_buf(),
        Some(p) => return Err(CliError::Input(format!("metrics file {} not found", p.display()))),
        None => ctx.require("eval", "metrics.csv")?,
    };
    let dir = ctx.begin("report")?;
    let table = read_metrics(&metrics_path)?;
    let text = summarize(&table);
    write(&dir.join("summary.txt"), &text)?;
    print!("{text}");

    let methods = method_order(&table);
    let aucs: Vec<(String, Vec<f64>)> = methods
        .iter()
        .map(|m| (m.clone(), table[m].get("auc").map(|f| f.values().copied().collect()).unwrap_or_default()))
        .collect();
    plot::box_chart(&aucs, &dir.join("auc_box.png"))?;
    plot::fold_chart(&aucs, &dir.join("auc_folds.png"))?;
    let bars: Vec<(String, f64, f64)> =
        aucs.iter().filter_map(|(m, v)| stats::aggregate(v).ok().map(|(mean, sd)| (m.clone(), mean, sd))).collect();
    plot::bar_chart(&bars, &dir.join("auc_bar.png"))?;
    let roc = metrics_path.with_file_name("roc.csv");
    if roc.exists() {
        plot::roc_chart(&read_roc(&roc)?, &dir.join("roc.png"))?;
    }
    Ok(())
}
