// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DiffArgs, ExtractArgs, FinetuneArgs, ProbeArgs, ReportArgs, SelftestArgs};
use crate::activation_store::{make_split, split_for_construct, ActivationSet, Construct, LabelTable, TapKind};
use crate::diff_analysis::{diff_map, residual_norm_diff};
use crate::error::{Error, Result};
use crate::extraction::extract_labeled;
use crate::fixtures::PlantedHeads;
use crate::micro_transformer::{
    load_adapters, load_model, save_adapters, train_lora, LoraConfig, Model, ModelConfig, TrainConfig,
};
use crate::probe_engine::{
    best_per_construct, sweep_heads, sweep_layers, sweep_layers_concat, FeatureMode, ProbeConfig, ProbeKind,
    SelectionMetric, SweepResult,
};
use crate::report::{
    compare_runs, emit_heatmap, generation_eval, write_comparisons, write_layer_curves, LabeledReview, Palette,
    ReviewClassifier,
};
use crate::seed::derive_seed;

/// Where model weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Freshly initialized from this config.
    Builtin(ModelConfig),
    Checkpoint(PathBuf),
}

impl ModelSource {
    fn resolve(checkpoint: Option<PathBuf>, config: Option<ModelConfig>, seed: u64) -> Result<Self> {
        match (checkpoint, config) {
            (Some(_), Some(_)) => Err(Error::Usage("give either a checkpoint or a built-in model config, not both".into())),
            (Some(p), None) => Ok(ModelSource::Checkpoint(p)),
            (None, cfg) => {
                let cfg = ModelConfig {
                    seed: derive_seed(seed, "model"),
                    ..cfg.unwrap_or_default()
                };
                cfg.validate()?;
                Ok(ModelSource::Builtin(cfg))
            }
        }
    }

    fn load(&self) -> Result<Model> {
        match self {
            ModelSource::Builtin(cfg) => Model::new(cfg.clone()),
            ModelSource::Checkpoint(p) => load_model(p),
        }
    }

    fn path(&self) -> Option<&Path> {
        match self {
            ModelSource::Builtin(_) => None,
            ModelSource::Checkpoint(p) => Some(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSettings {
    pub labels: PathBuf,
    pub model: ModelSource,
    pub adapters: Option<PathBuf>,
    pub taps: Vec<TapKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSettings {
    pub activations: PathBuf,
    pub residual: Option<PathBuf>,
    pub labels: PathBuf,
    pub construct: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub activations: PathBuf,
    pub labels: PathBuf,
    pub constructs: Vec<String>,
    pub mode: FeatureMode,
    pub probe: ProbeConfig,
    pub metric: SelectionMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub labels: PathBuf,
    pub construct: String,
    pub model: ModelSource,
    pub lora: LoraConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparePair {
    pub base: PathBuf,
    pub fine_tuned: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub labels: PathBuf,
    pub construct: String,
    pub model: ModelSource,
    pub adapters: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub comparisons: Vec<ComparePair>,
    pub generation: Option<GenerationSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestSettings {
    pub seeds: usize,
}

/// Fully resolved settings of one command, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Settings {
    Extract(ExtractSettings),
    Diff(DiffSettings),
    Probe(ProbeSettings),
    Finetune(FinetuneSettings),
    Report(ReportSettings),
    Selftest(SelftestSettings),
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn construct_name(name: &str) -> Result<String> {
    Ok(name.parse::<Construct>()?.name().to_string())
}

fn labels_for(path: &Path, ids: &[String]) -> Result<LabelTable> {
    LabelTable::read_from_path(path)?.aligned_to(ids)
}

fn labeled_reviews(table: &LabelTable, construct: Construct, idx: &[usize]) -> Vec<LabeledReview> {
    idx.iter()
        .map(|&i| {
            let r = &table.records()[i];
            LabeledReview {
                id: r.id.clone(),
                text: r.text.clone(),
                label: r.binary(construct),
            }
        })
        .collect()
}

fn with_adapters(base: Model, adapters: Option<&Path>) -> Result<Model> {
    match adapters {
        Some(p) => load_adapters(&base, p),
        None => Ok(base),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Files written and lines for the terminal.
pub(super) struct Produced {
    pub files: Vec<PathBuf>,
    pub exit_code: i32,
    pub messages: Vec<String>,
}

impl Produced {
    fn files(files: Vec<PathBuf>) -> Self {
        Produced {
            files,
            exit_code: 0,
            messages: Vec::new(),
        }
    }
}

impl Settings {
    pub(super) fn extract(a: ExtractArgs, seed: u64) -> Result<Self> {
        let taps = if a.taps.is_empty() { TapKind::ALL.to_vec() } else { a.taps };
        Ok(Settings::Extract(ExtractSettings {
            labels: required(a.labels, "labels")?,
            model: ModelSource::resolve(a.checkpoint, a.model, seed)?,
            adapters: a.adapters,
            taps,
        }))
    }

    pub(super) fn diff(a: DiffArgs) -> Result<Self> {
        Ok(Settings::Diff(DiffSettings {
            activations: required(a.activations, "activations")?,
            residual: a.residual,
            labels: required(a.labels, "labels")?,
            construct: construct_name(&required(a.construct, "construct")?)?,
        }))
    }

    pub(super) fn probe(a: ProbeArgs, seed: u64) -> Result<Self> {
        let constructs: Vec<String> = match (a.all_constructs, a.constructs.is_empty()) {
            (true, true) => Construct::ALL.iter().map(|c| c.name().to_string()).collect(),
            (false, false) => a.constructs.iter().map(|c| construct_name(c)).collect::<Result<_>>()?,
            (true, false) => return Err(Error::Usage("--construct and --all-constructs are exclusive".into())),
            (false, true) => return Err(Error::Usage("give --construct NAME or --all-constructs".into())),
        };
        let activations = required(a.activations, "activations")?;
        let mode = match a.mode {
            Some(m) => m,
            None => {
                let tap = ActivationSet::read_from_path(&activations)?.tap();
                if tap.is_residual() {
                    FeatureMode::PerLayer
                } else {
                    FeatureMode::PerHead
                }
            }
        };
        let mut probe = a.probe.unwrap_or_else(|| match a.kind {
            Some(ProbeKind::Mlp) => ProbeConfig::mlp(),
            _ => ProbeConfig::linear(),
        });
        if let Some(k) = a.kind {
            probe.kind = k;
        }
        if let Some(l2) = a.l2 {
            probe.l2 = l2;
        }
        if let Some(n) = a.max_iter {
            probe.max_iter = n;
        }
        probe.seed = seed;
        probe.validate()?;
        Ok(Settings::Probe(ProbeSettings {
            activations,
            labels: required(a.labels, "labels")?,
            constructs,
            mode,
            probe,
            metric: a.metric.unwrap_or_default(),
        }))
    }

    pub(super) fn finetune(a: FinetuneArgs, seed: u64) -> Result<Self> {
        let mut lora = a.lora.unwrap_or_default();
        if let Some(r) = a.rank {
            lora.rank = r;
        }
        lora.seed = derive_seed(seed, "lora");
        lora.validate()?;
        let mut train = a.train.unwrap_or_default();
        if let Some(e) = a.epochs {
            train.epochs = e;
        }
        if let Some(lr) = a.learning_rate {
            train.learning_rate = lr;
        }
        train.seed = derive_seed(seed, "train");
        train.validate()?;
        Ok(Settings::Finetune(FinetuneSettings {
            labels: required(a.labels, "labels")?,
            construct: construct_name(&required(a.construct, "construct")?)?,
            model: ModelSource::resolve(a.checkpoint, a.model, seed)?,
            lora,
            train,
        }))
    }

    pub(super) fn report(a: ReportArgs, seed: u64) -> Result<Self> {
        let mut comparisons = Vec::new();
        if let [base, ft] = a.compare.as_slice() {
            let mut names: Vec<String> = std::fs::read_dir(base)
                .map_err(|e| Error::io(base, e))?
                .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
                .filter(|n| n.starts_with("sweep_") && n.ends_with(".json"))
                .collect();
            names.sort();
            for n in names {
                if ft.join(&n).is_file() {
                    comparisons.push(ComparePair {
                        base: base.join(&n),
                        fine_tuned: ft.join(&n),
                    });
                }
            }
            if comparisons.is_empty() {
                return Err(Error::GridMismatch(format!(
                    "no sweep present in both {} and {}",
                    base.display(),
                    ft.display()
                )));
            }
        } else if !a.compare.is_empty() {
            return Err(Error::Usage("--compare takes two run directories".into()));
        }
        let generation = match a.labels {
            Some(labels) => Some(GenerationSettings {
                labels,
                construct: construct_name(&required(a.construct, "construct")?)?,
                model: ModelSource::resolve(a.checkpoint, a.model, seed)?,
                adapters: a.adapters,
            }),
            None => None,
        };
        if comparisons.is_empty() && generation.is_none() {
            return Err(Error::Usage("report needs --compare BASE FT and/or --labels".into()));
        }
        Ok(Settings::Report(ReportSettings { comparisons, generation }))
    }

    pub(super) fn selftest(a: SelftestArgs) -> Self {
        Settings::Selftest(SelftestSettings {
            seeds: a.seeds.unwrap_or(100),
        })
    }

    /// Every file the command reads.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        match self {
            Settings::Extract(s) => {
                v.push(s.labels.clone());
                v.extend(s.model.path().map(Path::to_path_buf));
                v.extend(s.adapters.clone());
            }
            Settings::Diff(s) => {
                v.push(s.activations.clone());
                v.extend(s.residual.clone());
                v.push(s.labels.clone());
            }
            Settings::Probe(s) => {
                v.push(s.activations.clone());
                v.push(s.labels.clone());
            }
            Settings::Finetune(s) => {
                v.push(s.labels.clone());
                v.extend(s.model.path().map(Path::to_path_buf));
            }
            Settings::Report(s) => {
                for c in &s.comparisons {
                    v.push(c.base.clone());
                    v.push(c.fine_tuned.clone());
                }
                if let Some(g) = &s.generation {
                    v.push(g.labels.clone());
                    v.extend(g.model.path().map(Path::to_path_buf));
                    v.extend(g.adapters.clone());
                }
            }
            Settings::Selftest(_) => {}
        }
        v
    }

    pub(super) fn run(&self, seed: u64, dir: &Path) -> Result<Produced> {
        match self {
            Settings::Extract(s) => run_extract(s, dir),
            Settings::Diff(s) => run_diff(s, dir),
            Settings::Probe(s) => run_probe(s, seed, dir),
            Settings::Finetune(s) => run_finetune(s, seed, dir),
            Settings::Report(s) => run_report(s, seed, dir),
            Settings::Selftest(s) => run_selftest(s, seed, dir),
        }
    }
}

#[derive(Serialize)]
struct ExtractionSummary {
    model: String,
    n_samples: usize,
    truncated: usize,
    truncated_fraction: f64,
    files: Vec<String>,
}

fn run_extract(s: &ExtractSettings, dir: &Path) -> Result<Produced> {
    let table = LabelTable::read_from_path(&s.labels)?;
    let model = with_adapters(s.model.load()?, s.adapters.as_deref())?;
    let ex = extract_labeled(&model, &table, &s.taps)?;
    let mut files = Vec::new();
    for set in &ex.sets {
        let p = dir.join(format!("activations_{}.hprb", set.tap()));
        set.write_to_path(&p)?;
        files.push(p);
    }
    let summary = dir.join("extraction.json");
    write_json(
        &summary,
        &ExtractionSummary {
            model: model.name().to_string(),
            n_samples: ex.n_samples,
            truncated: ex.truncated,
            truncated_fraction: ex.truncated_fraction(),
            files: files.iter().filter_map(|p| p.file_name()?.to_str().map(String::from)).collect(),
        },
    )?;
    files.push(summary);
    Ok(Produced::files(files))
}

#[derive(Serialize)]
struct ResidualRow {
    layer: usize,
    high: f64,
    low: f64,
    difference: f64,
}

fn run_diff(s: &DiffSettings, dir: &Path) -> Result<Produced> {
    let construct: Construct = s.construct.parse()?;
    let acts = ActivationSet::read_from_path(&s.activations)?;
    let y = labels_for(&s.labels, acts.sample_ids())?.binary(construct);
    let map = diff_map(&acts, &y)?;
    let csv = dir.join("diffmap.csv");
    map.write_csv_to_path(&csv)?;
    let svg = dir.join("diffmap.svg");
    let grid = map.normalized.mapv(Some);
    let title = format!("{}: normalized activation difference", s.construct);
    let svg_text = crate::report::render_svg(&grid, Palette::Diverging, &title)?;
    std::fs::write(&svg, svg_text).map_err(|e| Error::io(&svg, e))?;
    let mut files = vec![csv, svg];
    if let Some(res) = &s.residual {
        let racts = ActivationSet::read_from_path(res)?;
        let ry = labels_for(&s.labels, racts.sample_ids())?.binary(construct);
        let curve = residual_norm_diff(&racts, &ry)?;
        let p = dir.join(format!("residual_norms_{}.csv", curve.tap));
        let mut w = csv::Writer::from_writer(create(&p)?);
        for (layer, ((&high, &low), &difference)) in curve.high.iter().zip(&curve.low).zip(&curve.difference).enumerate() {
            w.serialize(ResidualRow {
                layer,
                high,
                low,
                difference,
            })?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    let (l, h) = map.strongest_cell();
    Ok(Produced {
        messages: vec![format!("strongest cell: layer {l}, head {h}")],
        ..Produced::files(files)
    })
}

fn run_probe(s: &ProbeSettings, seed: u64, dir: &Path) -> Result<Produced> {
    let acts = ActivationSet::read_from_path(&s.activations)?;
    let table = labels_for(&s.labels, acts.sample_ids())?;
    let mut files = Vec::new();
    let mut sweeps = Vec::new();
    for name in &s.constructs {
        let c: Construct = name.parse()?;
        let y = table.binary(c);
        let split = split_for_construct(seed, c, &y)?;
        let sweep = match s.mode {
            FeatureMode::PerHead => sweep_heads(&acts, &y, &split, &s.probe)?,
            FeatureMode::PerLayer => sweep_layers(&acts, &y, &split, &s.probe)?,
            FeatureMode::ConcatenatedHeads => sweep_layers_concat(&acts, &y, &split, &s.probe)?,
        };
        let csv = dir.join(format!("sweep_{name}.csv"));
        sweep.write_csv(create(&csv)?)?;
        let json = dir.join(format!("sweep_{name}.json"));
        write_json(&json, &sweep)?;
        let svg = dir.join(format!("heatmap_{name}.svg"));
        let grid_csv = dir.join(format!("heatmap_{name}.csv"));
        let title = format!("{name}: test {}", s.metric);
        emit_heatmap(&sweep.metric_grid(s.metric), Palette::Sequential, &title, &svg, &grid_csv)?;
        files.extend([csv, json, svg, grid_csv]);
        sweeps.push(sweep);
    }
    let mut messages = Vec::new();
    let usable: Vec<SweepResult> = sweeps.into_iter().filter(|s| s.cells.iter().any(|c| c.metrics().is_some())).collect();
    if !usable.is_empty() {
        let best = best_per_construct(&usable, s.metric)?;
        let p = dir.join("best_cells.csv");
        let mut w = csv::Writer::from_writer(create(&p)?);
        w.write_record(["construct", "metric", "value", "layer", "head"])?;
        for b in &best {
            w.write_record([
                b.construct.clone(),
                b.metric.to_string(),
                b.value.to_string(),
                b.layer.to_string(),
                b.head.to_string(),
            ])?;
            messages.push(format!("{}: best {} {:.4} at layer {}, head {}", b.construct, b.metric, b.value, b.layer, b.head));
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok(Produced {
        messages,
        ..Produced::files(files)
    })
}

fn run_finetune(s: &FinetuneSettings, seed: u64, dir: &Path) -> Result<Produced> {
    let construct: Construct = s.construct.parse()?;
    let table = LabelTable::read_from_path(&s.labels)?;
    let y = table.binary(construct);
    let split = split_for_construct(seed, construct, &y)?;
    let data: Vec<(String, u8)> = split.train.iter().map(|&i| (table.records()[i].text.clone(), y[i])).collect();
    let model = s.model.load()?.apply_lora(&s.lora)?;
    let (trained, report) = train_lora(&model, &data, &s.train)?;
    let adapters = dir.join("adapters.hprm");
    save_adapters(&trained, &adapters)?;
    let rep = dir.join("train_report.json");
    write_json(&rep, &report)?;
    Ok(Produced {
        messages: vec![format!("loss {:.6} -> {:.6} over {} steps", report.initial_loss, report.final_loss, report.steps)],
        ..Produced::files(vec![adapters, rep])
    })
}

fn read_sweep(path: &Path) -> Result<SweepResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_report(s: &ReportSettings, seed: u64, dir: &Path) -> Result<Produced> {
    let mut files = Vec::new();
    let mut messages = Vec::new();
    if !s.comparisons.is_empty() {
        let mut pairs = Vec::new();
        for c in &s.comparisons {
            pairs.push((read_sweep(&c.base)?, read_sweep(&c.fine_tuned)?));
        }
        let comparisons = pairs.iter().map(|(b, f)| compare_runs(b, f)).collect::<Result<Vec<_>>>()?;
        let p = dir.join("comparison.json-lines");
        write_comparisons(&comparisons, create(&p)?)?;
        files.push(p);
        let runs: Vec<(&str, &SweepResult)> = pairs.iter().flat_map(|(b, f)| [("base", b), ("fine_tuned", f)]).collect();
        let p = dir.join("layer_curves.csv");
        write_layer_curves(&runs, SelectionMetric::Accuracy, create(&p)?)?;
        files.push(p);
        for c in &comparisons {
            messages.push(format!(
                "{}: rho {:.4}, peaks {} -> {}, mean accuracy {:.4} -> {:.4}, structure preserved: {}",
                c.target, c.rank_correlation, c.base_peak, c.ft_peak, c.base_mean_accuracy, c.ft_mean_accuracy, c.structure_preserved
            ));
        }
    }
    if let Some(g) = &s.generation {
        let construct: Construct = g.construct.parse()?;
        let table = LabelTable::read_from_path(&g.labels)?;
        let y = table.binary(construct);
        let split = split_for_construct(seed, construct, &y)?;
        let reviews = labeled_reviews(&table, construct, &split.test);
        let base = g.model.load()?;
        let tuned = match &g.adapters {
            Some(p) => Some(load_adapters(&base, p)?),
            None => None,
        };
        let mut variants: Vec<(&str, &dyn ReviewClassifier)> = vec![("base", &base)];
        if let Some(t) = &tuned {
            variants.push(("fine_tuned", t));
        }
        let eval = generation_eval(&variants, &reviews)?;
        let p = dir.join("generation_eval.csv");
        eval.write_csv(create(&p)?)?;
        files.push(p);
        let p = dir.join("generation_predictions.csv");
        eval.write_predictions_csv(create(&p)?)?;
        files.push(p);
        let table_md = eval.table();
        let p = dir.join("generation_table.md");
        std::fs::write(&p, &table_md).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        messages.extend(table_md.lines().map(String::from));
    }
    Ok(Produced {
        messages,
        ..Produced::files(files)
    })
}

#[derive(Debug, Clone, Serialize)]
struct CheckRow {
    check: &'static str,
    passed_seeds: usize,
    seeds: usize,
    required: usize,
    pass: bool,
}

fn run_selftest(s: &SelftestSettings, seed: u64, dir: &Path) -> Result<Produced> {
    if s.seeds == 0 {
        return Err(Error::Usage("--seeds must be >= 1".into()));
    }
    let required = (s.seeds * 95).div_ceil(100);
    let mut diff_ok = 0;
    let mut probe_ok = 0;
    for i in 0..s.seeds {
        let fixture = PlantedHeads {
            seed: derive_seed(seed, &format!("selftest/{i}")),
            ..PlantedHeads::default()
        };
        let (acts, y) = fixture.generate()?;
        let planted = (fixture.layer, fixture.head);
        if diff_map(&acts, &y)?.strongest_cell() == planted {
            diff_ok += 1;
        }
        let split = make_split(y.len(), fixture.seed, &y)?;
        let cfg = ProbeConfig {
            seed,
            ..ProbeConfig::linear()
        };
        let sweep = sweep_heads(&acts, &y, &split, &cfg)?;
        let grid = sweep.metric_grid(SelectionMetric::Accuracy);
        let mut others: Vec<f64> = grid
            .indexed_iter()
            .filter(|(cell, _)| *cell != planted)
            .filter_map(|(_, v)| *v)
            .collect();
        others.sort_by(f64::total_cmp);
        let median = match others.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => others[n / 2],
            n => (others[n / 2 - 1] + others[n / 2]) / 2.0,
        };
        let located = sweep.best(SelectionMetric::Accuracy).is_some_and(|(l, h, m)| {
            (l, h) == planted && m.accuracy >= 0.90
        });
        if located && median <= 0.65 {
            probe_ok += 1;
        }
    }
    let rows = [
        CheckRow {
            check: "diff_map localizes planted cell",
            passed_seeds: diff_ok,
            seeds: s.seeds,
            required,
            pass: diff_ok >= required,
        },
        CheckRow {
            check: "probe sweep localizes planted cell",
            passed_seeds: probe_ok,
            seeds: s.seeds,
            required,
            pass: probe_ok >= required,
        },
    ];
    let p = dir.join("selftest.csv");
    let mut w = csv::Writer::from_writer(create(&p)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    let messages = rows
        .iter()
        .map(|r| format!("{} {}: {}/{} seeds (need {})", if r.pass { "PASS" } else { "FAIL" }, r.check, r.passed_seeds, r.seeds, r.required))
        .collect();
    Ok(Produced {
        files: vec![p],
        exit_code: if rows.iter().all(|r| r.pass) { 0 } else { 3 },
        messages,
    })
}
