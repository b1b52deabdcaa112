//! Implementations behind the CLI subcommands. Each command reads its
//! inputs, runs the corresponding library pipeline, writes artifacts plus a
//! run manifest into `--out`, and returns the manifest for callers that
//! want to check digests.

use crate::manifest::RunManifest;
use clap::Args;
use gridlm::analysis::{
    contrast_map, grow_clusters, pool_fdr, profile_from_responses, stimulus_responses, Cluster,
    Sign, StatMap, StimulusSet,
};
use gridlm::checkpoint;
use gridlm::export::{
    read_clusters_json, read_map_csv, write_clusters_json, write_profile_csv, write_raw_map_csv,
    write_signed_pgms, write_statmap_csv, ClustersFile, MapFile,
};
use gridlm::model::{HookId, ModelConfig, TopoTransformer};
use gridlm::readout::{smooth_map, SmoothingKernel};
use gridlm::spatial_loss::SpatialLossConfig;
use gridlm::spatstats::{islands_morans_i, morans_i, queen_weights, rook_weights, Contiguity};
use gridlm::trainer::{fit, ingest, TrainConfig, TrainError};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Failure category, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or config (exit 2).
    Usage(String),
    /// Unreadable or malformed inputs (exit 3).
    Data(String),
    /// Numerically undefined or diverged computation (exit 4).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gridlm::export::ExportError> for CliError {
    fn from(e: gridlm::export::ExportError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gridlm::analysis::AnalysisError> for CliError {
    fn from(e: gridlm::analysis::AnalysisError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gridlm::checkpoint::CheckpointError> for CliError {
    fn from(e: gridlm::checkpoint::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gridlm::model::ModelError> for CliError {
    fn from(e: gridlm::model::ModelError) -> Self {
        match e {
            gridlm::model::ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::Spatial(_) => CliError::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<gridlm::spatstats::SpatStatsError> for CliError {
    fn from(e: gridlm::spatstats::SpatStatsError) -> Self {
        use gridlm::spatstats::SpatStatsError::*;
        match e {
            ZeroVariance | NoIslands | TooFewSites(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn load_model(path: &Path) -> Result<TopoTransformer, CliError> {
    Ok(checkpoint::load(path)?.model)
}

fn kernel_from_flags(fwhm: Option<f64>, unit_spacing: f64) -> Result<Option<SmoothingKernel>, CliError> {
    match fwhm {
        None => Ok(None),
        Some(f) if f > 0.0 && unit_spacing > 0.0 => Ok(Some(SmoothingKernel::new(f, unit_spacing))),
        _ => Err(CliError::Usage("--fwhm and --unit-spacing must be positive".into())),
    }
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub paths: Vec<PathBuf>,
    pub split_fraction: f64,
}

/// The JSON file `gridlm train --config` consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Omit or set null for the non-topographic baseline.
    #[serde(default)]
    pub spatial: Option<SpatialLossConfig>,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// JSON run config (model, train, spatial, data, out_dir).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub manifest: RunManifest,
    pub steps_completed: u64,
    pub early_stopped: bool,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutputs, CliError> {
    let config_text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", args.config.display())))?;
    let run: TrainRunConfig =
        serde_json::from_str(&config_text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    run.model.validate()?;
    run.train.validate()?;
    if let Some(s) = &run.spatial {
        s.validate().map_err(CliError::Usage)?;
    }
    if run.data.paths.is_empty() {
        return Err(CliError::Usage("data.paths must list at least one file".into()));
    }

    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&run).expect("config serializes"),
        Some(run.train.seed),
    );
    manifest.add_input(&args.config)?;
    for p in &run.data.paths {
        manifest.add_input(p)?;
    }

    let corpus = ingest(&run.data.paths, run.data.split_fraction)?;
    let mut model = TopoTransformer::init(run.model.clone(), run.train.seed)?;
    let report = fit(&mut model, &corpus, &run.train, run.spatial.as_ref(), &run.out_dir)?;

    manifest.add_output(&report.checkpoint_path)?;
    manifest.add_output(&report.loss_csv_path)?;
    manifest.write(&run.out_dir)?;
    Ok(TrainOutputs {
        checkpoint: report.checkpoint_path,
        loss_csv: report.loss_csv_path,
        manifest,
        steps_completed: report.steps_completed,
        early_stopped: report.early_stopped,
    })
}

// ---------------------------------------------------------------------------
// contrast

#[derive(Args, Debug, Clone)]
pub struct ContrastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stimulus TSV with header condition<TAB>text.
    #[arg(long)]
    pub stimuli: PathBuf,
    #[arg(long = "condition-a")]
    pub condition_a: String,
    #[arg(long = "condition-b")]
    pub condition_b: String,
    /// Simulated fMRI smoothing FWHM in mm; omit for raw unit responses.
    #[arg(long)]
    pub fwhm: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub unit_spacing: f64,
    /// Pool the FDR correction across all hooks instead of per hook.
    #[arg(long)]
    pub pool_fdr: bool,
    #[arg(long, default_value_t = 0.05)]
    pub q: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct ContrastOutputs {
    pub maps: Vec<(HookId, PathBuf)>,
    pub manifest: RunManifest,
}

pub fn cmd_contrast(args: &ContrastArgs) -> Result<ContrastOutputs, CliError> {
    let kernel = kernel_from_flags(args.fwhm, args.unit_spacing)?;
    let model = load_model(&args.checkpoint)?;
    let stimuli = StimulusSet::from_tsv_path(&args.stimuli)?;
    let rows_a = stimuli.require_condition(&args.condition_a)?;
    let rows_b = stimuli.require_condition(&args.condition_b)?;

    let mut manifest = RunManifest::new(
        "contrast",
        serde_json::json!({
            "checkpoint": args.checkpoint, "stimuli": args.stimuli,
            "condition_a": args.condition_a, "condition_b": args.condition_b,
            "fwhm": args.fwhm, "unit_spacing": args.unit_spacing,
            "pool_fdr": args.pool_fdr, "q": args.q, "out": args.out,
        }),
        None,
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.stimuli)?;

    let responses = stimulus_responses(&model, &stimuli, kernel.as_ref())?;
    let mut maps = Vec::new();
    for (hook, matrix) in &responses {
        let a = matrix.select(Axis(0), &rows_a);
        let b = matrix.select(Axis(0), &rows_b);
        maps.push(contrast_map(&a, &b, model.layout(*hook)?, *hook, args.q)?);
    }
    if args.pool_fdr {
        pool_fdr(&mut maps, args.q);
    }

    std::fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    for map in &maps {
        let csv = args.out.join(format!("contrast_{}.csv", map.hook));
        write_statmap_csv(&csv, map)?;
        let pos = args.out.join(format!("contrast_{}_pos.pgm", map.hook));
        let neg = args.out.join(format!("contrast_{}_neg.pgm", map.hook));
        write_signed_pgms(&pos, &neg, map)?;
        manifest.add_output(&csv)?;
        manifest.add_output(&pos)?;
        manifest.add_output(&neg)?;
        outputs.push((map.hook, csv));
    }
    manifest.write(&args.out)?;
    Ok(ContrastOutputs { maps: outputs, manifest })
}

// ---------------------------------------------------------------------------
// clusters

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SignArg {
    Positive,
    Negative,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct ClustersArgs {
    /// Stat-map CSV produced by `contrast`.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub q: f64,
    /// Minimum retained cluster size (desk-scale default; larger grids
    /// typically use 10).
    #[arg(long, default_value_t = 4)]
    pub min_size: usize,
    #[arg(long, value_enum, default_value_t = SignArg::Both)]
    pub sign: SignArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct ClustersOutputs {
    pub clusters_json: PathBuf,
    pub clusters: Vec<Cluster>,
    pub manifest: RunManifest,
}

pub fn cmd_clusters(args: &ClustersArgs) -> Result<ClustersOutputs, CliError> {
    let map = match read_map_csv(&args.map)? {
        MapFile::Stat(m) => m,
        MapFile::Raw { .. } => {
            return Err(CliError::Data(format!(
                "{} is a raw value map; cluster growing needs a stat-map CSV with p-values",
                args.map.display()
            )))
        }
    };
    let mut manifest = RunManifest::new(
        "clusters",
        serde_json::json!({
            "map": args.map, "q": args.q, "min_size": args.min_size,
            "sign": format!("{:?}", args.sign), "out": args.out,
        }),
        None,
    );
    manifest.add_input(&args.map)?;

    let mut clusters = Vec::new();
    if matches!(args.sign, SignArg::Positive | SignArg::Both) {
        clusters.extend(grow_clusters(&map, args.q, args.min_size, Sign::Positive));
    }
    if matches!(args.sign, SignArg::Negative | SignArg::Both) {
        clusters.extend(grow_clusters(&map, args.q, args.min_size, Sign::Negative));
    }
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then(a.seed_unit.cmp(&b.seed_unit)));

    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("clusters.json");
    write_clusters_json(
        &path,
        &ClustersFile {
            source_map: args.map.display().to_string(),
            q: args.q,
            min_size: args.min_size,
            clusters: clusters.clone(),
        },
    )?;
    manifest.add_output(&path)?;
    manifest.write(&args.out)?;
    Ok(ClustersOutputs { clusters_json: path, clusters, manifest })
}

// ---------------------------------------------------------------------------
// moran

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ContiguityArg {
    Queen,
    Rook,
}

impl From<ContiguityArg> for Contiguity {
    fn from(c: ContiguityArg) -> Self {
        match c {
            ContiguityArg::Queen => Contiguity::Queen,
            ContiguityArg::Rook => Contiguity::Rook,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct MoranArgs {
    /// Stat-map CSV or raw row,col,value CSV.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, value_enum, default_value_t = ContiguityArg::Queen)]
    pub contiguity: ContiguityArg,
    /// Score each connected component of significant units separately and
    /// average (requires a stat-map input).
    #[arg(long)]
    pub islands: bool,
    /// Zero out non-significant units first. Refused without --islands:
    /// thresholding inflates the global statistic.
    #[arg(long)]
    pub masked: bool,
    #[arg(long, default_value_t = 999)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MoranReport {
    pub i: f64,
    pub p: Option<f64>,
    pub n_permutations: usize,
    pub contiguity: String,
    pub islands: Option<gridlm::spatstats::IslandsMoran>,
}

#[derive(Debug)]
pub struct MoranOutputs {
    pub report: MoranReport,
    pub report_json: PathBuf,
    pub manifest: RunManifest,
}

pub fn cmd_moran(args: &MoranArgs) -> Result<MoranOutputs, CliError> {
    if args.masked && !args.islands {
        return Err(CliError::Usage(
            "--masked thresholds the map, which inflates global Moran's I; use --islands for \
             significance-restricted statistics"
                .into(),
        ));
    }
    let map = read_map_csv(&args.map)?;
    let mut manifest = RunManifest::new(
        "moran",
        serde_json::json!({
            "map": args.map, "contiguity": format!("{:?}", args.contiguity),
            "islands": args.islands, "masked": args.masked,
            "permutations": args.permutations, "seed": args.seed, "out": args.out,
        }),
        Some(args.seed),
    );
    manifest.add_input(&args.map)?;

    let contiguity: Contiguity = args.contiguity.into();
    let (width, height) = map.dims();

    let report = if args.islands {
        let stat = match &map {
            MapFile::Stat(m) => m,
            MapFile::Raw { .. } => {
                return Err(CliError::Data(
                    "--islands needs a stat-map CSV with a significance column".into(),
                ))
            }
        };
        let islands =
            islands_morans_i(&stat.t, &stat.significant, &stat.cells, width, height, contiguity)?;
        MoranReport {
            i: islands.mean_i,
            p: None,
            n_permutations: 0,
            contiguity: format!("{contiguity:?}").to_lowercase(),
            islands: Some(islands),
        }
    } else {
        // values enter unthresholded; sites are ordered by their cells
        let mut grid_values = vec![0.0f64; width * height];
        for (cell, &v) in map.cells().iter().zip(map.values()) {
            grid_values[cell.row * width + cell.col] = v;
        }
        let weights = match contiguity {
            Contiguity::Queen => queen_weights(width, height),
            Contiguity::Rook => rook_weights(width, height),
        };
        let result = morans_i(&grid_values, &weights, args.permutations, args.seed)?;
        MoranReport {
            i: result.i,
            p: result.permutation_p,
            n_permutations: result.n_permutations,
            contiguity: format!("{contiguity:?}").to_lowercase(),
            islands: None,
        }
    };

    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("moran.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    manifest.add_output(&path)?;
    manifest.write(&args.out)?;
    Ok(MoranOutputs { report, report_json: path, manifest })
}

// ---------------------------------------------------------------------------
// smooth

#[derive(Args, Debug, Clone)]
pub struct SmoothArgs {
    /// Map CSV to smooth. Note: this smooths a finished map for viewing;
    /// the canonical readout simulation smooths activations before any
    /// statistics (use `contrast --fwhm` for that).
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub fwhm: f64,
    #[arg(long, default_value_t = 1.0)]
    pub unit_spacing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct SmoothOutputs {
    pub smoothed_csv: PathBuf,
    pub manifest: RunManifest,
}

pub fn cmd_smooth(args: &SmoothArgs) -> Result<SmoothOutputs, CliError> {
    let kernel = kernel_from_flags(Some(args.fwhm), args.unit_spacing)?.expect("fwhm given");
    let map = read_map_csv(&args.map)?;
    let (width, height) = map.dims();
    let mut grid = Array2::zeros((height, width));
    for (cell, &v) in map.cells().iter().zip(map.values()) {
        grid[[cell.row, cell.col]] = v;
    }
    let smoothed = smooth_map(grid.view(), &kernel);

    let mut manifest = RunManifest::new(
        "smooth",
        serde_json::json!({
            "map": args.map, "fwhm": args.fwhm, "unit_spacing": args.unit_spacing,
            "out": args.out, "note": "visualization-only smoothing of a finished map",
        }),
        None,
    );
    manifest.add_input(&args.map)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("smoothed_visual.csv");
    write_raw_map_csv(&path, &smoothed)?;
    let pgm = args.out.join("smoothed_visual.pgm");
    let lo = smoothed.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    gridlm::export::write_pgm(&pgm, &smoothed, lo, hi)?;
    manifest.add_output(&path)?;
    manifest.add_output(&pgm)?;
    manifest.write(&args.out)?;
    Ok(SmoothOutputs { smoothed_csv: path, manifest })
}

// ---------------------------------------------------------------------------
// profile

#[derive(Args, Debug, Clone)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// clusters.json from the `clusters` command.
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub stimuli: PathBuf,
    #[arg(long)]
    pub fwhm: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub unit_spacing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct ProfileOutputs {
    pub profile_csv: PathBuf,
    pub rows: Vec<(String, String, f64)>,
    pub manifest: RunManifest,
}

pub fn cmd_profile(args: &ProfileArgs) -> Result<ProfileOutputs, CliError> {
    let kernel = kernel_from_flags(args.fwhm, args.unit_spacing)?;
    let model = load_model(&args.checkpoint)?;
    let clusters = read_clusters_json(&args.clusters)?;
    let stimuli = StimulusSet::from_tsv_path(&args.stimuli)?;
    for c in &clusters.clusters {
        if model.layout(c.hook).is_err() {
            return Err(CliError::Data(format!(
                "cluster hook {} does not exist in this checkpoint",
                c.hook
            )));
        }
    }

    let mut manifest = RunManifest::new(
        "profile",
        serde_json::json!({
            "checkpoint": args.checkpoint, "clusters": args.clusters,
            "stimuli": args.stimuli, "fwhm": args.fwhm,
            "unit_spacing": args.unit_spacing, "out": args.out,
        }),
        None,
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.clusters)?;
    manifest.add_input(&args.stimuli)?;

    let responses = stimulus_responses(&model, &stimuli, kernel.as_ref())?;
    let mut rows = Vec::new();
    for (i, cluster) in clusters.clusters.iter().enumerate() {
        let matrix = &responses[&cluster.hook];
        let profile = profile_from_responses(matrix, &cluster.members, &stimuli)?;
        for (condition, value) in profile {
            rows.push((format!("{}#{}", cluster.hook, i), condition, value));
        }
    }

    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("profile.csv");
    write_profile_csv(&path, &rows)?;
    manifest.add_output(&path)?;
    manifest.write(&args.out)?;
    Ok(ProfileOutputs { profile_csv: path, rows, manifest })
}

// ---------------------------------------------------------------------------
// activations

#[derive(Args, Debug, Clone)]
pub struct ActivationsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub stimuli: PathBuf,
    /// Restrict the export to one hook (e.g. "L2.mlp"); default all hooks.
    #[arg(long)]
    pub hook: Option<String>,
    #[arg(long)]
    pub fwhm: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub unit_spacing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct ActivationsOutputs {
    pub files: Vec<(HookId, PathBuf)>,
    pub manifest: RunManifest,
}

pub fn cmd_activations(args: &ActivationsArgs) -> Result<ActivationsOutputs, CliError> {
    let kernel = kernel_from_flags(args.fwhm, args.unit_spacing)?;
    let model = load_model(&args.checkpoint)?;
    let stimuli = StimulusSet::from_tsv_path(&args.stimuli)?;
    let only: Option<HookId> = match &args.hook {
        None => None,
        Some(name) => Some(
            name.parse::<HookId>()
                .map_err(|_| CliError::Usage(format!("unknown hook name {name:?}")))?,
        ),
    };
    if let Some(h) = only {
        model.layout(h).map_err(|_| {
            CliError::Usage(format!("hook {h} does not exist in this checkpoint"))
        })?;
    }

    let mut manifest = RunManifest::new(
        "activations",
        serde_json::json!({
            "checkpoint": args.checkpoint, "stimuli": args.stimuli, "hook": args.hook,
            "fwhm": args.fwhm, "unit_spacing": args.unit_spacing, "out": args.out,
        }),
        None,
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.stimuli)?;

    let responses = stimulus_responses(&model, &stimuli, kernel.as_ref())?;
    std::fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    for (hook, matrix) in &responses {
        if only.is_some_and(|h| h != *hook) {
            continue;
        }
        let path = args.out.join(format!("activations_{hook}.csv"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        use std::io::Write;
        let unit_headers: Vec<String> = (0..matrix.ncols()).map(|u| format!("u{u}")).collect();
        writeln!(w, "stimulus,condition,{}", unit_headers.join(","))?;
        for (i, row) in matrix.outer_iter().enumerate() {
            let values: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{},{},{}", i, stimuli.items[i].condition, values.join(","))?;
        }
        w.flush()?;
        manifest.add_output(&path)?;
        files.push((*hook, path));
    }
    manifest.write(&args.out)?;
    Ok(ActivationsOutputs { files, manifest })
}

/// Moran's I of a stat map's t-values straight from an in-memory map, used
/// by tests to compare against the CSV round trip.
pub fn moran_of_statmap(map: &StatMap, contiguity: Contiguity) -> Result<f64, CliError> {
    let mut grid_values = vec![0.0f64; map.width * map.height];
    for (cell, &v) in map.cells.iter().zip(&map.t) {
        grid_values[cell.row * map.width + cell.col] = v;
    }
    let weights = match contiguity {
        Contiguity::Queen => queen_weights(map.width, map.height),
        Contiguity::Rook => rook_weights(map.width, map.height),
    };
    Ok(morans_i(&grid_values, &weights, 0, 0)?.i)
}

/// Shared by tests: Moran's I of a per-unit map given its layout.
pub fn moran_of_units(
    values: &[f64],
    layout: &gridlm::grid::GridLayout,
    contiguity: Contiguity,
) -> Result<f64, CliError> {
    let mut grid_values = vec![0.0f64; layout.n_units()];
    for (unit, &v) in values.iter().enumerate() {
        let c = layout.cell_of_unit(unit);
        grid_values[c.row * layout.width() + c.col] = v;
    }
    let weights = match contiguity {
        Contiguity::Queen => queen_weights(layout.width(), layout.height()),
        Contiguity::Rook => rook_weights(layout.width(), layout.height()),
    };
    Ok(morans_i(&grid_values, &weights, 0, 0)?.i)
}

/// Re-expose the smoothing of a per-unit t-map on its own grid (readout
/// direction checks in the test suites).
pub fn smooth_statmap_values(map: &StatMap, kernel: &SmoothingKernel) -> Vec<f64> {
    let mut grid = Array2::zeros((map.height, map.width));
    for (cell, &v) in map.cells.iter().zip(&map.t) {
        grid[[cell.row, cell.col]] = v;
    }
    let smoothed = smooth_map(grid.view(), kernel);
    map.cells.iter().map(|c| smoothed[[c.row, c.col]]).collect()
}
