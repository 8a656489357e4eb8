//! Experiment configuration, Monte-Carlo orchestration and result files.
//!
//! Every random stream is a child of the master seed keyed by experiment,
//! purpose and trial index, and every parallel map collects in input order,
//! so outputs are identical for any worker count.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::array::{search_grid, Aoa, ArrayGeometry};
use crate::channel::{
    draw_direct_channel, make_los_channel, synth_received_pilots, ChannelState, LinkBudget, LosChannelParams,
    NoisyLink,
};
use crate::configurator::{
    coherent_config, optimal_config, run_adaptive_estimation, ConfigCodebook, InitPolicy, MleEngine, RisConfig,
};
use crate::estimator::{dft_configs, AoaSearch, LsSolver, Refinement};
use crate::metrics::{nmse, se_achieved, se_max};
use crate::mobility::{channel_at, period_in_steps, random_walk, track_channels, RoomScenario, TrajectoryPoint};
use crate::rng::child_rng;
use crate::{wrap_phase, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

mod label {
    pub const FIG2: u64 = 2;
    pub const FIG3: u64 = 3;
    pub const ONCE: u64 = 4;

    pub const WALK: u64 = 0;
    pub const CHANNEL: u64 = 1;
    pub const WARMUP_CHANNEL: u64 = 2;
    pub const WARMUP_NOISE: u64 = 3;
    pub const RANDOM_INIT: u64 = 10;
    pub const SMART_INIT: u64 = 11;
    pub const LS_NOISE: u64 = 12;
    pub const NOISE: u64 = 13;
}

/// Flat experiment configuration, readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_h: usize,
    pub n_v: usize,
    /// Element spacing in wavelengths.
    pub delta_h: f64,
    pub delta_v: f64,
    pub snr_d_db: f64,
    /// Defaults to `snr_d_db + 10`.
    pub snr_p_db: Option<f64>,
    /// Direction of the BS as seen from the RIS, radians.
    pub h_azimuth: f64,
    pub h_elevation: f64,

    pub search_res_az: usize,
    pub search_res_el: usize,
    /// 0 disables refinement.
    pub refine_points: usize,
    pub refine_pitch_deg: f64,

    pub mle_l_max: usize,
    pub ls_l_max: usize,
    pub fig2_trials: usize,
    pub fig2_walk_points: usize,
    /// Walk steps between consecutive pilot-sweep locations.
    pub fig2_walk_stride: usize,

    pub room_x: f64,
    pub room_y: f64,
    pub ris_x: f64,
    pub ris_y: f64,
    pub ris_z: f64,
    pub ris_normal_x: f64,
    pub ris_normal_y: f64,
    pub ue_height: f64,
    pub wavelength: f64,
    pub step_interval: f64,
    pub step_distance: f64,
    pub turn_sigma_deg: f64,
    pub wall_margin: f64,

    pub fig3_duration: f64,
    pub fig3_policies: Vec<f64>,
    pub fig3_pilots: usize,
    pub fig3_noise_realizations: usize,

    pub seed: u64,
    /// Worker threads; unset uses the global pool. Not written to result
    /// files, which must not depend on it.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = RoomScenario::default();
        Self {
            n_h: 8,
            n_v: 8,
            delta_h: 0.25,
            delta_v: 0.25,
            snr_d_db: -10.0,
            snr_p_db: None,
            h_azimuth: 0.3,
            h_elevation: -0.2,
            search_res_az: 181,
            search_res_el: 181,
            refine_points: 11,
            refine_pitch_deg: 0.1,
            mle_l_max: 12,
            ls_l_max: 64,
            fig2_trials: 500,
            fig2_walk_points: 200,
            fig2_walk_stride: 5,
            room_x: s.room_x,
            room_y: s.room_y,
            ris_x: s.ris_center[0],
            ris_y: s.ris_center[1],
            ris_z: s.ris_center[2],
            ris_normal_x: s.ris_normal[0],
            ris_normal_y: s.ris_normal[1],
            ue_height: s.ue_height,
            wavelength: s.wavelength,
            step_interval: s.step_interval,
            step_distance: s.step_distance,
            turn_sigma_deg: 30.0,
            wall_margin: s.wall_margin,
            fig3_duration: 200.0,
            fig3_policies: vec![1.0, 10.0],
            fig3_pilots: 6,
            fig3_noise_realizations: 100,
            seed: 0,
            workers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn snr_p_db(&self) -> f64 {
        self.snr_p_db.unwrap_or(self.snr_d_db + 10.0)
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.n_h, self.n_v, self.delta_h, self.delta_v)
    }

    pub fn budget(&self) -> LinkBudget {
        LinkBudget::from_snr_db(self.snr_d_db, self.snr_p_db())
    }

    pub fn search(&self) -> Result<AoaSearch> {
        let grid = search_grid(self.search_res_az, self.search_res_el)?;
        let refine = (self.refine_points > 0)
            .then(|| Refinement { points_per_axis: self.refine_points, pitch: self.refine_pitch_deg.to_radians() });
        Ok(AoaSearch::new(grid, refine))
    }

    pub fn scenario(&self) -> RoomScenario {
        RoomScenario {
            room_x: self.room_x,
            room_y: self.room_y,
            ris_center: [self.ris_x, self.ris_y, self.ris_z],
            ris_normal: [self.ris_normal_x, self.ris_normal_y, 0.0],
            ue_height: self.ue_height,
            wavelength: self.wavelength,
            step_interval: self.step_interval,
            step_distance: self.step_distance,
            turn_sigma: self.turn_sigma_deg.to_radians(),
            wall_margin: self.wall_margin,
        }
    }

    /// Known RIS-BS channel: unit-gain LOS towards the BS direction.
    pub fn bs_channel(&self) -> Result<Vec<Complex64>> {
        Ok(self.geometry()?.array_response(Aoa::new(self.h_azimuth, self.h_elevation)?))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let geom = self.geometry()?;
        let n = geom.len();
        self.search()?;
        self.scenario().validate()?;
        Aoa::new(self.h_azimuth, self.h_elevation)?;
        if !self.snr_d_db.is_finite() || !self.snr_p_db().is_finite() {
            return bad("SNRs must be finite".into());
        }
        if self.refine_points > 0 && !(self.refine_pitch_deg > 0.0) {
            return bad("refine_pitch_deg must be positive".into());
        }
        if self.mle_l_max < 2 || self.mle_l_max > n {
            return bad(format!("mle_l_max must be in 2..={n}, got {}", self.mle_l_max));
        }
        if self.ls_l_max < 1 || self.ls_l_max > n {
            return bad(format!("ls_l_max must be in 1..={n}, got {}", self.ls_l_max));
        }
        if self.fig2_trials == 0 || self.fig2_walk_points == 0 || self.fig2_walk_stride == 0 {
            return bad("fig2_trials, fig2_walk_points and fig2_walk_stride must be at least 1".into());
        }
        if !(self.fig3_duration > 0.0) {
            return bad("fig3_duration must be positive".into());
        }
        if self.fig3_pilots < 2 || self.fig3_pilots > n {
            return bad(format!("fig3_pilots must be in 2..={n}, got {}", self.fig3_pilots));
        }
        if self.fig3_noise_realizations == 0 {
            return bad("fig3_noise_realizations must be at least 1".into());
        }
        let scenario = self.scenario();
        for &p in &self.fig3_policies {
            period_in_steps(&scenario, p)?;
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.workers {
            None => f(),
            Some(w) => rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .install(f),
        }
    }
}

/// A row type that can be written to and read from result files.
pub trait TableRow: Serialize + DeserializeOwned {
    const COLUMNS: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub estimator: String,
    pub pilots: usize,
    pub mean_se: f64,
    pub std_se: f64,
    pub trials: usize,
}

impl TableRow for Fig2Row {
    const COLUMNS: &'static [&'static str] = &["estimator", "pilots", "mean_se", "std_se", "trials"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Row {
    pub policy_s: f64,
    pub t: f64,
    /// Mean over noise realizations.
    pub se_achieved: f64,
    pub se_max: f64,
}

impl TableRow for Fig3Row {
    const COLUMNS: &'static [&'static str] = &["policy_s", "t", "se_achieved", "se_max"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub az: f64,
    pub el: f64,
    pub distance: f64,
}

impl TableRow for TrajectoryRow {
    const COLUMNS: &'static [&'static str] = &["t", "x", "y", "z", "az", "el", "distance"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub pilots: usize,
    pub true_az: f64,
    pub true_el: f64,
    pub true_beta: f64,
    pub true_omega: f64,
    pub true_alpha: f64,
    pub true_vartheta: f64,
    pub est_az: f64,
    pub est_el: f64,
    pub est_beta: f64,
    pub est_omega: f64,
    pub est_alpha: f64,
    pub est_vartheta: f64,
    pub nmse_g: f64,
    pub se_achieved: f64,
    pub se_max: f64,
}

impl TableRow for EstimateRow {
    const COLUMNS: &'static [&'static str] = &[
        "pilots",
        "true_az",
        "true_el",
        "true_beta",
        "true_omega",
        "true_alpha",
        "true_vartheta",
        "est_az",
        "est_el",
        "est_beta",
        "est_omega",
        "est_alpha",
        "est_vartheta",
        "nmse_g",
        "se_achieved",
        "se_max",
    ];
}

/// Rows plus the configuration and seed that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable<R> {
    pub experiment: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub rows: Vec<R>,
}

impl<R> ResultTable<R> {
    pub fn new(experiment: &str, config: &ExperimentConfig, rows: Vec<R>) -> Self {
        Self { experiment: experiment.to_string(), seed: config.seed, config: config.clone(), rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

#[derive(Serialize, Deserialize)]
struct JsonDocument<T> {
    schema_version: u32,
    experiment: String,
    seed: u64,
    config: ExperimentConfig,
    rows: T,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.to_string() }
}

/// Renders a table as CSV: `# key=value` metadata lines, a header, then rows.
pub fn to_csv_string<R: TableRow>(table: &ResultTable<R>) -> Result<String> {
    let config = serde_json::to_string(&table.config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut out = format!(
        "# schema_version={SCHEMA_VERSION}\n# experiment={}\n# seed={}\n# config={config}\n",
        table.experiment, table.seed
    );
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidConfig(e.to_string());
    w.write_record(R::COLUMNS).map_err(csv_err)?;
    for row in &table.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    out.push_str(std::str::from_utf8(&body).expect("csv output is UTF-8"));
    Ok(out)
}

/// Renders a table as a pretty-printed JSON document with a schema version.
pub fn to_json_string<R: TableRow>(table: &ResultTable<R>) -> Result<String> {
    let doc = JsonDocument {
        schema_version: SCHEMA_VERSION,
        experiment: table.experiment.clone(),
        seed: table.seed,
        config: table.config.clone(),
        rows: &table.rows,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Renders `table` in the given format.
pub fn render<R: TableRow>(table: &ResultTable<R>, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => to_csv_string(table),
        OutputFormat::Json => to_json_string(table),
    }
}

/// Writes `table` to `path` in the given format.
pub fn emit_results<R: TableRow>(table: &ResultTable<R>, path: &Path, format: OutputFormat) -> Result<()> {
    let text = render(table, format)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a file written by [`emit_results`].
pub fn read_results<R: TableRow>(path: &Path, format: OutputFormat) -> Result<ResultTable<R>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match format {
        OutputFormat::Json => {
            let doc: JsonDocument<Vec<R>> = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
            if doc.schema_version != SCHEMA_VERSION {
                return Err(format_err(path, format!("unsupported schema version {}", doc.schema_version)));
            }
            Ok(ResultTable { experiment: doc.experiment, seed: doc.seed, config: doc.config, rows: doc.rows })
        }
        OutputFormat::Csv => {
            let (mut experiment, mut seed, mut config) = (None, None, None);
            let mut body_start = 0;
            for line in text.split_inclusive('\n') {
                let Some(meta) = line.strip_prefix("# ") else { break };
                body_start += line.len();
                let (key, value) = meta.trim_end().split_once('=').ok_or_else(|| format_err(path, "bad metadata line"))?;
                match key {
                    "schema_version" if value != SCHEMA_VERSION.to_string() => {
                        return Err(format_err(path, format!("unsupported schema version {value}")));
                    }
                    "experiment" => experiment = Some(value.to_string()),
                    "seed" => seed = Some(value.parse::<u64>().map_err(|e| format_err(path, e))?),
                    "config" => config = Some(serde_json::from_str(value).map_err(|e| format_err(path, e))?),
                    _ => {}
                }
            }
            let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(&text.as_bytes()[body_start..]);
            let header = r.headers().map_err(|e| format_err(path, e))?;
            if header.iter().ne(R::COLUMNS.iter().copied()) {
                return Err(format_err(path, format!("unexpected header {header:?}")));
            }
            let rows = r.deserialize().collect::<std::result::Result<Vec<R>, _>>().map_err(|e| format_err(path, e))?;
            Ok(ResultTable {
                experiment: experiment.ok_or_else(|| format_err(path, "missing experiment"))?,
                seed: seed.ok_or_else(|| format_err(path, "missing seed"))?,
                config: config.ok_or_else(|| format_err(path, "missing config"))?,
                rows,
            })
        }
    }
}

/// Shared state for experiments that run Algorithm-style sessions.
struct Context {
    engine: MleEngine,
    codebook: ConfigCodebook,
    budget: LinkBudget,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let engine = MleEngine::new(cfg.geometry()?, cfg.bs_channel()?, cfg.search()?)?;
        let codebook = engine.build_codebook();
        let engine = engine.with_table(&codebook);
        Ok(Self { engine, codebook, budget: cfg.budget() })
    }

    fn session<R: Rng + ?Sized>(
        &self,
        state: &ChannelState,
        pilots: usize,
        init: &InitPolicy,
        rng: &mut R,
    ) -> Result<crate::configurator::AdaptiveOutcome> {
        let mut cb = self.codebook.clone();
        let mut link = NoisyLink { state, pilot_power: self.budget.pilot_power, noise_power: self.budget.noise_power };
        run_adaptive_estimation(
            pilots,
            &mut cb,
            init,
            &mut link,
            &self.engine,
            self.budget.pilot_power,
            self.budget.noise_power,
            rng,
        )
    }

    fn se(&self, theta: &RisConfig, state: &ChannelState) -> f64 {
        let se = se_achieved(theta, state, self.budget.data_power, self.budget.noise_power);
        debug_assert!(se <= se_max(state, self.budget.data_power, self.budget.noise_power) * (1.0 + 1e-12));
        se
    }
}

/// LOS channel at a walk point with propagation phase from the distance and
/// a fresh Rayleigh direct path.
fn walk_channel<R: Rng + ?Sized>(
    scenario: &RoomScenario,
    point: &TrajectoryPoint,
    ctx: &Context,
    rng: &mut R,
) -> Result<ChannelState> {
    let beta = ctx.budget.beta;
    let omega = wrap_phase(-std::f64::consts::TAU * point.distance / scenario.wavelength);
    let params = LosChannelParams::new(beta, omega, point.aoa)?;
    let g = make_los_channel(&params, ctx.engine.geometry());
    ChannelState::new(g, draw_direct_channel(beta, rng), ctx.engine.h().to_vec())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub const MLE_RANDOM: &str = "mle_random";
pub const MLE_SMART: &str = "mle_smart";
pub const LS: &str = "ls";
pub const PERFECT: &str = "perfect";

/// Average SE versus pilot count for both MLE initialisations, LS and perfect CSI.
///
/// Trial `i` sits at walk location `i mod fig2_walk_points`. Locations are
/// `fig2_walk_stride` steps apart. The smart chain visits locations in walk
/// order, each pass over the walk starting from a random-init warm-up
/// session at the location preceding the first one.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<Vec<Fig2Row>> {
    let ctx = Context::new(cfg)?;
    cfg.in_pool(|| fig2_inner(cfg, &ctx))
}

fn fig2_inner(cfg: &ExperimentConfig, ctx: &Context) -> Result<Vec<Fig2Row>> {
    use label::*;
    let seed = cfg.seed;
    let scenario = cfg.scenario();
    let trials = cfg.fig2_trials;
    let w = cfg.fig2_walk_points;
    let stride = cfg.fig2_walk_stride;

    let walk = random_walk(&scenario, (w * stride) as f64 * scenario.step_interval, &mut child_rng(seed, &[FIG2, WALK]))?;
    let locations: Vec<TrajectoryPoint> = walk.iter().step_by(stride).copied().collect();
    debug_assert_eq!(locations.len(), w + 1);
    let warm_location = locations[0];
    let locations = &locations[1..];

    let channels: Vec<ChannelState> = (0..trials)
        .into_par_iter()
        .map(|i| walk_channel(&scenario, &locations[i % w], ctx, &mut child_rng(seed, &[FIG2, CHANNEL, i as u64])))
        .collect::<Result<_>>()?;

    let l_max = cfg.mle_l_max;
    let mle_ls: Vec<usize> = (2..=l_max).collect();

    // Random init: a session of l_max pilots contains every shorter session as a prefix.
    let random_se: Vec<Vec<f64>> = channels
        .par_iter()
        .enumerate()
        .map(|(i, state)| {
            let mut rng = child_rng(seed, &[FIG2, RANDOM_INIT, i as u64]);
            let out = ctx.session(state, l_max, &InitPolicy::Random, &mut rng)?;
            Ok(out
                .history
                .iter()
                .map(|r| ctx.se(&optimal_config(r.vartheta, r.omega, r.aoa, ctx.engine.h(), ctx.engine.geometry()), state))
                .collect())
        })
        .collect::<Result<_>>()?;

    // Smart init: one sequential chain per (L, pass).
    let passes = trials.div_ceil(w);
    let jobs: Vec<(usize, usize)> = mle_ls.iter().flat_map(|&l| (0..passes).map(move |p| (l, p))).collect();
    let smart_chunks: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(l, p)| {
            let warm_state = walk_channel(&scenario, &warm_location, ctx, &mut child_rng(seed, &[FIG2, WARMUP_CHANNEL, p as u64]))?;
            let mut rng = child_rng(seed, &[FIG2, WARMUP_NOISE, l as u64, p as u64]);
            let mut prev = ctx.session(&warm_state, l, &InitPolicy::Random, &mut rng)?.theta_bar;
            let mut out = Vec::with_capacity(w);
            for i in p * w..((p + 1) * w).min(trials) {
                let mut rng = child_rng(seed, &[FIG2, SMART_INIT, l as u64, i as u64]);
                let outcome = ctx.session(&channels[i], l, &InitPolicy::Smart(prev), &mut rng)?;
                out.push(ctx.se(&outcome.theta_bar, &channels[i]));
                prev = outcome.theta_bar;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let n = ctx.engine.geometry().len();
    let ls_se: Vec<Vec<f64>> = (1..=cfg.ls_l_max)
        .into_par_iter()
        .map(|l| {
            let rows = dft_configs(n, l);
            let solver = LsSolver::new(&rows, ctx.engine.cascade(), ctx.budget.pilot_power)?;
            channels
                .iter()
                .enumerate()
                .map(|(i, state)| {
                    let mut rng = child_rng(seed, &[FIG2, LS_NOISE, l as u64, i as u64]);
                    let y = synth_received_pilots(state, &rows, ctx.budget.pilot_power, ctx.budget.noise_power, &mut rng)?;
                    let est = solver.solve(&y)?;
                    Ok(ctx.se(&coherent_config(&est.g_hat, est.d_hat, ctx.engine.h()), state))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let perfect: Vec<f64> = channels
        .iter()
        .map(|s| se_max(s, ctx.budget.data_power, ctx.budget.noise_power))
        .collect();

    let row = |estimator: &str, pilots: usize, xs: &[f64]| {
        let (mean_se, std_se) = mean_std(xs);
        Fig2Row { estimator: estimator.to_string(), pilots, mean_se, std_se, trials: xs.len() }
    };
    let mut rows = Vec::new();
    for (k, &l) in mle_ls.iter().enumerate() {
        let xs: Vec<f64> = random_se.iter().map(|v| v[k]).collect();
        rows.push(row(MLE_RANDOM, l, &xs));
    }
    for (k, &l) in mle_ls.iter().enumerate() {
        let xs: Vec<f64> = smart_chunks[k * passes..(k + 1) * passes].concat();
        rows.push(row(MLE_SMART, l, &xs));
    }
    for (k, xs) in ls_se.iter().enumerate() {
        rows.push(row(LS, k + 1, xs));
    }
    for l in 1..=l_max.max(cfg.ls_l_max) {
        rows.push(row(PERFECT, l, &perfect));
    }
    Ok(rows)
}

/// Smallest pilot count at which `estimator` reaches `fraction` of the perfect-CSI mean.
pub fn crossing(rows: &[Fig2Row], estimator: &str, fraction: f64) -> Option<usize> {
    let perfect = rows.iter().find(|r| r.estimator == PERFECT)?.mean_se;
    rows.iter()
        .filter(|r| r.estimator == estimator && r.mean_se >= fraction * perfect)
        .map(|r| r.pilots)
        .min()
}

/// SE traces for every update policy on one shared trajectory and channel sequence.
///
/// Noise realization `r` uses the same stream under every policy.
pub fn run_fig3(cfg: &ExperimentConfig) -> Result<Vec<Fig3Row>> {
    let ctx = Context::new(cfg)?;
    cfg.in_pool(|| fig3_inner(cfg, &ctx))
}

fn fig3_trajectory(cfg: &ExperimentConfig) -> Result<Vec<TrajectoryPoint>> {
    random_walk(&cfg.scenario(), cfg.fig3_duration, &mut child_rng(cfg.seed, &[label::FIG3, label::WALK]))
}

fn fig3_inner(cfg: &ExperimentConfig, ctx: &Context) -> Result<Vec<Fig3Row>> {
    use label::*;
    let scenario = cfg.scenario();
    let trajectory = fig3_trajectory(cfg)?;
    let mut rng = child_rng(cfg.seed, &[FIG3, CHANNEL]);
    let channels = trajectory
        .iter()
        .map(|p| channel_at(&scenario, p, ctx.budget.beta, ctx.engine.geometry(), ctx.engine.h(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = trajectory.iter().map(|p| p.t).collect();
    let maxima: Vec<f64> = channels.iter().map(|s| se_max(s, ctx.budget.data_power, ctx.budget.noise_power)).collect();

    let mut rows = Vec::with_capacity(cfg.fig3_policies.len() * times.len());
    for &policy in &cfg.fig3_policies {
        let period = period_in_steps(&scenario, policy)?;
        let traces: Vec<Vec<f64>> = (0..cfg.fig3_noise_realizations)
            .into_par_iter()
            .map(|r| {
                let mut rng = child_rng(cfg.seed, &[FIG3, NOISE, r as u64]);
                let samples = track_channels(
                    &channels,
                    &times,
                    period,
                    cfg.fig3_pilots,
                    &ctx.engine,
                    &ctx.codebook,
                    &ctx.budget,
                    &mut rng,
                )?;
                Ok(samples.into_iter().map(|s| s.se_achieved).collect())
            })
            .collect::<Result<_>>()?;
        let count = traces.len() as f64;
        for (k, (&t, &se_max)) in times.iter().zip(&maxima).enumerate() {
            let se_achieved = traces.iter().map(|tr| tr[k]).sum::<f64>() / count;
            rows.push(Fig3Row { policy_s: policy, t, se_achieved, se_max });
        }
    }
    Ok(rows)
}

/// The tracking-experiment trajectory as plot-ready rows.
pub fn run_trajectory(cfg: &ExperimentConfig) -> Result<Vec<TrajectoryRow>> {
    cfg.validate()?;
    Ok(fig3_trajectory(cfg)?
        .into_iter()
        .map(|p| TrajectoryRow {
            t: p.t,
            x: p.position[0],
            y: p.position[1],
            z: p.position[2],
            az: p.aoa.azimuth,
            el: p.aoa.elevation,
            distance: p.distance,
        })
        .collect())
}

/// One random-init session with `pilots` pilots on a channel with uniformly drawn
/// AoA, LOS phase and Rayleigh direct path.
pub fn run_estimate_once(cfg: &ExperimentConfig, pilots: usize) -> Result<EstimateRow> {
    let ctx = Context::new(cfg)?;
    let n = ctx.engine.geometry().len();
    if pilots < 2 || pilots > n {
        return Err(Error::InvalidPilotCount { pilots, elements: n });
    }
    let mut rng = child_rng(cfg.seed, &[label::ONCE]);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let aoa = Aoa::new(rng.random_range(-half_pi..=half_pi), rng.random_range(-half_pi..=half_pi))?;
    let params = LosChannelParams::new(ctx.budget.beta, rng.random_range(0.0..std::f64::consts::TAU), aoa)?;
    let g = make_los_channel(&params, ctx.engine.geometry());
    let d = draw_direct_channel(ctx.budget.beta, &mut rng);
    let state = ChannelState::new(g, d, ctx.engine.h().to_vec())?;
    let out = cfg.in_pool(|| ctx.session(&state, pilots, &InitPolicy::Random, &mut rng))?;
    let est = &out.estimate;
    Ok(EstimateRow {
        pilots,
        true_az: aoa.azimuth,
        true_el: aoa.elevation,
        true_beta: params.beta,
        true_omega: params.omega,
        true_alpha: d.norm_sqr(),
        true_vartheta: wrap_phase(d.arg()),
        est_az: est.aoa.azimuth,
        est_el: est.aoa.elevation,
        est_beta: est.beta,
        est_omega: est.omega,
        est_alpha: est.alpha,
        est_vartheta: est.vartheta,
        nmse_g: nmse(&est.g_hat, &state.g).value,
        se_achieved: ctx.se(&out.theta_bar, &state),
        se_max: se_max(&state, ctx.budget.data_power, ctx.budget.noise_power),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_h: 4,
            n_v: 4,
            search_res_az: 37,
            search_res_el: 37,
            refine_points: 0,
            mle_l_max: 5,
            ls_l_max: 16,
            fig2_trials: 12,
            fig2_walk_points: 5,
            fig3_duration: 4.0,
            fig3_noise_realizations: 3,
            fig3_policies: vec![0.2, 1.0],
            fig3_pilots: 3,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_validate_and_snr_offset() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.snr_p_db(), 0.0);
        let cfg = ExperimentConfig::from_toml_str("snr_d_db = -5.0\nseed = 3\n").unwrap();
        assert_eq!(cfg.snr_p_db(), 5.0);
        assert_eq!(cfg.seed, 3);
        let cfg = ExperimentConfig::from_toml_str("snr_p_db = 2.0\n").unwrap();
        assert_eq!(cfg.snr_p_db(), 2.0);
    }

    #[test]
    fn config_rejections() {
        assert!(ExperimentConfig::from_toml_str("unknown_key = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("fig2_trials = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("mle_l_max = 65\n").is_err());
        assert!(ExperimentConfig::from_toml_str("fig3_policies = [0.3]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("n_h = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("workers = 0\n").is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = small();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn fig2_table_shape() {
        let cfg = small();
        let rows = run_fig2(&cfg).unwrap();
        let count = |e: &str| rows.iter().filter(|r| r.estimator == e).count();
        assert_eq!(count(MLE_RANDOM), 4);
        assert_eq!(count(MLE_SMART), 4);
        assert_eq!(count(LS), 16);
        assert_eq!(count(PERFECT), 16);
        let perfect: Vec<f64> = rows.iter().filter(|r| r.estimator == PERFECT).map(|r| r.mean_se).collect();
        assert!(perfect.windows(2).all(|w| w[0] == w[1]));
        for r in &rows {
            assert_eq!(r.trials, 12);
            assert!(r.mean_se <= perfect[0] + 1e-12 && r.mean_se >= 0.0);
        }
    }

    #[test]
    fn crossing_picks_smallest_pilot_count() {
        let mk = |e: &str, l, m| Fig2Row { estimator: e.into(), pilots: l, mean_se: m, std_se: 0.0, trials: 1 };
        let rows = vec![mk(PERFECT, 1, 10.0), mk(LS, 1, 5.0), mk(LS, 2, 9.9), mk(LS, 3, 9.7), mk(LS, 4, 9.85)];
        assert_eq!(crossing(&rows, LS, 0.98), Some(2));
        assert_eq!(crossing(&rows, MLE_SMART, 0.98), None);
    }

    #[test]
    fn fig3_policies_share_channels() {
        let cfg = small();
        let rows = run_fig3(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 21);
        let (a, b) = rows.split_at(21);
        for (x, y) in a.iter().zip(b) {
            assert_eq!((x.t, x.se_max), (y.t, y.se_max));
            assert!(x.se_achieved <= x.se_max + 1e-12);
        }
    }

    #[test]
    fn trajectory_matches_fig3_walk() {
        let cfg = small();
        let rows = run_trajectory(&cfg).unwrap();
        assert_eq!(rows.len(), 21);
        assert!(rows.iter().all(|r| r.z == cfg.ue_height));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let rows = vec![
            Fig2Row { estimator: "ls".into(), pilots: 3, mean_se: 0.1 + 0.2, std_se: 1e-300, trials: 7 },
            Fig2Row { estimator: "perfect".into(), pilots: 1, mean_se: 8.812345678901234, std_se: 0.0, trials: 7 },
        ];
        let table = ResultTable::new("fig2", &cfg, rows);
        for fmt in [OutputFormat::Csv, OutputFormat::Json] {
            let path = dir.path().join(format!("t.{fmt}"));
            emit_results(&table, &path, fmt).unwrap();
            let back: ResultTable<Fig2Row> = read_results(&path, fmt).unwrap();
            assert_eq!(back, table);
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let table: ResultTable<Fig3Row> = ResultTable::new("fig3", &small(), vec![]);
        let path = dir.path().join("e.csv");
        emit_results(&table, &path, OutputFormat::Csv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, vec!["policy_s,t,se_achieved,se_max"]);
        let back: ResultTable<Fig3Row> = read_results(&path, OutputFormat::Csv).unwrap();
        assert!(back.rows.is_empty());
    }

    #[test]
    fn io_errors_carry_path() {
        let table: ResultTable<Fig3Row> = ResultTable::new("fig3", &small(), vec![]);
        let path = Path::new("/nonexistent-dir/out.csv");
        let err = emit_results(&table, path, OutputFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/out.csv"), "{err}");
        let err = read_results::<Fig3Row>(path, OutputFormat::Json).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/out.csv"), "{err}");
    }

    #[test]
    fn estimate_once_is_reproducible() {
        let cfg = small();
        let a = run_estimate_once(&cfg, 5).unwrap();
        assert_eq!(a, run_estimate_once(&cfg, 5).unwrap());
        assert!(a.se_achieved <= a.se_max);
        assert!(run_estimate_once(&cfg, 1).is_err());
    }
}
