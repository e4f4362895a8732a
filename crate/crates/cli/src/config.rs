//! Flat key=value run configuration: documented defaults, aggregated
//! validation, and a diffable resolved-config echo.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use sessrec_core::data::{DataConfig, SyntheticConfig};
use sessrec_core::loss::LossConfig;
use sessrec_core::model::{ModelConfig, MoeConfig, Toggles};
use sessrec_core::retrieval::{EvalConfig, GroundTruth, IndexConfig, IndexMode};
use sessrec_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,

    pub data_source: String,
    pub data_events: String,
    pub data_num_users: usize,
    pub data_num_items: usize,
    pub data_num_days: usize,
    pub data_sessions_per_user_day: f64,
    pub data_items_per_session_min: usize,
    pub data_items_per_session_max: usize,
    pub data_max_sessions: usize,
    pub data_session_gap_secs: i64,
    pub data_time_buckets: usize,

    pub model_dim: usize,
    pub model_num_blocks: usize,
    pub model_num_heads: usize,
    pub model_max_seq_len: usize,
    pub model_ff_hidden: usize,
    pub model_msp_extra_depth: usize,
    pub model_temperature: f64,
    pub model_tsn: bool,
    pub model_msp: bool,
    pub model_moe: bool,
    pub model_sw_rope: bool,
    pub model_moe_num_routed: usize,
    pub model_moe_num_shared: usize,
    pub model_moe_top_k: usize,
    pub model_moe_expert_hidden: usize,
    pub model_moe_balance_step: f64,

    pub loss_num_negatives: usize,
    pub loss_beta: f64,
    pub loss_lambda_msp: f64,

    pub train_steps: usize,
    pub train_batch_size: usize,
    pub train_clip_norm: f64,
    pub train_lr: f64,
    pub train_steps_per_phase: usize,

    pub pit_num_buckets: usize,
    pub pit_window_days: i64,
    /// -1 means "first day present in the data".
    pub pit_start_day: i64,
    /// -1 means "last day present in the data".
    pub pit_end_day: i64,

    pub retrieval_mode: String,
    pub retrieval_num_clusters: usize,
    pub retrieval_num_probes: usize,
    pub retrieval_min_exposures: u64,
    pub retrieval_k: usize,
    pub retrieval_ks: Vec<usize>,
    pub retrieval_ground_truth: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            output_dir: "out".into(),
            data_source: "synthetic".into(),
            data_events: "events.jsonl".into(),
            data_num_users: 200,
            data_num_items: 2000,
            data_num_days: 20,
            data_sessions_per_user_day: 1.0,
            data_items_per_session_min: 4,
            data_items_per_session_max: 8,
            data_max_sessions: 50,
            data_session_gap_secs: 1800,
            data_time_buckets: 24,
            model_dim: 64,
            model_num_blocks: 2,
            model_num_heads: 2,
            model_max_seq_len: 256,
            model_ff_hidden: 256,
            model_msp_extra_depth: 1,
            model_temperature: 1.0,
            model_tsn: true,
            model_msp: true,
            model_moe: true,
            model_sw_rope: true,
            model_moe_num_routed: 4,
            model_moe_num_shared: 1,
            model_moe_top_k: 2,
            model_moe_expert_hidden: 64,
            model_moe_balance_step: 0.001,
            loss_num_negatives: 32,
            loss_beta: 0.75,
            loss_lambda_msp: 0.3,
            train_steps: 200,
            train_batch_size: 32,
            train_clip_norm: 1.0,
            train_lr: 1e-3,
            train_steps_per_phase: 20,
            pit_num_buckets: 10,
            pit_window_days: 10,
            pit_start_day: -1,
            pit_end_day: -1,
            retrieval_mode: "exact".into(),
            retrieval_num_clusters: 64,
            retrieval_num_probes: 8,
            retrieval_min_exposures: 1,
            retrieval_k: 100,
            retrieval_ks: vec![20, 100, 500, 1000, 2000, 4000],
            retrieval_ground_truth: "clicked".into(),
        }
    }
}

/// Every config problem found, reported in one pass.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "config errors:")?;
        for e in &self.0 {
            writeln!(f, "  - {}", e)?;
        }
        Ok(())
    }
}

macro_rules! setters {
    ($cfg:ident, $errs:ident, $key:ident, $val:ident; $($name:literal => $field:ident : $ty:ty),+ $(,)?) => {
        match $key {
            $($name => match $val.parse::<$ty>() {
                Ok(v) => $cfg.$field = v,
                Err(_) => $errs.push(format!("key {}: cannot parse {:?}", $key, $val)),
            },)+
            "retrieval.ks" => match $val
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
            {
                Ok(v) if !v.is_empty() => $cfg.retrieval_ks = v,
                _ => $errs.push(format!("key retrieval.ks: cannot parse {:?}", $val)),
            },
            _ => $errs.push(format!("unknown key {:?}", $key)),
        }
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigErrors> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, val)) = line.split_once('=') else {
                errs.push(format!("line {}: expected key=value, got {:?}", lineno + 1, raw));
                continue;
            };
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                errs.push(format!("key {:?} set more than once", key));
            }
            setters!(cfg, errs, key, val;
                "seed" => seed: u64,
                "output_dir" => output_dir: String,
                "data.source" => data_source: String,
                "data.events" => data_events: String,
                "data.num_users" => data_num_users: usize,
                "data.num_items" => data_num_items: usize,
                "data.num_days" => data_num_days: usize,
                "data.sessions_per_user_day" => data_sessions_per_user_day: f64,
                "data.items_per_session_min" => data_items_per_session_min: usize,
                "data.items_per_session_max" => data_items_per_session_max: usize,
                "data.max_sessions" => data_max_sessions: usize,
                "data.session_gap_secs" => data_session_gap_secs: i64,
                "data.time_buckets" => data_time_buckets: usize,
                "model.dim" => model_dim: usize,
                "model.num_blocks" => model_num_blocks: usize,
                "model.num_heads" => model_num_heads: usize,
                "model.max_seq_len" => model_max_seq_len: usize,
                "model.ff_hidden" => model_ff_hidden: usize,
                "model.msp_extra_depth" => model_msp_extra_depth: usize,
                "model.temperature" => model_temperature: f64,
                "model.tsn" => model_tsn: bool,
                "model.msp" => model_msp: bool,
                "model.moe" => model_moe: bool,
                "model.sw_rope" => model_sw_rope: bool,
                "model.moe.num_routed" => model_moe_num_routed: usize,
                "model.moe.num_shared" => model_moe_num_shared: usize,
                "model.moe.top_k" => model_moe_top_k: usize,
                "model.moe.expert_hidden" => model_moe_expert_hidden: usize,
                "model.moe.balance_step" => model_moe_balance_step: f64,
                "loss.num_negatives" => loss_num_negatives: usize,
                "loss.beta" => loss_beta: f64,
                "loss.lambda_msp" => loss_lambda_msp: f64,
                "train.steps" => train_steps: usize,
                "train.batch_size" => train_batch_size: usize,
                "train.clip_norm" => train_clip_norm: f64,
                "train.lr" => train_lr: f64,
                "train.steps_per_phase" => train_steps_per_phase: usize,
                "pit.num_buckets" => pit_num_buckets: usize,
                "pit.window_days" => pit_window_days: i64,
                "pit.start_day" => pit_start_day: i64,
                "pit.end_day" => pit_end_day: i64,
                "retrieval.mode" => retrieval_mode: String,
                "retrieval.num_clusters" => retrieval_num_clusters: usize,
                "retrieval.num_probes" => retrieval_num_probes: usize,
                "retrieval.min_exposures" => retrieval_min_exposures: u64,
                "retrieval.k" => retrieval_k: usize,
                "retrieval.ground_truth" => retrieval_ground_truth: String,
            );
        }
        cfg.validate_into(&mut errs);
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(errs))
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {}", path.display(), e)]))?;
        Self::parse(&text)
    }

    fn validate_into(&self, errs: &mut Vec<String>) {
        if let Err(e) = self.model_config_unsized().validate() {
            errs.push(e.to_string());
        }
        if self.data_source != "synthetic" && self.data_source != "events" {
            errs.push(format!(
                "data.source must be synthetic or events, got {:?}",
                self.data_source
            ));
        }
        if self.retrieval_mode != "exact" && self.retrieval_mode != "approximate" {
            errs.push(format!(
                "retrieval.mode must be exact or approximate, got {:?}",
                self.retrieval_mode
            ));
        }
        if self.retrieval_ground_truth != "clicked" && self.retrieval_ground_truth != "exposed" {
            errs.push(format!(
                "retrieval.ground_truth must be clicked or exposed, got {:?}",
                self.retrieval_ground_truth
            ));
        }
        if self.data_items_per_session_min > self.data_items_per_session_max {
            errs.push("data.items_per_session_min exceeds max".into());
        }
        if self.pit_num_buckets == 0 || self.pit_window_days <= 0 {
            errs.push("pit.num_buckets and pit.window_days must be positive".into());
        }
        if self.train_lr <= 0.0 {
            errs.push("train.lr must be positive".into());
        }
    }

    /// Model config before vocabulary sizes are known.
    pub fn model_config_unsized(&self) -> ModelConfig {
        ModelConfig {
            dim: self.model_dim,
            num_blocks: self.model_num_blocks,
            num_heads: self.model_num_heads,
            max_seq_len: self.model_max_seq_len,
            ff_hidden: self.model_ff_hidden,
            msp_extra_depth: self.model_msp_extra_depth,
            temperature: self.model_temperature,
            toggles: Toggles {
                tsn: self.model_tsn,
                msp: self.model_msp,
                moe: self.model_moe,
                sw_rope: self.model_sw_rope,
            },
            moe: MoeConfig {
                num_routed: self.model_moe_num_routed,
                num_shared: self.model_moe_num_shared,
                top_k: self.model_moe_top_k,
                expert_hidden: self.model_moe_expert_hidden,
                balance_step: self.model_moe_balance_step,
            },
            ..ModelConfig::default()
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_users: self.data_num_users,
            num_items: self.data_num_items,
            num_days: self.data_num_days,
            sessions_per_user_day: self.data_sessions_per_user_day,
            items_per_session: (self.data_items_per_session_min, self.data_items_per_session_max),
            time_buckets: self.data_time_buckets,
            ..SyntheticConfig::default()
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            max_sessions: self.data_max_sessions,
            session_gap_secs: self.data_session_gap_secs,
            time_buckets: self.data_time_buckets,
            ..DataConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            num_negatives: self.loss_num_negatives,
            beta: self.loss_beta,
            lambda_msp: self.loss_lambda_msp,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train_batch_size,
            clip_norm: self.train_clip_norm,
            seed: self.seed,
            steps_per_phase: self.train_steps_per_phase,
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            mode: if self.retrieval_mode == "approximate" {
                IndexMode::Approximate
            } else {
                IndexMode::Exact
            },
            num_clusters: self.retrieval_num_clusters,
            num_probes: self.retrieval_num_probes,
            min_exposures: self.retrieval_min_exposures,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.retrieval_ks.clone(),
            ground_truth: if self.retrieval_ground_truth == "exposed" {
                GroundTruth::Exposed
            } else {
                GroundTruth::Clicked
            },
            index: self.index_config(),
        }
    }

    /// The resolved config: defaults merged with overrides, in a form that
    /// `parse` accepts back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ks = self
            .retrieval_ks
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = write!(
            s,
            "seed={}\noutput_dir={}\n\
             data.source={}\ndata.events={}\ndata.num_users={}\ndata.num_items={}\n\
             data.num_days={}\ndata.sessions_per_user_day={}\ndata.items_per_session_min={}\n\
             data.items_per_session_max={}\ndata.max_sessions={}\ndata.session_gap_secs={}\n\
             data.time_buckets={}\n\
             model.dim={}\nmodel.num_blocks={}\nmodel.num_heads={}\nmodel.max_seq_len={}\n\
             model.ff_hidden={}\nmodel.msp_extra_depth={}\nmodel.temperature={}\n\
             model.tsn={}\nmodel.msp={}\nmodel.moe={}\nmodel.sw_rope={}\n\
             model.moe.num_routed={}\nmodel.moe.num_shared={}\nmodel.moe.top_k={}\n\
             model.moe.expert_hidden={}\nmodel.moe.balance_step={}\n\
             loss.num_negatives={}\nloss.beta={}\nloss.lambda_msp={}\n\
             train.steps={}\ntrain.batch_size={}\ntrain.clip_norm={}\ntrain.lr={}\n\
             train.steps_per_phase={}\n\
             pit.num_buckets={}\npit.window_days={}\npit.start_day={}\npit.end_day={}\n\
             retrieval.mode={}\nretrieval.num_clusters={}\nretrieval.num_probes={}\n\
             retrieval.min_exposures={}\nretrieval.k={}\nretrieval.ks={}\n\
             retrieval.ground_truth={}\n",
            self.seed,
            self.output_dir,
            self.data_source,
            self.data_events,
            self.data_num_users,
            self.data_num_items,
            self.data_num_days,
            self.data_sessions_per_user_day,
            self.data_items_per_session_min,
            self.data_items_per_session_max,
            self.data_max_sessions,
            self.data_session_gap_secs,
            self.data_time_buckets,
            self.model_dim,
            self.model_num_blocks,
            self.model_num_heads,
            self.model_max_seq_len,
            self.model_ff_hidden,
            self.model_msp_extra_depth,
            self.model_temperature,
            self.model_tsn,
            self.model_msp,
            self.model_moe,
            self.model_sw_rope,
            self.model_moe_num_routed,
            self.model_moe_num_shared,
            self.model_moe_top_k,
            self.model_moe_expert_hidden,
            self.model_moe_balance_step,
            self.loss_num_negatives,
            self.loss_beta,
            self.loss_lambda_msp,
            self.train_steps,
            self.train_batch_size,
            self.train_clip_norm,
            self.train_lr,
            self.train_steps_per_phase,
            self.pit_num_buckets,
            self.pit_window_days,
            self.pit_start_day,
            self.pit_end_day,
            self.retrieval_mode,
            self.retrieval_num_clusters,
            self.retrieval_num_probes,
            self.retrieval_min_exposures,
            self.retrieval_k,
            ks,
            self.retrieval_ground_truth,
        );
        s
    }
}
