//! Run configuration: a TOML tree covering data, model sizes, schedules and
//! loss weights.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DitConfig, RestorerConfig, VaeConfig};
use crate::error::{config_err, Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::LossWeights;
use crate::nn::AdamWConfig;
use crate::stdc::StdcConfig;
use crate::video::{DatasetConfig, DegradeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// First iteration at which the adversarial term is active (Stage 1 only).
    pub adv_start: usize,
    pub log_every: usize,
    /// Overrides the run seed for this stage's initialisation and batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { iterations: 1000, lr: 1e-4, batch_size: 2, adv_start: 0, log_every: 50, seed: None }
    }
}

impl Schedule {
    fn new(iterations: usize, lr: f64) -> Self {
        Self { iterations, lr, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub stdc: StdcConfig,
    pub restorer: RestorerConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub discriminator_width: usize,
    pub feature_seed: u64,
    pub stage0: Schedule,
    pub stage1: Schedule,
    pub stage1p: Schedule,
    pub stage2: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            stdc: StdcConfig::default(),
            restorer: RestorerConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            discriminator_width: 16,
            feature_seed: 7,
            stage0: Schedule::new(2000, 1e-3),
            stage1: Schedule::new(5000, 8e-5),
            stage1p: Schedule::new(2000, 8e-5),
            stage2: Schedule::new(3000, 3e-5),
        }
    }
}

/// Config sections that a checkpoint depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    /// Everything.
    Run,
    /// Data, seed and prior-extractor settings.
    Stdc,
    /// Data, seed and latent autoencoder settings.
    Vae,
}

impl Section {
    pub fn key(self) -> &'static str {
        match self {
            Section::Run => "run",
            Section::Stdc => "stdc",
            Section::Vae => "vae",
        }
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so the text is canonical.
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

impl RunConfig {
    /// A preset small enough for single-core test runs.
    pub fn toy() -> Self {
        let stdc = StdcConfig {
            codebook_size: 64,
            code_dim: 16,
            spatial_stride: 4,
            temporal_stride: 1,
            encoder_width: 32,
            temporal_heads: 2,
            transformer_layers: 2,
            transformer_heads: 2,
            transformer_width: 32,
            max_grid: [4, 8, 8],
        };
        let restorer = RestorerConfig {
            vae: VaeConfig { latent_dim: 8, stride: 4, width: 32 },
            dit: DitConfig { layers: 2, width: 32, heads: 2, max_grid: [4, 8, 8], embed_kernel: 3 },
            fusion: FusionConfig { mlp_hidden: 32, attn_width: 32, ..Default::default() },
            t_star: 1.0,
        };
        let dataset = DatasetConfig {
            frames: 4,
            height: 32,
            width: 32,
            train_clips: 48,
            test_clips: 4,
            seed: 0,
            max_speed: 1.0,
            max_angular_rate: 0.03,
            max_scale_rate: 0.015,
            // noise-dominated: detail destroyed by heavy blur at 32x32 is not
            // recoverable on unseen faces
            degrade: DegradeConfig {
                blur_sigma_range: [0.8, 1.5],
                noise_sigma_range: [0.06, 0.10],
                ..DegradeConfig::default()
            },
        };
        Self {
            output_dir: PathBuf::from("runs/toy"),
            dataset,
            stdc,
            restorer,
            discriminator_width: 8,
            stage0: Schedule { iterations: 1500, lr: 2e-3, batch_size: 4, ..Default::default() },
            stage1: Schedule { iterations: 1500, lr: 2e-3, batch_size: 4, adv_start: 750, ..Default::default() },
            stage1p: Schedule { iterations: 600, lr: 1e-3, batch_size: 4, ..Default::default() },
            stage2: Schedule { iterations: 800, lr: 2e-3, batch_size: 4, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.frames < 3 {
            return Err(config_err!("dataset.frames must be at least 3, got {}", d.frames));
        }
        if d.height < 16 || d.width < 16 {
            return Err(config_err!("dataset frames must be at least 16x16"));
        }
        if d.train_clips == 0 {
            return Err(config_err!("dataset.train_clips must be positive"));
        }
        d.degrade.validate(d.height, d.width)?;
        self.stdc.validate()?;
        self.restorer.validate(&self.stdc)?;
        let (gt, gh, gw) = self.stdc.grid_dims(d.frames, d.height, d.width)?;
        let [mt, mh, mw] = self.stdc.max_grid;
        if gt > mt || gh > mh || gw > mw {
            return Err(config_err!("prior grid {gt}x{gh}x{gw} exceeds stdc.max_grid {:?}", self.stdc.max_grid));
        }
        let s = self.restorer.vae.stride;
        let [dt, dh, dw] = self.restorer.dit.max_grid;
        if d.height % s != 0 || d.width % s != 0 || d.frames > dt || d.height / s > dh || d.width / s > dw {
            return Err(config_err!("latent grid of a {}x{}x{} clip does not fit restorer.dit.max_grid", d.frames, d.height, d.width));
        }
        for (name, sch) in self.schedules() {
            if sch.iterations == 0 {
                return Err(config_err!("{name}.iterations must be positive"));
            }
            if !(sch.lr > 0.0 && sch.lr.is_finite()) {
                return Err(config_err!("{name}.lr must be positive"));
            }
            if sch.batch_size == 0 {
                return Err(config_err!("{name}.batch_size must be positive"));
            }
        }
        let w = &self.weights;
        for (name, v) in [("beta", w.beta), ("lambda_adv", w.lambda_adv), ("lambda_ce", w.lambda_ce), ("lambda_temp", w.lambda_temp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("weights.{name} must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn stage_seed(&self, sch: &Schedule) -> u64 {
        sch.seed.unwrap_or(self.seed)
    }

    pub fn schedules(&self) -> [(&'static str, &Schedule); 4] {
        [("stage0", &self.stage0), ("stage1", &self.stage1), ("stage1p", &self.stage1p), ("stage2", &self.stage2)]
    }

    /// SHA-256 of the canonical JSON form of a config section.
    pub fn hash(&self, section: Section) -> String {
        let full = serde_json::to_value(self).expect("config serialises");
        let pick = |keys: &[&str]| {
            let mut m = serde_json::Map::new();
            for k in keys {
                m.insert(k.to_string(), full[*k].clone());
            }
            serde_json::Value::Object(m)
        };
        match section {
            Section::Run => {
                let mut v = full.clone();
                // where results are written does not change them
                v.as_object_mut().expect("object").remove("output_dir");
                hash_json(&v)
            }
            Section::Stdc => hash_json(&pick(&["seed", "dataset", "stdc", "stage1", "stage1p", "weights", "optimizer", "discriminator_width", "feature_seed"])),
            Section::Vae => hash_json(&pick(&["seed", "dataset", "stage0", "optimizer"]).as_object().map(|m| {
                let mut m = m.clone();
                m.insert("vae".into(), serde_json::to_value(&self.restorer.vae).expect("serialises"));
                serde_json::Value::Object(m)
            }).expect("object")),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.output_dir.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    /// Stage-2 checkpoints are keyed by the run hash so ablation variants
    /// sharing one output directory do not overwrite each other.
    pub fn stage2_checkpoint_path(&self) -> PathBuf {
        let hash = self.hash(Section::Run);
        self.checkpoint_path(&format!("stage2-{}", &hash[..12]))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            cfg.validate().unwrap();
            let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        let d = RunConfig::default();
        assert_eq!((d.weights.beta, d.weights.lambda_adv, d.weights.lambda_ce, d.weights.lambda_temp), (0.25, 0.8, 0.5, 0.1));
        assert_eq!((d.stage1.lr, d.stage1p.lr, d.stage2.lr), (8e-5, 8e-5, 3e-5));
        assert_eq!((d.stage0.iterations, d.stage1.iterations, d.stage1p.iterations, d.stage2.iterations), (2000, 5000, 2000, 3000));
    }

    #[test]
    fn hash_ignores_field_order() {
        let a = "seed = 3\n[weights]\nbeta = 0.5\nlambda_temp = 0.2\n[stage2]\nlr = 0.001\niterations = 10\n";
        let b = "[stage2]\niterations = 10\nlr = 0.001\n[weights]\nlambda_temp = 0.2\nbeta = 0.5\n\n";
        let (ca, cb) = (RunConfig::from_toml_str(a).unwrap(), RunConfig::from_toml_str(&format!("seed = 3\n{b}")).unwrap());
        assert_eq!(ca.hash(Section::Run), cb.hash(Section::Run));
        let mut cc = ca.clone();
        cc.weights.beta = 0.25;
        assert_ne!(ca.hash(Section::Run), cc.hash(Section::Run));
        assert_eq!(ca.hash(Section::Vae), cc.hash(Section::Vae));
        let mut moved = ca.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(ca.hash(Section::Run), moved.hash(Section::Run));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let cases = [
            "[stage1]\nlr = 0.0\n",
            "[stage2]\niterations = 0\n",
            "[weights]\nbeta = -1.0\n",
            "[dataset]\nframes = 2\n",
            "[restorer]\nt_star = 1.5\n",
            "unknown_key = 1\n",
        ];
        for c in cases {
            assert!(matches!(RunConfig::from_toml_str(c), Err(Error::Config(_))), "{c}");
        }
    }
}
