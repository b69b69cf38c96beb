//! Plain-text run configuration. A config is a sequence of `key=value`
//! lines with `#` comments; later keys override earlier ones and unknown
//! keys are rejected. Unset keys fall back to desk-scale defaults derived
//! from the chosen benchmark, and `render` always emits the fully resolved
//! values, so a rendered config reproduces the run exactly.

use std::path::Path;

use crate::conservation::ConservationLaw;
use crate::models::{Activation, Arch, CorrectionHead, Generator, ModelConfig};
use crate::pdegen::{Pde, PdeSpec};
use crate::training::{Method, TrainConfig};
use crate::{Error, Result};

/// Conserved-quantity choice, named after the physical invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawChoice {
    /// Linear law: the mean/total of the state is conserved.
    Mass,
    /// Quadratic law: the squared L2 norm of the state is conserved.
    Norm,
}

impl LawChoice {
    pub fn name(self) -> &'static str {
        match self {
            LawChoice::Mass => "mass",
            LawChoice::Norm => "norm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mass" => Ok(LawChoice::Mass),
            "norm" => Ok(LawChoice::Norm),
            _ => Err(Error::Config(format!(
                "unknown law `{s}` (expected mass or norm)"
            ))),
        }
    }
}

/// Training method selector; the penalty weight lives in a separate key so
/// `method` and `lambda` can be set in either order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Raw,
    Adaptive,
    Penalty,
    Projection,
    AblationAppendMlp,
}

impl MethodChoice {
    pub fn name(self) -> &'static str {
        match self {
            MethodChoice::Raw => "raw",
            MethodChoice::Adaptive => "adaptive",
            MethodChoice::Penalty => "penalty",
            MethodChoice::Projection => "projection",
            MethodChoice::AblationAppendMlp => "ablation-append-mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(MethodChoice::Raw),
            "adaptive" => Ok(MethodChoice::Adaptive),
            "penalty" => Ok(MethodChoice::Penalty),
            "projection" => Ok(MethodChoice::Projection),
            "ablation-append-mlp" => Ok(MethodChoice::AblationAppendMlp),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (expected raw, adaptive, penalty, projection, or ablation-append-mlp)"
            ))),
        }
    }
}

fn parse_pde(s: &str) -> Result<Pde> {
    match s {
        "te2d" => Ok(Pde::Te2d),
        "cac2d" => Ok(Pde::Cac2d),
        "lse1d" => Ok(Pde::Lse1d),
        "nls1d" => Ok(Pde::Nls1d),
        _ => Err(Error::Config(format!(
            "unknown pde `{s}` (expected te2d, cac2d, lse1d, or nls1d)"
        ))),
    }
}

fn arch_name(a: Arch) -> &'static str {
    match a {
        Arch::Fno1d => "fno1d",
        Arch::Cnn2d => "cnn2d",
    }
}

fn parse_arch(s: &str) -> Result<Arch> {
    match s {
        "fno1d" => Ok(Arch::Fno1d),
        "cnn2d" => Ok(Arch::Cnn2d),
        _ => Err(Error::Config(format!(
            "unknown arch `{s}` (expected fno1d or cnn2d)"
        ))),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Tanh => "tanh",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "gelu" => Ok(Activation::Gelu),
        "tanh" => Ok(Activation::Tanh),
        _ => Err(Error::Config(format!(
            "unknown activation `{s}` (expected gelu or tanh)"
        ))),
    }
}

fn generator_name(g: Generator) -> &'static str {
    match g {
        Generator::SoftmaxVector => "softmax-vector",
        Generator::PointwiseMlp => "pointwise-mlp",
        Generator::ConvK3 => "conv-k3",
    }
}

fn parse_generator(s: &str) -> Result<Generator> {
    match s {
        "softmax-vector" => Ok(Generator::SoftmaxVector),
        "pointwise-mlp" => Ok(Generator::PointwiseMlp),
        "conv-k3" => Ok(Generator::ConvK3),
        _ => Err(Error::Config(format!(
            "unknown generator `{s}` (expected softmax-vector, pointwise-mlp, or conv-k3)"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for key `{key}` (expected true or false)"
        ))),
    }
}

/// Full description of one run: benchmark, data sizes, model, training
/// method, and paths. Optional fields resolve to desk defaults for the
/// chosen benchmark on access.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub pde: Pde,
    pub law: LawChoice,
    pub res: Option<usize>,
    pub dt_solver: Option<f64>,
    pub horizon: Option<f64>,
    /// Use a 10x finer solver step than the desk default.
    pub paper_dt: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,

    pub arch: Option<Arch>,
    pub width: Option<usize>,
    pub layers: Option<usize>,
    pub modes: Option<usize>,
    pub activation: Option<Activation>,
    pub model_seed: u64,
    pub generator: Option<Generator>,

    pub method: MethodChoice,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: Option<f64>,
    pub train_seed: u64,

    /// Rollout length for evaluation.
    pub steps: usize,
    pub data: Option<String>,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pde: Pde::Lse1d,
            law: LawChoice::Norm,
            res: None,
            dt_solver: None,
            horizon: None,
            paper_dt: false,
            n_train: 512,
            n_test: 100,
            seed: 0,
            arch: None,
            width: None,
            layers: None,
            modes: None,
            activation: None,
            model_seed: 0,
            generator: None,
            method: MethodChoice::Adaptive,
            lambda: 0.0,
            epochs: 100,
            batch_size: 16,
            lr0: None,
            train_seed: 0,
            steps: 10,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Apply one `key=value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "pde" => self.pde = parse_pde(value)?,
            "law" => self.law = LawChoice::parse(value)?,
            "res" => self.res = Some(parse_num(key, value)?),
            "dt_solver" => self.dt_solver = Some(parse_num(key, value)?),
            "horizon" => self.horizon = Some(parse_num(key, value)?),
            "paper_dt" => self.paper_dt = parse_bool(key, value)?,
            "n_train" => self.n_train = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "arch" => self.arch = Some(parse_arch(value)?),
            "width" => self.width = Some(parse_num(key, value)?),
            "layers" => self.layers = Some(parse_num(key, value)?),
            "modes" => self.modes = Some(parse_num(key, value)?),
            "activation" => self.activation = Some(parse_activation(value)?),
            "model_seed" => self.model_seed = parse_num(key, value)?,
            "generator" => self.generator = Some(parse_generator(value)?),
            "method" => self.method = MethodChoice::parse(value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr0" => self.lr0 = Some(parse_num(key, value)?),
            "train_seed" => self.train_seed = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "data" => self.data = Some(value.to_string()),
            "out" => self.out = Some(value.to_string()),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config body; later keys override earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    fn desk(&self) -> PdeSpec {
        PdeSpec::desk(self.pde, self.seed)
    }

    pub fn resolution(&self) -> usize {
        self.res.unwrap_or_else(|| self.desk().resolution)
    }

    pub fn dt(&self) -> f64 {
        match self.dt_solver {
            Some(dt) => dt,
            None => {
                let base = self.desk().dt_solver;
                if self.paper_dt {
                    base / 10.0
                } else {
                    base
                }
            }
        }
    }

    pub fn horizon_len(&self) -> f64 {
        self.horizon.unwrap_or_else(|| self.desk().horizon)
    }

    pub fn pde_spec(&self) -> PdeSpec {
        let mut spec = self.desk();
        spec.resolution = self.resolution();
        spec.dt_solver = self.dt();
        spec.horizon = self.horizon_len();
        spec
    }

    /// State channels of the benchmark (complex fields use two).
    pub fn state_channels(&self) -> usize {
        match self.pde {
            Pde::Te2d | Pde::Cac2d => 1,
            Pde::Lse1d | Pde::Nls1d => 2,
        }
    }

    fn grid_rank(&self) -> usize {
        match self.pde {
            Pde::Te2d | Pde::Cac2d => 2,
            Pde::Lse1d | Pde::Nls1d => 1,
        }
    }

    pub fn resolved_arch(&self) -> Arch {
        self.arch.unwrap_or(match self.pde {
            Pde::Te2d | Pde::Cac2d => Arch::Cnn2d,
            Pde::Lse1d | Pde::Nls1d => Arch::Fno1d,
        })
    }

    pub fn resolved_generator(&self) -> Generator {
        // The append-MLP ablation always runs the pointwise chain, so it
        // needs those parameters no matter what the suite default is.
        if self.method == MethodChoice::AblationAppendMlp {
            return Generator::PointwiseMlp;
        }
        self.generator.unwrap_or(match self.resolved_arch() {
            Arch::Fno1d => Generator::PointwiseMlp,
            Arch::Cnn2d => Generator::ConvK3,
        })
    }

    pub fn resolved_lr0(&self) -> f64 {
        self.lr0.unwrap_or(match self.resolved_arch() {
            Arch::Fno1d => 1.5e-3,
            Arch::Cnn2d => 1e-4,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let state = self.state_channels();
        let in_channels = state + self.grid_rank();
        let mut cfg = match self.resolved_arch() {
            Arch::Fno1d => ModelConfig::fno1d(in_channels, state, self.model_seed),
            Arch::Cnn2d => ModelConfig::cnn2d(in_channels, state, self.model_seed),
        };
        if let Some(w) = self.width {
            cfg.hidden_width = w;
        }
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        if let Some(m) = self.modes {
            cfg.modes = m;
        }
        if let Some(a) = self.activation {
            cfg.activation = a;
        }
        cfg
    }

    /// Conservation law over all state channels; rejects invalid
    /// pde/law pairings with the list of valid ones.
    pub fn conservation_law(&self) -> Result<ConservationLaw> {
        let valid = match self.pde {
            Pde::Te2d => matches!(self.law, LawChoice::Mass | LawChoice::Norm),
            Pde::Cac2d => self.law == LawChoice::Mass,
            Pde::Lse1d | Pde::Nls1d => self.law == LawChoice::Norm,
        };
        if !valid {
            return Err(Error::Config(format!(
                "law `{}` is not defined for pde `{}`; valid pairs: te2d:mass, te2d:norm, cac2d:mass, lse1d:norm, nls1d:norm",
                self.law.name(),
                self.pde.name()
            )));
        }
        let channels: Vec<usize> = (0..self.state_channels()).collect();
        Ok(match self.law {
            LawChoice::Mass => ConservationLaw::linear(channels),
            LawChoice::Norm => ConservationLaw::quadratic(channels, 1e-12),
        })
    }

    pub fn head(&self) -> Result<CorrectionHead> {
        Ok(CorrectionHead {
            generator: self.resolved_generator(),
            law: self.conservation_law()?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let method = match self.method {
            MethodChoice::Raw => Method::Raw,
            MethodChoice::Adaptive => Method::Adaptive,
            MethodChoice::Penalty => Method::Penalty(self.lambda),
            MethodChoice::Projection => Method::Projection,
            MethodChoice::AblationAppendMlp => Method::AblationAppendMlp,
        };
        TrainConfig {
            method,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.resolved_lr0(),
            seed: self.train_seed,
        }
    }

    /// Fully resolved `key=value` body; parsing it back reproduces this
    /// configuration exactly.
    pub fn render(&self) -> String {
        let cfg = self.model_config();
        let mut s = String::new();
        s.push_str("# resolved run configuration\n");
        s.push_str(&format!("pde={}\n", self.pde.name()));
        s.push_str(&format!("law={}\n", self.law.name()));
        s.push_str(&format!("res={}\n", self.resolution()));
        s.push_str(&format!("dt_solver={}\n", self.dt()));
        s.push_str(&format!("horizon={}\n", self.horizon_len()));
        s.push_str(&format!("paper_dt={}\n", self.paper_dt));
        s.push_str(&format!("n_train={}\n", self.n_train));
        s.push_str(&format!("n_test={}\n", self.n_test));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("arch={}\n", arch_name(self.resolved_arch())));
        s.push_str(&format!("width={}\n", cfg.hidden_width));
        s.push_str(&format!("layers={}\n", cfg.layers));
        s.push_str(&format!("modes={}\n", cfg.modes));
        s.push_str(&format!("activation={}\n", activation_name(cfg.activation)));
        s.push_str(&format!("model_seed={}\n", self.model_seed));
        s.push_str(&format!(
            "generator={}\n",
            generator_name(self.resolved_generator())
        ));
        s.push_str(&format!("method={}\n", self.method.name()));
        s.push_str(&format!("lambda={}\n", self.lambda));
        s.push_str(&format!("epochs={}\n", self.epochs));
        s.push_str(&format!("batch_size={}\n", self.batch_size));
        s.push_str(&format!("lr0={}\n", self.resolved_lr0()));
        s.push_str(&format!("train_seed={}\n", self.train_seed));
        s.push_str(&format!("steps={}\n", self.steps));
        if let Some(d) = &self.data {
            s.push_str(&format!("data={d}\n"));
        }
        if let Some(o) = &self.out {
            s.push_str(&format!("out={o}\n"));
        }
        s
    }
}
