//! The run configuration: `key=value` lines under namespaced keys, merged
//! from an optional file and command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mamr::generate::BeamConfig;
use mamr::model::{ModelConfig, Preset};
use mamr::pretrain::NoiseSpec;
use mamr::subword::TrainOptions;
use mamr::train::TrainConfig;

/// Model fields that may be overridden; vocabulary sizes come from the BPE
/// models and dropout from `train.*`.
const MODEL_KEYS: &[&str] = &[
    "d_model",
    "n_heads",
    "ffn_dim",
    "enc_layers",
    "dec_layers",
    "max_positions",
    "depth_buckets",
    "subgraph_buckets",
    "d_word",
    "d_pos",
    "d_depth",
    "d_subgraph",
];

const TRAIN_KEYS: &[&str] = &[
    "base_lr",
    "warmup_steps",
    "max_updates",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "label_smoothing",
    "dropout",
    "layerdrop",
    "checkpoint_every",
    "max_tokens",
];

const BEAM_KEYS: &[&str] = &["size", "alpha", "max_len", "min_len"];
const NOISE_KEYS: &[&str] = &["mask_prob", "span_lambda", "span_mass", "shuffle"];
const BPE_KEYS: &[&str] = &["merges", "protect_roles"];
const EVAL_KEYS: &[&str] = &["n_high", "n_low", "min_words", "token_level"];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub n_high: usize,
    pub n_low: usize,
    pub min_words: usize,
    pub token_level: bool,
}

/// Explicitly set values only; everything else comes from the defaults of
/// the typed configs when they are resolved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    let Some((ns, field)) = key.split_once('.') else {
        return false;
    };
    match ns {
        "model" => field == "preset" || MODEL_KEYS.contains(&field),
        "train" => TRAIN_KEYS.contains(&field),
        "beam" => BEAM_KEYS.contains(&field),
        "noise" => NOISE_KEYS.contains(&field),
        "bpe" => BPE_KEYS.contains(&field),
        "eval" => EVAL_KEYS.contains(&field),
        _ => false,
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value `{value}` for `{key}`"))
}

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut c = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got `{line}`", i + 1))?;
            c.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Sets one key, rejecting unknown keys and values the typed config
    /// would not accept.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if !known(key) {
            return Err(format!("unknown config key `{key}`"));
        }
        let previous = self.values.insert(key.to_string(), value.to_string());
        let check = self.check();
        if check.is_err() {
            match previous {
                Some(p) => self.values.insert(key.to_string(), p),
                None => self.values.remove(key),
            };
        }
        check
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), String> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| format!("expected key=value, got `{o}`"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    fn check(&self) -> Result<(), String> {
        self.model(1, 1)?;
        self.train(0, false)?;
        self.beam()?;
        self.noise(0)?;
        self.bpe()?;
        self.eval()?;
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn explicit<'a>(&'a self, ns: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.values.iter().filter_map(move |(k, v)| {
            let (n, field) = k.split_once('.')?;
            (n == ns).then_some((field, v.as_str()))
        })
    }

    pub fn preset(&self) -> Result<Preset, String> {
        self.get("model.preset").map_or(Ok(Preset::Desk), str::parse)
    }

    pub fn model(&self, enc_vocab: usize, dec_vocab: usize) -> Result<ModelConfig, String> {
        let mut c = ModelConfig::preset(self.preset()?, enc_vocab, dec_vocab);
        for (k, v) in self.explicit("model").filter(|(k, _)| *k != "preset") {
            c.set(k, v).map_err(|e| e.to_string())?;
        }
        Ok(c)
    }

    /// Training settings on top of the fresh-start or fine-tuning defaults.
    pub fn train(&self, seed: u64, pretrained: bool) -> Result<TrainConfig, String> {
        let mut c = if pretrained {
            TrainConfig::pretrained_init(seed)
        } else {
            TrainConfig::fresh(seed)
        };
        for (k, v) in self.explicit("train") {
            c.set(k, v).map_err(|e| e.to_string())?;
        }
        Ok(c)
    }

    pub fn beam(&self) -> Result<BeamConfig, String> {
        let mut c = BeamConfig::default();
        for (k, v) in self.explicit("beam") {
            let key = format!("beam.{k}");
            match k {
                "size" => c.beam_size = parse(&key, v)?,
                "alpha" => c.length_penalty_alpha = parse(&key, v)?,
                "max_len" => c.max_len = parse(&key, v)?,
                _ => c.min_len = parse(&key, v)?,
            }
        }
        Ok(c)
    }

    pub fn noise(&self, seed: u64) -> Result<NoiseSpec, String> {
        let mut c = NoiseSpec {
            seed,
            ..NoiseSpec::default()
        };
        for (k, v) in self.explicit("noise") {
            let key = format!("noise.{k}");
            match k {
                "mask_prob" => c.mask_prob = parse(&key, v)?,
                "span_lambda" => c.span_lambda = parse(&key, v)?,
                "span_mass" => c.span_mass = parse(&key, v)?,
                _ => c.shuffle = parse(&key, v)?,
            }
        }
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn bpe(&self) -> Result<TrainOptions, String> {
        let mut c = TrainOptions {
            num_merges: 1000,
            protect_roles: false,
        };
        for (k, v) in self.explicit("bpe") {
            let key = format!("bpe.{k}");
            match k {
                "merges" => c.num_merges = parse(&key, v)?,
                _ => c.protect_roles = parse(&key, v)?,
            }
        }
        Ok(c)
    }

    pub fn eval(&self) -> Result<EvalSettings, String> {
        let mut c = EvalSettings {
            n_high: 25,
            n_low: 25,
            min_words: 5,
            token_level: false,
        };
        for (k, v) in self.explicit("eval") {
            let key = format!("eval.{k}");
            match k {
                "n_high" => c.n_high = parse(&key, v)?,
                "n_low" => c.n_low = parse(&key, v)?,
                "min_words" => c.min_words = parse(&key, v)?,
                _ => c.token_level = parse(&key, v)?,
            }
        }
        Ok(c)
    }

    /// Every key with its effective value.  The seed is written as a comment
    /// so the file can be fed back with `--config`.
    pub fn effective(&self, seed: Option<u64>, pretrained: bool) -> Result<String, String> {
        let mut out = String::new();
        if let Some(s) = seed {
            let _ = writeln!(out, "# seed={s}");
        }
        let preset = self.get("model.preset").unwrap_or("desk");
        let _ = writeln!(out, "model.preset={preset}");
        let model = self.model(1, 1)?.to_map();
        for k in MODEL_KEYS {
            let _ = writeln!(out, "model.{k}={}", model[k]);
        }
        let train = self.train(seed.unwrap_or(0), pretrained)?.to_map();
        for k in TRAIN_KEYS {
            let _ = writeln!(out, "train.{k}={}", train[k]);
        }
        let b = self.beam()?;
        let _ = writeln!(out, "beam.size={}", b.beam_size);
        let _ = writeln!(out, "beam.alpha={}", b.length_penalty_alpha);
        let _ = writeln!(out, "beam.max_len={}", b.max_len);
        let _ = writeln!(out, "beam.min_len={}", b.min_len);
        let n = self.noise(seed.unwrap_or(0))?;
        let _ = writeln!(out, "noise.mask_prob={}", n.mask_prob);
        let _ = writeln!(out, "noise.span_lambda={}", n.span_lambda);
        let _ = writeln!(out, "noise.span_mass={}", n.span_mass);
        let _ = writeln!(out, "noise.shuffle={}", n.shuffle);
        let p = self.bpe()?;
        let _ = writeln!(out, "bpe.merges={}", p.num_merges);
        let _ = writeln!(out, "bpe.protect_roles={}", p.protect_roles);
        let e = self.eval()?;
        let _ = writeln!(out, "eval.n_high={}", e.n_high);
        let _ = writeln!(out, "eval.n_low={}", e.n_low);
        let _ = writeln!(out, "eval.min_words={}", e.min_words);
        let _ = writeln!(out, "eval.token_level={}", e.token_level);
        Ok(out)
    }
}
