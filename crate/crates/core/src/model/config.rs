use std::fmt::Write as _;

use indexmap::IndexMap;

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub layerdrop: f64,
    pub max_positions: usize,
    /// Rows of the depth table (ids `0..depth_buckets`).
    pub depth_buckets: usize,
    pub subgraph_buckets: usize,
    pub enc_vocab: usize,
    pub dec_vocab: usize,
    pub d_word: usize,
    pub d_pos: usize,
    pub d_depth: usize,
    pub d_subgraph: usize,
}

/// Named size presets.  `Big` mirrors the published scale and is far beyond
/// what a CPU run can train; `Desk` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Small,
    Desk,
    Big,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Preset::Toy),
            "small" => Ok(Preset::Small),
            "desk" => Ok(Preset::Desk),
            "big" => Ok(Preset::Big),
            other => Err(format!("unknown preset `{other}` (toy, small, desk, big)")),
        }
    }
}

/// Fields an encoder checkpoint must agree on.
pub const ENCODER_FIELDS: &[&str] = &[
    "d_model",
    "n_heads",
    "ffn_dim",
    "enc_layers",
    "max_positions",
    "depth_buckets",
    "subgraph_buckets",
    "enc_vocab",
    "d_word",
    "d_pos",
    "d_depth",
    "d_subgraph",
];

/// Fields a decoder checkpoint must agree on.
pub const DECODER_FIELDS: &[&str] = &[
    "d_model",
    "n_heads",
    "ffn_dim",
    "dec_layers",
    "max_positions",
    "dec_vocab",
    "d_word",
    "d_pos",
];

impl ModelConfig {
    pub fn preset(preset: Preset, enc_vocab: usize, dec_vocab: usize) -> Self {
        let (d_model, n_heads, ffn_dim, layers, d_word, d_pos, d_feat) = match preset {
            Preset::Toy => (32, 2, 64, 2, 16, 8, 4),
            Preset::Small => (64, 4, 256, 2, 64, 16, 8),
            Preset::Desk => (256, 4, 1024, 3, 128, 64, 32),
            Preset::Big => (1024, 16, 4096, 6, 512, 256, 128),
        };
        ModelConfig {
            d_model,
            n_heads,
            ffn_dim,
            enc_layers: layers,
            dec_layers: layers,
            dropout: 0.1,
            layerdrop: 0.0,
            max_positions: 256,
            depth_buckets: crate::linearize::MAX_DEPTH_BUCKET as usize + 1,
            subgraph_buckets: crate::linearize::MAX_SUBGRAPH_BUCKET as usize + 1,
            enc_vocab,
            dec_vocab,
            d_word,
            d_pos,
            d_depth: d_feat,
            d_subgraph: d_feat,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_positions", self.max_positions),
            ("enc_vocab", self.enc_vocab),
            ("dec_vocab", self.dec_vocab),
            ("d_word", self.d_word),
            ("d_pos", self.d_pos),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.layerdrop) {
            return bad(format!("layerdrop {} outside [0, 1)", self.layerdrop));
        }
        if self.d_depth > 0 && self.depth_buckets == 0 {
            return bad("depth_buckets must be positive when d_depth > 0".into());
        }
        if self.d_subgraph > 0 && self.subgraph_buckets == 0 {
            return bad("subgraph_buckets must be positive when d_subgraph > 0".into());
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.ffn_dim);
        let mut s: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| s.push((name, shape));
        let linear = |add: &mut dyn FnMut(String, Vec<usize>), p: &str, i: usize, o: usize| {
            add(format!("{p}.w"), vec![i, o]);
            add(format!("{p}.b"), vec![o]);
        };
        let norm = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            add(format!("{p}.g"), vec![d]);
            add(format!("{p}.b"), vec![d]);
        };
        let attention = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for m in ["q", "k", "v", "o"] {
                add(format!("{p}.{m}.w"), vec![d, d]);
                add(format!("{p}.{m}.b"), vec![d]);
            }
        };

        add("enc.word".into(), vec![self.enc_vocab, self.d_word]);
        add("enc.pos".into(), vec![self.max_positions, self.d_pos]);
        if self.d_depth > 0 {
            add("enc.depth".into(), vec![self.depth_buckets, self.d_depth]);
        }
        if self.d_subgraph > 0 {
            add("enc.subgraph".into(), vec![self.subgraph_buckets, self.d_subgraph]);
        }
        let enc_in = self.d_word + self.d_pos + self.d_depth + self.d_subgraph;
        linear(&mut add, "enc.in", enc_in, d);
        for l in 0..self.enc_layers {
            let p = format!("enc.{l}");
            norm(&mut add, &format!("{p}.attn_ln"));
            attention(&mut add, &format!("{p}.attn"));
            norm(&mut add, &format!("{p}.ffn_ln"));
            linear(&mut add, &format!("{p}.ffn1"), d, f);
            linear(&mut add, &format!("{p}.ffn2"), f, d);
        }
        norm(&mut add, "enc.final_ln");

        add("dec.word".into(), vec![self.dec_vocab, self.d_word]);
        add("dec.pos".into(), vec![self.max_positions, self.d_pos]);
        linear(&mut add, "dec.in", self.d_word + self.d_pos, d);
        for l in 0..self.dec_layers {
            let p = format!("dec.{l}");
            norm(&mut add, &format!("{p}.self_ln"));
            attention(&mut add, &format!("{p}.self"));
            norm(&mut add, &format!("{p}.cross_ln"));
            attention(&mut add, &format!("{p}.cross"));
            norm(&mut add, &format!("{p}.ffn_ln"));
            linear(&mut add, &format!("{p}.ffn1"), d, f);
            linear(&mut add, &format!("{p}.ffn2"), f, d);
        }
        norm(&mut add, "dec.final_ln");
        linear(&mut add, "dec.out", d, self.d_word);
        add("dec.out_bias".into(), vec![self.dec_vocab]);
        s
    }

    pub fn to_map(&self) -> IndexMap<&'static str, String> {
        let mut m = IndexMap::new();
        m.insert("d_model", self.d_model.to_string());
        m.insert("n_heads", self.n_heads.to_string());
        m.insert("ffn_dim", self.ffn_dim.to_string());
        m.insert("enc_layers", self.enc_layers.to_string());
        m.insert("dec_layers", self.dec_layers.to_string());
        m.insert("dropout", self.dropout.to_string());
        m.insert("layerdrop", self.layerdrop.to_string());
        m.insert("max_positions", self.max_positions.to_string());
        m.insert("depth_buckets", self.depth_buckets.to_string());
        m.insert("subgraph_buckets", self.subgraph_buckets.to_string());
        m.insert("enc_vocab", self.enc_vocab.to_string());
        m.insert("dec_vocab", self.dec_vocab.to_string());
        m.insert("d_word", self.d_word.to_string());
        m.insert("d_pos", self.d_pos.to_string());
        m.insert("d_depth", self.d_depth.to_string());
        m.insert("d_subgraph", self.d_subgraph.to_string());
        m
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let bad = || ModelError::InvalidConfig(format!("bad value `{value}` for `{key}`"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let real = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "d_model" => self.d_model = int()?,
            "n_heads" => self.n_heads = int()?,
            "ffn_dim" => self.ffn_dim = int()?,
            "enc_layers" => self.enc_layers = int()?,
            "dec_layers" => self.dec_layers = int()?,
            "dropout" => self.dropout = real()?,
            "layerdrop" => self.layerdrop = real()?,
            "max_positions" => self.max_positions = int()?,
            "depth_buckets" => self.depth_buckets = int()?,
            "subgraph_buckets" => self.subgraph_buckets = int()?,
            "enc_vocab" => self.enc_vocab = int()?,
            "dec_vocab" => self.dec_vocab = int()?,
            "d_word" => self.d_word = int()?,
            "d_pos" => self.d_pos = int()?,
            "d_depth" => self.d_depth = int()?,
            "d_subgraph" => self.d_subgraph = int()?,
            _ => return Err(ModelError::InvalidConfig(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; every field must be present.
    pub fn from_kv<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self, ModelError> {
        let mut c = ModelConfig::preset(Preset::Toy, 1, 1);
        let mut seen = std::collections::HashSet::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("expected key=value, got `{line}`")))?;
            c.set(k.trim(), v.trim())?;
            seen.insert(k.trim().to_string());
        }
        if let Some(missing) = c.to_map().keys().find(|k| !seen.contains(**k)) {
            return Err(ModelError::InvalidConfig(format!("missing key `{missing}`")));
        }
        c.validate()?;
        Ok(c)
    }

    /// First of `fields` whose value differs between the two configs.
    pub fn first_difference(&self, other: &ModelConfig, fields: &[&str]) -> Option<String> {
        let (a, b) = (self.to_map(), other.to_map());
        fields.iter().find(|f| a.get(**f) != b.get(**f)).map(|f| f.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::preset(Preset::Desk, 1000, 2000);
        c.dropout = 0.25;
        let text = c.to_kv();
        assert_eq!(ModelConfig::from_kv(text.lines()).unwrap(), c);
        assert!(ModelConfig::from_kv(["d_model=3"]).is_err());
        assert!(ModelConfig::from_kv(["nope=3"]).is_err());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::preset(Preset::Toy, 10, 10);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        c.n_heads = 2;
        c.layerdrop = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn differences_are_named() {
        let a = ModelConfig::preset(Preset::Toy, 10, 10);
        let mut b = a.clone();
        b.dec_vocab = 11;
        assert_eq!(a.first_difference(&b, ENCODER_FIELDS), None);
        assert_eq!(a.first_difference(&b, DECODER_FIELDS), Some("dec_vocab".into()));
    }
}
