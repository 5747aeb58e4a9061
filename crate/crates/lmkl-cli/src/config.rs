//! Training configuration resolution: defaults, then a `key=value` config
//! file, then command-line flags, later sources overriding earlier ones.

use std::path::Path;

use lmkl::{Architecture, PoolMode, TrainConfig};

/// A partial training configuration; `None` means "no opinion".
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub hidden: Option<usize>,
    pub arch: Option<Architecture>,
    pub pool: Option<PoolMode>,
    pub eval_every: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

impl Overrides {
    /// Fold these overrides into a config and seed list.
    pub fn apply(&self, config: &mut TrainConfig, seeds: &mut Vec<u64>) {
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.beta1 {
            config.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            config.beta2 = v;
        }
        if let Some(v) = self.eps {
            config.eps = v;
        }
        if let Some(v) = self.hidden {
            config.hidden = v;
        }
        if let Some(v) = self.arch {
            config.arch = v;
        }
        if let Some(v) = self.pool {
            config.pool = v;
        }
        if let Some(v) = self.eval_every {
            config.eval_every = v;
        }
        if let Some(v) = &self.seeds {
            *seeds = v.clone();
        }
    }
}

/// Parse a comma-separated seed list like `0,1,2`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let seeds: Result<Vec<u64>, _> = text
        .split(',')
        .map(|t| t.trim().parse::<u64>())
        .collect();
    let seeds = seeds.map_err(|_| format!("cannot parse seed list `{text}`"))?;
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(seeds)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` for key `{key}`"))
}

/// Parse config text: one `key = value` per line, `#` comments, blank
/// lines ignored. Unknown keys are errors so typos do not silently fall
/// back to defaults.
pub fn parse_config(text: &str) -> Result<Overrides, String> {
    let mut out = Overrides::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let located = |e: String| format!("line {}: {e}", lineno + 1);
        match key {
            "epochs" => out.epochs = Some(parse_value(key, value).map_err(located)?),
            "batch_size" => out.batch_size = Some(parse_value(key, value).map_err(located)?),
            "lr" => out.lr = Some(parse_value(key, value).map_err(located)?),
            "beta1" => out.beta1 = Some(parse_value(key, value).map_err(located)?),
            "beta2" => out.beta2 = Some(parse_value(key, value).map_err(located)?),
            "eps" => out.eps = Some(parse_value(key, value).map_err(located)?),
            "hidden" => out.hidden = Some(parse_value(key, value).map_err(located)?),
            "arch" => out.arch = Some(value.parse().map_err(located)?),
            "pool" => out.pool = Some(value.parse().map_err(located)?),
            "eval_every" => out.eval_every = Some(parse_value(key, value).map_err(located)?),
            "seeds" => out.seeds = Some(parse_seeds(value).map_err(located)?),
            other => return Err(format!("line {}: unknown key `{other}`", lineno + 1)),
        }
    }
    Ok(out)
}

/// Load and parse a config file.
pub fn load_config(path: &Path) -> Result<Overrides, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let text = "\
# training settings
epochs = 30
batch_size = 64
lr = 0.01
beta1 = 0.8
beta2 = 0.99
eps = 1e-7
hidden = 32
arch = separate
pool = mean
eval_every = 5
seeds = 3, 4, 5
";
        let o = parse_config(text).unwrap();
        let mut cfg = TrainConfig::default();
        let mut seeds = vec![0u64];
        o.apply(&mut cfg, &mut seeds);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.beta1, 0.8);
        assert_eq!(cfg.beta2, 0.99);
        assert_eq!(cfg.eps, 1e-7);
        assert_eq!(cfg.hidden, 32);
        assert_eq!(cfg.arch, Architecture::Separate);
        assert_eq!(cfg.pool, PoolMode::Mean);
        assert_eq!(cfg.eval_every, 5);
        assert_eq!(seeds, vec![3, 4, 5]);
    }

    #[test]
    fn empty_and_comments_leave_defaults() {
        let o = parse_config("\n# nothing here\n\n").unwrap();
        let mut cfg = TrainConfig::default();
        let mut seeds = vec![0u64];
        o.apply(&mut cfg, &mut seeds);
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(seeds, vec![0]);
    }

    #[test]
    fn later_sources_override_earlier() {
        let file = parse_config("epochs = 10\nlr = 0.5\n").unwrap();
        let flags = Overrides {
            epochs: Some(3),
            ..Overrides::default()
        };
        let mut cfg = TrainConfig::default();
        let mut seeds = vec![0u64];
        file.apply(&mut cfg, &mut seeds);
        flags.apply(&mut cfg, &mut seeds);
        // the flag wins for epochs, the file still holds for lr
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.5);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(parse_config("epoch = 3\n").is_err());
        assert!(parse_config("epochs 3\n").is_err());
        assert!(parse_config("epochs = many\n").is_err());
        assert!(parse_config("arch = diagonal\n").is_err());
        assert!(parse_config("seeds = 1,,2\n").is_err());
    }

    #[test]
    fn seed_list_forms() {
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("0, 1,2").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("a,b").is_err());
    }
}
