//! Run configuration: defaults, then `AFR_SEED`, then the config file, then
//! `--key value` flags.

use std::path::Path;

use afr_core::agent::{parse_lines, AgentConfig};
use afr_core::evalkit::MatchConfig;
use afr_core::synthgui::GeneratorConfig;

use crate::CliError;

pub const RUN_KEYS: &[&str] = &[
    "data.click",
    "data.type",
    "data.scroll",
    "data.multi",
    "data.widgets_min",
    "data.widgets_max",
    "eval.click_threshold",
    "eval.normalize_text",
    "eval.strict_scroll",
];

pub fn is_key(key: &str) -> bool {
    AgentConfig::is_key(key) || RUN_KEYS.contains(&key)
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub agent: AgentConfig,
    pub data: GeneratorConfig,
    pub matching: MatchConfig,
    /// Keys given explicitly, file or flag.
    pub explicit: Vec<String>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn new(agent: AgentConfig) -> Self {
        Self {
            agent,
            data: GeneratorConfig::default(),
            matching: MatchConfig::default(),
            explicit: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data.click" => self.data.click = parse(key, value)?,
            "data.type" => self.data.type_ = parse(key, value)?,
            "data.scroll" => self.data.scroll = parse(key, value)?,
            "data.multi" => self.data.multi = parse(key, value)?,
            "data.widgets_min" => self.data.widgets_min = parse(key, value)?,
            "data.widgets_max" => self.data.widgets_max = parse(key, value)?,
            "eval.click_threshold" => self.matching.click_threshold = parse(key, value)?,
            "eval.normalize_text" => self.matching.normalize_text = parse(key, value)?,
            "eval.strict_scroll" => self.matching.strict_scroll_direction = parse(key, value)?,
            _ if AgentConfig::is_key(key) => self.agent.set(key, value).map_err(CliError::from)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        if !self.explicit.iter().any(|k| k == key) {
            self.explicit.push(key.to_string());
        }
        Ok(())
    }

    /// Layers the seed fallback, the file and the flag overrides over `base`.
    pub fn load(base: AgentConfig, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut rc = Self::new(base);
        if let Ok(seed) = std::env::var("AFR_SEED") {
            rc.agent.seed = parse("AFR_SEED", &seed)?;
        }
        if let Some(path) = file {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let lines = parse_lines(&text).map_err(CliError::from)?;
            for (line, k, v) in lines {
                rc.set(&k, &v)
                    .map_err(|e| CliError::Config(format!("{}:{line}: {}", path.display(), e.message())))?;
            }
        }
        for (k, v) in overrides {
            rc.set(k, v)?;
        }
        rc.agent.validate().map_err(CliError::from)?;
        rc.matching.validate().map_err(CliError::from)?;
        let (w, h) = rc.agent.input_size();
        rc.data.seed = rc.agent.seed;
        rc.data.width = w;
        rc.data.height = h;
        Ok(rc)
    }

    pub fn shape_keys_given(&self) -> Vec<&str> {
        self.explicit
            .iter()
            .map(String::as_str)
            .filter(|k| afr_core::agent::SHAPE_KEYS.contains(k))
            .collect()
    }
}

/// Pulls `--key value` and `--key=value` pairs for configuration keys out of
/// `args`; anything else is left for the subcommand parser. A dotted flag
/// that is not a known key is an error.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(program) = it.next() {
        rest.push(program);
    }
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(it.by_ref());
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !is_key(&key) {
            if key.contains('.') {
                return Err(CliError::Config(format!("unknown key {key:?}")));
            }
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Config(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_split_from_subcommand_flags() {
        let (rest, o) = split_overrides(args("afragent train --fusion.low none --out dir --seed=7 --data x")).unwrap();
        assert_eq!(rest, args("afragent train --out dir --data x"));
        assert_eq!(
            o,
            vec![("fusion.low".into(), "none".into()), ("seed".into(), "7".into())]
        );
    }

    #[test]
    fn unknown_dotted_key_is_rejected() {
        assert!(matches!(
            split_overrides(args("afragent train --fusion.lo none")),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            split_overrides(args("afragent train --seed")),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn flags_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "fusion.low = residual\ntrain.lr = 0.01\n# comment\ndata.click = 3\n",
        )
        .unwrap();
        let rc = RunConfig::load(
            AgentConfig::default(),
            Some(&path),
            &[("fusion.low".into(), "none".into())],
        )
        .unwrap();
        assert_eq!(rc.agent.fusion_low.as_str(), "none");
        assert_eq!(rc.agent.lr, 0.01);
        assert_eq!(rc.data.click, 3);
        assert_eq!(rc.shape_keys_given(), vec!["fusion.low"]);
    }

    #[test]
    fn unknown_file_key_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 1\nvision.patchsize = 4\n").unwrap();
        let err = RunConfig::load(AgentConfig::default(), Some(&path), &[]).unwrap_err();
        assert!(err.message().contains(":2:"), "{}", err.message());
        assert_eq!(err.code(), 2);
    }
}
