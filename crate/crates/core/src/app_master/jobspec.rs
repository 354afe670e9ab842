//! Job description files.
//!
//! A jobspec is flat `key = value` text:
//!
//! ```text
//! name = terasort
//! num_mappers = 8
//! num_reducers = 4
//! map_command = ephemyarn task terasort-map --input {INPUT} --staging {STAGING} --reducers {NUM_REDUCERS}
//! reduce_command = ephemyarn task terasort-reduce --staging {STAGING} --output {OUTPUT}
//! input_dir = /shared/tera-data/rows-1000000
//! output_dir = /shared/out/sorted
//! ```
//!
//! Optional keys: `staging_dir`, `map_memory_mb`, `map_vcores`,
//! `reduce_memory_mb`, `reduce_vcores`, `max_attempts`. Everything after the
//! first `=` is the value, so commands may contain `=` themselves.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::resource::ResourceProfile;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub name: String,
    pub num_mappers: u32,
    pub num_reducers: u32,
    pub map_command: String,
    pub reduce_command: String,
    pub input_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<shared staging>/<app id>` when unset.
    pub staging_dir: Option<PathBuf>,
    pub map_resource: Option<ResourceProfile>,
    pub reduce_resource: Option<ResourceProfile>,
    pub max_attempts: Option<u32>,
}

impl JobSpec {
    /// A job whose commands are plain shell text.
    pub fn new(name: impl Into<String>, num_mappers: u32, map_command: impl Into<String>, output_dir: impl Into<PathBuf>) -> JobSpec {
        JobSpec {
            name: name.into(),
            num_mappers,
            num_reducers: 0,
            map_command: map_command.into(),
            reduce_command: String::new(),
            input_dir: None,
            output_dir: output_dir.into(),
            staging_dir: None,
            map_resource: None,
            reduce_resource: None,
            max_attempts: None,
        }
    }

    pub fn parse(text: &str) -> Result<JobSpec> {
        let bad = |m: String| Error::InvalidJobSpec(m);
        let mut spec = JobSpec::new("", 0, "", "");
        let mut map_mem = None;
        let mut map_vc = None;
        let mut red_mem = None;
        let mut red_vc = None;
        let mut seen_output = false;
        let num = |k: &str, v: &str| v.parse::<u64>().map_err(|_| bad(format!("{k}: not a number: {v:?}")));
        for (k, v) in parse_key_values(text).map_err(|e| bad(e.to_string()))? {
            match k.as_str() {
                "name" => spec.name = v,
                "num_mappers" => spec.num_mappers = num(&k, &v)? as u32,
                "num_reducers" => spec.num_reducers = num(&k, &v)? as u32,
                "map_command" => spec.map_command = v,
                "reduce_command" => spec.reduce_command = v,
                "input_dir" => spec.input_dir = Some(PathBuf::from(v)),
                "output_dir" => {
                    spec.output_dir = PathBuf::from(v);
                    seen_output = true;
                }
                "staging_dir" => spec.staging_dir = Some(PathBuf::from(v)),
                "map_memory_mb" => map_mem = Some(num(&k, &v)?),
                "map_vcores" => map_vc = Some(num(&k, &v)? as u32),
                "reduce_memory_mb" => red_mem = Some(num(&k, &v)?),
                "reduce_vcores" => red_vc = Some(num(&k, &v)? as u32),
                "max_attempts" => spec.max_attempts = Some(num(&k, &v)? as u32),
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        if !seen_output {
            return Err(bad("output_dir is required".into()));
        }
        if map_mem.is_some() || map_vc.is_some() {
            spec.map_resource = Some(ResourceProfile::new(map_mem.unwrap_or(0), map_vc.unwrap_or(1)));
        }
        if red_mem.is_some() || red_vc.is_some() {
            spec.reduce_resource = Some(ResourceProfile::new(red_mem.unwrap_or(0), red_vc.unwrap_or(1)));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<JobSpec> {
        let text = std::fs::read_to_string(path).map_err(Error::path_io(path))?;
        JobSpec::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidJobSpec(m.into()));
        if self.name.trim().is_empty() || self.name.contains(['\n', '/']) {
            return bad("name must be non-empty and contain no '/'");
        }
        if self.num_mappers == 0 {
            return bad("num_mappers must be at least 1");
        }
        if self.map_command.trim().is_empty() {
            return bad("map_command is required");
        }
        if self.num_reducers > 0 && self.reduce_command.trim().is_empty() {
            return bad("reduce_command is required when num_reducers > 0");
        }
        if self.output_dir.as_os_str().is_empty() || self.output_dir.file_name().is_none() {
            return bad("output_dir must name a directory");
        }
        if self.max_attempts == Some(0) {
            return bad("max_attempts must be at least 1");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = vec![
            format!("name = {}", self.name),
            format!("num_mappers = {}", self.num_mappers),
            format!("num_reducers = {}", self.num_reducers),
            format!("map_command = {}", self.map_command),
        ];
        if !self.reduce_command.is_empty() {
            out.push(format!("reduce_command = {}", self.reduce_command));
        }
        if let Some(p) = &self.input_dir {
            out.push(format!("input_dir = {}", p.display()));
        }
        out.push(format!("output_dir = {}", self.output_dir.display()));
        if let Some(p) = &self.staging_dir {
            out.push(format!("staging_dir = {}", p.display()));
        }
        if let Some(r) = self.map_resource {
            out.push(format!("map_memory_mb = {}", r.memory_mb));
            out.push(format!("map_vcores = {}", r.vcores));
        }
        if let Some(r) = self.reduce_resource {
            out.push(format!("reduce_memory_mb = {}", r.memory_mb));
            out.push(format!("reduce_vcores = {}", r.vcores));
        }
        if let Some(n) = self.max_attempts {
            out.push(format!("max_attempts = {n}"));
        }
        let mut text = out.join("\n");
        text.push('\n');
        text
    }
}
