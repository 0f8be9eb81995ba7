//! Run configuration: the benchmark plan sections plus `[run]` and
//! `[service]`, in the sectioned `key = value` grammar of `vadapter::kvtext`.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Result;
use vadapter::eval::{BenchmarkPlan, PLAN_SECTIONS};
use vadapter::kvtext::{KvDoc, KvWriter};
use vadapter::rng::derive_seed;
use vadapter::scorewire::{ServerConfig, DEFAULT_TIMEOUT, MAX_FRAME};

/// Sections a manifest adds on top of a config. They are records of a past
/// run and are skipped when a manifest is read back as a config.
pub const MANIFEST_SECTIONS: [&str; 2] = ["invocation", "artifacts"];

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub addr: String,
    pub max_frame: usize,
    pub poll_ms: u64,
    pub drain_grace_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let s = ServerConfig::default();
        Self {
            addr: "127.0.0.1:7878".into(),
            max_frame: MAX_FRAME,
            poll_ms: s.poll.as_millis() as u64,
            drain_grace_ms: s.drain_grace.as_millis() as u64,
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

impl ServiceConfig {
    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            max_frame: self.max_frame,
            poll: Duration::from_millis(self.poll_ms.max(1)),
            drain_grace: Duration::from_millis(self.drain_grace_ms),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Root of every seed the subcommands use.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub plan: BenchmarkPlan,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_doc(&KvDoc::default(), None).expect("defaults are valid")
    }
}

/// True if `[section]` sets `key`.
fn has_key(doc: &KvDoc, section: &str, key: &str) -> bool {
    doc.section(section).opt_str(key).is_some()
}

impl RunConfig {
    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_seed(text, None)
    }

    /// Parses with `[run] seed` replaced by `seed` when given; seeds derived
    /// from the run seed follow the replacement.
    pub fn parse_with_seed(text: &str, seed: Option<u64>) -> Result<Self> {
        Self::from_doc(&KvDoc::parse(text)?, seed)
    }

    fn from_doc(doc: &KvDoc, seed_override: Option<u64>) -> Result<Self> {
        let known: Vec<&str> = PLAN_SECTIONS
            .iter()
            .copied()
            .chain(["run", "service"])
            .chain(MANIFEST_SECTIONS)
            .collect();
        doc.check_sections(&known)?;

        let mut s = doc.section("run");
        let seed = s.u64_or("seed", 0)?;
        let seed = seed_override.unwrap_or(seed);
        let out_dir = PathBuf::from(s.str_or("out_dir", "out"));
        s.finish()?;

        let mut plan = BenchmarkPlan::read_kv(doc)?;
        // corpus seeds not given explicitly hang off the run seed
        if !has_key(doc, "broad", "seed") {
            plan.broad.seed = derive_seed(seed, "data/broad");
        }
        if !has_key(doc, "adapt", "seed") {
            plan.adapt.seed = derive_seed(seed, "data/adapt");
        }

        let d = ServiceConfig::default();
        let mut s = doc.section("service");
        let service = ServiceConfig {
            addr: s.str_or("addr", &d.addr),
            max_frame: s.usize_or("max_frame", d.max_frame)?,
            poll_ms: s.u64_or("poll_ms", d.poll_ms)?,
            drain_grace_ms: s.u64_or("drain_grace_ms", d.drain_grace_ms)?,
            timeout_secs: s.u64_or("timeout_secs", d.timeout_secs)?,
        };
        s.finish()?;
        Ok(Self {
            seed,
            out_dir,
            plan,
            service,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.service.max_frame == 0 {
            anyhow::bail!("service max_frame must be positive");
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.section("run")
            .kv("seed", self.seed)
            .kv("out_dir", self.out_dir.display());
        self.plan.write_kv(w);
        let s = &self.service;
        w.section("service")
            .kv("addr", &s.addr)
            .kv("max_frame", s.max_frame)
            .kv("poll_ms", s.poll_ms)
            .kv("drain_grace_ms", s.drain_grace_ms)
            .kv("timeout_secs", s.timeout_secs);
    }

    /// Every value, defaults included.
    #[cfg(test)]
    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }
}
