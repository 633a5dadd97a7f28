//! Run manifests: every command writes one next to each output so a run can
//! be reproduced and its inputs verified by digest.

use std::path::{Path, PathBuf};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn digest_file(path: &Path) -> std::io::Result<u64> {
    Ok(fnv1a64(&std::fs::read(path)?))
}

pub struct Manifest {
    pub command: String,
    pub config: String,
    pub inputs: Vec<(String, u64)>,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("artifact_version = {ARTIFACT_VERSION}\n"));
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!("seed = {}\n", self.seed));
        for (name, digest) in &self.inputs {
            s.push_str(&format!("input {name} = {digest:016x}\n"));
        }
        s.push_str(&format!("wall_seconds = {:.3}\n", self.wall_seconds));
        s.push_str("--- resolved config ---\n");
        s.push_str(&self.config);
        s
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut os = output.as_os_str().to_owned();
        os.push(".manifest");
        PathBuf::from(os)
    }

    pub fn write_alongside(&self, output: &Path) -> chaos_ot::Result<()> {
        chaos_ot::io::atomic_write(&Self::path_for(output), self.render().as_bytes())
    }
}
