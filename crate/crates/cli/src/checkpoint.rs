//! Checkpoint directories: `manifest.txt` with scalars, shapes and generator
//! positions, `config.toml`, and one binary file per parameter array.
//!
//! Array file layout: the magic `IPRARR01`, a little-endian `u32` rank, one
//! little-endian `u64` per dimension, then row-major little-endian `f32`
//! values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use introprior_core::prior::ClipRanges;
use introprior_core::trainer::RngState;
use introprior_core::{Adam, Decoder, Encoder, Matrix, Mlp, MixturePrior, TrainState, VampPseudoInputs};

use crate::config::{config_to_toml, parse_config};
use crate::error::{CliError, CliResult, IoContext};

pub const MAGIC: &[u8; 8] = b"IPRARR01";
pub const FORMAT: &str = "introprior-checkpoint-1";
pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.toml";

fn array_file(name: &str) -> String {
    format!("{name}.bin")
}

pub fn encode_array(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 16 + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_array(name: &str, bytes: &[u8]) -> CliResult<Matrix> {
    let bad = |msg: String| CliError::Checkpoint(format!("array `{name}`: {msg}"));
    if bytes.len() < 12 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if !(1..=2).contains(&rank) {
        return Err(bad(format!("unsupported rank {rank}")));
    }
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| bad("dimension overflow".into()))?;
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(bad(format!(
            "{} data: expected {expected} bytes for {rows}x{cols}, found {}",
            if bytes.len() < expected { "truncated" } else { "oversized" },
            bytes.len()
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

struct Writer {
    manifest: String,
    arrays: Vec<(String, Vec<u8>)>,
}

impl Writer {
    fn kv(&mut self, k: &str, v: impl std::fmt::Display) {
        let _ = writeln!(self.manifest, "{k} = {v}");
    }

    fn array(&mut self, name: String, m: &Matrix) {
        self.kv(&format!("array.{name}"), format!("{}x{}", m.rows(), m.cols()));
        self.arrays.push((name, encode_array(m)));
    }

    fn mlp(&mut self, prefix: &str, net: &Mlp) {
        self.kv(&format!("{prefix}.layers"), net.weights.len());
        for (i, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
            self.array(format!("{prefix}.w{i}"), w);
            self.array(format!("{prefix}.b{i}"), b);
        }
    }

    fn adam(&mut self, prefix: &str, a: &Adam) {
        self.kv(&format!("{prefix}.lr"), a.lr);
        self.kv(&format!("{prefix}.beta1"), a.beta1);
        self.kv(&format!("{prefix}.beta2"), a.beta2);
        self.kv(&format!("{prefix}.eps"), a.eps);
        self.kv(&format!("{prefix}.step"), a.step);
        self.kv(&format!("{prefix}.tensors"), a.m.len());
        for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
            self.array(format!("{prefix}.m{i}"), m);
            self.array(format!("{prefix}.v{i}"), v);
        }
    }

    fn rng(&mut self, prefix: &str, r: &RngState) {
        let seed: String = r.seed.iter().map(|b| format!("{b:02x}")).collect();
        self.kv(&format!("{prefix}.seed"), seed);
        self.kv(&format!("{prefix}.stream"), r.stream);
        self.kv(&format!("{prefix}.word_pos"), r.word_pos);
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes `state` to `dir`, replacing any previous checkpoint there. The
/// files are staged in a sibling directory and moved into place.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> CliResult<()> {
    let mut w = Writer {
        manifest: String::new(),
        arrays: Vec::new(),
    };
    w.kv("format", FORMAT);
    w.kv("code_version", env!("CARGO_PKG_VERSION"));
    w.kv("epoch", state.epoch);
    w.kv("step", state.step);
    w.kv("transitioned", state.transitioned);
    w.kv("optimizer_updates", state.optimizer_updates);
    w.kv("encoder.latent_dim", state.encoder.latent_dim);
    w.mlp("encoder", &state.encoder.net);
    w.mlp("decoder", &state.decoder.net);

    let p = &state.prior;
    w.kv("prior.learnable_contributions", p.learnable_contributions);
    w.kv("prior.learnable_params", p.learnable_params);
    w.kv("prior.clipping_enabled", p.clipping_enabled);
    match &p.clip {
        Some(c) => {
            w.kv("prior.clip.lo", join(&c.lo));
            w.kv("prior.clip.hi", join(&c.hi));
            w.kv("prior.clip.k", c.k);
        }
        None => w.kv("prior.clip", "none"),
    }
    w.array("prior.means".into(), &p.means);
    w.array("prior.raw_log_vars".into(), &p.raw_log_vars);
    w.array("prior.energy_logits".into(), &p.energy_logits);

    w.kv("vamp", state.vamp.is_some());
    if let Some(v) = &state.vamp {
        w.array("vamp.pseudo_inputs".into(), &v.pseudo_inputs);
        w.array("vamp.energy_logits".into(), &v.energy_logits);
    }
    w.adam("opt.encoder", &state.opt_encoder);
    w.adam("opt.decoder", &state.opt_decoder);
    w.adam("opt.prior", &state.opt_prior);
    w.kv("opt.vamp", state.opt_vamp.is_some());
    if let Some(a) = &state.opt_vamp {
        w.adam("opt.vamp", a);
    }
    w.rng("rng.noise", &RngState::capture(&state.noise_rng));
    w.rng("rng.data", &RngState::capture(&state.data_rng));
    match &state.last_responsibilities {
        Some(c) => w.kv("last_responsibilities", join(c)),
        None => w.kv("last_responsibilities", "none"),
    }

    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).at(parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| CliError::Checkpoint(format!("{} is not a directory name", dir.display())))?;
    let staging = parent.join(format!(".{}.partial", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging).at(&staging)?;
    }
    fs::create_dir_all(&staging).at(&staging)?;
    for (name, bytes) in &w.arrays {
        let path = staging.join(array_file(name));
        fs::write(&path, bytes).at(&path)?;
    }
    let path = staging.join(CONFIG);
    fs::write(&path, config_to_toml(&state.config)).at(&path)?;
    let path = staging.join(MANIFEST);
    fs::write(&path, &w.manifest).at(&path)?;
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::rename(&staging, dir).at(dir)?;
    Ok(())
}

struct Reader<'a> {
    dir: &'a Path,
    kv: BTreeMap<String, String>,
}

impl Reader<'_> {
    fn get(&self, k: &str) -> CliResult<&str> {
        self.kv
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| CliError::Checkpoint(format!("manifest is missing `{k}`")))
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> CliResult<T> {
        let v = self.get(k)?;
        v.parse()
            .map_err(|_| CliError::Checkpoint(format!("manifest field `{k}` has bad value `{v}`")))
    }

    fn list(&self, k: &str) -> CliResult<Vec<f64>> {
        let v = self.get(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| CliError::Checkpoint(format!("manifest field `{k}` has bad entry `{x}`")))
            })
            .collect()
    }

    fn array(&self, name: &str) -> CliResult<Matrix> {
        let shape = self.get(&format!("array.{name}"))?;
        let path = self.dir.join(array_file(name));
        let bytes = fs::read(&path)
            .map_err(|e| CliError::Checkpoint(format!("array `{name}` ({}): {e}", path.display())))?;
        let m = decode_array(name, &bytes)?;
        if format!("{}x{}", m.rows(), m.cols()) != shape {
            return Err(CliError::Checkpoint(format!(
                "array `{name}`: shape {}x{} does not match manifest {shape}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }

    fn mlp(&self, prefix: &str) -> CliResult<Mlp> {
        let layers: usize = self.parse(&format!("{prefix}.layers"))?;
        let mut net = Mlp {
            weights: Vec::new(),
            biases: Vec::new(),
        };
        for i in 0..layers {
            net.weights.push(self.array(&format!("{prefix}.w{i}"))?);
            net.biases.push(self.array(&format!("{prefix}.b{i}"))?);
        }
        Ok(net)
    }

    fn adam(&self, prefix: &str) -> CliResult<Adam> {
        let tensors: usize = self.parse(&format!("{prefix}.tensors"))?;
        let mut a = Adam {
            lr: self.parse(&format!("{prefix}.lr"))?,
            beta1: self.parse(&format!("{prefix}.beta1"))?,
            beta2: self.parse(&format!("{prefix}.beta2"))?,
            eps: self.parse(&format!("{prefix}.eps"))?,
            step: self.parse(&format!("{prefix}.step"))?,
            m: Vec::new(),
            v: Vec::new(),
        };
        for i in 0..tensors {
            a.m.push(self.array(&format!("{prefix}.m{i}"))?);
            a.v.push(self.array(&format!("{prefix}.v{i}"))?);
        }
        Ok(a)
    }

    fn rng(&self, prefix: &str) -> CliResult<RngState> {
        let hex = self.get(&format!("{prefix}.seed"))?;
        let bad = || CliError::Checkpoint(format!("manifest field `{prefix}.seed` is not 32 hex bytes"));
        if hex.len() != 64 || !hex.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(RngState {
            seed,
            stream: self.parse(&format!("{prefix}.stream"))?,
            word_pos: self.parse(&format!("{prefix}.word_pos"))?,
        })
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> CliResult<TrainState> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| CliError::Checkpoint(format!("malformed manifest line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let r = Reader { dir, kv };
    if r.get("format")? != FORMAT {
        return Err(CliError::Checkpoint(format!(
            "unsupported format `{}`",
            r.get("format")?
        )));
    }
    let cfg_path = dir.join(CONFIG);
    let config = parse_config(&fs::read_to_string(&cfg_path).at(&cfg_path)?)?;

    let clip = if r.get("prior.clip").ok() == Some("none") {
        None
    } else {
        Some(ClipRanges {
            lo: r.list("prior.clip.lo")?,
            hi: r.list("prior.clip.hi")?,
            k: r.parse("prior.clip.k")?,
        })
    };
    let prior = MixturePrior {
        means: r.array("prior.means")?,
        raw_log_vars: r.array("prior.raw_log_vars")?,
        energy_logits: r.array("prior.energy_logits")?,
        clip,
        learnable_contributions: r.parse("prior.learnable_contributions")?,
        learnable_params: r.parse("prior.learnable_params")?,
        clipping_enabled: r.parse("prior.clipping_enabled")?,
    };
    let vamp = if r.parse::<bool>("vamp")? {
        Some(VampPseudoInputs {
            pseudo_inputs: r.array("vamp.pseudo_inputs")?,
            energy_logits: r.array("vamp.energy_logits")?,
        })
    } else {
        None
    };
    let opt_vamp = if r.parse::<bool>("opt.vamp")? {
        Some(r.adam("opt.vamp")?)
    } else {
        None
    };
    let last_responsibilities = match r.get("last_responsibilities")? {
        "none" => None,
        _ => Some(r.list("last_responsibilities")?),
    };
    Ok(TrainState {
        config,
        encoder: Encoder {
            net: r.mlp("encoder")?,
            latent_dim: r.parse("encoder.latent_dim")?,
        },
        decoder: Decoder {
            net: r.mlp("decoder")?,
        },
        prior,
        vamp,
        opt_encoder: r.adam("opt.encoder")?,
        opt_decoder: r.adam("opt.decoder")?,
        opt_prior: r.adam("opt.prior")?,
        opt_vamp,
        epoch: r.parse("epoch")?,
        step: r.parse("step")?,
        transitioned: r.parse("transitioned")?,
        optimizer_updates: r.parse("optimizer_updates")?,
        noise_rng: r.rng("rng.noise")?.restore(),
        data_rng: r.rng("rng.data")?.restore(),
        last_responsibilities,
    })
}

/// The checkpoint inside a run directory, or `dir` itself.
pub fn resolve_checkpoint_dir(dir: &Path) -> std::path::PathBuf {
    let nested = dir.join("checkpoint");
    if nested.join(MANIFEST).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use introprior_core::trainer::{PriorConfig, PriorKind};
    use introprior_core::TrainConfig;
    use proptest::prelude::*;

    fn tiny(kind: PriorKind) -> TrainConfig {
        TrainConfig {
            hidden_width: 8,
            prior: PriorConfig { kind, modes: 4, ..Default::default() },
            t: 3,
            warmup_epochs: 1,
            adversarial_epochs: 2,
            steps_per_epoch: 2,
            batch_size: 8,
            seed: 5,
            ..Default::default()
        }
    }

    fn assert_same(a: &TrainState, b: &TrainState) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.prior, b.prior);
        assert_eq!(a.vamp, b.vamp);
        assert_eq!(a.opt_encoder, b.opt_encoder);
        assert_eq!(a.opt_decoder, b.opt_decoder);
        assert_eq!(a.opt_prior, b.opt_prior);
        assert_eq!(a.opt_vamp, b.opt_vamp);
        assert_eq!((a.epoch, a.step, a.transitioned, a.optimizer_updates), (b.epoch, b.step, b.transitioned, b.optimizer_updates));
        assert_eq!(RngState::capture(&a.noise_rng), RngState::capture(&b.noise_rng));
        assert_eq!(RngState::capture(&a.data_rng), RngState::capture(&b.data_rng));
        assert_eq!(a.last_responsibilities, b.last_responsibilities);
    }

    #[test]
    fn round_trip_in_every_phase() {
        for kind in [PriorKind::StandardGaussian, PriorKind::Mog, PriorKind::VampToMog] {
            let mut s = TrainState::new(tiny(kind)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            for _ in 0..=s.config.total_epochs() {
                let ck = dir.path().join("ck");
                save_checkpoint(&s, &ck).unwrap();
                let back = load_checkpoint(&ck).unwrap();
                assert_same(&s, &back);
                if s.finished() {
                    break;
                }
                s.run_epoch().unwrap();
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut s = TrainState::new(tiny(PriorKind::VampToMog)).unwrap();
        s.run_epoch().unwrap();
        s.run_epoch().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&s, &a).unwrap();
        save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() > 10);
        for n in names {
            assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
        }
    }

    #[test]
    fn truncated_array_names_the_array() {
        let s = TrainState::new(tiny(PriorKind::Mog)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        save_checkpoint(&s, &ck).unwrap();
        let target = ck.join("decoder.w1.bin");
        let bytes = fs::read(&target).unwrap();
        fs::write(&target, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&ck).unwrap_err().to_string();
        assert!(err.contains("decoder.w1") && err.contains("truncated"), "{err}");

        fs::write(&target, b"NOTMAGIC\x02\0\0\0").unwrap();
        let err = load_checkpoint(&ck).unwrap_err().to_string();
        assert!(err.contains("decoder.w1") && err.contains("magic"), "{err}");
    }

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5, 0.25]]);
        let b = encode_array(&m);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(b[32..36].try_into().unwrap()), -2.5);
        assert_eq!(b.len(), 28 + 12);
    }

    proptest! {
        #[test]
        fn f32_arrays_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut x = seed;
            let m = Matrix::from_fn(rows, cols, |_, _| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 40) as f32 / 1e3 - 8000.0) as f64
            });
            prop_assert_eq!(decode_array("m", &encode_array(&m)).unwrap(), m);
        }
    }
}
