//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "IBMPNCKP"
//! version      u32       currently 1
//! seed         u64       training seed
//! meta_len     u32
//! meta         meta_len bytes of UTF-8, "key=value\n" lines:
//!                input_dim, hidden (comma list, may be empty), classes,
//!                mpn.steps, mpn.heads, embed_dim, mpn.ff_dim,
//!                mpn.include_self, mpn.score_scale, mpn.norm_eps
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32, then name_len bytes of UTF-8 (dotted parameter name)
//!   rank       u32, then rank × u64 dimensions
//!   payload    product(dims) × f64, row-major
//! ```
//!
//! Tensors appear in canonical parameter order; a reader rebuilds the model
//! structure from the metadata and then checks every name and shape.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Model, ModelConfig, ModelParams, MpnConfig, ScoreScale};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IBMPNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn meta_text(cfg: &ModelConfig) -> String {
    let hidden: Vec<String> = cfg.hidden.iter().map(|h| h.to_string()).collect();
    let m = &cfg.mpn;
    format!(
        "input_dim={}\nhidden={}\nclasses={}\nmpn.steps={}\nmpn.heads={}\nembed_dim={}\n\
         mpn.ff_dim={}\nmpn.include_self={}\nmpn.score_scale={}\nmpn.norm_eps={:e}\n",
        cfg.input_dim,
        hidden.join(","),
        cfg.classes,
        m.steps,
        m.heads,
        m.dim,
        m.ff_dim,
        m.include_self,
        m.score_scale.name(),
        m.norm_eps,
    )
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&model.seed.to_le_bytes())?;
    let meta = meta_text(&model.config);
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    let named = model.params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(n, what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

fn parse_meta(text: &str) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    fn get<'a>(kv: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
        kv.get(k)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("metadata missing `{k}`")))
    }
    fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<T> {
        get(kv, k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is malformed")))
    }
    let hidden_s = get(&kv, "hidden")?;
    let hidden = if hidden_s.is_empty() {
        Vec::new()
    } else {
        hidden_s
            .split(',')
            .map(|h| {
                h.parse()
                    .map_err(|_| Error::Checkpoint("metadata `hidden` is malformed".into()))
            })
            .collect::<Result<Vec<usize>>>()?
    };
    let score_scale = ScoreScale::parse(get(&kv, "mpn.score_scale")?)
        .ok_or_else(|| Error::Checkpoint("unknown mpn.score_scale".into()))?;
    Ok(ModelConfig {
        input_dim: num(&kv, "input_dim")?,
        hidden,
        classes: num(&kv, "classes")?,
        mpn: MpnConfig {
            steps: num(&kv, "mpn.steps")?,
            heads: num(&kv, "mpn.heads")?,
            dim: num(&kv, "embed_dim")?,
            ff_dim: num(&kv, "mpn.ff_dim")?,
            include_self: num(&kv, "mpn.include_self")?,
            score_scale,
            norm_eps: num(&kv, "mpn.norm_eps")?,
        },
    })
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
    let mut r = Reader { inner: r };
    let magic = r.bytes(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = r.u64("seed")?;
    let meta_len = r.u32("metadata length")? as usize;
    let config = parse_meta(&r.string(meta_len, "metadata")?)?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid metadata: {e}")))?;

    // Structure (names and shapes) comes from a throwaway initialization.
    let template = Model::init(config.clone(), &mut Rng::new(0))?;
    let expected: Vec<(String, Vec<usize>)> = template
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();

    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = r.u32("name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        if &name != want_name {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{want_name}`, found `{name}`"
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8, "payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has non-finite entries"
            )));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    let params: ModelParams = template.params.rebuild(tensors)?;
    Ok(Model {
        config,
        params,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        let cfg = ModelConfig {
            input_dim: 5,
            hidden: vec![7],
            classes: 3,
            mpn: MpnConfig {
                steps: 2,
                heads: 2,
                dim: 4,
                ff_dim: 6,
                include_self: false,
                score_scale: ScoreScale::Head,
                norm_eps: 1e-6,
            },
        };
        Model::init(cfg, &mut Rng::new(99)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
    }
}
