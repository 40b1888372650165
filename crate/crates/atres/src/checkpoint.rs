//! Versioned binary checkpoint container.
//!
//! Layout: magic `ATRS`, format version (u32 LE), then a sequence of
//! sections, each `name_len: u32 | name bytes | payload_len: u64 | payload`.
//! Parameters are raw little-endian f32 with a shape header, so a saved
//! model restores bit-identically. Sections: `config` (key=value text),
//! `provenance` (seed, epoch, metric), one `param:<name>` per tensor
//! (trainable and running statistics alike), and optionally `adam`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{ParamKind, Params};
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ATRS";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: u64,
    pub metric: f64,
    pub params: Vec<(String, ParamKind, Tensor)>,
    pub adam: Option<(u64, Vec<(String, Vec<f32>, Vec<f32>)>)>,
}

fn bad(path: &Path, what: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), what.into()))
}

// ---- writing ----------------------------------------------------------

fn push_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn config_text(cfg: &ModelConfig) -> String {
    let dilations: Vec<String> =
        cfg.sacu_dilations.iter().map(|d| d.to_string()).collect();
    format!(
        "variant={}\nbase_width={}\ndepth={}\nin_channels={}\nout_channels={}\n\
         dropout_rate={}\npatch_size={}\nsacu_dilations={}\n",
        cfg.variant.as_str(),
        cfg.base_width,
        cfg.depth,
        cfg.in_channels,
        cfg.out_channels,
        cfg.dropout_rate,
        cfg.patch_size,
        dilations.join(",")
    )
}

fn parse_config_text(path: &Path, text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(path, format!("malformed config line '{line}'")))?;
        let fail = |what: &str| bad(path, format!("bad {what} '{v}'"));
        match k {
            "variant" => cfg.variant = Variant::parse(v)?,
            "base_width" => cfg.base_width = v.parse().map_err(|_| fail("base_width"))?,
            "depth" => cfg.depth = v.parse().map_err(|_| fail("depth"))?,
            "in_channels" => cfg.in_channels = v.parse().map_err(|_| fail("in_channels"))?,
            "out_channels" => {
                cfg.out_channels = v.parse().map_err(|_| fail("out_channels"))?
            }
            "dropout_rate" => {
                cfg.dropout_rate = v.parse().map_err(|_| fail("dropout_rate"))?
            }
            "patch_size" => cfg.patch_size = v.parse().map_err(|_| fail("patch_size"))?,
            "sacu_dilations" => {
                let mut ds = Vec::new();
                for part in v.split(',') {
                    ds.push(part.trim().parse().map_err(|_| fail("sacu_dilations"))?);
                }
                cfg.sacu_dilations = ds;
            }
            other => return Err(bad(path, format!("unknown config key '{other}'"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize a model (with provenance and optional optimizer state).
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    seed: u64,
    epoch: u64,
    metric: f64,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    push_section(&mut out, "config", config_text(&model.config).as_bytes());

    let mut prov = Vec::with_capacity(24);
    prov.extend_from_slice(&seed.to_le_bytes());
    prov.extend_from_slice(&epoch.to_le_bytes());
    prov.extend_from_slice(&metric.to_le_bytes());
    push_section(&mut out, "provenance", &prov);

    model.visit(&mut |name, kind, tensor| {
        let mut payload = Vec::with_capacity(8 + tensor.shape().len() * 4 + tensor.numel() * 4);
        payload.push(match kind {
            ParamKind::Trainable => 0u8,
            ParamKind::RunningStat => 1u8,
        });
        payload.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut payload, tensor.data());
        push_section(&mut out, &format!("param:{name}"), &payload);
    });

    if let Some(state) = adam {
        let entries = state.export();
        let mut payload = Vec::new();
        payload.extend_from_slice(&state.step_count().to_le_bytes());
        payload.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, m, v) in &entries {
            push_str(&mut payload, name);
            payload.extend_from_slice(&(m.len() as u64).to_le_bytes());
            push_f32s(&mut payload, m);
            push_f32s(&mut payload, v);
        }
        push_section(&mut out, "adam", &payload);
    }

    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---- reading ----------------------------------------------------------

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(self.path, "file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| bad(self.path, "non-utf8 name"))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad(path, "not a checkpoint (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }

    let mut config: Option<ModelConfig> = None;
    let mut provenance: Option<(u64, u64, f64)> = None;
    let mut params = Vec::new();
    let mut adam = None;
    while !r.done() {
        let name = r.string()?;
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        let mut pr = Reader { path, buf: payload, pos: 0 };
        if name == "config" {
            let text = std::str::from_utf8(payload)
                .map_err(|_| bad(path, "config section is not utf8"))?;
            config = Some(parse_config_text(path, text)?);
        } else if name == "provenance" {
            provenance = Some((pr.u64()?, pr.u64()?, pr.f64()?));
        } else if let Some(param_name) = name.strip_prefix("param:") {
            let kind = match pr.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::RunningStat,
                k => return Err(bad(path, format!("unknown parameter kind {k}"))),
            };
            let rank = pr.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(pr.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = pr.f32s(numel)?;
            if !pr.done() {
                return Err(bad(path, format!("trailing bytes in param {param_name}")));
            }
            params.push((param_name.to_string(), kind, Tensor::new(shape, data)?));
        } else if name == "adam" {
            let step = pr.u64()?;
            let count = pr.u32()? as usize;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let pname = pr.string()?;
                let len = pr.u64()? as usize;
                let m = pr.f32s(len)?;
                let v = pr.f32s(len)?;
                entries.push((pname, m, v));
            }
            adam = Some((step, entries));
        } else {
            return Err(bad(path, format!("unknown section '{name}'")));
        }
    }

    let config = config.ok_or_else(|| bad(path, "missing config section"))?;
    let (seed, epoch, metric) =
        provenance.ok_or_else(|| bad(path, "missing provenance section"))?;
    if params.is_empty() {
        return Err(bad(path, "checkpoint holds no parameters"));
    }
    Ok(Checkpoint { config, seed, epoch, metric, params, adam })
}

/// Rebuild the model from a loaded checkpoint. Every stored parameter must
/// match a model parameter of the same shape, and vice versa.
pub fn restore_model(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::init(ckpt.config.clone(), ckpt.seed)?;
    let mut stored: std::collections::HashMap<&str, &Tensor> = ckpt
        .params
        .iter()
        .map(|(n, _, t)| (n.as_str(), t))
        .collect();
    let mut problem: Option<String> = None;
    model.visit_mut(&mut |name, _, tensor| {
        if problem.is_some() {
            return;
        }
        match stored.remove(name) {
            None => problem = Some(format!("checkpoint lacks parameter '{name}'")),
            Some(t) if t.shape() != tensor.shape() => {
                problem = Some(format!(
                    "parameter '{name}' stored as {:?}, model expects {:?}",
                    t.shape(),
                    tensor.shape()
                ));
            }
            Some(t) => tensor.data_mut().copy_from_slice(t.data()),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(orphan) = stored.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint parameter '{orphan}' has no place in the model"
        )));
    }
    Ok(model)
}

/// Restore optimizer state if the checkpoint carries it.
pub fn restore_adam(ckpt: &Checkpoint) -> Option<AdamState> {
    ckpt.adam
        .as_ref()
        .map(|(step, entries)| AdamState::import(*step, entries.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::EvalExec;
    use crate::layers::init_rng;
    use rand::Rng;

    fn small_model(variant: Variant) -> Model {
        let cfg = ModelConfig {
            variant,
            base_width: 4,
            depth: 2,
            patch_size: 16,
            sacu_dilations: vec![1, 2],
            ..ModelConfig::default()
        };
        Model::init(cfg, 9).unwrap()
    }

    fn rand_input(seed: u64) -> Tensor {
        let mut rng = init_rng(seed);
        Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen::<f32>())
    }

    #[test]
    fn round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for variant in [Variant::Unet, Variant::ResUnet, Variant::AtResUnet] {
            let mut model = small_model(variant);
            let x = rand_input(3);
            let want = model.forward(&mut EvalExec, x.clone()).unwrap();
            save_checkpoint(&path, &model, 9, 17, 0.875, None).unwrap();
            let ckpt = load_checkpoint(&path).unwrap();
            assert_eq!(ckpt.seed, 9);
            assert_eq!(ckpt.epoch, 17);
            assert_eq!(ckpt.metric, 0.875);
            let mut restored = restore_model(&ckpt).unwrap();
            let got = restored.forward(&mut EvalExec, x).unwrap();
            assert_eq!(got, want, "{variant:?} forward changed after round trip");
        }
    }

    #[test]
    fn adam_state_round_trip() {
        use std::collections::HashMap;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = small_model(Variant::Unet);
        let mut adam = AdamState::new();
        // Take one step so the moment buffers are non-trivial.
        let mut grads: HashMap<String, Vec<f32>> = HashMap::new();
        model.visit(&mut |name, kind, t| {
            if kind == ParamKind::Trainable {
                grads.insert(name.to_string(), vec![0.01; t.numel()]);
            }
        });
        adam.apply(&mut model, &grads, 1e-3).unwrap();
        save_checkpoint(&path, &model, 1, 2, 0.5, Some(&adam)).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let restored = restore_adam(&ckpt).expect("adam stored");
        assert_eq!(restored.step_count(), adam.step_count());
        assert_eq!(restored.export(), adam.export());
    }

    #[test]
    fn same_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let model = small_model(Variant::AtResUnet);
        save_checkpoint(&a, &model, 1, 2, 0.25, None).unwrap();
        save_checkpoint(&b, &model, 1, 2, 0.25, None).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model(Variant::Unet);
        save_checkpoint(&path, &model, 1, 1, 0.0, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let mut magic = bytes.clone();
        magic[0] = b'X';
        fs::write(&path, &magic).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut version = bytes.clone();
        version[4] = 99;
        fs::write(&path, &version).unwrap();
        assert!(load_checkpoint(&path).is_err());

        bytes.truncate(bytes.len() / 2);
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn restore_rejects_mismatched_parameter_sets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model(Variant::AtResUnet);
        save_checkpoint(&path, &model, 9, 1, 0.0, None).unwrap();
        let mut ckpt = load_checkpoint(&path).unwrap();
        // A UNET config cannot host the dilated-unit parameters.
        ckpt.config.variant = Variant::Unet;
        assert!(restore_model(&ckpt).is_err());
        // Dropping a parameter is caught as well.
        let mut truncated = load_checkpoint(&path).unwrap();
        truncated.params.pop();
        assert!(restore_model(&truncated).is_err());
    }
}
