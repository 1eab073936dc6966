//! Checkpoints as safetensors files.
//!
//! Tensors: every model parameter under its hierarchical name (f32, C order)
//! plus `optim.m/<name>` and `optim.v/<name>` for each trainable parameter.
//! Header metadata (all JSON strings): `format`, `config`, `vocab`,
//! `schedule`, `step`, `optimizer_t`, `seed`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use far_core::nn::{DiffusionBackbone, NoiseSchedule, ToyBackbone};
use far_core::optim::AdamW;
use far_core::prompting::Vocab;
use far_core::trainer::TrainState;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::FarConfig;
use crate::error::{FarError, Result};

pub const FORMAT: &str = "far-checkpoint-v1";

/// Everything needed to sample from or continue training a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ToyBackbone<f32>,
    pub vocab: Vocab,
    pub config: FarConfig,
    pub state: TrainState<f32>,
}

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_bytes(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bad = |message: String| FarError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let params = ck.model.params();
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (id, p) in params.iter() {
        buffers.push((p.name.clone(), p.shape.clone(), to_bytes(&p.data)));
        let (m, v) = (&ck.state.optimizer.m[id.0], &ck.state.optimizer.v[id.0]);
        if let (Some(m), Some(v)) = (m, v) {
            buffers.push((format!("optim.m/{}", p.name), p.shape.clone(), to_bytes(m)));
            buffers.push((format!("optim.v/{}", p.name), p.shape.clone(), to_bytes(v)));
        }
    }
    let views = buffers
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), json(&ck.config)),
        ("vocab".to_string(), json(&ck.vocab)),
        ("schedule".to_string(), json(ck.model.schedule())),
        ("step".to_string(), ck.state.step.to_string()),
        ("optimizer_t".to_string(), ck.state.optimizer.t.to_string()),
        ("seed".to_string(), ck.config.trainer.seed.to_string()),
    ]);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| bad(e.to_string()))?;
    let bytes = canonical_header(bytes).map_err(bad)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| FarError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| FarError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FarError::io(path, e))
}

/// Rewrites the JSON header with sorted keys so equal checkpoints are
/// byte-identical (the metadata map is otherwise emitted in hash order).
fn canonical_header(bytes: Vec<u8>) -> std::result::Result<Vec<u8>, String> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte length prefix")) as usize;
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| e.to_string())?;
    let mut sorted: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    for (k, v) in header {
        let v = match v {
            serde_json::Value::Object(m) => serde_json::to_value(m.into_iter().collect::<BTreeMap<_, _>>()).map_err(|e| e.to_string())?,
            other => other,
        };
        sorted.insert(k, v);
    }
    let mut head = serde_json::to_vec(&sorted).map_err(|e| e.to_string())?;
    head.resize(head.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + head.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

fn json<T: serde::Serialize + ?Sized>(v: &T) -> String {
    serde_json::to_string(v).expect("checkpoint metadata serializes")
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |message: String| FarError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| FarError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| bad("no metadata".into()))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("metadata key {k} missing")));
    if get("format")? != FORMAT {
        return Err(bad(format!("unsupported format {}", get("format")?)));
    }
    let config: FarConfig = serde_json::from_str(get("config")?).map_err(|e| bad(format!("config: {e}")))?;
    let vocab: Vocab = serde_json::from_str(get("vocab")?).map_err(|e| bad(format!("vocab: {e}")))?;
    let schedule: NoiseSchedule = serde_json::from_str(get("schedule")?).map_err(|e| bad(format!("schedule: {e}")))?;
    let step: u64 = get("step")?.parse().map_err(|_| bad("bad step".into()))?;
    let opt_t: u64 = get("optimizer_t")?.parse().map_err(|_| bad("bad optimizer_t".into()))?;

    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut model = ToyBackbone::<f32>::new(config.model.toy(), vocab.len(), schedule)?;
    let tensors = st.tensors();
    let mut entries = Vec::new();
    for (name, view) in &tensors {
        if name.starts_with("optim.") {
            continue;
        }
        if view.dtype() != Dtype::F32 {
            return Err(bad(format!("{name} is {:?}, expected F32", view.dtype())));
        }
        entries.push((name.as_str(), view.shape(), from_bytes(view.data())));
    }
    model.params_mut().load_from(entries).map_err(|e| FarError::from(e.context(path.display().to_string())))?;
    let mut state = TrainState::new(model.params())?;
    state.step = step;
    let mut optimizer = AdamW::new(model.params(), &state.trainable);
    optimizer.t = opt_t;
    for (id, p) in model.params().iter() {
        if !state.trainable[id.0] {
            continue;
        }
        for (prefix, slot) in [("optim.m/", &mut optimizer.m[id.0]), ("optim.v/", &mut optimizer.v[id.0])] {
            let view = st
                .tensor(&format!("{prefix}{}", p.name))
                .map_err(|_| bad(format!("missing {prefix}{}", p.name)))?;
            let data = from_bytes(view.data());
            if data.len() != p.data.len() {
                return Err(bad(format!("{prefix}{} has wrong size", p.name)));
            }
            *slot = Some(data);
        }
    }
    state.optimizer = optimizer;
    Ok(Checkpoint {
        model,
        vocab,
        config,
        state,
    })
}
