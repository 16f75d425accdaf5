use super::{Ablation, ModelConfig, ModelError, PetModel};
use crate::autodiff::{ParamStore, Tensor};
use crate::codec::{DecodeError, Reader, Writer};

const MAGIC: &[u8; 8] = b"PETCKPT\0";
const VERSION: u32 = 1;

/// A saved model plus the run settings it was trained with (opaque TOML).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PetModel,
    pub metadata: String,
}

fn ablation_code(a: Ablation) -> u8 {
    match a {
        Ablation::None => 0,
        Ablation::NoEdgeLabels => 1,
        Ablation::NoNodeLabels => 2,
    }
}

pub fn encode_checkpoint(model: &PetModel, metadata: &str) -> Vec<u8> {
    let c = model.config();
    let mut w = Writer::new(MAGIC, VERSION);
    w.usize(c.embed_dim);
    w.usize(c.layers);
    w.usize(c.mlp_hidden.len());
    for &h in &c.mlp_hidden {
        w.usize(h);
    }
    w.usize(c.field_sizes.len());
    for &s in &c.field_sizes {
        w.usize(s);
    }
    w.u8(ablation_code(c.ablation));
    w.str(metadata);
    w.usize(model.store().len());
    for (_, name, t) in model.store().iter() {
        w.str(name);
        w.usize(t.rows());
        w.usize(t.cols());
        w.f64s(t.data());
    }
    w.finish()
}

/// Decodes a checkpoint. With `expected`, the stored configuration must
/// match it exactly; every parameter must have the name and shape the
/// stored configuration implies.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint, ModelError> {
    let mut r = Reader::new(bytes, MAGIC, "PETCKPT", VERSION)?;
    let embed_dim = r.usize("embed dim")?;
    let layers = r.usize("layer count")?;
    let hidden = r.len("MLP width count", 8)?;
    let mlp_hidden = (0..hidden)
        .map(|_| r.usize("MLP width"))
        .collect::<Result<Vec<_>, _>>()?;
    let fields = r.len("field count", 8)?;
    let field_sizes = (0..fields)
        .map(|_| r.usize("field size"))
        .collect::<Result<Vec<_>, _>>()?;
    let ablation = match r.u8("ablation")? {
        0 => Ablation::None,
        1 => Ablation::NoEdgeLabels,
        2 => Ablation::NoNodeLabels,
        other => return Err(DecodeError::Invalid(format!("ablation code {other}")).into()),
    };
    let metadata = r.str("metadata")?.to_string();
    // each layer contributes at least four parameter records
    if layers > r.remaining() / 64 {
        return Err(
            DecodeError::Invalid(format!("layer count {layers} exceeds the payload")).into(),
        );
    }
    let config = ModelConfig {
        embed_dim,
        layers,
        mlp_hidden,
        field_sizes,
        ablation,
    };
    config.validate()?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(ModelError::ShapeMismatch(format!(
                "checkpoint holds {config:?}, expected {exp:?}"
            )));
        }
    }
    let shapes = config.param_shapes();
    let count = r.len("parameter count", 24)?;
    if count != shapes.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "expected {} parameters, found {count}",
            shapes.len()
        )));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in shapes {
        let found = r.str("parameter name")?;
        let fr = r.usize("rows")?;
        let fc = r.usize("cols")?;
        if found != name || (fr, fc) != (rows, cols) {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {name} {rows}x{cols}, found {found} {fr}x{fc}"
            )));
        }
        let data = r.f64s("parameter values")?;
        if data.len() != rows * cols {
            return Err(DecodeError::Invalid(format!(
                "{name} holds {} values, expected {}",
                data.len(),
                rows * cols
            ))
            .into());
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DecodeError::Invalid(format!("{name} holds a non-finite value")).into());
        }
        store.insert(name, Tensor::from_vec(rows, cols, data))?;
    }
    r.finish()?;
    Ok(Checkpoint {
        model: PetModel::from_store(config, store)?,
        metadata,
    })
}
