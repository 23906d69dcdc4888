//! Model checkpoint file.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "DSCK" | version u32
//! n_layers d_model n_heads d_ff vocab_size max_seq_len   (u64 each)
//! has_lora u8
//!   [rank u64 | scale f64 | site mask u8 | init mode u8]   when has_lora = 1
//! base tensors, f64 each, in Model::base_tensors order
//! adapter scalars, f64 each, in parameter-address order   when has_lora = 1
//! ```

use std::path::Path;

use crate::binio::{FormatError, Reader, Writer};
use crate::lora::{AdapterSet, InitMode, LoraConfig, SiteSet};
use crate::model::{Model, ModelConfig};

const MAGIC: [u8; 4] = *b"DSCK";
const VERSION: u32 = 1;

pub fn encode(model: &Model, adapters: Option<&AdapterSet>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    let c = &model.config;
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
        w.u64(v as u64);
    }
    match adapters {
        Some(set) => {
            let lc = set.config();
            w.u8(1);
            w.u64(lc.rank as u64);
            w.f64(lc.scale);
            w.u8(lc.sites.bits());
            w.u8(lc.init.code());
        }
        None => w.u8(0),
    }
    for t in model.base_tensors() {
        w.f64s(t.data());
    }
    if let Some(set) = adapters {
        w.f64s(set.values());
    }
    w.into_bytes()
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Option<AdapterSet>), FormatError> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u64()? as usize;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_ff: dims[3],
        vocab_size: dims[4],
        max_seq_len: dims[5],
    };
    config
        .validate()
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    let lora = match r.u8()? {
        0 => None,
        1 => {
            let rank = r.u64()? as usize;
            let scale = r.f64()?;
            let sites = SiteSet::from_bits(r.u8()?).map_err(|e| FormatError::Invalid(e.to_string()))?;
            let code = r.u8()?;
            let init = InitMode::from_code(code)
                .ok_or_else(|| FormatError::Invalid(format!("unknown init mode code {code}")))?;
            Some(LoraConfig {
                rank,
                scale,
                sites,
                init,
            })
        }
        other => return Err(FormatError::Invalid(format!("bad adapter flag {other}"))),
    };
    let n_adapter = lora.map_or(0, |lc| crate::lora::adapter_param_count(&config, &lc));
    r.require((config.base_param_count() + n_adapter) * 8)?;

    // Shapes come from a fresh init; every value is then overwritten.
    let mut model = Model::init(config, 0).map_err(|e| FormatError::Invalid(e.to_string()))?;
    for t in model.base_tensors_mut() {
        let values = r.f64s(t.len())?;
        t.data_mut().copy_from_slice(&values);
    }
    let adapters = match lora {
        Some(lc) => {
            let values = r.f64s(n_adapter)?;
            model.lora = Some(lc);
            Some(AdapterSet::from_values(&config, lc, values).map_err(|e| FormatError::Invalid(e.to_string()))?)
        }
        None => None,
    };
    r.finish()?;
    Ok((model, adapters))
}

pub fn save(path: &Path, model: &Model, adapters: Option<&AdapterSet>) -> Result<(), FormatError> {
    crate::binio::write_atomic(path, &encode(model, adapters))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Option<AdapterSet>), FormatError> {
    decode(&std::fs::read(path)?)
}
