//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "ELAN" | version u32 | header-entry count u32
//!   per entry: key len u32, key bytes, value len u32, value bytes
//!   layer count u32
//!   per layer: in u32, out u32, activation tag u8,
//!              row-major f64 LE weights (out*in), f64 LE biases (out)
//!
//! Header entries carry consumer metadata (class lists, decoder ranges, ...).

use super::{Activation, DenseNet, Layer};
use crate::error::{ElaError, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ELAN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, net: &DenseNet, header: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    for (k, v) in header {
        f.write_all(&(k.len() as u32).to_le_bytes())?;
        f.write_all(k.as_bytes())?;
        f.write_all(&(v.len() as u32).to_le_bytes())?;
        f.write_all(v.as_bytes())?;
    }
    f.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for layer in &net.layers {
        f.write_all(&(layer.in_dim as u32).to_le_bytes())?;
        f.write_all(&(layer.out_dim as u32).to_le_bytes())?;
        f.write_all(&[layer.activation.tag()])?;
        for w in &layer.weights {
            f.write_all(&w.to_le_bytes())?;
        }
        for b in &layer.biases {
            f.write_all(&b.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(DenseNet, Vec<(String, String)>)> {
    let bad = |reason: &str| ElaError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n_header = read_u32(&mut f)? as usize;
    let mut header = Vec::with_capacity(n_header);
    for _ in 0..n_header {
        let k = read_string(&mut f)?;
        let v = read_string(&mut f)?;
        header.push((k, v));
    }
    let n_layers = read_u32(&mut f)? as usize;
    if n_layers == 0 {
        return Err(bad("zero layers"));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = read_u32(&mut f)? as usize;
        let out_dim = read_u32(&mut f)? as usize;
        let mut tag = [0u8; 1];
        f.read_exact(&mut tag)?;
        let activation = Activation::from_tag(tag[0]).map_err(|_| bad("bad activation tag"))?;
        let mut weights = vec![0.0; in_dim * out_dim];
        for w in &mut weights {
            *w = read_f64(&mut f)?;
        }
        let mut biases = vec![0.0; out_dim];
        for b in &mut biases {
            *b = read_f64(&mut f)?;
        }
        layers.push(Layer {
            in_dim,
            out_dim,
            weights,
            biases,
            activation,
        });
    }
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(bad("layer dimensions do not chain"));
        }
    }
    Ok((DenseNet { layers }, header))
}

/// Human-readable header summary for the `describe` subcommand.
pub fn describe_checkpoint(path: &Path) -> Result<String> {
    let (net, header) = read_checkpoint(path)?;
    let mut out = String::new();
    out.push_str(&format!(
        "magic=ELAN version={CHECKPOINT_VERSION} layers={} params={}\n",
        net.layers.len(),
        net.param_count()
    ));
    for layer in &net.layers {
        out.push_str(&format!(
            "  layer {}x{} act={:?}\n",
            layer.in_dim, layer.out_dim, layer.activation
        ));
    }
    for (k, v) in &header {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(ElaError::Format {
            path: String::new(),
            reason: "oversized header string".into(),
        });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ElaError::Format {
        path: String::new(),
        reason: "non-utf8 header string".into(),
    })
}
