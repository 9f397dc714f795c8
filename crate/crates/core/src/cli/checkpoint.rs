//! Binary checkpoints: little-endian, self-describing, bit-exact for `f32`.
//!
//! Layout: magic `ARLLM1`, `u32` version, model config, reserved vocabulary
//! names, producing seed, named tensor table, optional optimizer moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters, PosEncoding};
use crate::pretrain::OptimizerState;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 6] = b"ARLLM1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters<f32>,
    pub vocab: Vocabulary,
    pub optimizer: Option<OptimizerState<f32>>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Refuse a checkpoint whose architecture differs from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let got = self.config();
        let fields: [(&str, String, String); 10] = [
            ("d_model", got.d_model.to_string(), expected.d_model.to_string()),
            (
                "vocab_size",
                got.vocab_size.to_string(),
                expected.vocab_size.to_string(),
            ),
            ("n_layer", got.n_layer.to_string(), expected.n_layer.to_string()),
            ("n_head", got.n_head.to_string(), expected.n_head.to_string()),
            ("context", got.context.to_string(), expected.context.to_string()),
            (
                "pos_encoding",
                got.pos_encoding.to_string(),
                expected.pos_encoding.to_string(),
            ),
            (
                "tie_output",
                got.tie_output.to_string(),
                expected.tie_output.to_string(),
            ),
            (
                "attn_scale",
                got.attn_scale.to_string(),
                expected.attn_scale.to_string(),
            ),
            ("ffn_mult", got.ffn_mult.to_string(), expected.ffn_mult.to_string()),
            (
                "layer_norm",
                got.layer_norm.to_string(),
                expected.layer_norm.to_string(),
            ),
        ];
        for (name, g, e) in fields {
            if g != e {
                return Err(Error::Config(format!("checkpoint has {name} = {g}, run expects {e}")));
            }
        }
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_values<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    for &x in t.data() {
        w.write_f32::<LE>(x)?;
    }
    Ok(())
}

fn pos_code(p: PosEncoding) -> u8 {
    match p {
        PosEncoding::Rope => 0,
        PosEncoding::Sinusoidal => 1,
        PosEncoding::Learned => 2,
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    let c = ck.config();
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    for v in [c.d_model, c.vocab_size, c.n_layer, c.n_head, c.context, c.ffn_mult] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_u8(pos_code(c.pos_encoding))?;
    w.write_u8(c.tie_output as u8)?;
    w.write_u8(c.attn_scale as u8)?;
    w.write_u8(c.layer_norm as u8)?;
    w.write_f64::<LE>(c.ln_eps)?;
    let names = ck.vocab.reserved_names();
    w.write_u32::<LE>(names.len() as u32)?;
    for n in names {
        write_str(w, n)?;
    }
    w.write_u64::<LE>(ck.seed)?;
    let tensors = ck.params.tensors();
    w.write_u32::<LE>(tensors.len() as u32)?;
    for (name, t) in &tensors {
        write_str(w, name)?;
        w.write_u32::<LE>(t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        write_values(w, t)?;
    }
    match &ck.optimizer {
        None => w.write_u8(0)?,
        Some(s) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(s.step)?;
            for t in s.m.iter().chain(&s.v) {
                write_values(w, t)?;
            }
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(s) = &ck.optimizer {
        if !s.matches(&ck.params) {
            return Err(Error::State("optimizer state does not match the parameters".into()));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

/// Reader that turns short reads into format errors naming the field.
struct Fields<R> {
    r: R,
}

impl<R: Read> Fields<R> {
    fn wrap<T>(field: &str, v: std::io::Result<T>) -> Result<T> {
        v.map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(field, "truncated"),
            _ => Error::Io(e),
        })
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Self::wrap(field, self.r.read_u8())
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Self::wrap(field, self.r.read_u32::<LE>())
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Self::wrap(field, self.r.read_u64::<LE>())
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Self::wrap(field, self.r.read_f64::<LE>())
    }

    fn bool(&mut self, field: &str) -> Result<bool> {
        match self.u8(field)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(field, format!("expected 0 or 1, found {b}"))),
        }
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        if n > 1 << 16 {
            return Err(Error::format(field, format!("implausible string length {n}")));
        }
        let mut buf = vec![0u8; n];
        Self::wrap(field, self.r.read_exact(&mut buf))?;
        String::from_utf8(buf).map_err(|_| Error::format(field, "not UTF-8"))
    }

    fn values(&mut self, field: &str, out: &mut [f32]) -> Result<()> {
        Self::wrap(field, self.r.read_f32_into::<LE>(out))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut f = Fields { r };
    let mut magic = [0u8; 6];
    Fields::<R>::wrap("magic", f.r.read_exact(&mut magic))?;
    if &magic != MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected {:?}", std::str::from_utf8(MAGIC).unwrap()),
        ));
    }
    let version = f.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let mut dims = [0usize; 6];
    for (d, name) in dims.iter_mut().zip([
        "config.d_model",
        "config.vocab_size",
        "config.n_layer",
        "config.n_head",
        "config.context",
        "config.ffn_mult",
    ]) {
        *d = f.u32(name)? as usize;
    }
    let pos = match f.u8("config.pos_encoding")? {
        0 => PosEncoding::Rope,
        1 => PosEncoding::Sinusoidal,
        2 => PosEncoding::Learned,
        b => return Err(Error::format("config.pos_encoding", format!("unknown code {b}"))),
    };
    let mut config = ModelConfig::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
    config.ffn_mult = dims[5];
    config.pos_encoding = pos;
    config.tie_output = f.bool("config.tie_output")?;
    config.attn_scale = f.bool("config.attn_scale")?;
    config.layer_norm = f.bool("config.layer_norm")?;
    config.ln_eps = f.f64("config.ln_eps")?;
    config.validate().map_err(|e| Error::format("config", e.to_string()))?;

    let n_reserved = f.u32("vocabulary")? as usize;
    if n_reserved > 1 << 16 {
        return Err(Error::format(
            "vocabulary",
            format!("implausible reserved count {n_reserved}"),
        ));
    }
    let names = (0..n_reserved)
        .map(|_| f.string("vocabulary"))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_reserved(names)?;
    if vocab.size() != config.vocab_size {
        return Err(Error::format(
            "vocabulary",
            format!("{} tokens but config.vocab_size = {}", vocab.size(), config.vocab_size),
        ));
    }
    let seed = f.u64("seed")?;

    let mut params = ModelParameters::<f32>::zeros(&config)?;
    let count = f.u32("tensor_table")? as usize;
    {
        let slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::format(
                "tensor_table",
                format!("{count} tensors, config implies {}", slots.len()),
            ));
        }
        for (want, t) in slots {
            let field = format!("tensor {want}");
            let name = f.string(&field)?;
            if name != want {
                return Err(Error::format(&field, format!("found {name:?}")));
            }
            let ndim = f.u32(&field)? as usize;
            let shape = (0..ndim)
                .map(|_| f.u32(&field).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != t.shape() {
                return Err(Error::format(
                    &field,
                    format!("shape {shape:?}, expected {:?}", t.shape()),
                ));
            }
            f.values(&field, t.data_mut())?;
        }
    }
    let optimizer = if f.bool("optimizer")? {
        let mut s = OptimizerState::new(&params);
        s.step = f.u64("optimizer.step")?;
        for t in s.m.iter_mut() {
            f.values("optimizer.m", t.data_mut())?;
        }
        for t in s.v.iter_mut() {
            f.values("optimizer.v", t.data_mut())?;
        }
        Some(s)
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if f.r.read(&mut rest)? != 0 {
        return Err(Error::format("trailer", "unexpected bytes after the checkpoint"));
    }
    Ok(Checkpoint {
        params,
        vocab,
        optimizer,
        seed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}
