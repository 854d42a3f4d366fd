//! Checkpoint container: named f64 tensors (parameters, buffers and
//! optimizer momentum) plus run metadata, in a little-endian binary layout.
//! The same container serves as the pretrained-backbone weight format.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.momentum.";

/// Serialized RNG position (ChaCha8: seed, stream, word position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Decoded checkpoint contents.
pub struct Checkpoint {
    pub config_digest: String,
    pub epoch: u32,
    pub rng: RngState,
    /// Model tensors: (name, learnable, data).
    pub tensors: Vec<(String, bool, ArrayD<f64>)>,
    /// Optimizer momentum buffers keyed by parameter name.
    pub optim: Vec<(String, ArrayD<f64>)>,
}

fn write_tensor<W: Write>(
    w: &mut W,
    name: &str,
    learnable: bool,
    data: &ArrayD<f64>,
) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    w.write_u8(learnable as u8)?;
    w.write_u8(data.ndim() as u8)?;
    for &d in data.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in data.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, bool, ArrayD<f64>)> {
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-utf8 name".into()))?;
    let learnable = r.read_u8()? != 0;
    let ndim = r.read_u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = vec![0f64; len];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape for {name}: {e}")))?;
    Ok((name, learnable, arr))
}

/// Writes parameters, buffers and optimizer state.
pub fn save<T: Scalar>(
    path: &Path,
    ps: &ParamStore<T>,
    optim: &[(String, ArrayD<T>)],
    config_digest: &str,
    epoch: u32,
    rng: &RngState,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let digest = config_digest.as_bytes();
    w.write_u16::<LittleEndian>(digest.len() as u16)?;
    w.write_all(digest)?;
    w.write_u32::<LittleEndian>(epoch)?;
    w.write_all(&rng.seed)?;
    w.write_u64::<LittleEndian>(rng.stream)?;
    w.write_u64::<LittleEndian>(rng.word_pos as u64)?;
    w.write_u64::<LittleEndian>((rng.word_pos >> 64) as u64)?;
    let total = ps.len() + optim.len();
    w.write_u32::<LittleEndian>(total as u32)?;
    for p in ps.params() {
        let data = ps.value(p).mapv(|v| v.as_f64());
        write_tensor(&mut w, ps.name(p), ps.is_learnable(p), &data)?;
    }
    for (name, v) in optim {
        let data = v.mapv(|x| x.as_f64());
        write_tensor(&mut w, &format!("{OPTIM_PREFIX}{name}"), false, &data)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let digest_len = r.read_u16::<LittleEndian>()? as usize;
    let mut digest = vec![0u8; digest_len];
    r.read_exact(&mut digest)?;
    let config_digest =
        String::from_utf8(digest).map_err(|_| Error::Checkpoint("non-utf8 digest".into()))?;
    let epoch = r.read_u32::<LittleEndian>()?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let stream = r.read_u64::<LittleEndian>()?;
    let lo = r.read_u64::<LittleEndian>()? as u128;
    let hi = r.read_u64::<LittleEndian>()? as u128;
    let rng = RngState { seed, stream, word_pos: lo | (hi << 64) };
    let total = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::new();
    let mut optim = Vec::new();
    for _ in 0..total {
        let (name, learnable, data) = read_tensor(&mut r)?;
        match name.strip_prefix(OPTIM_PREFIX) {
            Some(pname) => optim.push((pname.to_string(), data)),
            None => tensors.push((name, learnable, data)),
        }
    }
    Ok(Checkpoint { config_digest, epoch, rng, tensors, optim })
}

/// Copies checkpoint tensors into an existing store by name, optionally
/// restricted to a prefix. Shapes must match; names absent from the store
/// are ignored (a checkpoint may carry more than a sub-model needs).
pub fn load_tensors_into<T: Scalar>(
    ps: &mut ParamStore<T>,
    path: &Path,
    prefix: Option<&str>,
) -> Result<usize> {
    let ck = load(path)?;
    apply_tensors(ps, &ck.tensors, prefix)
}

pub fn apply_tensors<T: Scalar>(
    ps: &mut ParamStore<T>,
    tensors: &[(String, bool, ArrayD<f64>)],
    prefix: Option<&str>,
) -> Result<usize> {
    let mut applied = 0usize;
    for (name, _, data) in tensors {
        if let Some(pre) = prefix {
            if !name.starts_with(pre) {
                continue;
            }
        }
        if let Some(p) = ps.lookup(name) {
            if ps.value(p).shape() != data.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: store {:?} vs file {:?}",
                    ps.value(p).shape(),
                    data.shape()
                )));
            }
            ps.set_value(p, data.mapv(T::cast));
            applied += 1;
        }
    }
    Ok(applied)
}

/// Marks all store tensors under a name prefix as frozen.
pub fn freeze_prefix<T: Scalar>(ps: &mut ParamStore<T>, prefix: &str) {
    let params: Vec<_> = ps.params().collect();
    for p in params {
        if ps.name(p).starts_with(prefix) {
            ps.set_learnable(p, false);
        }
    }
}
