//! Channel-last dense 4D tensors and the DCNT fixture file format.
//!
//! Layout is strictly NHWC: the channel index is contiguous in memory so
//! kernels can load a whole channel block with one packed read. fp16 is a
//! storage format only; all arithmetic widens to fp32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use crate::error::{DcnError, Result};

pub const FIXTURE_MAGIC: &[u8; 4] = b"DCNT";
pub const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    F32,
    /// IEEE-754 binary16, storage only. Compute widens to fp32.
    F16,
}

impl ElementType {
    pub fn bytes_per_element(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F16 => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            ElementType::F32 => 0,
            ElementType::F16 => 1,
        }
    }
}

impl std::fmt::Display for ElementType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ElementType::F32 => "f32",
            ElementType::F16 => "f16",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(DcnError::InvalidShape(format!(
                "all dims must be >= 1, got ({n},{h},{w},{c})"
            )));
        }
        Ok(Shape { n, h, w, c })
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        false // dims are >= 1 by construction
    }

    /// Flat index: ((n·H + h)·W + w)·C + c.
    #[inline(always)]
    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FillSpec {
    Zeros,
    Constant(f32),
    SeededUniform { seed: u64, lo: f32, hi: f32 },
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

/// Deterministic stream used for every seeded fill in the crate.
/// Mirrored verbatim in tools/oracle/gen_fixtures.py.
#[derive(Debug, Clone)]
pub struct SeededStream {
    state: u64,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        SeededStream { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    #[inline]
    pub fn next_uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let f = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (lo as f64 + f * (hi as f64 - lo as f64)) as f32
    }

    pub fn fill(&mut self, out: &mut [f32], lo: f32, hi: f32) {
        for v in out {
            *v = self.next_uniform(lo, hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorNHWC {
    shape: Shape,
    data: Storage,
}

impl TensorNHWC {
    pub fn create(shape: Shape, dtype: ElementType, fill: FillSpec) -> Self {
        let len = shape.len();
        let f32_data: Vec<f32> = match fill {
            FillSpec::Zeros => vec![0.0; len],
            FillSpec::Constant(v) => vec![v; len],
            FillSpec::SeededUniform { seed, lo, hi } => {
                let mut rng = SeededStream::new(seed);
                let mut data = vec![0.0; len];
                rng.fill(&mut data, lo, hi);
                data
            }
        };
        Self::from_f32(shape, f32_data).cast(dtype)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::create(shape, ElementType::F32, FillSpec::Zeros)
    }

    /// Takes ownership of an fp32 buffer; length must equal shape.len().
    pub fn from_f32(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), shape.len(), "data length mismatch");
        TensorNHWC {
            shape,
            data: Storage::F32(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> ElementType {
        match self.data {
            Storage::F32(_) => ElementType::F32,
            Storage::F16(_) => ElementType::F16,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Widening element access.
    #[inline(always)]
    pub fn get(&self, n: usize, h: usize, w: usize, c: usize) -> f32 {
        let i = self.shape.index(n, h, w, c);
        match &self.data {
            Storage::F32(d) => d[i],
            Storage::F16(d) => d[i].to_f32(),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Storage::F32(d) => Some(d),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            Storage::F32(d) => Some(d),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[f16]> {
        match &self.data {
            Storage::F16(d) => Some(d),
            Storage::F32(_) => None,
        }
    }

    pub fn as_f16_mut(&mut self) -> Option<&mut [f16]> {
        match &mut self.data {
            Storage::F16(d) => Some(d),
            Storage::F32(_) => None,
        }
    }

    /// Takes ownership of an fp16 buffer; length must equal shape.len().
    pub fn from_f16(shape: Shape, data: Vec<f16>) -> Self {
        assert_eq!(data.len(), shape.len(), "data length mismatch");
        TensorNHWC {
            shape,
            data: Storage::F16(data),
        }
    }

    /// Copy of the contents widened to fp32, regardless of storage dtype.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            Storage::F32(d) => d.clone(),
            Storage::F16(d) => d.iter().map(|v| v.to_f32()).collect(),
        }
    }

    /// fp32→fp16 rounds to nearest even (overflow saturates to ±inf);
    /// fp16→fp32 is exact.
    pub fn cast(&self, target: ElementType) -> TensorNHWC {
        let data = match (&self.data, target) {
            (Storage::F32(d), ElementType::F16) => {
                Storage::F16(d.iter().map(|&v| f16::from_f32(v)).collect())
            }
            (Storage::F16(d), ElementType::F32) => {
                Storage::F32(d.iter().map(|v| v.to_f32()).collect())
            }
            (s, _) => s.clone(),
        };
        TensorNHWC {
            shape: self.shape,
            data,
        }
    }

    /// fp32 sum over all elements, accumulated sequentially. Used as a
    /// cross-run sanity checksum by the bench CLI.
    pub fn checksum(&self) -> f32 {
        match &self.data {
            Storage::F32(d) => d.iter().map(|&v| v as f64).sum::<f64>() as f32,
            Storage::F16(d) => d.iter().map(|v| v.to_f32() as f64).sum::<f64>() as f32,
        }
    }

    pub fn write_fixture<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(FIXTURE_MAGIC)?;
        w.write_all(&FIXTURE_VERSION.to_le_bytes())?;
        w.write_all(&[self.dtype().tag(), 4, 0, 0])?;
        for d in [self.shape.n, self.shape.h, self.shape.w, self.shape.c] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            Storage::F32(d) => {
                for v in d {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Storage::F16(d) => {
                for v in d {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_fixture<P: AsRef<Path>>(path: P) -> Result<TensorNHWC> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 12];
        read_at(&mut r, &mut header, 0)?;
        if &header[0..4] != FIXTURE_MAGIC {
            return Err(DcnError::Format {
                offset: 0,
                detail: format!("bad magic {:?}", &header[0..4]),
            });
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != FIXTURE_VERSION {
            return Err(DcnError::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let dtype = match header[8] {
            0 => ElementType::F32,
            1 => ElementType::F16,
            t => {
                return Err(DcnError::Format {
                    offset: 8,
                    detail: format!("unknown dtype tag {t}"),
                })
            }
        };
        if header[9] != 4 {
            return Err(DcnError::Format {
                offset: 9,
                detail: format!("expected ndim 4, got {}", header[9]),
            });
        }
        let mut dim_bytes = [0u8; 32];
        read_at(&mut r, &mut dim_bytes, 12)?;
        let mut dims = [0usize; 4];
        for (i, chunk) in dim_bytes.chunks_exact(8).enumerate() {
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            dims[i] = usize::try_from(d).map_err(|_| DcnError::Format {
                offset: 12 + 8 * i as u64,
                detail: format!("dimension {d} too large"),
            })?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| {
            DcnError::Format {
                offset: 12,
                detail: e.to_string(),
            }
        })?;
        let len = shape.len();
        let mut payload = vec![0u8; len * dtype.bytes_per_element()];
        read_at(&mut r, &mut payload, 44)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(DcnError::Format {
                offset: 44 + payload.len() as u64,
                detail: "trailing bytes after payload".into(),
            });
        }
        let data = match dtype {
            ElementType::F32 => Storage::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            ElementType::F16 => Storage::F16(
                payload
                    .chunks_exact(2)
                    .map(|b| f16::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(TensorNHWC { shape, data })
    }
}

fn read_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(DcnError::Format {
                offset: offset + filled as u64,
                detail: format!("truncated: expected {} more bytes", buf.len() - filled),
            });
        }
        filled += n;
    }
    Ok(())
}
