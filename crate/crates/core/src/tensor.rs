//! Dense row-major tensors and the [`SmashedData`] container exchanged at the
//! cut layer.
//!
//! Tensors are immutable once built: every constructor checks that the shape
//! matches the buffer and that all values are finite. To change values, take
//! the buffer out with [`Tensor::into_data`] and build a new tensor.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes of the tensor dump format.
pub const SLT1_MAGIC: &[u8; 4] = b"SLT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite element {} at {}", data[i], i)));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor from a buffer the caller has produced by finite
    /// arithmetic on finite inputs. Shape is still checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Elementwise map; fails if the map produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Serializes as an SLT1 dump: magic, u8 rank, rank × u32 LE dims, then
    /// f32 LE values.
    pub fn to_slt1_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::arg("rank exceeds 255"));
        }
        let mut out = Vec::with_capacity(slt1_len(&self.shape));
        out.extend_from_slice(SLT1_MAGIC);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::arg("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::arg(format!("value {v} overflows f32")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_slt1_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 {
            return Err(Error::format(bytes.len(), "truncated SLT1 header"));
        }
        if &bytes[..4] != SLT1_MAGIC {
            return Err(Error::format(0, "bad SLT1 magic"));
        }
        let rank = bytes[4] as usize;
        let dims_end = 5 + 4 * rank;
        if bytes.len() < dims_end {
            return Err(Error::format(bytes.len(), "truncated SLT1 dims"));
        }
        let shape: Vec<usize> = bytes[5..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel = checked_numel(&shape).map_err(|_| Error::format(5, "dims overflow"))?;
        let expected = numel
            .checked_mul(4)
            .and_then(|p| p.checked_add(dims_end))
            .ok_or_else(|| Error::format(5, "dims overflow"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!("payload length {} != expected {}", bytes.len(), expected),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for (i, c) in bytes[dims_end..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(dims_end + 4 * i, "non-finite value"));
            }
            data.push(v as f64);
        }
        Ok(Self { shape, data })
    }

    pub fn write_slt1(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_slt1_bytes()?)
    }

    pub fn read_slt1(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_slt1_bytes(&std::fs::read(path)?)
    }
}

/// Byte length of an SLT1 dump for `shape`.
pub fn slt1_len(shape: &[usize]) -> usize {
    5 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))
}

/// Writes `bytes` to a temp file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("not a file path: {}", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.tmp", name.to_string_lossy())),
        None => Path::new(&format!(".{}.tmp", name.to_string_lossy())).to_path_buf(),
    };
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Which way smashed data travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Client → server.
    Activations,
    /// Server → client.
    Gradients,
}

impl Direction {
    pub fn to_byte(self) -> u8 {
        match self {
            Direction::Activations => 0,
            Direction::Gradients => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Direction::Activations),
            1 => Some(Direction::Gradients),
            _ => None,
        }
    }
}

/// A `[B, C, H, W]` activation or activation-gradient tensor at the cut
/// layer, tagged with the training round and direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedData {
    tensor: Tensor,
    round: u32,
    direction: Direction,
}

impl SmashedData {
    pub fn new(tensor: Tensor, round: u32, direction: Direction) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::Shape(format!(
                "smashed data must be [B,C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        if tensor.shape()[1] == 0 {
            return Err(Error::Shape("smashed data needs at least one channel".into()));
        }
        if tensor.is_empty() {
            return Err(Error::Shape("smashed data has no elements".into()));
        }
        Ok(Self {
            tensor,
            round,
            direction,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn with_round(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// `[B, C, H, W]`.
    pub fn dims(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// N = B·H·W.
    pub fn elements_per_channel(&self) -> usize {
        let [b, _, h, w] = self.dims();
        b * h * w
    }

    /// The N elements of channel `c`, batch-major then row-major spatial.
    pub fn channel_view(&self, c: usize) -> Result<Vec<f64>> {
        let [b, ch, h, w] = self.dims();
        if c >= ch {
            return Err(Error::Index { index: c, len: ch });
        }
        let plane = h * w;
        let data = self.tensor.data();
        let mut out = Vec::with_capacity(b * plane);
        for bi in 0..b {
            let start = (bi * ch + c) * plane;
            out.extend_from_slice(&data[start..start + plane]);
        }
        Ok(out)
    }

    pub fn channel_views(&self) -> Vec<Vec<f64>> {
        (0..self.channels())
            .map(|c| self.channel_view(c).expect("in range"))
            .collect()
    }

    /// Inverse of [`channel_views`](Self::channel_views).
    pub fn from_channels(
        dims: [usize; 4],
        channels: &[Vec<f64>],
        round: u32,
        direction: Direction,
    ) -> Result<Self> {
        let [b, ch, h, w] = dims;
        let plane = h * w;
        if channels.len() != ch {
            return Err(Error::Shape(format!(
                "expected {} channels, got {}",
                ch,
                channels.len()
            )));
        }
        if let Some(bad) = channels.iter().position(|v| v.len() != b * plane) {
            return Err(Error::Shape(format!(
                "channel {} has {} elements, expected {}",
                bad,
                channels[bad].len(),
                b * plane
            )));
        }
        let mut data = vec![0.0; b * ch * plane];
        for (c, values) in channels.iter().enumerate() {
            for bi in 0..b {
                let dst = (bi * ch + c) * plane;
                data[dst..dst + plane].copy_from_slice(&values[bi * plane..(bi + 1) * plane]);
            }
        }
        Self::new(Tensor::new(dims.to_vec(), data)?, round, direction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smashed(shape: [usize; 4], data: Vec<f64>) -> SmashedData {
        SmashedData::new(Tensor::new(shape.to_vec(), data).unwrap(), 0, Direction::Activations)
            .unwrap()
    }

    #[test]
    fn single_element_view() {
        let s = smashed([1, 1, 1, 1], vec![3.5]);
        assert_eq!(s.channel_view(0).unwrap(), vec![3.5]);
    }

    #[test]
    fn view_follows_bchw_layout() {
        // layout B,C,H,W = [2,2,1,1]: data [a0, a1, b0, b1]
        let s = smashed([2, 2, 1, 1], vec![10.0, 11.0, 20.0, 21.0]);
        assert_eq!(s.channel_view(1).unwrap(), vec![11.0, 21.0]);
        assert_eq!(s.channel_view(0).unwrap(), vec![10.0, 20.0]);
    }

    #[test]
    fn view_out_of_range() {
        let s = smashed([1, 2, 1, 1], vec![1.0, 2.0]);
        assert!(matches!(s.channel_view(2), Err(Error::Index { index: 2, len: 2 })));
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![0.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(SmashedData::new(t, 0, Direction::Activations).is_err());
    }

    #[test]
    fn slt1_round_trip_and_errors() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 3.0, 0.0, 7.5]).unwrap();
        let bytes = t.to_slt1_bytes().unwrap();
        assert_eq!(bytes.len(), slt1_len(t.shape()));
        assert_eq!(&bytes[..4], b"SLT1");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(Tensor::from_slt1_bytes(&bytes).unwrap(), t);
        assert!(Tensor::from_slt1_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::from_slt1_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn channel_views_reassemble_exactly(
            b in 1usize..4, c in 1usize..5, h in 1usize..4, w in 1usize..4, seed in any::<u64>()
        ) {
            let n = b * c * h * w;
            let data: Vec<f64> = (0..n)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0 - 50.0)
                .collect();
            let s = smashed([b, c, h, w], data.clone());
            let views = s.channel_views();
            prop_assert!(views.iter().all(|v| v.len() == b * h * w));
            let mut all: Vec<f64> = views.concat();
            let mut orig = data;
            all.sort_by(f64::total_cmp);
            orig.sort_by(f64::total_cmp);
            prop_assert_eq!(all, orig);
            let back = SmashedData::from_channels(s.dims(), &views, 0, Direction::Activations).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
