//! `.cgs` container: fixed little-endian header, section table and
//! independently range-coded sections.

use half::f16;

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::feature_grid::GridConfig;
use crate::math::Vec3;

pub const MAGIC: [u8; 4] = *b"CGS2";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Static = 0,
    Intra = 1,
    Predicted = 2,
}

impl FrameKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Static),
            1 => Ok(Self::Intra),
            2 => Ok(Self::Predicted),
            _ => Err(Error::Corrupt(format!("unknown frame kind {v}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Intra => "intra",
            Self::Predicted => "predicted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SectionId {
    Weights = 0,
    Grids = 1,
    Locations = 2,
    Covariances = 3,
    Hyperpriors = 4,
    Embeddings = 5,
    CoupledEmbeddings = 6,
    TemporalResidues = 7,
}

impl SectionId {
    pub const ALL: [SectionId; 8] = [
        Self::Weights,
        Self::Grids,
        Self::Locations,
        Self::Covariances,
        Self::Hyperpriors,
        Self::Embeddings,
        Self::CoupledEmbeddings,
        Self::TemporalResidues,
    ];

    fn from_u8(v: u8) -> Result<Self> {
        Self::ALL.get(v as usize).copied().ok_or_else(|| Error::Corrupt(format!("unknown section id {v}")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Weights => "network_weights",
            Self::Grids => "grid_tables",
            Self::Locations => "anchor_locations",
            Self::Covariances => "anchor_covariances",
            Self::Hyperpriors => "hyperpriors",
            Self::Embeddings => "anchor_embeddings",
            Self::CoupledEmbeddings => "coupled_embeddings",
            Self::TemporalResidues => "temporal_residues",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub kind: FrameKind,
    pub frame_index: u32,
    pub config: CodecConfig,
    pub bounds_min: Vec3<f32>,
    pub bounds_max: Vec3<f32>,
    /// Anchors coded in this stream.
    pub anchors: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    /// Present sections in id order.
    pub sections: Vec<(SectionId, Vec<u8>)>,
}

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f16(&mut self, v: f32) {
        self.buf.extend_from_slice(&f16::from_f32(v).to_le_bytes());
    }
}

/// Little-endian byte source that never reads past its slice.
#[derive(Debug)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn f16(&mut self) -> Result<f32> {
        Ok(f16::from_le_bytes(self.array()?).to_f32())
    }
}

/// Rounds to the nearest half-precision value.
pub fn round_f16(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

fn write_grid_config(w: &mut ByteWriter, g: &GridConfig) -> Result<()> {
    let small = |v: usize, what: &str| u8::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit the header")));
    w.u8(small(g.levels, "grid levels")?);
    w.u32(g.base_resolution);
    w.f64(g.growth);
    w.u8(small(g.log2_table_size as usize, "grid table size")?);
    w.u8(small(g.feature_dim, "grid feature dim")?);
    for p in g.primes {
        w.u32(p);
    }
    Ok(())
}

fn read_grid_config(r: &mut ByteReader<'_>) -> Result<GridConfig> {
    let g = GridConfig {
        levels: r.u8()? as usize,
        base_resolution: r.u32()?,
        growth: r.f64()?,
        log2_table_size: r.u8()? as u32,
        feature_dim: r.u8()? as usize,
        primes: [r.u32()?, r.u32()?, r.u32()?],
    };
    g.validate().map_err(|e| Error::Corrupt(format!("grid config: {e}")))?;
    if g.levels * g.feature_dim * g.table_size() > 1 << 26 {
        return Err(Error::Corrupt("grid tables too large".into()));
    }
    Ok(g)
}

const TABLE_ENTRY: usize = 9;

impl Bitstream {
    pub fn section(&self, id: SectionId) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(s, _)| *s == id)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Corrupt(format!("missing section {}", id.name())))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let c = &h.config;
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u16(VERSION);
        w.u8(h.kind as u8);
        w.u32(h.frame_index);
        w.u32(u32::try_from(c.k).map_err(|_| Error::InvalidArgument("K does not fit the header".into()))?);
        w.u32(h.anchors);
        write_grid_config(&mut w, &c.grid)?;
        write_grid_config(&mut w, &c.temporal_grid)?;
        for v in [c.location_step, c.grid_step, c.residue_step, c.init_steps[0], c.init_steps[1], c.init_steps[2], c.init_entropy_scale] {
            w.f64(v);
        }
        for v in h.bounds_min.iter().chain(&h.bounds_max) {
            w.f32(*v);
        }
        for pair in self.sections.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::InvalidArgument("sections must be unique and in id order".into()));
            }
        }
        w.u8(self.sections.len() as u8);
        let mut offset = w.buf.len() + TABLE_ENTRY * self.sections.len();
        for (id, bytes) in &self.sections {
            w.u8(*id as u8);
            let o = u32::try_from(offset).map_err(|_| Error::InvalidArgument("stream exceeds 4 GiB".into()))?;
            w.u32(o);
            w.u32(bytes.len() as u32);
            offset += bytes.len();
        }
        for (_, bytes) in &self.sections {
            w.buf.extend_from_slice(bytes);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        if r.bytes(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let kind = FrameKind::from_u8(r.u8()?)?;
        let frame_index = r.u32()?;
        let k = r.u32()? as usize;
        let anchors = r.u32()?;
        let grid = read_grid_config(&mut r)?;
        let temporal_grid = read_grid_config(&mut r)?;
        let mut v = [0.0f64; 7];
        for x in &mut v {
            *x = r.f64()?;
        }
        let config = CodecConfig {
            k,
            grid,
            temporal_grid,
            location_step: v[0],
            grid_step: v[1],
            residue_step: v[2],
            init_steps: [v[3], v[4], v[5]],
            init_entropy_scale: v[6],
        };
        config.validate().map_err(|e| Error::Corrupt(format!("codec config: {e}")))?;
        if k > 1 << 12 || (anchors as u64) * (k as u64) > 1 << 28 {
            return Err(Error::Corrupt("implausible primitive counts".into()));
        }
        let mut b = [0.0f32; 6];
        for x in &mut b {
            *x = r.f32()?;
        }
        let bounds_min = [b[0], b[1], b[2]];
        let bounds_max = [b[3], b[4], b[5]];
        if (0..3).any(|a| !(bounds_max[a] > bounds_min[a]) || !bounds_min[a].is_finite() || !bounds_max[a].is_finite()) {
            return Err(Error::Corrupt("invalid grid bounds".into()));
        }
        let n = r.u8()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            table.push((SectionId::from_u8(r.u8()?)?, r.u32()? as usize, r.u32()? as usize));
        }
        let mut expected = r.position();
        let mut sections = Vec::with_capacity(n);
        for (i, (id, off, len)) in table.iter().enumerate() {
            if i > 0 && table[i - 1].0 >= *id {
                return Err(Error::Corrupt("section table out of order".into()));
            }
            if *off != expected {
                return Err(Error::Corrupt(format!("section {} offset {off}, expected {expected}", id.name())));
            }
            let end = off.checked_add(*len).filter(|e| *e <= data.len()).ok_or(Error::Truncated)?;
            sections.push((*id, data[*off..end].to_vec()));
            expected = end;
        }
        if expected != data.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", data.len() - expected)));
        }
        Ok(Self { header: Header { kind, frame_index, config, bounds_min, bounds_max, anchors }, sections })
    }

    /// Byte size of each present section.
    pub fn section_sizes(&self) -> Vec<(SectionId, usize)> {
        self.sections.iter().map(|(id, b)| (*id, b.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                kind: FrameKind::Intra,
                frame_index: 3,
                config: CodecConfig::default(),
                bounds_min: [-1.0, -2.0, -3.0],
                bounds_max: [1.0, 2.0, 3.5],
                anchors: 7,
            },
            sections: vec![(SectionId::Weights, vec![1, 2, 3]), (SectionId::Locations, vec![]), (SectionId::Embeddings, vec![9; 40])],
        }
    }

    #[test]
    fn container_round_trips() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CGS2");
        let d = Bitstream::from_bytes(&bytes).unwrap();
        assert_eq!(d, b);
        assert_eq!(d.section(SectionId::Embeddings).unwrap().len(), 40);
        assert!(d.section(SectionId::Grids).is_err());
    }

    #[test]
    fn damaged_containers_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(Bitstream::from_bytes(&bytes[..cut]).is_err());
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Bitstream::from_bytes(&v), Err(Error::Version(9))));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(Bitstream::from_bytes(&v).is_err());
        let mut v = bytes;
        v.push(0);
        assert!(Bitstream::from_bytes(&v).is_err());
        let mut s = sample();
        s.sections.swap(0, 1);
        assert!(s.to_bytes().is_err());
    }

    #[test]
    fn half_precision_rounding() {
        assert_eq!(round_f16(1.0), 1.0);
        assert_eq!(round_f16(round_f16(0.1234)), round_f16(0.1234));
        let mut w = ByteWriter::default();
        w.f16(0.5);
        assert_eq!(ByteReader::new(&w.buf).f16().unwrap(), 0.5);
    }
}
