//! Two-layer model: block pooling with one winner per block, a second CFA
//! layer on the pooled features, and projection of the upper dictionary
//! down to data-layer filters.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Array3};

use crate::cfa::{read_dictionary, train_cfa_from, write_dictionary, CfaModel, SolverConfig, TraceRow};
use crate::cs::{reconstruct_insitu_from, reconstruct_prelearned, MeasurementSet, ReconstructionResult};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{conv2_full, ConvDictionary, ConvPolicy, FeatureSet, ImageTensor, Map};

pub const WINNER_MAGIC: &[u8; 5] = b"CFAW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub atoms: usize,
    /// `(rows, cols)`
    pub kernel: (usize, usize),
    /// `(rows, cols)` of a pooling block; `(1, 1)` for no pooling.
    pub pool: (usize, usize),
}

/// Geometry of a two-layer model for a fixed input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub image: (usize, usize),
    pub layers: [LayerSpec; 2],
}

impl LayerConfig {
    /// Rejects configurations where a layer's feature maps do not tile
    /// exactly into its pooling blocks.
    pub fn new(image: (usize, usize), layers: [LayerSpec; 2]) -> Result<Self> {
        let mut input = image;
        for (l, spec) in layers.iter().enumerate() {
            let (kh, kw) = spec.kernel;
            let (ph, pw) = spec.pool;
            if spec.atoms == 0 || kh == 0 || kw == 0 || ph == 0 || pw == 0 {
                return Err(Error::param(format!("layer {} has a zero-sized setting", l + 1)));
            }
            if kh > input.0 || kw > input.1 {
                return Err(Error::shape(format!(
                    "layer {} kernel {kh}x{kw} exceeds its {}x{} input",
                    l + 1,
                    input.0,
                    input.1
                )));
            }
            let f = (input.0 + kh - 1, input.1 + kw - 1);
            if f.0 % ph != 0 || f.1 % pw != 0 {
                return Err(Error::shape(format!(
                    "layer {} feature maps {}x{} are not divisible into {ph}x{pw} pooling blocks",
                    l + 1,
                    f.0,
                    f.1
                )));
            }
            input = (f.0 / ph, f.1 / pw);
        }
        Ok(LayerConfig { image, layers })
    }

    /// 9x9x16 with 3x3 pooling, then 7x7x64, on 28x28 digits.
    pub fn mnist() -> Self {
        LayerConfig::new(
            (28, 28),
            [
                LayerSpec {
                    atoms: 16,
                    kernel: (9, 9),
                    pool: (3, 3),
                },
                LayerSpec {
                    atoms: 64,
                    kernel: (7, 7),
                    pool: (1, 1),
                },
            ],
        )
        .expect("preset is consistent")
    }

    pub fn feature_shape(&self, layer: usize) -> (usize, usize) {
        let input = self.input_shape(layer);
        let (kh, kw) = self.layers[layer].kernel;
        (input.0 + kh - 1, input.1 + kw - 1)
    }

    /// Spatial size of the input to `layer` (0-based).
    pub fn input_shape(&self, layer: usize) -> (usize, usize) {
        let mut input = self.image;
        for spec in &self.layers[..layer] {
            let (kh, kw) = spec.kernel;
            input = ((input.0 + kh - 1) / spec.pool.0, (input.1 + kw - 1) / spec.pool.1);
        }
        input
    }
}

/// Winner offsets for one image: for every atom, one offset per pooling
/// block, flattened row-major within the block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnpoolMap {
    pool: (usize, usize),
    offsets: Vec<Array2<u32>>,
}

impl UnpoolMap {
    pub fn new(pool: (usize, usize), offsets: Vec<Array2<u32>>) -> Result<Self> {
        let area = pool.0 * pool.1;
        if area == 0 {
            return Err(Error::param("empty pooling block"));
        }
        let dim = offsets.first().map(Array2::dim).unwrap_or((0, 0));
        if offsets.iter().any(|o| o.dim() != dim) {
            return Err(Error::shape("winner grids differ in shape"));
        }
        if offsets.iter().flatten().any(|&r| r as usize >= area) {
            return Err(Error::param(format!("winner offset outside a {}x{} block", pool.0, pool.1)));
        }
        Ok(UnpoolMap { pool, offsets })
    }

    /// Every block of atom `k` uses `offsets[k]`.
    pub fn constant(pool: (usize, usize), blocks: (usize, usize), offsets: &[u32]) -> Result<Self> {
        UnpoolMap::new(pool, offsets.iter().map(|&r| Array2::from_elem(blocks, r)).collect())
    }

    pub fn pool(&self) -> (usize, usize) {
        self.pool
    }

    pub fn atoms(&self) -> usize {
        self.offsets.len()
    }

    /// `(blocks_y, blocks_x)`
    pub fn blocks(&self) -> (usize, usize) {
        self.offsets.first().map(Array2::dim).unwrap_or((0, 0))
    }

    pub fn offsets(&self, k: usize) -> &Array2<u32> {
        &self.offsets[k]
    }

    fn position(&self, k: usize, i: usize, j: usize) -> (usize, usize) {
        let r = self.offsets[k][[i, j]] as usize;
        (i * self.pool.0 + r / self.pool.1, j * self.pool.1 + r % self.pool.1)
    }

    fn check_features(&self, s: &FeatureSet) -> Result<()> {
        let (by, bx) = self.blocks();
        if s.len() != self.atoms() || s.map_shape() != (by * self.pool.0, bx * self.pool.1) {
            return Err(Error::shape(format!(
                "{} maps of {:?} do not match a map for {} atoms with {by}x{bx} blocks of {:?}",
                s.len(),
                s.map_shape(),
                self.atoms(),
                self.pool
            )));
        }
        Ok(())
    }
}

/// Per block, the offset of the largest magnitude (first one on ties).
pub fn pretrain_unpool_map(s: &FeatureSet, pool: (usize, usize)) -> Result<UnpoolMap> {
    let (h, w) = s.map_shape();
    if pool.0 == 0 || pool.1 == 0 || h % pool.0 != 0 || w % pool.1 != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} feature maps are not divisible into {}x{} blocks",
            pool.0, pool.1
        )));
    }
    let blocks = (h / pool.0, w / pool.1);
    let offsets = s
        .maps()
        .iter()
        .map(|m| {
            Array2::from_shape_fn(blocks, |(i, j)| {
                let block = m.slice(s![i * pool.0..(i + 1) * pool.0, j * pool.1..(j + 1) * pool.1]);
                let mut best = (0u32, -1.0);
                for (r, v) in block.iter().enumerate() {
                    if v.abs() > best.1 {
                        best = (r as u32, v.abs());
                    }
                }
                best.0
            })
        })
        .collect();
    UnpoolMap::new(pool, offsets)
}

/// Gathers each block's winner into a `K`-channel upper-layer input.
pub fn pool(s: &FeatureSet, map: &UnpoolMap) -> Result<ImageTensor> {
    map.check_features(s)?;
    let (by, bx) = map.blocks();
    let mut out = Array3::zeros((s.len(), by, bx));
    for k in 0..s.len() {
        for i in 0..by {
            for j in 0..bx {
                out[[k, i, j]] = s.map(k)[map.position(k, i, j)];
            }
        }
    }
    Ok(ImageTensor::from_array(out))
}

/// Scatters each upper value to its block's winner position; all other
/// entries are zero.
pub fn unpool(x: &ImageTensor, map: &UnpoolMap) -> Result<FeatureSet> {
    let (by, bx) = map.blocks();
    if x.channels() != map.atoms() || (x.height(), x.width()) != (by, bx) {
        return Err(Error::shape(format!(
            "{:?} input does not match {} atoms with {by}x{bx} blocks",
            x.shape(),
            map.atoms()
        )));
    }
    let shape = (by * map.pool.0, bx * map.pool.1);
    let mut s = FeatureSet::zeros(map.atoms(), shape.0, shape.1);
    for k in 0..map.atoms() {
        let m = s.map_mut(k);
        for i in 0..by {
            for j in 0..bx {
                m[map.position(k, i, j)] = x.get(i, j, k);
            }
        }
    }
    Ok(s)
}

/// How often each offset won each block over the training set,
/// indexed `[atom][block_y][block_x][offset]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WinnerStats {
    pool: (usize, usize),
    blocks: (usize, usize),
    counts: Vec<u32>,
    atoms: usize,
}

impl WinnerStats {
    pub fn new(atoms: usize, blocks: (usize, usize), pool: (usize, usize)) -> Self {
        WinnerStats {
            pool,
            blocks,
            counts: vec![0; atoms * blocks.0 * blocks.1 * pool.0 * pool.1],
            atoms,
        }
    }

    fn index(&self, k: usize, i: usize, j: usize, r: usize) -> usize {
        ((k * self.blocks.0 + i) * self.blocks.1 + j) * self.pool.0 * self.pool.1 + r
    }

    pub fn count(&self, k: usize, i: usize, j: usize, r: usize) -> u32 {
        self.counts[self.index(k, i, j, r)]
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn blocks(&self) -> (usize, usize) {
        self.blocks
    }

    pub fn pool(&self) -> (usize, usize) {
        self.pool
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn record(&mut self, map: &UnpoolMap) -> Result<()> {
        if map.pool() != self.pool || map.blocks() != self.blocks || map.atoms() != self.atoms {
            return Err(Error::shape("unpool map does not match the statistics layout"));
        }
        for k in 0..self.atoms {
            for ((i, j), &r) in map.offsets(k).indexed_iter() {
                let idx = self.index(k, i, j, r as usize);
                self.counts[idx] = self.counts[idx].saturating_add(1);
            }
        }
        Ok(())
    }

    /// Per atom, the offset that won most often over all blocks; ties go to
    /// the smallest offset.
    pub fn dominant_offsets(&self) -> Result<Vec<u32>> {
        if self.total() == 0 {
            return Err(Error::State("no winner statistics recorded".into()));
        }
        let area = self.pool.0 * self.pool.1;
        Ok((0..self.atoms)
            .map(|k| {
                let mut tally = vec![0u64; area];
                for i in 0..self.blocks.0 {
                    for j in 0..self.blocks.1 {
                        for (r, t) in tally.iter_mut().enumerate() {
                            *t += self.count(k, i, j, r) as u64;
                        }
                    }
                }
                let mut best = 0;
                for r in 1..area {
                    if tally[r] > tally[best] {
                        best = r;
                    }
                }
                best as u32
            })
            .collect())
    }

    /// `CFAW1`, K u32, blocks_y u32, blocks_x u32, p u32, then the counts as
    /// u32 in `[atom][block_y][block_x][offset]` order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        if self.pool.0 != self.pool.1 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "winner statistics records support square pooling blocks only",
            ));
        }
        w.write_all(WINNER_MAGIC)?;
        for v in [self.atoms, self.blocks.0, self.blocks.1, self.pool.0] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for &c in &self.counts {
            w.write_u32::<LittleEndian>(c)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, base: u64) -> Result<Self> {
        let trunc = |offset: u64| {
            move |_e: std::io::Error| Error::Parse {
                offset: base + offset,
                message: "truncated winner statistics record".into(),
            }
        };
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(trunc(0))?;
        if &magic != WINNER_MAGIC {
            return Err(Error::Parse {
                offset: base,
                message: format!(
                    "expected winner statistics magic \"CFAW1\", found {:?}",
                    String::from_utf8_lossy(&magic)
                ),
            });
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = r.read_u32::<LittleEndian>().map_err(trunc(5 + 4 * i as u64))? as usize;
        }
        let [k, by, bx, p] = dims;
        let len = [k, by, bx, p, p]
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .filter(|&n| n <= 1 << 28)
            .ok_or(Error::Parse {
                offset: base + 5,
                message: "winner statistics record too large".into(),
            })?;
        let mut stats = WinnerStats::new(k, (by, bx), (p, p));
        for (i, c) in stats.counts.iter_mut().enumerate() {
            *c = r.read_u32::<LittleEndian>().map_err(trunc(21 + 4 * i as u64))?;
        }
        debug_assert_eq!(stats.counts.len(), len);
        Ok(stats)
    }
}

/// Data-layer filters equivalent to the layer-2 atoms seen through the
/// layer-1 dictionary, with every block of layer-1 atom `k1` unpooled at
/// `offsets[k1]`. Output atoms are `(pool * n2 + n1 - 1)` wide.
pub fn project_with_offsets(
    d1: &ConvDictionary,
    d2: &ConvDictionary,
    pool: (usize, usize),
    offsets: &[u32],
) -> Result<ConvDictionary> {
    if d2.channels() != d1.len() || offsets.len() != d1.len() {
        return Err(Error::shape(format!(
            "layer-2 atoms have {} channels and {} offsets were given for {} layer-1 atoms",
            d2.channels(),
            offsets.len(),
            d1.len()
        )));
    }
    let (n2y, n2x) = d2.kernel_shape();
    let (n1y, n1x) = d1.kernel_shape();
    let out_shape = (pool.0 * n2y + n1y - 1, pool.1 * n2x + n1x - 1);
    let c = d1.channels();
    let atoms = d2
        .atoms()
        .iter()
        .map(|a2| {
            let mut out = Array3::zeros((c, out_shape.0, out_shape.1));
            for (k1, &r) in offsets.iter().enumerate() {
                let (ry, rx) = (r as usize / pool.1, r as usize % pool.1);
                let mut up = Map::zeros((pool.0 * n2y, pool.1 * n2x));
                for p in 0..n2y {
                    for q in 0..n2x {
                        up[[pool.0 * p + ry, pool.1 * q + rx]] = a2[[k1, p, q]];
                    }
                }
                for ch in 0..c {
                    let filt = conv2_full(up.view(), d1.atom(k1).slice(s![ch, .., ..]));
                    out.slice_mut(s![ch, .., ..]).zip_mut_with(&filt, |o, f| *o += f);
                }
            }
            out
        })
        .collect();
    ConvDictionary::new(atoms, 1)
}

/// [`project_with_offsets`] using the most frequent training winner of each
/// layer-1 atom.
pub fn project_dictionary(d1: &ConvDictionary, d2: &ConvDictionary, stats: &WinnerStats) -> Result<ConvDictionary> {
    if stats.atoms() != d1.len() {
        return Err(Error::State(format!(
            "winner statistics cover {} atoms, layer 1 has {}",
            stats.atoms(),
            d1.len()
        )));
    }
    project_with_offsets(d1, d2, stats.pool(), &stats.dominant_offsets()?)
}

/// Places layer-2 features on the lattice used by projected filters: entry
/// `(j, j')` lands at `(pool*j + pool-1, pool*j' + pool-1)` of an
/// `(H + L - 1)`-sized map, `L` being the projected kernel size.
pub fn embed_upper_features(
    s2: &FeatureSet,
    pool: (usize, usize),
    image: (usize, usize),
    projected_kernel: (usize, usize),
) -> Result<FeatureSet> {
    let shape = (image.0 + projected_kernel.0 - 1, image.1 + projected_kernel.1 - 1);
    let (fy, fx) = s2.map_shape();
    if pool.0 * fy > shape.0 || pool.1 * fx > shape.1 {
        return Err(Error::shape("layer-2 features do not fit the projected lattice"));
    }
    let maps = s2
        .maps()
        .iter()
        .map(|m| {
            let mut out = Map::zeros(shape);
            for ((j, jj), v) in m.indexed_iter() {
                out[[pool.0 * j + pool.0 - 1, pool.1 * jj + pool.1 - 1]] = *v;
            }
            out
        })
        .collect();
    FeatureSet::from_maps(maps)
}

/// Top-down synthesis through both layers:
/// `D1 * unpool(D2 * S2, map)`.
pub fn synthesize_two_stage(
    d1: &ConvDictionary,
    d2: &ConvDictionary,
    s2: &FeatureSet,
    map: &UnpoolMap,
    policy: &ConvPolicy,
) -> Result<ImageTensor> {
    let x2 = policy.synthesize(d2, s2)?;
    let s1 = unpool(&x2, map)?;
    policy.synthesize(d1, &s1)
}

/// Input to the first layer.
#[derive(Clone, Copy, Debug)]
pub enum LayerInput<'a> {
    Images(&'a [ImageTensor]),
    Measurements(&'a MeasurementSet),
}

#[derive(Clone, Debug)]
pub struct TwoLayerModel {
    pub layers: LayerConfig,
    pub d1: ConvDictionary,
    pub d2: ConvDictionary,
    pub maps: Vec<UnpoolMap>,
    pub stats: WinnerStats,
    /// Unconstrained layer-1 features from stage 1.
    pub s1: Vec<FeatureSet>,
    pub s2: Vec<FeatureSet>,
    pub trace1: Vec<TraceRow>,
    pub trace2: Vec<TraceRow>,
}

impl TwoLayerModel {
    /// Layer-2 inputs, i.e. the pooled stage-1 features.
    pub fn pooled(&self) -> Result<Vec<ImageTensor>> {
        self.s1.iter().zip(&self.maps).map(|(s, m)| pool(s, m)).collect()
    }

    /// Layer-1 features implied by layer 2: `unpool(D2 * S2)`.
    pub fn constrained_features(&self, policy: &ConvPolicy) -> Result<Vec<FeatureSet>> {
        self.s2
            .iter()
            .zip(&self.maps)
            .map(|(s2, m)| unpool(&policy.synthesize(&self.d2, s2)?, m))
            .collect()
    }

    pub fn projected_dictionary(&self) -> Result<ConvDictionary> {
        project_dictionary(&self.d1, &self.d2, &self.stats)
    }

    /// Both dictionaries followed by the winner statistics.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_dictionary(w, &self.d1)?;
        write_dictionary(w, &self.d2)?;
        self.stats.write_to(w)
    }
}

/// Dictionaries and statistics read back from a two-layer model file.
#[derive(Clone, Debug)]
pub struct StoredTwoLayer {
    pub d1: ConvDictionary,
    pub d2: ConvDictionary,
    pub stats: WinnerStats,
}

impl StoredTwoLayer {
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let d1 = read_dictionary(r, 0)?;
        let len1 = dictionary_record_len(&d1);
        let d2 = read_dictionary(r, len1)?;
        let stats = WinnerStats::read_from(r, len1 + dictionary_record_len(&d2))?;
        Ok(StoredTwoLayer { d1, d2, stats })
    }

    pub fn projected_dictionary(&self) -> Result<ConvDictionary> {
        project_dictionary(&self.d1, &self.d2, &self.stats)
    }
}

fn dictionary_record_len(d: &ConvDictionary) -> u64 {
    let (h, w) = d.kernel_shape();
    23 + 8 * (d.len() * h * w * d.channels()) as u64
}

/// Trains both layers separately: layer 1 without the pooling constraint,
/// winner maps from its features, then layer 2 on the pooled features.
pub fn train_two_layer(
    input: LayerInput<'_>,
    layers: &LayerConfig,
    config1: &SolverConfig,
    config2: &SolverConfig,
) -> Result<TwoLayerModel> {
    let [l1, l2] = layers.layers;
    let (channels, shape) = match input {
        LayerInput::Images(x) => {
            let first = x.first().ok_or_else(|| Error::param("need at least one image"))?;
            (first.channels(), (first.height(), first.width()))
        }
        LayerInput::Measurements(m) => {
            let (h, w, c) = m.image_shape();
            (c, (h, w))
        }
    };
    if shape != layers.image {
        return Err(Error::shape(format!(
            "layer config is for {:?} images, input is {:?}",
            layers.image, shape
        )));
    }

    let mut init = rng::stream(config1.seed, "deep/layer1");
    let d1 = ConvDictionary::random(l1.atoms, l1.kernel, channels, 1, &mut init)?;
    let (d1, s1, trace1) = match input {
        LayerInput::Images(x) => {
            let CfaModel { dictionary, state, trace } = train_cfa_from(x, d1, config1)?;
            (dictionary, state.s, trace)
        }
        LayerInput::Measurements(m) => {
            let r = reconstruct_insitu_from(m, d1, config1)?;
            (r.dictionary, r.features, r.trace)
        }
    };

    let maps = s1
        .iter()
        .map(|s| pretrain_unpool_map(s, l1.pool))
        .collect::<Result<Vec<_>>>()?;
    let blocks = layers.input_shape(1);
    let mut stats = WinnerStats::new(l1.atoms, blocks, l1.pool);
    for m in &maps {
        stats.record(m)?;
    }

    let x2 = s1.iter().zip(&maps).map(|(s, m)| pool(s, m)).collect::<Result<Vec<_>>>()?;
    let mut init = rng::stream(config2.seed, "deep/layer2");
    let d2 = ConvDictionary::random(l2.atoms, l2.kernel, l1.atoms, 2, &mut init)?;
    let CfaModel {
        dictionary: d2,
        state,
        trace: trace2,
    } = train_cfa_from(&x2, d2, config2)?;

    Ok(TwoLayerModel {
        layers: *layers,
        d1,
        d2,
        maps,
        stats,
        s1,
        s2: state.s,
        trace1,
        trace2,
    })
}

/// Single-layer recovery with a projected dictionary.
pub fn reconstruct_projected(
    measurements: &MeasurementSet,
    projected: &ConvDictionary,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    reconstruct_prelearned(measurements, projected, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> FeatureSet {
        FeatureSet::from_maps(
            (0..k)
                .map(|_| Map::from_shape_simple_fn((h, w), || rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_divisibility() {
        let l = |k, p| LayerSpec {
            atoms: 4,
            kernel: (k, k),
            pool: (p, p),
        };
        assert!(LayerConfig::new((28, 28), [l(9, 3), l(7, 1)]).is_ok());
        assert!(matches!(LayerConfig::new((28, 28), [l(7, 3), l(3, 1)]), Err(Error::Shape(_))));
        let m = LayerConfig::mnist();
        assert_eq!(m.feature_shape(0), (36, 36));
        assert_eq!(m.input_shape(1), (12, 12));
        assert_eq!(m.feature_shape(1), (18, 18));
    }

    #[test]
    fn winner_cases() {
        let s = FeatureSet::from_maps(vec![array![[0.0, 3.0, 0.0, 0.0], [-5.0, 1.0, 0.0, 0.0]]]).unwrap();
        let m = pretrain_unpool_map(&s, (2, 2)).unwrap();
        assert_eq!(m.offsets(0), &array![[2u32, 0]]);
        assert!(pretrain_unpool_map(&s, (3, 2)).is_err());
        let tie = FeatureSet::from_maps(vec![array![[1.0, -1.0], [1.0, 0.5]]]).unwrap();
        assert_eq!(pretrain_unpool_map(&tie, (2, 2)).unwrap().offsets(0)[[0, 0]], 0);
    }

    #[test]
    fn winners_match_block_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_features(&mut rng, 3, 6, 9);
        let m = pretrain_unpool_map(&s, (2, 3)).unwrap();
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut best = (0, 0, -1.0);
                    for dy in 0..2 {
                        for dx in 0..3 {
                            let v = s.map(k)[[2 * i + dy, 3 * j + dx]].abs();
                            if v > best.2 {
                                best = (dy, dx, v);
                            }
                        }
                    }
                    assert_eq!(m.offsets(k)[[i, j]] as usize, best.0 * 3 + best.1);
                }
            }
        }
    }

    #[test]
    fn pool_unpool_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_features(&mut rng, 2, 6, 6);
        let m = pretrain_unpool_map(&s, (3, 3)).unwrap();
        let x = pool(&s, &m).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let r = m.offsets(k)[[i, j]] as usize;
                    assert_eq!(x.get(i, j, k), s.map(k)[[3 * i + r / 3, 3 * j + r % 3]]);
                }
            }
        }
        let up = unpool(&x, &m).unwrap();
        assert_eq!(pool(&up, &m).unwrap(), x);
        assert_eq!(unpool(&pool(&up, &m).unwrap(), &m).unwrap(), up);
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let block = up.map(k).slice(s![3 * i..3 * i + 3, 3 * j..3 * j + 3]).to_owned();
                    assert!(block.iter().filter(|v| **v != 0.0).count() <= 1);
                }
            }
        }
        let c = FeatureSet::from_maps(vec![Map::from_elem((6, 6), 2.5); 2]).unwrap();
        assert!(pool(&c, &m).unwrap().as_slice().iter().all(|v| *v == 2.5));
        assert!(pool(&random_features(&mut rng, 2, 3, 3), &m).is_err());
    }

    #[test]
    fn dominant_offsets_break_ties_low() {
        let mut stats = WinnerStats::new(2, (1, 2), (2, 2));
        assert!(matches!(stats.dominant_offsets(), Err(Error::State(_))));
        stats.record(&UnpoolMap::new((2, 2), vec![array![[3u32, 1]], array![[2u32, 2]]]).unwrap()).unwrap();
        assert_eq!(stats.dominant_offsets().unwrap(), vec![1, 2]);
        let mut buf = Vec::new();
        stats.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 21 + 4 * 16);
        assert_eq!(WinnerStats::read_from(&mut buf.as_slice(), 0).unwrap(), stats);
        assert!(WinnerStats::new(1, (1, 1), (2, 3)).write_to(&mut Vec::new()).is_err());
    }

    #[test]
    fn delta_layer2_atom_projects_to_layer1_atom() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d1 = ConvDictionary::random(2, (3, 3), 1, 1, &mut rng).unwrap();
        let mut a2 = Array3::zeros((2, 2, 2));
        a2[[1, 1, 0]] = 1.0;
        let d2 = ConvDictionary::new(vec![a2], 2).unwrap();
        let p = project_with_offsets(&d1, &d2, (2, 2), &[0, 0]).unwrap();
        assert_eq!(p.kernel_shape(), (6, 6));
        let f = p.atom(0);
        for y in 0..6 {
            for x in 0..6 {
                let expected = if (2..5).contains(&y) && x < 3 { d1.atom(1)[[0, y - 2, x]] } else { 0.0 };
                assert!((f[[0, y, x]] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn projection_matches_two_stage_synthesis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = LayerConfig::new(
            (10, 10),
            [
                LayerSpec {
                    atoms: 3,
                    kernel: (3, 3),
                    pool: (2, 2),
                },
                LayerSpec {
                    atoms: 2,
                    kernel: (2, 2),
                    pool: (1, 1),
                },
            ],
        )
        .unwrap();
        let d1 = ConvDictionary::random(3, (3, 3), 2, 1, &mut rng).unwrap();
        let d2 = ConvDictionary::random(2, (2, 2), 3, 2, &mut rng).unwrap();
        let offsets = [3, 0, 2];
        let p = project_with_offsets(&d1, &d2, (2, 2), &offsets).unwrap();
        let blocks = layers.input_shape(1);
        let map = UnpoolMap::constant((2, 2), blocks, &offsets).unwrap();
        let (fy, fx) = layers.feature_shape(1);
        let policy = ConvPolicy::direct();
        for _ in 0..5 {
            let s2 = random_features(&mut rng, 2, fy, fx);
            let two = synthesize_two_stage(&d1, &d2, &s2, &map, &policy).unwrap();
            let emb = embed_upper_features(&s2, (2, 2), (10, 10), p.kernel_shape()).unwrap();
            let one = policy.synthesize(&p, &emb).unwrap();
            for (a, b) in two.as_slice().iter().zip(one.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_layer_training_respects_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layers = LayerConfig::new(
            (8, 8),
            [
                LayerSpec {
                    atoms: 2,
                    kernel: (3, 3),
                    pool: (2, 2),
                },
                LayerSpec {
                    atoms: 3,
                    kernel: (3, 3),
                    pool: (1, 1),
                },
            ],
        )
        .unwrap();
        let images: Vec<_> = (0..3)
            .map(|_| ImageTensor::from_gray(Map::from_shape_simple_fn((8, 8), || rng.gen_range(0.0..1.0))))
            .collect();
        let cfg = SolverConfig {
            max_outer: 4,
            beta: 1e-3,
            ..SolverConfig::default()
        };
        let model = train_two_layer(LayerInput::Images(&images), &layers, &cfg, &cfg).unwrap();
        assert_eq!(model.stats.total(), 3 * 2 * 25);
        assert_eq!(model.d2.channels(), 2);
        for (s, m) in model.constrained_features(&ConvPolicy::default()).unwrap().iter().zip(&model.maps) {
            assert_eq!(pool(&unpool(&pool(s, m).unwrap(), m).unwrap(), m).unwrap(), pool(s, m).unwrap());
        }
        let p = model.projected_dictionary().unwrap();
        assert_eq!(p.kernel_shape(), (2 * 3 + 3 - 1, 8));
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = StoredTwoLayer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.d1, model.d1);
        assert_eq!(back.d2, model.d2);
        assert_eq!(back.projected_dictionary().unwrap(), p);
    }
}
