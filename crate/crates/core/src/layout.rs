//! Index algebra over the Mallat layout: subbands, the quad-tree of
//! same-orientation descendants, and the bit-plane scan order.
//!
//! Indices are 1-based `(i1, i2)` = (row, column). With `levels = m - 1` the
//! scaling block is the 2x2 at the top-left.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("{0} lies in the finest level and has no children")]
    NoChildren(CoeffIndex),
    #[error("{0} is a scaling (LL) coefficient")]
    NotDetail(CoeffIndex),
    #[error("{0} is outside the {1}x{1} matrix")]
    OutOfRange(CoeffIndex, usize),
    #[error("unsupported geometry m={m} levels={levels}")]
    BadGeometry { m: u32, levels: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoeffIndex {
    pub i1: usize,
    pub i2: usize,
}

impl CoeffIndex {
    pub const fn new(i1: usize, i2: usize) -> Self {
        Self { i1, i2 }
    }

    pub fn from_zero_based(row: usize, col: usize) -> Self {
        Self::new(row + 1, col + 1)
    }

    pub fn row(self) -> usize {
        self.i1 - 1
    }

    pub fn col(self) -> usize {
        self.i2 - 1
    }

    /// Row-major offset into an `size x size` matrix.
    pub fn flat(self, size: usize) -> usize {
        self.row() * size + self.col()
    }
}

impl std::fmt::Display for CoeffIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.i1, self.i2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Scaling coefficients.
    LL,
    /// Top-right quadrant (horizontal high-pass).
    HL,
    /// Bottom-left quadrant (vertical high-pass).
    LH,
    HH,
}

/// Scan order of the detail subbands within one level.
pub const SUBBAND_ORDER: [Orientation; 3] = [Orientation::HL, Orientation::LH, Orientation::HH];

/// Geometry of an `M x M` Mallat layout with the given number of levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub m: u32,
    pub levels: u32,
}

impl Geometry {
    pub fn new(m: u32, levels: u32) -> Result<Self, LayoutError> {
        if m < 1 || levels > m {
            return Err(LayoutError::BadGeometry { m, levels });
        }
        Ok(Self { m, levels })
    }

    pub fn size(self) -> usize {
        1 << self.m
    }

    pub fn ll_size(self) -> usize {
        1 << (self.m - self.levels)
    }

    fn check(self, idx: CoeffIndex) -> Result<(), LayoutError> {
        let size = self.size();
        if idx.i1 < 1 || idx.i2 < 1 || idx.i1 > size || idx.i2 > size {
            return Err(LayoutError::OutOfRange(idx, size));
        }
        Ok(())
    }

    pub fn is_ll(self, idx: CoeffIndex) -> bool {
        let s = self.ll_size();
        idx.i1 <= s && idx.i2 <= s
    }

    /// Orientation and decomposition level (1 = finest) of an index.
    pub fn subband(self, idx: CoeffIndex) -> Result<(Orientation, u32), LayoutError> {
        self.check(idx)?;
        if self.is_ll(idx) {
            return Ok((Orientation::LL, self.levels));
        }
        let extent = idx.i1.max(idx.i2);
        // smallest band size s with extent <= 2s
        let mut level = self.levels;
        let mut band = self.ll_size();
        while extent > 2 * band {
            band *= 2;
            level -= 1;
        }
        let orient = match (idx.i1 > band, idx.i2 > band) {
            (false, true) => Orientation::HL,
            (true, false) => Orientation::LH,
            (true, true) => Orientation::HH,
            (false, false) => unreachable!("non-LL index inside its own band"),
        };
        Ok((orient, level))
    }

    /// The four same-orientation children one level finer.
    pub fn children(self, idx: CoeffIndex) -> Result<[CoeffIndex; 4], LayoutError> {
        self.check(idx)?;
        if self.is_ll(idx) {
            return Err(LayoutError::NotDetail(idx));
        }
        let half = self.size() / 2;
        if idx.i1 > half || idx.i2 > half {
            return Err(LayoutError::NoChildren(idx));
        }
        let (r, c) = (2 * idx.i1 - 1, 2 * idx.i2 - 1);
        Ok([
            CoeffIndex::new(r, c),
            CoeffIndex::new(r, c + 1),
            CoeffIndex::new(r + 1, c),
            CoeffIndex::new(r + 1, c + 1),
        ])
    }

    /// Parent in the quad-tree; coarsest-level detail coefficients are roots.
    pub fn parent(self, idx: CoeffIndex) -> Option<CoeffIndex> {
        self.check(idx).ok()?;
        if self.is_ll(idx) {
            return None;
        }
        let root_extent = 2 * self.ll_size();
        if idx.i1 <= root_extent && idx.i2 <= root_extent {
            return None;
        }
        Some(CoeffIndex::new(idx.i1.div_ceil(2), idx.i2.div_ceil(2)))
    }

    /// All descendants, breadth first.
    pub fn descendants(self, idx: CoeffIndex) -> Result<Vec<CoeffIndex>, LayoutError> {
        self.check(idx)?;
        if self.is_ll(idx) {
            return Err(LayoutError::NotDetail(idx));
        }
        let mut out = Vec::new();
        let mut frontier = vec![idx];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for p in frontier {
                if let Ok(kids) = self.children(p) {
                    next.extend_from_slice(&kids);
                }
            }
            out.extend_from_slice(&next);
            frontier = next;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    /// Sixteen positions: four 2x2 groups in raster order.
    Block4x4,
    /// Four positions in raster order.
    Group2x2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanUnit {
    pub kind: UnitKind,
    pub start: usize,
    pub orientation: Orientation,
    pub level: u32,
}

impl ScanUnit {
    pub fn len(&self) -> usize {
        match self.kind {
            UnitKind::Block4x4 => 16,
            UnitKind::Group2x2 => 4,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

const NONE: u32 = u32::MAX;

/// The fixed bit-plane scan: the LL group (unless excluded), then for each
/// level from coarse to fine the HL, LH and HH subbands. Subbands of side 2
/// are a single 2x2 group; larger subbands are visited as 4x4 blocks in
/// raster order, each as four raster-ordered 2x2 groups.
///
/// Every unit has a multiple of four positions, so the 2x2 group containing
/// scan position `p` always starts at `p - p % 4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub geometry: Geometry,
    pub include_ll: bool,
    positions: Vec<CoeffIndex>,
    units: Vec<ScanUnit>,
    unit_of: Vec<u32>,
    scan_pos_of: Vec<u32>,
    children_pos: Vec<Option<[u32; 4]>>,
}

impl ScanOrder {
    /// Requires `m >= 2` and `1 <= levels <= m - 1` so that every subband is at least 2x2.
    pub fn new(m: u32, levels: u32, include_ll: bool) -> Result<Self, LayoutError> {
        if m < 2 || levels < 1 || levels > m - 1 {
            return Err(LayoutError::BadGeometry { m, levels });
        }
        let geometry = Geometry::new(m, levels)?;
        let size = geometry.size();
        let mut positions = Vec::with_capacity(size * size);
        let mut units = Vec::new();

        let mut push_band = |row0: usize, col0: usize, side: usize, orientation, level, positions: &mut Vec<CoeffIndex>| {
            if side == 2 {
                units.push(ScanUnit {
                    kind: UnitKind::Group2x2,
                    start: positions.len(),
                    orientation,
                    level,
                });
                push_group(positions, row0, col0);
                return;
            }
            for br in (0..side).step_by(4) {
                for bc in (0..side).step_by(4) {
                    units.push(ScanUnit {
                        kind: UnitKind::Block4x4,
                        start: positions.len(),
                        orientation,
                        level,
                    });
                    for (gr, gc) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
                        push_group(positions, row0 + br + gr, col0 + bc + gc);
                    }
                }
            }
        };

        let ll = geometry.ll_size();
        if include_ll {
            push_band(0, 0, ll, Orientation::LL, levels, &mut positions);
        }
        for level in (1..=levels).rev() {
            let band = size >> level;
            for orient in SUBBAND_ORDER {
                let (r0, c0) = match orient {
                    Orientation::HL => (0, band),
                    Orientation::LH => (band, 0),
                    Orientation::HH => (band, band),
                    Orientation::LL => unreachable!(),
                };
                push_band(r0, c0, band, orient, level, &mut positions);
            }
        }

        let mut unit_of = vec![NONE; positions.len()];
        for (u, unit) in units.iter().enumerate() {
            for p in unit.start..unit.start + unit.len() {
                unit_of[p] = u as u32;
            }
        }
        let mut scan_pos_of = vec![NONE; size * size];
        for (p, idx) in positions.iter().enumerate() {
            scan_pos_of[idx.flat(size)] = p as u32;
        }
        let children_pos = positions
            .iter()
            .map(|&idx| {
                geometry
                    .children(idx)
                    .ok()
                    .map(|kids| kids.map(|k| scan_pos_of[k.flat(size)]))
            })
            .collect();

        Ok(Self {
            geometry,
            include_ll,
            positions,
            units,
            unit_of,
            scan_pos_of,
            children_pos,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[CoeffIndex] {
        &self.positions
    }

    pub fn index(&self, pos: usize) -> CoeffIndex {
        self.positions[pos]
    }

    pub fn units(&self) -> &[ScanUnit] {
        &self.units
    }

    pub fn unit_at(&self, pos: usize) -> usize {
        self.unit_of[pos] as usize
    }

    /// Number of 2x2 groups; group `g` covers positions `4g..4g+4`.
    pub fn group_count(&self) -> usize {
        self.positions.len() / 4
    }

    /// Scan position of a matrix index, if it is scanned.
    pub fn scan_pos(&self, idx: CoeffIndex) -> Option<usize> {
        let v = self.scan_pos_of[idx.flat(self.geometry.size())];
        (v != NONE).then_some(v as usize)
    }

    /// Scan positions of the quad-tree children, `None` for leaves and LL.
    pub fn children_at(&self, pos: usize) -> Option<[usize; 4]> {
        self.children_pos[pos].map(|k| k.map(|v| v as usize))
    }

    pub fn is_ll_at(&self, pos: usize) -> bool {
        self.geometry.is_ll(self.positions[pos])
    }
}

fn push_group(positions: &mut Vec<CoeffIndex>, row0: usize, col0: usize) {
    for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        positions.push(CoeffIndex::from_zero_based(row0 + r, col0 + c));
    }
}

/// Flat scan order for `m` with `levels = m - 1` and the LL group included.
pub fn scan_order(m: u32) -> Result<ScanOrder, LayoutError> {
    ScanOrder::new(m, m - 1, true)
}
