use nalgebra::Point2;

use super::FrustumEntry;

/// Additive margin (pixels) on the ring-search stopping bound. Covers the
/// rounding of cell assignment so the index never stops early.
const BOUND_MARGIN: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
struct Slot {
    x: f64,
    y: f64,
    source_index: usize,
    entry: usize,
}

/// Uniform grid over the bounding box of a frustum's projected points.
///
/// Queries return the entry minimizing Euclidean pixel distance, ties going
/// to the smallest `source_index`, identical to a brute-force scan.
#[derive(Clone, Debug)]
pub struct PixelIndex {
    cell_size: f64,
    origin: [f64; 2],
    cols: i64,
    rows: i64,
    cell_start: Vec<usize>,
    slots: Vec<Slot>,
}

impl PixelIndex {
    pub fn build(entries: &[FrustumEntry], cell_size: u32) -> Self {
        assert!(cell_size >= 1, "cell size must be at least one pixel");
        let cell = f64::from(cell_size);
        if entries.is_empty() {
            return Self {
                cell_size: cell,
                origin: [0.0, 0.0],
                cols: 0,
                rows: 0,
                cell_start: vec![0],
                slots: Vec::new(),
            };
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for e in entries {
            lo = [lo[0].min(e.pixel.x), lo[1].min(e.pixel.y)];
            hi = [hi[0].max(e.pixel.x), hi[1].max(e.pixel.y)];
        }
        let cols = ((hi[0] - lo[0]) / cell).floor() as i64 + 1;
        let rows = ((hi[1] - lo[1]) / cell).floor() as i64 + 1;
        let mut index = Self {
            cell_size: cell,
            origin: lo,
            cols,
            rows,
            cell_start: Vec::new(),
            slots: Vec::with_capacity(entries.len()),
        };

        let cell_of: Vec<usize> = entries
            .iter()
            .map(|e| {
                let (c, r) = index.cell_coords(&e.pixel);
                (r.clamp(0, rows - 1) * cols + c.clamp(0, cols - 1)) as usize
            })
            .collect();
        let mut counts = vec![0usize; (cols * rows) as usize + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut slots = vec![
            Slot {
                x: 0.0,
                y: 0.0,
                source_index: 0,
                entry: 0
            };
            entries.len()
        ];
        for (i, (e, &c)) in entries.iter().zip(&cell_of).enumerate() {
            slots[fill[c]] = Slot {
                x: e.pixel.x,
                y: e.pixel.y,
                source_index: e.source_index,
                entry: i,
            };
            fill[c] += 1;
        }
        index.cell_start = counts;
        index.slots = slots;
        index
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn cell_coords(&self, p: &Point2<f64>) -> (i64, i64) {
        (
            ((p.x - self.origin[0]) / self.cell_size).floor() as i64,
            ((p.y - self.origin[1]) / self.cell_size).floor() as i64,
        )
    }

    fn scan_cell(&self, cell: usize, query: &Point2<f64>, best: &mut Option<(f64, usize, usize)>) {
        for slot in &self.slots[self.cell_start[cell]..self.cell_start[cell + 1]] {
            let dx = slot.x - query.x;
            let dy = slot.y - query.y;
            let d2 = dx * dx + dy * dy;
            let better = match *best {
                None => true,
                Some((bd, bs, _)) => d2 < bd || (d2 == bd && slot.source_index < bs),
            };
            if better {
                *best = Some((d2, slot.source_index, slot.entry));
            }
        }
    }

    /// Index (into the entries the index was built from) of the nearest
    /// entry to `query`, or `None` when the index is empty.
    pub fn nearest(&self, query: &Point2<f64>) -> Option<usize> {
        if self.slots.is_empty() {
            return None;
        }
        let (qc, qr) = self.cell_coords(query);
        // (squared distance, source index, entry)
        let mut best: Option<(f64, usize, usize)> = None;
        let mut ring: i64 = 0;
        loop {
            let (c0, c1) = (qc - ring, qc + ring);
            let (r0, r1) = (qr - ring, qr + ring);
            let mut visit = |c: i64, r: i64| {
                if (0..self.cols).contains(&c) && (0..self.rows).contains(&r) {
                    self.scan_cell((r * self.cols + c) as usize, query, &mut best);
                }
            };
            for r in r0.max(0)..=r1.min(self.rows - 1) {
                if r == r0 || r == r1 {
                    for c in c0.max(0)..=c1.min(self.cols - 1) {
                        visit(c, r);
                    }
                } else {
                    visit(c0, r);
                    visit(c1, r);
                }
            }

            let covers_grid = c0 <= 0 && r0 <= 0 && c1 >= self.cols - 1 && r1 >= self.rows - 1;
            if covers_grid {
                break;
            }
            if let Some((bd, _, _)) = best {
                let lo_x = self.origin[0] + c0 as f64 * self.cell_size;
                let hi_x = self.origin[0] + (c1 + 1) as f64 * self.cell_size;
                let lo_y = self.origin[1] + r0 as f64 * self.cell_size;
                let hi_y = self.origin[1] + (r1 + 1) as f64 * self.cell_size;
                let bound = (query.x - lo_x)
                    .min(hi_x - query.x)
                    .min(query.y - lo_y)
                    .min(hi_y - query.y)
                    - BOUND_MARGIN;
                if bound > 0.0 && bd < bound * bound {
                    break;
                }
            }
            ring += 1;
        }
        best.map(|(_, _, entry)| entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_nearest(entries: &[FrustumEntry], query: &Point2<f64>) -> Option<usize> {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, e) in entries.iter().enumerate() {
            let dx = e.pixel.x - query.x;
            let dy = e.pixel.y - query.y;
            let d2 = dx * dx + dy * dy;
            if best.is_none_or(|(bd, bs, _)| d2 < bd || (d2 == bd && e.source_index < bs)) {
                best = Some((d2, e.source_index, i));
            }
        }
        best.map(|(_, _, i)| i)
    }

    fn entry(x: f64, y: f64, source_index: usize) -> FrustumEntry {
        FrustumEntry {
            pixel: Point2::new(x, y),
            depth: 1.0 + source_index as f64,
            source_index,
        }
    }

    #[test]
    fn empty_index() {
        let idx = PixelIndex::build(&[], 8);
        assert!(idx.nearest(&Point2::new(1.0, 1.0)).is_none());
    }

    #[test]
    fn single_entry_always_wins() {
        let entries = [entry(10.0, 10.0, 3)];
        let idx = PixelIndex::build(&entries, 8);
        for q in [(0.0, 0.0), (1599.0, 899.0), (10.0, 10.0)] {
            assert_eq!(idx.nearest(&Point2::new(q.0, q.1)), Some(0));
        }
    }

    #[test]
    fn coincident_query_returns_that_entry() {
        let entries = [entry(5.5, 5.5, 0), entry(40.25, 7.0, 1), entry(100.0, 90.0, 2)];
        let idx = PixelIndex::build(&entries, 4);
        assert_eq!(idx.nearest(&Point2::new(40.25, 7.0)), Some(1));
    }

    #[test]
    fn ties_go_to_smallest_source_index() {
        // equidistant from the query, listed with the larger source index first
        let entries = [entry(12.0, 10.0, 9), entry(8.0, 10.0, 4), entry(10.0, 10.0 + 2.0, 7)];
        let idx = PixelIndex::build(&entries, 1);
        assert_eq!(idx.nearest(&Point2::new(10.0, 10.0)), Some(1));
        assert_eq!(brute_force_nearest(&entries, &Point2::new(10.0, 10.0)), Some(1));
    }

    #[test]
    fn matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..200);
            let entries: Vec<_> = (0..n)
                .map(|i| {
                    entry(
                        rng.random_range(0.0..300.0),
                        rng.random_range(0.0..200.0),
                        i * 2,
                    )
                })
                .collect();
            let cell = rng.random_range(1..20);
            let idx = PixelIndex::build(&entries, cell);
            for _ in 0..20 {
                let q = Point2::new(rng.random_range(-50.0..350.0), rng.random_range(-50.0..250.0));
                assert_eq!(idx.nearest(&q), brute_force_nearest(&entries, &q));
            }
        }
    }
}
