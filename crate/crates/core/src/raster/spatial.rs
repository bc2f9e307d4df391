use std::collections::HashMap;

use super::mask::BBox;

/// Uniform-grid bucket index over bounding boxes.
#[derive(Debug, Clone)]
pub struct BoxIndex {
    cell: u32,
    buckets: HashMap<(u32, u32), Vec<usize>>,
    boxes: Vec<BBox>,
}

impl BoxIndex {
    pub fn new(cell: u32) -> Self {
        Self {
            cell: cell.max(1),
            buckets: HashMap::new(),
            boxes: Vec::new(),
        }
    }

    pub fn from_boxes(cell: u32, boxes: impl IntoIterator<Item = BBox>) -> Self {
        let mut idx = Self::new(cell);
        for b in boxes {
            idx.insert(b);
        }
        idx
    }

    fn cells(&self, b: &BBox) -> impl Iterator<Item = (u32, u32)> {
        let c = self.cell;
        let (x0, y0) = (b.x / c, b.y / c);
        let (x1, y1) = (b.right().saturating_sub(1) / c, b.bottom().saturating_sub(1) / c);
        (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y)))
    }

    /// Returns the index assigned to `b`.
    pub fn insert(&mut self, b: BBox) -> usize {
        let id = self.boxes.len();
        let cells: Vec<_> = self.cells(&b).collect();
        for key in cells {
            self.buckets.entry(key).or_default().push(id);
        }
        self.boxes.push(b);
        id
    }

    /// Indices of stored boxes intersecting `b`, ascending.
    pub fn query(&self, b: &BBox) -> Vec<usize> {
        let mut out = Vec::new();
        for key in self.cells(b) {
            if let Some(v) = self.buckets.get(&key) {
                out.extend(v.iter().copied().filter(|&i| self.boxes[i].intersect(b).is_some()));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}
