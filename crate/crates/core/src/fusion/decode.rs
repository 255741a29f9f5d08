//! Raster-to-polyline decoding: threshold a class channel, close one-cell
//! gaps, split the mask into 8-connected components, thin each component to
//! a one-cell skeleton, trace the skeleton's longest path, and simplify it
//! to a polyline.

use crate::error::Result;
use crate::geom::{douglas_peucker, BevRaster, ElementClass, MapElement};

/// Cells at or above this activation count as occupied.
pub const DECODE_THRESHOLD: f64 = 0.5;

/// Components smaller than this are treated as noise.
pub const MIN_COMPONENT_CELLS: usize = 3;

const NEIGHBORS8: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Binary mask over a grid window, indexed like the raster.
struct Mask {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

impl Mask {
    fn get(&self, i: i64, j: i64) -> bool {
        if i < 0 || j < 0 || i >= self.h as i64 || j >= self.w as i64 {
            return false;
        }
        self.cells[i as usize * self.w + j as usize]
    }

    fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[i * self.w + j] = v;
    }

    fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// 3x3 morphological closing, kept extensive at the image border by
/// uniting the erosion with the original mask. Bridges the one-cell gaps
/// that thresholding opens in resampled lines and merges near-duplicate
/// strokes a cell apart, without ever removing an occupied cell.
fn close(mask: &mut Mask) {
    let (h, w) = (mask.h as i64, mask.w as i64);
    let mut dilated = Mask {
        h: mask.h,
        w: mask.w,
        cells: vec![false; mask.h * mask.w],
    };
    for i in 0..h {
        for j in 0..w {
            if mask.get(i, j) {
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (ni, nj) = (i + di, j + dj);
                        if ni >= 0 && nj >= 0 && ni < h && nj < w {
                            dilated.set(ni as usize, nj as usize, true);
                        }
                    }
                }
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            if mask.get(i, j) {
                continue;
            }
            let eroded = (-1..=1)
                .all(|di| (-1..=1).all(|dj| dilated.get(i + di, j + dj)));
            if eroded {
                mask.set(i as usize, j as usize, true);
            }
        }
    }
}

/// Zhang-Suen thinning: repeatedly peels boundary cells in two sub-passes
/// until stable, leaving an 8-connected skeleton one cell wide.
fn thin(mask: &mut Mask) {
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut to_clear = Vec::new();
            for i in 0..mask.h as i64 {
                for j in 0..mask.w as i64 {
                    if !mask.get(i, j) {
                        continue;
                    }
                    // Neighbors clockwise from north: p2..p9.
                    let p = [
                        mask.get(i - 1, j),
                        mask.get(i - 1, j + 1),
                        mask.get(i, j + 1),
                        mask.get(i + 1, j + 1),
                        mask.get(i + 1, j),
                        mask.get(i + 1, j - 1),
                        mask.get(i, j - 1),
                        mask.get(i - 1, j - 1),
                    ];
                    let b: usize = p.iter().filter(|&&x| x).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8)
                        .filter(|&k| !p[k] && p[(k + 1) % 8])
                        .count();
                    if a != 1 {
                        continue;
                    }
                    let (c1, c2) = if pass == 0 {
                        // p2*p4*p6 == 0 and p4*p6*p8 == 0
                        (p[0] && p[2] && p[4], p[2] && p[4] && p[6])
                    } else {
                        // p2*p4*p8 == 0 and p2*p6*p8 == 0
                        (p[0] && p[2] && p[6], p[0] && p[4] && p[6])
                    };
                    if !c1 && !c2 {
                        to_clear.push((i as usize, j as usize));
                    }
                }
            }
            if !to_clear.is_empty() {
                changed = true;
                for (i, j) in to_clear {
                    mask.set(i, j, false);
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Farthest cell from `start` by BFS over set cells, with parent links.
fn bfs_farthest(mask: &Mask, start: (usize, usize)) -> ((usize, usize), Vec<Option<usize>>) {
    let idx = |i: usize, j: usize| i * mask.w + j;
    let mut parent: Vec<Option<usize>> = vec![None; mask.h * mask.w];
    let mut seen = vec![false; mask.h * mask.w];
    let mut queue = std::collections::VecDeque::new();
    seen[idx(start.0, start.1)] = true;
    queue.push_back(start);
    let mut last = start;
    while let Some((i, j)) = queue.pop_front() {
        last = (i, j);
        for (di, dj) in NEIGHBORS8 {
            let (ni, nj) = (i as i64 + di, j as i64 + dj);
            if mask.get(ni, nj) && !seen[idx(ni as usize, nj as usize)] {
                seen[idx(ni as usize, nj as usize)] = true;
                parent[idx(ni as usize, nj as usize)] = Some(idx(i, j));
                queue.push_back((ni as usize, nj as usize));
            }
        }
    }
    (last, parent)
}

/// Longest path through the skeleton: BFS from an arbitrary endpoint to the
/// farthest cell, then BFS back and walk the parent chain.
fn longest_path(mask: &Mask, seed: (usize, usize)) -> Vec<(usize, usize)> {
    let (tip, _) = bfs_farthest(mask, seed);
    let (end, parent) = bfs_farthest(mask, tip);
    let mut path = vec![end];
    let mut cur = end.0 * mask.w + end.1;
    while let Some(p) = parent[cur] {
        path.push((p / mask.w, p % mask.w));
        cur = p;
    }
    path
}

/// Decodes one channel into polyline elements of the given class.
pub fn decode_channel(
    raster: &BevRaster,
    channel: usize,
    cls: ElementClass,
    threshold: f64,
) -> Result<Vec<MapElement>> {
    let spec = raster.spec;
    let (h, w) = (spec.h(), spec.w());
    let mut remaining = Mask {
        h,
        w,
        cells: (0..h * w)
            .map(|idx| raster.get(idx / w, idx % w, channel) >= threshold)
            .collect(),
    };
    close(&mut remaining);
    let mut elements = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if !remaining.get(si as i64, sj as i64) {
                continue;
            }
            // Flood-fill this component out of `remaining`.
            let mut component = Mask {
                h,
                w,
                cells: vec![false; h * w],
            };
            let mut stack = vec![(si, sj)];
            remaining.set(si, sj, false);
            let mut cells = Vec::new();
            while let Some((i, j)) = stack.pop() {
                component.set(i, j, true);
                cells.push((i, j));
                for (di, dj) in NEIGHBORS8 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if remaining.get(ni, nj) {
                        remaining.set(ni as usize, nj as usize, false);
                        stack.push((ni as usize, nj as usize));
                    }
                }
            }
            if cells.len() < MIN_COMPONENT_CELLS {
                continue;
            }
            let confidence = (cells
                .iter()
                .map(|&(i, j)| raster.get(i, j, channel))
                .sum::<f64>()
                / cells.len() as f64)
                .min(1.0);
            thin(&mut component);
            if component.count() < 2 {
                continue;
            }
            let seed = *cells
                .iter()
                .find(|&&(i, j)| component.get(i as i64, j as i64))
                .expect("skeleton is a subset of the component");
            let path = longest_path(&component, seed);
            if path.len() < 2 {
                continue;
            }
            let pts: Vec<(f64, f64)> = path.iter().map(|&(i, j)| spec.cell_center(i, j)).collect();
            let simplified = douglas_peucker(&pts, spec.resolution);
            if simplified.len() >= 2 {
                elements.push(MapElement::new(cls, simplified, confidence)?);
            }
        }
    }
    Ok(elements)
}

/// Decodes the standard three class channels of a fused raster.
pub fn decode_map(raster: &BevRaster, threshold: f64) -> Result<Vec<MapElement>> {
    let mut out = Vec::new();
    for cls in [
        ElementClass::Divider,
        ElementClass::PedCrossing,
        ElementClass::Boundary,
    ] {
        out.extend(decode_channel(raster, cls.index(), cls, threshold)?);
    }
    Ok(out)
}
