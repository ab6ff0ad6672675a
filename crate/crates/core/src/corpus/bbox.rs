//! Connected components and bounding boxes of binary masks.

use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Axis-aligned pixel rectangle: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelRect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }
}

#[derive(Debug, Clone)]
struct Component {
    size: usize,
    min_x: usize,
    min_y: usize,
    max_x: usize,
    max_y: usize,
}

/// Tight bounding box of the component with the largest pixel count.
///
/// Components are discovered in row-major order, so on equal sizes the
/// component whose first scanned pixel comes earliest wins.
pub fn largest_component_bbox(mask: &BinaryMask, connectivity: Connectivity) -> Result<PixelRect> {
    let (w, h) = mask.dims();
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();
    let mut best: Option<Component> = None;

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if visited[idx] || !mask.get(x, y) {
                continue;
            }
            visited[idx] = true;
            stack.push((x, y));
            let mut comp = Component {
                size: 0,
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
            };
            while let Some((cx, cy)) = stack.pop() {
                comp.size += 1;
                comp.min_x = comp.min_x.min(cx);
                comp.min_y = comp.min_y.min(cy);
                comp.max_x = comp.max_x.max(cx);
                comp.max_y = comp.max_y.max(cy);
                for &(dx, dy) in connectivity.offsets() {
                    let nx = cx as isize + dx;
                    let ny = cy as isize + dy;
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    let nidx = ny * w + nx;
                    if !visited[nidx] && mask.get(nx, ny) {
                        visited[nidx] = true;
                        stack.push((nx, ny));
                    }
                }
            }
            if best.as_ref().is_none_or(|b| comp.size > b.size) {
                best = Some(comp);
            }
        }
    }

    let c = best.ok_or(Error::NoForeground)?;
    Ok(PixelRect::new(
        c.min_x,
        c.min_y,
        c.max_x - c.min_x + 1,
        c.max_y - c.min_y + 1,
    ))
}
