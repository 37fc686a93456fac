//! Row-major 2-D maps and pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel position, serialized as `[row, col]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Point {
    pub row: usize,
    pub col: usize,
}

impl Point {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn chebyshev(self, other: Point) -> usize {
        self.row
            .abs_diff(other.row)
            .max(self.col.abs_diff(other.col))
    }

    pub fn dist2(self, other: Point) -> usize {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        dr * dr + dc * dc
    }
}

impl From<[usize; 2]> for Point {
    fn from([row, col]: [usize; 2]) -> Self {
        Self { row, col }
    }
}

impl From<Point> for [usize; 2] {
    fn from(p: Point) -> Self {
        [p.row, p.col]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::default())
    }
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "grid",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.data[row * self.width + col] = v;
    }

    pub fn at(&self, p: Point) -> T {
        self.get(p.row, p.col)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sub-window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Grid<T> {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(
                &self.data[r * self.width + left..r * self.width + left + width],
            );
        }
        Grid {
            height,
            width,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Grid<T> {
        let mut out = self.clone();
        for r in 0..self.height {
            out.data[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Grid<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for r in (0..self.height).rev() {
            data.extend_from_slice(&self.data[r * self.width..(r + 1) * self.width]);
        }
        Grid {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Rotates clockwise by `quarter_turns × 90°`.
    pub fn rot90(&self, quarter_turns: u8) -> Grid<T> {
        let mut cur = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w) = (cur.height, cur.width);
            let mut data = Vec::with_capacity(h * w);
            // new[r'][c'] = old[h-1-c'][r'] with new dims (w, h)
            for r in 0..w {
                for c in 0..h {
                    data.push(cur.data[(h - 1 - c) * w + r]);
                }
            }
            cur = Grid {
                height: w,
                width: h,
                data,
            };
        }
        cur
    }
}

/// Image point of `p` after a clockwise rotation of a `height × width` grid.
pub fn rot90_point(p: Point, height: usize, width: usize, quarter_turns: u8) -> Point {
    let (mut p, mut h, mut w) = (p, height, width);
    for _ in 0..quarter_turns % 4 {
        p = Point::new(p.col, h - 1 - p.row);
        std::mem::swap(&mut h, &mut w);
    }
    p
}
