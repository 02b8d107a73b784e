//! Cyclic rotation groups and their action on feature fields and
//! trajectories.

use std::f64::consts::TAU;

use eqdiff_tensor::Tensor;

use crate::error::{Error, Result};
use crate::types::TrajectoryAction;

/// Rotation by `2 pi index / order`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupElement {
    index: usize,
    order: usize,
}

impl GroupElement {
    pub fn index(self) -> usize {
        self.index
    }

    pub fn order(self) -> usize {
        self.order
    }

    pub fn angle(self) -> f64 {
        TAU * self.index as f64 / self.order as f64
    }

    pub fn degrees(self) -> f64 {
        360.0 * self.index as f64 / self.order as f64
    }

    pub fn is_identity(self) -> bool {
        self.index == 0
    }

    pub fn compose(self, other: Self) -> Self {
        assert_eq!(self.order, other.order, "elements of different groups");
        Self {
            index: (self.index + other.index) % self.order,
            order: self.order,
        }
    }

    pub fn inverse(self) -> Self {
        Self {
            index: (self.order - self.index) % self.order,
            order: self.order,
        }
    }

    /// Number of 90 degree turns, if the rotation is exact on a pixel grid.
    pub fn quarter_turns(self) -> Result<usize> {
        if !(4 * self.index).is_multiple_of(self.order) {
            return Err(Error::UnsupportedElement {
                element: self.index,
                order: self.order,
            });
        }
        Ok(4 * self.index / self.order)
    }
}

/// The cyclic group `C_n` of planar rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CyclicGroup {
    order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::param("group order must be at least 1"));
        }
        Ok(Self { order })
    }

    pub fn order(self) -> usize {
        self.order
    }

    pub fn element(self, index: usize) -> GroupElement {
        GroupElement {
            index: index % self.order,
            order: self.order,
        }
    }

    pub fn identity(self) -> GroupElement {
        self.element(0)
    }

    pub fn elements(self) -> impl Iterator<Item = GroupElement> {
        (0..self.order).map(move |i| self.element(i))
    }

    /// Cayley table: `table[i][j]` is the index of `g_i . g_j`.
    pub fn cayley_table(self) -> Vec<Vec<usize>> {
        self.elements()
            .map(|a| self.elements().map(|b| a.compose(b).index).collect())
            .collect()
    }
}

/// `map[dst] = src` for rotating a `size x size` grid by `quarter_turns`
/// counter-clockwise turns (in normalized `(x, y)` coordinates).
pub fn rotation_index(size: usize, quarter_turns: usize) -> Vec<usize> {
    let k = quarter_turns % 4;
    (0..size * size)
        .map(|dst| {
            let (mut r, mut c) = (dst / size, dst % size);
            for _ in 0..k {
                (r, c) = (size - 1 - c, r);
            }
            r * size + c
        })
        .collect()
}

/// Transformation law of one block of channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldType {
    /// A scalar channel: only its position moves.
    Trivial,
    /// `n` channels indexed by group element, cyclically shifted by the
    /// action.
    Regular,
}

/// A direct sum of field types for the group `C_order`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldRep {
    order: usize,
    blocks: Vec<FieldType>,
}

impl FieldRep {
    pub fn new(order: usize, blocks: Vec<FieldType>) -> Self {
        Self { order, blocks }
    }

    pub fn trivial(order: usize, count: usize) -> Self {
        Self::new(order, vec![FieldType::Trivial; count])
    }

    pub fn regular(order: usize, count: usize) -> Self {
        Self::new(order, vec![FieldType::Regular; count])
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn blocks(&self) -> &[FieldType] {
        &self.blocks
    }

    pub fn channels(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                FieldType::Trivial => 1,
                FieldType::Regular => self.order,
            })
            .sum()
    }

    /// `perm[dst] = src` channel permutation of the group element with
    /// index `g`: `(g . f)_j = f_{j - g}` on every regular block.
    pub fn channel_permutation(&self, g: usize) -> Vec<usize> {
        let n = self.order;
        let mut perm = Vec::with_capacity(self.channels());
        let mut base = 0;
        for b in &self.blocks {
            match b {
                FieldType::Trivial => {
                    perm.push(base);
                    base += 1;
                }
                FieldType::Regular => {
                    perm.extend((0..n).map(|j| base + (j + n - g % n) % n));
                    base += n;
                }
            }
        }
        perm
    }

    pub fn direct_sum(&self, other: &FieldRep) -> FieldRep {
        assert_eq!(self.order, other.order, "direct sum across groups");
        let mut blocks = self.blocks.clone();
        blocks.extend_from_slice(&other.blocks);
        FieldRep::new(self.order, blocks)
    }
}

/// A `(C, H, W)` feature map with its transformation law.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub data: Tensor,
    pub rep: FieldRep,
}

impl FeatureField {
    pub fn new(data: Tensor, rep: FieldRep) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::shape(format!("feature field must be (C, H, H), got {s:?}")));
        }
        if s[0] != rep.channels() {
            return Err(Error::shape(format!(
                "field has {} channels but its representation spans {}",
                s[0],
                rep.channels()
            )));
        }
        Ok(Self { data, rep })
    }
}

/// Gather index acting on a `(B, C, H, W)` tensor laid out row-major.
pub fn field_action_index(
    rep: &FieldRep,
    batch: usize,
    size: usize,
    g: GroupElement,
) -> Result<Vec<u32>> {
    if g.order() != rep.order() {
        return Err(Error::config("group element and representation disagree on the order"));
    }
    let spatial = rotation_index(size, g.quarter_turns()?);
    let perm = rep.channel_permutation(g.index());
    let c = perm.len();
    let plane = size * size;
    let mut idx = Vec::with_capacity(batch * c * plane);
    for b in 0..batch {
        for &src_c in &perm {
            for &src_p in &spatial {
                idx.push(((b * c + src_c) * plane + src_p) as u32);
            }
        }
    }
    Ok(idx)
}

/// Applies `g` to a batched `(B, C, H, W)` tensor of fields of type `rep`.
pub fn rotate_tensor(x: &Tensor, rep: &FieldRep, g: GroupElement) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] != s[3] || s[1] != rep.channels() {
        return Err(Error::shape(format!(
            "cannot act with a {}-channel representation on {s:?}",
            rep.channels()
        )));
    }
    let idx = field_action_index(rep, s[0], s[2], g)?;
    let data = idx.iter().map(|&i| x.data()[i as usize]).collect();
    Ok(Tensor::new(s, data).expect("same shape"))
}

/// Spatially rotates the grid and permutes regular channels.
pub fn rotate_field(x: &FeatureField, g: GroupElement) -> Result<FeatureField> {
    let s = x.data.shape().to_vec();
    let batched = x.data.clone().reshape(&[1, s[0], s[1], s[2]]).expect("same size");
    let out = rotate_tensor(&batched, &x.rep, g)?;
    FeatureField::new(out.reshape(&s).expect("same size"), x.rep.clone())
}

/// Rotates every waypoint about the image centre.
pub fn rotate_action(a: &TrajectoryAction, g: GroupElement) -> TrajectoryAction {
    match g.quarter_turns() {
        Ok(k) => a.rotate_quarter(k),
        Err(_) => a.rotate(g.angle()),
    }
}
