//! Positional words in the query mapped onto a 3×3 grid over the image.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ScoredEntity;
use crate::image::{mask_centroid, TextPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationKind {
    None,
    Left,
    Right,
    Top,
    Bottom,
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl LocationKind {
    pub const ALL: [LocationKind; 10] = [
        LocationKind::None,
        LocationKind::Left,
        LocationKind::Right,
        LocationKind::Top,
        LocationKind::Bottom,
        LocationKind::Center,
        LocationKind::TopLeft,
        LocationKind::TopRight,
        LocationKind::BottomLeft,
        LocationKind::BottomRight,
    ];

    /// Grid cells `(row, col)` this kind admits.
    pub fn allowed_cells(self) -> BTreeSet<(usize, usize)> {
        let all = (0..3).flat_map(|r| (0..3).map(move |c| (r, c)));
        match self {
            LocationKind::None => all.collect(),
            LocationKind::Left => all.filter(|&(_, c)| c == 0).collect(),
            LocationKind::Right => all.filter(|&(_, c)| c == 2).collect(),
            LocationKind::Top => all.filter(|&(r, _)| r == 0).collect(),
            LocationKind::Bottom => all.filter(|&(r, _)| r == 2).collect(),
            LocationKind::Center => [(1, 1)].into(),
            LocationKind::TopLeft => [(0, 0)].into(),
            LocationKind::TopRight => [(0, 2)].into(),
            LocationKind::BottomLeft => [(2, 0)].into(),
            LocationKind::BottomRight => [(2, 2)].into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationConstraint {
    pub kind: LocationKind,
    pub allowed_cells: BTreeSet<(usize, usize)>,
}

impl LocationConstraint {
    pub fn new(kind: LocationKind) -> Self {
        Self { kind, allowed_cells: kind.allowed_cells() }
    }

    pub fn none() -> Self {
        Self::new(LocationKind::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Word {
    Vertical(bool),   // true = top
    Horizontal(bool), // true = left
    Center,
}

fn classify(token: &str) -> Option<Word> {
    match token {
        "left" | "leftmost" => Some(Word::Horizontal(true)),
        "right" | "rightmost" => Some(Word::Horizontal(false)),
        "top" | "upper" => Some(Word::Vertical(true)),
        "bottom" | "lower" => Some(Word::Vertical(false)),
        "center" | "centre" | "middle" => Some(Word::Center),
        _ => None,
    }
}

fn corner(top: bool, left: bool) -> LocationKind {
    match (top, left) {
        (true, true) => LocationKind::TopLeft,
        (true, false) => LocationKind::TopRight,
        (false, true) => LocationKind::BottomLeft,
        (false, false) => LocationKind::BottomRight,
    }
}

/// Case-insensitive scan for location words.
///
/// A vertical and a horizontal word next to each other ("upper right",
/// "bottom-left", "left top") make a corner; otherwise the first location
/// word decides. No location word gives [`LocationKind::None`].
pub fn parse_location(query: &TextPrompt) -> LocationConstraint {
    let lower = query.text().to_lowercase();
    let words: Vec<Option<Word>> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(classify)
        .collect();

    for pair in words.windows(2) {
        match (pair[0], pair[1]) {
            (Some(Word::Vertical(t)), Some(Word::Horizontal(l)))
            | (Some(Word::Horizontal(l)), Some(Word::Vertical(t))) => {
                return LocationConstraint::new(corner(t, l));
            }
            _ => {}
        }
    }
    let kind = match words.into_iter().flatten().next() {
        Some(Word::Horizontal(true)) => LocationKind::Left,
        Some(Word::Horizontal(false)) => LocationKind::Right,
        Some(Word::Vertical(true)) => LocationKind::Top,
        Some(Word::Vertical(false)) => LocationKind::Bottom,
        Some(Word::Center) => LocationKind::Center,
        None => LocationKind::None,
    };
    LocationConstraint::new(kind)
}

/// Grid cell `(row, col)` of a point in a `width × height` image.
pub fn grid_cell(cx: f64, cy: f64, width: usize, height: usize) -> (usize, usize) {
    let cell = |v: f64, extent: usize| ((3.0 * v / extent as f64).floor().max(0.0) as usize).min(2);
    (cell(cy, height), cell(cx, width))
}

/// Keep the selected entities whose mask centroid lies in an allowed cell.
/// Returned indices are ascending.
pub fn location_refine(
    entities: &[ScoredEntity],
    selected: &[usize],
    constraint: &LocationConstraint,
    dims: (usize, usize),
) -> Vec<usize> {
    let mut out: Vec<usize> = if constraint.kind == LocationKind::None {
        selected.to_vec()
    } else {
        selected
            .iter()
            .copied()
            .filter(|&i| {
                entities
                    .iter()
                    .find(|e| e.index == i)
                    .and_then(|e| mask_centroid(&e.mask).ok())
                    .map(|(cx, cy)| constraint.allowed_cells.contains(&grid_cell(cx, cy, dims.0, dims.1)))
                    .unwrap_or(false)
            })
            .collect()
    };
    out.sort_unstable();
    out.dedup();
    out
}
