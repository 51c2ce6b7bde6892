//! Hexagonal neighborhoods on the offset square array, and the plan that
//! realizes a size-1 hexagonal convolution as three rectangular ones.
//!
//! Convention: cells in odd columns sit half a cell lower than cells in even
//! columns. A cell in an even column therefore touches the rows `r-1` and `r`
//! of its side columns, and a cell in an odd column touches rows `r` and
//! `r+1`.

/// The seven taps of a size-1 hexagonal kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HexTap {
    Center,
    Top,
    Bottom,
    TopLeft,
    BottomLeft,
    TopRight,
    BottomRight,
}

impl HexTap {
    pub const ALL: [HexTap; 7] = [
        HexTap::Center,
        HexTap::Top,
        HexTap::Bottom,
        HexTap::TopLeft,
        HexTap::BottomLeft,
        HexTap::TopRight,
        HexTap::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HexTap::Center => "center",
            HexTap::Top => "top",
            HexTap::Bottom => "bottom",
            HexTap::TopLeft => "top-left",
            HexTap::BottomLeft => "bottom-left",
            HexTap::TopRight => "top-right",
            HexTap::BottomRight => "bottom-right",
        }
    }
}

/// A neighbor coordinate tagged with the kernel tap that reads it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Neighbor {
    pub row: isize,
    pub col: isize,
    pub tap: HexTap,
}

/// The 7-cell size-1 footprint around `(r, c)`. Out-of-range coordinates
/// are returned as-is; callers clip.
pub fn neighborhood(r: isize, c: isize) -> [Neighbor; 7] {
    // odd columns are shifted down, so their side neighbors start one row lower
    let upper = if c.rem_euclid(2) == 0 { r - 1 } else { r };
    let n = |row, col, tap| Neighbor { row, col, tap };
    [
        n(r, c, HexTap::Center),
        n(r - 1, c, HexTap::Top),
        n(r + 1, c, HexTap::Bottom),
        n(upper, c - 1, HexTap::TopLeft),
        n(upper + 1, c - 1, HexTap::BottomLeft),
        n(upper, c + 1, HexTap::TopRight),
        n(upper + 1, c + 1, HexTap::BottomRight),
    ]
}

/// In-bounds part of [`neighborhood`] on an `h × w` grid.
pub fn neighborhood_clipped(r: usize, c: usize, h: usize, w: usize) -> Vec<Neighbor> {
    neighborhood(r as isize, c as isize)
        .into_iter()
        .filter(|p| p.row >= 0 && p.col >= 0 && (p.row as usize) < h && (p.col as usize) < w)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding::new(0, 0, 0, 0);

    pub const fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            bottom,
            left,
            right,
        }
    }

    pub const fn uniform(p: usize) -> Self {
        Self::new(p, p, p, p)
    }
}

/// Which rectangular sub-kernel a branch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubKernel {
    /// Side taps: a 2×2 kernel dilated by 2 along columns, giving a 2×3
    /// footprint whose middle column is structurally zero. Rows are
    /// (upper, lower), columns are (left, right).
    Side,
    /// Center column: a 3×1 kernel (top, center, bottom).
    Column,
}

impl SubKernel {
    /// `(rows, cols)` of stored weights.
    pub fn extent(self) -> (usize, usize) {
        match self {
            SubKernel::Side => (2, 2),
            SubKernel::Column => (3, 1),
        }
    }

    pub fn dilation(self) -> (usize, usize) {
        match self {
            SubKernel::Side => (1, 2),
            SubKernel::Column => (1, 1),
        }
    }

    /// Footprint including structural zeros.
    pub fn footprint(self) -> (usize, usize) {
        let (kh, kw) = self.extent();
        let (dh, dw) = self.dilation();
        (dh * (kh - 1) + 1, dw * (kw - 1) + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanBranch {
    pub padding: Padding,
    pub kernel: SubKernel,
    /// (row, column) stride.
    pub stride: (usize, usize),
}

impl PlanBranch {
    /// Output `(rows, cols)` for an `h × w` input; zero when the padded
    /// input is narrower than the footprint.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let (fh, fw) = self.kernel.footprint();
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        let out = |p: usize, f: usize, s: usize| if p < f { 0 } else { (p - f) / s + 1 };
        (out(ph, fh, self.stride.0), out(pw, fw, self.stride.1))
    }
}

/// Three padded, strided rectangular convolutions whose results merge into
/// one hexagonal convolution: branch 0 yields the even output columns,
/// branch 1 the odd output columns, branch 2 the center column for every
/// output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HexDecompositionPlan {
    pub branches: [PlanBranch; 3],
}

impl HexDecompositionPlan {
    pub fn distinct_kernels(&self) -> usize {
        let mut ks: Vec<SubKernel> = self.branches.iter().map(|b| b.kernel).collect();
        ks.dedup();
        ks.len()
    }

    /// `[(rows, cols); 3]` of the three branch outputs for an `h × w` input.
    pub fn output_extents(&self, h: usize, w: usize) -> [(usize, usize); 3] {
        self.branches.map(|b| b.output_extent(h, w))
    }
}

pub fn decomposition_plan() -> HexDecompositionPlan {
    HexDecompositionPlan {
        branches: [
            PlanBranch {
                padding: Padding::new(1, 0, 1, 1),
                kernel: SubKernel::Side,
                stride: (1, 2),
            },
            PlanBranch {
                padding: Padding::new(0, 1, 0, 1),
                kernel: SubKernel::Side,
                stride: (1, 2),
            },
            PlanBranch {
                padding: Padding::new(1, 1, 0, 0),
                kernel: SubKernel::Column,
                stride: (1, 1),
            },
        ],
    }
}

/// Tap read by stored sub-kernel position `(ki, kj)`.
pub fn sub_kernel_tap(kernel: SubKernel, ki: usize, kj: usize) -> HexTap {
    match (kernel, ki, kj) {
        (SubKernel::Side, 0, 0) => HexTap::TopLeft,
        (SubKernel::Side, 1, 0) => HexTap::BottomLeft,
        (SubKernel::Side, 0, 1) => HexTap::TopRight,
        (SubKernel::Side, 1, 1) => HexTap::BottomRight,
        (SubKernel::Column, 0, 0) => HexTap::Top,
        (SubKernel::Column, 1, 0) => HexTap::Center,
        (SubKernel::Column, 2, 0) => HexTap::Bottom,
        _ => panic!("no tap at {kernel:?} ({ki}, {kj})"),
    }
}
