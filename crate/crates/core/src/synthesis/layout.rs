use serde::{Deserialize, Serialize};

use crate::blockops::{blt_block_count, tri_index};

/// Structure of the disturbance filter `Σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Diagonal blocks plus free strictly-lower blocks.
    #[default]
    Full,
    /// Diagonal blocks only (hyperrectangle bounds).
    DiagOnly,
    /// Free strictly-lower blocks except the first block column, which is
    /// fixed to zero so the nominal trajectory follows the nominal model.
    Anchored,
}

/// Offsets of the core decision variables inside the QP vector.
///
/// Blocks are stored row-major, BLT blocks in [`tri_index`] order. The
/// auxiliary epigraph variables follow the core block and are allocated by
/// the assembler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableLayout {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub filter: FilterMode,
    pub phi_x_offset: usize,
    pub phi_u_offset: usize,
    pub q_offset: usize,
    pub sigma_sub_offset: usize,
    pub n_sigma_sub: usize,
    pub n_core: usize,
}

/// Semantic name of a QP variable, independent of its position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarTag {
    PhiX { r: usize, c: usize, i: usize, j: usize },
    PhiU { r: usize, c: usize, i: usize, j: usize },
    Q { t: usize, i: usize },
    SigmaSub { r: usize, c: usize, i: usize, j: usize },
    Aux(AuxTag),
}

/// What an epigraph variable bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuxTag {
    /// `|v_{t,i}|` at vertex `l`.
    OverV { l: usize, t: usize, i: usize },
    /// `|C(t+1, j)_{i,m}|` at vertex `l`.
    OverC {
        l: usize,
        t: usize,
        i: usize,
        j: usize,
        m: usize,
    },
    /// `|(fᵀ Φ̃ₓ(t, j))_m|` for facet `facet` of the state set at time `t`.
    StateL1 { facet: usize, t: usize, j: usize, m: usize },
    /// `|(fᵀ Φ̃ᵤ(t, j))_m|` for input facet `facet`.
    InputL1 { facet: usize, t: usize, j: usize, m: usize },
}

pub fn layout_variables(nx: usize, nu: usize, horizon: usize, filter: FilterMode) -> VariableLayout {
    let blocks = blt_block_count(horizon);
    let phi_x_offset = 0;
    let phi_u_offset = phi_x_offset + blocks * nx * nx;
    let q_offset = phi_u_offset + blocks * nu * nx;
    let sigma_sub_offset = q_offset + horizon * nx;
    let n_sigma_sub = match filter {
        FilterMode::Full => horizon * (horizon + 1) / 2 * nx * nx,
        FilterMode::DiagOnly => 0,
        FilterMode::Anchored => horizon.saturating_sub(1) * horizon / 2 * nx * nx,
    };
    VariableLayout {
        nx,
        nu,
        horizon,
        filter,
        phi_x_offset,
        phi_u_offset,
        q_offset,
        sigma_sub_offset,
        n_sigma_sub,
        n_core: sigma_sub_offset + n_sigma_sub,
    }
}

impl VariableLayout {
    pub fn n_phi_x(&self) -> usize {
        self.phi_u_offset - self.phi_x_offset
    }

    pub fn n_phi_u(&self) -> usize {
        self.q_offset - self.phi_u_offset
    }

    pub fn n_q(&self) -> usize {
        self.sigma_sub_offset - self.q_offset
    }

    /// Entry `(i, j)` of block `(r, c)` of `Φ̃ₓ`.
    pub fn phi_x(&self, r: usize, c: usize, i: usize, j: usize) -> usize {
        debug_assert!(c <= r && r <= self.horizon);
        self.phi_x_offset + tri_index(r, c) * self.nx * self.nx + i * self.nx + j
    }

    pub fn phi_u(&self, r: usize, c: usize, i: usize, j: usize) -> usize {
        debug_assert!(c <= r && r <= self.horizon);
        self.phi_u_offset + tri_index(r, c) * self.nu * self.nx + i * self.nx + j
    }

    /// Component `i` of `q_t`, the diagonal of `Σ(t+1, t+1)`.
    pub fn q(&self, t: usize, i: usize) -> usize {
        debug_assert!(t < self.horizon);
        self.q_offset + t * self.nx + i
    }

    /// Entry `(i, j)` of `Σ(r, c)`, `1 ≤ r ≤ T`, `c < r`; `None` where the
    /// filter mode fixes the block to zero.
    pub fn sigma_sub(&self, r: usize, c: usize, i: usize, j: usize) -> Option<usize> {
        debug_assert!(c < r && r <= self.horizon);
        let block = match self.filter {
            FilterMode::Full => tri_index(r - 1, c),
            FilterMode::Anchored if c > 0 => tri_index(r - 2, c - 1),
            _ => return None,
        };
        Some(self.sigma_sub_offset + block * self.nx * self.nx + i * self.nx + j)
    }

    /// Tag of core variable `idx`; `None` past the core block.
    pub fn tag(&self, idx: usize) -> Option<VarTag> {
        let (nx, nu) = (self.nx, self.nu);
        let unpack = |local: usize, rows: usize| {
            let size = rows * nx;
            let (block, within) = (local / size, local % size);
            let (r, c) = tri_unindex(block);
            (r, c, within / nx, within % nx)
        };
        if idx < self.phi_u_offset {
            let (r, c, i, j) = unpack(idx - self.phi_x_offset, nx);
            Some(VarTag::PhiX { r, c, i, j })
        } else if idx < self.q_offset {
            let (r, c, i, j) = unpack(idx - self.phi_u_offset, nu);
            Some(VarTag::PhiU { r, c, i, j })
        } else if idx < self.sigma_sub_offset {
            let local = idx - self.q_offset;
            Some(VarTag::Q {
                t: local / nx,
                i: local % nx,
            })
        } else if idx < self.n_core {
            let (r, c, i, j) = unpack(idx - self.sigma_sub_offset, nx);
            let (r, c) = match self.filter {
                FilterMode::Anchored => (r + 2, c + 1),
                _ => (r + 1, c),
            };
            Some(VarTag::SigmaSub { r, c, i, j })
        } else {
            None
        }
    }
}

fn tri_unindex(k: usize) -> (usize, usize) {
    let mut r = ((((8 * k + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while tri_index(r + 1, 0) <= k {
        r += 1;
    }
    while tri_index(r, 0) > k {
        r -= 1;
    }
    (r, k - tri_index(r, 0))
}
