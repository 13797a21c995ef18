//! Dense per-landmark Jacobian blocks.
//!
//! Each block stacks every valid reprojection row of one landmark with
//! columns ordered `[frame variables | landmark (3) | residual (1)]`; frame
//! columns are ordered marginalized-first when a partition is pending.
//! Landmark elimination applies the landmark-column QR's `Q^T` to the whole
//! block in place: the top rows (one per landmark-Jacobian rank, up to 3)
//! are retained for back substitution, the rows below have zero landmark
//! columns and carry the landmark-marginalized information on the frames.

use crate::linalg::{eliminate_columns, DenseMatrix, Reflector, Scalar};
use crate::problem::{
    evaluate_residual, EvalResult, FrameId, LandmarkId, ProblemError, ResidualKind, VarClass,
    VarRef, WindowProblem,
};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockState {
    Linearized,
    NsProjected,
}

#[derive(Clone, Debug)]
pub struct LandmarkBlock<S: Scalar> {
    pub landmark: LandmarkId,
    /// Frame column layout: `(frame, first column)` in storage order.
    pub frames: Vec<(FrameId, usize)>,
    pub frame_dim: usize,
    pub storage: DenseMatrix<S>,
    pub state: BlockState,
    /// Rows retained for landmark recovery after projection (the rank of
    /// the landmark Jacobian, at most 3).
    pub back_sub_rows: usize,
    /// True when the landmark Jacobian had rank < 3 at projection time.
    pub deficient: bool,
    reflectors: Vec<Reflector<S>>,
}

impl<S: Scalar> LandmarkBlock<S> {
    pub fn rows(&self) -> usize {
        self.storage.rows()
    }

    pub fn frame_cols(&self) -> usize {
        self.frames.len() * self.frame_dim
    }

    pub fn landmark_col(&self) -> usize {
        self.frame_cols()
    }

    pub fn residual_col(&self) -> usize {
        self.frame_cols() + 3
    }

    /// Frame-column rows below the back-substitution block, i.e. the
    /// landmark-marginalized rows, plus their residual entries.
    pub fn projected_rows(&self) -> (DenseMatrix<S>, Vec<S>) {
        assert_eq!(self.state, BlockState::NsProjected);
        let r0 = self.back_sub_rows;
        let n = self.rows() - r0;
        let jac = self.storage.block(r0, 0, n, self.frame_cols());
        let res = (r0..self.rows())
            .map(|i| self.storage[(i, self.residual_col())])
            .collect();
        (jac, res)
    }

    /// Undoes the projection (orthogonal transform), for verification.
    pub fn unprojected(&self) -> DenseMatrix<S> {
        let mut out = self.storage.clone();
        for refl in self.reflectors.iter().rev() {
            for c in 0..out.cols() {
                refl_apply(refl, &mut out, c);
            }
        }
        out
    }
}

fn refl_apply<S: Scalar>(r: &Reflector<S>, m: &mut DenseMatrix<S>, col: usize) {
    let mut dot = S::zero();
    for (k, vi) in r.v.iter().enumerate() {
        dot += *vi * m[(r.row + k, col)];
    }
    let f = r.tau * dot;
    for (k, vi) in r.v.iter().enumerate() {
        m[(r.row + k, col)] -= f * *vi;
    }
}

#[derive(Clone, Debug, Default)]
pub struct AssembleStats {
    /// Landmarks omitted for lack of valid observations.
    pub skipped_landmarks: usize,
    /// Reprojection blocks excluded this linearization (behind camera).
    pub invalid_blocks: usize,
    pub rows: usize,
}

/// Assembles one dense block per landmark (optionally restricted to a
/// subset), stacking all of its valid reprojection rows. Frame columns are
/// ordered by partition class (marginalized first), then window order.
pub fn assemble_landmark_blocks<S: Scalar>(
    problem: &WindowProblem<S>,
    only: Option<&BTreeSet<LandmarkId>>,
) -> Result<(Vec<LandmarkBlock<S>>, AssembleStats), ProblemError> {
    let dim = problem.frame_dim();
    let mut stats = AssembleStats::default();
    let mut blocks = Vec::new();

    let class_rank = |id: FrameId| -> usize {
        match problem.partition.as_ref().map(|p| p.class(id)) {
            Some(VarClass::Marginalized) => 0,
            Some(VarClass::Connected) => 1,
            _ => 2,
        }
    };
    let window_pos = |id: FrameId| -> usize {
        problem
            .frames
            .iter()
            .position(|f| f.id == id)
            .unwrap_or(usize::MAX)
    };

    for &lm_id in problem.landmarks.keys() {
        if let Some(filter) = only {
            if !filter.contains(&lm_id) {
                continue;
            }
        }
        let mut evals = Vec::new();
        for block in &problem.residuals {
            if block.landmark != Some(lm_id) {
                continue;
            }
            debug_assert!(matches!(block.kind, ResidualKind::Reprojection { .. }));
            match evaluate_residual(block, problem)? {
                EvalResult::Valid(e) => evals.push(e),
                EvalResult::Invalid(_) => stats.invalid_blocks += 1,
            }
        }
        if evals.is_empty() {
            stats.skipped_landmarks += 1;
            continue;
        }

        let mut frame_ids: Vec<FrameId> = Vec::new();
        for e in &evals {
            for (var, _) in &e.jacobians {
                if let VarRef::Frame(id) = var {
                    if !frame_ids.contains(id) {
                        frame_ids.push(*id);
                    }
                }
            }
        }
        frame_ids.sort_by_key(|id| (class_rank(*id), window_pos(*id)));
        let frames: Vec<(FrameId, usize)> = frame_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i * dim))
            .collect();

        let n_rows: usize = evals.iter().map(|e| e.residual.len()).sum();
        let n_cols = frames.len() * dim + 3 + 1;
        let mut storage = DenseMatrix::zeros(n_rows, n_cols);
        let lm_col = frames.len() * dim;
        let res_col = lm_col + 3;
        let mut row = 0;
        for e in &evals {
            for (var, jac) in &e.jacobians {
                let col0 = match var {
                    VarRef::Frame(id) => frames.iter().find(|(f, _)| f == id).unwrap().1,
                    VarRef::Landmark(_) => lm_col,
                };
                storage.set_block(row, col0, jac);
            }
            for (k, r) in e.residual.iter().enumerate() {
                storage[(row + k, res_col)] = *r;
            }
            row += e.residual.len();
        }
        stats.rows += n_rows;
        blocks.push(LandmarkBlock {
            landmark: lm_id,
            frames,
            frame_dim: dim,
            storage,
            state: BlockState::Linearized,
            back_sub_rows: 0,
            deficient: false,
            reflectors: Vec::new(),
        });
    }
    Ok((blocks, stats))
}

/// Projects the block onto the nullspace of its landmark Jacobian in place:
/// after the call, rows past `back_sub_rows` have zero landmark columns.
/// A landmark Jacobian of rank < 3 is handled with the flat-QR convention
/// (fewer retained rows) and flagged.
pub fn ns_project_landmark<S: Scalar>(block: &mut LandmarkBlock<S>) {
    assert_eq!(block.state, BlockState::Linearized);
    let lm_col = block.landmark_col();
    let cols = [lm_col, lm_col + 1, lm_col + 2];
    let sub = block.storage.block(0, lm_col, block.rows(), 3);
    let zero_tol = crate::linalg::default_zero_tol(&sub);
    let sweep = eliminate_columns(&mut block.storage, &cols, 0, zero_tol, true);
    block.back_sub_rows = sweep.pivot_cols.len();
    block.deficient = block.back_sub_rows < 3;
    block.reflectors = sweep.reflectors;
    block.state = BlockState::NsProjected;
}
