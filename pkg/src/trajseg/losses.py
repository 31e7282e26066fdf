"""Loss functions over soft segmentations of flow fields and point tracks.

Two families live here.  The flow losses fit a six-parameter quadratic
motion model per segment and score the masked fitting residual.  The
trajectory losses score how far each soft group of tracks is from being
low-rank: the tail loss sums trailing singular values, the reconstruction
loss takes the squared residual against the best rank-r approximation, and
the projective loss does the same on homogeneous coordinates at rank 4.
Analytic gradients are provided with respect to pre-softmax logits; the
trajectory gradients only ever differentiate singular values, never the
singular vectors, so they remain stable as groups become rank deficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import InvalidInputError, RangeError

__all__ = [
    "SoftAssignment",
    "LossWeights",
    "LossBreakdown",
    "softmax",
    "quad_embed",
    "embed_points",
    "flow_loss",
    "flow_loss_grad",
    "trajectory_tail_loss",
    "trajectory_tail_grad",
    "trajectory_reconstruction_loss",
    "trajectory_reconstruction_grad",
    "trajectory_projective_loss",
    "trajectory_projective_grad",
    "tracks_as_flow_loss",
    "tracks_as_flow_grad",
    "bilinear_sample",
    "temporal_smooth_loss",
    "combined_loss",
]

DEFAULT_RANK = 5


def softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _chain_softmax(weights, grad_weights):
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = (weights * grad_weights).sum(axis=1, keepdims=True)
    return weights * (grad_weights - inner)


@dataclass(frozen=True)
class SoftAssignment:
    """Row-stochastic soft membership of points or pixels to K segments.

    weights : (N, K) for point mode or (H*W, K) for pixel mode; every row
        lies on the probability simplex (checked to 1e-9).
    mode : "point" or "pixel".
    grid : (H, W), required in pixel mode.
    """

    weights: np.ndarray
    mode: str
    grid: tuple | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2:
            raise InvalidInputError(f"weights must be 2-d, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidInputError("weights contain non-finite entries")
        if w.min() < -1e-12 or w.max() > 1.0 + 1e-12:
            raise InvalidInputError("weights must lie in [0, 1]")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
            raise InvalidInputError("rows must sum to 1 within 1e-9")
        if self.mode not in ("point", "pixel"):
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.mode == "pixel":
            if self.grid is None:
                raise InvalidInputError("pixel mode requires a (H, W) grid")
            h, wd = self.grid
            if h * wd != w.shape[0]:
                raise InvalidInputError(
                    f"grid {self.grid} does not match {w.shape[0]} rows"
                )

    @property
    def n_segments(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def from_logits(cls, logits, mode="point", grid=None) -> "SoftAssignment":
        return cls(weights=softmax(logits), mode=mode, grid=grid)

    @classmethod
    def from_labels(cls, labels, num_classes=None, mode="point", grid=None):
        labels = np.asarray(labels, dtype=int).ravel()
        k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
        w = np.zeros((labels.size, k))
        w[np.arange(labels.size), labels] = 1.0
        return cls(weights=w, mode=mode, grid=grid)


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the flow, trajectory and temporal terms."""

    lambda_f: float = 0.03
    lambda_t: float = 5e-5
    lambda_tau: float = 0.1

    def __post_init__(self):
        if min(self.lambda_f, self.lambda_t, self.lambda_tau) < 0:
            raise InvalidInputError("loss weights must be nonnegative")

    def to_json(self):
        return {
            "lambda_f": self.lambda_f,
            "lambda_t": self.lambda_t,
            "lambda_tau": self.lambda_tau,
        }


@dataclass(frozen=True)
class LossBreakdown:
    """Named loss terms plus their weighted combination.

    Only the flow, tail and temporal terms enter ``weighted_total``; the
    reconstruction and projective values are reported for comparison.
    """

    l_f: float
    l_t: float
    l_rec: float
    l_per: float
    l_tau: float
    weights: LossWeights
    r: int
    weighted_total: float = field(init=False)

    def __post_init__(self):
        total = (
            self.weights.lambda_f * self.l_f
            + self.weights.lambda_t * self.l_t
            + self.weights.lambda_tau * self.l_tau
        )
        object.__setattr__(self, "weighted_total", total)

    def to_json(self):
        return {
            "l_f": self.l_f,
            "l_t": self.l_t,
            "l_rec": self.l_rec,
            "l_per": self.l_per,
            "l_tau": self.l_tau,
            "total": self.weighted_total,
            "r": self.r,
            "weights": self.weights.to_json(),
        }


# ---------------------------------------------------------------------------
# quadratic embedding and flow losses
# ---------------------------------------------------------------------------


def quad_embed(h: int, w: int) -> np.ndarray:
    """Per-pixel quadratic basis [x, x^2, y, y^2, xy, 1] over the lattice.

    Coordinates are normalised so pixel (0, 0) maps to (0, 0) and pixel
    (W-1, H-1) maps to (1, 1).  Rows are in row-major pixel order.
    """
    if h < 1 or w < 1:
        raise InvalidInputError("grid dimensions must be positive")
    ys = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
    xs = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return embed_points(np.column_stack([gx.ravel(), gy.ravel()]))


def embed_points(points) -> np.ndarray:
    """Quadratic basis evaluated at arbitrary (x, y) positions, (N, 6)."""
    points = np.asarray(points, dtype=float)
    x = points[:, 0]
    y = points[:, 1]
    return np.column_stack([x, x * x, y, y * y, x * y, np.ones_like(x)])


def _fit_terms(weights_col, basis, targets):
    """Masked least-squares fit of one segment.

    The regularised solve runs twice (initial fit plus one residual
    correction) so the stabilising ridge does not bias exactly
    representable targets.  Returns the squared residual and its partial
    derivative with respect to the mask column holding the fitted
    coefficients fixed (the fit is the inner minimiser, so this partial is
    the total derivative).
    """
    ek = weights_col[:, None] * basis
    fk = weights_col[:, None] * targets
    theta = nk.lstsq(ek, fk)
    theta = theta + nk.lstsq(ek, fk - ek @ theta)
    d = targets - basis @ theta
    resid = weights_col[:, None] * d
    value = float((resid**2).sum())
    grad = 2.0 * weights_col * (d * d).sum(axis=1)
    return value, grad


def flow_loss(masks: SoftAssignment, flow):
    """Quadratic-model fitting residual of a flow field under soft masks.

    For each segment the pixel embedding and the flow are both scaled by
    the mask column, a least-squares motion model is fitted, and the
    squared residual is accumulated.

    Returns (total, per-segment residual array).
    """
    if masks.mode != "pixel":
        raise InvalidInputError("flow_loss expects a pixel-mode assignment")
    flow = nk.as_matrix(flow, "flow")
    if flow.shape != (masks.weights.shape[0], 2):
        raise InvalidInputError(
            f"flow shape {flow.shape} does not match masks "
            f"({masks.weights.shape[0]} pixels)"
        )
    h, w = masks.grid
    basis = quad_embed(h, w)
    parts = np.array(
        [
            _fit_terms(masks.weights[:, k], basis, flow)[0]
            for k in range(masks.n_segments)
        ]
    )
    return float(parts.sum()), parts


def flow_loss_grad(logits, flow, grid):
    """Gradient of :func:`flow_loss` with respect to pre-softmax logits."""
    logits = nk.as_matrix(logits, "logits")
    flow = nk.as_matrix(flow, "flow")
    h, w = grid
    if logits.shape[0] != h * w or flow.shape != (h * w, 2):
        raise InvalidInputError("logits, flow and grid sizes disagree")
    weights = softmax(logits)
    basis = quad_embed(h, w)
    g = np.empty_like(weights)
    for k in range(weights.shape[1]):
        _, g[:, k] = _fit_terms(weights[:, k], basis, flow)
    return _chain_softmax(weights, g)


# ---------------------------------------------------------------------------
# trajectory losses
# ---------------------------------------------------------------------------


def _check_tracks(assignment_weights, tracks, frame_paired=False):
    tracks = nk.as_matrix(tracks, "tracks")
    if frame_paired and tracks.shape[0] % 2 != 0:
        raise InvalidInputError("tracks must stack (x, y) rows per frame")
    if assignment_weights.shape[0] != tracks.shape[1]:
        raise InvalidInputError(
            f"assignment covers {assignment_weights.shape[0]} tracks but the "
            f"matrix has {tracks.shape[1]} columns"
        )
    return tracks


def _masked_stack(weights, tracks):
    """All segment-masked track matrices as one (K, 2T, N) stack."""
    return tracks[None, :, :] * weights.T[:, None, :]


def trajectory_tail_loss(assignment: SoftAssignment, tracks, r=DEFAULT_RANK) -> float:
    """Sum over segments of the trailing singular values of masked tracks.

    Each segment scales the track matrix columns by its membership and the
    singular values from index r on (1-based) are summed.  Groups whose
    motion lies in an (r-1)-dimensional subspace contribute nothing, so
    minimising this groups tracks that move together.  Segments too small
    to have an r-th singular value contribute an empty sum.
    """
    if r < 1:
        raise RangeError(f"rank index must be >= 1, got {r}")
    tracks = _check_tracks(assignment.weights, tracks)
    q = min(tracks.shape)
    if r > q:
        return 0.0
    stack = _masked_stack(assignment.weights, tracks)
    sigma = np.linalg.svd(stack, compute_uv=False)
    return float(sigma[:, r - 1 :].sum())


def trajectory_tail_grad(logits, tracks, r=DEFAULT_RANK):
    """Gradient of :func:`trajectory_tail_loss` w.r.t. assignment logits."""
    _, g = trajectory_tail_value_and_grad(logits, tracks, r)
    return g


def trajectory_tail_value_and_grad(logits, tracks, r=DEFAULT_RANK):
    logits = nk.as_matrix(logits, "logits")
    weights = softmax(logits)
    tracks = _check_tracks(weights, tracks)
    q = min(tracks.shape)
    if r < 1:
        raise RangeError(f"rank index must be >= 1, got {r}")
    if r > q:
        return 0.0, np.zeros_like(logits)
    stack = _masked_stack(weights, tracks)
    u, sigma, vt = np.linalg.svd(stack, full_matrices=False)
    value = float(sigma[:, r - 1 :].sum())
    # d(sum of tail sigmas)/dP_k = sum of tail outer products u_i v_i^T;
    # columns of an all-zero segment are skipped (0 is a valid subgradient).
    tail = np.einsum("kmi,kin->kmn", u[:, :, r - 1 :], vt[:, r - 1 :, :])
    tail[sigma[:, 0] == 0.0] = 0.0
    grad_weights = np.einsum("kmn,mn->nk", tail, tracks)
    return value, _chain_softmax(weights, grad_weights)


def _rank_residual(matrix, r):
    """Residual against the best rank-r approximation (r capped at q)."""
    f = nk.svd(matrix)
    return matrix - nk.truncate(f, min(r, f.sigma.size))


def trajectory_reconstruction_loss(
    assignment: SoftAssignment, tracks, r=DEFAULT_RANK
) -> float:
    """Squared distance of each masked group to its best rank-r approximant."""
    if r < 1:
        raise RangeError(f"rank index must be >= 1, got {r}")
    tracks = _check_tracks(assignment.weights, tracks)
    total = 0.0
    for k in range(assignment.n_segments):
        resid = _rank_residual(tracks * assignment.weights[:, k], r)
        total += float((resid**2).sum())
    return total


def trajectory_reconstruction_grad(logits, tracks, r=DEFAULT_RANK):
    _, g = trajectory_reconstruction_value_and_grad(logits, tracks, r)
    return g


def trajectory_reconstruction_value_and_grad(logits, tracks, r=DEFAULT_RANK):
    logits = nk.as_matrix(logits, "logits")
    weights = softmax(logits)
    tracks = _check_tracks(weights, tracks)
    value = 0.0
    grad_weights = np.zeros_like(weights)
    for k in range(weights.shape[1]):
        resid = _rank_residual(tracks * weights[:, k], r)
        value += float((resid**2).sum())
        # best rank-r approximant is the inner minimiser: envelope theorem
        grad_weights[:, k] = 2.0 * (resid * tracks).sum(axis=0)
    return value, _chain_softmax(weights, grad_weights)


def _lift_homogeneous(tracks, weights_col):
    """Stack (x*a, y*a, a) rows per frame for one segment, (3T, N)."""
    frames = tracks.shape[0] // 2
    n = tracks.shape[1]
    lifted = np.empty((3 * frames, n))
    lifted[0::3] = tracks[0::2] * weights_col
    lifted[1::3] = tracks[1::2] * weights_col
    lifted[2::3] = np.broadcast_to(weights_col, (frames, n))
    return lifted


def trajectory_projective_loss(assignment: SoftAssignment, tracks) -> float:
    """Rank-4 residual of masked tracks lifted to homogeneous coordinates.

    Appends a masked all-ones row per frame (scaled like the coordinate
    rows) and measures the squared distance to the best rank-4 matrix,
    which factors into stacked camera matrices times depth-scaled points
    when every track keeps constant projective depth.
    """
    tracks = _check_tracks(assignment.weights, tracks, frame_paired=True)
    total = 0.0
    for k in range(assignment.n_segments):
        lifted = _lift_homogeneous(tracks, assignment.weights[:, k])
        total += float((_rank_residual(lifted, 4) ** 2).sum())
    return total


def trajectory_projective_grad(logits, tracks):
    _, g = trajectory_projective_value_and_grad(logits, tracks)
    return g


def trajectory_projective_value_and_grad(logits, tracks):
    logits = nk.as_matrix(logits, "logits")
    weights = softmax(logits)
    tracks = _check_tracks(weights, tracks, frame_paired=True)
    value = 0.0
    grad_weights = np.zeros_like(weights)
    for k in range(weights.shape[1]):
        lifted = _lift_homogeneous(tracks, weights[:, k])
        resid = _rank_residual(lifted, 4)
        value += float((resid**2).sum())
        grad_weights[:, k] = 2.0 * (
            (resid[0::3] * tracks[0::2]).sum(axis=0)
            + (resid[1::3] * tracks[1::2]).sum(axis=0)
            + resid[2::3].sum(axis=0)
        )
    return value, _chain_softmax(weights, grad_weights)


# ---------------------------------------------------------------------------
# tracks-as-flow and temporal smoothing
# ---------------------------------------------------------------------------


def _lattice_points(tracks, t, h, w):
    """Frame-t positions mapped to the embedding's lattice normalisation."""
    sx = w / (w - 1) if w > 1 else 0.0
    sy = h / (h - 1) if h > 1 else 0.0
    return np.column_stack([tracks[2 * t] * sx, tracks[2 * t + 1] * sy])


def tracks_as_flow_loss(assignment: SoftAssignment, tracks, h, w) -> float:
    """Treat adjacent-frame displacements as a flow field at the points.

    For every consecutive frame pair the per-point displacement is fitted
    by the masked quadratic model evaluated at the earlier positions, and
    the squared residuals are summed over pairs and segments.
    """
    value, _ = _tracks_as_flow(assignment.weights, tracks, h, w)
    return value


def tracks_as_flow_grad(logits, tracks, h, w):
    logits = nk.as_matrix(logits, "logits")
    weights = softmax(logits)
    _, grad_weights = _tracks_as_flow(weights, tracks, h, w)
    return _chain_softmax(weights, grad_weights)


def tracks_as_flow_value_and_grad(logits, tracks, h, w):
    logits = nk.as_matrix(logits, "logits")
    weights = softmax(logits)
    value, grad_weights = _tracks_as_flow(weights, tracks, h, w)
    return value, _chain_softmax(weights, grad_weights)


def _tracks_as_flow(weights, tracks, h, w):
    tracks = _check_tracks(weights, tracks, frame_paired=True)
    frames = tracks.shape[0] // 2
    if frames < 2:
        raise InvalidInputError("need at least two frames of tracks")
    total = 0.0
    grad = np.zeros_like(weights)
    for t in range(frames - 1):
        basis = embed_points(_lattice_points(tracks, t, h, w))
        disp = np.column_stack(
            [tracks[2 * t + 2] - tracks[2 * t], tracks[2 * t + 3] - tracks[2 * t + 1]]
        )
        for k in range(weights.shape[1]):
            val, g = _fit_terms(weights[:, k], basis, disp)
            total += val
            grad[:, k] += g
    return total, grad


def bilinear_sample(values, positions):
    """Bilinear interpolation of a (H, W, C) grid at (N, 2) pixel positions.

    Positions use (x, y) pixel coordinates with cell centers at integers.
    Out-of-grid positions are clamped to the border.

    Returns (samples (N, C), number of clamped positions).
    """
    values = np.asarray(values, dtype=float)
    positions = np.asarray(positions, dtype=float)
    h, w = values.shape[:2]
    x = positions[:, 0]
    y = positions[:, 1]
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    clamped = int(((x != xc) | (y != yc)).sum())
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[:, None]
    fy = (yc - y0)[:, None]
    out = (1 - fy) * ((1 - fx) * values[y0, x0] + fx * values[y0, x1]) + fy * (
        (1 - fx) * values[y1, x0] + fx * values[y1, x1]
    )
    return out, clamped


def temporal_smooth_loss(
    masks_a: SoftAssignment,
    masks_b: SoftAssignment,
    window,
    t: int,
    dt: int = 5,
    diagnostics: dict | None = None,
) -> float:
    """Squared mismatch of two frames' masks sampled along the tracks.

    The first mask grid is sampled (bilinearly) at the window positions of
    frame ``t`` and the second at frame ``t + dt``; a track that stays on
    the same segment sees identical values.  Out-of-grid positions clamp
    to the border and are counted in ``diagnostics['clamped']``.
    """
    positions = getattr(window, "positions", window)
    positions = nk.as_matrix(positions, "window")
    frames = positions.shape[0] // 2
    if not (0 <= t < frames and 0 <= t + dt < frames):
        raise RangeError(f"frames {t} and {t + dt} must lie within the window")
    for m in (masks_a, masks_b):
        if m.mode != "pixel":
            raise InvalidInputError("temporal smoothing expects pixel-mode masks")
    if masks_a.grid != masks_b.grid or masks_a.n_segments != masks_b.n_segments:
        raise InvalidInputError("mask grids must have identical shape")
    h, w = masks_a.grid

    def pixels(frame):
        return np.column_stack(
            [positions[2 * frame] * w, positions[2 * frame + 1] * h]
        )

    grid_a = masks_a.weights.reshape(h, w, -1)
    grid_b = masks_b.weights.reshape(h, w, -1)
    sample_a, clamped_a = bilinear_sample(grid_a, pixels(t))
    sample_b, clamped_b = bilinear_sample(grid_b, pixels(t + dt))
    if diagnostics is not None:
        diagnostics["clamped"] = clamped_a + clamped_b
    return float(((sample_a - sample_b) ** 2).sum())


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------


def combined_loss(
    masks: SoftAssignment | None = None,
    assignment: SoftAssignment | None = None,
    flow=None,
    tracks=None,
    weights: LossWeights | None = None,
    r: int = DEFAULT_RANK,
    *,
    masks_ahead: SoftAssignment | None = None,
    window=None,
    frame: int = 0,
    dt: int = 5,
) -> LossBreakdown:
    """Evaluate every loss term that its inputs allow and combine them.

    The weighted total is lambda_f * l_f + lambda_t * l_t + lambda_tau *
    l_tau; the reconstruction and projective terms are evaluated for
    reporting whenever an assignment and tracks are given.  A term whose
    inputs are missing is reported as 0.
    """
    weights = weights if weights is not None else LossWeights()
    l_f = flow_loss(masks, flow)[0] if masks is not None and flow is not None else 0.0
    l_t = l_rec = l_per = 0.0
    if assignment is not None and tracks is not None:
        l_t = trajectory_tail_loss(assignment, tracks, r)
        l_rec = trajectory_reconstruction_loss(assignment, tracks, r)
        l_per = trajectory_projective_loss(assignment, tracks)
    l_tau = 0.0
    if masks is not None and masks_ahead is not None and window is not None:
        l_tau = temporal_smooth_loss(masks, masks_ahead, window, frame, dt)
    return LossBreakdown(
        l_f=l_f, l_t=l_t, l_rec=l_rec, l_per=l_per, l_tau=l_tau, weights=weights, r=r
    )
