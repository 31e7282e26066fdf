"""Per-sequence optimization of assignment logits under the track losses.

Each trajectory owns a K-way logit row; adaptive-moment gradient steps
drive the soft assignment toward groups whose masked track matrices are
low-rank.  This replaces a learned mask predictor for single-sequence
experiments while keeping the loss machinery identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .errors import DivergenceError, InvalidInputError

__all__ = [
    "OptimConfig",
    "OptimTrace",
    "optimize_sequence",
    "hard_labels",
    "hard_loss",
    "greedy_reassign",
    "merge_segments",
    "segment_tracks",
]

LOSS_KINDS = ("tail", "reconstruction", "projective", "tracks_as_flow")


@dataclass(frozen=True)
class OptimConfig:
    """Settings for one optimization run.

    The default weights activate only the trajectory term; the flow term
    joins in when flow fields are supplied and ``lambda_f`` is nonzero.
    ``loss_kind`` picks the trajectory loss variant.  ``early_stop`` ends
    the run once the relative loss change over 100 steps falls below
    1e-7 (the trace's convergence flag uses the same rule either way).
    """

    k: int = 25
    steps: int = 5000
    r: int = L.DEFAULT_RANK
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_kind: str = "tail"
    weights: L.LossWeights = field(
        default_factory=lambda: L.LossWeights(0.0, 1.0, 0.0)
    )
    grid: tuple = (64, 64)
    init_std: float = 0.01
    early_stop: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise InvalidInputError("need at least 2 segments")
        if self.steps < 1:
            raise InvalidInputError("need at least 1 step")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("moment decays must lie in [0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidInputError(f"loss_kind must be one of {LOSS_KINDS}")


@dataclass
class OptimTrace:
    """Per-step record of one run."""

    losses: np.ndarray
    l_f: np.ndarray
    l_t: np.ndarray
    l_tau: np.ndarray
    final_logits: np.ndarray
    wall_time: float
    converged: bool
    steps_run: int

    def to_csv_text(self) -> str:
        lines = ["step,loss_total,l_f,l_t,l_tau"]
        for i in range(self.steps_run):
            lines.append(
                f"{i},{self.losses[i]:.17g},{self.l_f[i]:.17g},"
                f"{self.l_t[i]:.17g},{self.l_tau[i]:.17g}"
            )
        return "\n".join(lines) + "\n"


def _traj_term(cfg, logits, tracks):
    kind = cfg.loss_kind
    if kind == "tail":
        return L.trajectory_tail_value_and_grad(logits, tracks, cfg.r)
    if kind == "reconstruction":
        return L.trajectory_reconstruction_value_and_grad(logits, tracks, cfg.r)
    if kind == "projective":
        return L.trajectory_projective_value_and_grad(logits, tracks)
    h, w = cfg.grid
    return L.tracks_as_flow_value_and_grad(logits, tracks, h, w)


def _sampled_flow_term(logits, tracks, flows, grid):
    """Flow-model fit at the track positions using measured flow fields.

    Flow vectors are read at the nearest pixel of each track position per
    frame and rescaled to normalised units so they are comparable with the
    track coordinates.
    """
    h, w = grid
    frames = tracks.shape[0] // 2
    pairs = min(frames - 1, len(flows))
    weights = L.softmax(logits)
    total = 0.0
    grad = np.zeros_like(logits)
    scale = np.array([w, h], dtype=float)
    for t in range(pairs):
        px = np.clip(np.rint(tracks[2 * t] * w).astype(int), 0, w - 1)
        py = np.clip(np.rint(tracks[2 * t + 1] * h).astype(int), 0, h - 1)
        vectors = flows[t][py * w + px] / scale
        basis = L.embed_points(
            np.column_stack([tracks[2 * t], tracks[2 * t + 1]])
        )
        for k in range(weights.shape[1]):
            val, g = L._fit_terms(weights[:, k], basis, vectors)
            total += val
            grad[:, k] += g
    return total, L._chain_softmax(weights, grad)


def optimize_sequence(tracks, flows=None, cfg: OptimConfig | None = None):
    """Optimize per-track logits; returns (assignment, trace).

    ``tracks`` is a (2T, N) matrix of normalised positions (or an object
    exposing ``positions``); callers are expected to have dropped columns
    that are invisible at the window's reference frame.  Deterministic for
    a fixed config.  A non-finite loss aborts with the trace so far
    attached to the raised error.
    """
    cfg = cfg if cfg is not None else OptimConfig()
    positions = getattr(tracks, "positions", tracks)
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[1]
    if n < cfg.k:
        raise InvalidInputError(f"need at least k={cfg.k} tracks, got {n}")
    rng = np.random.default_rng(cfg.seed)
    logits = rng.normal(0.0, cfg.init_std, (n, cfg.k))
    m = np.zeros_like(logits)
    v = np.zeros_like(logits)
    lam = cfg.weights
    use_flow = flows is not None and lam.lambda_f > 0.0

    losses = np.zeros(cfg.steps)
    lf_arr = np.zeros(cfg.steps)
    lt_arr = np.zeros(cfg.steps)
    ltau_arr = np.zeros(cfg.steps)
    converged = False
    steps_run = 0
    start = time.perf_counter()
    for step in range(cfg.steps):
        l_t, g_t = _traj_term(cfg, logits, positions)
        grad = lam.lambda_t * g_t
        l_f = 0.0
        if use_flow:
            l_f, g_f = _sampled_flow_term(logits, positions, flows, cfg.grid)
            grad = grad + lam.lambda_f * g_f
        total = lam.lambda_t * l_t + lam.lambda_f * l_f
        losses[step] = total
        lf_arr[step] = l_f
        lt_arr[step] = l_t
        steps_run = step + 1
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            trace = OptimTrace(
                losses=losses[:steps_run],
                l_f=lf_arr[:steps_run],
                l_t=lt_arr[:steps_run],
                l_tau=ltau_arr[:steps_run],
                final_logits=logits,
                wall_time=time.perf_counter() - start,
                converged=False,
                steps_run=steps_run,
            )
            raise DivergenceError(
                f"non-finite loss at step {step}", diagnostics={"trace": trace}
            )
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1 ** (step + 1))
        v_hat = v / (1.0 - cfg.beta2 ** (step + 1))
        logits = logits - cfg.step_size * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if step >= 100:
            past = losses[step - 100]
            if abs(losses[step] - past) <= 1e-7 * max(abs(past), 1e-30):
                converged = True
                if cfg.early_stop:
                    break
    trace = OptimTrace(
        losses=losses[:steps_run],
        l_f=lf_arr[:steps_run],
        l_t=lt_arr[:steps_run],
        l_tau=ltau_arr[:steps_run],
        final_logits=logits,
        wall_time=time.perf_counter() - start,
        converged=converged,
        steps_run=steps_run,
    )
    assignment = L.SoftAssignment.from_logits(logits, mode="point")
    return assignment, trace


def hard_labels(assignment) -> np.ndarray:
    """Argmax segment per row; ties resolve to the lowest segment index."""
    weights = getattr(assignment, "weights", assignment)
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise InvalidInputError("assignment must be 2-d")
    return weights.argmax(axis=1)


# ---------------------------------------------------------------------------
# discrete refinement on top of the gradient phase
# ---------------------------------------------------------------------------
#
# The soft phase reliably produces pure-ish fragments but plateaus on the
# permutation-symmetric landscape; greedy hard moves and merges driven by
# the same loss finish the job.  Everything below touches only the loss,
# never ground truth.


def _segment_score(tracks, mask, kind, r):
    """Loss contribution of one hard segment (zero columns drop out)."""
    if not np.any(mask):
        return 0.0
    sub = tracks[:, mask]
    if kind == "projective":
        frames = sub.shape[0] // 2
        lifted = np.empty((3 * frames, sub.shape[1]))
        lifted[0::3] = sub[0::2]
        lifted[1::3] = sub[1::2]
        lifted[2::3] = 1.0
        sigma = np.linalg.svd(lifted, compute_uv=False)
        return float((sigma[4:] ** 2).sum())
    sigma = np.linalg.svd(sub, compute_uv=False)
    if kind == "reconstruction":
        return float((sigma[r:] ** 2).sum())
    return float(sigma[r - 1 :].sum()) if sigma.size >= r else 0.0


def hard_loss(tracks, labels, kind="tail", r=L.DEFAULT_RANK) -> float:
    """Loss of a hard labeling, summed over its segments."""
    tracks = np.asarray(tracks, dtype=float)
    labels = np.asarray(labels)
    return sum(
        _segment_score(tracks, labels == i, kind, r) for i in np.unique(labels)
    )


def greedy_reassign(tracks, labels, kind="tail", r=L.DEFAULT_RANK, sweeps=6,
                    candidates=None):
    """Move single tracks between segments while the loss drops.

    ``candidates`` optionally maps each track to the segment ids worth
    trying (used to keep early sweeps with many segments affordable).
    """
    tracks = np.asarray(tracks, dtype=float)
    labels = np.asarray(labels).copy()
    for _ in range(sweeps):
        ids = list(np.unique(labels))
        score = {i: _segment_score(tracks, labels == i, kind, r) for i in ids}
        changed = 0
        for n in range(tracks.shape[1]):
            cur = labels[n]
            pool = [c for c in (candidates[n] if candidates is not None else ids)
                    if c != cur and c in score]
            best_delta, best_seg = -1e-12, cur
            for cand in pool:
                src = labels == cur
                src[n] = False
                dst = labels == cand
                dst[n] = True
                delta = (
                    _segment_score(tracks, src, kind, r)
                    + _segment_score(tracks, dst, kind, r)
                    - score[cur]
                    - score[cand]
                )
                if delta < best_delta:
                    best_delta, best_seg = delta, cand
            if best_seg != cur:
                labels[n] = best_seg
                changed += 1
                score[cur] = _segment_score(tracks, labels == cur, kind, r)
                score[best_seg] = _segment_score(tracks, labels == best_seg, kind, r)
        if changed == 0:
            break
    return labels


def merge_segments(tracks, labels, kind="tail", r=L.DEFAULT_RANK, target=None):
    """Greedy pairwise merges: always take the cheapest merge, and keep
    merging while it lowers the loss or the segment count exceeds
    ``target`` (None merges only while the loss improves)."""
    tracks = np.asarray(tracks, dtype=float)
    labels = np.asarray(labels).copy()
    while True:
        ids = np.unique(labels)
        floor = max(target or 1, 1)
        if ids.size <= floor:
            return labels
        score = {i: _segment_score(tracks, labels == i, kind, r) for i in ids}
        best = None
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                a, b = ids[i], ids[j]
                merged = _segment_score(tracks, (labels == a) | (labels == b), kind, r)
                delta = merged - score[a] - score[b]
                if best is None or delta < best[0]:
                    best = (delta, a, b)
        if best[0] >= -1e-12 and (target is None or ids.size <= target):
            return labels
        labels[labels == best[2]] = best[1]


def segment_tracks(
    tracks,
    cfg: OptimConfig | None = None,
    *,
    restarts: int = 3,
    over_segments: int = 10,
    target_segments: int | None = None,
    sweeps: int = 6,
):
    """Full per-sequence grouping: gradient phase plus discrete refinement.

    Each restart runs the soft optimizer with ``over_segments`` components
    (fragments of one motion merge cheaply later), polishes the hardened
    labels with single-track moves, agglomerates to ``target_segments``
    (or until merging stops paying), and polishes again.  The restart with
    the lowest final loss wins; ties break toward the earlier restart.

    Returns (labels, info dict with per-restart losses and the winner).
    """
    cfg = cfg if cfg is not None else OptimConfig()
    positions = getattr(tracks, "positions", tracks)
    positions = np.asarray(positions, dtype=float)
    kind = cfg.loss_kind
    runs = []
    for restart in range(max(restarts, 1)):
        sub = OptimConfig(
            k=over_segments,
            steps=cfg.steps,
            r=cfg.r,
            step_size=cfg.step_size,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            seed=int(np.random.default_rng([cfg.seed, restart]).integers(2**31)),
            loss_kind=kind,
            weights=cfg.weights,
            grid=cfg.grid,
            init_std=cfg.init_std,
            early_stop=cfg.early_stop,
        )
        assignment, _ = optimize_sequence(positions, cfg=sub)
        labels = hard_labels(assignment)
        order = np.argsort(-assignment.weights, axis=1)
        candidates = [row[:3] for row in order]
        labels = greedy_reassign(
            positions, labels, kind, cfg.r, sweeps, candidates=candidates
        )
        labels = merge_segments(positions, labels, kind, cfg.r, target=target_segments)
        labels = greedy_reassign(positions, labels, kind, cfg.r, sweeps)
        loss = hard_loss(positions, labels, kind, cfg.r)
        runs.append((loss, restart, labels))
    best_loss, best_restart, best_labels = min(runs, key=lambda t: (t[0], t[1]))
    # compact ids deterministically by first appearance
    first_seen = {}
    remap = np.empty_like(best_labels)
    next_id = 0
    for i, lab in enumerate(best_labels):
        if lab not in first_seen:
            first_seen[lab] = next_id
            next_id += 1
        remap[i] = first_seen[lab]
    info = {
        "restart_losses": [r[0] for r in sorted(runs, key=lambda t: t[1])],
        "chosen_restart": best_restart,
        "final_loss": best_loss,
        "n_segments": int(next_id),
    }
    return remap, info
