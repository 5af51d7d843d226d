"""Training objectives of the coarse matching model as verifiable
numerical functions with analytic gradients.

Encoders, pooling, and prediction heads stay out of scope: every loss
consumes embeddings, probabilities, or boxes directly, which makes each
gradient checkable against central finite differences. Probabilities are
clamped to [eps, 1-eps] before logs; subgradients at l1 kinks and IoU
boundaries are taken as 0, and gradient checks sample away from both.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .exceptions import ValidationError
from .types import BoundingBox

PROB_EPS = 1e-12
N_SPATIAL_CLASSES = 9
DEFAULT_SPATIAL_THETA = 0.05
DEFAULT_LAMBDA = 0.1


def _check_batch(visual, textual, tau):
    V = np.asarray(visual, dtype=np.float64)
    T = np.asarray(textual, dtype=np.float64)
    if V.ndim != 2 or T.ndim != 2 or V.shape != T.shape:
        raise ValidationError(
            f"visual/textual must be matching 2-D matrices, got {V.shape} and {T.shape}"
        )
    if V.shape[0] < 1:
        raise ValidationError("batch must contain at least one pair")
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(T))):
        raise ValidationError("embeddings must be finite")
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    nv = np.linalg.norm(V, axis=1)
    nt = np.linalg.norm(T, axis=1)
    if np.any(nv == 0.0) or np.any(nt == 0.0):
        raise ValidationError("embeddings must have nonzero norm")
    return V, T, nv, nt


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp() in range for any tau
    shifted = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(shifted)
    P = E / E.sum(axis=1, keepdims=True)
    sums = P.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-12):
        raise AssertionError("softmax rows do not sum to 1 within 1e-12")
    return P


def itc_loss(visual, textual, tau: float):
    """Two-way contrastive loss over in-batch pairs with the diagonal as
    positives.

    Returns (loss, grad_visual, grad_textual, grad_tau). Similarities are
    cosines scaled by 1/tau; both the visual-to-text and text-to-visual
    softmax directions contribute half the loss each.
    """
    V, T, nv, nt = _check_batch(visual, textual, tau)
    n = V.shape[0]
    Vh = V / nv[:, None]
    Th = T / nt[:, None]
    S = Vh @ Th.T
    Z = S / tau

    P = _softmax_rows(Z)  # visual -> text, rows sum to 1
    Q = _softmax_rows(Z.T).T  # text -> visual, columns sum to 1
    diag = np.arange(n)
    loss = -0.5 * (np.log(P[diag, diag]).mean() + np.log(Q[diag, diag]).mean())

    eye = np.eye(n)
    dZ = ((P - eye) + (Q - eye)) / (2.0 * n)
    dS = dZ / tau
    grad_tau = float(-(dZ * S).sum() / tau**2)

    # chain back through the unit normalization of each row
    dVh = dS @ Th
    dTh = dS.T @ Vh
    grad_v = (dVh - (dVh * Vh).sum(axis=1, keepdims=True) * Vh) / nv[:, None]
    grad_t = (dTh - (dTh * Th).sum(axis=1, keepdims=True) * Th) / nt[:, None]
    return float(loss), grad_v, grad_t, grad_tau


def itm_loss(y, p):
    """Binary matching loss -mean[y log p + (1-y) log(1-p)].

    Returns (loss, grad_p); p values are clamped to the open unit
    interval before logs so the loss is finite on {0,1} predictions.
    """
    ya = np.asarray(y, dtype=np.float64)
    pa = np.asarray(p, dtype=np.float64)
    if ya.ndim != 1 or ya.shape != pa.shape:
        raise ValidationError(f"labels and probabilities must match, got {ya.shape}, {pa.shape}")
    if ya.size == 0:
        raise ValidationError("itm_loss needs at least one label")
    if not np.all((ya == 0.0) | (ya == 1.0)):
        raise ValidationError("labels must be binary")
    if not np.all(np.isfinite(pa)) or np.any(pa < 0.0) or np.any(pa > 1.0):
        raise ValidationError("match probabilities must lie in [0,1]")
    n = ya.size
    pc = np.clip(pa, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(-np.mean(ya * np.log(pc) + (1.0 - ya) * np.log(1.0 - pc)))
    grad = -(ya / pc - (1.0 - ya) / (1.0 - pc)) / n
    return loss, grad


def select_hard_negative(sim_row, positive_index: int) -> int:
    """Index of the most similar non-positive entry; ties resolve to the
    lowest index."""
    row = np.asarray(sim_row, dtype=np.float64)
    if row.ndim != 1 or row.size < 2:
        raise ValidationError("similarity row must be 1-D with length >= 2")
    if not 0 <= positive_index < row.size:
        raise ValidationError(f"positive_index {positive_index} out of range")
    best = None
    for j in range(row.size):
        if j == positive_index:
            continue
        if best is None or row[j] > row[best]:
            best = j
    return best


def iou(box_a: BoundingBox, box_b: BoundingBox) -> float:
    """Intersection over union of the clipped extents; 0 when disjoint."""
    ax1, ay1, ax2, ay2 = box_a.clipped_extent()
    bx1, by1, bx2, by2 = box_b.clipped_extent()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        raise ValidationError("degenerate boxes with empty union")
    return inter / union


def _axis_overlap_grads(t1, t2, p1, p2, cross_len):
    """Partial derivatives of the intersection area w.r.t. the clipped
    pred extent (p1, p2) on one axis; cross_len is the overlap length on
    the other axis."""
    lo = max(t1, p1)
    hi = min(t2, p2)
    if hi - lo <= 0.0:
        return 0.0, 0.0
    g1 = -cross_len if p1 > t1 else 0.0
    g2 = cross_len if p2 < t2 else 0.0
    return g1, g2


def grounding_loss(true_box: BoundingBox, pred_box: BoundingBox):
    """Box regression loss (1 - IoU) + ||true - pred||_1 on (cx, cy, w, h).

    Returns (loss, grad) with grad the 4-vector w.r.t. the predicted
    fields; the mean over a batch of pairs is the batch loss.
    """
    value_iou = iou(true_box, pred_box)
    t = np.array([true_box.cx, true_box.cy, true_box.w, true_box.h])
    p = np.array([pred_box.cx, pred_box.cy, pred_box.w, pred_box.h])
    l1 = float(np.abs(t - p).sum())
    loss = (1.0 - value_iou) + l1

    tx1, ty1, tx2, ty2 = true_box.clipped_extent()
    px1, py1, px2, py2 = pred_box.clipped_extent()
    iw = max(0.0, min(tx2, px2) - max(tx1, px1))
    ih = max(0.0, min(ty2, py2) - max(ty1, py1))
    inter = iw * ih
    area_t = (tx2 - tx1) * (ty2 - ty1)
    area_p = (px2 - px1) * (py2 - py1)
    union = area_t + area_p - inter

    # d inter / d clipped pred extents
    dI_px1, dI_px2 = _axis_overlap_grads(tx1, tx2, px1, px2, ih)
    dI_py1, dI_py2 = _axis_overlap_grads(ty1, ty2, py1, py2, iw)
    # d pred area / d clipped pred extents
    dA = {"px1": -(py2 - py1), "px2": (py2 - py1), "py1": -(px2 - px1), "py2": (px2 - px1)}
    dI = {"px1": dI_px1, "px2": dI_px2, "py1": dI_py1, "py2": dI_py2}

    def d_iou(edge):
        dU = dA[edge] - dI[edge]
        return (dI[edge] * union - inter * dU) / union**2

    # clip subgradient: zero where the raw extent left the unit square
    raw = {
        "px1": pred_box.cx - pred_box.w / 2.0,
        "px2": pred_box.cx + pred_box.w / 2.0,
        "py1": pred_box.cy - pred_box.h / 2.0,
        "py2": pred_box.cy + pred_box.h / 2.0,
    }
    active = {k: 1.0 if 0.0 < v < 1.0 else 0.0 for k, v in raw.items()}
    d_edges = {k: d_iou(k) * active[k] for k in raw}

    # raw extents back to (cx, cy, w, h)
    grad_iou = np.array(
        [
            d_edges["px1"] + d_edges["px2"],
            d_edges["py1"] + d_edges["py2"],
            0.5 * (d_edges["px2"] - d_edges["px1"]),
            0.5 * (d_edges["py2"] - d_edges["py1"]),
        ]
    )
    grad = -grad_iou + np.sign(p - t)
    return float(loss), grad


def spatial_class(box_i: BoundingBox, box_j: BoundingBox, theta: float = DEFAULT_SPATIAL_THETA) -> int:
    """Relative placement of box_i w.r.t. box_j as one of 9 classes:
    3 horizontal (left, same, right) x 3 vertical (above, same, below),
    encoded as 3*vertical + horizontal. Center deltas within theta count
    as "same"."""
    if theta <= 0:
        raise ValidationError(f"theta must be positive, got {theta}")
    dx = box_i.cx - box_j.cx
    dy = box_i.cy - box_j.cy
    horizontal = 1 if abs(dx) <= theta else (0 if dx < 0 else 2)
    vertical = 1 if abs(dy) <= theta else (0 if dy < 0 else 2)
    return 3 * vertical + horizontal


def _spatial_nll(labels: np.ndarray, probabilities: np.ndarray) -> float:
    """Raw -mean log p[y], defined on a neighborhood of the simplex so
    finite differences can perturb single coordinates."""
    pc = np.minimum(probabilities[np.arange(labels.size), labels], 1.0 - PROB_EPS)
    return float(-np.mean(np.log(pc)))


def spatial_loss(labels, probabilities):
    """Mean 9-way cross-entropy -mean[log p_hat[y]] over region pairs.

    Returns (loss, grad) where grad matches the probability matrix and is
    nonzero only at the true-class entries. Probabilities are direct
    inputs (the head producing them is out of scope).
    """
    y = np.asarray(labels, dtype=np.int64)
    P = np.asarray(probabilities, dtype=np.float64)
    if y.ndim != 1 or P.ndim != 2 or P.shape != (y.size, N_SPATIAL_CLASSES):
        raise ValidationError(
            f"expected labels (n,) and probabilities (n, {N_SPATIAL_CLASSES}), "
            f"got {y.shape} and {P.shape}"
        )
    if y.size == 0:
        raise ValidationError("spatial_loss needs at least one pair")
    if np.any(y < 0) or np.any(y >= N_SPATIAL_CLASSES):
        raise ValidationError("labels must be class indices in 0..8")
    if np.any(P < 0.0) or not np.all(np.isfinite(P)):
        raise ValidationError("probabilities must be finite and non-negative")
    row_sums = P.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        bad = int(np.flatnonzero(np.abs(row_sums - 1.0) > 1e-9)[0])
        raise ValidationError(f"probability row {bad} sums to {row_sums[bad]}, not 1")
    n = y.size
    p_true = P[np.arange(n), y]
    if np.any(p_true < PROB_EPS):
        bad = int(np.flatnonzero(p_true < PROB_EPS)[0])
        raise ValidationError(f"pair {bad}: true-class probability below clamp floor")
    pc = np.minimum(p_true, 1.0 - PROB_EPS)
    loss = _spatial_nll(y, P)
    grad = np.zeros_like(P)
    grad[np.arange(n), y] = -1.0 / (n * pc)
    return loss, grad


def total_loss(itc: float, itm: float, grounding: float, spatial: float, lam: float = DEFAULT_LAMBDA) -> float:
    """Weighted sum itc + itm + lam * (grounding + spatial)."""
    for name, v in (("itc", itc), ("itm", itm), ("grounding", grounding), ("spatial", spatial)):
        if not math.isfinite(v):
            raise ValidationError(f"{name} loss must be finite, got {v}")
    return itc + itm + lam * (grounding + spatial)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, used by the
    losscheck suite; tests carry their own independent copy."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def _random_interior_box(rng) -> BoundingBox:
    return BoundingBox(
        cx=float(rng.uniform(0.35, 0.65)),
        cy=float(rng.uniform(0.35, 0.65)),
        w=float(rng.uniform(0.2, 0.45)),
        h=float(rng.uniform(0.2, 0.45)),
    )


def _edges(box: BoundingBox) -> np.ndarray:
    x1, y1, x2, y2 = box.extent()
    return np.array([x1, x2, y1, y2])


def _perturbed_box(rng, base: BoundingBox) -> BoundingBox:
    """A prediction overlapping ``base`` with every field and every box
    edge separated from the target's by much more than the
    finite-difference step, so no l1 kink or IoU min/max tie is straddled."""
    while True:
        def offset():
            mag = rng.uniform(0.02, 0.08)
            return mag if rng.random() < 0.5 else -mag

        cand = BoundingBox(
            cx=base.cx + offset(),
            cy=base.cy + offset(),
            w=base.w + offset(),
            h=base.h + offset(),
        )
        if np.min(np.abs(_edges(cand) - _edges(base))) > 1e-3:
            return cand


def run_loss_checks(seed: int = 0, n_instances: int = 120, fd_step: float = 1e-5) -> dict:
    """Gradient and property suite behind the losscheck command.

    Runs closed-form spot checks plus finite-difference verification over
    random instances for every differentiable loss, and returns a JSON
    serializable report with one entry per check.
    """
    rng = np.random.default_rng(seed)
    checks: list[dict] = []

    def record(name: str, err: float, tol: float):
        checks.append(
            {"name": name, "max_rel_err": err, "tolerance": tol, "passed": bool(err < tol)}
        )

    # closed-form spot checks
    loss_single, *_ = itc_loss(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), tau=1.0)
    record("itc_singleton_zero", abs(loss_single), 1e-12)
    loss_id, *_ = itc_loss(np.eye(2), np.eye(2), tau=1.0)
    record("itc_identity_2x2", abs(loss_id - 0.3132616875182228), 1e-5)
    loss_itm, _ = itm_loss([1.0], [0.5])
    record("itm_half", abs(loss_itm - math.log(2.0)), 1e-6)
    loss_sp, _ = spatial_loss([3], np.full((1, 9), 1.0 / 9.0))
    record("spatial_uniform", abs(loss_sp - math.log(9.0)), 1e-6)

    # itc gradients: visual, textual, tau
    worst_itc = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 8))
        d = int(rng.integers(2, 12))
        V = rng.normal(size=(n, d))
        T = rng.normal(size=(n, d))
        tau = float(rng.uniform(0.3, 2.0))
        _, gv, gt, gtau = itc_loss(V, T, tau)
        fd_v = finite_difference_gradient(lambda x: itc_loss(x, T, tau)[0], V.copy(), fd_step)
        fd_t = finite_difference_gradient(lambda x: itc_loss(V, x, tau)[0], T.copy(), fd_step)
        fd_tau = finite_difference_gradient(
            lambda x: itc_loss(V, T, float(x[0]))[0], np.array([tau]), fd_step
        )[0]
        worst_itc = max(
            worst_itc,
            _relative_error(gv, fd_v),
            _relative_error(gt, fd_t),
            _relative_error(np.array([gtau]), np.array([fd_tau])),
        )
    record("itc_gradient_fd", worst_itc, 1e-4)

    # itm gradients
    worst_itm = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 16))
        y = rng.integers(0, 2, size=n).astype(float)
        p = rng.uniform(0.05, 0.95, size=n)
        _, grad = itm_loss(y, p)
        fd = finite_difference_gradient(lambda x: itm_loss(y, x)[0], p.copy(), fd_step)
        worst_itm = max(worst_itm, _relative_error(grad, fd))
    record("itm_gradient_fd", worst_itm, 1e-6)

    # grounding gradients, sampled away from kinks and boundaries
    worst_ground = 0.0
    for _ in range(n_instances):
        true_box = _random_interior_box(rng)
        pred_box = _perturbed_box(rng, true_box)
        if iou(true_box, pred_box) < 0.05:
            continue
        _, grad = grounding_loss(true_box, pred_box)
        x0 = np.array([pred_box.cx, pred_box.cy, pred_box.w, pred_box.h])
        fd = finite_difference_gradient(
            lambda x: grounding_loss(true_box, BoundingBox(*x))[0], x0.copy(), fd_step
        )
        worst_ground = max(worst_ground, _relative_error(grad, fd))
    record("grounding_gradient_fd", worst_ground, 1e-4)

    # spatial gradients on the simplex interior
    worst_spatial = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 12))
        # bounded away from the simplex walls so fd truncation stays tiny
        P = rng.uniform(0.2, 1.0, size=(n, 9))
        P /= P.sum(axis=1, keepdims=True)
        y = rng.integers(0, 9, size=n)
        _, grad = spatial_loss(y, P)
        fd = finite_difference_gradient(lambda x: _spatial_nll(y, x), P.copy(), fd_step)
        worst_spatial = max(worst_spatial, _relative_error(grad, fd))
    record("spatial_gradient_fd", worst_spatial, 1e-6)

    # properties: itc rescale invariance, spatial antisymmetry
    worst_scale = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 6))
        d = int(rng.integers(2, 8))
        V = rng.normal(size=(n, d))
        T = rng.normal(size=(n, d))
        base, *_ = itc_loss(V, T, 1.0)
        row = int(rng.integers(0, n))
        V2 = V.copy()
        V2[row] *= float(rng.uniform(0.1, 10.0))
        scaled, *_ = itc_loss(V2, T, 1.0)
        worst_scale = max(worst_scale, abs(base - scaled))
    record("itc_row_rescale_invariance", worst_scale, 1e-9)

    flips = 0
    for _ in range(200):
        a = _random_interior_box(rng)
        b = _random_interior_box(rng)
        c_ab = spatial_class(a, b)
        c_ba = spatial_class(b, a)
        h_ab, v_ab = c_ab % 3, c_ab // 3
        h_ba, v_ba = c_ba % 3, c_ba // 3
        if h_ba != 2 - h_ab or v_ba != 2 - v_ab:
            flips += 1
    record("spatial_class_antisymmetry", float(flips), 1.0)

    return {"passed": all(c["passed"] for c in checks), "checks": checks}
