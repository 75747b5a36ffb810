"""Training losses over batches of (anchor, positive) descriptor pairs.

Three objectives are provided: a hinge loss with in-batch hardest-negative
mining, a standard triplet loss with randomly drawn in-batch negatives, and
an adaptive-margin variant of the triplet loss.  All operate on rows of unit
descriptors and return analytic gradients alongside the scalar loss.
"""

import numpy as np

from .errors import ParameterError

__all__ = [
    "DistanceMatrix",
    "pairwise_distance",
    "mine_hard",
    "hardnet_loss",
    "triplet_loss",
    "adaptive_margin_triplet_loss",
    "default_adaptive_margin",
]

_UNIT_TOL = 1e-4


def _check_descriptors(x, name):
    x = np.asarray(x)
    if x.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    worst = float(np.abs(norms - 1.0).max(initial=0.0))
    if worst > _UNIT_TOL:
        raise ParameterError(
            f"{name} rows must be unit-norm within {_UNIT_TOL:g}, "
            f"worst deviation {worst:.3e}")
    return x


def _sphere_distance(dots):
    # d = sqrt(2 - 2 a.b) for unit rows, radicand clamped to [0, 4]
    rad = np.clip(2.0 - 2.0 * dots, 0.0, 4.0)
    return np.sqrt(rad), rad


class DistanceMatrix:
    """All anchor-to-positive distances in a batch, with backward.

    Attributes:
        d: N x N array where d[i, j] is the unit-sphere distance between
            anchor i and positive j; the diagonal holds the positive-pair
            distances.
    """

    def __init__(self, d, rad, anchors, positives):
        self.d = d
        self._rad = rad
        self._anchors = anchors
        self._positives = positives

    def backward(self, dd):
        """Backpropagate an upstream gradient through the distances.

        Coordinates where the radicand was clamped get zero gradient.

        Args:
            dd: Array matching ``d`` with the upstream gradient.

        Returns:
            tuple: Gradients with respect to (anchors, positives).
        """
        live = (self._rad > 0.0) & (self._rad < 4.0)
        safe = np.maximum(self.d, 1e-12)
        dgram = np.where(live, -np.asarray(dd) / safe, 0.0)
        return dgram @ self._positives, dgram.T @ self._anchors


def pairwise_distance(anchors, positives):
    """Compute the full anchor/positive distance matrix.

    Args:
        anchors: N x D array of unit-norm anchor descriptors.
        positives: N x D array of unit-norm positive descriptors.

    Returns:
        DistanceMatrix: Distances d[i, j] = sqrt(clamp(2 - 2 a_i.p_j, 0, 4)).

    Raises:
        ParameterError: If a row deviates from unit norm by more than 1e-4.
    """
    a = _check_descriptors(anchors, "anchors")
    p = _check_descriptors(positives, "positives")
    if a.shape != p.shape:
        raise ParameterError(
            f"anchor shape {a.shape} != positive shape {p.shape}")
    d, rad = _sphere_distance(a @ p.T)
    return DistanceMatrix(d, rad, a, p)


def _masked(d):
    m = np.array(d, dtype=np.float64, copy=True)
    np.fill_diagonal(m, np.inf)
    return m


def mine_hard(d, i):
    """Find the hardest in-batch negatives for sample ``i``.

    Args:
        d: N x N distance matrix (or DistanceMatrix).
        i: Row/column index of the pair being mined.

    Returns:
        tuple: (j_min, k_min) where j_min minimizes d[i, j] over j != i and
        k_min minimizes d[k, i] over k != i; ties break to the smallest
        index.

    Raises:
        ParameterError: If the batch has fewer than two pairs.
    """
    if isinstance(d, DistanceMatrix):
        d = d.d
    d = np.asarray(d)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ParameterError(f"distance matrix must be square, got {d.shape}")
    if d.shape[0] < 2:
        raise ParameterError("mining requires at least two pairs")
    m = _masked(d)
    return int(np.argmin(m[i])), int(np.argmin(m[:, i]))


def hardnet_loss(anchors, positives, m=1.0):
    """Hinge loss against the hardest in-batch negative of each pair.

    Per sample i the negative distance is the smaller of d(a_i, p_j_min)
    and d(a_k_min, p_i), with ties resolved to the j_min branch; the loss
    is the batch mean of max(0, m + d(a_i, p_i) - negative).

    Args:
        anchors: N x D unit-norm anchor descriptors, N >= 2.
        positives: N x D unit-norm positive descriptors.
        m: Hinge margin.

    Returns:
        tuple: (loss, grad_anchors, grad_positives).

    Raises:
        ParameterError: If N < 2 or rows are not unit-norm.
    """
    dm = pairwise_distance(anchors, positives)
    d = dm.d
    n = d.shape[0]
    if n < 2:
        raise ParameterError("hardnet_loss requires at least two pairs")
    masked = _masked(d)
    j_min = np.argmin(masked, axis=1)
    k_min = np.argmin(masked, axis=0)
    idx = np.arange(n)
    d_row = d[idx, j_min]
    d_col = d[k_min, idx]
    row_branch = d_row <= d_col
    neg = np.where(row_branch, d_row, d_col)
    terms = np.maximum(0.0, m + d[idx, idx] - neg)
    loss = float(terms.mean())

    active = terms > 0.0
    dd = np.zeros_like(d)
    dd[idx[active], idx[active]] += 1.0 / n
    ra = active & row_branch
    dd[idx[ra], j_min[ra]] -= 1.0 / n
    ca = active & ~row_branch
    dd[k_min[ca], idx[ca]] -= 1.0 / n
    da, dp = dm.backward(dd)
    return loss, da, dp


def _draw_negatives(n, rng):
    # uniform over the other batch members: skip index i by shifting
    offs = rng.integers(0, n - 1, size=n)
    return offs + (offs >= np.arange(n))


def _triplet_core(anchors, positives, margins, neg_idx):
    n = anchors.shape[0]
    dot_pos = np.sum(anchors * positives, axis=1)
    negs = positives[neg_idx]
    dot_neg = np.sum(anchors * negs, axis=1)
    d_pos, rad_pos = _sphere_distance(dot_pos)
    d_neg, rad_neg = _sphere_distance(dot_neg)
    terms = np.maximum(0.0, margins + d_pos - d_neg)
    loss = float(terms.mean())

    active = terms > 0.0
    live_pos = active & (rad_pos > 0.0) & (rad_pos < 4.0)
    live_neg = active & (rad_neg > 0.0) & (rad_neg < 4.0)
    coef_pos = np.where(live_pos, -1.0 / (n * np.maximum(d_pos, 1e-12)), 0.0)
    coef_neg = np.where(live_neg, 1.0 / (n * np.maximum(d_neg, 1e-12)), 0.0)
    da = coef_pos[:, None] * positives + coef_neg[:, None] * negs
    dp = coef_pos[:, None] * anchors
    np.add.at(dp, neg_idx, coef_neg[:, None] * anchors)
    return loss, da, dp, d_pos, d_neg


def triplet_loss(anchors, positives, m=1.0, rng=None):
    """Margin loss against one random in-batch negative per pair.

    The negative for sample i is drawn uniformly from the other positives
    in the batch using ``rng``.

    Args:
        anchors: N x D unit-norm anchor descriptors, N >= 2.
        positives: N x D unit-norm positive descriptors.
        m: Hinge margin.
        rng: numpy Generator supplying the negative draws; a fresh
            unseeded generator is used when omitted.

    Returns:
        tuple: (loss, grad_anchors, grad_positives).

    Raises:
        ParameterError: If N < 2 or rows are not unit-norm.
    """
    a = _check_descriptors(anchors, "anchors")
    p = _check_descriptors(positives, "positives")
    n = a.shape[0]
    if n < 2:
        raise ParameterError("triplet_loss requires at least two pairs")
    if rng is None:
        rng = np.random.default_rng()
    neg_idx = _draw_negatives(n, rng)
    margins = np.full(n, float(m))
    loss, da, dp, _, _ = _triplet_core(a, p, margins, neg_idx)
    return loss, da, dp


def default_adaptive_margin(d_pos, d_neg):
    """Margin that tightens as the drawn negative gets easier.

    Args:
        d_pos: Per-sample positive distances (unused by the default rule).
        d_neg: Per-sample negative distances.

    Returns:
        ndarray: clamp(1 - d_neg / 2, 0.2, 1.0) per sample.
    """
    del d_pos
    return np.clip(1.0 - np.asarray(d_neg) / 2.0, 0.2, 1.0)


def adaptive_margin_triplet_loss(anchors, positives, rng=None, margin_fn=None):
    """Triplet loss whose margin adapts to each sample's negative distance.

    The per-sample margin m_i = margin_fn(d_pos_i, d_neg_i) is treated as a
    constant: no gradient flows through it.

    Args:
        anchors: N x D unit-norm anchor descriptors, N >= 2.
        positives: N x D unit-norm positive descriptors.
        rng: numpy Generator supplying the negative draws; a fresh
            unseeded generator is used when omitted.
        margin_fn: Callable (d_pos, d_neg) -> per-sample margins, applied
            to 1-D arrays; defaults to ``default_adaptive_margin``.

    Returns:
        tuple: (loss, grad_anchors, grad_positives).

    Raises:
        ParameterError: If N < 2 or rows are not unit-norm.
    """
    a = _check_descriptors(anchors, "anchors")
    p = _check_descriptors(positives, "positives")
    n = a.shape[0]
    if n < 2:
        raise ParameterError(
            "adaptive_margin_triplet_loss requires at least two pairs")
    if rng is None:
        rng = np.random.default_rng()
    if margin_fn is None:
        margin_fn = default_adaptive_margin
    neg_idx = _draw_negatives(n, rng)
    # margins depend on distances, so compute them first without gradients
    dot_pos = np.sum(a * p, axis=1)
    dot_neg = np.sum(a * p[neg_idx], axis=1)
    d_pos, _ = _sphere_distance(dot_pos)
    d_neg, _ = _sphere_distance(dot_neg)
    margins = np.asarray(margin_fn(d_pos, d_neg), dtype=np.float64)
    if margins.shape != (n,):
        raise ParameterError(
            f"margin_fn must return {n} margins, got shape {margins.shape}")
    loss, da, dp, _, _ = _triplet_core(a, p, margins, neg_idx)
    return loss, da, dp
