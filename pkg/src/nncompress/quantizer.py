"""Per-layer scalar quantization with 1-D k-means codebooks.

Every weight of a layer is replaced by the index of its nearest centroid.
A codebook of ``bits`` bits holds at most ``2**bits`` centroids, so the
nominal compression factor of a quantized layer is ``32 / bits``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, IndexOutOfRange, NonFiniteWeight, OutOfRange, TooLarge

MAX_BITS = 32
MAX_ITERATIONS = 100
RELATIVE_TOLERANCE = 1e-6
ORACLE_MAX_SIZE = 10_000
REFINE_MAX_CENTROIDS = 64
REFINE_ROUNDS = 200
MOVE_CANDIDATES = 5
SPLIT_SAMPLES = 512
SCAN_LIMIT = 4096
DP_CELLS = 4_000_000


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray
    bits: int

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float32).ravel()
        if not 1 <= self.bits <= MAX_BITS:
            raise OutOfRange(f"codebook bits {self.bits} outside [1, {MAX_BITS}]")
        if c.size > 2**self.bits:
            raise OutOfRange(f"{c.size} centroids do not fit in {self.bits} bits")
        if not np.all(np.isfinite(c)):
            raise NonFiniteWeight("codebook holds a non-finite centroid")
        if np.any(np.diff(c) <= 0):
            raise OutOfRange("codebook centroids must be strictly increasing")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    def __len__(self) -> int:
        return int(self.centroids.size)

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.bits == other.bits and self.centroids.tobytes() == other.centroids.tobytes()

    __hash__ = None


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    codebook: Codebook
    indices: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "shape", tuple(self.shape))


def centroid_count(bits: int) -> int:
    """Number of centroids available at ``bits`` bits per weight."""
    if isinstance(bits, bool) or not isinstance(bits, (int, np.integer)) or not 1 <= bits <= MAX_BITS:
        raise OutOfRange(f"bits must be an integer in [1, {MAX_BITS}], got {bits!r}")
    return 2 ** int(bits)


def _flat_values(weights) -> np.ndarray:
    v = np.asarray(weights, dtype=np.float32).ravel()
    if v.size == 0:
        raise EmptyInput("cannot build a codebook from zero weights")
    if not np.all(np.isfinite(v)):
        raise NonFiniteWeight("weights contain NaN or Inf")
    return v


def assign(values, centroids) -> np.ndarray:
    """Index of the nearest centroid for each value, ties to the lower index.

    ``centroids`` must be sorted ascending. The midpoint of two float32
    centroids is exact in float64, so the comparison is exact too.
    """
    c = np.asarray(centroids, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64).ravel()
    if c.size == 0:
        raise EmptyInput("empty codebook")
    mids = (c[:-1] + c[1:]) / 2.0
    return np.searchsorted(mids, v, side="left").astype(np.int64)


def reconstruction_sse(values, codebook: Codebook) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    c = codebook.centroids.astype(np.float64)
    return float(np.sum((v - c[assign(v, c)]) ** 2))


class _SortedValues:
    """Sorted float64 copy of a layer with prefix sums for O(1) segment SSE."""

    def __init__(self, values: np.ndarray):
        self.s = np.sort(np.asarray(values, dtype=np.float64))
        self.n = self.s.size
        self.p1 = np.concatenate(([0.0], np.cumsum(self.s)))
        self.p2 = np.concatenate(([0.0], np.cumsum(self.s * self.s)))

    def seg_mean(self, lo, hi):
        mean = (self.p1[hi] - self.p1[lo]) / (hi - lo)
        # the prefix-difference mean may drift outside its run by rounding
        return np.clip(mean, self.s[lo], self.s[hi - 1])

    def seg_sse(self, lo, hi):
        lo = np.asarray(lo)
        hi = np.asarray(hi)
        length = np.maximum(hi - lo, 1)
        total = self.p1[hi] - self.p1[lo]
        return np.maximum(self.p2[hi] - self.p2[lo] - total * total / length, 0.0)

    def companded_quantiles(self, k: int) -> np.ndarray:
        """k values spread with density proportional to p(x)^(1/3).

        That is the asymptotically MSE-optimal centroid density. The sample
        density is estimated from the spacing across a window of about half
        a cluster, so each sample carries mass spacing^(2/3).
        """
        n = self.n
        h = max(1, n // (2 * k))
        idx = np.arange(n)
        gap = self.s[np.minimum(idx + h, n - 1)] - self.s[np.maximum(idx - h, 0)]
        mass = np.cumsum(gap ** (2.0 / 3.0))
        if mass[-1] <= 0:
            return self.s[[0]]
        pos = np.searchsorted(mass / mass[-1], (np.arange(k) + 0.5) / k)
        return self.s[np.minimum(pos, n - 1)]

    def bounds(self, centroids: np.ndarray) -> np.ndarray:
        """Run boundaries of the nearest-centroid partition, empty runs dropped."""
        mids = (centroids[:-1] + centroids[1:]) / 2.0
        b = np.concatenate(([0], np.searchsorted(self.s, mids, side="right"), [self.n]))
        return np.unique(b)


def _lloyd(data: _SortedValues, centroids: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    s = data.s
    tol = RELATIVE_TOLERANCE * (s[-1] - s[0])
    centroids = np.unique(centroids)
    for _ in range(MAX_ITERATIONS):
        b = data.bounds(centroids)
        lo, hi = b[:-1], b[1:]
        means = data.seg_mean(lo, hi)

        missing = k - means.size
        if missing > 0:
            ends = np.concatenate((s[lo], s[hi - 1]))
            dist = (ends - np.concatenate((means, means))) ** 2
            order = np.lexsort((rng.random(ends.size), -dist))
            picked = []
            for i in order:
                if dist[i] <= 0 or len(picked) == missing:
                    break
                if ends[i] not in picked:
                    picked.append(ends[i])
            means = np.concatenate((means, picked))

        new = np.unique(means)
        converged = new.size == centroids.size and np.max(np.abs(new - centroids)) < tol
        centroids = new
        if converged:
            break
    return centroids


def _best_splits(data: _SortedValues, lo: np.ndarray, hi: np.ndarray):
    """Best two-way split of every run, scanning up to SPLIT_SAMPLES cut points."""
    length = hi - lo
    frac = np.linspace(0.0, 1.0, SPLIT_SAMPLES + 2)[1:-1]
    cuts = lo[:, None] + np.clip(np.rint(frac[None, :] * length[:, None]), 1, np.maximum(length - 1, 1)[:, None]).astype(np.int64)
    cost = data.seg_sse(lo[:, None], cuts) + data.seg_sse(cuts, hi[:, None])
    pick = np.argmin(cost, axis=1)
    rows = np.arange(lo.size)
    gain = data.seg_sse(lo, hi) - cost[rows, pick]
    gain[length < 2] = 0.0
    return gain, cuts[rows, pick]


def _total_sse(data: _SortedValues, bounds: np.ndarray) -> float:
    return float(np.sum(data.seg_sse(bounds[:-1], bounds[1:])))


def _best_cuts(data: _SortedValues, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """For each (left, right) pair, the cut minimising SSE(s[left:cut]) + SSE(s[cut:right])."""
    span = right - left - 1
    width = int(span.max())
    if width <= SCAN_LIMIT:
        offsets = np.arange(width)
        cuts = left[:, None] + 1 + np.minimum(offsets[None, :], span[:, None] - 1)
    else:
        frac = np.linspace(0.0, 1.0, SCAN_LIMIT)
        coarse = left[:, None] + 1 + np.rint(frac[None, :] * (span[:, None] - 1)).astype(np.int64)
        cost = data.seg_sse(left[:, None], coarse) + data.seg_sse(coarse, right[:, None])
        centre = coarse[np.arange(left.size), np.argmin(cost, axis=1)]
        step = span // SCAN_LIMIT + 1
        offsets = np.arange(-int(step.max()), int(step.max()) + 1)
        cuts = np.clip(centre[:, None] + offsets[None, :], left[:, None] + 1, right[:, None] - 1)
    cost = data.seg_sse(left[:, None], cuts) + data.seg_sse(cuts, right[:, None])
    return cuts[np.arange(left.size), np.argmin(cost, axis=1)]


def _descend(data: _SortedValues, bounds: np.ndarray) -> np.ndarray:
    """Coordinate descent placing each cut optimally between its neighbours.

    Cuts of one parity do not interact, so all even cuts move at once, then
    all odd cuts. A cut only moves when its two runs strictly improve.
    """
    b = bounds.copy()
    current = _total_sse(data, b)
    for _ in range(MAX_ITERATIONS):
        for parity in (1, 2):
            idx = np.arange(parity, b.size - 1, 2)
            idx = idx[b[idx + 1] - b[idx - 1] >= 2]
            if idx.size == 0:
                continue
            left, right = b[idx - 1], b[idx + 1]
            cuts = _best_cuts(data, left, right)
            old = data.seg_sse(left, b[idx]) + data.seg_sse(b[idx], right)
            new = data.seg_sse(left, cuts) + data.seg_sse(cuts, right)
            better = new < old
            b[idx[better]] = cuts[better]
        total = _total_sse(data, b)
        if total >= current * (1 - 1e-12):
            break
        current = total
    return b


def _settle(data: _SortedValues, centroids: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd to a fixed point, then boundary descent; returns run bounds."""
    centroids = _lloyd(data, centroids, k, rng)
    return _descend(data, data.bounds(centroids))


def _refine(data: _SortedValues, bounds: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Escape local optima by merging two adjacent runs and splitting another.

    The cheapest merges are paired with the most profitable splits and
    tried in order of their immediate gain; the first pairing that still
    lowers the SSE after settling is taken, so the SSE decreases strictly
    from round to round.
    """
    b = bounds
    current = _total_sse(data, b)
    for _ in range(REFINE_ROUNDS):
        lo, hi = b[:-1], b[1:]
        if lo.size < 3:
            break
        sse = data.seg_sse(lo, hi)
        merge_cost = data.seg_sse(lo[:-1], hi[1:]) - sse[:-1] - sse[1:]
        split_gain, split_at = _best_splits(data, lo, hi)
        moves = [
            (split_gain[t] - merge_cost[j], int(j), int(t))
            for j in np.argsort(merge_cost, kind="stable")[:MOVE_CANDIDATES]
            for t in np.argsort(-split_gain, kind="stable")[:MOVE_CANDIDATES]
            if t not in (j, j + 1) and split_gain[t] > 0
        ]
        moves.sort(key=lambda m: -m[0])
        best = None
        for _, j, t in moves:
            moved = np.unique(np.append(np.delete(b, j + 1), split_at[t]))
            trial = _settle(data, data.seg_mean(moved[:-1], moved[1:]), k, rng)
            trial_sse = _total_sse(data, trial)
            if trial_sse < current * (1 - 1e-12):
                best, best_sse = trial, trial_sse
                break
        if best is None:
            break
        b, current = best, best_sse
    return b


def fit_codebook(weights, bits: int, seed: int = 0) -> Codebook:
    """Fit a ``bits``-bit codebook to ``weights`` with Lloyd's algorithm.

    Centroids start at the (i + 0.5) / k quantiles of the companded
    distribution (density^(1/3)), are settled by Lloyd iterations plus an
    exact boundary descent, and for small codebooks are then refined by
    merge/split moves. Clusters that empty out are respawned at the value
    farthest from its centroid; ``seed`` only orders candidates at equal
    distance. When the layer has no more distinct values than centroids,
    the codebook is exactly the set of distinct values.
    """
    k = centroid_count(bits)
    v = _flat_values(weights)
    distinct = np.unique(v)
    if distinct.size <= k:
        return Codebook(distinct, bits)
    rng = np.random.default_rng(seed)
    data = _SortedValues(v)
    bounds = _settle(data, data.companded_quantiles(k), k, rng)
    if k <= REFINE_MAX_CENTROIDS:
        bounds = _refine(data, bounds, k, rng)
    centroids = data.seg_mean(bounds[:-1], bounds[1:])
    return Codebook(np.unique(centroids.astype(np.float32)), bits)


def exact_kmeans_1d(weights, k: int) -> Codebook:
    """Globally optimal 1-D k-means by dynamic programming.

    Optimal clusters of sorted 1-D data are contiguous runs, so the best
    m-cluster cost ending at position j is the min over split points i
    of the best (m-1)-cluster cost up to i plus the SSE of s[i:j].
    O(k n^2); intended as a reference for small inputs.
    """
    v = np.asarray(weights, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("cannot cluster zero values")
    if v.size > ORACLE_MAX_SIZE:
        raise TooLarge(f"exact k-means is limited to {ORACLE_MAX_SIZE} values, got {v.size}")
    if k < 1:
        raise OutOfRange(f"k must be positive, got {k}")
    bits = max(1, (k - 1).bit_length())
    distinct = np.unique(v.astype(np.float32))
    if distinct.size <= k:
        return Codebook(distinct, bits)

    s = np.sort(v)
    n = s.size
    p1 = np.concatenate(([0.0], np.cumsum(s)))
    p2 = np.concatenate(([0.0], np.cumsum(s * s)))
    starts = np.arange(n + 1)

    best = np.full(n + 1, np.inf)
    # one cluster covering s[0:j]
    with np.errstate(invalid="ignore", divide="ignore"):
        lengths = starts.astype(np.float64)
        best[1:] = (p2[1:] - p1[1:] ** 2 / lengths[1:])
    best[0] = 0.0
    back = [np.zeros(n + 1, dtype=np.int64)]

    def costs(ends):
        seg = ends[None, :] - starts[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            s1 = p1[ends][None, :] - p1[:, None]
            cost = p2[ends][None, :] - p2[:, None] - s1 * s1 / seg
        return np.where(seg > 0, np.maximum(cost, 0.0), np.inf)

    block = max(1, DP_CELLS // (n + 1))
    blocks = [np.arange(j0, min(j0 + block, n + 1)) for j0 in range(1, n + 1, block)]
    cached = [costs(ends) for ends in blocks] if len(blocks) == 1 else None
    for _ in range(1, k):
        new = np.full(n + 1, np.inf)
        arg = np.zeros(n + 1, dtype=np.int64)
        for bi, ends in enumerate(blocks):
            cost = cached[bi] if cached else costs(ends)
            total = best[:, None] + cost
            arg[ends] = np.argmin(total, axis=0)
            new[ends] = total[arg[ends], np.arange(ends.size)]
        best = new
        back.append(arg)

    cuts = [n]
    j = n
    for arg in reversed(back[1:]):
        j = int(arg[j])
        cuts.append(j)
    cuts.append(0)
    cuts = sorted(set(cuts))
    means = [s[a:b].mean() for a, b in zip(cuts[:-1], cuts[1:]) if b > a]
    return Codebook(np.unique(np.asarray(means, dtype=np.float32)), bits)


def quantize_layer(weights, bits: int, seed: int = 0) -> QuantizedLayer:
    arr = np.asarray(weights, dtype=np.float32)
    codebook = fit_codebook(arr, bits, seed)
    return QuantizedLayer(codebook, assign(arr, codebook.centroids), arr.shape)


def dequantize_layer(q: QuantizedLayer) -> np.ndarray:
    """Replace every index with its centroid value."""
    idx = q.indices
    if idx.size and (idx.min() < 0 or idx.max() >= len(q.codebook)):
        raise IndexOutOfRange(f"index outside codebook of {len(q.codebook)} centroids")
    return q.codebook.centroids[idx].reshape(q.shape)
