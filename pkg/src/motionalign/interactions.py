"""Shapley-Taylor pairwise interaction engine.

Computes the order-2 interaction index of a (text token, motion token)
pair under a set scoring function: the expected second difference
F(S+ij) - F(S+i) - F(S+j) + F(S) over the random-permutation prefix S.
Two exact oracles (full permutation enumeration and prefix-length
stratification) plus a Monte-Carlo estimator with per-pair RNG streams.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass
class TokenUniverse:
    """Indexed text+motion token set with a subset scoring function.

    Unified indexing: text tokens are 0..n_text-1, motion tokens are
    n_text..K-1.  ``score_fn`` maps a sorted tuple of unified indices to a
    float and must be defined on every subset including the empty one.
    Optional fast paths: ``score_table`` (array indexed by subset bitmask)
    and ``batch_score_fn`` (boolean membership matrix (n, K) -> (n,)).
    """

    n_text: int
    n_motion: int
    score_fn: Callable[[tuple], float]
    score_table: Optional[np.ndarray] = None
    batch_score_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def total(self) -> int:
        return self.n_text + self.n_motion

    def __post_init__(self):
        if self.n_text < 0 or self.n_motion < 0 or self.total < 2:
            raise ValueError("token universe needs at least 2 tokens")

    def score_masks(self, masks: np.ndarray) -> np.ndarray:
        """Score a stack of subsets given as boolean rows of length K."""
        if self.batch_score_fn is not None:
            return np.asarray(self.batch_score_fn(masks), dtype=np.float64)
        if self.score_table is not None:
            weights = 1 << np.arange(self.total, dtype=np.int64)
            return self.score_table[masks.astype(np.int64) @ weights]
        out = np.empty(masks.shape[0])
        for r, row in enumerate(masks):
            out[r] = self.score_fn(tuple(np.nonzero(row)[0]))
        return out


@dataclass
class PrefixDistribution:
    """Distribution of the permutation-prefix length for a K-token set."""

    K: int
    pmf: np.ndarray


@dataclass
class StiGrid:
    """Interaction values for every (text, motion) token pair."""

    values: np.ndarray                 # (n_text, n_motion)
    stderr: Optional[np.ndarray] = None
    sample_count: int | str = "exact"


@dataclass
class StiDistributions:
    """Row-stochastic interaction distributions (Gibbs over grid axes)."""

    m2t: np.ndarray  # (n_motion, n_text): per motion token, over text tokens
    t2m: np.ndarray  # (n_text, n_motion): per text token, over motion tokens


def prefix_length_pmf(K: int) -> PrefixDistribution:
    """P(L = l) = 2(K - l - 1) / (K(K - 1)) for l = 0..K-2."""
    if K < 2:
        raise ValueError(f"prefix distribution needs K >= 2, got {K}")
    ell = np.arange(K - 1)
    pmf = 2.0 * (K - ell - 1) / (K * (K - 1))
    return PrefixDistribution(K=K, pmf=pmf)


def _unified_pair(u: TokenUniverse, i: int, j: int) -> tuple[int, int]:
    if not (0 <= i < u.n_text):
        raise IndexError(f"text index {i} out of range")
    if not (0 <= j < u.n_motion):
        raise IndexError(f"motion index {j} out of range")
    return i, u.n_text + j


def _second_difference_masks(base: np.ndarray, a: int, b: int,
                             u: TokenUniverse) -> np.ndarray:
    """Batched second differences for prefix masks `base` (n, K)."""
    n = base.shape[0]
    masks = np.repeat(base, 4, axis=0)
    masks[0::4, a] = True
    masks[0::4, b] = True
    masks[1::4, a] = True
    masks[2::4, b] = True
    scores = u.score_masks(masks)
    return (scores[0::4] - scores[1::4] - scores[2::4] + scores[3::4]).reshape(n)


def sti_exact_permutation(u: TokenUniverse, i: int, j: int,
                          max_k: int = 8) -> float:
    """Average second difference over all K! permutations (small K only)."""
    a, b = _unified_pair(u, i, j)
    K = u.total
    if K > max_k:
        raise ValueError(f"K={K} exceeds permutation-enumeration guard {max_k}")
    total = 0.0
    count = 0
    if u.score_table is not None:
        table = u.score_table
        bit_a, bit_b = 1 << a, 1 << b
        for perm in itertools.permutations(range(K)):
            mask = 0
            for tok in perm:
                if tok == a or tok == b:
                    break
                mask |= 1 << tok
            total += (table[mask | bit_a | bit_b] - table[mask | bit_a]
                      - table[mask | bit_b] + table[mask])
            count += 1
    else:
        for perm in itertools.permutations(range(K)):
            prefix = []
            for tok in perm:
                if tok == a or tok == b:
                    break
                prefix.append(tok)
            s = tuple(sorted(prefix))
            s_a = tuple(sorted(prefix + [a]))
            s_b = tuple(sorted(prefix + [b]))
            s_ab = tuple(sorted(prefix + [a, b]))
            total += (u.score_fn(s_ab) - u.score_fn(s_a)
                      - u.score_fn(s_b) + u.score_fn(s))
            count += 1
    return total / count


def sti_exact_stratified(u: TokenUniverse, i: int, j: int,
                         max_k: int = 20) -> float:
    """Exact interaction via the prefix-length distribution.

    Sum over prefix lengths l of pmf(l) times the mean second difference
    across all l-subsets of the remaining K-2 tokens.  Polynomial in the
    number of subsets rather than factorial in K; agrees exactly with
    ``sti_exact_permutation`` wherever both are defined.
    """
    a, b = _unified_pair(u, i, j)
    K = u.total
    if K > max_k:
        raise ValueError(f"K={K} exceeds subset-enumeration guard {max_k}")
    rest = [t for t in range(K) if t not in (a, b)]
    pmf = prefix_length_pmf(K).pmf
    total = 0.0
    for ell in range(K - 1):
        combos = list(itertools.combinations(rest, ell))
        base = np.zeros((len(combos), K), dtype=bool)
        for r, combo in enumerate(combos):
            base[r, list(combo)] = True
        diffs = _second_difference_masks(base, a, b, u)
        total += pmf[ell] * diffs.mean()
    return total


def sample_prefix_masks(rng: np.random.Generator, K: int, a: int, b: int,
                        n_samples: int) -> np.ndarray:
    """Prefix membership masks from Fisher-Yates permutations of K tokens."""
    perms = rng.permuted(np.tile(np.arange(K), (n_samples, 1)), axis=1)
    pos = np.argsort(perms, axis=1)
    cut = np.minimum(pos[:, a], pos[:, b])
    masks = pos < cut[:, None]
    masks[:, a] = False
    masks[:, b] = False
    return masks


def empirical_prefix_lengths(K: int, n_samples: int, seed: int) -> np.ndarray:
    """Frequency histogram (length K-1) of sampled prefix lengths."""
    if K < 2:
        raise ValueError("K must be >= 2")
    rng = np.random.default_rng(seed)
    counts = np.zeros(K - 1, dtype=np.int64)
    chunk = 20000
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        masks = sample_prefix_masks(rng, K, 0, 1, n)
        lengths = masks.sum(axis=1)
        counts += np.bincount(lengths, minlength=K - 1)
        done += n
    return counts / float(n_samples)


def sti_monte_carlo(u: TokenUniverse,
                    pairs: Optional[Sequence[tuple[int, int]]],
                    n_samples: int, seed: int,
                    threads: int = 1) -> StiGrid:
    """Monte-Carlo interaction grid with a per-pair RNG stream.

    Each pair (text i, motion j) draws its own ``n_samples`` permutations
    from a stream keyed by (seed, pair index), so results are deterministic
    and independent of evaluation order or parallelism.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if pairs is None:
        pairs = [(i, j) for i in range(u.n_text) for j in range(u.n_motion)]
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty pair list")
    K = u.total
    values = np.zeros((u.n_text, u.n_motion))
    stderr = np.zeros((u.n_text, u.n_motion))

    def run_pair(idx_pair):
        idx, (i, j) = idx_pair
        a, b = _unified_pair(u, i, j)
        rng = np.random.default_rng([seed, idx])
        masks = sample_prefix_masks(rng, K, a, b, n_samples)
        diffs = _second_difference_masks(masks, a, b, u)
        mean = diffs.mean()
        if n_samples > 1:
            se = diffs.std(ddof=1) / math.sqrt(n_samples)
        else:
            se = 0.0
        return i, j, mean, se

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_pair, enumerate(pairs)))
    else:
        results = [run_pair(item) for item in enumerate(pairs)]
    for i, j, mean, se in results:
        values[i, j] = mean
        stderr[i, j] = se
    return StiGrid(values=values, stderr=stderr, sample_count=n_samples)


def _stable_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sti_distributions(grid: StiGrid) -> StiDistributions:
    """Normalise an interaction grid into per-token Gibbs distributions."""
    v = np.asarray(grid.values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("interaction grid contains non-finite values")
    m2t = _stable_softmax(v, axis=0).T   # per motion column, over text
    t2m = _stable_softmax(v, axis=1)     # per text row, over motion
    return StiDistributions(m2t=m2t, t2m=t2m)
