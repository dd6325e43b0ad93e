"""Competitive Hebbian learning rule with rank-based anti-Hebbian gating.

For a weight row W[u] and input v, the drive ("bracket current") of unit u
is  I_u = sum_i |W[u][i]|**(p-2) * W[u][i] * v[i],  a generalized dot
product under the Lebesgue-p norm. Per input sample, units are ranked by
current: the top unit is reinforced (gate +1) and the k-th ranked unit is
depressed (gate -delta). The raw weight step aggregates

    raw[u][i] = sum_s g_s[u] * (v[s][i] - I[s][u] * W[u][i])

over the batch and is then scaled by its own max-abs so the largest entry
of the returned step direction is exactly 1 (a precision floor guards the
all-zero case). The learning rate lives in the optimizer; weights are
never mutated here.

The rule's fixed point W = I*W for the winning unit drives each trained
row toward unit p-norm (sum_i |W[u][i]|**p -> 1), which is the quantity
the convergence visualizer tracks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import parallel
from .errors import ConfigError, DimensionError
from .layers import LayerNode
from .tensorcore import rank_rows

# Work decomposes into fixed row blocks (samples for the ranking phase,
# units for the aggregation phase). Block boundaries depend only on the
# problem size and every output element is produced by exactly one block,
# so results are bit-identical for any worker count. Small problems use a
# single block per phase: pool dispatch would cost more than the work.
_SAMPLE_SHARD_ROWS = 128
_UNIT_SHARD_ROWS = 256
_PARALLEL_MIN_WORK = 2e7


@dataclass
class KrotovParams:
    """Hyperparameters: Lebesgue exponent p, anti-Hebbian rank k and
    strength delta, and the normalization precision floor."""

    p: float = 4.0
    k: int = 4
    delta: float = 0.4
    precision: float = 1e-30

    def __post_init__(self):
        if self.p < 2:
            raise ConfigError(f"p must be >= 2, got {self.p}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.precision <= 0:
            raise ConfigError(f"precision must be > 0, got {self.precision}")


@dataclass
class RuleUpdate:
    """Normalized step direction plus per-batch diagnostics."""

    delta_w: np.ndarray
    max_abs_raw: float
    anti_hebbian_count: int


def _signed_pow(weights: np.ndarray, p: float) -> np.ndarray:
    """W * |W|**(p-2), with fast paths for the common small exponents."""
    if p == 2:
        return weights
    if p == 3:
        return weights * np.abs(weights)
    if p == 4:
        return weights * weights * weights
    return weights * np.abs(weights) ** (p - 2.0)


def bracket_currents(weights: np.ndarray, inputs: np.ndarray, p: float) -> np.ndarray:
    """Generalized input drives: currents[s][u] = sum_i |W|^(p-2) W[u][i] v[s][i]."""
    if p < 2:
        raise ConfigError(f"p must be >= 2, got {p}")
    weights = np.asarray(weights)
    inputs = np.asarray(inputs)
    if weights.ndim != 2 or inputs.ndim != 2 or weights.shape[1] != inputs.shape[1]:
        raise DimensionError(
            f"weights {weights.shape} and inputs {inputs.shape} disagree"
        )
    return inputs @ _signed_pow(weights, p).T


def gate(currents_row: np.ndarray, params: KrotovParams) -> np.ndarray:
    """Gating vector for one sample: +1 at the winner, -delta at rank k.

    When k == 1 the winner and the k-th unit coincide and the Hebbian term
    wins: the single selected unit is gated +1.
    """
    row = np.atleast_2d(np.asarray(currents_row))
    winners, kths = rank_rows(row, params.k)
    g = np.zeros(row.shape[1], dtype=row.dtype)
    g[kths[0]] = -params.delta
    g[winners[0]] = 1.0
    return g


def krotov_update(weights: np.ndarray, inputs: np.ndarray,
                  params: KrotovParams) -> RuleUpdate:
    """Batch-aggregated, max-abs-normalized step direction for `weights`.

    Raw per-sample contributions are summed over the whole batch first; a
    single normalization by max(max|raw|, precision) follows, so the step
    is invariant to uniform scaling of the raw update.
    """
    weights = np.asarray(weights)
    inputs = np.asarray(inputs)
    if weights.ndim != 2 or inputs.ndim != 2 or weights.shape[1] != inputs.shape[1]:
        raise DimensionError(
            f"weights {weights.shape} and inputs {inputs.shape} disagree"
        )
    b = inputs.shape[0]
    if b == 0:
        raise ConfigError("krotov_update requires a non-empty batch")
    units, d = weights.shape
    if params.k > units:
        raise ConfigError(f"k={params.k} exceeds the {units} hidden units")

    wp_t = np.ascontiguousarray(_signed_pow(weights, params.p).T)
    small = b * units * d < _PARALLEL_MIN_WORK
    sample_rows = b if small else _SAMPLE_SHARD_ROWS
    unit_rows = units if small else _UNIT_SHARD_ROWS

    # phase 1, sharded over samples: currents, ranking, gate indices
    def rank_shard(rng_pair):
        start, stop = rng_pair
        currents = inputs[start:stop] @ wp_t  # (rows, units)
        winners, kths = rank_rows(currents, params.k)
        rows = np.arange(stop - start)
        return winners, kths, currents[rows, winners], currents[rows, kths]

    ranked = parallel.map_shards(
        rank_shard, parallel.shard_ranges(b, sample_rows)
    )
    if len(ranked) == 1:
        winners, kths, current_win, current_kth = ranked[0]
    else:
        winners = np.concatenate([r[0] for r in ranked])
        kths = np.concatenate([r[1] for r in ranked])
        current_win = np.concatenate([r[2] for r in ranked])
        current_kth = np.concatenate([r[3] for r in ranked])

    # the winner gate overwrites the anti-Hebbian one when k == 1
    distinct = kths != winners
    gates_t = np.zeros((units, b), dtype=inputs.dtype)
    gates_t[kths, np.arange(b)] = -params.delta
    gates_t[winners, np.arange(b)] = 1.0
    # xx[u] = sum_s g[s][u] * I[s][u]; only gated entries contribute
    xx = np.bincount(winners, weights=current_win, minlength=units)
    xx -= params.delta * np.bincount(kths[distinct],
                                     weights=current_kth[distinct],
                                     minlength=units)

    # phase 2, sharded over units: raw[u] = sum_s g[s][u]*v[s] - xx[u]*W[u],
    # each unit block written to its own slice of the output
    raw = np.empty_like(weights)

    def unit_shard(rng_pair):
        start, stop = rng_pair
        block = raw[start:stop]
        np.dot(gates_t[start:stop], inputs, out=block)
        block -= xx[start:stop, None] * weights[start:stop]
        return float(np.abs(block).max())

    block_maxes = parallel.map_shards(
        unit_shard, parallel.shard_ranges(units, unit_rows)
    )
    max_abs = max(block_maxes)
    delta_w = raw / max(max_abs, params.precision)
    return RuleUpdate(delta_w, max_abs, int(np.count_nonzero(distinct)))


class LearningRule:
    """Interface every local rule implements (one implementation ships)."""

    def update(self, weights: np.ndarray, inputs: np.ndarray) -> RuleUpdate:
        raise NotImplementedError


class KrotovRule(LearningRule):
    """The competitive rule above, bound to a fixed hyperparameter set."""

    def __init__(self, params: KrotovParams | None = None):
        self.params = params or KrotovParams()

    def update(self, weights, inputs):
        return krotov_update(weights, inputs, self.params)


def rule_for_layer(layer: LayerNode) -> bool:
    """Whether a local rule can train this layer (freeze wins over kind)."""
    return layer.kind in ("linear", "conv2d") and not layer.frozen
