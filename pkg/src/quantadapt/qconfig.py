"""Configuration lattice, storage-ordered ladder, embeddings, and budget solvers.

A layer configuration is one point of the 432-element lattice (4*4*3*3*3
combinations of code bits, absmax bits, group float format and the two block
sizes). The ladder sorts the lattice by per-weight storage rate and gives each
configuration an integer rank; ranks are the scalar per-layer coordinate used
everywhere else (search steps, budget selection, GP inputs).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import nfquant
from .errors import InfeasibleError
from .linalg import truncated_svd

B0_DOMAIN = (16, 32, 64)
B1_DOMAIN = (16, 64, 256)
CODE_BITS_DOMAIN = nfquant.SUPPORTED_CODE_BITS  # (2, 3, 4, 8)
FLOAT_FORMATS = nfquant.FLOAT_FORMATS

EMBED_DIM_VALUE = 4   # per configuration parameter
EMBED_DIM_NAME = 4
EMBED_DIM_BLOCK = 4
LAYER_EMBED_DIM = 5 * EMBED_DIM_VALUE + EMBED_DIM_NAME + EMBED_DIM_BLOCK  # 28


@dataclass(frozen=True, order=True)
class LayerQuantConfig:
    """The five quantization parameters of one layer."""

    b0: int
    b1: int
    b2: str
    B0: int
    B1: int

    def __post_init__(self):
        if self.b0 not in CODE_BITS_DOMAIN:
            raise ValueError(f"b0={self.b0} outside {CODE_BITS_DOMAIN}")
        if self.b1 not in CODE_BITS_DOMAIN:
            raise ValueError(f"b1={self.b1} outside {CODE_BITS_DOMAIN}")
        if self.b2 not in FLOAT_FORMATS:
            raise ValueError(f"b2={self.b2!r} outside {FLOAT_FORMATS}")
        if self.B0 not in B0_DOMAIN:
            raise ValueError(f"B0={self.B0} outside {B0_DOMAIN}")
        if self.B1 not in B1_DOMAIN:
            raise ValueError(f"B1={self.B1} outside {B1_DOMAIN}")

    def to_dict(self) -> dict:
        return {"b0": self.b0, "b1": self.b1, "b2": self.b2, "B0": self.B0, "B1": self.B1}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerQuantConfig":
        return cls(b0=int(d["b0"]), b1=int(d["b1"]), b2=str(d["b2"]), B0=int(d["B0"]), B1=int(d["B1"]))


class LayerLadder:
    """All 432 layer configurations sorted by aligned bit rate, ranked bijectively.

    Ties in rate are broken lexicographically by (b0, b1, bits(b2), b2, B0, B1);
    the format name is needed because bf16 and fp16 cost the same 16 bits.
    """

    def __init__(self):
        def key(cfg):
            return (
                nfquant.bit_rate(cfg),
                cfg.b0,
                cfg.b1,
                nfquant.FLOAT_FORMAT_BITS[cfg.b2],
                cfg.b2,
                cfg.B0,
                cfg.B1,
            )

        all_cfgs = [
            LayerQuantConfig(b0=b0, b1=b1, b2=b2, B0=B0, B1=B1)
            for b0, b1, b2, B0, B1 in itertools.product(
                CODE_BITS_DOMAIN, CODE_BITS_DOMAIN, FLOAT_FORMATS, B0_DOMAIN, B1_DOMAIN
            )
        ]
        self.entries: list[LayerQuantConfig] = sorted(all_cfgs, key=key)
        self._rank = {cfg: k for k, cfg in enumerate(self.entries)}
        self.rates = np.array([nfquant.bit_rate(c) for c in self.entries])

    def __len__(self) -> int:
        return len(self.entries)

    def rank_of(self, cfg: LayerQuantConfig) -> int:
        return self._rank[cfg]

    @property
    def min_rate(self) -> float:
        return float(self.rates[0])

    @property
    def max_rate(self) -> float:
        return float(self.rates[-1])


_ladder_singleton: LayerLadder | None = None


def build_ladder() -> LayerLadder:
    """Return the (cached) canonical ladder."""
    global _ladder_singleton
    if _ladder_singleton is None:
        _ladder_singleton = LayerLadder()
    return _ladder_singleton


@dataclass(frozen=True)
class ModelQuantConfig:
    """One layer configuration per network layer, plus the layer shapes."""

    layers: tuple[LayerQuantConfig, ...]
    layer_shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("ModelQuantConfig needs at least one layer")
        if len(self.layers) != len(self.layer_shapes):
            raise ValueError("layers and layer_shapes length mismatch")

    def to_dict(self) -> dict:
        return {
            "layers": [c.to_dict() for c in self.layers],
            "avg_bits": avg_bits(self),
        }


def avg_bits(C: ModelQuantConfig) -> float:
    """Size-weighted mean of per-layer bit rates (the storage objective f2)."""
    weights = np.array([d * n for d, n in C.layer_shapes], dtype=np.float64)
    rates = np.array([nfquant.bit_rate(c) for c in C.layers])
    return float(np.dot(rates, weights) / weights.sum())


def config_to_ranks(C: ModelQuantConfig, ladder: LayerLadder | None = None) -> np.ndarray:
    ladder = ladder or build_ladder()
    return np.array([ladder.rank_of(c) for c in C.layers], dtype=np.int64)


def ranks_to_config(ranks, layer_shapes, ladder: LayerLadder | None = None) -> ModelQuantConfig:
    ladder = ladder or build_ladder()
    layers = tuple(ladder.entries[int(r)] for r in ranks)
    return ModelQuantConfig(layers=layers, layer_shapes=tuple(tuple(s) for s in layer_shapes))


# --- embeddings ---


class EmbeddingTables:
    """Trainable lookup tables producing the 28-dim per-layer embedding.

    One table per configuration parameter (rows indexed by the parameter's
    domain position), one for the layer name id and one for the block index.
    """

    PARAM_DOMAINS = {
        "b0": CODE_BITS_DOMAIN,
        "b1": CODE_BITS_DOMAIN,
        "b2": FLOAT_FORMATS,
        "B0": B0_DOMAIN,
        "B1": B1_DOMAIN,
    }
    PARAM_ORDER = ("b0", "b1", "b2", "B0", "B1")

    def __init__(self, n_names: int, n_blocks: int, rng: np.random.Generator):
        self.value_tables = {
            p: rng.normal(0.0, 0.5, size=(len(dom), EMBED_DIM_VALUE))
            for p, dom in self.PARAM_DOMAINS.items()
        }
        self.name_table = rng.normal(0.0, 0.5, size=(n_names, EMBED_DIM_NAME))
        self.block_table = rng.normal(0.0, 0.5, size=(n_blocks, EMBED_DIM_BLOCK))

    @classmethod
    def zeros(cls, n_names: int, n_blocks: int) -> "EmbeddingTables":
        t = cls.__new__(cls)
        t.value_tables = {
            p: np.zeros((len(dom), EMBED_DIM_VALUE)) for p, dom in cls.PARAM_DOMAINS.items()
        }
        t.name_table = np.zeros((n_names, EMBED_DIM_NAME))
        t.block_table = np.zeros((n_blocks, EMBED_DIM_BLOCK))
        return t

    @classmethod
    def value_indices_of(cls, c: LayerQuantConfig) -> dict[str, int]:
        vals = {"b0": c.b0, "b1": c.b1, "b2": c.b2, "B0": c.B0, "B1": c.B1}
        return {p: cls.PARAM_DOMAINS[p].index(vals[p]) for p in cls.PARAM_ORDER}

    def value_indices(self, c: LayerQuantConfig) -> dict[str, int]:
        return self.value_indices_of(c)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"table_{p}": self.value_tables[p] for p in self.PARAM_ORDER}
        out["table_name"] = self.name_table
        out["table_block"] = self.block_table
        return out


def embed_layer(c: LayerQuantConfig, layer_name_id: int, block_idx: int,
                tables: EmbeddingTables) -> np.ndarray:
    """Concatenated [value embeddings, name embedding, block embedding] (28-dim)."""
    if not 0 <= layer_name_id < len(tables.name_table):
        raise ValueError(f"layer_name_id {layer_name_id} out of range")
    if not 0 <= block_idx < len(tables.block_table):
        raise ValueError(f"block_idx {block_idx} out of range")
    idx = tables.value_indices(c)
    parts = [tables.value_tables[p][idx[p]] for p in tables.PARAM_ORDER]
    parts.append(tables.name_table[layer_name_id])
    parts.append(tables.block_table[block_idx])
    return np.concatenate(parts)


# --- per-layer reconstruction error and the knapsack over configurations ---


def layer_config_error(W: np.ndarray, c: LayerQuantConfig, r: int) -> float:
    """Frobenius norm of the quantization residual left after a rank-r correction.

    Quantize W under c, take the residual R = W - dequantized, subtract its best
    rank-r approximation (truncated SVD), and return ||R - R_r||_F. The rank is
    clamped to min(d, n) for thin layers.
    """
    W = np.asarray(W, dtype=np.float64)
    d, n = W.shape
    r_eff = min(r, min(d, n))
    W_hat = nfquant.dequantize(nfquant.quantize_layer(W, c))
    R = W - W_hat
    if r_eff == 0:
        return float(np.linalg.norm(R))
    U, S, V = truncated_svd(R, r_eff)
    return float(np.linalg.norm(R - (U * S) @ V.T))


def solve_mckp(candidates: list[list[tuple[float, float]]], budget: float):
    """Exact multiple-choice knapsack: pick one (cost, error) per layer.

    Minimizes total error subject to total cost <= budget; among optima,
    lexicographically maximizes per-layer cost starting from layer 0. Uses
    depth-first branch and bound with a per-layer convex-hull greedy bound.
    Returns the list of chosen candidate indices.

    Raises InfeasibleError when even the cheapest assignment exceeds budget.
    """
    n_layers = len(candidates)
    # keep non-dominated candidates per layer (cost up => error strictly down)
    kept: list[list[tuple[float, float, int]]] = []
    for layer in candidates:
        order = sorted(range(len(layer)), key=lambda j: (layer[j][0], layer[j][1]))
        nd = []
        best_err = np.inf
        for j in order:
            cost, err = layer[j]
            if err < best_err:
                nd.append((cost, err, j))
                best_err = err
        kept.append(nd)

    min_cost_suffix = np.zeros(n_layers + 1)
    for i in range(n_layers - 1, -1, -1):
        min_cost_suffix[i] = min_cost_suffix[i + 1] + min(c for c, _, _ in kept[i])
    if min_cost_suffix[0] > budget:
        raise InfeasibleError(f"budget {budget} below minimum achievable cost {min_cost_suffix[0]}")

    # convex-hull (LP) bound: relax each remaining layer to the lower convex
    # hull of its (cost, error) staircase and fill greedily by efficiency.
    hulls = []
    for nd in kept:
        pts = [(c, e) for c, e, _ in nd]
        hull = [pts[0]]
        for p in pts[1:]:
            while len(hull) >= 2:
                (c1, e1), (c2, e2) = hull[-2], hull[-1]
                # drop hull[-1] if it lies above segment hull[-2] -> p
                if (e2 - e1) * (p[0] - c1) >= (p[1] - e1) * (c2 - c1):
                    hull.pop()
                else:
                    break
            if p[0] > hull[-1][0]:
                hull.append(p)
        hulls.append(hull)

    # hull segments per suffix (gain per unit cost, descending), so the LP
    # bound of the remaining layers is a single greedy sweep
    segments_from = [[] for _ in range(n_layers + 1)]
    for i in range(n_layers - 1, -1, -1):
        own = []
        for (c1, e1), (c2, e2) in zip(hulls[i][:-1], hulls[i][1:]):
            own.append(((e1 - e2) / (c2 - c1), c2 - c1, e1 - e2))
        segments_from[i] = sorted(own + segments_from[i + 1], key=lambda s: -s[0])

    base_cost_suffix = np.zeros(n_layers + 1)
    base_err_suffix = np.zeros(n_layers + 1)
    for i in range(n_layers - 1, -1, -1):
        base_cost_suffix[i] = base_cost_suffix[i + 1] + hulls[i][0][0]
        base_err_suffix[i] = base_err_suffix[i + 1] + hulls[i][0][1]

    def lower_bound(level: int, cost_used: float) -> float:
        # LP optimum of the relaxed remaining problem
        slack = budget - cost_used - base_cost_suffix[level]
        if slack < 0:
            return np.inf
        bound = base_err_suffix[level]
        for eff, dc, de in segments_from[level]:
            if dc <= slack:
                slack -= dc
                bound -= de
            else:
                bound -= de * (slack / dc)
                break
        return bound

    best_err_total = np.inf
    best_choice: list[int] | None = None
    choice = [0] * n_layers

    # Candidates are tried in decreasing cost order at every level, so complete
    # assignments appear in decreasing lexicographic cost order: the first
    # solution found at any error value already wins the tie-break, and a node
    # whose bound cannot *strictly* beat the incumbent error can be cut.
    def dfs(level: int, cost_used: float, err_used: float):
        nonlocal best_err_total, best_choice
        if level == n_layers:
            if err_used < best_err_total:
                best_err_total = err_used
                best_choice = choice.copy()
            return
        if err_used + lower_bound(level, cost_used) >= best_err_total:
            return
        for cost, err, j in reversed(kept[level]):
            if cost_used + cost + min_cost_suffix[level + 1] > budget:
                continue
            if err_used + err >= best_err_total:
                continue
            choice[level] = j
            dfs(level + 1, cost_used + cost, err_used + err)
        choice[level] = 0

    dfs(0, 0.0, 0.0)
    assert best_choice is not None
    return best_choice


def layer_error_table(W: np.ndarray, r: int, ladder: LayerLadder | None = None) -> np.ndarray:
    """layer_config_error of W for every ladder entry, in rank order."""
    ladder = ladder or build_ladder()
    return np.array([layer_config_error(W, c, r) for c in ladder.entries])


def init_config_set(weights, budgets, r: int, error_tables=None) -> list[ModelQuantConfig]:
    """Minimum-residual model configuration for each storage budget.

    For each budget b, solves the knapsack: one ladder entry per layer, total
    rank-r-corrected quantization error minimized subject to avg_bits <= b.
    Budgets below the ladder minimum raise InfeasibleError.
    """
    ladder = build_ladder()
    shapes = tuple((int(W.shape[0]), int(W.shape[1])) for W in weights)
    sizes = np.array([d * n for d, n in shapes], dtype=np.float64)
    if error_tables is None:
        error_tables = [layer_error_table(W, r, ladder) for W in weights]

    configs = []
    for b in budgets:
        if b < ladder.min_rate:
            raise InfeasibleError(f"budget {b} below minimum ladder rate {ladder.min_rate}")
        candidates = [
            [(ladder.rates[k] * sizes[i], float(error_tables[i][k])) for k in range(len(ladder))]
            for i in range(len(weights))
        ]
        choice = solve_mckp(candidates, budget=b * sizes.sum())
        layers = tuple(ladder.entries[k] for k in choice)
        configs.append(ModelQuantConfig(layers=layers, layer_shapes=shapes))
    return configs


def steer_to_window(ranks, layer_shapes, b: float, tol: float,
                    ladder: LayerLadder | None = None) -> np.ndarray:
    """Greedy single-rank steps until the configuration's avg_bits is in b +/- tol.

    Each step moves one layer one rank toward the budget, preferring the
    largest per-step bit movement that does not overshoot the window; raises
    InfeasibleError when the window cannot be reached.
    """
    ladder = ladder or build_ladder()
    ranks = np.asarray(ranks, dtype=np.int64).copy()
    sizes = np.array([d * n for d, n in layer_shapes], dtype=np.float64)
    total = sizes.sum()
    cur = float(np.dot(ladder.rates[ranks], sizes) / total)

    max_steps = len(ladder) * len(ranks) * 2
    for _ in range(max_steps):
        gap = cur - b
        if abs(gap) <= tol:
            return ranks
        direction = -1 if gap > 0 else 1  # too heavy -> step ranks down
        moves = []
        for i in range(len(ranks)):
            k = ranks[i] + direction
            if not 0 <= k < len(ladder):
                continue
            delta = (ladder.rates[k] - ladder.rates[ranks[i]]) * sizes[i] / total
            if delta == 0.0:
                continue  # ladder rates can repeat; skip no-progress moves
            moves.append((i, k, delta))
        if not moves:
            raise InfeasibleError(f"cannot reach bit window {b} +/- {tol}")
        # largest move that does not overshoot the window; else smallest move
        within = [m for m in moves if abs((cur + m[2]) - b) <= tol or (cur + m[2] - b) * gap > 0]
        if within:
            i, k, delta = max(within, key=lambda m: abs(m[2]))
        else:
            i, k, delta = min(moves, key=lambda m: abs(m[2]))
        ranks[i] = k
        cur += delta
    raise InfeasibleError(f"budget window {b} +/- {tol} not reached within step limit")


def nearest_member_index(final_set, b: float) -> int:
    """Index of the set member whose avg_bits is closest to b (ties: lowest index)."""
    if not final_set:
        raise InfeasibleError("empty configuration set")
    gaps = [abs(avg_bits(C) - b) for C in final_set]
    return int(np.argmin(gaps))


def select_for_budget(final_set, b: float, tol: float = 0.05) -> ModelQuantConfig:
    """Pick the set member nearest the requested bit width, nudged into tolerance.

    Starts from the member with avg_bits closest to b and applies
    steer_to_window; the member itself is returned when already inside.
    """
    ladder = build_ladder()
    base = final_set[nearest_member_index(final_set, b)]
    ranks = steer_to_window(config_to_ranks(base, ladder), base.layer_shapes, b, tol, ladder)
    return ranks_to_config(ranks, base.layer_shapes, ladder)


def random_config_at_bits(b: float, layer_shapes, rng: np.random.Generator,
                          tol: float = 0.05, attempts: int = 8) -> ModelQuantConfig:
    """Uniform random ladder ranks steered to the requested bit window."""
    ladder = build_ladder()
    last_err = None
    for _ in range(attempts):
        ranks = rng.integers(0, len(ladder), size=len(layer_shapes))
        try:
            ranks = steer_to_window(ranks, layer_shapes, b, tol, ladder)
            return ranks_to_config(ranks, layer_shapes, ladder)
        except InfeasibleError as err:
            last_err = err
    raise last_err


# --- JSON interchange for configuration sets ---

SCHEMA_VERSION = 1


def config_set_to_json(configs, meta: dict) -> str:
    ladder = build_ladder()
    payload = {
        "meta": {
            **meta,
            "schema_version": SCHEMA_VERSION,
            "ladder_size": len(ladder),
        },
        "configs": [C.to_dict() for C in configs],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def config_set_from_json(text: str):
    payload = json.loads(text)
    meta = payload["meta"]
    shapes = tuple(tuple(s) for s in meta["layer_shapes"])
    configs = [
        ModelQuantConfig(
            layers=tuple(LayerQuantConfig.from_dict(ld) for ld in entry["layers"]),
            layer_shapes=shapes,
        )
        for entry in payload["configs"]
    ]
    return configs, meta
