"""Finite-difference coordinate search over configuration ranks and the cyclic
train-then-search loop.

Coordinates are normalized ladder ranks (rank/431 per layer); a search step
moves exactly one layer one rank, so every visited configuration is a valid
lattice point. The acquisition is the expected hypervolume improvement of the
GP's loss posterior against the archive's current front, with the storage
objective computed exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import qconfig, surrogate, tinynet
from .pareto import ParetoArchive
from .qconfig import ModelQuantConfig, avg_bits, build_ladder, config_to_ranks, ranks_to_config

DEFAULT_FD_STEPS = 3
DEFAULT_SEGMENTS = 40


@dataclass
class SearchState:
    archive: ParetoArchive
    gp: surrogate.GPModel
    layer_shapes: tuple
    epoch: int = 0
    fd_steps: int = DEFAULT_FD_STEPS
    delta: int = 1  # ladder ranks; the coordinate unit


def fd_gradient(ranks, gp, archive, layer_shapes) -> np.ndarray:
    """Central-difference acquisition gradient, one entry per layer.

    Perturbs each layer one rank in either direction (clamped at the ladder
    ends, where a one-sided difference with divisor delta is used).
    """
    ladder = build_ladder()
    ranks = np.asarray(ranks, dtype=np.int64)
    n = len(ranks)
    front = archive.front_points()

    def alpha(rk):
        coords = rk.astype(np.float64) / (len(ladder) - 1)
        mu, var = surrogate.gp_predict(gp, coords)
        C = ranks_to_config(rk, layer_shapes, ladder)
        f2 = avg_bits(C) / archive.bits_max
        return surrogate.ehvi(mu, var, f2, front, archive.ref)

    g = np.zeros(n)
    for i in range(n):
        up = ranks.copy()
        down = ranks.copy()
        hi_ok = ranks[i] + 1 < len(ladder)
        lo_ok = ranks[i] - 1 >= 0
        if hi_ok:
            up[i] += 1
        if lo_ok:
            down[i] -= 1
        if hi_ok and lo_ok:
            g[i] = (alpha(up) - alpha(down)) / 2.0
        elif hi_ok:
            g[i] = alpha(up) - alpha(ranks)
        elif lo_ok:
            g[i] = alpha(ranks) - alpha(down)
    return g


def coordinate_step(ranks, g) -> np.ndarray:
    """Move the layer with the largest |gradient| one rank along -sign(g).

    Ties pick the lowest layer index; an all-(near-)zero gradient returns the
    ranks unchanged; steps clamp at the ladder ends.
    """
    ladder = build_ladder()
    ranks = np.asarray(ranks, dtype=np.int64).copy()
    mags = np.abs(g)
    i_star = int(np.argmax(mags))
    if mags[i_star] < 1e-12:
        return ranks
    step = -int(np.sign(g[i_star]))
    ranks[i_star] = np.clip(ranks[i_star] + step, 0, len(ladder) - 1)
    return ranks


def propose_candidates(state: SearchState) -> list[np.ndarray]:
    """Apply fd_steps coordinate steps to every retained configuration."""
    out = []
    for entry in state.archive.retained_entries():
        rk = entry.ranks.copy()
        for _ in range(state.fd_steps):
            g = fd_gradient(rk, state.gp, state.archive, state.layer_shapes)
            rk = coordinate_step(rk, g)
        out.append(rk)
    return out


def run_search_epoch(state: SearchState, evaluate_loss_fn, snapshot_id: int) -> list[int]:
    """One expand-evaluate-merge-filter-refit cycle; returns the retained ids.

    evaluate_loss_fn(config) -> calibration loss under the current adapter
    snapshot, used only for configurations not already in the archive.
    """
    archive = state.archive
    pool_ids = list(archive.retained_ids)
    candidates = propose_candidates(state)
    seen = {tuple(e.ranks) for e in archive.entries}
    fresh = []
    for rk in sorted(candidates, key=lambda r: tuple(r)):
        key = tuple(int(x) for x in rk)
        if key not in seen:
            seen.add(key)
            fresh.append(rk)
    for rk in fresh:
        C = ranks_to_config(rk, state.layer_shapes)
        pool_ids.append(archive.add(rk, avg_bits(C), evaluate_loss_fn(C), snapshot_id).config_id)

    retained = archive.refilter(pool_ids)
    X = np.array([e.ranks for e in archive.entries], dtype=np.float64) / (len(build_ladder()) - 1)
    y = np.array([e.loss for e in archive.entries])
    state.gp = surrogate.gp_fit(X, y)
    state.epoch += 1
    return retained


@dataclass
class CoaRunResult:
    stack: tinynet.AdapterStack
    archive: ParetoArchive
    final_configs: list[ModelQuantConfig]
    history: list[dict]
    snapshots: list[dict] = field(default_factory=list)  # snapshot_id -> adapter arrays
    loss_max: float = 0.0
    bits_max: float = 0.0


def run_coa(net: tinynet.TargetNet, dataset: tinynet.Dataset, init_set,
            epochs: int = 5, fd_steps: int = DEFAULT_FD_STEPS,
            n_segments: int = DEFAULT_SEGMENTS, seed: int = 0,
            steps_per_epoch: int = 200, lr: float = 1e-4, r: int = 4,
            history_path=None, search_enabled: bool = True) -> CoaRunResult:
    """Cyclic adapter training and configuration search.

    Per epoch: train adapters/adjustment net on the retained set, snapshot,
    then expand the set by coordinate search, evaluate new configurations on
    the calibration batch under the snapshot, merge and filter. History rows
    carry hypervolume, set size and mean loss; `search_enabled=False` freezes
    the initial set (ablation mode).
    """
    ladder = build_ladder()
    stack = tinynet.AdapterStack.init(net, r=r, seed=seed)
    snapshots = [stack.snapshot()]
    cal = dataset.cal_batch

    def eval_cfg(C):
        return tinynet.forward_loss(net, C, stack, True, cal)

    init_losses = [eval_cfg(C) for C in init_set]
    loss_max = max(init_losses)
    bits_max = ladder.max_rate
    archive = ParetoArchive(loss_max=loss_max, bits_max=bits_max, n_segments=n_segments)
    for C, loss in zip(init_set, init_losses):
        archive.add(config_to_ranks(C, ladder), avg_bits(C), loss, snapshot_id=0)
    archive.refilter(list(archive.retained_ids))

    X = np.array([e.ranks for e in archive.entries], dtype=np.float64) / (len(ladder) - 1)
    y = np.array([e.loss for e in archive.entries])
    state = SearchState(archive=archive, gp=surrogate.gp_fit(X, y),
                        layer_shapes=net.layer_shapes, fd_steps=fd_steps)

    history: list[dict] = []
    ss = np.random.SeedSequence(seed)
    epoch_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(max(epochs, 1))]

    for t in range(epochs):
        t0 = time.perf_counter()
        train_configs = [
            ranks_to_config(e.ranks, net.layer_shapes, ladder)
            for e in archive.retained_entries()
        ]
        tinynet.train_theta(net, train_configs, dataset, steps=steps_per_epoch,
                            lr=lr, seed=epoch_seeds[t], stack=stack)
        snapshots.append(stack.snapshot())
        if search_enabled:
            run_search_epoch(state, eval_cfg, snapshot_id=len(snapshots) - 1)
        row = {
            "epoch": t + 1,
            "hv": archive.hypervolume(),
            "set_size": len(archive.retained_ids),
            "mean_f1": float(np.mean([e.loss for e in archive.retained_entries()])),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        history.append(row)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    final = [ranks_to_config(e.ranks, net.layer_shapes, ladder) for e in archive.retained_entries()]
    return CoaRunResult(stack=stack, archive=archive, final_configs=final, history=history,
                        snapshots=snapshots, loss_max=loss_max, bits_max=bits_max)
