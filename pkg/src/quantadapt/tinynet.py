"""Desk-scale regression substrate: frozen target network, low-rank adapters,
and the configuration-conditioned adjustment network.

The target net is a stack of N weight matrices with tanh between layers,
trained on nothing: it *is* the teacher that generated the data, so the only
error to repair is the one quantization introduces. Each layer carries a pair
of low-rank factors (left: d x r, right: r x n). The adjustment network maps a
layer's 28-dim configuration embedding to an r x r matrix U and the effective
weight becomes W_quant + left @ ((I + U) @ right); with the output layer of
the adjustment net zero-initialized this starts exactly at left @ right.

Gradients flow through left/right/U/embeddings only; the quantized weights are
constants per (layer, config) and are cached on the net.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nfquant, qconfig
from .autodiff import Adam, Tensor, concat, constant, parameter
from .errors import TrainingError
from .linalg import truncated_svd  # re-exported; also used for adapter init

__all__ = [
    "Dataset",
    "TargetNet",
    "AdapterStack",
    "gen_teacher_student",
    "truncated_svd",
    "forward_loss",
    "train_theta",
    "train_lora_per_config",
    "train_shared",
    "grad_check",
]

DEFAULT_ARCH = {"in_dim": 16, "width": 32, "depth": 8, "out_dim": 1}
BATCH_SIZE = 32
HYPER_HIDDEN = 64
HYPER_OUT_SCALE = 0.1


@dataclass
class Dataset:
    """Inputs/targets plus disjoint train / calibration / validation splits.

    The calibration split is exactly one training batch (the first batch of
    the shuffled 80% training pool); train is the rest of that pool.
    """

    inputs: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    cal_idx: np.ndarray
    val_idx: np.ndarray

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[idx], self.targets[idx]

    @property
    def cal_batch(self):
        return self.batch(self.cal_idx)

    @property
    def val_batch(self):
        return self.batch(self.val_idx)


class TargetNet:
    """Frozen stack of weight matrices with a fixed nonlinearity between layers."""

    def __init__(self, weights: list[np.ndarray], activation: str = "tanh"):
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = []
        for W in weights:
            W = np.array(W, dtype=np.float64)
            W.setflags(write=False)
            self.weights.append(W)
        self.activation = activation
        self._quant_cache: dict[tuple[int, qconfig.LayerQuantConfig], np.ndarray] = {}

    @classmethod
    def random(cls, seed_or_rng, in_dim=16, width=32, depth=8, out_dim=1,
               activation: str = "tanh") -> "TargetNet":
        rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
        dims = [in_dim] + [width] * (depth - 1) + [out_dim]
        weights = [rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, n)) for d, n in zip(dims[:-1], dims[1:])]
        return cls(weights, activation=activation)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(W.shape for W in self.weights)

    def _act(self, h):
        return np.tanh(h) if self.activation == "tanh" else h

    def forward(self, X: np.ndarray) -> np.ndarray:
        h = X
        for i, W in enumerate(self.weights):
            h = h @ W
            if i < self.n_layers - 1:
                h = self._act(h)
        return h

    def mse(self, batch) -> float:
        X, Y = batch
        return float(np.mean((self.forward(X) - Y) ** 2))

    def quantized(self, i: int, cfg: qconfig.LayerQuantConfig) -> np.ndarray:
        """Dequantized weights of layer i under cfg, cached per (layer, cfg)."""
        key = (i, cfg)
        if key not in self._quant_cache:
            W_hat = nfquant.dequantize(nfquant.quantize_layer(self.weights[i], cfg))
            W_hat.setflags(write=False)
            self._quant_cache[key] = W_hat
        return self._quant_cache[key]


def gen_teacher_student(seed: int, n_samples: int = 2000, noise_std: float = 0.05,
                        **arch) -> tuple[Dataset, TargetNet]:
    """Random teacher net plus a noisy regression dataset generated from it.

    Returns (dataset, net) where net is the teacher itself (the model to be
    quantized and adapted). Deterministic per seed.
    """
    if n_samples < 64:
        raise ValueError("n_samples must be >= 64")
    params = {**DEFAULT_ARCH, **arch}
    rng = np.random.default_rng(seed)
    net = TargetNet.random(rng, **params)
    X = rng.standard_normal((n_samples, params["in_dim"]))
    Y = net.forward(X) + noise_std * rng.standard_normal((n_samples, params["out_dim"]))

    perm = rng.permutation(n_samples)
    n_pool = round(0.8 * n_samples)
    pool = perm[:n_pool]
    ds = Dataset(
        inputs=X,
        targets=Y,
        train_idx=pool[BATCH_SIZE:],
        cal_idx=pool[:BATCH_SIZE],
        val_idx=perm[n_pool:],
    )
    return ds, net


# --- adapters + adjustment network ---


@dataclass
class AdapterStack:
    """Per-layer low-rank pairs, adjustment-net parameters and embedding tables.

    All leaves are autodiff parameter Tensors; use snapshot()/load_snapshot()
    to move values in and out as plain arrays.
    """

    left: list[Tensor]
    right: list[Tensor]
    hyper: dict[str, Tensor]
    tables: dict[str, Tensor]
    r: int
    n_layers: int
    step_count: int = 0
    name_ids: tuple[int, ...] = field(default=())

    @classmethod
    def init(cls, net: TargetNet, r: int = 4, seed: int = 0) -> "AdapterStack":
        rng = np.random.default_rng(seed)
        left, right = [], []
        for d, n in net.layer_shapes:
            left.append(parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r))))
            right.append(parameter(np.zeros((r, n))))
        hyper = {
            "w_in": parameter(rng.normal(0.0, 1.0 / np.sqrt(qconfig.LAYER_EMBED_DIM),
                                         size=(qconfig.LAYER_EMBED_DIM, HYPER_HIDDEN))),
            "b_in": parameter(np.zeros(HYPER_HIDDEN)),
            # zero-initialized output layer: U == 0 for every input at start
            "w_out": parameter(np.zeros((HYPER_HIDDEN, r * r))),
            "b_out": parameter(np.zeros(r * r)),
        }
        emb = qconfig.EmbeddingTables(n_names=1, n_blocks=net.n_layers, rng=rng)
        tables = {name: parameter(arr) for name, arr in emb.arrays().items()}
        return cls(left=left, right=right, hyper=hyper, tables=tables, r=r,
                   n_layers=net.n_layers, name_ids=tuple(0 for _ in range(net.n_layers)))

    def params(self, include_hyper: bool = True, include_tables: bool = True) -> list[Tensor]:
        out = list(self.left) + list(self.right)
        if include_hyper:
            out += [self.hyper[k] for k in sorted(self.hyper)]
        if include_tables:
            out += [self.tables[k] for k in sorted(self.tables)]
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array([self.step_count])}
        for i in range(self.n_layers):
            out[f"left_{i}"] = self.left[i].data.copy()
            out[f"right_{i}"] = self.right[i].data.copy()
        for k, t in self.hyper.items():
            out[f"hyper_{k}"] = t.data.copy()
        for k, t in self.tables.items():
            out[k] = t.data.copy()
        return out

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        self.step_count = int(snap["step_count"][0])
        for i in range(self.n_layers):
            self.left[i].data = snap[f"left_{i}"].copy()
            self.right[i].data = snap[f"right_{i}"].copy()
        for k in self.hyper:
            self.hyper[k].data = snap[f"hyper_{k}"].copy()
        for k in self.tables:
            self.tables[k].data = snap[k].copy()

    @classmethod
    def from_snapshot(cls, net: TargetNet, r: int, snap: dict[str, np.ndarray]) -> "AdapterStack":
        stack = cls.init(net, r=r, seed=0)
        stack.load_snapshot(snap)
        return stack

    # numpy (tape-free) evaluation helpers

    def embed_np(self, c: qconfig.LayerQuantConfig, layer_idx: int) -> np.ndarray:
        idx = qconfig.EmbeddingTables.value_indices_of(c)
        parts = [self.tables[f"table_{p}"].data[idx[p]] for p in qconfig.EmbeddingTables.PARAM_ORDER]
        parts.append(self.tables["table_name"].data[self.name_ids[layer_idx]])
        parts.append(self.tables["table_block"].data[layer_idx])
        return np.concatenate(parts)

    def adjustment_np(self, c: qconfig.LayerQuantConfig, layer_idx: int) -> np.ndarray:
        e = self.embed_np(c, layer_idx)
        h = np.tanh(e @ self.hyper["w_in"].data + self.hyper["b_in"].data)
        u = h @ self.hyper["w_out"].data + self.hyper["b_out"].data
        return (u * HYPER_OUT_SCALE).reshape(self.r, self.r)


def _effective_weight_np(net, stack, C, i, use_hyper):
    W_hat = net.quantized(i, C.layers[i])
    if use_hyper:
        U = stack.adjustment_np(C.layers[i], i)
        adjusted = (np.eye(stack.r) + U) @ stack.right[i].data
    else:
        adjusted = stack.right[i].data
    return W_hat + stack.left[i].data @ adjusted


def forward_loss(net: TargetNet, C: qconfig.ModelQuantConfig, stack: AdapterStack,
                 use_hyper: bool, batch) -> float:
    """Mean squared error of the adapted quantized network on a batch."""
    X, Y = batch
    h = X
    for i in range(net.n_layers):
        h = h @ _effective_weight_np(net, stack, C, i, use_hyper)
        if i < net.n_layers - 1:
            h = net._act(h)
    return float(np.mean((h - Y) ** 2))


def _tape_loss(net: TargetNet, C, stack: AdapterStack, use_hyper: bool, batch) -> Tensor:
    """Same computation as forward_loss, on the autodiff tape."""
    X, Y = batch
    eye = constant(np.eye(stack.r))
    h = constant(X)
    for i in range(net.n_layers):
        W_hat = constant(net.quantized(i, C.layers[i]))
        if use_hyper:
            idx = qconfig.EmbeddingTables.value_indices_of(C.layers[i])
            parts = [stack.tables[f"table_{p}"].row(idx[p]) for p in qconfig.EmbeddingTables.PARAM_ORDER]
            parts.append(stack.tables["table_name"].row(stack.name_ids[i]))
            parts.append(stack.tables["table_block"].row(i))
            e = concat(parts)
            hid = (e @ stack.hyper["w_in"] + stack.hyper["b_in"]).tanh()
            U = ((hid @ stack.hyper["w_out"] + stack.hyper["b_out"]) * HYPER_OUT_SCALE).reshape(
                stack.r, stack.r
            )
            adjusted = (eye + U) @ stack.right[i]
        else:
            adjusted = stack.right[i]
        W_eff = W_hat + stack.left[i] @ adjusted
        h = h @ W_eff
        if i < net.n_layers - 1:
            h = h.tanh() if net.activation == "tanh" else h
    return (h - constant(Y)).square().mean()


def svd_init_adapters(net: TargetNet, C: qconfig.ModelQuantConfig, stack: AdapterStack) -> None:
    """Initialize left/right from the top-r SVD of each layer's quantization residual.

    Thin layers use min(r, min(d, n)) components; remaining columns stay zero.
    """
    for i, W in enumerate(net.weights):
        R = W - net.quantized(i, C.layers[i])
        r_eff = min(stack.r, min(*W.shape))
        U, S, V = truncated_svd(R, r_eff)
        root = np.sqrt(S)
        stack.left[i].data = np.zeros_like(stack.left[i].data)
        stack.right[i].data = np.zeros_like(stack.right[i].data)
        stack.left[i].data[:, :r_eff] = U * root
        stack.right[i].data[:r_eff, :] = (root[:, None] * V.T)


def _train_batches(dataset: Dataset, rng: np.random.Generator, batch_size: int):
    idx = dataset.train_idx
    while True:
        order = rng.permutation(len(idx))
        for s in range(0, len(order) - batch_size + 1, batch_size):
            yield idx[order[s : s + batch_size]]


def _train(net, configs, dataset, stack, steps, lr, seed, *, use_hyper,
           train_hyper, train_tables, batch_size=BATCH_SIZE):
    rng = np.random.default_rng(seed)
    params = stack.params(include_hyper=train_hyper, include_tables=train_tables)
    opt = Adam(params, lr=lr)
    batches = _train_batches(dataset, rng, batch_size)
    last_good = stack.snapshot()
    for _ in range(steps):
        C = configs[rng.integers(len(configs))] if len(configs) > 1 else configs[0]
        batch = dataset.batch(next(batches))
        loss = _tape_loss(net, C, stack, use_hyper, batch)
        if not np.isfinite(loss.data):
            raise TrainingError(
                f"loss diverged at step {stack.step_count}", checkpoint=last_good
            )
        last_good = stack.snapshot()
        opt.zero_grad()
        loss.backward()
        opt.step()
        stack.step_count += 1
    return stack


def train_theta(net, config_set, dataset, steps=200, lr=1e-4, seed=0,
                stack: AdapterStack | None = None, r: int = 4) -> AdapterStack:
    """Train adapters, adjustment net and embedding tables over a configuration set.

    One configuration is sampled uniformly per step; Adam updates the full
    trainable set. Deterministic per seed.
    """
    stack = stack if stack is not None else AdapterStack.init(net, r=r, seed=seed)
    return _train(net, list(config_set), dataset, stack, steps, lr, seed,
                  use_hyper=True, train_hyper=True, train_tables=True)


def train_lora_per_config(net, C, dataset, steps=200, lr=1e-4, seed=0,
                          svd_init: bool = False, stack: AdapterStack | None = None,
                          r: int = 4) -> AdapterStack:
    """Dedicated adapter for one fixed configuration; no adjustment network."""
    stack = stack if stack is not None else AdapterStack.init(net, r=r, seed=seed)
    if svd_init:
        svd_init_adapters(net, C, stack)
    return _train(net, [C], dataset, stack, steps, lr, seed,
                  use_hyper=False, train_hyper=False, train_tables=False)


def train_shared(net, config_set, dataset, steps=200, lr=1e-4, seed=0,
                 stack: AdapterStack | None = None, r: int = 4) -> AdapterStack:
    """One shared adapter pair trained across sampled configurations."""
    stack = stack if stack is not None else AdapterStack.init(net, r=r, seed=seed)
    return _train(net, list(config_set), dataset, stack, steps, lr, seed,
                  use_hyper=False, train_hyper=False, train_tables=False)


def grad_check(net: TargetNet, dataset: Dataset, seed: int = 0, n_coords: int = 200,
               h: float = 1e-5, batch=None) -> float:
    """Largest |analytic - central difference| over sampled coordinates,
    normalized by the largest gradient magnitude.

    Runs on a randomized stack (all parameters perturbed, so gradient paths
    through the adjustment net and tables are live) and a random lattice
    configuration.
    """
    rng = np.random.default_rng(seed)
    stack = AdapterStack.init(net, r=4, seed=seed)
    for p in stack.params():
        p.data = p.data + rng.normal(0.0, 0.1, size=p.data.shape)
    ladder = qconfig.build_ladder()
    ranks = rng.integers(0, len(ladder), size=net.n_layers)
    C = qconfig.ranks_to_config(ranks, net.layer_shapes, ladder)
    if batch is None:
        batch = dataset.cal_batch

    params = stack.params()
    loss = _tape_loss(net, C, stack, True, batch)
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    coords = []
    for pi, p in enumerate(params):
        for flat in range(p.data.size):
            coords.append((pi, flat))
    rng.shuffle(coords)
    coords = coords[:n_coords]

    grad_scale = max(float(np.max(np.abs(g))) for g in analytic)
    denom = max(grad_scale, 1e-12)
    worst = 0.0
    for pi, flat in coords:
        p = params[pi]
        orig = p.data.flat[flat]
        p.data.flat[flat] = orig + h
        up = forward_loss(net, C, stack, True, batch)
        p.data.flat[flat] = orig - h
        down = forward_loss(net, C, stack, True, batch)
        p.data.flat[flat] = orig
        fd = (up - down) / (2.0 * h)
        worst = max(worst, abs(fd - analytic[pi].flat[flat]) / denom)
    return worst
