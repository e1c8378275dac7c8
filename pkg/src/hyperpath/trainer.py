"""Training: parameter initialisation, gradients, AdamW, early stopping and
checkpoint serialisation.

Training is full batch (every target node each step) and deterministic given
the config seed. Gradients come from reverse-mode differentiation of the
float64 forward pass; a central-finite-difference helper is provided for
verification.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import Tensor

from . import model as mdl
from .evaluate import split_labeled
from .geometry import theta_for_curvature
from .hetgraph import HeteroGraph, Metapath
from .model import ModelDims, ModelParams, NonFiniteError, PreparedInstances
from .sampler import enumerate_instances

EUCLIDEAN_C = 1e-10

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 100
    patience: int = 10
    dropout: float = 0.5
    seed: int = 0
    task: str = "node_classification"  # or "link_prediction"
    lam: float = 0.5  # contrastive weight in [0, 1]
    tau: float = 0.5  # contrastive temperature
    heads: int = 8
    d: int = 128
    d_prime: int = 64
    max_path_len: int = 3  # l: maximum nodes per metapath instance
    train_ratio: float = 0.6
    val_fraction: float = 0.1
    feature_scale: float = 0.5  # target mean feature norm; 0 disables scaling
    curvature_mode: str = "learnable"  # or "euclidean" (pinned c = 1e-10)
    contrastive_form: str = "info_nce"  # or "paper_literal"
    max_instances: int = 0  # per-metapath cap per target; 0 = exact
    target_type: str = ""  # embedding-target node type; "" = infer
    link_types: str = ""  # "U-A": node-type pair for the link task
    threads: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.task not in ("node_classification", "link_prediction"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.curvature_mode not in ("learnable", "euclidean"):
            raise ValueError(f"unknown curvature_mode {self.curvature_mode!r}")
        if self.max_path_len < 2:
            raise ValueError("max_path_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 < self.train_ratio < 1.0:
            raise ValueError("train_ratio must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        """Build from flat string key/values (config files, CLI overrides)."""
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            typ = by_name[key].type
            if typ == "int":
                kwargs[key] = int(raw)
            elif typ == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    task_loss: float
    hyp_loss: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    prepared: PreparedInstances
    log: list[EpochRow]
    best_epoch: int
    config: TrainConfig
    train_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _xavier(gen: torch.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * s


def init_params(
    dims: ModelDims,
    metapaths: tuple[Metapath, ...],
    seed: int,
    *,
    tau: float = 0.5,
    lam: float = 0.5,
    curvature_mode: str = "learnable",
) -> ModelParams:
    """Uniform(-s, s) matrices with s = sqrt(6 / (fan_in + fan_out)), zero
    biases, curvatures initialised to c = 1 (or pinned near-flat)."""
    gen = torch.Generator().manual_seed(seed)
    learnable = curvature_mode == "learnable"
    theta0 = theta_for_curvature(1.0 if learnable else EUCLIDEAN_C)
    n, d, dk, dp, do, k = (
        dims.feature_dim,
        dims.d,
        dims.head_dim,
        dims.d_prime,
        dims.d_out,
        dims.heads,
    )

    def theta() -> Tensor:
        t = torch.tensor(theta0, dtype=torch.float64)
        t.requires_grad_(learnable)
        return t

    def leaf(t: Tensor) -> Tensor:
        t.requires_grad_(True)
        return t

    curv, w_enc, w_inst, b_inst, a_inst = {}, {}, {}, {}, {}
    for mp in metapaths:
        curv[mp] = theta()
        w_enc[mp] = leaf(_xavier(gen, (n, n), n, n))
        w_inst[mp] = leaf(_xavier(gen, (k, dk, n), n, dk))
        b_inst[mp] = leaf(torch.zeros((k, dk), dtype=torch.float64))
        a_inst[mp] = leaf(_xavier(gen, (k, dk), dk, 1))
    return ModelParams(
        dims=dims,
        metapaths=metapaths,
        tau=tau,
        lam=lam,
        curv_theta=curv,
        w_encode=w_enc,
        w_inst=w_inst,
        b_inst=b_inst,
        attn_inst=a_inst,
        w_align=leaf(_xavier(gen, (d, d), d, d)),
        unified_theta=theta(),
        w_proj=leaf(_xavier(gen, (dp, d), d, dp)),
        b_proj=leaf(torch.zeros(dp, dtype=torch.float64)),
        attn_path=leaf(_xavier(gen, (dp,), dp, 1)),
        w_out=leaf(_xavier(gen, (do, dp), dp, do)),
    )


def grad(params: ModelParams, closure, *, diagnose=None) -> tuple[float, dict[str, Tensor]]:
    """Loss and reverse-mode gradients for every trainable tensor.

    ``closure(params)`` must return a scalar loss built from the parameter
    tensors. On a non-finite loss, ``diagnose()`` (if given) is invoked to
    locate the first non-finite intermediate.
    """
    loss = closure(params)
    if not torch.isfinite(loss):
        if diagnose is not None:
            diagnose()
        raise NonFiniteError("total_loss")
    names, tensors = zip(*params.named_trainable())
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {
        name: (g if g is not None else torch.zeros_like(t))
        for name, t, g in zip(names, tensors, grads)
    }
    return float(loss), out


def finite_difference_grads(
    params: ModelParams, closure, step: float = 1e-5
) -> dict[str, Tensor]:
    """Central finite differences of ``closure`` for every trainable entry.

    Independent verification path for :func:`grad`; O(2 * n_params) forward
    evaluations.
    """
    out: dict[str, Tensor] = {}
    with torch.no_grad():
        for name, t in params.named_trainable():
            g = torch.zeros_like(t)
            flat = t.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(closure(params))
                flat[i] = orig - step
                down = float(closure(params))
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * step)
            out[name] = g
    return out


def _decayed(name: str) -> bool:
    # Weight matrices decay; biases, attention vectors and curvature
    # parameters are exempt (decaying curvature would flatten the geometry).
    return name.rsplit("/", 1)[-1].startswith("w_")


def adamw_init(params: ModelParams) -> dict:
    state: dict = {"step": 0}
    for name, t in params.named_trainable():
        state[name] = {
            "m": torch.zeros_like(t),
            "v": torch.zeros_like(t),
        }
    return state


def adamw_step(
    params: ModelParams,
    grads: dict[str, Tensor],
    state: dict,
    config: TrainConfig,
) -> dict:
    """One decoupled-weight-decay Adam update, in place on the parameters."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    lr = config.learning_rate
    with torch.no_grad():
        for name, p in params.named_trainable():
            g = grads[name]
            s = state[name]
            if s["m"].shape != p.shape:
                raise ValueError(f"optimizer state shape mismatch for {name!r}")
            if _decayed(name) and config.weight_decay:
                p.mul_(1.0 - lr * config.weight_decay)
            s["m"].mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            s["v"].mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            m_hat = s["m"] / bc1
            v_hat = s["v"] / bc2
            p.sub_(lr * m_hat / (v_hat.sqrt() + ADAM_EPS))
    return state


def scale_features(features: np.ndarray, target_norm: float) -> np.ndarray:
    """Rescale features so the mean row norm equals ``target_norm``.

    Keeps encoded points well inside the ball; disabled when
    ``target_norm <= 0`` or all rows are zero.
    """
    if target_norm <= 0:
        return features
    norms = np.linalg.norm(features, axis=1)
    mean = norms.mean()
    if mean == 0:
        return features
    return features * (target_norm / mean)


def infer_target_types(g: HeteroGraph, config: TrainConfig) -> tuple[int, ...]:
    """Embedding-target node types: one for node tasks, the two link-type
    endpoint types for the link task."""
    if config.task == "link_prediction":
        if not config.link_types:
            raise ValueError("link_prediction needs link_types (e.g. 'U-A')")
        parts = config.link_types.split("-")
        if len(parts) != 2:
            raise ValueError(f"link_types must name two types, got {config.link_types!r}")
        return tuple(dict.fromkeys(g.type_id(t) for t in parts))
    if config.target_type:
        return (g.type_id(config.target_type),)
    if g.labels is None:
        raise ValueError("graph has no labels; set target_type explicitly")
    types = np.unique(g.node_type[g.labels >= 0])
    if len(types) != 1:
        raise ValueError(
            "labeled nodes span multiple types; set target_type explicitly"
        )
    return (int(types[0]),)


def _link_pairs(
    g: HeteroGraph, config: TrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Positive + sampled negative (u, v, y) node pairs for the link task."""
    src_t, dst_t = (g.type_id(t) for t in config.link_types.split("-"))
    pos = [
        (u, int(v))
        for u in g.nodes_of_type(src_t)
        for v in g.neighbors(int(u))
        if g.node_type[v] == dst_t and (src_t != dst_t or u < v)
    ]
    if not pos:
        raise ValueError("no edges between the requested link types")
    src_nodes = g.nodes_of_type(src_t)
    dst_nodes = g.nodes_of_type(dst_t)
    pos_set = set(pos)
    neg: list[tuple[int, int]] = []
    attempts = 0
    while len(neg) < len(pos):
        attempts += 1
        if attempts > 200 * len(pos):
            raise ValueError("not enough unconnected pairs for negative sampling")
        u = int(rng.choice(src_nodes))
        v = int(rng.choice(dst_nodes))
        if u == v or (u, v) in pos_set or (v, u) in pos_set:
            continue
        neg.append((u, v))
    pairs = np.array(pos + neg, dtype=np.int64)
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return pairs, y


def train(
    g: HeteroGraph,
    config: TrainConfig,
    *,
    instances: dict | None = None,
) -> TrainResult:
    """Full-batch training with early stopping on validation loss.

    Deterministic given the config seed: parameter init, splits and dropout
    masks are all derived from it. The returned parameters are the best
    validation checkpoint.
    """
    config.validate()
    torch.set_num_threads(max(1, config.threads))
    torch.manual_seed(config.seed)

    target_types = infer_target_types(g, config)
    targets = np.sort(
        np.concatenate([g.nodes_of_type(t) for t in target_types])
    )
    if instances is None:
        instances = {}
        for t in target_types:
            instances.update(
                enumerate_instances(
                    g,
                    g.nodes_of_type(t),
                    config.max_path_len,
                    max_per_metapath=config.max_instances or None,
                    seed=config.seed,
                )
            )
    feats = scale_features(g.features, config.feature_scale)
    prepared = mdl.prepare_instances(g, instances, targets, features=feats)
    if not prepared.metapaths:
        raise ValueError("no metapath instances found for the target nodes")

    labels_t = torch.as_tensor(
        g.labels if g.labels is not None else np.full(g.num_nodes, -1), dtype=torch.int64
    )

    if config.task == "node_classification":
        if g.labels is None:
            raise ValueError("node_classification needs labels")
        labeled = targets[g.labels[targets] >= 0]
        lab = g.labels[labeled]
        tr_idx, te_idx = split_labeled(lab, config.train_ratio, config.seed)
        train_ids, test_ids = labeled[tr_idx], labeled[te_idx]
        va_idx, core_idx = split_labeled(
            g.labels[train_ids], config.val_fraction, config.seed
        )
        val_ids, core_ids = train_ids[va_idx], train_ids[core_idx]
        d_out = int(g.labels[labeled].max()) + 1
        row = {int(v): i for i, v in enumerate(prepared.targets)}
        core_rows = torch.tensor([row[int(v)] for v in core_ids], dtype=torch.int64)
        val_rows = torch.tensor([row[int(v)] for v in val_ids], dtype=torch.int64)
        test_rows = torch.tensor([row[int(v)] for v in test_ids], dtype=torch.int64)
        target_labels = labels_t[torch.as_tensor(prepared.targets)]
        pairs = y_pairs = None
    else:
        rng = np.random.default_rng(config.seed)
        pairs_nodes, y = _link_pairs(g, config, rng)
        order = rng.permutation(len(pairs_nodes))
        n_test = max(1, int(round(0.2 * len(order))))
        n_val = max(1, int(round(config.val_fraction * (len(order) - n_test))))
        test_sel, val_sel, core_sel = (
            order[:n_test],
            order[n_test : n_test + n_val],
            order[n_test + n_val :],
        )
        row = {int(v): i for i, v in enumerate(prepared.targets)}
        # Both endpoint types are embedding targets, so every pair can be
        # scored by the dot product of its endpoints' readouts.
        pairs_all = torch.tensor(
            [[row[int(u)], row[int(v)]] for u, v in pairs_nodes], dtype=torch.int64
        )
        y_all = torch.as_tensor(y)
        pairs = {
            "core": pairs_all[core_sel],
            "val": pairs_all[val_sel],
            "test": pairs_all[test_sel],
        }
        y_pairs = {
            "core": y_all[core_sel],
            "val": y_all[val_sel],
            "test": y_all[test_sel],
        }
        core_rows = val_rows = test_rows = torch.zeros(0, dtype=torch.int64)
        d_out = config.d_prime

    dims = ModelDims(
        feature_dim=g.feature_dim,
        d=config.d,
        d_prime=config.d_prime,
        d_out=d_out,
        heads=config.heads,
    )
    params = init_params(
        dims,
        prepared.metapaths,
        config.seed,
        tau=config.tau,
        lam=config.lam,
        curvature_mode=config.curvature_mode,
    )

    def losses(p: ModelParams, training: bool) -> tuple[Tensor, Tensor, Tensor]:
        bundle = mdl.forward(
            prepared, p, training=training, dropout=config.dropout if training else 0.0
        )
        if config.task == "node_classification":
            task = mdl.classification_loss(bundle.logits, target_labels, core_rows)
            val = mdl.classification_loss(bundle.logits, target_labels, val_rows)
        else:
            task = mdl.link_loss(bundle.logits, pairs["core"], y_pairs["core"])
            val = mdl.link_loss(bundle.logits, pairs["val"], y_pairs["val"])
        if config.lam > 0:
            hyp = mdl.contrastive_loss(bundle, p, form=config.contrastive_form)
        else:
            hyp = torch.zeros((), dtype=torch.float64)
        return task, hyp, val

    def objective(p: ModelParams) -> Tensor:
        task, hyp, _ = losses(p, training=True)
        return mdl.total_loss(task, hyp, config.lam)

    def diagnose() -> None:
        mdl.forward(prepared, params, training=False, check_finite=True)

    state = adamw_init(params)
    log: list[EpochRow] = []
    best_val = math.inf
    best_epoch = 0
    best_params = params.detach_clone()
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        _, grads = grad(params, objective, diagnose=diagnose)
        adamw_step(params, grads, state, config)
        for mp in params.metapaths:
            c = float(params.curvature(mp))
            if not (math.isfinite(c) and c > 0):
                raise NonFiniteError(f"curvature[{_mp_label(mp)}]")
        with torch.no_grad():
            task, hyp, val = losses(params, training=False)
            # Contrastive value is logged even when lam = 0.
            if config.lam == 0:
                bundle = mdl.forward(prepared, params, training=False)
                hyp = mdl.contrastive_loss(bundle, params, form=config.contrastive_form)
        train_loss = float(task) + config.lam * float(hyp)
        seconds = time.perf_counter() - tic
        log.append(
            EpochRow(epoch, train_loss, float(val), float(task), float(hyp), seconds)
        )
        if float(val) < best_val:
            best_val = float(val)
            best_epoch = epoch
            best_params = params.detach_clone()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    return TrainResult(
        params=best_params,
        prepared=prepared,
        log=log,
        best_epoch=best_epoch,
        config=config,
        train_rows=np.asarray(core_rows),
        val_rows=np.asarray(val_rows),
        test_rows=np.asarray(test_rows),
    )


def _mp_label(mp: Metapath) -> str:
    return "-".join(str(t) for t in mp)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, u64 header length, JSON header (config, dims,
# metapaths, tensor names + shapes), then raw little-endian float64 buffers
# in header order. Fully deterministic; write -> read is bit-exact.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"HYPCKPT1"


def save_checkpoint(path: str, params: ModelParams, config: TrainConfig) -> None:
    entries = [(name, t) for name, t in params.named_tensors()]
    header = {
        "version": 1,
        "config": asdict(config),
        "dims": asdict(params.dims),
        "metapaths": [list(mp) for mp in params.metapaths],
        "tau": params.tau,
        "lam": params.lam,
        "tensors": [
            {"name": name, "shape": list(t.shape), "trainable": bool(t.requires_grad)}
            for name, t in entries
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in entries:
            fh.write(t.detach().numpy().astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelParams, TrainConfig]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors: dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arr = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            t = torch.from_numpy(arr)
            t.requires_grad_(entry["trainable"])
            tensors[entry["name"]] = t

    config = TrainConfig(**header["config"])
    dims = ModelDims(**header["dims"])
    metapaths = tuple(tuple(mp) for mp in header["metapaths"])

    def mp_of(name: str) -> Metapath:
        return tuple(int(x) for x in name[2:].split("/")[0].split("-"))

    def per_mp(leaf: str) -> dict[Metapath, Tensor]:
        return {
            mp_of(name): t
            for name, t in tensors.items()
            if name.startswith("mp") and name.endswith("/" + leaf)
        }

    params = ModelParams(
        dims=dims,
        metapaths=metapaths,
        tau=header["tau"],
        lam=header["lam"],
        curv_theta=per_mp("curv_theta"),
        w_encode=per_mp("w_encode"),
        w_inst=per_mp("w_inst"),
        b_inst=per_mp("b_inst"),
        attn_inst=per_mp("attn_inst"),
        w_align=tensors["w_align"],
        unified_theta=tensors["unified_theta"],
        w_proj=tensors["w_proj"],
        b_proj=tensors["b_proj"],
        attn_path=tensors["attn_path"],
        w_out=tensors["w_out"],
    )
    return params, config
