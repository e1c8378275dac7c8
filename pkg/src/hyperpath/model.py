"""Forward computation: per-metapath hyperbolic encoding, two-level
attention, alignment into a unified space, contrastive objective and task
losses.

Every metapath owns a ball with its own learnable curvature. Instance
embeddings are aggregated inside that ball (instance-level attention, then
multi-head concatenation through the shared tangent space), aligned into one
unified-curvature ball, pulled toward their own metapath's embedding and
pushed from other metapaths' (contrastive term), and finally combined across
metapaths (metapath-level attention) into one node embedding feeding a linear
readout.

The whole pass is a pure function of (prepared instances, parameters,
dropout RNG state); all tensors are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from . import geometry as geo
from .hetgraph import HeteroGraph, Metapath
from .sampler import InstanceMap, metapath_order


class NonFiniteError(RuntimeError):
    """A non-finite value appeared; ``stage`` names the first bad tensor."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values first appeared in {stage!r}")
        self.stage = stage


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int  # n: input feature dimension
    d: int  # metapath embedding dimension (all heads concatenated)
    d_prime: int  # node embedding dimension
    d_out: int  # readout dimension (e.g. number of classes)
    heads: int  # attention head count K

    def __post_init__(self) -> None:
        for name in ("feature_dim", "d", "d_prime", "d_out", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def _mp_label(mp: Metapath) -> str:
    return "-".join(str(t) for t in mp)


@dataclass
class ModelParams:
    """All trainable tensors plus the loss hyperparameters.

    Per metapath: a curvature parameter, the feature transform, and per-head
    instance-embedding weights and attention vectors. Shared: the alignment
    map into the unified space, the unified curvature, the metapath
    projection + attention, and the readout.
    """

    dims: ModelDims
    metapaths: tuple[Metapath, ...]
    tau: float
    lam: float
    curv_theta: dict[Metapath, Tensor]  # scalar each
    w_encode: dict[Metapath, Tensor]  # [n, n]
    w_inst: dict[Metapath, Tensor]  # [K, dk, n]
    b_inst: dict[Metapath, Tensor]  # [K, dk]
    attn_inst: dict[Metapath, Tensor]  # [K, dk]
    w_align: Tensor  # [d, d]
    unified_theta: Tensor  # scalar
    w_proj: Tensor  # [d_prime, d]
    b_proj: Tensor  # [d_prime]
    attn_path: Tensor  # [d_prime]
    w_out: Tensor  # [d_out, d_prime]

    def named_tensors(self, trainable_only: bool = False):
        """Deterministically ordered (name, tensor) pairs."""
        for mp in self.metapaths:
            lbl = _mp_label(mp)
            yield f"mp{lbl}/curv_theta", self.curv_theta[mp]
            yield f"mp{lbl}/w_encode", self.w_encode[mp]
            yield f"mp{lbl}/w_inst", self.w_inst[mp]
            yield f"mp{lbl}/b_inst", self.b_inst[mp]
            yield f"mp{lbl}/attn_inst", self.attn_inst[mp]
        yield "w_align", self.w_align
        yield "unified_theta", self.unified_theta
        yield "w_proj", self.w_proj
        yield "b_proj", self.b_proj
        yield "attn_path", self.attn_path
        yield "w_out", self.w_out

    def named_trainable(self):
        return ((n, t) for n, t in self.named_tensors() if t.requires_grad)

    def curvature(self, mp: Metapath) -> Tensor:
        return geo.curvature_from_theta(self.curv_theta[mp])

    def unified_curvature(self) -> Tensor:
        return geo.curvature_from_theta(self.unified_theta)

    def detach_clone(self) -> "ModelParams":
        def dup(t: Tensor) -> Tensor:
            c = t.detach().clone()
            c.requires_grad_(t.requires_grad)
            return c

        return ModelParams(
            dims=self.dims,
            metapaths=self.metapaths,
            tau=self.tau,
            lam=self.lam,
            curv_theta={m: dup(t) for m, t in self.curv_theta.items()},
            w_encode={m: dup(t) for m, t in self.w_encode.items()},
            w_inst={m: dup(t) for m, t in self.w_inst.items()},
            b_inst={m: dup(t) for m, t in self.b_inst.items()},
            attn_inst={m: dup(t) for m, t in self.attn_inst.items()},
            w_align=dup(self.w_align),
            unified_theta=dup(self.unified_theta),
            w_proj=dup(self.w_proj),
            b_proj=dup(self.b_proj),
            attn_path=dup(self.attn_path),
            w_out=dup(self.w_out),
        )


@dataclass(frozen=True)
class PreparedInstances:
    """Per-metapath instance batches ready for the vectorized forward pass."""

    targets: np.ndarray  # sorted target node ids [V]
    metapaths: tuple[Metapath, ...]
    feat_mean: dict[Metapath, Tensor]  # [P_mp, n] Euclidean instance means
    target_row: dict[Metapath, Tensor]  # [P_mp] row into targets
    avail: Tensor  # bool [M, V]

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    def total_instances(self) -> int:
        return sum(int(t.shape[0]) for t in self.feat_mean.values())


def prepare_instances(
    g: HeteroGraph,
    instances: InstanceMap,
    targets: set[int] | list[int] | np.ndarray,
    features: np.ndarray | None = None,
) -> PreparedInstances:
    """Group instances per metapath and precompute Euclidean feature means."""
    target_arr = np.array(sorted(int(v) for v in targets), dtype=np.int64)
    row_of = {int(v): i for i, v in enumerate(target_arr)}
    mps = metapath_order(instances)
    feats = g.features if features is None else features
    feat_mean: dict[Metapath, Tensor] = {}
    target_row: dict[Metapath, Tensor] = {}
    avail = torch.zeros((len(mps), len(target_arr)), dtype=torch.bool)
    for mi, mp in enumerate(mps):
        ids: list[tuple[int, ...]] = []
        rows: list[int] = []
        for v in target_arr:
            for inst in instances.get(int(v), {}).get(mp, []):
                if not inst:
                    raise ValueError("empty metapath instance")
                ids.append(inst)
                rows.append(row_of[int(v)])
        if ids:
            id_arr = np.asarray(ids, dtype=np.int64)
            mean = feats[id_arr].mean(axis=1)
            feat_mean[mp] = torch.as_tensor(mean, dtype=torch.float64)
            row_t = torch.as_tensor(np.asarray(rows), dtype=torch.int64)
            target_row[mp] = row_t
            avail[mi, row_t] = True
        else:
            feat_mean[mp] = torch.zeros((0, feats.shape[1]), dtype=torch.float64)
            target_row[mp] = torch.zeros((0,), dtype=torch.int64)
    return PreparedInstances(
        targets=target_arr,
        metapaths=mps,
        feat_mean=feat_mean,
        target_row=target_row,
        avail=avail,
    )


@dataclass
class EmbeddingBundle:
    """All per-node intermediates of one forward pass."""

    targets: np.ndarray
    metapaths: tuple[Metapath, ...]
    avail: Tensor  # bool [M, V]
    h_meta: Tensor  # [M, V, d]; row m lives in the ball of metapath m
    h_aligned: Tensor  # [M, V, d] in the unified ball
    h_pos: Tensor  # [M, V, d] positive transforms in the unified ball
    t_proj: Tensor  # [M, V, d'] projected metapath embeddings (unified ball)
    beta: Tensor  # [M, V] metapath attention weights
    z: Tensor  # [V, d'] node embeddings (unified ball)
    logits: Tensor  # [V, d_out]
    curvatures: Tensor  # [M]
    unified_c: Tensor  # scalar
    alphas: dict[Metapath, Tensor] = field(default_factory=dict)  # [K, P_mp]

    def row_of(self, node: int) -> int:
        i = int(np.searchsorted(self.targets, node))
        if i >= len(self.targets) or self.targets[i] != node:
            raise KeyError(f"node {node} is not an embedding target")
        return i

    def z_tangent(self) -> np.ndarray:
        """Node embeddings as tangent coordinates at the origin, [V, d']."""
        return geo.log_map_0(self.z, self.unified_c).detach().numpy()


def _dropout(t: Tensor, p: float, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return t
    return torch.nn.functional.dropout(t, p=p, training=True)


# ---------------------------------------------------------------------------
# Stage operations. Each works on batched tensors; the thin single-node
# entry points below reuse them.
# ---------------------------------------------------------------------------


def encode_instance(feat_mean: Tensor, params: ModelParams, mp: Metapath) -> Tensor:
    """Map Euclidean instance means into the metapath's ball: W (x) exp0(x)."""
    if feat_mean.ndim < 1 or feat_mean.shape[-1] != params.dims.feature_dim:
        raise ValueError("feature dimension mismatch")
    c = params.curvature(mp)
    return geo.hyp_matvec(params.w_encode[mp], geo.exp_map_0(feat_mean, c), c)


def embed_instance(x: Tensor, params: ModelParams, mp: Metapath) -> Tensor:
    """Per-head instance embedding: act(W1 (x) x) (+) exp0(b1) -> [K, ..., dk]."""
    c = params.curvature(mp)
    u = geo.hyp_matvec(params.w_inst[mp], x, c)  # [K, ..., dk]
    u = geo.hyp_activation(u, c)
    bias = geo.exp_map_0(params.b_inst[mp], c)  # [K, dk]
    shape = (params.dims.heads,) + (1,) * (u.ndim - 2) + (params.dims.head_dim,)
    return geo.mobius_add(u, bias.view(shape), c)


def _segment_softmax(e: Tensor, rows: Tensor, num_rows: int) -> Tensor:
    """Softmax over the segments of ``rows`` along dim 1 of ``e`` [K, P]."""
    k = e.shape[0]
    seg_max = torch.zeros((k, num_rows), dtype=e.dtype)
    seg_max = seg_max.scatter_reduce(
        1, rows.expand(k, -1), e, reduce="amax", include_self=False
    ).detach()
    ex = torch.exp(e - seg_max.gather(1, rows.expand(k, -1)))
    denom = torch.zeros((k, num_rows), dtype=e.dtype).index_add(1, rows, ex)
    return ex / denom.gather(1, rows.expand(k, -1))


def intra_attention_segmented(
    h_inst: Tensor,
    rows: Tensor,
    num_rows: int,
    params: ModelParams,
    mp: Metapath,
    *,
    training: bool = False,
    dropout: float = 0.0,
) -> tuple[Tensor, Tensor]:
    """Instance-level attention inside one metapath's ball.

    ``h_inst`` is [K, P, dk] with ``rows`` mapping each instance to its
    target; returns (per-head metapath embeddings [K, V, dk], attention
    weights alpha [K, P]).
    """
    c = params.curvature(mp)
    tan = geo.log_map_0(h_inst, c)  # [K, P, dk]
    a = params.attn_inst[mp]  # [K, dk]
    e = (_dropout(tan, dropout, training) * a.unsqueeze(1)).sum(-1)  # [K, P]
    alpha = _segment_softmax(e, rows, num_rows)
    k, _, dk = tan.shape
    agg = torch.zeros((k, num_rows, dk), dtype=tan.dtype)
    agg = agg.index_add(1, rows, alpha.unsqueeze(-1) * _dropout(tan, dropout, training))
    return geo.hyp_activation(geo.exp_map_0(agg, c), c), alpha


def intra_attention(
    h_inst: Tensor,
    params: ModelParams,
    mp: Metapath,
    *,
    training: bool = False,
    dropout: float = 0.0,
) -> Tensor:
    """Single-node form: ``h_inst`` [K, P, dk] -> per-head embeddings [K, dk]."""
    if h_inst.shape[1] == 0:
        raise ValueError("no instances: intra-space attention needs at least one")
    rows = torch.zeros(h_inst.shape[1], dtype=torch.int64)
    out, _ = intra_attention_segmented(
        h_inst, rows, 1, params, mp, training=training, dropout=dropout
    )
    return out[:, 0, :]


def multihead_concat(heads: Tensor, params: ModelParams, mp: Metapath) -> Tensor:
    """Concatenate per-head ball points through the shared tangent space.

    ``heads`` is [K, ..., dk]; the result lives in the metapath's
    d-dimensional ball.
    """
    if heads.shape[0] != params.dims.heads:
        raise ValueError(
            f"expected {params.dims.heads} head outputs, got {heads.shape[0]}"
        )
    c = params.curvature(mp)
    tan = geo.log_map_0(heads, c)  # [K, ..., dk]
    tan = tan.movedim(0, -2)  # [..., K, dk]
    flat = tan.reshape(*tan.shape[:-2], params.dims.d)
    return geo.exp_map_0(flat, c)


def align_to_unified(h: Tensor, params: ModelParams, mp: Metapath) -> Tensor:
    """Map a metapath-ball point into the unified ball through W2."""
    tan = geo.log_map_0(h, params.curvature(mp))
    return geo.exp_map_0(tan @ params.w_align.T, params.unified_curvature())


def positive_transform(h: Tensor, params: ModelParams, mp: Metapath) -> Tensor:
    """Curvature re-tagging through the shared tangent space (no weights)."""
    tan = geo.log_map_0(h, params.curvature(mp))
    return geo.exp_map_0(tan, params.unified_curvature())


def project_metapath(h_aligned: Tensor, params: ModelParams) -> Tensor:
    """Inner transform of the metapath-level attention:
    act(W3 (x) h) (+) exp0(b3), in the unified ball; output dim d'."""
    c = params.unified_curvature()
    u = geo.hyp_activation(geo.hyp_matvec(params.w_proj, h_aligned, c), c)
    return geo.mobius_add(u, geo.exp_map_0(params.b_proj, c), c)


def inter_attention_batch(
    t_proj: Tensor,
    avail: Tensor,
    params: ModelParams,
    *,
    training: bool = False,
    dropout: float = 0.0,
) -> tuple[Tensor, Tensor]:
    """Metapath-level attention: ``t_proj`` [M, V, d'] -> (z [V, d'], beta [M, V]).

    Unavailable (metapath, node) entries get weight 0; nodes with no
    available metapath map to the origin.
    """
    c = params.unified_curvature()
    tan = geo.log_map_0(t_proj, c)  # [M, V, d']
    e = (_dropout(tan, dropout, training) * params.attn_path).sum(-1)  # [M, V]
    neg_inf = torch.tensor(float("-inf"), dtype=e.dtype)
    e_masked = torch.where(avail, e, neg_inf)
    stab = e_masked.amax(dim=0, keepdim=True).detach()
    stab = torch.where(torch.isfinite(stab), stab, torch.zeros_like(stab))
    ex = torch.where(avail, torch.exp(e_masked - stab), torch.zeros_like(e))
    beta = ex / ex.sum(dim=0, keepdim=True).clamp_min(1e-300)
    agg = (beta.unsqueeze(-1) * _dropout(tan, dropout, training)).sum(dim=0)
    return geo.exp_map_0(agg, c), beta


def inter_attention(
    h_aligned: Tensor,
    params: ModelParams,
    *,
    training: bool = False,
    dropout: float = 0.0,
) -> Tensor:
    """Single-node form: aligned embeddings [M, d] -> node embedding [d']."""
    if h_aligned.shape[0] == 0:
        raise ValueError("inter-space attention needs at least one metapath")
    t = project_metapath(h_aligned, params)
    avail = torch.ones((h_aligned.shape[0], 1), dtype=torch.bool)
    z, _ = inter_attention_batch(
        t.unsqueeze(1), avail, params, training=training, dropout=dropout
    )
    return z[0]


def readout(z: Tensor, params: ModelParams) -> Tensor:
    """Linear map of the node embedding's tangent coordinates (raw logits)."""
    return geo.log_map_0(z, params.unified_curvature()) @ params.w_out.T


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def contrastive_loss(
    bundle: EmbeddingBundle,
    params: ModelParams,
    node_rows: Tensor | None = None,
    form: str = "info_nce",
) -> Tensor:
    """Metapath-discrimination loss over the unified ball.

    For each node and each available metapath m, the positive is the node's
    own metapath embedding re-tagged into the unified ball and the negatives
    are the node's other aligned metapath embeddings. Metapaths with no
    negatives contribute 0. ``node_rows`` restricts which target rows are
    summed (default: all).
    """
    m = len(bundle.metapaths)
    if m == 0:
        return torch.zeros((), dtype=torch.float64)
    c = bundle.unified_c
    tau = params.tau
    d_pos = geo.hyp_distance(bundle.h_aligned, bundle.h_pos, c)  # [M, V]
    # Off-diagonal (anchor, negative) metapath pairs, grouped by anchor. The
    # diagonal is never evaluated: d(x, x) has an unbounded derivative.
    anchor = torch.tensor(
        [i for i in range(m) for j in range(m) if j != i], dtype=torch.int64
    )
    negative = torch.tensor(
        [j for i in range(m) for j in range(m) if j != i], dtype=torch.int64
    )
    if m == 1:
        per_anchor = torch.zeros((1, bundle.h_aligned.shape[1]), dtype=torch.float64)
        valid_term = torch.zeros_like(bundle.avail)
    else:
        d_neg = geo.hyp_distance(
            bundle.h_aligned[anchor], bundle.h_aligned[negative], c
        )  # [M*(M-1), V]
        valid = bundle.avail[anchor] & bundle.avail[negative]
        if form == "info_nce":
            diffs = (d_pos[anchor] - d_neg) / tau
            neg_inf = torch.tensor(float("-inf"), dtype=diffs.dtype)
            diffs = torch.where(valid, diffs, neg_inf)
            diffs = diffs.reshape(m, m - 1, -1)  # [M, M-1, V]
            zeros = torch.zeros((m, 1, diffs.shape[-1]), dtype=diffs.dtype)
            per_anchor = torch.logsumexp(torch.cat([zeros, diffs], dim=1), dim=1)
        elif form == "paper_literal":
            num = torch.exp(-d_pos / tau)
            w = torch.where(valid, torch.exp(-d_neg / tau), torch.zeros_like(d_neg))
            den = w.reshape(m, m - 1, -1).sum(dim=1)
            per_anchor = torch.where(
                den > 0, num / den.clamp_min(1e-300), torch.zeros_like(num)
            )
        else:
            raise ValueError(f"unknown contrastive form {form!r}")
        valid_term = bundle.avail & (
            valid.reshape(m, m - 1, -1).any(dim=1)
        )
    contrib = torch.where(valid_term, per_anchor, torch.zeros_like(per_anchor))
    if node_rows is not None:
        contrib = contrib[:, node_rows]
    return contrib.sum()


def classification_loss(logits: Tensor, labels: Tensor, rows: Tensor) -> Tensor:
    """Softmax cross-entropy against integer labels, summed over ``rows``."""
    y = labels[rows]
    n_classes = logits.shape[-1]
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return torch.nn.functional.cross_entropy(logits[rows], y, reduction="sum")


def link_loss(logits: Tensor, pairs: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy of sigmoid(f(z_u) . f(z_v)) over pairs.

    ``pairs`` is [S, 2] of target rows; ``y`` is the 0/1 label per pair.
    """
    if len(pairs) == 0:
        raise ValueError("link loss needs at least one pair")
    dots = (logits[pairs[:, 0]] * logits[pairs[:, 1]]).sum(-1)
    return torch.nn.functional.binary_cross_entropy_with_logits(
        dots, y.to(dots.dtype), reduction="mean"
    )


def total_loss(task: Tensor | float, hyp: Tensor | float, lam: float) -> Tensor:
    """Combined objective task + lam * contrastive."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    return torch.as_tensor(task, dtype=torch.float64) + lam * torch.as_tensor(
        hyp, dtype=torch.float64
    )


# ---------------------------------------------------------------------------
# Full forward pass
# ---------------------------------------------------------------------------


def forward(
    prepared: PreparedInstances,
    params: ModelParams,
    *,
    training: bool = False,
    dropout: float = 0.0,
    check_finite: bool = False,
) -> EmbeddingBundle:
    """Run the whole pipeline for every target node.

    Targets with no instances of a metapath are skipped by that metapath;
    targets with no instances at all get the origin embedding and zero
    logits.
    """
    if tuple(prepared.metapaths) != tuple(params.metapaths):
        raise ValueError("prepared instances and parameters disagree on metapaths")
    if not params.metapaths:
        raise ValueError("forward needs at least one metapath")
    dims = params.dims
    v = prepared.num_targets

    def check(stage: str, t: Tensor) -> Tensor:
        if check_finite and not torch.isfinite(t).all():
            raise NonFiniteError(stage)
        return t

    h_list: list[Tensor] = []
    alphas: dict[Metapath, Tensor] = {}
    for mp in params.metapaths:
        fm = prepared.feat_mean[mp]
        lbl = _mp_label(mp)
        if fm.shape[0] == 0:
            h_list.append(torch.zeros((v, dims.d), dtype=torch.float64))
            alphas[mp] = torch.zeros((dims.heads, 0), dtype=torch.float64)
            continue
        x = check(f"encode[{lbl}]", encode_instance(fm, params, mp))
        h_inst = check(f"instance_embed[{lbl}]", embed_instance(x, params, mp))
        per_head, alpha = intra_attention_segmented(
            h_inst,
            prepared.target_row[mp],
            v,
            params,
            mp,
            training=training,
            dropout=dropout,
        )
        check(f"intra_attention[{lbl}]", per_head)
        alphas[mp] = alpha
        h_list.append(check(f"multihead[{lbl}]", multihead_concat(per_head, params, mp)))

    h_meta = torch.stack(h_list)
    h_aligned = torch.stack(
        [align_to_unified(h_list[i], params, mp) for i, mp in enumerate(params.metapaths)]
    )
    check("align", h_aligned)
    h_pos = torch.stack(
        [positive_transform(h_list[i], params, mp) for i, mp in enumerate(params.metapaths)]
    )
    check("positive_transform", h_pos)
    t_proj = check("project_metapath", project_metapath(h_aligned, params))
    z, beta = inter_attention_batch(
        t_proj, prepared.avail, params, training=training, dropout=dropout
    )
    check("inter_attention", z)
    logits = check("readout", readout(z, params))

    curvatures = torch.stack([params.curvature(mp) for mp in params.metapaths])
    return EmbeddingBundle(
        targets=prepared.targets,
        metapaths=params.metapaths,
        avail=prepared.avail,
        h_meta=h_meta,
        h_aligned=h_aligned,
        h_pos=h_pos,
        t_proj=t_proj,
        beta=beta,
        z=z,
        logits=logits,
        curvatures=curvatures,
        unified_c=params.unified_curvature(),
        alphas=alphas,
    )
