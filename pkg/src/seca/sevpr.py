"""Visual prototypes refined through text-affinity mixing.

Raw prototypes are class means of adapter-free frozen-encoder features,
written once when their class first appears. During training they are
mixed through a row-normalized RBF affinity matrix built from projected
class text embeddings, so semantically close classes pull each other's
prototypes together. The refined prototypes act as a cosine classifier on
the adapted visual feature, and a consistency term anchors old classes'
refined prototypes to their snapshot from the previous task.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, clip_logits
from .errors import ConfigError, ProtocolError

VARIANTS = ("only_text", "centroid_clip", "centroid_adapted", "linear", "se_vpr")

_TAG_AFFINITY = 10


class PrototypeBank:
    """Per-class prototype stores: raw, adapted, refined, and snapshot.

    Raw and adapted entries are write-once per class. The refined store
    holds whatever the trainer last computed; snapshots deep-copy it at
    task boundaries and are locked thereafter.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.raw: dict[int, np.ndarray] = {}
        self.counts: dict[int, int] = {}
        self.adapted: dict[int, np.ndarray] = {}
        self.refined_current: dict[int, np.ndarray] = {}
        self.refined_snapshot: dict[int, np.ndarray] = {}

    def _matrix(self, store: dict[int, np.ndarray], class_ids, what: str):
        missing = [k for k in class_ids if int(k) not in store]
        if missing:
            raise ProtocolError(f"no {what} prototype for classes {missing}")
        return np.stack([store[int(k)] for k in class_ids])

    def raw_matrix(self, class_ids) -> np.ndarray:
        return self._matrix(self.raw, class_ids, "raw")

    def adapted_matrix(self, class_ids) -> np.ndarray:
        return self._matrix(self.adapted, class_ids, "adapted")

    def snapshot_matrix(self, class_ids) -> np.ndarray:
        return self._matrix(self.refined_snapshot, class_ids, "snapshot")

    def set_refined(self, class_ids, refined) -> None:
        refined = refined.data if isinstance(refined, T.Tensor) else np.asarray(refined)
        if refined.shape != (len(class_ids), self.dim):
            raise ValueError("one refined row per class required")
        for i, k in enumerate(class_ids):
            self.refined_current[int(k)] = refined[i].copy()

    def checksum_raw(self) -> str:
        return T.checksum([self.raw[k] for k in sorted(self.raw)])

    def checksum_snapshot(self) -> str:
        return T.checksum(
            [self.refined_snapshot[k] for k in sorted(self.refined_snapshot)]
        )


def _class_means(
    bank: PrototypeBank,
    store: dict[int, np.ndarray],
    features: np.ndarray,
    y: np.ndarray,
    class_ids,
    what: str,
) -> None:
    for k in class_ids:
        k = int(k)
        if k in store:
            raise ProtocolError(f"{what} prototype for class {k} already written")
        rows = features[y == k]
        if rows.shape[0] == 0:
            raise ValueError(f"no samples for class {k}")
        proto = rows.mean(axis=0)
        proto.setflags(write=False)
        store[k] = proto
        if what == "raw":
            bank.counts[k] = int(rows.shape[0])


def raw_prototypes(bank: PrototypeBank, backbone, x, y, class_ids) -> None:
    """Adapter-free encoded class means, written once per class."""
    with T.no_grad():
        feats = backbone.forward(x, None).data
    _class_means(bank, bank.raw, feats, np.asarray(y), class_ids, "raw")


def adapted_prototypes(bank: PrototypeBank, backbone, stack, x, y, class_ids) -> None:
    """Class means through the current adapter, for the centroid ablation."""
    with T.no_grad():
        feats = backbone.forward(x, stack).data
    _class_means(bank, bank.adapted, feats, np.asarray(y), class_ids, "adapted")


class AffinityModel:
    """Trainable projection plus the RBF scale for class-affinity modeling."""

    def __init__(self, h_proj: T.Parameter, gamma: float):
        if gamma < 0:
            raise ConfigError("affinity scale must be non-negative")
        self.h_proj = h_proj
        self.gamma = float(gamma)

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int, gamma: float, dtype=np.float64):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_AFFINITY]))
        h = (rng.standard_normal((cfg.d_t, cfg.d_t)) / np.sqrt(cfg.d_t)).astype(dtype)
        return cls(T.Parameter(h, name="affinity.h_proj"), gamma)

    def parameters(self) -> list[T.Parameter]:
        return [self.h_proj]


def affinity_matrix(z: T.Tensor, h_proj, gamma: float) -> T.Tensor:
    """M_kj = exp(-gamma ||z_k H - z_j H||^2), bitwise symmetric.

    The squared distances come out of a symmetrized Gram matrix, which
    pins the diagonal to exactly zero before the exp, so M_kk == 1 with no
    tolerance needed.
    """
    if gamma < 0:
        raise ConfigError("affinity scale must be non-negative")
    z = z if isinstance(z, T.Tensor) else T.Tensor(z)
    if z.data.ndim != 2 or z.data.shape[0] < 1:
        raise ValueError("need at least one class embedding row")
    k = z.data.shape[0]
    a = T.matmul(z, h_proj)
    g0 = T.matmul(a, T.transpose(a))
    g = T.mul(T.add(g0, T.transpose(g0)), 0.5)
    s = T.diag(g)
    d2 = T.add(T.add(T.reshape(s, (k, 1)), T.reshape(s, (1, k))), T.mul(g, -2.0))
    d2 = T.maximum0(d2)
    return T.exp(T.mul(d2, -float(gamma)))


def mixing_weights(m: T.Tensor) -> T.Tensor:
    """Row-normalized affinity: each row a probability vector."""
    return T.div(m, T.tsum(m, axis=1, keepdims=True))


def refine_prototypes(m: T.Tensor, raw) -> T.Tensor:
    """Affinity-mixed prototypes: row-stochastic M applied to raw rows."""
    raw = raw if isinstance(raw, T.Tensor) else T.Tensor(raw)
    if m.data.shape[0] != m.data.shape[1] or m.data.shape[1] != raw.data.shape[0]:
        raise ValueError("affinity must be square with one row per prototype")
    return T.matmul(mixing_weights(m), raw)


def visual_prob(f_adapted: T.Tensor, refined, tau: float) -> T.Tensor:
    """Softmax over cosine similarities to the refined prototypes."""
    return T.softmax_temp(clip_logits(f_adapted, refined, tau), 1.0)


def loss_ce_v(f_adapted: T.Tensor, refined, ys_local, tau: float) -> T.Tensor:
    return T.cross_entropy_rows(visual_prob(f_adapted, refined, tau), ys_local)


def loss_reg(refined_old: T.Tensor | None, snapshot: np.ndarray) -> T.Tensor:
    """Mean squared drift of old-class prototypes from their snapshot."""
    if refined_old is None or refined_old.data.shape[0] == 0:
        return T.scalar(0.0)
    snapshot = np.asarray(snapshot)
    if snapshot.shape != refined_old.data.shape:
        raise ValueError("snapshot shape disagrees with refined prototypes")
    diff = T.add(refined_old, T.Tensor(-snapshot))
    return T.tmean(T.tsum(T.mul(diff, diff), axis=1))


def snapshot_prototypes(bank: PrototypeBank) -> None:
    """Deep-copy refined_current into the immutable snapshot store."""
    out = {}
    for k, v in bank.refined_current.items():
        c = v.copy()
        c.setflags(write=False)
        out[k] = c
    bank.refined_snapshot = out


class LinearHead:
    """Per-task affine blocks over adapted features, zero-initialized."""

    def __init__(self, dim: int, dtype=np.float64):
        self.dim = int(dim)
        self.dtype = dtype
        self.blocks: dict[int, tuple[T.Parameter, T.Parameter]] = {}
        self.block_ids: dict[int, tuple[int, ...]] = {}

    def add_task(self, task: int, class_ids) -> None:
        if task in self.blocks:
            raise ConfigError(f"head block for task {task} already exists")
        c = len(class_ids)
        self.blocks[task] = (
            T.Parameter(np.zeros((c, self.dim), dtype=self.dtype), name=f"head.{task}.w"),
            T.Parameter(np.zeros(c, dtype=self.dtype), name=f"head.{task}.b"),
        )
        self.block_ids[task] = tuple(int(k) for k in class_ids)

    @property
    def class_ids(self) -> tuple[int, ...]:
        out: list[int] = []
        for task in sorted(self.blocks):
            out.extend(self.block_ids[task])
        return tuple(out)

    def logits(self, f: T.Tensor) -> T.Tensor:
        if not self.blocks:
            raise ProtocolError("linear head has no task blocks yet")
        cols = []
        for task in sorted(self.blocks):
            w, b = self.blocks[task]
            cols.append(T.transpose(T.add(T.matmul(f, T.transpose(w)), b)))
        return T.transpose(T.concat_rows(cols))

    def parameters(self) -> list[T.Parameter]:
        return [p for task in sorted(self.blocks) for p in self.blocks[task]]


def classifier_variant(
    kind: str,
    *,
    f_adapted: T.Tensor,
    bank: PrototypeBank,
    class_ids,
    tau: float,
    refined: T.Tensor | None = None,
    head: LinearHead | None = None,
) -> T.Tensor | None:
    """Visual-branch probabilities under the chosen classifier design.

    only_text has no visual branch and returns None; the caller drops the
    visual term from the hybrid score.
    """
    if kind not in VARIANTS:
        raise ConfigError(f"unknown classifier variant {kind!r}")
    if kind == "only_text":
        return None
    if kind == "centroid_clip":
        return visual_prob(f_adapted, bank.raw_matrix(class_ids), tau)
    if kind == "centroid_adapted":
        return visual_prob(f_adapted, bank.adapted_matrix(class_ids), tau)
    if kind == "linear":
        if head is None:
            raise ConfigError("linear variant needs a head")
        if head.class_ids != tuple(int(k) for k in class_ids):
            raise ProtocolError("head classes disagree with requested classes")
        return T.softmax_temp(head.logits(f_adapted), 1.0)
    if refined is None:
        raise ConfigError("se_vpr variant needs refined prototypes")
    return visual_prob(f_adapted, refined, tau)
