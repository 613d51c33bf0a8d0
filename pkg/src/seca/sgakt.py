"""Adapter pool, text-queried relevance, and selective distillation.

Past tasks leave frozen adapter snapshots in a bounded pool. Each training
instance is pushed through every pooled adapter, the resulting views are
scored against the instance's per-task text embeddings through two small
projectors, and the softmaxed scores blend the views into one teacher
feature. The teacher is aligned to the current text classifier by a cross
entropy term and distilled into the live visual feature by a KL term with
the teacher branch cut out of the gradient graph.

Pool upkeep is utility-based: each entry keeps an EMA of its raw relevance
score, and admission into a full pool first removes the entry with the
highest utility, the one whose knowledge transferred most.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import AdapterStack, EncoderConfig, PromptBank, TextEncoder, \
    VisualBackbone, clip_logits, text_features
from .errors import ConfigError, ProtocolError

STRATEGIES = ("seq", "clip_kd", "vanilla", "avg_kd", "sg_akt")

_TAG_PROJECTORS = 9


@dataclass
class PoolEntry:
    stack: AdapterStack
    utility: float


class AdapterPool:
    """Bounded list of frozen adapter snapshots with utility scores."""

    def __init__(self, max_size: int | None = 5):
        if max_size is not None and max_size < 1:
            raise ConfigError("pool max_size must be at least 1 (or None)")
        self.max_size = max_size
        self.entries: list[PoolEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def stacks(self) -> list[AdapterStack]:
        return [e.stack for e in self.entries]

    @property
    def utilities(self) -> np.ndarray:
        return np.array([e.utility for e in self.entries], dtype=np.float64)

    def update_utilities(self, batch_alpha, momentum: float) -> None:
        """U_p <- mu U_p + (1 - mu) alpha_p with batch-mean raw scores."""
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError("utility momentum must lie in [0, 1]")
        batch_alpha = np.asarray(batch_alpha, dtype=np.float64)
        if batch_alpha.shape != (len(self.entries),):
            raise ValueError("one score per pool entry required")
        for entry, a in zip(self.entries, batch_alpha):
            entry.utility = momentum * entry.utility + (1.0 - momentum) * float(a)

    def admit_and_prune(self, stack: AdapterStack) -> int | None:
        """Insert a frozen copy, removing the max-utility entry if full.

        Ties break toward the lowest index. The newcomer's utility is the
        uniform value 1/max_size; utilities of survivors are kept as they
        are, not renormalized. Returns the removed index, if any.
        """
        removed = None
        if self.max_size is not None and len(self.entries) == self.max_size:
            removed = int(np.argmax(self.utilities))
            self.entries.pop(removed)
        self.entries.append(PoolEntry(stack.freeze_copy(), 0.0))
        denom = self.max_size if self.max_size is not None else len(self.entries)
        self.entries[-1].utility = 1.0 / denom
        return removed

    def checksums(self) -> list[str]:
        return [e.stack.checksum() for e in self.entries]


@dataclass
class SemanticProjectors:
    """The two trainable maps scoring text embeddings against pool views."""

    w_s: T.Parameter
    w_v: T.Parameter

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int, dtype=np.float64):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _TAG_PROJECTORS])
        )
        w_s = (rng.standard_normal((cfg.d_t, cfg.d_v)) / np.sqrt(cfg.d_t))
        w_v = (rng.standard_normal((cfg.d_v, cfg.d_v)) / np.sqrt(cfg.d_v))
        return cls(
            w_s=T.Parameter(w_s.astype(dtype), name="proj.w_s"),
            w_v=T.Parameter(w_v.astype(dtype), name="proj.w_v"),
        )

    @classmethod
    def zeros(cls, cfg: EncoderConfig, dtype=np.float64):
        return cls(
            w_s=T.Parameter(np.zeros((cfg.d_t, cfg.d_v), dtype=dtype), name="proj.w_s"),
            w_v=T.Parameter(np.zeros((cfg.d_v, cfg.d_v), dtype=dtype), name="proj.w_v"),
        )

    def parameters(self) -> list[T.Parameter]:
        return [self.w_s, self.w_v]


@dataclass
class RelevanceResult:
    """Raw scores, their softmax weights, and the blended teacher feature."""

    alpha: T.Tensor
    weights: T.Tensor
    v_agg: T.Tensor
    views: list[T.Tensor]


def pooled_views(backbone: VisualBackbone, x, pool: AdapterPool) -> list[T.Tensor]:
    """One frozen visual forward per pool entry; constants in the graph."""
    if len(pool) == 0:
        raise ProtocolError("adapter pool is empty; no teachers to consult")
    return [backbone.forward(x, stack) for stack in pool.stacks]


def semantic_vectors(
    text_enc: TextEncoder, bank: PromptBank, class_ids, upto_task: int
) -> list[T.Tensor]:
    """Text features of the given classes under each prompt 1..upto_task.

    Returns one (num_classes, d_T) block per historical prompt. Frozen past
    prompts contribute no gradient; the active prompt does.
    """
    if upto_task < 1:
        raise ProtocolError("semantic vectors need at least one task")
    out = []
    for task in range(1, upto_task + 1):
        if task not in bank.prompts:
            raise ProtocolError(f"no prompt recorded for task {task}")
        out.append(text_features(text_enc, bank, class_ids, bank.prompts[task]))
    return out


def relevance_scores(
    sem: list[T.Tensor],
    views: list[T.Tensor],
    ys_local,
    projectors: SemanticProjectors,
) -> T.Tensor:
    """Per-instance, per-entry scores (1/s) sum_i (S_y W_S) . (V_p W_V)."""
    if not sem or not views:
        raise ValueError("need at least one semantic block and one view")
    if projectors.w_s.data.shape[1] != projectors.w_v.data.shape[1]:
        raise ValueError("projected dimensions disagree")
    ys_local = np.asarray(ys_local, dtype=np.int64)
    s = len(sem)
    proj = None
    for block in sem:
        rows = T.take_rows(T.matmul(block, projectors.w_s), ys_local)
        proj = rows if proj is None else T.add(proj, rows)
    proj = T.mul(proj, 1.0 / s)
    cols = []
    for view in views:
        vproj = T.matmul(view, projectors.w_v)
        cols.append(T.tsum(T.mul(proj, vproj), axis=1))
    return T.stack_cols(cols)


def aggregate(views: list[T.Tensor], alpha: T.Tensor, lam: float) -> RelevanceResult:
    """Blend views with row weights softmax(lam * alpha)."""
    if lam < 0:
        raise ConfigError("aggregation scale must be non-negative")
    if alpha.data.ndim != 2 or alpha.data.shape[1] != len(views):
        raise ValueError("one score column per view required")
    weights = T.softmax_temp(T.mul(alpha, float(lam)), 1.0)
    v_agg = None
    for p, view in enumerate(views):
        term = T.mul(view, T.col(weights, p))
        v_agg = term if v_agg is None else T.add(v_agg, term)
    return RelevanceResult(alpha=alpha, weights=weights, v_agg=v_agg, views=views)


def loss_agg(v_agg: T.Tensor, text_feats: T.Tensor, ys_local, tau: float) -> T.Tensor:
    """Cross entropy aligning the blended teacher with the text classifier."""
    probs = T.softmax_temp(clip_logits(v_agg, text_feats, tau), 1.0)
    return T.cross_entropy_rows(probs, ys_local)


def loss_sgakt(
    v_agg: T.Tensor,
    f_v: T.Tensor,
    text_feats: T.Tensor,
    tau_prime: float,
    eps: float = T.KL_EPS_DEFAULT,
) -> T.Tensor:
    """KL from the teacher's class distribution to the live feature's.

    The teacher side is evaluated outside the gradient graph, so the
    projectors and prompts feeding v_agg receive nothing from this term.
    """
    with T.no_grad():
        teacher = T.softmax_temp(clip_logits(v_agg.detach(), text_feats.detach(),
                                             tau_prime), 1.0)
    student = T.softmax_temp(clip_logits(f_v, text_feats, tau_prime), 1.0)
    return T.kl_div_rows(teacher, student, eps)


def teacher_result(
    strategy: str,
    backbone: VisualBackbone,
    x,
    pool: AdapterPool,
    sem: list[T.Tensor] | None,
    ys_local,
    projectors: SemanticProjectors,
    lam: float,
) -> RelevanceResult | None:
    """The strategy's teacher feature, or None when there is no teacher.

    Every strategy flows through the same aggregation path; they differ
    only in which views enter and whether the scores are learned. That
    makes avg_kd literally the zero-score special case of sg_akt, and
    vanilla/clip_kd the single-view special cases.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown distillation strategy {strategy!r}")
    if strategy == "seq":
        return None
    if strategy == "clip_kd":
        views = [backbone.forward(x, None)]
    elif strategy == "vanilla":
        if len(pool) == 0:
            return None
        views = [backbone.forward(x, pool.stacks[-1])]
    else:
        views = pooled_views(backbone, x, pool)
    if strategy == "sg_akt":
        alpha = relevance_scores(sem, views, ys_local, projectors)
    else:
        n = views[0].data.shape[0]
        alpha = T.Tensor(np.zeros((n, len(views)), dtype=views[0].data.dtype))
    return aggregate(views, alpha, lam)


def distill_variant(
    strategy: str,
    *,
    backbone: VisualBackbone,
    x,
    f_v: T.Tensor,
    pool: AdapterPool,
    projectors: SemanticProjectors,
    text_feats: T.Tensor,
    ys_local,
    sem: list[T.Tensor] | None = None,
    lam: float = 1.0,
    tau_prime: float = 20.0,
    eps: float = T.KL_EPS_DEFAULT,
) -> T.Tensor:
    """The strategy's distillation loss (the KL term alone)."""
    res = teacher_result(strategy, backbone, x, pool, sem, ys_local, projectors, lam)
    if res is None:
        return T.scalar(0.0, dtype=f_v.data.dtype)
    return loss_sgakt(res.v_agg, f_v, text_feats, tau_prime, eps)
