"""Frozen stand-in encoders: residual visual blocks with bottleneck adapters,
and prompt-conditioned text features.

Both towers are seeded random networks frozen at construction. They exist to
exercise the adaptation machinery on top of a fixed Lipschitz map, not to
model images or language.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

# child-seed tags so each component draws from its own stream
_TAG_BACKBONE = 1
_TAG_ADAPTER = 2
_TAG_TOKENS = 3
_TAG_PROMPT = 4
_TAG_TEXT = 5


@dataclass(frozen=True)
class EncoderConfig:
    d_v: int = 64
    d_t: int = 64
    layers: int = 4
    adapter_width: int = 16
    prompt_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("d_v", "d_t", "layers", "adapter_width", "prompt_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name}: must be >= 1")


def _rng(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *extra]))


def _affine(rng, n_in: int, n_out: int, dtype):
    w = (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype)
    b = (0.02 * rng.standard_normal(n_out)).astype(dtype)
    return T.Tensor(w), T.Tensor(b)


class VisualBackbone:
    """L frozen residual feed-forward blocks at width d_v."""

    def __init__(self, cfg: EncoderConfig, dtype=np.float64):
        rng = _rng(cfg.seed, _TAG_BACKBONE)
        self.cfg = cfg
        self.blocks = []
        for _ in range(cfg.layers):
            w1, b1 = _affine(rng, cfg.d_v, 4 * cfg.d_v, dtype)
            w2, b2 = _affine(rng, 4 * cfg.d_v, cfg.d_v, dtype)
            self.blocks.append((w1, b1, w2, b2))

    def forward(self, x, adapters: "AdapterStack | None" = None) -> T.Tensor:
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        if h.data.shape[-1] != self.cfg.d_v:
            raise ValueError(
                f"expected feature dim {self.cfg.d_v}, got {h.data.shape[-1]}"
            )
        for layer, (w1, b1, w2, b2) in enumerate(self.blocks):
            f = T.add(T.matmul(T.tanh(T.add(T.matmul(h, w1), b1)), w2), b2)
            h = T.add(T.add(h, f), adapters.apply(layer, h)) if adapters else T.add(h, f)
        return T.l2_normalize(h)

    def weight_arrays(self) -> list[np.ndarray]:
        return [t.data for blk in self.blocks for t in blk]

    def checksum(self) -> str:
        return T.checksum(self.weight_arrays())


class AdapterStack:
    """Per-layer bottleneck adapters, one per visual block.

    Down-projection is seeded Gaussian; up-projection starts at zero so the
    freshly built stack is the identity residual.
    """

    FIELDS = ("down_w", "down_b", "up_w", "up_b")

    def __init__(self, cfg: EncoderConfig, seed: int, dtype=np.float64, _empty=False):
        self.cfg = cfg
        self.layers: list[dict[str, T.Parameter]] = []
        if _empty:
            return
        rng = _rng(seed, _TAG_ADAPTER)
        d, w = cfg.d_v, cfg.adapter_width
        for layer in range(cfg.layers):
            down_w = (rng.standard_normal((d, w)) / np.sqrt(d)).astype(dtype)
            self.layers.append(
                {
                    "down_w": T.Parameter(down_w, name=f"adapter.{layer}.down_w"),
                    "down_b": T.Parameter(
                        np.zeros(w, dtype=dtype), name=f"adapter.{layer}.down_b"
                    ),
                    "up_w": T.Parameter(
                        np.zeros((w, d), dtype=dtype), name=f"adapter.{layer}.up_w"
                    ),
                    "up_b": T.Parameter(
                        np.zeros(d, dtype=dtype), name=f"adapter.{layer}.up_b"
                    ),
                }
            )

    def apply(self, layer: int, h: T.Tensor) -> T.Tensor:
        p = self.layers[layer]
        mid = T.tanh(T.add(T.matmul(h, p["down_w"]), p["down_b"]))
        return T.add(T.matmul(mid, p["up_w"]), p["up_b"])

    def parameters(self) -> list[T.Parameter]:
        return [p[f] for p in self.layers for f in self.FIELDS]

    def freeze_copy(self) -> "AdapterStack":
        clone = AdapterStack(self.cfg, seed=0, _empty=True)
        for layer, params in enumerate(self.layers):
            frozen = {}
            for f in self.FIELDS:
                frozen[f] = T.Parameter(
                    params[f].data.copy(), name=f"pool.{layer}.{f}", trainable=False
                )
                frozen[f].freeze()
            clone.layers.append(frozen)
        return clone

    def weight_arrays(self) -> list[np.ndarray]:
        return [p[f].data for p in self.layers for f in self.FIELDS]

    def checksum(self) -> str:
        return T.checksum(self.weight_arrays())


class TextEncoder:
    """Frozen mixer from pooled tokens to a unit-norm text feature."""

    def __init__(self, cfg: EncoderConfig, dtype=np.float64):
        rng = _rng(cfg.seed, _TAG_TEXT)
        self.cfg = cfg
        self.w1, self.b1 = _affine(rng, cfg.d_t, 4 * cfg.d_t, dtype)
        self.w2, self.b2 = _affine(rng, 4 * cfg.d_t, cfg.d_t, dtype)

    def forward_pooled(self, pooled: T.Tensor) -> T.Tensor:
        f = T.add(
            T.matmul(T.tanh(T.add(T.matmul(pooled, self.w1), self.b1)), self.w2),
            self.b2,
        )
        return T.l2_normalize(T.add(pooled, f))

    def weight_arrays(self) -> list[np.ndarray]:
        return [self.w1.data, self.b1.data, self.w2.data, self.b2.data]

    def checksum(self) -> str:
        return T.checksum(self.weight_arrays())


class PromptBank:
    """Trainable per-task prompts plus the frozen class-token table."""

    def __init__(
        self,
        cfg: EncoderConfig,
        class_ids: list[int],
        registry_seed: int,
        dtype=np.float64,
    ):
        self.cfg = cfg
        self.class_ids = sorted(int(c) for c in class_ids)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ConfigError("class registry contains duplicate ids")
        self.index = {c: i for i, c in enumerate(self.class_ids)}
        rng = _rng(registry_seed, _TAG_TOKENS)
        table = (
            rng.standard_normal((len(self.class_ids), cfg.d_t)) / np.sqrt(cfg.d_t)
        ).astype(dtype)
        self.token_table = T.Tensor(table)
        self.prompts: dict[int, T.Parameter] = {}

    def new_prompt(self, task: int, seed: int) -> T.Parameter:
        if task in self.prompts:
            raise ConfigError(f"prompt for task {task} already exists")
        rng = _rng(seed, _TAG_PROMPT, task)
        p = T.Parameter(
            (0.02 * rng.standard_normal((self.cfg.prompt_tokens, self.cfg.d_t))).astype(
                self.token_table.data.dtype
            ),
            name=f"prompt.{task}",
        )
        self.prompts[task] = p
        return p

    def freeze_task(self, task: int) -> None:
        self.prompts[task].freeze()

    def token_rows(self, class_ids) -> T.Tensor:
        try:
            idx = [self.index[int(c)] for c in class_ids]
        except KeyError as e:
            raise ValueError(f"unknown class id {e.args[0]}") from None
        return T.take_rows(self.token_table, np.asarray(idx, dtype=np.int64))

    def prompt_checksum(self, upto_task: int) -> str:
        return T.checksum([self.prompts[t].data for t in sorted(self.prompts) if t <= upto_task])


def text_features(
    text_enc: TextEncoder, bank: PromptBank, class_ids, prompt: T.Tensor
) -> T.Tensor:
    """Unit-norm text features for a class list under one prompt, as rows.

    Pooling of [prompt tokens ; class token] is a plain mean, so the batch
    form is (sum of prompt rows + class token) / (M + 1) broadcast over the
    class rows.
    """
    rows = bank.token_rows(class_ids)
    m = prompt.data.shape[0]
    pooled = T.mul(T.add(rows, T.tsum(prompt, axis=0)), 1.0 / (m + 1))
    return text_enc.forward_pooled(pooled)


def text_forward(
    text_enc: TextEncoder, bank: PromptBank, class_id: int, prompt: T.Tensor
) -> T.Tensor:
    feats = text_features(text_enc, bank, [class_id], prompt)
    return T.reshape(feats, (text_enc.cfg.d_t,))


def clip_logits(f, text_feats, tau: float) -> T.Tensor:
    """Cosine similarities against a row matrix of features, divided by tau."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    feats = text_feats if isinstance(text_feats, T.Tensor) else T.Tensor(text_feats)
    if feats.data.shape[0] == 0:
        raise ValueError("empty class set")
    fn = T.l2_normalize(f if isinstance(f, T.Tensor) else T.Tensor(f))
    tn = T.l2_normalize(feats)
    return T.mul(T.matmul(fn, T.transpose(tn)), 1.0 / tau)
