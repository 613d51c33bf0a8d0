"""Run configuration: one JSON document, explicit defaults, strict parsing.

Every field that reaches a manifest is resolved here, so a dumped config
re-runs the exact experiment. Unknown keys and type mismatches are rejected
with the offending field path in the message.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .datastream import SplitRule, SyntheticSpec, TaskStream, gen_synthetic, \
    load_feature_bank
from .encoder import EncoderConfig
from .errors import ConfigError
from .sevpr import VARIANTS
from .sgakt import STRATEGIES

BETA_TASK_INDEX = "task-index"


@dataclass(frozen=True)
class BankSource:
    path: str
    num_tasks: int
    train_fraction: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    """Exactly one of synthetic or bank supplies the task stream."""

    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    bank: BankSource | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.bank is None):
            raise ConfigError("data: exactly one of synthetic/bank required")

    @property
    def seed(self) -> int:
        return self.synthetic.seed if self.synthetic else self.bank.seed

    def reseed(self, seed: int) -> "DataConfig":
        if self.synthetic:
            return DataConfig(synthetic=replace(self.synthetic, seed=seed))
        return DataConfig(synthetic=None, bank=replace(self.bank, seed=seed))


def build_stream(data: DataConfig) -> TaskStream:
    if data.synthetic:
        return gen_synthetic(data.synthetic)
    rule = SplitRule(num_tasks=data.bank.num_tasks,
                     train_fraction=data.bank.train_fraction,
                     seed=data.bank.seed)
    return load_feature_bank(data.bank.path, rule)


@dataclass(frozen=True)
class RunConfig:
    tau: float = 0.01
    tau_prime: float = 20.0
    agg_lambda: float = 1.0
    affinity_gamma: float = 1.0
    utility_momentum: float = 0.99
    kl_epsilon: float = 1e-8
    pool_max: int | None = 5
    beta: float | str = BETA_TASK_INDEX
    lr: float = 0.001
    epochs_per_task: int = 10
    batch_size: int = 64
    seed: int = 0
    replay: bool = False
    replay_full_cov: bool = False
    distill: str = "sg_akt"
    classifier: str = "se_vpr"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        positive = ("tau", "tau_prime", "kl_epsilon", "lr", "batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("agg_lambda", "affinity_gamma", "epochs_per_task"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        if not 0.0 <= self.utility_momentum <= 1.0:
            raise ConfigError("utility_momentum: must lie in [0, 1]")
        if self.pool_max is not None and self.pool_max < 1:
            raise ConfigError("pool_max: must be >= 1 or ALL")
        if isinstance(self.beta, str):
            if self.beta != BETA_TASK_INDEX:
                raise ConfigError(f"beta: unknown schedule {self.beta!r}")
        elif self.beta < 0:
            raise ConfigError("beta: constant must be non-negative")
        if self.distill not in STRATEGIES:
            raise ConfigError(f"distill: unknown strategy {self.distill!r}")
        if self.classifier not in VARIANTS:
            raise ConfigError(f"classifier: unknown variant {self.classifier!r}")
        if self.encoder.d_v != self.encoder.d_t:
            # the hybrid score compares visual features, text features, and
            # replayed pseudo features through one cosine, so the towers
            # must share a width
            raise ConfigError("encoder.d_t: must equal encoder.d_v")


def beta_value(cfg: RunConfig, task: int) -> float:
    if cfg.beta == BETA_TASK_INDEX:
        return float(task)
    return float(cfg.beta)


def _check_keys(obj: dict, allowed, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}{key}: unknown field")


def _get(obj: dict, key: str, kinds, path: str, default):
    if key not in obj:
        return default
    val = obj[key]
    if isinstance(val, bool) and bool not in kinds:
        raise ConfigError(f"{path}{key}: wrong type")
    if not isinstance(val, tuple(kinds)):
        raise ConfigError(f"{path}{key}: wrong type")
    return val


def _parse_encoder(obj, path: str) -> EncoderConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    defaults = EncoderConfig()
    _check_keys(obj, ("d_v", "d_t", "layers", "adapter_width",
                      "prompt_tokens", "seed"), path + ".")
    try:
        return EncoderConfig(
            d_v=_get(obj, "d_v", [int], path + ".", defaults.d_v),
            d_t=_get(obj, "d_t", [int], path + ".", defaults.d_t),
            layers=_get(obj, "layers", [int], path + ".", defaults.layers),
            adapter_width=_get(obj, "adapter_width", [int], path + ".",
                               defaults.adapter_width),
            prompt_tokens=_get(obj, "prompt_tokens", [int], path + ".",
                               defaults.prompt_tokens),
            seed=_get(obj, "seed", [int], path + ".", defaults.seed),
        )
    except ConfigError:
        raise  # messages already carry the encoder. prefix


def _parse_data(obj, path: str) -> DataConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    _check_keys(obj, ("synthetic", "bank"), path + ".")
    if ("synthetic" in obj) == ("bank" in obj):
        raise ConfigError(f"{path}: exactly one of synthetic/bank required")
    if "synthetic" in obj:
        sub, subpath = obj["synthetic"], path + ".synthetic."
        if not isinstance(sub, dict):
            raise ConfigError(f"{path}.synthetic: expected an object")
        d = SyntheticSpec()
        _check_keys(sub, ("num_tasks", "classes_per_task", "dim", "superclasses",
                          "mean_correlation", "noise", "train_per_class",
                          "test_per_class", "seed"), subpath)
        try:
            spec = SyntheticSpec(
                num_tasks=_get(sub, "num_tasks", [int], subpath, d.num_tasks),
                classes_per_task=_get(sub, "classes_per_task", [int], subpath,
                                      d.classes_per_task),
                dim=_get(sub, "dim", [int], subpath, d.dim),
                superclasses=_get(sub, "superclasses", [int], subpath,
                                  d.superclasses),
                mean_correlation=_get(sub, "mean_correlation", [int, float],
                                      subpath, d.mean_correlation),
                noise=_get(sub, "noise", [int, float], subpath, d.noise),
                train_per_class=_get(sub, "train_per_class", [int], subpath,
                                     d.train_per_class),
                test_per_class=_get(sub, "test_per_class", [int], subpath,
                                    d.test_per_class),
                seed=_get(sub, "seed", [int], subpath, d.seed),
            )
        except ConfigError as e:
            raise ConfigError(f"data.synthetic: {e}") from None
        return DataConfig(synthetic=spec)
    sub, subpath = obj["bank"], path + ".bank."
    if not isinstance(sub, dict):
        raise ConfigError(f"{path}.bank: expected an object")
    _check_keys(sub, ("path", "num_tasks", "train_fraction", "seed"), subpath)
    if "path" not in sub or "num_tasks" not in sub:
        raise ConfigError(f"{path}.bank: path and num_tasks are required")
    bank = BankSource(
        path=_get(sub, "path", [str], subpath, None),
        num_tasks=_get(sub, "num_tasks", [int], subpath, None),
        train_fraction=_get(sub, "train_fraction", [int, float], subpath, 0.8),
        seed=_get(sub, "seed", [int], subpath, 0),
    )
    return DataConfig(synthetic=None, bank=bank)


_TOP_KEYS = ("tau", "tau_prime", "agg_lambda", "affinity_gamma",
             "utility_momentum", "kl_epsilon", "pool_max", "beta", "lr",
             "epochs_per_task", "batch_size", "seed", "replay",
             "replay_full_cov", "distill", "classifier", "encoder", "data")


def parse_config(obj) -> RunConfig:
    """Build a validated RunConfig from a parsed JSON object."""
    if not isinstance(obj, dict):
        raise ConfigError("config: expected a JSON object")
    _check_keys(obj, _TOP_KEYS, "")
    d = RunConfig()
    pool_max = obj.get("pool_max", d.pool_max)
    if pool_max == "ALL" or pool_max is None:
        pool_max = None
    elif isinstance(pool_max, bool) or not isinstance(pool_max, int):
        raise ConfigError("pool_max: wrong type (int, ALL, or null)")
    beta = obj.get("beta", d.beta)
    if not isinstance(beta, (int, float, str)) or isinstance(beta, bool):
        raise ConfigError("beta: wrong type (number or schedule name)")
    if isinstance(beta, (int, float)):
        beta = float(beta)
    return RunConfig(
        tau=float(_get(obj, "tau", [int, float], "", d.tau)),
        tau_prime=float(_get(obj, "tau_prime", [int, float], "", d.tau_prime)),
        agg_lambda=float(_get(obj, "agg_lambda", [int, float], "", d.agg_lambda)),
        affinity_gamma=float(_get(obj, "affinity_gamma", [int, float], "",
                                  d.affinity_gamma)),
        utility_momentum=float(_get(obj, "utility_momentum", [int, float], "",
                                    d.utility_momentum)),
        kl_epsilon=float(_get(obj, "kl_epsilon", [int, float], "", d.kl_epsilon)),
        pool_max=pool_max,
        beta=beta,
        lr=float(_get(obj, "lr", [int, float], "", d.lr)),
        epochs_per_task=_get(obj, "epochs_per_task", [int], "", d.epochs_per_task),
        batch_size=_get(obj, "batch_size", [int], "", d.batch_size),
        seed=_get(obj, "seed", [int], "", d.seed),
        replay=_get(obj, "replay", [bool], "", d.replay),
        replay_full_cov=_get(obj, "replay_full_cov", [bool], "", d.replay_full_cov),
        distill=_get(obj, "distill", [str], "", d.distill),
        classifier=_get(obj, "classifier", [str], "", d.classifier),
        encoder=_parse_encoder(obj["encoder"], "encoder")
        if "encoder" in obj else EncoderConfig(),
        data=_parse_data(obj["data"], "data") if "data" in obj else DataConfig(),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON in {path}: {e}") from None
    return parse_config(obj)


def config_dict(cfg: RunConfig) -> dict:
    """Fully resolved config as plain JSON types; round-trips via parse."""
    out = asdict(cfg)
    out["pool_max"] = "ALL" if cfg.pool_max is None else cfg.pool_max
    data = {}
    if cfg.data.synthetic:
        data["synthetic"] = asdict(cfg.data.synthetic)
    else:
        data["bank"] = asdict(cfg.data.bank)
    out["data"] = data
    return out
