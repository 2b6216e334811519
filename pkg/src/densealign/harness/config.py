from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..encoder import EncoderConfig
from ..objective import LossWeights
from ..segmentor import SegHeadConfig
from ..synthdata import CorpusConfig


@dataclass
class TrainConfig:
    iters: int = 2000
    batch: int = 4
    peak_lr: float = 6e-5
    warmup_lr: float = 1e-6
    warmup_iters: int | None = None  # None: 1500 scaled by iters / 20000
    poly_power: float = 0.9
    weight_decay: float = 0.01
    beta: float = 0.5
    tau: float = 1.0
    lam: float = 0.001
    lambda_i: float = 1.0
    lambda_e: float = 1.0
    lambda_p: float = 0.2
    ccl_enabled: bool = True
    gia_enabled: bool = True
    lea_enabled: bool = True
    seg_start_iter: int | None = None  # None: warmup_iters
    par_iters: int = 10
    augment: bool = True
    proj_dim: int = 64
    d_t: int = 64
    bank_seed: int = 0
    bank_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters is None:
            self.warmup_iters = round(1500 * self.iters / 20000)
        if self.seg_start_iter is None:
            self.seg_start_iter = self.warmup_iters
        if self.iters < 0 or self.batch < 1:
            raise ValueError("iters must be >= 0 and batch >= 1")
        if self.iters > 0 and not self.warmup_iters < self.iters:
            raise ValueError("warmup_iters must be smaller than iters")
        if min(self.peak_lr, self.warmup_lr, self.tau) <= 0:
            raise ValueError("rates and tau must be positive")
        LossWeights(self.lambda_i, self.lambda_e, self.lambda_p)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_i, self.lambda_e, self.lambda_p)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then polynomial decay."""
    if not 0 <= step < max(cfg.iters, 1):
        raise ValueError(f"step {step} outside [0, {cfg.iters})")
    w = cfg.warmup_iters
    if step < w:
        return cfg.warmup_lr + (cfg.peak_lr - cfg.warmup_lr) * step / w
    return cfg.peak_lr * (1 - (step - w) / (cfg.iters - w)) ** cfg.poly_power


@dataclass
class RunConfig:
    corpus: CorpusConfig
    encoder: EncoderConfig
    seghead: SegHeadConfig
    train: TrainConfig

    SECTIONS = ("corpus", "encoder", "seghead", "train")

    @classmethod
    def default(cls) -> "RunConfig":
        corpus = CorpusConfig()
        encoder = EncoderConfig(image_size=corpus.image_size)
        seghead = SegHeadConfig(in_dim=encoder.token_dim, num_classes=len(corpus.classes) + 1)
        return cls(corpus, encoder, seghead, TrainConfig())

    def to_dict(self) -> dict:
        out = {}
        for name in self.SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        base = cls.default()
        return base.with_overrides({f"{s}.{k}": v for s, sec in data.items() for k, v in sec.items()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply ``{"key": value}`` or ``{"section.key": value}`` overrides.

        Bare keys go to every section that declares them. Derived fields
        (seg head dims, image size, default warmup) follow the result.
        """
        sections = {s: asdict(getattr(self, s)) for s in self.SECTIONS}
        explicit = {s: set() for s in self.SECTIONS}
        for key, value in overrides.items():
            if "." in key:
                sec, name = key.split(".", 1)
                targets = [sec]
                if sec not in sections or name not in sections[sec]:
                    raise KeyError(f"unknown config key {key!r}")
            else:
                name = key
                targets = [s for s in self.SECTIONS if name in sections[s]]
                if not targets:
                    raise KeyError(f"unknown config key {key!r}")
            for sec in targets:
                sections[sec][name] = _coerce(value, sections[sec][name], _field_type(sec, name))
                explicit[sec].add(name)

        train = sections["train"]
        if "iters" in explicit["train"] and "warmup_iters" not in explicit["train"]:
            train["warmup_iters"] = None
        if "seg_start_iter" not in explicit["train"]:
            train["seg_start_iter"] = None
        corpus = CorpusConfig(**sections["corpus"])
        enc = sections["encoder"]
        if "image_size" not in explicit["encoder"]:
            enc["image_size"] = corpus.image_size
        encoder = EncoderConfig(**enc)
        head = sections["seghead"]
        head["in_dim"] = encoder.token_dim
        head["num_classes"] = len(corpus.classes) + 1
        return RunConfig(corpus, encoder, SegHeadConfig(**head), TrainConfig(**train))


_SECTION_TYPES = {"corpus": CorpusConfig, "encoder": EncoderConfig, "seghead": SegHeadConfig,
                  "train": TrainConfig}


def _field_type(section: str, name: str) -> str:
    for f in fields(_SECTION_TYPES[section]):
        if f.name == name:
            return str(f.type)
    return ""


def _coerce(value, current, ftype: str):
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null") and "None" in ftype:
        return None
    if "bool" in ftype:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "tuple" in ftype:
        return tuple(v for v in value.split(",") if v)
    if "int" in ftype and "float" not in ftype:
        return int(value)
    if "float" in ftype:
        return float(value)
    return value


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, seed=seed))
