"""Pipeline configuration, model registry and seed derivation.

Config files are JSON objects whose sections mirror :class:`PipelineConfig`.
Missing keys take their defaults, unknown keys are rejected. An empty file
is the all-defaults config.
"""
from __future__ import annotations

import dataclasses
import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig
from .temporal import SamplingConfig

OPERATING_POINTS = (16, 64, 256)


@dataclass(frozen=True)
class LocalConfig:
    n_max: dict = field(default_factory=lambda: {"16": 150, "64": 250, "256": 300})
    tau_path: str | None = None
    weights: tuple = (0.5, 2.0, 1.0, -1.0)
    threshold: float = 0.02
    max_octaves: int = 3


@dataclass(frozen=True)
class NipConfig:
    enabled: bool = True
    rotations: int = 4
    pooling: tuple = ("avg", "max", "avg")
    whitening_path: str | None = None  # None: shipped default; "" disables whitening
    binarize: bool = True  # carry sign bits in the bitstream instead of float


@dataclass(frozen=True)
class CodecSettings:
    block: int = 3
    n_ref: int = 2
    delta: int = 8
    keyframe_cap: dict = field(default_factory=lambda: {"16": 2, "64": 4, "256": 8})


@dataclass(frozen=True)
class AnalysisConfig:
    t_global: float = 0.1
    t_keyframe: float = 0.05
    t_video: float = 0.08
    ratio: float = 0.85
    ransac_iters: int = 512
    min_inliers: int = 4
    k_global: int = 500
    k_local: int = 100
    merge_gap: float = 0.5
    w_nip: float = 0.5
    localize_side: str = "ref"  # timeline used for Jaccard: "ref" or "query"

    def __post_init__(self):
        if self.k_local > self.k_global:
            raise InvalidConfig("analysis.k_local must not exceed analysis.k_global")
        if not 0.0 <= self.w_nip <= 1.0:
            raise InvalidConfig("analysis.w_nip must lie in [0, 1]")
        if self.localize_side not in ("ref", "query"):
            raise InvalidConfig("analysis.localize_side must be 'ref' or 'query'")


@dataclass(frozen=True)
class PipelineConfig:
    op: int = 64
    seed: int = 0
    gmm_path: str | None = None
    threads: int = 1
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    nip: NipConfig = field(default_factory=NipConfig)
    codec: CodecSettings = field(default_factory=CodecSettings)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.op not in OPERATING_POINTS:
            raise InvalidConfig(f"op must be one of {OPERATING_POINTS}, got {self.op}")

    @property
    def n_max(self) -> int:
        return int(self.local.n_max[str(self.op)])

    @property
    def keyframe_cap(self) -> int:
        return int(self.codec.keyframe_cap[str(self.op)])

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def with_overrides(self, **kw) -> "PipelineConfig":
        """Dotted keys (``analysis.w_nip``) override nested fields."""
        d = self.to_dict()
        for key, value in kw.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
        return from_dict(d)


def derive_seed(seed: int, stage: str) -> int:
    """Per-stage seed: first word of SeedSequence([seed, crc32(stage)])."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidConfig(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise InvalidConfig(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for name, f in fields.items():
        if name not in data:
            continue
        v = data[name]
        path = f"{where}.{name}" if where else name
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kw[name] = _build(sub, v, path)
        elif isinstance(v, list):
            kw[name] = tuple(v)
        elif isinstance(v, dict):
            kw[name] = {str(k): x for k, x in v.items()}
        else:
            kw[name] = v
    try:
        return cls(**kw)
    except InvalidConfig as exc:
        raise InvalidConfig(f"{where + ': ' if where else ''}{exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{where or 'config'}: {exc}") from None


_SECTIONS = {
    (PipelineConfig, "sampling"): SamplingConfig,
    (PipelineConfig, "local"): LocalConfig,
    (PipelineConfig, "nip"): NipConfig,
    (PipelineConfig, "codec"): CodecSettings,
    (PipelineConfig, "analysis"): AnalysisConfig,
}


def from_dict(d: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, d, "")
    for key in ("n_max",):
        if str(cfg.op) not in getattr(cfg.local, key):
            raise InvalidConfig(f"local.{key} has no entry for op {cfg.op}")
    if str(cfg.op) not in cfg.codec.keyframe_cap:
        raise InvalidConfig(f"codec.keyframe_cap has no entry for op {cfg.op}")
    return cfg


def load_config(path: str | None) -> PipelineConfig:
    if not path:
        return PipelineConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    if not text.strip():
        return PipelineConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    cfg = from_dict(data)
    check_models(cfg)
    return cfg


def dump_config(cfg: PipelineConfig, path: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


_MAGIC = {"gmm_path": b"CDVAGMM1", "tau_path": b"CDVATAU1", "whitening_path": b"CDVAPCA1"}


def check_models(cfg: PipelineConfig):
    """Referenced model files must exist and start with the right magic."""
    for key, path in (("gmm_path", cfg.gmm_path), ("tau_path", cfg.local.tau_path),
                      ("whitening_path", cfg.nip.whitening_path)):
        if not path:
            continue
        if not os.path.exists(path):
            raise InvalidConfig(f"{key}: model file {path} does not exist")
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC[key]:
                raise InvalidConfig(f"{key}: {path} is not a {_MAGIC[key].decode()} file")


# ---------------------------------------------------------------- model registry

@dataclass
class Models:
    tau: np.ndarray
    gmm: object
    whitening: object = None
    backbone: object = None


def load_models(cfg: PipelineConfig) -> Models:
    from . import local, nip, scfv

    tau = local.read_tau(cfg.local.tau_path) if cfg.local.tau_path else local.default_tau()
    gmm = scfv.read_gmm(cfg.gmm_path) if cfg.gmm_path else scfv.default_gmm()
    if gmm is None:
        raise InvalidConfig("no GMM: pass gmm_path or install the shipped default model")
    wp = cfg.nip.whitening_path
    if wp is None:
        white = nip.default_whitening()
    elif wp == "":
        white = None
    else:
        white = nip.read_whitening(wp)
    return Models(tau, gmm, white, nip.default_backbone())
