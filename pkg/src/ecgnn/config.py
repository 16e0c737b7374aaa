"""Run configuration, named random sub-streams, and the key=value file format.

All randomness flows from one root seed through named sub-streams (``data``,
``init``, ``dropout``, ``dropedge``, ``augmentation``, ...), so individual
components are reproducible in isolation. Configuration comes from a flat
``key=value`` file overridden by command-line flags; no environment
variables carry semantics.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

EMBEDDING_SOURCES = ("MLP", "BGRL", "MLPBGRL", "MLP->GNN")

GRID_TAUS = list(EMBEDDING_SOURCES)
GRID_KS = [3, 10, 20]
GRID_P_DES = [0.0, 0.5]
GRID_DEPTHS = [1, 2, 3, 4, 5]
GRID_WIDTHS = [256, 512, 1024]


def substream_seed(root_seed: int, name: str, *indices: int) -> int:
    """Stable derived seed for a named sub-stream of the root seed."""
    entropy = [int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    entropy.extend(int(i) & 0xFFFFFFFF for i in indices)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def seed_stream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root_seed, name, *indices))


@dataclass
class RunConfig:
    """Hyperparameters and bookkeeping for one experiment.

    Every field is serialised into every output artifact.
    """

    data_dir: str = ""
    backbone: str = "gcn"           # gcn | sage | gat_sep
    mode: str = "ecg"               # baseline | ecg
    tau: str = "MLP"                # MLP | BGRL | MLPBGRL | MLP->GNN
    k: int = 3
    p_de: float = 0.5
    depth: int = 2
    width: int = 256
    heads: int = 4
    lr: float = 3e-3
    max_epochs: int = 1000
    patience: int = 100
    hidden_dropout: float = 0.2
    embed_depth: int = 2
    embed_width: int = 64
    embed_epochs: int = 300
    bgrl_steps: int = 500
    bgrl_lr: float = 2e-4
    bgrl_feature_dropout: float = 0.2
    bgrl_edge_dropout: float = 0.3
    bgrl_ema: float = 0.99
    metric: str = "accuracy"        # accuracy | auc
    seed: int = 0
    num_splits: int = 10
    symmetrize: bool = False
    dropedge_rescale: bool = False

    def validate(self) -> None:
        if self.backbone not in ("gcn", "sage", "gat_sep"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.mode not in ("baseline", "ecg"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tau not in EMBEDDING_SOURCES:
            raise ValueError(f"unknown embedding source {self.tau!r}")
        if self.metric not in ("accuracy", "auc"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0.0 <= self.p_de <= 1.0:
            raise ValueError("p_de must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be at least 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kwargs) -> "RunConfig":
        d = self.to_dict()
        d.update(kwargs)
        cfg = RunConfig(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _coerce(name: str, raw: str, target_type):
    if target_type is bool:
        try:
            return _BOOL_WORDS[raw.strip().lower()]
        except KeyError:
            raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        return target_type(raw.strip())
    except ValueError:
        raise ValueError(f"config key {name}: cannot parse {raw!r} as {target_type.__name__}")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a flat ``key=value`` file ('#' comments), then apply overrides."""
    field_types = {f.name: type(getattr(RunConfig(), f.name))
                   for f in fields(RunConfig)}
    data: dict = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{i}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in field_types:
            raise ValueError(f"{path}:{i}: unknown config key {key!r}")
        data[key] = _coerce(key, raw, field_types[key])
    if overrides:
        data.update(overrides)
    return RunConfig.from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    lines = [f"{k}={v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class SweepGrid:
    """The hyperparameter lattice; defaults match the tuned search space."""

    backbones: list[str] = field(default_factory=lambda: ["gcn", "sage", "gat_sep"])
    taus: list[str] = field(default_factory=lambda: list(GRID_TAUS))
    ks: list[int] = field(default_factory=lambda: list(GRID_KS))
    p_des: list[float] = field(default_factory=lambda: list(GRID_P_DES))
    depths: list[int] = field(default_factory=lambda: list(GRID_DEPTHS))
    widths: list[int] = field(default_factory=lambda: list(GRID_WIDTHS))

    def cells(self, base: RunConfig) -> list[RunConfig]:
        """All baseline and rewired configurations over the lattice."""
        out = []
        for backbone in self.backbones:
            for depth in self.depths:
                for width in self.widths:
                    out.append(base.replace(backbone=backbone, mode="baseline",
                                            depth=depth, width=width))
                    for tau in self.taus:
                        for k in self.ks:
                            for p_de in self.p_des:
                                out.append(base.replace(
                                    backbone=backbone, mode="ecg", tau=tau,
                                    k=k, p_de=p_de, depth=depth, width=width))
        return out
