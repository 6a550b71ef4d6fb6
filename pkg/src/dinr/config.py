"""Experiment configuration: YAML file, pydantic schema, seed derivation.

Validation errors carry the dotted field path and, when the offending key is
present in the file, its line number.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from .phantom import PhantomConfig
from .solver import METHODS, ReconConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhantomSection(_Strict):
    image_size: int = Field(64, ge=8)
    n_slices: int = Field(2, ge=1)
    seed: int = 1
    aggregate_count: tuple[int, int] = (10, 14)
    pore_count: tuple[int, int] = (12, 20)

    def build(self) -> PhantomConfig:
        return PhantomConfig(**self.model_dump())


class ExperimentSection(_Strict):
    views: list[int] = Field(default_factory=lambda: [8, 16, 32])
    methods: list[Literal["fbp", "inr", "dd3ip", "dinr"]] = Field(
        default_factory=lambda: ["fbp", "inr", "dinr"])
    noise: float = Field(0.01, ge=0)
    sinogram: Optional[str] = None
    roi_anchor: Optional[tuple[int, int]] = None

    @field_validator("views")
    @classmethod
    def _views(cls, v):
        if not v:
            raise ValueError("at least one view count is required")
        if any(n < 1 for n in v):
            raise ValueError("view counts must be >= 1")
        return v

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        if not v:
            raise ValueError("at least one method is required")
        return v


class PretrainSection(_Strict):
    n_images: int = Field(512, ge=1)
    image_size: int = Field(64, ge=8)
    epochs: int = Field(20, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    crop: Optional[int] = 32
    timesteps: int = Field(1000, ge=2)
    schedule: Literal["linear-beta", "cosine"] = "linear-beta"
    channels: tuple[int, ...] = (1, 16, 32, 32, 16, 1)
    seed: int = 0


class SweepSection(_Strict):
    views: int = 8
    method: Literal["fbp", "inr", "dd3ip", "dinr"] = "dinr"
    param: Literal["omega", "rho_ratio"] = "omega"
    values: list[float] = Field(default_factory=lambda: [0.002, 0.02, 0.2])


class ExperimentSpec(_Strict):
    seed: int = 0
    out: str = "runs/experiment"
    weights: Optional[str] = None
    phantom: PhantomSection = Field(default_factory=PhantomSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    recon: dict[str, Any] = Field(default_factory=dict)
    methods: dict[str, dict[str, Any]] = Field(default_factory=dict)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    sweep: Optional[SweepSection] = None

    @field_validator("recon")
    @classmethod
    def _recon(cls, v):
        _check_recon_keys(v)
        ReconConfig(**{**v, "method": "fbp"})
        return v

    @field_validator("methods")
    @classmethod
    def _per_method(cls, v, info: ValidationInfo):
        shared = info.data.get("recon", {})
        for name, over in v.items():
            if name not in METHODS:
                raise ValueError(f"unknown method {name!r}")
            _check_recon_keys(over)
            try:
                ReconConfig(**{**shared, **over, "method": name})
            except ValueError as exc:
                raise ValueError(f"{name}: {exc}") from None
        return v

    def recon_config(self, method: str, views: int, **extra) -> ReconConfig:
        """Shared + per-method settings, with seeds derived from the master seed."""
        kw = {**self.recon, **self.methods.get(method, {}), **extra}
        kw.setdefault("noise_seed", cell_seed(self.seed, views, method))
        kw.setdefault("init_seed", cell_seed(self.seed, 0, "inr-init"))
        return ReconConfig(method=method, **kw)


_RECON_FIELDS = set(ReconConfig.__dataclass_fields__) - {"method"}


def _check_recon_keys(d: dict) -> None:
    bad = sorted(set(d) - _RECON_FIELDS)
    if bad:
        raise ValueError(f"unknown reconstruction setting(s): {', '.join(bad)}")


def cell_seed(master: int, views: int, tag: str) -> int:
    """sha256("master/views/tag") folded to 32 bits."""
    digest = hashlib.sha256(f"{master}/{views}/{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def measurement_seed(master: int, views: int) -> int:
    # shared by every method at a given view count so all see the same noisy sinogram
    return cell_seed(master, views, "measurement")


def _line_index(text: str) -> dict[tuple, int]:
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (i,)
                lines[p] = v.start_mark.line + 1
                walk(v, p)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, ())
    return lines


def _describe(exc: ValidationError, text: str, source: str) -> str:
    lines = _line_index(text)
    msgs = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        path = ".".join(str(p) for p in loc) or "<root>"
        line = None
        for n in range(len(loc), 0, -1):
            if loc[:n] in lines:
                line = lines[loc[:n]]
                break
        where = f"{source}:{line}" if line else source
        msgs.append(f"{where}: {path}: {err['msg']}")
    return "\n".join(msgs)


def parse_config(text: str, source: str = "<config>") -> ExperimentSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc, text, source)) from None


def load_config(path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec.model_dump(mode="json"), sort_keys=True)
