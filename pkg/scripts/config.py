# scripts/config.py
"""
Run configuration.

Config files are plain `key=value` lines; `#` starts a comment. Command-line
flags override file values. Every command writes the effective configuration
back out as config.txt in its output directory.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .ce import LossWeights
from .episodes import DISTRACTOR_MODES
from .errors import ConfigError
from .lps import LpsConfig
from .numeric import DEFAULT_EPS

FUSIONS = ("avg", "v1", "v2", "v3", "v4", "v5")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = Field(0, description="master seed; data, LPS and init streams are split from it")
    fold: int = Field(0, ge=0, le=3, description="held-out class fold")
    k: int = Field(1, ge=1, description="shots per evaluation episode")
    total_steps: int = Field(2000, ge=1, description="training episodes (one per step)")
    base_lr: float = Field(0.01, gt=0.0, allow_inf_nan=False, description="initial SGD learning rate")
    delta: float = Field(0.65, gt=0.0, le=1.0, description="LPS similarity threshold")
    sigma: Optional[int] = Field(None, ge=1, description="LPS count threshold (default max(2, ceil(0.01*hw)))")
    eps: float = Field(DEFAULT_EPS, gt=0.0, description="min-max normalization epsilon")
    w_ce: float = Field(0.1, ge=0.0, allow_inf_nan=False, description="contrastive-enhancement loss weight")
    w_aux: float = Field(1.0, ge=0.0, allow_inf_nan=False, description="multi-scale auxiliary loss weight")
    ce_enabled: bool = Field(True, description="run the contrastive-enhancement path at all")
    episode_count: int = Field(200, ge=1, description="evaluation episodes per test class")
    distractors: str = Field("phase", description="distractor pool: phase or any other class")
    fusion: str = Field("avg", description="K-shot fusion: avg or v1..v5")
    precision: str = Field("f32", description="f32 or f64")
    per_episode_miou: bool = Field(False, description="average per-episode IoUs instead of pooling")
    threads: int = Field(1, ge=1, description="torch intra-op threads")
    log_every: int = Field(100, ge=1, description="training progress log interval")
    out: str = Field("runs/default", description="output directory")

    @field_validator("fusion")
    @classmethod
    def _fusion(cls, v: str) -> str:
        v = v.replace("-", "")
        if v not in FUSIONS:
            raise ValueError(f"must be one of {', '.join(FUSIONS)}")
        return v

    @field_validator("distractors")
    @classmethod
    def _distractors(cls, v: str) -> str:
        if v not in DISTRACTOR_MODES:
            raise ValueError(f"must be one of {', '.join(DISTRACTOR_MODES)}")
        return v

    @field_validator("precision")
    @classmethod
    def _precision(cls, v: str) -> str:
        if v not in ("f32", "f64"):
            raise ValueError("must be f32 or f64")
        return v

    @property
    def weights(self) -> LossWeights:
        return LossWeights(w_ce=self.w_ce, w_aux=self.w_aux, ce_enabled=self.ce_enabled)

    def lps_config(self, seed: Optional[int] = None) -> LpsConfig:
        return LpsConfig(delta=self.delta, sigma=self.sigma, seed=self.seed if seed is None else seed)

    def to_text(self) -> str:
        lines = ["# effective configuration"]
        for key, value in sorted(self.model_dump().items()):
            lines.append(f"{key}={'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def write(self, directory: Union[str, Path]) -> Path:
        p = Path(directory) / "config.txt"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_text(), encoding="utf-8")
        return p


def parse_config_text(text: str) -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def build_config(file: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """File values first, then non-None overrides; validation errors name every field."""
    values: Dict[str, Any] = {}
    if file:
        try:
            text = Path(file).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {file}: {e}") from e
        values.update(parse_config_text(text))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    if values.get("sigma") == "":
        values["sigma"] = None
    try:
        return RunConfig(**values)
    except ValidationError as e:
        fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid configuration: {details}", fields=fields) from e
