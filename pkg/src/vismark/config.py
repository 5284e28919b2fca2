"""Run configuration: one frozen record of every knob a task run obeys.

Values resolve in precedence order — command-line flags over a config file
over the built-in defaults — and the fully-resolved record is echoed into
every report for reproducibility.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from vismark.markers import MarkerSpec, default_marker
from vismark.scoring import PromptTemplate
from vismark.tasks import DEFAULT_DISTRACTOR_COUNT, DEFAULT_PCK_ALPHA
from vismark.transport import DEFAULT_TAU

CONFIG_VERSION = 1

DECODE_CHOICES = ("argmax", "hungarian")

#: Slot names a prompt template may use ({part} = keypoint, {animal} = class).
TEMPLATE_SLOTS = ("part", "animal")


class ConfigError(ValueError):
    """A configuration value or file that cannot be used."""


@dataclass(frozen=True)
class RunConfig:
    """All task-run knobs, with the standard defaults baked in.

    variants and template default to None, meaning each task picks its own
    default (one marked variant for keypoint tasks, the three-variant
    ensemble for referring expressions).
    """

    backends: tuple[str, ...] = ("synthetic",)
    marker: MarkerSpec = field(default_factory=default_marker)
    tau: float = DEFAULT_TAU
    grid_m: int = 30
    alpha: float = DEFAULT_PCK_ALPHA
    distractors: int = DEFAULT_DISTRACTOR_COUNT
    seed: int = 0
    out_dir: str = "."
    decode: str = "argmax"
    variants: int | None = None
    template: str | None = None
    mean_subtract: bool = True
    include_query: bool = False
    jobs: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "backends", tuple(self.backends))
        if not self.backends or not all(isinstance(b, str) and b for b in self.backends):
            raise ConfigError("backends must be a non-empty list of non-empty strings")
        if not isinstance(self.marker, MarkerSpec):
            raise ConfigError(f"marker must be a MarkerSpec, got {type(self.marker).__name__}")
        if not (isinstance(self.tau, (int, float)) and math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError(f"tau must be a positive finite number, got {self.tau!r}")
        if not (isinstance(self.grid_m, int) and self.grid_m >= 1):
            raise ConfigError(f"grid_m must be an integer >= 1, got {self.grid_m!r}")
        if not (isinstance(self.alpha, (int, float)) and 0 < self.alpha < 1):
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha!r}")
        if not (isinstance(self.distractors, int) and self.distractors >= 0):
            raise ConfigError(f"distractors must be an integer >= 0, got {self.distractors!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.out_dir, str) or not self.out_dir:
            raise ConfigError(f"out_dir must be a non-empty string, got {self.out_dir!r}")
        if self.decode not in DECODE_CHOICES:
            raise ConfigError(f"decode must be one of {DECODE_CHOICES}, got {self.decode!r}")
        if self.variants not in (None, 1, 3):
            raise ConfigError(f"variants must be 1 or 3, got {self.variants!r}")
        if self.template is not None:
            if not isinstance(self.template, str) or not self.template:
                raise ConfigError(f"template must be a non-empty string, got {self.template!r}")
            unknown = [s for s in PromptTemplate(self.template).slots if s not in TEMPLATE_SLOTS]
            if unknown:
                raise ConfigError(
                    f"template uses unknown slot(s) {unknown}; available: {list(TEMPLATE_SLOTS)}"
                )
        if not isinstance(self.mean_subtract, bool):
            raise ConfigError(f"mean_subtract must be a boolean, got {self.mean_subtract!r}")
        if not isinstance(self.include_query, bool):
            raise ConfigError(f"include_query must be a boolean, got {self.include_query!r}")
        if self.jobs is not None and (not isinstance(self.jobs, int) or self.jobs < 1):
            raise ConfigError(f"jobs must be an integer >= 1, got {self.jobs!r}")

    def variants_for(self, task: str) -> int:
        """The effective variant count: explicit setting, else the task default."""
        if self.variants is not None:
            return self.variants
        return 3 if task == "rec" else 1

    def to_json(self) -> dict[str, Any]:
        return {
            "config_version": CONFIG_VERSION,
            "backends": list(self.backends),
            "marker": self.marker.to_json(),
            "tau": self.tau,
            "grid_m": self.grid_m,
            "alpha": self.alpha,
            "distractors": self.distractors,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "decode": self.decode,
            "variants": self.variants,
            "template": self.template,
            "mean_subtract": self.mean_subtract,
            "include_query": self.include_query,
            "jobs": self.jobs,
        }

    @classmethod
    def from_json(cls, data: Any) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
        payload = dict(data)
        version = payload.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {version!r}; this build reads {CONFIG_VERSION}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {unknown}")
        if "backends" in payload:
            value = payload["backends"]
            if not isinstance(value, list):
                raise ConfigError(f"backends must be a list, got {value!r}")
            payload["backends"] = tuple(value)
        if "marker" in payload:
            try:
                payload["marker"] = MarkerSpec.from_json(payload["marker"])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad marker: {exc}") from exc
        return cls(**payload)


def load_run_config(path: str | Path) -> RunConfig:
    """Read a config file (JSON mirroring RunConfig.to_json)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_json(data)


def merge_overrides(base: RunConfig, **overrides: Any) -> RunConfig:
    """A copy of base with every non-None override applied."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    return replace(base, **updates) if updates else base
