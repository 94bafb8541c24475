"""Run configuration: one key=value text file covering the model switches
plus optimizer, data and output settings. Unknown keys are rejected so a
typo cannot silently fall back to a default.
"""
from __future__ import annotations

from .model import ModelConfig

_RUN_INT = {"steps": 300, "batch_size": 4, "train_seed": 0}
_RUN_FLOAT = {"base_lr": 0.01, "momentum": 0.9, "threshold": 0.5}
_RUN_STR = {"train_manifest": "", "eval_manifest": "", "aggregate": "per-image"}
_RUN_BOOL = {"augment": True, "overlays": False}


class RunConfig:
    """ModelConfig plus the training/evaluation knobs around it."""

    def __init__(self, model: ModelConfig | None = None, **kwargs):
        self.model = model if model is not None else ModelConfig()
        for table in (_RUN_INT, _RUN_FLOAT, _RUN_STR, _RUN_BOOL):
            for key, default in table.items():
                setattr(self, key, kwargs.pop(key, default))
        if kwargs:
            raise ValueError(f"unknown run config keys {sorted(kwargs)}")
        self.validate()

    def validate(self) -> None:
        if self.steps <= 0:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.aggregate not in ("per-image", "pooled"):
            raise ValueError(f"unknown aggregate mode {self.aggregate!r}")

    def to_text(self) -> str:
        lines = ["# model"]
        lines.extend(self.model.to_lines())
        lines.append("# run")
        for key in _RUN_INT:
            lines.append(f"{key}={getattr(self, key)}")
        for key in _RUN_FLOAT:
            lines.append(f"{key}={getattr(self, key):.17g}")
        for key in _RUN_STR:
            lines.append(f"{key}={getattr(self, key)}")
        for key in _RUN_BOOL:
            lines.append(f"{key}={'true' if getattr(self, key) else 'false'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        run_kwargs = {}
        model_lines = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in _RUN_INT:
                run_kwargs[key] = int(value)
            elif key in _RUN_FLOAT:
                run_kwargs[key] = float(value)
            elif key in _RUN_STR:
                run_kwargs[key] = value
            elif key in _RUN_BOOL:
                if value not in ("true", "false"):
                    raise ValueError(f"boolean key {key} must be true/false, got {value!r}")
                run_kwargs[key] = value == "true"
            else:
                model_lines.append(line)
        return cls(model=ModelConfig.from_lines(model_lines), **run_kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())
