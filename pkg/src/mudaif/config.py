"""Run-configuration document: JSON schema validation and canonical form.

The document is validated before any work happens; unknown keys are rejected
and every failure names the exact path into the document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .model import ModelConfig
from .training import LossWeights, TrainingPhase


class SchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# field name -> (type, required, default)
_MODEL_FIELDS = {
    "embed_dim": (int, True, None),
    "n_layers": (int, True, None),
    "n_heads": (int, True, None),
    "vocab_size": (int, False, 16),
    "max_seq_len": (int, True, None),
    "patch_size": (int, True, None),
    "conv_channels": (int, False, 0),
    "max_patch_grid": (int, False, 16),
    "fusion_mode": (str, False, "concat"),
    "vta_residual": (bool, False, False),
    "vta_positional": (bool, False, True),
    "lambda_pretrain": (float, False, 1.0),
    "lambda_task": (float, False, 1.0),
}
_PHASE_FIELDS = {
    "tag": (str, True, None),
    "manifest": (str, True, None),
    "split": (str, False, "train"),
    "epochs": (int, True, None),
    "batch_size": (int, True, None),
    "learning_rate": (float, False, 3e-4),
    "warmup_steps": (int, False, 100),
}
_WEIGHT_FIELDS = {
    "pretrain": (float, False, 1.0),
    "task": (float, False, 1.0),
}
_TOP_FIELDS = {"seed", "model", "loss_weights", "grad_clip", "phases"}


def _typed(path: str, value: Any, typ: type) -> Any:
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(path, f"expected number, got {type(value).__name__}")
        return float(value)
    if typ is int and isinstance(value, bool):
        raise SchemaError(path, "expected int, got bool")
    if not isinstance(value, typ):
        raise SchemaError(path, f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def _section(path: str, doc: Any, fields: dict) -> dict:
    if not isinstance(doc, dict):
        raise SchemaError(path, f"expected object, got {type(doc).__name__}")
    unknown = set(doc) - set(fields)
    if unknown:
        raise SchemaError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    out = {}
    for name, (typ, required, default) in fields.items():
        if name in doc:
            out[name] = _typed(f"{path}.{name}", doc[name], typ)
        elif required:
            raise SchemaError(f"{path}.{name}", "missing required key")
        else:
            out[name] = default
    return out


@dataclass
class RunConfig:
    seed: int
    model: dict
    loss_weights: LossWeights
    grad_clip: Optional[float]
    phases: list[TrainingPhase]

    def model_config(self, vocab_size: Optional[int] = None) -> ModelConfig:
        fields = dict(self.model)
        if vocab_size is not None:
            fields["vocab_size"] = vocab_size
        fields["lambda_pretrain"] = self.loss_weights.pretrain
        fields["lambda_task"] = self.loss_weights.task
        return ModelConfig(**fields)


def validate_run_config(doc: Any) -> RunConfig:
    if not isinstance(doc, dict):
        raise SchemaError("$", f"expected object, got {type(doc).__name__}")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise SchemaError(f"$.{sorted(unknown)[0]}", "unknown key")
    if "model" not in doc:
        raise SchemaError("$.model", "missing required key")
    if "phases" not in doc:
        raise SchemaError("$.phases", "missing required key")
    seed = _typed("$.seed", doc.get("seed", 0), int)
    model_fields = _section("$.model", doc["model"], _MODEL_FIELDS)
    weights = LossWeights(**_section("$.loss_weights", doc.get("loss_weights", {}),
                                     _WEIGHT_FIELDS))
    grad_clip = doc.get("grad_clip", 1.0)
    if grad_clip is not None:
        grad_clip = _typed("$.grad_clip", grad_clip, float)
    if not isinstance(doc["phases"], list):
        raise SchemaError("$.phases", "expected array")
    phases = [TrainingPhase(**_section(f"$.phases[{i}]", item, _PHASE_FIELDS))
              for i, item in enumerate(doc["phases"])]
    return RunConfig(seed=seed, model=model_fields, loss_weights=weights,
                     grad_clip=grad_clip, phases=phases)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return validate_run_config(doc)
