"""Layered run configuration: task preset < config file < CLI overrides.

The two task presets carry the model hyper-parameters (MI: averaging window
25 shift 5, head width 64, feed-forward 40; ERP: window 5 shift 2, head
width 10, feed-forward 20; both: embedding 20, frame 25, depth 6, 8 heads)
plus desk-scale training defaults. Every resolved run is echoed to
``run_config.json`` next to its outputs so it can be reproduced exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

from .data_model import TaskTemplateSpec, task_template
from .errors import ConfigError
from .model import FPEConfig, ModelConfig, TransformerConfig
from .preprocessing import PreprocessConfig
from .training import TrainConfig

PRESETS: dict[str, dict] = {
    "mi": {
        "fpe": {"embed_dim": 20, "frame_window": 25, "frame_stride": 25,
                "avg_window": 25, "avg_shift": 5, "token_dim": 40, "mlp_hidden": 40},
        "transformer": {"depth": 6, "heads": 8, "dim_head": 64, "dim_mlp": 40,
                        "n_classes": 2, "final_norm": True},
        "train": {"epochs": 30, "batch_size": 64, "lr_init": 2.5e-4, "lr_max": 5e-4,
                  "weight_decay": 0.01, "beta1": 0.9, "beta2": 0.999,
                  "eps_adam": 1e-8, "balanced_sampling": True, "seed": 0},
        "preprocess": {"band_lo_hz": 4.0, "band_hi_hz": 30.0,
                       "target_rate_hz": 256.0, "unit_scale": 1.0},
    },
    "erp": {
        "fpe": {"embed_dim": 20, "frame_window": 25, "frame_stride": 25,
                "avg_window": 5, "avg_shift": 2, "token_dim": 40, "mlp_hidden": 40},
        "transformer": {"depth": 6, "heads": 8, "dim_head": 10, "dim_mlp": 20,
                        "n_classes": 2, "final_norm": True},
        "train": {"epochs": 30, "batch_size": 64, "lr_init": 2.5e-4, "lr_max": 5e-4,
                  "weight_decay": 0.01, "beta1": 0.9, "beta2": 0.999,
                  "eps_adam": 1e-8, "balanced_sampling": True, "seed": 0},
        "preprocess": {"band_lo_hz": 1.0, "band_hi_hz": 30.0,
                       "target_rate_hz": 256.0, "unit_scale": 1.0},
    },
}

_SECTIONS = ("fpe", "transformer", "train", "preprocess")
_TOP_KEYS = set(_SECTIONS) | {"task", "seed", "threads", "template"}


@dataclass(frozen=True)
class RunConfig:
    task: str
    fpe: FPEConfig
    transformer: TransformerConfig
    train: TrainConfig
    preprocess: PreprocessConfig
    template: TaskTemplateSpec
    seed: int = 0
    threads: int = 1

    def model_config(self, per_channel_patches: bool = False) -> ModelConfig:
        return ModelConfig(
            task=self.task,
            template_channels=self.template.target_channels,
            template_len=self.template.template_len,
            fpe=self.fpe, transformer=self.transformer,
            per_channel_patches=per_channel_patches,
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "fpe": asdict(self.fpe),
            "transformer": asdict(self.transformer),
            "train": asdict(self.train),
            "preprocess": asdict(self.preprocess),
            "template": {"channels": list(self.template.target_channels),
                         "len": self.template.template_len},
            "seed": self.seed,
            "threads": self.threads,
        }


def _merge_section(section: str, preset: dict, file_part: dict | None,
                   overrides: dict | None) -> dict:
    merged = dict(preset)
    for source_name, source in (("config file", file_part), ("override", overrides)):
        if not source:
            continue
        for key, value in source.items():
            if key not in merged:
                raise ConfigError(f"unknown key {section}.{key!r} in {source_name}")
            merged[key] = value
    return merged


def load_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config file keys {sorted(unknown)}")
    return doc


def resolve_config(task: str | None = None, config_file: str | dict | None = None,
                   overrides: dict | None = None, seed: int | None = None,
                   threads: int | None = None) -> RunConfig:
    """Merge preset, config file, and override dict; precedence rightmost wins.

    ``overrides`` maps section names to partial dicts, e.g.
    ``{"transformer": {"depth": 2}}``. Unknown keys fail with their path.
    """
    if isinstance(config_file, str):
        file_doc = load_config_file(config_file)
    else:
        file_doc = dict(config_file or {})
        unknown = set(file_doc) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown override keys {sorted(unknown)}")

    task = task or overrides.get("task") or file_doc.get("task")
    if task is None:
        raise ConfigError("no task given (and none in the config file)")
    task = str(task).lower()
    if task not in PRESETS:
        raise ConfigError(f"unknown task {task!r}, expected one of {sorted(PRESETS)}")
    preset = PRESETS[task]

    sections = {
        s: _merge_section(s, preset[s], file_doc.get(s), overrides.get(s))
        for s in _SECTIONS
    }

    template = task_template(task)
    tmpl_doc = overrides.get("template") or file_doc.get("template")
    if tmpl_doc:
        unknown = set(tmpl_doc) - {"channels", "len"}
        if unknown:
            raise ConfigError(f"unknown template keys {sorted(unknown)}")
        template = TaskTemplateSpec(
            task,
            tuple(tmpl_doc.get("channels", template.target_channels)),
            int(tmpl_doc.get("len", template.template_len)),
        )

    if seed is None:
        seed = overrides.get("seed", file_doc.get("seed", 0))
    if threads is None:
        threads = overrides.get("threads", file_doc.get("threads", 1))
    train_kwargs = dict(sections["train"])
    train_kwargs["seed"] = int(seed)

    return RunConfig(
        task=task,
        fpe=FPEConfig(**sections["fpe"]),
        transformer=TransformerConfig(**sections["transformer"]),
        train=TrainConfig(**train_kwargs),
        preprocess=PreprocessConfig(**sections["preprocess"]),
        template=template,
        seed=int(seed),
        threads=int(threads),
    )


def echo_config(cfg: RunConfig, out_dir: str, command: str, args: dict) -> str:
    """Write the fully resolved configuration next to the run's outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_config.json")
    doc = {"command": command, "args": args, "resolved": cfg.to_dict()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return path
