"""Run configuration: ini-style files with [section] key = value, overridable
from the command line, echoed verbatim into the output directory so a run is
reproducible from its artifacts alone.

Seed resolution order: --seed flag, [run] seed, SHIFTADD_SEED environment
variable, default 0.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .model import BlockConfig, ModelConfig, MoeConfig, TrainConfig
from .quantize import QuantConfig

ENV_SEED = "SHIFTADD_SEED"


class ConfigError(ValueError):
    """Unusable run configuration."""


@dataclass
class RunSpec:
    model: ModelConfig
    train: TrainConfig
    quant: QuantConfig
    moe: MoeConfig
    data: SyntheticSpec
    seed: int = 0
    out: str = "runs/out"
    dataset_path: str = ""
    cost_table_path: str = ""
    raw: configparser.ConfigParser = field(default=None, repr=False)


DEFAULTS = {
    "model": {
        "d": "32", "heads": "4", "blocks": "2", "mlp_ratio": "4.0",
        "patch": "4", "img": "16", "classes": "5", "channels": "3",
        "attn_mode": "softmax", "mlp_mode": "dense", "attn_linear_mode": "dense",
        "exempt_last": "true",
    },
    "train": {
        "steps": "1000", "batch_size": "32", "lr": "0.05", "momentum": "0.9",
        "lambda": "0.01", "log_every": "1", "clip_norm": "5.0",
    },
    "quant": {"p_min": "-15", "p_max": "15", "scale_mode": "per-matrix"},
    "moe": {"sigma": "0.1", "lat": "3,1"},
    "data": {
        "classes": "5", "samples_per_class": "250", "noise_std": "0.45",
        "img": "16", "channels": "3", "seed": "1000", "dataset": "",
    },
    "cost": {"table": ""},
    "run": {"seed": "", "out": "runs/out"},
}


def _base_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_dict(DEFAULTS)
    return parser


def apply_overrides(parser: configparser.ConfigParser, overrides) -> None:
    """overrides are strings section.key=value."""
    for item in overrides or ():
        try:
            dotted, value = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
        except ValueError:
            raise ConfigError(f"override {item!r} is not section.key=value") from None
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), key.strip(), value.strip())


def load_run_spec(path=None, overrides=(), seed_flag=None) -> RunSpec:
    parser = _base_parser()
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file unreadable: {path}")
    apply_overrides(parser, overrides)

    try:
        m = parser["model"]
        blocks = []
        n_blocks = m.getint("blocks")
        if n_blocks < 1:
            raise ConfigError("model.blocks must be at least 1")
        for i in range(n_blocks):
            blocks.append(BlockConfig(
                d=m.getint("d"), h=m.getint("heads"),
                mlp_ratio=m.getfloat("mlp_ratio"),
                attn_mode=m.get("attn_mode"), mlp_mode=m.get("mlp_mode"),
                attn_linear_mode=m.get("attn_linear_mode"),
                exempt=m.getboolean("exempt_last") and i == n_blocks - 1))

        if seed_flag is not None:
            seed = int(seed_flag)
        elif parser.get("run", "seed"):
            seed = parser.getint("run", "seed")
        elif os.environ.get(ENV_SEED):
            seed = int(os.environ[ENV_SEED])
        else:
            seed = 0

        model_cfg = ModelConfig(
            blocks=blocks, patch=m.getint("patch"), img=m.getint("img"),
            classes=m.getint("classes"), channels=m.getint("channels"), seed=seed)

        t = parser["train"]
        train_cfg = TrainConfig(
            steps=t.getint("steps"), batch_size=t.getint("batch_size"),
            lr=t.getfloat("lr"), momentum=t.getfloat("momentum"),
            lam=t.getfloat("lambda"), seed=seed, log_every=t.getint("log_every"),
            clip_norm=t.getfloat("clip_norm"))

        q = parser["quant"]
        quant_cfg = QuantConfig(p_min=q.getint("p_min"), p_max=q.getint("p_max"),
                                scale_mode=q.get("scale_mode"))

        mo = parser["moe"]
        lat = tuple(float(v) for v in mo.get("lat").split(","))
        moe_cfg = MoeConfig(sigma=mo.getfloat("sigma"), lam=train_cfg.lam, lat=lat)

        d = parser["data"]
        data_spec = SyntheticSpec(
            img=d.getint("img"), classes=d.getint("classes"),
            samples_per_class=d.getint("samples_per_class"),
            seed=d.getint("seed"), channels=d.getint("channels"),
            noise_std=d.getfloat("noise_std"))

        return RunSpec(model=model_cfg, train=train_cfg, quant=quant_cfg,
                       moe=moe_cfg, data=data_spec, seed=seed,
                       out=parser.get("run", "out"),
                       dataset_path=d.get("dataset"),
                       cost_table_path=parser.get("cost", "table"),
                       raw=parser)
    except ConfigError:
        raise
    except (ValueError, KeyError, configparser.Error) as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc


def echo_resolved(spec: RunSpec, out_dir) -> None:
    """Write the fully resolved configuration next to the run outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec.raw.set("run", "seed", str(spec.seed))
    with open(out_dir / "config_resolved.cfg", "w") as fh:
        spec.raw.write(fh)
