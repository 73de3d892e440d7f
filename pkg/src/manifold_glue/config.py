"""Run configuration: canonical JSON, hashing, suite manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from manifold_glue.adapt import AdaptConfig
from manifold_glue.data import DataError, DomainDataset, load_jsonl
from manifold_glue.pretrain import PretrainConfig

__all__ = ["ConfigError", "RunConfig", "canonical_json", "config_hash",
           "load_run_config", "load_suite", "write_suite_manifest"]


class ConfigError(ValueError):
    pass


def canonical_json(obj) -> str:
    """Deterministic serialization: sorted keys, compact separators, repr
    floats (shortest round-trip), so hashes agree across platforms."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _build_section(cls, section: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key {sorted(unknown)[0]!r}")
    return cls(**section)


@dataclass
class RunConfig:
    """Top-level JSON config for the CLI: dataset sources plus the
    pre-training and adaptation sections."""

    out_dir: str
    suite: str | None = None
    datasets: dict[str, str] = field(default_factory=dict)
    tasks: dict[str, str] = field(default_factory=dict)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    @classmethod
    def from_obj(cls, obj: dict) -> "RunConfig":
        allowed = {"out_dir", "suite", "datasets", "tasks", "pretrain", "adapt"}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"run config: unknown key {sorted(unknown)[0]!r}")
        if "out_dir" not in obj:
            raise ConfigError("run config: missing key 'out_dir'")
        if not obj.get("suite") and not obj.get("datasets"):
            raise ConfigError("run config: need 'suite' or 'datasets'")
        return cls(
            out_dir=str(obj["out_dir"]),
            suite=obj.get("suite"),
            datasets=dict(obj.get("datasets", {})),
            tasks=dict(obj.get("tasks", {})),
            pretrain=_build_section(PretrainConfig, obj.get("pretrain", {}),
                                    "pretrain config"),
            adapt=_build_section(AdaptConfig, obj.get("adapt", {}), "adapt config"),
        )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at position {exc.pos}") from exc
    cfg = RunConfig.from_obj(obj)
    cfg.pretrain.validate()
    cfg.adapt.validate()
    return cfg


def write_suite_manifest(path: str | Path, seed: int,
                         datasets: list[DomainDataset],
                         files: dict[str, str]) -> None:
    manifest = {
        "seed": seed,
        "domains": [{
            "name": ds.name,
            "path": files[ds.name],
            "task": ds.task,
            "classes": ds.num_classes,
            "feature_dim": ds.feature_dim,
        } for ds in datasets],
    }
    Path(path).write_text(canonical_json(manifest) + "\n", encoding="utf-8")


def load_suite(path: str | Path) -> list[DomainDataset]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"suite manifest not found: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    out = []
    for dom in obj["domains"]:
        ds_path = Path(dom["path"])
        if not ds_path.is_absolute():
            ds_path = path.parent / ds_path
        if not ds_path.exists():
            raise DataError(f"dataset file not found: {ds_path}")
        out.append(load_jsonl(ds_path, task=dom.get("task", "graph")))
    return out


def resolve_datasets(cfg: RunConfig, config_dir: Path) -> list[DomainDataset]:
    """Datasets from the suite manifest or from explicit per-domain paths."""
    if cfg.suite:
        suite_path = Path(cfg.suite)
        if not suite_path.is_absolute():
            suite_path = config_dir / suite_path
        return load_suite(suite_path)
    out = []
    for name, rel in sorted(cfg.datasets.items()):
        ds_path = Path(rel)
        if not ds_path.is_absolute():
            ds_path = config_dir / ds_path
        if not ds_path.exists():
            raise DataError(f"dataset file not found: {ds_path}")
        ds = load_jsonl(ds_path, task=cfg.tasks.get(name, "graph"))
        out.append(ds)
    return out
