"""Single-file checkpoints: a JSON manifest line plus a raw float64 blob.

The manifest names every tensor with its shape and byte range; ranges must
tile the blob exactly, which the loader verifies. Alongside parameters the
file carries optimizer moments, prototypes, the RNG state, and the epoch
counter, so a resumed run is bit-identical to an uninterrupted one. No
serialization framework, trivially portable.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from manifold_glue import prototypes as pt
from manifold_glue.config import config_hash
from manifold_glue.pretrain import AdamState, ModelState, PretrainConfig

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint",
           "inspect_checkpoint", "FORMAT_VERSION"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_table(state: ModelState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, val in state.params.items():
        tensors[f"param.{name}"] = val
    for name, val in state.adam.m.items():
        tensors[f"adam.m.{name}"] = val
    for name, val in state.adam.v.items():
        tensors[f"adam.v.{name}"] = val
    for dom, proto in state.prototypes.items():
        tensors[f"proto.{dom}.z"] = proto.z
        tensors[f"proto.{dom}.log_g"] = proto.log_g
    return tensors


def save_checkpoint(path: str | Path, state: ModelState) -> None:
    tensors = _tensor_table(state)
    directory = {}
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        directory[name] = {"shape": list(arr.shape), "offset": offset,
                           "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(state.config),
        "config_hash": config_hash(asdict(state.config)),
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "rng_state": state.rng_state,
        "prototype_counts": {d: p.update_count for d, p in state.prototypes.items()},
        "domain_meta": state.domain_meta,
        "tensors": directory,
    }
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for chunk in chunks:
            fh.write(chunk)


def _read_manifest(path: Path) -> tuple[dict, bytes]:
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: no manifest line found")
    try:
        manifest = json.loads(raw[:newline].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"{path}: corrupted manifest at byte {exc.pos}: {exc.msg}") from exc
    return manifest, raw[newline + 1:]


def _check_tiling(directory: dict, blob_len: int, path: Path) -> None:
    spans = sorted((meta["offset"], meta["length"], name)
                   for name, meta in directory.items())
    cursor = 0
    for offset, length, name in spans:
        if offset != cursor:
            raise CheckpointError(
                f"{path}: tensor {name} at byte {offset}, expected {cursor} (gap or overlap)")
        cursor = offset + length
    if cursor != blob_len:
        raise CheckpointError(
            f"{path}: blob is {blob_len} bytes, manifest expects {cursor} (truncated?)")


def load_checkpoint(path: str | Path) -> ModelState:
    path = Path(path)
    manifest, blob = _read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version "
                              f"{manifest.get('format_version')!r}")
    directory = manifest["tensors"]
    _check_tiling(directory, len(blob), path)

    def tensor(name: str) -> np.ndarray:
        meta = directory[name]
        arr = np.frombuffer(blob, dtype="<f8", count=meta["length"] // 8,
                            offset=meta["offset"])
        return arr.reshape(meta["shape"]).copy()

    params = {}
    adam = AdamState(step=manifest["adam_step"])
    protos = {}
    for name in sorted(directory):
        if name.startswith("param."):
            params[name[len("param."):]] = tensor(name)
        elif name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = tensor(name)
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = tensor(name)
    for dom, count in manifest["prototype_counts"].items():
        protos[dom] = pt.RiemannianPrototype(
            domain=dom, z=tensor(f"proto.{dom}.z"),
            log_g=tensor(f"proto.{dom}.log_g"), update_count=count)
    return ModelState(
        config=PretrainConfig(**manifest["config"]),
        params=params,
        prototypes=protos,
        adam=adam,
        epoch=manifest["epoch"],
        rng_state=manifest["rng_state"],
        domain_meta=manifest.get("domain_meta", {}),
    )


def inspect_checkpoint(path: str | Path) -> dict:
    """Manifest summary without materializing tensors."""
    path = Path(path)
    manifest, blob = _read_manifest(path)
    _check_tiling(manifest["tensors"], len(blob), path)
    return {
        "format_version": manifest["format_version"],
        "epoch": manifest["epoch"],
        "adam_step": manifest["adam_step"],
        "config_hash": manifest["config_hash"],
        "domains": sorted(manifest["prototype_counts"]),
        "tensors": {name: meta["shape"] for name, meta in
                    sorted(manifest["tensors"].items())},
    }
