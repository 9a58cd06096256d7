"""Artifact formats: binary checkpoint + JSON manifest, curve CSV, metrics
JSON and plain matrix CSVs. Floats are written with 17 significant digits so
every value round-trips exactly."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import MODES as ATTENTION_MODES
from .attention import AttentionParams
from .centers import ClassCenters
from .model import ModelConfig, ModelParams
from .numeric import DTYPE

MAGIC = b"TC3L\x01"
HEADER_FIELDS = ("d_in", "c_f", "h_f", "w_f", "c_d", "k_classes", "hidden", "attention_reduction", "attention_mode")
CURVE_HEADER = "iter,epoch,ce,metric,total,lr"


class CheckpointError(ValueError):
    pass


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    attention_reduction: int
    attention_mode: str
    params: ModelParams
    centers: np.ndarray
    attention: AttentionParams


def _header_ints(ck: Checkpoint) -> list[int]:
    c = ck.model_cfg
    return [c.d_in, c.c_f, c.h_f, c.w_f, c.c_d, c.k_classes, c.hidden, ck.attention_reduction, ATTENTION_MODES.index(ck.attention_mode)]


def _sections(ck: Checkpoint):
    for name in ModelParams.names():
        yield name, getattr(ck.params, name)
    yield "centers", ck.centers
    for name in AttentionParams.names():
        yield name, getattr(ck.attention, name)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """``MAGIC``, header as little-endian int32, then every array as
    little-endian float64 in declaration order: model, centers, attention."""
    parts = [MAGIC, struct.pack("<%di" % len(HEADER_FIELDS), *_header_ints(ck))]
    for _, arr in _sections(ck):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def write_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    blob = checkpoint_bytes(ck)
    path.write_bytes(blob)
    manifest = {
        "format": "TC3L",
        "version": 1,
        "header": dict(zip(HEADER_FIELDS, _header_ints(ck))),
        "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in _sections(ck)],
        "sha256": hashlib.sha256(blob).hexdigest(),
        "bytes": len(blob),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_checkpoint(path, verify: bool = True) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    mp = manifest_path(path)
    if verify and mp.exists():
        expected = json.loads(mp.read_text())["sha256"]
        if hashlib.sha256(blob).hexdigest() != expected:
            raise CheckpointError(f"{path}: checksum does not match {mp.name}")
    off = len(MAGIC)
    n = len(HEADER_FIELDS)
    ints = struct.unpack_from("<%di" % n, blob, off)
    off += 4 * n
    h = dict(zip(HEADER_FIELDS, ints))
    cfg = ModelConfig(**{k: h[k] for k in ("d_in", "c_f", "h_f", "w_f", "c_d", "k_classes", "hidden")})
    if not 0 <= h["attention_mode"] < len(ATTENTION_MODES):
        raise CheckpointError(f"{path}: unknown attention mode {h['attention_mode']}")
    reduction = h["attention_reduction"]

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        if off + 8 * count > len(blob):
            raise CheckpointError(f"{path}: truncated")
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(DTYPE).reshape(shape)
        off += 8 * count
        return a

    params = ModelParams(**{n: take(s) for n, s in ModelParams.shapes(cfg).items()})
    centers = take((cfg.k_classes, cfg.c_d))
    attn = AttentionParams(**{n: take(s) for n, s in AttentionParams.shapes(cfg.c_d, reduction).items()})
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return Checkpoint(cfg, reduction, ATTENTION_MODES[h["attention_mode"]], params, centers, attn)


def checkpoint_from_state(state, attention_reduction: int) -> Checkpoint:
    return Checkpoint(
        model_cfg=state.model_cfg,
        attention_reduction=attention_reduction,
        attention_mode=state.attention_mode,
        params=state.params,
        centers=state.centers.matrix,
        attention=state.attention,
    )


def state_from_checkpoint(ck: Checkpoint):
    from .nss import ConfusionStats
    from .trainer import TrainState

    return TrainState(
        model_cfg=ck.model_cfg,
        params=ck.params,
        velocity=ck.params.zeros_like(),
        attention=ck.attention,
        attention_velocity=ck.attention.zeros_like(),
        centers=ClassCenters(ck.centers, np.zeros_like(ck.centers)),
        stats=ConfusionStats(ck.model_cfg.k_classes),
        attention_mode=ck.attention_mode,
    )


def curve_lines(records) -> list[str]:
    lines = [CURVE_HEADER]
    for r in records:
        b = r.loss
        lines.append(",".join([str(r.iteration), str(r.epoch), fmt(b.ce), fmt(b.metric), fmt(b.total), fmt(r.lr)]))
    return lines


def write_curve(records, path) -> None:
    Path(path).write_text("\n".join(curve_lines(records)) + "\n")


def read_curve(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CURVE_HEADER:
        raise ValueError(f"{path}: unexpected curve header")
    cols = CURVE_HEADER.split(",")
    rows = [ln.split(",") for ln in lines[1:] if ln]
    return {c: np.array([float(r[i]) for r in rows]) for i, c in enumerate(cols)}


def _json_float(x):
    if isinstance(x, float):
        return float(fmt(x)) if np.isfinite(x) else None
    if isinstance(x, list):
        return [_json_float(v) for v in x]
    if isinstance(x, dict):
        return {k: _json_float(v) for k, v in x.items()}
    return x


def write_metrics(report, path) -> None:
    Path(path).write_text(json.dumps(_json_float(report.to_json_dict()), indent=2) + "\n")


def write_matrix_csv(matrix, path, header=None) -> None:
    matrix = np.asarray(matrix)
    lines = []
    if header is not None:
        lines.append(",".join(header))
    for row in matrix:
        if np.issubdtype(matrix.dtype, np.integer):
            lines.append(",".join(str(int(v)) for v in row))
        else:
            lines.append(",".join(fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path, dtype=DTYPE, header: bool = False) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln]
    if header:
        lines = lines[1:]
    return np.array([[dtype(v) for v in ln.split(",")] for ln in lines])
