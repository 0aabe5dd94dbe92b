"""Model directory format: ``manifest`` (JSON text) + ``weights.bin``.

``weights.bin`` holds little-endian float32 values, row-major, concatenated in
layer order (weight before bias). The manifest records byte offsets and
lengths for every tensor.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ModelVersionError
from .nn import LAYER_KINDS, LayerSpec, Model, param_shapes

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


def save_model(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for index, (spec, p) in enumerate(zip(model.layers, model.params)):
        for name in param_shapes(spec):
            blob = np.ascontiguousarray(p[name], dtype=_F32).tobytes()
            tensors.append({"layer": index, "name": name, "shape": list(p[name].shape),
                            "offset": offset, "length": len(blob)})
            chunks.append(blob)
            offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch_id": model.arch_id,
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "layers": [{"kind": s.kind, "dims": dict(s.dims)} for s in model.layers],
        "tensors": tensors,
        "seed": model.seed,
        "meta": model.meta,
    }
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path):
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"model directory not found: {path}")
    raw = (path / "manifest").read_text()
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc.msg}", offset=exc.pos) from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format_version {version!r} (expected {FORMAT_VERSION})")

    layers = []
    for entry in manifest.get("layers", []):
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"unknown layer kind {kind!r} in manifest")
        layers.append(LayerSpec(kind, {k: int(v) for k, v in entry.get("dims", {}).items()}))

    blob = (path / "weights.bin").read_bytes()
    params = [{} for _ in layers]
    for t in manifest.get("tensors", []):
        start, length = int(t["offset"]), int(t["length"])
        shape = tuple(t["shape"])
        if length != int(np.prod(shape)) * _F32.itemsize:
            raise ModelFormatError(f"tensor {t['layer']}.{t['name']} length {length} does not match shape {shape}",
                                   offset=start)
        if start + length > len(blob):
            raise ModelFormatError(
                f"weights.bin truncated: tensor {t['layer']}.{t['name']} needs {length} bytes, "
                f"file has {len(blob)}", offset=len(blob))
        arr = np.frombuffer(blob, dtype=_F32, count=length // _F32.itemsize, offset=start)
        params[t["layer"]][t["name"]] = arr.reshape(shape).astype(np.float64)
    try:
        return Model(manifest["arch_id"], int(manifest["class_count"]), tuple(manifest["input_shape"]),
                     layers, params, seed=int(manifest.get("seed", 0)), meta=manifest.get("meta", {}))
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"inconsistent model manifest: {exc}") from None

