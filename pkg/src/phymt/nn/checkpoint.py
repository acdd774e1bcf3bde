"""Model checkpoints: magic, JSON manifest, little-endian binary payload.

Layout::

    b"PHYMTCKPT1" | uint32 manifest length | manifest JSON | payload

The payload holds every float parameter as float64 in manifest order,
followed by one section per quantized matrix: uint8 bits, float64 sigma,
then the packed 4-bit indices (two per byte, low nibble first).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CorruptFileError, FormatError
from ..numerics import SeededRng
from .model import ModelConfig, MultiTaskModel, TaskSpec

CKPT_MAGIC = b"PHYMTCKPT1"


def _lora():
    from .. import lora

    return lora


def backbone_digest(backbone) -> str:
    """SHA-256 over every frozen backbone tensor, quantized bases included."""
    lora = _lora()
    h = hashlib.sha256()
    for name, p in sorted(backbone.named_params(), key=lambda kv: kv[0]):
        if ".adapter." in name:
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    for name, lin in lora.lora_layers(backbone):
        if lin.quant is not None:
            h.update(name.encode())
            h.update(lin.quant.indices.tobytes())
            h.update(struct.pack("<d", lin.quant.sigma))
    return h.hexdigest()


def save_model(path, model: MultiTaskModel, extra: dict | None = None) -> int:
    """Write ``model`` to ``path``; returns the file size in bytes."""
    lora = _lora()
    params = list(model.named_params())
    layers = lora.lora_layers(model.backbone)
    rank = layers[0][1].adapter.rank if layers else None
    quant = [(f"backbone.{n}", lin.quant) for n, lin in layers if lin.quant is not None]
    manifest = {
        "format": CKPT_MAGIC.decode(),
        "config": model.cfg.to_dict(),
        "tasks": {t: vars(s) for t, s in model.tasks.items()},
        "lora": {"rank": rank, "layers": [f"backbone.{n}" for n, _ in layers]} if layers else None,
        "params": [{"name": n, "shape": list(p.shape), "trainable": p.trainable} for n, p in params],
        "quantized": [{"name": n, "shape": list(q.shape), "bits": q.bits} for n, q in quant],
        "extra": extra or {},
    }
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", len(raw)), raw]
    parts += [np.ascontiguousarray(p.value, dtype="<f8").tobytes() for _, p in params]
    for _, q in quant:
        parts.append(struct.pack("<Bd", q.bits, q.sigma))
        parts.append(lora.pack_nibbles(q.indices))
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def read_manifest(path) -> dict:
    data = Path(path).read_bytes()
    return _manifest(data, path)[0]


def _manifest(data: bytes, path):
    n0 = len(CKPT_MAGIC)
    if data[:n0] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < n0 + 4:
        raise CorruptFileError(f"{path}: truncated")
    (n,) = struct.unpack("<I", data[n0:n0 + 4])
    raw = data[n0 + 4:n0 + 4 + n]
    if len(raw) != n:
        raise CorruptFileError(f"{path}: truncated manifest")
    try:
        return json.loads(raw.decode("utf-8")), n0 + 4 + n
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable manifest") from exc


def load_model(path) -> tuple[MultiTaskModel, dict]:
    """Rebuild a model bit-exactly; returns ``(model, manifest)``."""
    lora = _lora()
    data = Path(path).read_bytes()
    man, off = _manifest(data, path)
    cfg = ModelConfig.from_dict(man["config"])
    tasks = {t: TaskSpec(**s) for t, s in man["tasks"].items()}
    model = MultiTaskModel(cfg, SeededRng(0), tasks)
    if man["lora"]:
        lora.attach_adapters(model.backbone, SeededRng(0), r=man["lora"]["rank"])
    pd = model.param_dict()
    qnames = {q["name"] for q in man["quantized"]}
    # quantized layers carry no float base weight
    for name in qnames:
        layer = _find(model, name)
        layer.params.pop("W", None)
    pd = model.param_dict()
    if sorted(pd) != sorted(e["name"] for e in man["params"]):
        raise CorruptFileError(f"{path}: parameter set does not match the manifest")
    for e in man["params"]:
        nb = 8 * int(np.prod(e["shape"], dtype=np.int64))
        if off + nb > len(data):
            raise CorruptFileError(f"{path}: truncated payload at {e['name']}")
        p = pd[e["name"]]
        p.value[...] = np.frombuffer(data, dtype="<f8", count=nb // 8, offset=off).reshape(e["shape"])
        p.trainable = e["trainable"]
        off += nb
    for e in man["quantized"]:
        count = int(np.prod(e["shape"]))
        nb = 9 + (count + 1) // 2
        if off + nb > len(data):
            raise CorruptFileError(f"{path}: truncated quantized section {e['name']}")
        bits, sigma = struct.unpack("<Bd", data[off:off + 9])
        idx = lora.unpack_nibbles(data[off + 9:off + nb], count).reshape(e["shape"])
        _find(model, e["name"]).set_quantized(lora.QuantizedMatrix(idx, sigma, bits))
        off += nb
    if off != len(data):
        raise CorruptFileError(f"{path}: {len(data) - off} trailing bytes")
    return model, man


def _find(model, dotted: str):
    obj = model
    for part in dotted.split("."):
        if isinstance(obj, dict):
            obj = obj[part]
        elif isinstance(obj, list):
            obj = obj[int(part)]
        else:
            obj = getattr(obj, part)
    return obj


def quantized_storage(model) -> dict:
    """Packed 4-bit bytes of quantized backbone matrices vs their float16 size."""
    lora = _lora()
    packed = fp16 = 0
    for _, lin in lora.lora_layers(model.backbone):
        if lin.quant is not None:
            packed += len(lora.pack_nibbles(lin.quant.indices))
            fp16 += 2 * lin.quant.indices.size
    return {"packed_bytes": packed, "fp16_bytes": fp16,
            "ratio": packed / fp16 if fp16 else float("nan")}
