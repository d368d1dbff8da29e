"""Binary checkpoint container.

Layout, all little-endian:

    magic  8 bytes  b"SADDCKPT"
    u32    container version (1)
    u64    length of the metadata JSON, then that many utf-8 bytes
           (model config, step counter, optimizer hyperparameters)
    u64    record count, then per record:
               u16  name length, name utf-8
               u8   dtype code (0=f32, 1=f64, 2=i32, 3=i64)
               u8   ndim, then ndim x u32 extents
               u64  payload length, then raw row-major bytes

Records cover trainable values, shift-layer sign/exponent blobs, and
optimizer velocities (under the "opt/" prefix). A round trip reproduces
forward outputs bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import model as MD
from .data import FormatError, VersionError

MAGIC = b"SADDCKPT"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
          np.dtype("int32"): 2, np.dtype("int64"): 3}


@dataclass
class Checkpoint:
    version: int
    model_config: MD.ModelConfig
    arrays: Dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    code = _CODES[np.dtype(arr.dtype)]
    arr = np.ascontiguousarray(arr)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    payload = arr.astype(_DTYPES[code], copy=False).tobytes()
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def save_checkpoint(path, model: MD.Model, step: int = 0,
                    optimizer: MD.SgdMomentum = None, extra_meta: dict = None) -> None:
    arrays: Dict[str, np.ndarray] = {}
    for name, p in model.named_params():
        arrays[name] = p.value
    for name, blob in model.extra_blobs():
        arrays[name] = blob
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            arrays["opt/" + name] = v
    meta = {
        "model_config": model.cfg.to_dict(),
        "step": step,
        "moe": {"sigma": model.moe_cfg.sigma, "lam": model.moe_cfg.lam,
                "lat": list(model.moe_cfg.lat)},
        "quant": {"p_min": model.quant_cfg.p_min, "p_max": model.quant_cfg.p_max,
                  "scale_mode": model.quant_cfg.scale_mode},
        "dtype": np.dtype(model.dtype).name,
    }
    if optimizer is not None:
        meta["optimizer"] = {"lr": optimizer.lr, "momentum": optimizer.momentum}
    if extra_meta:
        meta.update(extra_meta)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(arrays)))
        for name in sorted(arrays):
            _write_record(fh, name, arrays[name])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError(f"truncated checkpoint header ({len(data)} bytes)")
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r} at offset 0")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} unsupported")
    offset = 12
    (meta_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    meta = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(data):
            raise FormatError(f"truncated record header at offset {offset}")
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", data, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", data, offset) if ndim else ()
        offset += 4 * ndim
        (payload_len,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if offset + payload_len > len(data):
            raise FormatError(f"truncated payload for {name!r} at offset {offset}")
        arr = np.frombuffer(data, dtype=_DTYPES[code],
                            count=int(np.prod(shape, dtype=np.int64)) if ndim else 1,
                            offset=offset)
        arrays[name] = arr.reshape(shape).copy()
        offset += payload_len
    cfg = MD.ModelConfig.from_dict(meta["model_config"])
    return Checkpoint(version=version, model_config=cfg, arrays=arrays,
                      step=int(meta.get("step", 0)), meta=meta)


def build_model(ckpt: Checkpoint) -> MD.Model:
    """Instantiate the model a checkpoint describes and load its weights."""
    moe_meta = ckpt.meta.get("moe", {})
    quant_meta = ckpt.meta.get("quant", {})
    from .quantize import QuantConfig

    model = MD.Model(
        ckpt.model_config,
        dtype=np.dtype(ckpt.meta.get("dtype", "float32")).type,
        moe_cfg=MD.MoeConfig(sigma=moe_meta.get("sigma", 0.1),
                             lam=moe_meta.get("lam", 0.01),
                             lat=tuple(moe_meta.get("lat", (3.0, 1.0)))),
        quant_cfg=QuantConfig(p_min=quant_meta.get("p_min", -15),
                              p_max=quant_meta.get("p_max", 15),
                              scale_mode=quant_meta.get("scale_mode", "per-matrix")),
    )
    for name, p in model.named_params():
        if name not in ckpt.arrays:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        stored = ckpt.arrays[name]
        if stored.shape != p.value.shape:
            raise FormatError(
                f"shape mismatch for {name!r}: {stored.shape} vs {p.value.shape}")
        p.value[...] = stored
    model.post_step()  # rebuild sign/exponent pairs from the loaded shadows
    for name, blob in model.extra_blobs():
        if name in ckpt.arrays and not np.array_equal(blob, ckpt.arrays[name]):
            raise FormatError(f"stored quantization blob {name!r} disagrees "
                              "with the re-quantized shadow weights")
    return model


def load_optimizer(ckpt: Checkpoint) -> MD.SgdMomentum:
    hyper = ckpt.meta.get("optimizer", {})
    opt = MD.SgdMomentum(lr=hyper.get("lr", 0.05), momentum=hyper.get("momentum", 0.9))
    for name, arr in ckpt.arrays.items():
        if name.startswith("opt/"):
            opt.velocity[name[4:]] = arr.copy()
    return opt
