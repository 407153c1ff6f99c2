"""JSON container for parameters, adapters and gradient captures.

Every matrix is stored as base64 of its little-endian float64 bytes in
row-major order, so a round trip is bitwise exact.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile

import numpy as np

from gradleak.errors import ParseError
from gradleak.tinylm.config import ModelConfig, peft_mode_from_dict, peft_mode_to_dict
from gradleak.tinylm.model import GradientCapture, LoraFactors, TinyLmParams

FORMAT_VERSION = 1
_DTYPE = "<f8"


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=_DTYPE)
    return {"shape": list(a.shape), "dtype": _DTYPE, "order": "C",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != _DTYPE or d.get("order", "C") != "C":
        raise ParseError(f"unsupported array encoding {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64)
    shape = tuple(d["shape"])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ParseError(f"array payload does not match shape {shape}")
    return arr.reshape(shape)


def _encode_tensors(tensors):
    return {k: encode_array(v) for k, v in tensors.items()}


def _decode_tensors(d):
    return {k: decode_array(v) for k, v in d.items()}


def params_to_dict(params: TinyLmParams, lora: LoraFactors | None = None) -> dict:
    out = {"format": "gradleak.checkpoint", "version": FORMAT_VERSION, "byte_order": "little",
           "config": params.config.to_dict(), "tensors": _encode_tensors(params.tensors)}
    if lora is not None:
        out["lora"] = lora_to_dict(lora)
    return out


def lora_to_dict(lora: LoraFactors) -> dict:
    return {"rank": lora.rank, "layers": list(lora.layers), "targets": list(lora.targets),
            "tensors": _encode_tensors(lora.tensors)}


def lora_from_dict(d: dict) -> LoraFactors:
    return LoraFactors(int(d["rank"]), tuple(d["layers"]), tuple(d["targets"]),
                       _decode_tensors(d["tensors"]))


def params_from_dict(d: dict) -> tuple[TinyLmParams, LoraFactors | None]:
    if d.get("format") != "gradleak.checkpoint":
        raise ParseError("not a gradleak checkpoint")
    if d.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {d.get('version')}")
    params = TinyLmParams(ModelConfig(**d["config"]), _decode_tensors(d["tensors"]))
    params.validate()
    lora = lora_from_dict(d["lora"]) if "lora" in d else None
    return params, lora


def capture_to_dict(capture: GradientCapture) -> dict:
    return {"format": "gradleak.capture", "version": FORMAT_VERSION, "byte_order": "little",
            "peft_mode": peft_mode_to_dict(capture.peft_mode),
            "batch_meta": {"b": capture.b, "b_n": capture.b_n},
            "grads": _encode_tensors(capture.grads)}


def capture_from_dict(d: dict) -> GradientCapture:
    if d.get("format") != "gradleak.capture":
        raise ParseError("not a gradleak capture")
    if d.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported capture version {d.get('version')}")
    try:
        meta = d["batch_meta"]
        return GradientCapture(peft_mode_from_dict(d["peft_mode"]), _decode_tensors(d["grads"]),
                               int(meta["b"]), int(meta["b_n"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed capture: {exc}") from exc


def write_json_atomic(path, obj) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})", line=exc.lineno) from exc


def save_checkpoint(path, params: TinyLmParams, lora: LoraFactors | None = None) -> None:
    write_json_atomic(path, params_to_dict(params, lora))


def load_checkpoint(path) -> tuple[TinyLmParams, LoraFactors | None]:
    try:
        return params_from_dict(read_json(path))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed checkpoint ({exc})") from exc


def save_capture(path, capture: GradientCapture) -> None:
    write_json_atomic(path, capture_to_dict(capture))


def load_capture(path) -> GradientCapture:
    return capture_from_dict(read_json(path))
