"""Serialization: weights and libraries as versioned JSON, latents as PPM images.

Arrays are stored as shape plus a flat list of floats.  Python's float repr
is the shortest decimal that round-trips, so values reload bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .backend.learned import PARAM_NAMES, LearnedWeights
from .backend.scenes import PromptEntry, PromptSpec, PrototypeLibrary

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed or mismatched serialized files."""


def encode_array(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FormatError("cannot serialize non-finite values")
    return {"shape": list(x.shape), "values": [float(v) for v in x.ravel()]}


def decode_array(obj: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        values = np.array(obj["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad array record: {exc}") from None
    if values.size != int(np.prod(shape)):
        raise FormatError(f"array has {values.size} values for shape {shape}")
    return values.reshape(shape)


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file and rename, so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def weights_to_dict(w: LearnedWeights) -> dict:
    return {
        "format": "sagalab-learned-weights",
        "version": FORMAT_VERSION,
        "vocab": w.vocab,
        "shape": list(w.shape),
        "width": w.width,
        "heads": w.heads,
        "hidden": w.hidden,
        "schedule_kind": w.schedule_kind,
        "t_max": w.t_max,
        "params": {k: encode_array(w.params[k]) for k in PARAM_NAMES},
    }


def weights_from_dict(obj: dict) -> LearnedWeights:
    _check_header(obj, "sagalab-learned-weights")
    try:
        params = {k: decode_array(obj["params"][k]) for k in PARAM_NAMES}
        return LearnedWeights(params, int(obj["vocab"]), tuple(int(v) for v in obj["shape"]),
                              int(obj["width"]), int(obj["heads"]), int(obj["hidden"]),
                              str(obj["schedule_kind"]), int(obj["t_max"]))
    except KeyError as exc:
        raise FormatError(f"weights file lacks {exc}") from None


def save_weights(w: LearnedWeights, path) -> None:
    atomic_write_text(path, json.dumps(weights_to_dict(w)))


def load_weights(path) -> LearnedWeights:
    return weights_from_dict(_read_json(path))


def library_to_dict(lib: PrototypeLibrary) -> dict:
    entries = {}
    for pid, e in lib.entries.items():
        entries[pid] = {
            "prompt": e.prompt.to_dict(),
            "prototypes": encode_array(e.prototypes),
            "log_weights": encode_array(e.log_weights),
            "centers": encode_array(e.centers),
            "amplitudes": encode_array(e.amplitudes),
            "partners": None if e.partners is None else [int(v) for v in np.ravel(e.partners)],
            "mixing": None if e.mixing is None else encode_array(e.mixing),
        }
    return {
        "format": "sagalab-prototype-library",
        "version": FORMAT_VERSION,
        "templates": encode_array(lib.templates),
        "shape": list(lib.shape),
        "blob_sigma": lib.blob_sigma,
        "amplitude": lib.amplitude,
        "attention_gain": lib.attention_gain,
        "entries": entries,
    }


def library_from_dict(obj: dict) -> PrototypeLibrary:
    _check_header(obj, "sagalab-prototype-library")
    try:
        lib = PrototypeLibrary(decode_array(obj["templates"]), tuple(int(v) for v in obj["shape"]),
                               float(obj["blob_sigma"]), float(obj["amplitude"]),
                               attention_gain=float(obj["attention_gain"]))
        for pid, e in obj["entries"].items():
            prompt = PromptSpec.from_dict(e["prompt"])
            protos = decode_array(e["prototypes"])
            partners = None
            if e["partners"] is not None:
                partners = np.array(e["partners"], dtype=np.int64).reshape(len(protos), -1)
            mixing = None if e["mixing"] is None else decode_array(e["mixing"])
            lib.entries[pid] = PromptEntry(prompt, protos, decode_array(e["log_weights"]),
                                           decode_array(e["centers"]), decode_array(e["amplitudes"]),
                                           partners, mixing)
    except KeyError as exc:
        raise FormatError(f"library file lacks {exc}") from None
    return lib


def save_library(lib: PrototypeLibrary, path) -> None:
    atomic_write_text(path, json.dumps(library_to_dict(lib)))


def load_library(path) -> PrototypeLibrary:
    return library_from_dict(_read_json(path))


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def _check_header(obj: dict, fmt: str) -> None:
    if obj.get("format") != fmt:
        raise FormatError(f"expected a {fmt} file, got format {obj.get('format')!r}")
    if obj.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported {fmt} version {obj.get('version')!r}")


# -- images ---------------------------------------------------------------------------


def quantize(z0: np.ndarray, sigma_ref: float) -> np.ndarray:
    """First three channels as ``H x W x 3`` uint8 via the affine ``[-3 s, 3 s] -> [0, 255]``.

    Rounding is half-up, so zero maps to 128, ``+3 s`` to 255 and ``-3 s`` to
    0; values outside the window clamp.
    Latents with fewer than three channels repeat the last one.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 3:
        raise ValueError(f"expected a C x H x W latent, got shape {z0.shape}")
    if sigma_ref <= 0:
        raise ValueError("sigma_ref must be positive")
    chans = [z0[min(i, z0.shape[0] - 1)] for i in range(3)]
    rgb = np.stack(chans, axis=-1)
    scaled = np.floor((rgb + 3.0 * sigma_ref) * (255.0 / (6.0 * sigma_ref)) + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Binary P6 bytes for an ``H x W x 3`` uint8 array."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError("PPM needs an H x W x 3 uint8 array")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def parse_ppm(data: bytes) -> np.ndarray:
    """Parse P6 bytes (comments allowed in the header) into ``H x W x 3`` uint8."""
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM is supported (maxval {maxval})")
    body = data[pos + 1:]
    if len(body) != w * h * 3:
        raise FormatError(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def emit_image(z0: np.ndarray, path, sigma_ref: float) -> None:
    """Write the latent's first three channels as a P6 image."""
    data = encode_ppm(quantize(z0, sigma_ref))
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc.strerror}") from exc
