"""File formats: JSON detection files and the FTNS binary tensor format.

Detection files are JSON carrying full per-class probability vectors::

    {
      "num_classes": C,
      "class_names": ["car", ...],          # optional
      "images": [
        {"image_id": "...",
         "detections": [{"box": [x1, y1, x2, y2], "probs": [...]}, ...]},
        ...
      ]
    }

Fused outputs use the same schema plus an integer ``"label"`` per detection.

Tensor files (extension ``.ftns``) are little-endian binary: magic ``FTNS``,
u32 version (1), u8 dtype code (0 = float32), u8 ndim, ndim x u64 dims, then
the row-major float32 payload with no padding.

Ingestion never silently repairs data: renormalizing probability vectors
requires an explicit flag and is logged.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, ValidationError
from .fusion import Detection, FusedLabel
from .geometry import Box

__all__ = [
    "DetectionSet",
    "read_detections",
    "write_detections",
    "write_fused",
    "read_tensor",
    "write_tensor",
    "save_prototype_bank",
    "load_prototype_bank",
    "save_ema_state",
    "load_ema_state",
]

log = logging.getLogger(__name__)

MAGIC = b"FTNS"
VERSION = 1
DTYPE_F32 = 0
PROB_SUM_TOL = 1e-6


@dataclass
class DetectionSet:
    num_classes: int
    images: List[Tuple[str, List[Detection]]]
    class_names: Optional[List[str]] = None


def _validate_probs(probs: List[float], num_classes: int, where: str, renormalize: bool):
    if len(probs) != num_classes:
        raise ValidationError(f"{where}: probs has length {len(probs)}, expected {num_classes}")
    arr = np.asarray(probs, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{where}: probs entries must be finite")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValidationError(f"{where}: probs entries must lie in [0, 1]")
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        if not renormalize:
            raise ValidationError(
                f"{where}: probs sums to {total:.6g}, not 1 (pass renormalize to rescale)"
            )
        if total <= 0.0:
            raise ValidationError(f"{where}: probs sums to {total:.6g}, cannot renormalize")
        log.info("renormalizing probs at %s (sum was %.6g)", where, total)
        arr = arr / total
    return arr


def _parse_box(raw, where: str) -> Box:
    if not (isinstance(raw, list) and len(raw) == 4):
        raise ValidationError(f"{where}: box must be a list [x1, y1, x2, y2]")
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: box coordinates must be numbers") from exc
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"{where}: box coordinates must be finite")
    if not (vals[2] > vals[0] and vals[3] > vals[1]):
        raise ValidationError(f"{where}: box needs x2 > x1 and y2 > y1, got {vals}")
    return Box(*vals)


def read_detections(path, renormalize: bool = False) -> DetectionSet:
    """Read and validate a detection file; image order is preserved."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValidationError(f"{path}: top level must be an object")
    if "num_classes" not in payload or not isinstance(payload["num_classes"], int):
        raise ValidationError(f"{path}: missing or non-integer 'num_classes'")
    num_classes = payload["num_classes"]
    if num_classes < 1:
        raise ValidationError(f"{path}: num_classes must be >= 1")
    class_names = payload.get("class_names")
    if class_names is not None:
        if not (isinstance(class_names, list) and len(class_names) == num_classes):
            raise ValidationError(f"{path}: class_names must list {num_classes} strings")
    images_raw = payload.get("images")
    if not isinstance(images_raw, list):
        raise ValidationError(f"{path}: 'images' must be a list")
    images: List[Tuple[str, List[Detection]]] = []
    for i, entry in enumerate(images_raw):
        where = f"{path}:images[{i}]"
        if not isinstance(entry, dict) or "image_id" not in entry:
            raise ValidationError(f"{where}: each image needs an 'image_id'")
        dets: List[Detection] = []
        for j, d in enumerate(entry.get("detections", [])):
            dwhere = f"{where}.detections[{j}]"
            if not isinstance(d, dict):
                raise ValidationError(f"{dwhere}: detection must be an object")
            box = _parse_box(d.get("box"), dwhere)
            probs = d.get("probs")
            if not isinstance(probs, list):
                raise ValidationError(f"{dwhere}: probs must be a list")
            arr = _validate_probs(probs, num_classes, dwhere, renormalize)
            dets.append(Detection(box=box, probs=arr))
        images.append((str(entry["image_id"]), dets))
    return DetectionSet(num_classes=num_classes, images=images, class_names=class_names)


def _det_entry(box: Box, probs: np.ndarray, label: Optional[int] = None) -> dict:
    entry = {
        "box": [box.x1, box.y1, box.x2, box.y2],
        "probs": [float(p) for p in probs],
    }
    if label is not None:
        entry["label"] = int(label)
    return entry


def write_detections(path, dset: DetectionSet) -> None:
    payload = {
        "num_classes": dset.num_classes,
        "images": [
            {
                "image_id": image_id,
                "detections": [_det_entry(d.box, d.probs) for d in dets],
            }
            for image_id, dets in dset.images
        ],
    }
    if dset.class_names is not None:
        payload["class_names"] = dset.class_names
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_fused(
    path,
    fused: Sequence[Tuple[str, Sequence[FusedLabel]]],
    num_classes: int,
    class_names: Optional[List[str]] = None,
) -> None:
    """Write fused labels in the detection schema plus a per-entry label field."""
    payload = {
        "num_classes": num_classes,
        "images": [
            {
                "image_id": image_id,
                "detections": [_det_entry(f.box, f.probs, f.label) for f in labels],
            }
            for image_id, labels in fused
        ],
    }
    if class_names is not None:
        payload["class_names"] = class_names
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_tensor(tensor: np.ndarray, path) -> None:
    """Write a float32 FTNS tensor file (values are cast to float32)."""
    arr = np.ascontiguousarray(np.asarray(tensor), dtype="<f4")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an FTNS tensor file; bit-exact inverse of write_tensor."""
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes (expected FTNS)")
    version, dtype, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    offset = 10
    if len(raw) < offset + 8 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, offset) if ndim else ()
    offset += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    expected = count * 4
    payload = raw[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, dims require {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_prototype_bank(bank, path_prefix) -> None:
    """Write a prototype bank as two tensor files: values and initialized mask."""
    prefix = Path(path_prefix)
    write_tensor(bank.prototypes, Path(str(prefix) + ".protos.ftns"))
    write_tensor(bank.initialized.astype(float), Path(str(prefix) + ".mask.ftns"))


def load_prototype_bank(path_prefix, mu: float = 0.9):
    from .pifa import PrototypeBank

    prefix = Path(path_prefix)
    protos = read_tensor(Path(str(prefix) + ".protos.ftns")).astype(float)
    mask = read_tensor(Path(str(prefix) + ".mask.ftns")).astype(float) > 0.5
    k, c = protos.shape
    return PrototypeBank(num_classes=k, channels=c, mu=mu, prototypes=protos, initialized=mask)


def save_ema_state(state, path_prefix) -> None:
    """Write an EMA state as a parameter tensor plus a JSON scalar header."""
    prefix = Path(path_prefix)
    write_tensor(state.teacher_params, Path(str(prefix) + ".params.ftns"))
    header = {
        "alpha": state.alpha,
        "interval": state.interval,
        "iteration_counter": state.iteration_counter,
    }
    Path(str(prefix) + ".state.json").write_text(json.dumps(header, sort_keys=True) + "\n")


def load_ema_state(path_prefix):
    from .ema import EmaState

    prefix = Path(path_prefix)
    params = read_tensor(Path(str(prefix) + ".params.ftns")).astype(float)
    header = json.loads(Path(str(prefix) + ".state.json").read_text())
    return EmaState(
        teacher_params=params,
        alpha=header["alpha"],
        interval=header["interval"],
        iteration_counter=header["iteration_counter"],
    )
