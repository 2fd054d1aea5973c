"""Learnable patch state: an RGB texture plane plus a single-channel opacity mask.

All values are normalized to [0, 1]; one 8-bit step corresponds to 1/255 in
this convention. Opacity 0 is fully transparent, 1 fully opaque. Arrays are
float32 so that the binary container round-trips bit-exactly; numerical work
downstream upcasts to float64.

Patches are treated as immutable snapshots: every operation returns a new
``Patch`` and the constructor marks its arrays read-only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"ADVPATCH"
_VERSION = 1
_HEADER = struct.Struct("<8sIII")

GAUSS_INIT_MEAN = 0.5
GAUSS_INIT_STD = 0.15


class PatchError(ValueError):
    """Bad patch dimensions, out-of-range parameters, or a malformed container."""


@dataclass(frozen=True)
class Patch:
    """Texture ``(H, W, 3)`` and opacity ``(H, W)``, both float32.

    The constructor checks shapes and dtypes only; value range is an
    operational invariant maintained by ``init_patch``, ``project_patch``
    and the optimizer, and re-checked when loading from disk.
    """

    texture: np.ndarray
    opacity: np.ndarray

    def __post_init__(self) -> None:
        tex, op = self.texture, self.opacity
        if tex.ndim != 3 or tex.shape[2] != 3:
            raise PatchError(f"texture must have shape (H, W, 3), got {tex.shape}")
        if op.shape != tex.shape[:2]:
            raise PatchError(
                f"opacity shape {op.shape} does not match texture plane {tex.shape[:2]}"
            )
        if tex.dtype != np.float32 or op.dtype != np.float32:
            raise PatchError("patch arrays must be float32")
        tex.setflags(write=False)
        op.setflags(write=False)

    @property
    def height(self) -> int:
        return self.texture.shape[0]

    @property
    def width(self) -> int:
        return self.texture.shape[1]

    def with_texture(self, texture: np.ndarray) -> "Patch":
        return Patch(texture, self.opacity)

    def with_opacity(self, opacity: np.ndarray) -> "Patch":
        return Patch(self.texture, opacity)


@dataclass(frozen=True)
class PatchPlacement:
    """Where a patch sits on a scene quad, as a sub-rectangle of its UV space.

    Placement is an input to optimization, never an optimization variable.
    """

    host_quad_id: str
    uv_rect: tuple[float, float, float, float]  # (u0, v0, u1, v1)

    def __post_init__(self) -> None:
        u0, v0, u1, v1 = self.uv_rect
        if not (0.0 <= u0 < u1 <= 1.0 and 0.0 <= v0 < v1 <= 1.0):
            raise PatchError(f"uv_rect must satisfy 0 <= lo < hi <= 1, got {self.uv_rect}")


def init_patch(height: int, width: int, seed: int, init_opacity: float = 0.6) -> Patch:
    """Gaussian-noise texture (mean 0.5, stdev 0.15, clamped) and constant opacity.

    Deterministic for a fixed seed.
    """
    if height < 1 or width < 1:
        raise PatchError(f"patch dimensions must be positive, got {height}x{width}")
    if not 0.0 <= init_opacity <= 1.0:
        raise PatchError(f"init_opacity must lie in [0, 1], got {init_opacity}")
    rng = np.random.default_rng(seed)
    texture = np.clip(
        rng.normal(GAUSS_INIT_MEAN, GAUSS_INIT_STD, size=(height, width, 3)), 0.0, 1.0
    ).astype(np.float32)
    opacity = np.full((height, width), init_opacity, dtype=np.float32)
    return Patch(texture, opacity)


def project_patch(p: Patch) -> Patch:
    """Clamp every texture and opacity entry into [0, 1] (PGD box projection)."""
    return Patch(
        np.clip(p.texture, 0.0, 1.0).astype(np.float32),
        np.clip(p.opacity, 0.0, 1.0).astype(np.float32),
    )


def save_patch(p: Patch, path: str | Path, metadata: dict | None = None) -> None:
    """Write the full-precision binary container, plus a JSON metadata sidecar.

    Layout: magic, version, H, W, then row-major little-endian float32
    texture (H*W*3) followed by opacity (H*W). ``load_patch`` restores the
    arrays bit-exactly.
    """
    path = Path(path)
    header = _HEADER.pack(_MAGIC, _VERSION, p.height, p.width)
    payload = (
        header
        + np.ascontiguousarray(p.texture, dtype="<f4").tobytes()
        + np.ascontiguousarray(p.opacity, dtype="<f4").tobytes()
    )
    path.write_bytes(payload)
    sidecar = sidecar_path(path)
    sidecar.write_text(
        json.dumps(metadata or {}, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


def load_patch_metadata(path: str | Path) -> dict:
    return json.loads(sidecar_path(path).read_text(encoding="utf-8"))


def load_patch(path: str | Path) -> Patch:
    """Read a patch container; rejects truncation, bad magic, and out-of-range data."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise PatchError(f"{path}: container shorter than header")
    magic, version, height, width = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise PatchError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise PatchError(f"{path}: unsupported container version {version}")
    n_tex = height * width * 3
    n_op = height * width
    expected = _HEADER.size + 4 * (n_tex + n_op)
    if len(raw) != expected:
        raise PatchError(
            f"{path}: payload length {len(raw)} does not match header dims "
            f"{height}x{width} (expected {expected})"
        )
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    texture = body[:n_tex].reshape(height, width, 3).astype(np.float32)
    opacity = body[n_tex:].reshape(height, width).astype(np.float32)
    for name, arr in (("texture", texture), ("opacity", opacity)):
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise PatchError(f"{path}: {name} payload outside [0, 1]")
    return Patch(texture, opacity)


def export_preview(p: Patch, path: str | Path) -> None:
    """Lossy 8-bit RGBA preview (PNG); alpha channel carries the opacity mask."""
    from PIL import Image

    rgb = np.round(np.asarray(p.texture, dtype=np.float64) * 255.0).astype(np.uint8)
    alpha = np.round(np.asarray(p.opacity, dtype=np.float64) * 255.0).astype(np.uint8)
    rgba = np.dstack([rgb, alpha])
    Image.fromarray(rgba, mode="RGBA").save(Path(path), format="PNG")
