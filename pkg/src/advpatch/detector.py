"""Detection interface and a deterministic template-matching surrogate.

The surrogate slides each class template over the image and scores windows
with normalized cross-correlation over all color samples of the window,
mapped to [0, 1] via ``score = (ncc + 1) / 2``. Windows (or templates) whose
per-sample contrast falls below a small floor score 0 (undefined-NCC guard).
``detect`` evaluates a half-template-stride grid and emits local-maximum
windows above threshold; ``attack_loss`` scores the same strided maps and
exposes a differentiable four-component loss

    L_total = 0.7*L1 + 0.1*L2 + 0.1*L3 + 0.1*L4

where L1 penalizes the (smooth) maximum target score, L2 the score mass
around its argmax, L3 the mean all-class score, and L4 the mean of the
top-10 all-class scores. Each component is -log((1-eps)*m + eps) of a value
m in [0, 1], so components are non-negative and blow up only as detection
evidence vanishes. The returned ``d_image`` is the exact gradient of the
combined loss through the correlation pipeline.

Plugging in an external detector: implement ``DetectorContract``. Note that
``attack_loss`` must produce the four weighted components from the image
alone (no ground-truth boxes are available during an attack); detectors that
need label targets have to synthesize them from their own predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.signal import fftconvolve

DEFAULT_LOSS_WEIGHTS = (0.7, 0.1, 0.1, 0.1)
LOSS_EPS = 1e-6
TOP_K = 10
# Windows (and templates) whose per-sample variance falls below this floor
# are treated as structureless and score 0: NCC is undefined on flat signals,
# and a detector that fires on sub-percent contrast is pure noise.
_VAR_FLOOR = 1e-4


class DetectorError(ValueError):
    """Template/image size mismatch, unknown label, or bad loss weights."""


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # (x0, y0, x1, y1) pixels
    score: float
    label: str

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise DetectorError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0 + 1e-9:
            raise DetectorError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class AttackLossBreakdown:
    components: tuple[float, float, float, float]
    weights: tuple[float, float, float, float] = DEFAULT_LOSS_WEIGHTS

    def __post_init__(self) -> None:
        if len(self.components) != 4 or len(self.weights) != 4:
            raise DetectorError("attack loss has exactly four components/weights")
        if any(c < -1e-9 for c in self.components):
            raise DetectorError(f"loss components must be non-negative, got {self.components}")
        if any(w < 0 for w in self.weights):
            raise DetectorError(f"loss weights must be non-negative, got {self.weights}")


def combine_attack_loss(b: AttackLossBreakdown) -> float:
    """Weighted sum of the four components; weights must sum to one."""
    total_w = float(sum(b.weights))
    if abs(total_w - 1.0) > 1e-9:
        raise DetectorError(f"loss weights must sum to 1, got {total_w}")
    return float(sum(w * c for w, c in zip(b.weights, b.components)))


@runtime_checkable
class DetectorContract(Protocol):
    """What the sampler, optimizer, and evaluation require of a detector."""

    def detect(self, image: np.ndarray, tau: float = 0.5) -> list[Detection]:
        ...

    def attack_loss(
        self, image: np.ndarray, target_label: str
    ) -> tuple[AttackLossBreakdown, np.ndarray]:
        ...

    def target_confidence(self, image: np.ndarray, label: str) -> float:
        ...


def load_template_bank(path: str | Path) -> dict[str, np.ndarray]:
    """Read every PNG in a directory; file stem is the class label."""
    from PIL import Image

    path = Path(path)
    bank = {}
    for file in sorted(path.glob("*.png")):
        img = Image.open(file).convert("RGB")
        bank[file.stem] = np.asarray(img, dtype=np.float64) / 255.0
    if not bank:
        raise DetectorError(f"no PNG templates found in {path}")
    return bank


def _to_planes(image: np.ndarray) -> np.ndarray:
    """Normalize an image to (H, W, C) float64; grayscale becomes C=1."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[:, :, None]
    if image.ndim == 3:
        return image
    raise DetectorError(f"image must be (H, W) or (H, W, C), got {image.shape}")


def _squash(m: float) -> float:
    return float(-np.log((1.0 - LOSS_EPS) * m + LOSS_EPS))


def _squash_grad(m: float) -> float:
    return float(-(1.0 - LOSS_EPS) / ((1.0 - LOSS_EPS) * m + LOSS_EPS))


class _MapCache:
    """Dense score map plus the intermediates needed for its adjoint.

    Correlation treats all h*w*C color samples of a window as one signal.
    """

    __slots__ = ("score", "numer", "denom", "valid", "mean", "planes")

    def __init__(self, planes: np.ndarray, t_zm: np.ndarray, energy: float):
        h, w, channels = t_zm.shape
        n = h * w * channels
        ones = np.ones((h, w))
        numer = np.zeros((planes.shape[0] - h + 1, planes.shape[1] - w + 1))
        s1 = np.zeros_like(numer)
        s2 = np.zeros_like(numer)
        for c in range(channels):
            numer += fftconvolve(planes[:, :, c], t_zm[::-1, ::-1, c], mode="valid")
            s1 += fftconvolve(planes[:, :, c], ones, mode="valid")
            s2 += fftconvolve(planes[:, :, c] ** 2, ones, mode="valid")
        var = np.clip(s2 - s1 * s1 / n, 0.0, None)
        valid = (var > n * _VAR_FLOOR) & (energy > n * _VAR_FLOOR)
        denom = np.sqrt(np.where(valid, var * energy, 1.0))
        ncc = np.where(valid, numer / denom, 0.0)
        self.score = np.where(valid, 0.5 * (ncc + 1.0), 0.0)
        self.numer = numer
        self.denom = denom
        self.valid = valid
        self.mean = s1 / n
        self.planes = planes

    def backward(self, d_score: np.ndarray, t_zm: np.ndarray, energy: float) -> np.ndarray:
        """Gradient of sum(d_score * score) with respect to the image planes."""
        h, w, channels = t_zm.shape
        d_ncc = np.where(self.valid, 0.5 * d_score, 0.0)
        a = d_ncc / self.denom
        b = d_ncc * self.numer * energy / self.denom**3
        ones = np.ones((h, w))
        c1 = fftconvolve(b, ones, mode="full")
        c2 = fftconvolve(b * self.mean, ones, mode="full")
        out = np.zeros_like(self.planes)
        for c in range(channels):
            term1 = fftconvolve(a, t_zm[:, :, c], mode="full")
            out[:, :, c] = term1 - (self.planes[:, :, c] * c1 - c2)
        return out


class TemplateBankDetector:
    """NCC template-matching detector over a {label: grayscale image} bank."""

    def __init__(
        self,
        bank: dict[str, np.ndarray],
        weights: tuple[float, float, float, float] = DEFAULT_LOSS_WEIGHTS,
    ):
        if not bank:
            raise DetectorError("template bank is empty")
        self.weights = tuple(float(w) for w in weights)
        self.templates: dict[str, np.ndarray] = {}
        self._zm: dict[str, np.ndarray] = {}
        self._energy: dict[str, float] = {}
        for label in sorted(bank):
            tpl = _to_planes(bank[label])
            if tpl.size == 0:
                raise DetectorError(f"template {label!r} is empty")
            zm = tpl - tpl.mean()
            self.templates[label] = tpl
            self._zm[label] = zm
            self._energy[label] = float(np.sum(zm * zm))

    @property
    def labels(self) -> list[str]:
        return list(self.templates)

    def _map(self, planes: np.ndarray, label: str) -> _MapCache:
        if label not in self.templates:
            raise DetectorError(f"unknown label {label!r}")
        t = self.templates[label]
        if t.shape[0] > planes.shape[0] or t.shape[1] > planes.shape[1]:
            raise DetectorError(
                f"template {label!r} {t.shape[:2]} larger than image {planes.shape[:2]}"
            )
        if t.shape[2] != planes.shape[2]:
            raise DetectorError(
                f"template {label!r} has {t.shape[2]} channels, image has {planes.shape[2]}"
            )
        return _MapCache(planes, self._zm[label], self._energy[label])

    @staticmethod
    def _grid(n_positions: int, template_extent: int) -> np.ndarray:
        step = max(1, template_extent // 2)
        idx = set(range(0, n_positions, step))
        idx.add(n_positions - 1)
        return np.asarray(sorted(idx), dtype=np.int64)

    def detect(self, image: np.ndarray, tau: float = 0.5) -> list[Detection]:
        """Local-maximum windows on the stride grid with score >= tau."""
        planes = _to_planes(image)
        detections = []
        for label in self.labels:
            t = self.templates[label]
            score = self._map(planes, label).score
            rows = self._grid(score.shape[0], t.shape[0])
            cols = self._grid(score.shape[1], t.shape[1])
            sub = score[np.ix_(rows, cols)]
            padded = np.full((sub.shape[0] + 2, sub.shape[1] + 2), -np.inf)
            padded[1:-1, 1:-1] = sub
            neighborhood = np.stack(
                [
                    padded[1 + dr : padded.shape[0] - 1 + dr, 1 + dc : padded.shape[1] - 1 + dc]
                    for dr in (-1, 0, 1)
                    for dc in (-1, 0, 1)
                    if (dr, dc) != (0, 0)
                ]
            )
            is_peak = sub >= neighborhood.max(axis=0)
            for i, j in np.argwhere(is_peak & (sub >= tau)):
                y, x = int(rows[i]), int(cols[j])
                detections.append(
                    Detection(
                        box=(float(x), float(y), float(x + t.shape[1]), float(y + t.shape[0])),
                        score=float(min(sub[i, j], 1.0)),
                        label=label,
                    )
                )
        detections.sort(key=lambda d: (-d.score, d.box[1], d.box[0], d.label))
        return detections

    def target_confidence(self, image: np.ndarray, label: str) -> float:
        """Maximum window score for one class over the detection grid."""
        planes = _to_planes(image)
        score = self._map(planes, label).score
        rows = self._grid(score.shape[0], self.templates[label].shape[0])
        cols = self._grid(score.shape[1], self.templates[label].shape[1])
        return float(score[np.ix_(rows, cols)].max())

    def attack_loss(
        self, image: np.ndarray, target_label: str
    ) -> tuple[AttackLossBreakdown, np.ndarray]:
        """Four-component loss and its exact image gradient.

        Components are computed on the same strided score maps that
        ``detect`` evaluates, so the optimization pressure lands exactly on
        the windows that decide detection outcomes.
        """
        image = np.asarray(image, dtype=np.float64)
        planes = _to_planes(image)
        if target_label not in self.templates:
            raise DetectorError(f"unknown target label {target_label!r}")
        caches = {label: self._map(planes, label) for label in self.labels}
        grids = {}
        for label in self.labels:
            t = self.templates[label]
            dense = caches[label].score
            rows = self._grid(dense.shape[0], t.shape[0])
            cols = self._grid(dense.shape[1], t.shape[1])
            grids[label] = (rows, cols, dense[np.ix_(rows, cols)])
        s_t = grids[target_label][2]

        # L1: smooth maximum (log-mean-exp) of the target score map.
        exp_t = np.exp(s_t)
        sum_exp = float(exp_t.sum())
        m1 = float(np.log(sum_exp / s_t.size))

        # L2: mean score in the 3x3 neighborhood of the target argmax.
        flat_arg = int(np.argmax(s_t))
        ay, ax = np.unravel_index(flat_arg, s_t.shape)
        y0, y1 = max(0, ay - 1), min(s_t.shape[0], ay + 2)
        x0, x1 = max(0, ax - 1), min(s_t.shape[1], ax + 2)
        window = (slice(y0, y1), slice(x0, x1))
        n_win = (y1 - y0) * (x1 - x0)
        m2 = float(s_t[window].mean())

        # L3/L4: mean and top-k mean over all class score maps.
        all_scores = np.concatenate([grids[la][2].ravel() for la in self.labels])
        total = all_scores.size
        m3 = float(all_scores.mean())
        k = min(TOP_K, total)
        top_idx = np.argpartition(all_scores, total - k)[total - k :]
        m4 = float(all_scores[top_idx].mean())

        l1, l2, l3, l4 = (_squash(m) for m in (m1, m2, m3, m4))
        w1, w2, w3, w4 = self.weights
        breakdown = AttackLossBreakdown(components=(l1, l2, l3, l4), weights=self.weights)

        # Backward: accumulate d(total)/d(grid score map) per label.
        d_grids = {label: np.zeros_like(grids[label][2]) for label in self.labels}
        d_grids[target_label] += (w1 * _squash_grad(m1) / sum_exp) * exp_t
        d_grids[target_label][window] += w2 * _squash_grad(m2) / n_win
        g3 = w3 * _squash_grad(m3) / total
        for label in self.labels:
            d_grids[label] += g3
        g4 = np.zeros(total)
        g4[top_idx] = w4 * _squash_grad(m4) / k
        offset = 0
        for label in self.labels:
            size = grids[label][2].size
            d_grids[label] += g4[offset : offset + size].reshape(grids[label][2].shape)
            offset += size

        d_planes = np.zeros_like(planes)
        for label in self.labels:
            rows, cols, _ = grids[label]
            d_dense = np.zeros_like(caches[label].score)
            d_dense[np.ix_(rows, cols)] = d_grids[label]
            d_planes += caches[label].backward(
                d_dense, self._zm[label], self._energy[label]
            )
        d_image = d_planes if image.ndim == 3 else d_planes[:, :, 0]
        return breakdown, d_image
