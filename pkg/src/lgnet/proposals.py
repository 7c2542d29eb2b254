"""Class-agnostic region proposals: a transparent EdgeBoxes-style surrogate.

A Sobel edge map scores deterministic sliding-window candidates: a box is
good when edge mass concentrates in a thin band just inside its border
and its interior stays clean. Greedy NMS and top-k selection (padded with
full-image boxes so the proposal count is constant) finish the pipeline.
Externally computed proposals can be dropped in through the same file
format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box, full_image_box

__all__ = [
    "CandidateConfig",
    "ProposalSet",
    "edge_map",
    "generate_candidates",
    "score_windows",
    "nms",
    "top_k",
    "propose_for_image",
    "save_proposals",
    "load_proposals",
]

BAND_WIDTH = 2  # inner border band, pixels
INTERIOR_PENALTY = 0.5
MIN_SIDE = 5  # boxes thinner than this score 0


@dataclass(frozen=True)
class CandidateConfig:
    min_scale: int = 16
    scale_ratio: float = 1.5
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride_fraction: float = 0.25


@dataclass(frozen=True)
class ProposalSet:
    boxes: tuple[Box, ...]
    source: str  # "generated" | "loaded"

    def __post_init__(self):
        if self.source not in ("generated", "loaded"):
            raise ValueError(f"unknown proposal source {self.source!r}")

    def __len__(self) -> int:
        return len(self.boxes)


def edge_map(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the channel-mean grayscale image.

    ``image`` is [3, H, W]; the result is [H, W] with zeroed borders.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be [3, H, W], got shape {image.shape}")
    h, w = image.shape[1:]
    if h < 3 or w < 3:
        raise ValueError("image too small for a 3x3 stencil")
    gray = image.mean(axis=0)
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    # 3x3 Sobel stencils as paired differences, so flat regions cancel
    # exactly instead of leaving summation-order residue
    gx[1:-1, 1:-1] = (
        (gray[:-2, 2:] - gray[:-2, :-2])
        + 2.0 * (gray[1:-1, 2:] - gray[1:-1, :-2])
        + (gray[2:, 2:] - gray[2:, :-2])
    )
    gy[1:-1, 1:-1] = (
        (gray[2:, :-2] - gray[:-2, :-2])
        + 2.0 * (gray[2:, 1:-1] - gray[:-2, 1:-1])
        + (gray[2:, 2:] - gray[:-2, 2:])
    )
    return np.hypot(gx, gy)


def generate_candidates(
    image_w: int,
    image_h: int,
    config: CandidateConfig = CandidateConfig(),
) -> list[Box]:
    """Deterministic sliding-window pyramid over scales and aspect ratios."""
    seen: set[tuple[int, int, int, int]] = set()
    out: list[Box] = []
    scale = float(config.min_scale)
    limit = min(image_w, image_h)
    while scale <= limit:
        for ratio in config.aspect_ratios:
            w = int(round(scale * np.sqrt(ratio)))
            h = int(round(scale / np.sqrt(ratio)))
            if w < 1 or h < 1 or w > image_w or h > image_h:
                continue
            sx = max(1, int(round(config.stride_fraction * w)))
            sy = max(1, int(round(config.stride_fraction * h)))
            for y0 in range(0, image_h - h + 1, sy):
                for x0 in range(0, image_w - w + 1, sx):
                    key = (x0, y0, x0 + w, y0 + h)
                    if key not in seen:
                        seen.add(key)
                        out.append(Box(*map(float, key)))
        scale *= config.scale_ratio
    return out


def _integral(edges: np.ndarray) -> np.ndarray:
    ii = np.zeros((edges.shape[0] + 1, edges.shape[1] + 1))
    ii[1:, 1:] = edges.cumsum(axis=0).cumsum(axis=1)
    return ii


def _rect_mass(ii: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> float:
    return float(ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0])


def score_windows(edges: np.ndarray, candidates: list[Box]) -> list[Box]:
    """Score each candidate by border-band edge concentration.

    score = band mass / perimeter - 0.5 * interior mass / interior area,
    where the band is the BAND_WIDTH-pixel strip just inside the box and
    the interior is everything the band encloses. Boxes under 5x5 pixels
    score 0.
    """
    edges = np.asarray(edges, dtype=np.float64)
    ii = _integral(edges)
    eh, ew = edges.shape
    scored = []
    for box in candidates:
        x0, y0 = int(round(box.x_min)), int(round(box.y_min))
        x1, y1 = int(round(box.x_max)), int(round(box.y_max))
        if not (0 <= x0 < x1 <= ew and 0 <= y0 < y1 <= eh):
            raise ValueError(f"candidate outside edge map bounds: {box}")
        w, h = x1 - x0, y1 - y0
        if w < MIN_SIDE or h < MIN_SIDE:
            scored.append(box.with_score(0.0))
            continue
        total = _rect_mass(ii, x0, y0, x1, y1)
        b = BAND_WIDTH
        interior = _rect_mass(ii, x0 + b, y0 + b, x1 - b, y1 - b)
        band = total - interior
        perimeter = 2.0 * (w + h)
        interior_area = (w - 2 * b) * (h - 2 * b)
        score = band / perimeter - INTERIOR_PENALTY * interior / interior_area
        scored.append(box.with_score(score))
    return scored


def nms(boxes: list[Box], iou_threshold: float = 0.7) -> list[Box]:
    """Greedy suppression: keep the best remaining box, drop boxes whose
    IoU with it exceeds the threshold. Ties go to the lower index."""
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou threshold {iou_threshold} outside (0, 1)")
    n = len(boxes)
    if n == 0:
        return []
    coords = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes])
    scores = np.array([_score(b) for b in boxes])
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
    order = np.lexsort((np.arange(n), -scores))  # score desc, then index asc
    alive = np.ones(n, dtype=bool)
    kept: list[Box] = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(boxes[i])
        alive[i] = False
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        iw = np.minimum(coords[i, 2], coords[rest, 2]) - np.maximum(coords[i, 0], coords[rest, 0])
        ih = np.minimum(coords[i, 3], coords[rest, 3]) - np.maximum(coords[i, 1], coords[rest, 1])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        overlap = inter / (areas[i] + areas[rest] - inter)
        alive[rest[overlap > iou_threshold]] = False
    return kept


def _score(box: Box) -> float:
    if box.score is None:
        raise ValueError(f"box has no score: {box}")
    return box.score


def top_k(boxes: list[Box], image_w: int, image_h: int, k: int = 100) -> ProposalSet:
    """Highest-k scored boxes, padded with zero-score full-image boxes.

    Padding keeps the proposal count constant across images, which the
    affinity matrix shape depends on.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    picked = sorted(boxes, key=_score, reverse=True)[:k]
    while len(picked) < k:
        picked.append(full_image_box(image_w, image_h, score=0.0))
    # interior-penalized scores can go negative, so the zero-score pads
    # are merged back into score order rather than appended
    picked.sort(key=_score, reverse=True)
    return ProposalSet(tuple(picked), source="generated")


def propose_for_image(
    image: np.ndarray,
    k: int = 100,
    iou_threshold: float = 0.7,
    config: CandidateConfig = CandidateConfig(),
) -> ProposalSet:
    """Full pipeline: edges, candidates, scoring, NMS, top-k."""
    h, w = image.shape[1:]
    edges = edge_map(image)
    scored = score_windows(edges, generate_candidates(w, h, config))
    return top_k(nms(scored, iou_threshold), w, h, k)


def save_proposals(path: str | Path, proposals: ProposalSet) -> None:
    """One line per box: `x_min y_min x_max y_max score`, 6 decimals."""
    lines = [
        f"{b.x_min:.6f} {b.y_min:.6f} {b.x_max:.6f} {b.y_max:.6f} {_score(b):.6f}"
        for b in proposals.boxes
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_proposals(path: str | Path) -> ProposalSet:
    path = Path(path)
    boxes = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
        x0, y0, x1, y1, score = map(float, parts)
        boxes.append(Box(x0, y0, x1, y1, score))
    if not boxes:
        raise ValueError(f"{path}: no proposals")
    return ProposalSet(tuple(boxes), source="loaded")
