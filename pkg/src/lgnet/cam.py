"""Class activation maps and activation-box extraction.

The activation map of an attribute is the classifier-weighted sum of the
final feature channels, computed as a fixed 1x1 convolution so it falls
out of an ordinary forward pass. The activation box is the tight bound of
the dominant high-response region, and stands in as the attribute's
location.
"""

from __future__ import annotations

import numpy as np

from .boxes import Box, full_image_box

__all__ = ["class_activation_maps", "activation_box"]


def class_activation_maps(featmap: np.ndarray, fc_weight: np.ndarray) -> np.ndarray:
    """Weighted channel sums: maps[i, y, x] = sum_ch W[i, ch] * featmap[ch, y, x].

    ``featmap`` is [k, h, w], ``fc_weight`` is [a, k]; returns [a, h, w].
    Operates on plain arrays: the producing branch is frozen, so no
    gradient path is wanted here.
    """
    featmap = np.asarray(featmap, dtype=np.float64)
    fc_weight = np.asarray(fc_weight, dtype=np.float64)
    if featmap.ndim != 3 or fc_weight.ndim != 2 or fc_weight.shape[1] != featmap.shape[0]:
        raise ValueError(
            f"shape mismatch: featmap {featmap.shape} vs fc_weight {fc_weight.shape}"
        )
    return np.tensordot(fc_weight, featmap, axes=([1], [0]))


def activation_box(
    cam: np.ndarray,
    image_w: int,
    image_h: int,
    tau: float = 0.2,
) -> tuple[Box, bool]:
    """Bounding box of the dominant activated region of one map.

    Cells with value strictly greater than tau * max(cam) are activated;
    the largest 4-connected component of activated cells (ties broken
    toward the component holding the global maximum) is boxed tightly and
    scaled from cell coordinates to image pixels, each cell covering its
    full stride footprint.

    Returns (box, degenerate). A map with no usable response (all cells
    equal, or a non-positive maximum, which empties the activated set) is
    degenerate and maps to the full-image box.
    """
    cam = np.asarray(cam, dtype=np.float64)
    if cam.ndim != 2:
        raise ValueError(f"cam must be 2-D, got shape {cam.shape}")
    if not np.isfinite(cam).all():
        raise ValueError("cam contains non-finite values")
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau {tau} outside (0, 1)")

    h, w = cam.shape
    peak = cam.max()
    if peak <= 0.0 or peak == cam.min():
        return full_image_box(image_w, image_h), True

    activated = cam > tau * peak
    labels, count = _label_components(activated)
    sizes = np.bincount(labels.reshape(-1), minlength=count + 1)
    sizes[0] = 0
    best = int(sizes.argmax())
    top = sizes[best]
    tied = np.flatnonzero(sizes == top)
    if len(tied) > 1:
        peak_label = labels[np.unravel_index(cam.argmax(), cam.shape)]
        if peak_label in tied:
            best = int(peak_label)

    rows, cols = np.nonzero(labels == best)
    sx = image_w / float(w)
    sy = image_h / float(h)
    box = Box(
        cols.min() * sx,
        rows.min() * sy,
        (cols.max() + 1) * sx,
        (rows.max() + 1) * sy,
    )
    return box, False


def _label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labelling; labels start at 1, 0 is background."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for sr in range(h):
        for sc in range(w):
            if not mask[sr, sc] or labels[sr, sc]:
                continue
            current += 1
            frontier = [(sr, sc)]
            labels[sr, sc] = current
            while frontier:
                r, c = frontier.pop()
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not labels[nr, nc]:
                        labels[nr, nc] = current
                        frontier.append((nr, nc))
    return labels, current
