"""Hypothesis patches and the classifiers that score them.

Every merge-forest node can be rendered as a 32^3 intensity patch:
the node's bounding box, expanded by a small margin, either centered in
the patch (with edge-replicated padding) or trilinearly downsampled when
it is larger than the patch. Two classifiers map patches to the three
hypothesis classes *under-segmentation*, *correct cell* and
*over-segmentation*: the trained network from :mod:`cellforest.cnn` and a
fixed heuristic that needs no training.

Heuristic score formula (softmax over three linear scores):

    bright  = fraction of voxels above 0.5 in the central 10^3 window of
              the min-max renormalized patch
    r_small = clamp(volume / v_min, 0, 1)   (1 when volume unknown)
    r_big   = clamp(volume / v_max, 0, 1)   (0 when volume unknown)

    z_under   = 25 * (bright - 0.05) + r_big
    z_correct = 0.8
    z_over    = 4 * (1 - r_small) - 1

A membrane crossing the patch center raises ``bright`` and flags
under-segmentation; a volume well below ``v_min`` flags a fragment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage as ndi

from .cnn import CnnModel, predict_probs
from .merging import MergeForest, MergeParams
from .volume import LabelVolume, ScalarVolume

PATCH_SIZE = 32
CLASS_NAMES = ("under", "correct", "over")


@dataclass
class ClassProbs:
    """Probabilities for under-segmentation / correct cell / over-segmentation."""

    p_under: float
    p_correct: float
    p_over: float

    def __post_init__(self):
        total = self.p_under + self.p_correct + self.p_over
        if not np.isclose(total, 1.0, atol=1e-6):
            raise ValueError(f"class probabilities must sum to 1, got {total}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_under, self.p_correct, self.p_over])

    def argmax_class(self) -> str:
        return CLASS_NAMES[int(np.argmax(self.as_array()))]


@dataclass
class Patch:
    """A 32^3 intensity crop with provenance to its hypothesis node."""

    data: np.ndarray
    node_id: int = 0
    volume_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (PATCH_SIZE, PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"patch must be {PATCH_SIZE}^3, got {self.data.shape}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("patch values must lie in [0, 1]")


def crop_patch(
    data: np.ndarray, lo: np.ndarray, hi: np.ndarray, size: int = PATCH_SIZE, margin: int = 2
) -> np.ndarray:
    """Render the box [lo, hi] (inclusive, (z, y, x) order) as a size^3 patch.

    The box is first expanded by ``margin`` on every side. If the result
    fits, it is centered and out-of-volume voxels replicate the nearest
    edge; otherwise it is resampled to size^3 with trilinear
    interpolation at pixel-center-aligned coordinates.
    """
    lo_e = np.asarray(lo, dtype=np.int64) - margin
    hi_e = np.asarray(hi, dtype=np.int64) + margin
    span = hi_e - lo_e + 1
    shape = np.array(data.shape)
    if np.all(span <= size):
        starts = lo_e - (size - span) // 2
        idx = [
            np.clip(starts[a] + np.arange(size), 0, shape[a] - 1) for a in range(3)
        ]
        return data[np.ix_(idx[0], idx[1], idx[2])]
    coords = [
        lo_e[a] + (np.arange(size) + 0.5) * span[a] / size - 0.5 for a in range(3)
    ]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    flat = ndi.map_coordinates(
        data, np.stack([zz.ravel(), yy.ravel(), xx.ravel()]), order=1, mode="nearest"
    )
    return flat.reshape(size, size, size)


def extract_patch(
    v: ScalarVolume,
    forest: MergeForest,
    node_id: int,
    supervoxels: LabelVolume,
    mask_background: bool = False,
    volume_id: str = "",
) -> Patch:
    """Patch for one forest node, cropped around its voxels.

    With ``mask_background`` the intensities outside the node's own
    voxels are zeroed before cropping; by default the raw surrounding
    context is kept.
    """
    leaves = np.array(forest.leaves_under(node_id))
    member = np.isin(supervoxels.labels, leaves)
    coords = np.argwhere(member)
    if len(coords) == 0:
        raise ValueError(f"forest node {node_id} covers no voxels")
    data = np.where(member, v.data, 0.0) if mask_background else v.data
    patch = crop_patch(data, coords.min(axis=0), coords.max(axis=0))
    return Patch(np.ascontiguousarray(patch), node_id, volume_id)


def heuristic_probs(
    patch_data: np.ndarray,
    volume_um3: float | None = None,
    v_min: float | None = None,
    v_max: float | None = None,
) -> ClassProbs:
    """Hand-tuned logistic over interior brightness and volume ratios.

    See the module docstring for the exact formula. Works without any
    training run, which keeps the resolver testable independently of the
    network.
    """
    p = np.asarray(patch_data, dtype=np.float64)
    lo = p.min()
    hi = p.max()
    q = (p - lo) / (hi - lo) if hi > lo else np.zeros_like(p)
    c0 = (q.shape[0] - 10) // 2
    core = q[c0 : c0 + 10, c0 : c0 + 10, c0 : c0 + 10]
    bright = float(np.mean(core > 0.5))

    if volume_um3 is not None and v_min is not None and v_max is not None:
        r_small = min(1.0, max(0.0, volume_um3 / v_min))
        r_big = min(1.0, max(0.0, volume_um3 / v_max))
    else:
        r_small, r_big = 1.0, 0.0

    z = np.array([
        25.0 * (bright - 0.05) + r_big,
        0.8,
        4.0 * (1.0 - r_small) - 1.0,
    ])
    e = np.exp(z - z.max())
    probs = e / e.sum()
    return ClassProbs(float(probs[0]), float(probs[1]), float(probs[2]))


def cnn_probs(model: CnnModel, patch_data: np.ndarray) -> ClassProbs:
    probs = predict_probs(model, np.asarray(patch_data, dtype=np.float64)[None])[0]
    return ClassProbs(float(probs[0]), float(probs[1]), float(probs[2]))


def hypothesis_classifier(
    v: ScalarVolume,
    forest: MergeForest,
    supervoxels: LabelVolume,
    model: CnnModel | None = None,
    merge_params: MergeParams | None = None,
    mask_background: bool | None = None,
) -> Callable[[int], ClassProbs]:
    """Bind a patch-level classifier to a concrete volume and forest.

    Returns a pure ``node_id -> ClassProbs`` callable for the resolver:
    the network when a model is given, otherwise the heuristic (fed the
    node volume when merge parameters are available).

    By default the network sees raw context, matching its training
    patches, while the heuristic sees the node's own voxels with the
    surroundings zeroed: its central-window probe would otherwise read
    neighbouring cells' walls for nodes whose bounding-box centre falls
    outside the node (flat cells cut diagonally by the tessellation).
    Pass ``mask_background`` explicitly to override.
    """

    def classify(node_id: int) -> ClassProbs:
        masked = model is None if mask_background is None else mask_background
        patch = extract_patch(v, forest, node_id, supervoxels, mask_background=masked)
        if model is not None:
            return cnn_probs(model, patch.data)
        if merge_params is not None:
            node = forest.nodes[node_id]
            return heuristic_probs(
                patch.data, node.volume, merge_params.v_min, merge_params.v_max
            )
        return heuristic_probs(patch.data)

    return classify
