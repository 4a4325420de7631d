"""Synthetic multi-annotator benchmark: generation, on-disk format, iteration.

Each case is a smooth scalar field with a geometric object; annotators
threshold the field at offset levels, apply a morphological adjustment and
occasionally omit the object entirely, emulating boundary-style and
presence/absence disagreement regimes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

DATASET_FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SynthSpec:
    """Generation parameters; the dataset is a pure function of this spec."""

    num_cases: int = 300
    size: int = 64
    K: int = 2
    threshold_offsets: list[float] = field(default_factory=lambda: [0.0, -0.1, 0.1, 0.2])
    morph_radii: list[int] = field(default_factory=lambda: [0, 0, 1, -1])
    omission_probs: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.15])
    noise_amplitude: float = 0.5
    blur_scale: float = 4.0
    base_threshold: float = 0.45
    class_gap: float = 0.25
    master_seed: int = 0

    @property
    def annotators(self) -> int:
        return len(self.threshold_offsets)

    def validate(self) -> None:
        m = self.annotators
        if m < 1:
            raise ValueError("need at least one annotator style")
        if len(self.morph_radii) != m or len(self.omission_probs) != m:
            raise ValueError("annotator style lists must have equal length")
        if any(not (0.0 <= p <= 1.0) for p in self.omission_probs):
            raise ValueError("omission probabilities must lie in [0, 1]")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.num_cases < 1:
            raise ValueError("num_cases must be >= 1")
        if self.size % 16:
            raise ValueError("size must be divisible by 16 (dyadic model levels)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


@dataclass
class Case:
    id: str
    image: np.ndarray  # (H, W) float32
    annotations: np.ndarray  # (M, H, W) uint8
    split: str


def _case_field(spec: SynthSpec, case_index: int) -> np.ndarray:
    """Smooth scalar field: anisotropic bump plus filtered noise, peak ~1."""
    rng = np.random.default_rng([spec.master_seed, case_index])
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cx, cy = rng.uniform(0.35 * n, 0.65 * n, size=2)
    rx, ry = rng.uniform(0.12 * n, 0.28 * n, size=2)
    theta = rng.uniform(0.0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    bump = np.exp(-0.5 * ((u / rx) ** 2 + (v / ry) ** 2))
    rough = ndimage.gaussian_filter(rng.standard_normal((n, n)), spec.blur_scale)
    rough = rough / max(rough.std(), 1e-12)
    return bump + 0.15 * rough


def _morph_adjust(labels: np.ndarray, radius: int) -> np.ndarray:
    """Grow (radius > 0) or shrink (radius < 0) the foreground boundary."""
    if radius == 0:
        return labels
    fg = labels > 0
    size = 2 * abs(radius) + 1
    footprint = np.ones((size, size), dtype=bool)
    if radius > 0:
        grown = ndimage.binary_dilation(fg, structure=footprint)
        out = labels.copy()
        out[grown & ~fg] = 1
    else:
        kept = ndimage.binary_erosion(fg, structure=footprint)
        out = labels.copy()
        out[~kept] = 0
    return out


def _annotate(spec: SynthSpec, field_: np.ndarray, case_index: int, annot: int) -> np.ndarray:
    offset = spec.threshold_offsets[annot]
    labels = np.zeros(field_.shape, dtype=np.uint8)
    for k in range(1, spec.K):
        t = spec.base_threshold + (k - 1) * spec.class_gap + offset
        labels[field_ > t] = k
    labels = _morph_adjust(labels, spec.morph_radii[annot])
    p_omit = spec.omission_probs[annot]
    if p_omit > 0.0:
        rng = np.random.default_rng([spec.master_seed, case_index, annot])
        if rng.random() < p_omit:
            labels[:] = 0
    return labels


def build_case(spec: SynthSpec, case_index: int) -> Case:
    field_ = _case_field(spec, case_index)
    rng = np.random.default_rng([spec.master_seed, case_index, 10**6])
    image = field_ + spec.noise_amplitude * rng.standard_normal(field_.shape)
    image = (image - image.mean()) / max(image.std(), 1e-12)
    annotations = np.stack(
        [_annotate(spec, field_, case_index, m) for m in range(spec.annotators)]
    )
    return Case(
        id=f"case{case_index:04d}",
        image=image.astype(np.float32),
        annotations=annotations,
        split="train",
    )


class SegDataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, root: Path, manifest: dict, cases: list[Case]):
        self.root = Path(root)
        self.manifest = manifest
        self._cases = cases
        self._by_id = {c.id: c for c in cases}

    @property
    def spec(self) -> SynthSpec:
        return SynthSpec.from_dict(self.manifest["spec"])

    @property
    def K(self) -> int:
        return int(self.manifest["K"])

    @property
    def M(self) -> int:
        return int(self.manifest["M"])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.manifest["r_x"]), int(self.manifest["r_y"])

    def cases(self, split: str | None = None) -> list[Case]:
        if split is None:
            return list(self._cases)
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return [c for c in self._cases if c.split == split]

    def case(self, case_id: str) -> Case:
        if case_id not in self._by_id:
            raise KeyError(f"no such case: {case_id}")
        return self._by_id[case_id]


def _write_manifest(root: Path, spec: SynthSpec, cases: list[Case]) -> None:
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "K": spec.K,
        "M": spec.annotators,
        "r_x": spec.size,
        "r_y": spec.size,
        "cases": [{"id": c.id, "split": c.split} for c in cases],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def generate_dataset(spec: SynthSpec, out_dir: Path, overwrite: bool = False) -> SegDataset:
    """Write the full dataset (manifest + per-case binaries) to out_dir."""
    spec.validate()
    root = Path(out_dir)
    if (root / "manifest.json").exists() and not overwrite:
        raise FileExistsError(f"dataset already exists at {root}")
    (root / "cases").mkdir(parents=True, exist_ok=True)
    cases = []
    for idx in range(spec.num_cases):
        case = build_case(spec, idx)
        case.image.astype("<f4").tofile(root / "cases" / f"{case.id}.img.f32")
        for m in range(spec.annotators):
            case.annotations[m].astype(np.uint8).tofile(
                root / "cases" / f"{case.id}.ann{m}.u8"
            )
        cases.append(case)
    _write_manifest(root, spec, cases)
    return load_dataset(root)


def load_dataset(root: Path) -> SegDataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format: {manifest.get('format_version')}")
    n = int(manifest["r_x"]), int(manifest["r_y"])
    m = int(manifest["M"])
    cases = []
    for entry in manifest["cases"]:
        cid = entry["id"]
        image = np.fromfile(root / "cases" / f"{cid}.img.f32", dtype="<f4").reshape(n)
        anns = np.stack(
            [
                np.fromfile(root / "cases" / f"{cid}.ann{j}.u8", dtype=np.uint8).reshape(n)
                for j in range(m)
            ]
        )
        cases.append(Case(id=cid, image=image, annotations=anns, split=entry["split"]))
    return SegDataset(root, manifest, cases)


def split_dataset(dataset: SegDataset, ratios: tuple[float, float, float], seed: int) -> dict:
    """Random case-level train/val/test partition, persisted to the manifest."""
    if len(ratios) != len(SPLIT_NAMES):
        raise ValueError(f"need {len(SPLIT_NAMES)} ratios")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    cases = dataset.cases()
    n = len(cases)
    # Largest-remainder apportionment so e.g. 100 @ 60-20-20 -> (60, 20, 20).
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignment = {}
    pos = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for idx in order[pos : pos + count]:
            assignment[cases[idx].id] = name
        pos += count
    for case in cases:
        case.split = assignment[case.id]
    _write_manifest(dataset.root, dataset.spec, cases)
    dataset.manifest["cases"] = [{"id": c.id, "split": c.split} for c in cases]
    return assignment


def batch_iterator(
    dataset: SegDataset,
    split: str,
    batch_size: int,
    policy: str = "random",
    annotator: int = 0,
    seed: int = 0,
    epochs: int | None = 1,
):
    """Yield (images (B,1,H,W) float32, masks (B,H,W) int64) numpy batches.

    Each epoch reshuffles case order; under the random policy every
    appearance of a case draws one of its M annotations uniformly, under the
    fixed policy always the designated annotator.  Batches never span epoch
    boundaries, so the last batch of an epoch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if policy not in ("random", "fixed"):
        raise ValueError(f"unknown annotator policy {policy!r}")
    cases = dataset.cases(split)
    if not cases:
        raise ValueError(f"split {split!r} is empty")
    m = dataset.M
    if policy == "fixed" and not (0 <= annotator < m):
        raise IndexError(f"annotator {annotator} out of range for M={m}")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(cases))
        for start in range(0, len(cases), batch_size):
            chunk = order[start : start + batch_size]
            images = np.stack([cases[i].image for i in chunk])[:, None, :, :]
            if policy == "fixed":
                picks = [annotator] * len(chunk)
            else:
                picks = rng.integers(0, m, size=len(chunk))
            masks = np.stack(
                [cases[i].annotations[a] for i, a in zip(chunk, picks)]
            ).astype(np.int64)
            yield images, masks
        epoch += 1
