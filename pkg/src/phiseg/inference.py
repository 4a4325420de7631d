"""Drawing segmentation samples from a trained model and summarizing them."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeMismatchError
from .model import DeterministicNet, PHiSegNet

LOG_GUARD_EPS = 1e-8
SAMPLE_MAGIC = b"PHSS"
SAMPLE_FORMAT_VERSION = 1
_SAMPLE_CHUNK = 16


@dataclass
class SampleSet:
    """N decoded segmentation samples for one image."""

    probs: np.ndarray  # (N, H, W, K) float32, softmax probabilities
    labels: np.ndarray  # (N, H, W) uint8, argmax of probs
    seed: int

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def validate(self) -> None:
        n, h, w, k = self.probs.shape
        if self.labels.shape != (n, h, w):
            raise ShapeMismatchError("labels shape inconsistent with probs")
        sums = self.probs.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("per-pixel probabilities must sum to 1")
        if not np.array_equal(self.labels, self.probs.argmax(axis=-1).astype(np.uint8)):
            raise ValueError("labels must be the argmax of probs")


@dataclass
class MeanPrediction:
    probs: np.ndarray  # (H, W, K)
    labels: np.ndarray  # (H, W) uint8


def derive_case_seed(base_seed: int, case_id: str) -> int:
    """Stable per-case seed stream, independent of process hashing."""
    digest = hashlib.blake2b(f"{base_seed}|{case_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFF


def _as_batch(image: np.ndarray, net) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    elif arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    else:
        raise ShapeMismatchError(f"image must be (H, W) or (H, W, C), got {arr.shape}")
    cfg = net.cfg
    if arr.shape != (cfg.input_channels, cfg.r_x, cfg.r_y):
        raise ShapeMismatchError(
            f"image shape {arr.shape} does not match model config "
            f"({cfg.input_channels}, {cfg.r_x}, {cfg.r_y})"
        )
    return torch.from_numpy(arr[None])


def draw_samples(net, image: np.ndarray, n: int, seed: int) -> SampleSet:
    """N independent prior+likelihood draws; reproducible given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = _as_batch(image, net)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            if isinstance(net, DeterministicNet):
                logits = net(x)[0]
                probs_one = torch.softmax(logits, dim=1)[0]
                probs = probs_one.permute(1, 2, 0).numpy().astype(np.float32)
                probs = np.repeat(probs[None], n, axis=0)
            elif isinstance(net, PHiSegNet):
                generator = torch.Generator().manual_seed(seed)
                chunks = []
                for start in range(0, n, _SAMPLE_CHUNK):
                    b = min(_SAMPLE_CHUNK, n - start)
                    xb = x.expand(b, -1, -1, -1)
                    _, z = net.prior_forward(xb, generator=generator)
                    logits = net.likelihood_forward(z)[0]
                    chunks.append(torch.softmax(logits, dim=1).permute(0, 2, 3, 1))
                probs = torch.cat(chunks).numpy().astype(np.float32)
            else:
                raise TypeError(f"unsupported model type {type(net).__name__}")
    finally:
        net.train(was_training)
    labels = probs.argmax(axis=-1).astype(np.uint8)
    return SampleSet(probs=probs, labels=labels, seed=seed)


def mean_prediction(ss: SampleSet) -> MeanPrediction:
    """Pixelwise mean probabilities; argmax labels, ties to the lower index."""
    if ss.n < 1:
        raise ValueError("sample set is empty")
    probs = ss.probs.mean(axis=0)
    return MeanPrediction(probs=probs, labels=probs.argmax(axis=-1).astype(np.uint8))


def gamma_map(ss: SampleSet) -> np.ndarray:
    """Per-pixel expected CE between the mean mask and the sample masks.

    Computed from hard-label frequencies: gamma_i = -sum_k f_ik ln(f_ik + eps),
    clamped at zero (the eps guard can push exact-agreement pixels slightly
    negative).
    """
    if ss.n < 1:
        raise ValueError("sample set is empty")
    k = ss.probs.shape[-1]
    freq = np.zeros(ss.labels.shape[1:] + (k,), dtype=np.float64)
    for c in range(k):
        freq[..., c] = (ss.labels == c).mean(axis=0)
    gamma = -(freq * np.log(freq + LOG_GUARD_EPS)).sum(axis=-1)
    return np.maximum(gamma, 0.0)


def write_sample_set(path: Path, ss: SampleSet) -> None:
    n, h, w, k = ss.probs.shape
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", SAMPLE_FORMAT_VERSION))
        fh.write(struct.pack("<5q", n, h, w, k, ss.seed))
        fh.write(ss.labels.astype(np.uint8).tobytes())
        fh.write(ss.probs.astype("<f4").tobytes())


def read_sample_set(path: Path) -> SampleSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SAMPLE_MAGIC:
            raise ValueError(f"{path} is not a sample-set file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != SAMPLE_FORMAT_VERSION:
            raise ValueError(f"unsupported sample-set format version {version}")
        n, h, w, k, seed = struct.unpack("<5q", fh.read(40))
        labels = np.frombuffer(fh.read(n * h * w), dtype=np.uint8).reshape(n, h, w)
        probs = np.frombuffer(fh.read(n * h * w * k * 4), dtype="<f4").reshape(n, h, w, k)
    return SampleSet(probs=probs.copy(), labels=labels.copy(), seed=seed)
