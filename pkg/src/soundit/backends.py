"""Predictor backends for the evaluation suite.

The real suite uses a 150-class ADE20K segmenter, a Places365 scene
classifier, a Place Pulse perception model, an Inception feature extractor
and a joint audio/image embedder. The toy backends below are deterministic
functions of image colour statistics so the whole suite runs offline.
Plugins are loaded with :func:`load_backends` from a ``"module:factory"``
string.
"""
from __future__ import annotations

import importlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .encoders import SAMPLE_RATE, log_mel, seeded_rng

NUM_ELEMENTS = 150
NUM_SCENES = 365
PERCEPTION_DIMS = ("safe", "beautiful", "depressing", "lively", "wealthy", "boring")


class Segmenter(Protocol):
    num_classes: int

    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class SceneClassifier(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class Perceiver(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class FeatureExtractor(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class JointEmbedder(Protocol):
    signed: bool

    def embed_audio(self, waveform: np.ndarray, sr: int) -> np.ndarray: ...

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


COLOR_FEATURE_DIM = 27


def color_features(image: np.ndarray) -> np.ndarray:
    """Per-quadrant mean RGB, global RGB std, a 2x2x2 colour histogram and
    four global contrast statistics (``COLOR_FEATURE_DIM`` values)."""
    x = np.asarray(image, dtype=np.float64) / 255.0
    h, w = x.shape[:2]
    quads = [x[:h // 2, :w // 2], x[:h // 2, w // 2:], x[h // 2:, :w // 2], x[h // 2:, w // 2:]]
    means = np.concatenate([q.reshape(-1, 3).mean(axis=0) for q in quads])
    std = x.reshape(-1, 3).std(axis=0)
    bins = (x >= 0.5).astype(int)
    idx = bins[..., 0] * 4 + bins[..., 1] * 2 + bins[..., 2]
    hist = np.bincount(idx.ravel(), minlength=8) / idx.size
    return np.concatenate([means, std, hist, [x.mean(), x.std(), x.max() - x.min(),
                                              np.abs(np.diff(x, axis=0)).mean()]])


class ColorSegmenter:
    """Per-pixel label from a 5-level RGB quantization, scattered onto the
    150-class label space by a fixed permutation."""

    name = "toy-color-segmenter"
    num_classes = NUM_ELEMENTS

    def __init__(self, levels: int = 5, seed: int = 0):
        self.levels = levels
        self.lookup = seeded_rng("segmenter", seed).permutation(NUM_ELEMENTS)[: levels ** 3]

    def __call__(self, image: np.ndarray) -> np.ndarray:
        q = np.minimum(np.asarray(image, dtype=np.int64) * self.levels // 256, self.levels - 1)
        code = (q[..., 0] * self.levels + q[..., 1]) * self.levels + q[..., 2]
        return self.lookup[code]


class _ProjectionHead:
    def __init__(self, key: str, out_dim: int, seed: int, scale: float = 4.0):
        rng = seeded_rng(key, seed)
        self.w = rng.standard_normal((COLOR_FEATURE_DIM, out_dim)) * scale / np.sqrt(COLOR_FEATURE_DIM)
        self.b = rng.standard_normal(out_dim) * 0.5

    def logits(self, image: np.ndarray) -> np.ndarray:
        return color_features(image) @ self.w + self.b


class ProjectionSceneClassifier(_ProjectionHead):
    """365 softmax confidences from a fixed projection of colour features."""

    name = "toy-scene-classifier"

    def __init__(self, seed: int = 0):
        super().__init__("scene", NUM_SCENES, seed)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        z = self.logits(image)
        e = np.exp(z - z.max())
        return e / e.sum()


class ProjectionPerceiver(_ProjectionHead):
    """Six perception scores in (0, 1)."""

    name = "toy-perceiver"

    def __init__(self, seed: int = 0):
        super().__init__("perception", len(PERCEPTION_DIMS), seed)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(image)))


class ColorFeatureExtractor:
    name = "toy-color-features"

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return color_features(image)


class ToyJointEmbedder:
    """Audio and images projected into one signed 32-d space."""

    name = "toy-joint-embedder"
    signed = True

    def __init__(self, dim: int = 32, n_mels: int = 32, seed: int = 0):
        rng = seeded_rng("joint", seed)
        self.n_mels = n_mels
        self.audio_w = rng.standard_normal((2 * n_mels, dim)) / np.sqrt(2 * n_mels)
        self.image_w = rng.standard_normal((COLOR_FEATURE_DIM, dim)) / np.sqrt(COLOR_FEATURE_DIM)

    def embed_audio(self, waveform: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
        mel = log_mel(waveform, sr, n_mels=self.n_mels)
        mel = mel - mel.mean()
        return np.concatenate([mel.mean(axis=0), mel.std(axis=0)]) @ self.audio_w

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        f = color_features(image)
        return (f - f.mean()) @ self.image_w


@dataclass
class PredictorBackends:
    segmenter: Segmenter
    scene_classifier: SceneClassifier
    perceiver: Perceiver
    feature_extractor: FeatureExtractor
    joint_embedder: JointEmbedder
    thread_safe: bool = True

    def describe(self) -> dict:
        names = ("segmenter", "scene_classifier", "perceiver", "feature_extractor", "joint_embedder")
        return {n: getattr(getattr(self, n), "name", type(getattr(self, n)).__name__) for n in names}


def toy_backends(seed: int = 0) -> PredictorBackends:
    return PredictorBackends(ColorSegmenter(seed=seed), ProjectionSceneClassifier(seed),
                             ProjectionPerceiver(seed), ColorFeatureExtractor(),
                             ToyJointEmbedder(seed=seed))


def load_backends(spec: dict | None = None) -> PredictorBackends:
    """``{"factory": "pkg.module:fn", ...kwargs}`` or ``{"kind": "toy", "seed": 0}``."""
    spec = dict(spec or {})
    factory = spec.pop("factory", None)
    if factory is None:
        kind = spec.pop("kind", "toy")
        if kind != "toy":
            raise ValueError(f"unknown backend kind {kind!r}")
        return toy_backends(**spec)
    module, _, attr = factory.partition(":")
    return getattr(importlib.import_module(module), attr)(**spec)
