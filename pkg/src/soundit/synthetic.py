"""Synthetic soundscapes, landscapes and corpora for tests and demos."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datakit import ColorSceneAnnotator, Manifest, PairRecord, write_manifest
from .encoders import SAMPLE_RATE, seeded_rng, write_png, write_wav

SCENES = list(ColorSceneAnnotator.PROTOTYPES)


def soundscape(seconds: float, scene_index: int, seed: int = 0, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Band-limited noise bed plus high chirps; spectral shape depends on the scene."""
    rng = seeded_rng("soundscape", scene_index, seed)
    n = int(round(seconds * sr))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    centre = 200.0 * (1.6 ** (scene_index % 8))
    spec *= np.exp(-0.5 * (np.log(np.maximum(f, 1.0) / centre) / 0.6) ** 2)
    bed = np.fft.irfft(spec, n)
    bed /= np.abs(bed).max() + 1e-12
    t = np.arange(n) / sr
    chirp_f = 4000.0 + 350.0 * (scene_index % 8)
    env = (np.sin(2 * np.pi * (0.5 + 0.1 * (scene_index % 5)) * t) > 0.6).astype(float)
    chirp = env * np.sin(2 * np.pi * chirp_f * t + 3 * np.sin(2 * np.pi * 7 * t))
    return 0.3 * bed + 0.1 * chirp


def voice_like(seconds: float, f0: float = 140.0, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Harmonic series with syllable-rate amplitude modulation."""
    t = np.arange(int(round(seconds * sr))) / sr
    wave = sum(np.sin(2 * np.pi * f0 * k * t) / k for k in range(1, 20) if f0 * k < 3200)
    wave *= 0.6 + 0.4 * np.sin(2 * np.pi * 4.0 * t)
    return 0.4 * wave / np.abs(wave).max()


def landscape(scene_index: int, variant: int = 0, size: int = 32, seed: int = 0) -> np.ndarray:
    """Smooth image around the scene's prototype colour: brighter top rows, a
    horizontal gradient and a low-frequency ripple."""
    rng = seeded_rng("landscape", scene_index, variant, seed)
    base = np.array(ColorSceneAnnotator.PROTOTYPES[SCENES[scene_index % len(SCENES)]], dtype=np.float64)
    y, x = np.mgrid[0:size, 0:size] / (size - 1)
    sky = (1.0 - y)[..., None] * rng.uniform(20, 50)
    tilt = (x - 0.5)[..., None] * rng.uniform(-40, 40, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    ripple = (np.sin(2 * np.pi * x + phase[0]) * np.cos(2 * np.pi * y + phase[1]))[..., None] * 15
    return np.clip(base + sky + tilt + ripple, 0, 255).astype(np.uint8)


def make_corpus(root, n_pairs: int = 8, seconds: float = 10.0, seed: int = 0,
                image_size: int = 32) -> Path:
    """Write ``n_pairs`` (audio, image, prompt) triples and their manifest.

    Returns the manifest path (``root/manifest.jsonl``).
    """
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_pairs):
        s = i % len(SCENES)
        pid = f"pair-{i:04d}"
        write_wav(root / "audio" / f"{pid}.wav", soundscape(seconds, s, seed + i))
        write_png(root / "images" / f"{pid}.png", landscape(s, i, image_size, seed))
        records.append(PairRecord(pid, f"audio/{pid}.wav", 0.0, seconds, f"images/{pid}.png",
                                  SCENES[s], lat=10.0 + i, lon=20.0 - i,
                                  audio_time="2023-05-01T12:00:00", image_time="2023-06-01T12:00:00",
                                  time_gap=31 * 86400.0, localization_score=1.0))
    path = root / "manifest.jsonl"
    write_manifest(path, Manifest(records, "synthetic"))
    return path


def make_media_dir(root, recordings: list[dict], seed: int = 0, image_size: int = 32) -> Path:
    """Media directory for the pairing pipeline.

    Each entry: ``{"id", "seconds", "scene", "images": n, "voice": bool,
    "captured_at", "image_times": [...]}``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for j, r in enumerate(recordings):
        rid = r["id"]
        wave = voice_like(r["seconds"]) if r.get("voice") else soundscape(r["seconds"], r.get("scene", j), seed + j)
        write_wav(root / f"{rid}.wav", wave)
        images = []
        times = r.get("image_times") or [None] * r.get("images", 1)
        for k in range(r.get("images", 1)):
            name = f"{rid}_{k:02d}.png"
            write_png(root / name, landscape(r.get("scene", j) + k, k, image_size, seed))
            images.append({"path": name, "captured_at": times[k]})
        meta = {"lat": r.get("lat", 45.0), "lon": r.get("lon", 7.0),
                "captured_at": r.get("captured_at"), "kind": "recording", "images": images}
        (root / f"{rid}.json").write_text(json.dumps(meta, sort_keys=True))
    return root
