"""Landscape codecs and soundscape / scene encoders.

The defaults here are small deterministic stand-ins for a pretrained VAE and
a joint audio-text embedder. Anything implementing the same methods can be
swapped in.
"""
from __future__ import annotations

import hashlib
import re
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from scipy.io import wavfile
from scipy.signal import stft

SAMPLE_RATE = 16000


# --------------------------------------------------------------------------
# media io

def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono float waveform in [-1, 1] and its sample rate."""
    sr, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    return np.asarray(data, dtype=np.float64), int(sr)


def write_wav(path: str | Path, waveform: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sr, pcm)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(str(path), format="PNG")


def seeded_rng(*keys) -> np.random.Generator:
    """Generator seeded from a stable hash of ``keys``."""
    digest = hashlib.sha256("\x1f".join(map(str, keys)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


# --------------------------------------------------------------------------
# landscape codecs

class LandscapeCodec(Protocol):
    latent_shape: tuple[int, int, int]

    def encode(self, image: np.ndarray) -> torch.Tensor: ...

    def decode(self, latent: torch.Tensor) -> np.ndarray: ...


class DownsampleCodec:
    """Blockwise-mean encoder with nearest-neighbour decoder.

    Images (H, W, 3) uint8 map to latents (3, H/f, W/f) in [-1, 1].
    """

    def __init__(self, image_size: int = 32, factor: int = 4):
        if image_size % factor:
            raise ValueError(f"factor {factor} must divide image size {image_size}")
        self.image_size, self.factor = image_size, factor
        self.latent_shape = (3, image_size // factor, image_size // factor)

    def _check(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.shape != (self.image_size, self.image_size, 3):
            image = np.asarray(Image.fromarray(image.astype(np.uint8)).resize(
                (self.image_size, self.image_size), Image.BILINEAR))
        return image.astype(np.float64) / 255.0

    def encode(self, image: np.ndarray) -> torch.Tensor:
        x = self._check(image)
        f, n = self.factor, self.image_size // self.factor
        blocks = x.reshape(n, f, n, f, 3).mean(axis=(1, 3))
        return torch.from_numpy(blocks.transpose(2, 0, 1) * 2.0 - 1.0).float()

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        z = latent.detach().to(torch.float64).numpy()
        img = np.repeat(np.repeat(z.transpose(1, 2, 0), self.factor, 0), self.factor, 1)
        return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"kind": "downsample", "image_size": self.image_size, "factor": self.factor}


class ConvAutoencoderCodec(nn.Module):
    """Tiny strided-conv autoencoder; train with :func:`train_codec`."""

    def __init__(self, image_size: int = 32, latent_channels: int = 3, hidden: int = 32):
        super().__init__()
        self.image_size = image_size
        self.latent_shape = (latent_channels, image_size // 4, image_size // 4)
        self.enc = nn.Sequential(
            nn.Conv2d(3, hidden, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden, latent_channels, 3, 1, 1), nn.Tanh())
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, hidden, 3, 1, 1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, 3, 4, 2, 1), nn.Tanh())

    @staticmethod
    def _to_tensor(images: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.asarray(images, dtype=np.float32) / 127.5 - 1.0)
        return x.permute(0, 3, 1, 2)

    @torch.no_grad()
    def encode(self, image: np.ndarray) -> torch.Tensor:
        return self.enc(self._to_tensor(np.asarray(image)[None]))[0]

    @torch.no_grad()
    def decode(self, latent: torch.Tensor) -> np.ndarray:
        img = self.dec(latent[None].float())[0].permute(1, 2, 0).numpy()
        return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def train_codec(images: Sequence[np.ndarray], steps: int = 500, lr: float = 2e-3,
                seed: int = 0, image_size: int = 32) -> ConvAutoencoderCodec:
    torch.manual_seed(seed)
    codec = ConvAutoencoderCodec(image_size)
    x = codec._to_tensor(np.stack(images))
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    for _ in range(steps):
        loss = torch.mean((codec.dec(codec.enc(x)) - x) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return codec.eval()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(255.0 ** 2 / mse))


# --------------------------------------------------------------------------
# soundscape encoder

def mel_filterbank(n_mels: int, n_fft: int, sr: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-style mel filters, (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sr / 2

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / np.maximum(mid - lo, 1e-9)
    down = (hi - freqs) / np.maximum(hi - mid, 1e-9)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(waveform: np.ndarray, sr: int = SAMPLE_RATE, n_fft: int = 512,
            hop: int = 256, n_mels: int = 32) -> np.ndarray:
    """(frames, n_mels) log-mel spectrogram."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size < n_fft:
        waveform = np.pad(waveform, (0, n_fft - waveform.size))
    _, _, spec = stft(waveform, fs=sr, nperseg=n_fft, noverlap=n_fft - hop, boundary=None,
                      padded=False)
    power = np.abs(spec) ** 2
    return np.log(mel_filterbank(n_mels, n_fft, sr) @ power + 1e-8).T


class ToySoundscapeEncoder:
    """Waveform -> (pooled embedding e_s, token sequence) via log-mel statistics
    and fixed seeded random projections."""

    def __init__(self, summary_dim: int = 32, token_dim: int = 32, num_tokens: int = 8,
                 n_mels: int = 32, seed: int = 0):
        self.summary_dim, self.token_dim, self.num_tokens = summary_dim, token_dim, num_tokens
        self.n_mels = n_mels
        rng = seeded_rng("soundscape-encoder", seed)
        self.summary_proj = rng.standard_normal((2 * n_mels, summary_dim)) / np.sqrt(2 * n_mels)
        self.token_proj = rng.standard_normal((n_mels, token_dim)) / np.sqrt(n_mels)

    def encode(self, waveform: np.ndarray, sr: int = SAMPLE_RATE) -> tuple[torch.Tensor, torch.Tensor]:
        mel = log_mel(waveform, sr, n_mels=self.n_mels)
        mel = mel - mel.mean()
        stats = np.concatenate([mel.mean(axis=0), mel.std(axis=0)])
        e_s = stats @ self.summary_proj
        e_s = e_s / max(np.linalg.norm(e_s), 1e-12)
        segments = np.array_split(np.arange(mel.shape[0]), self.num_tokens)
        frames = np.stack([mel[s].mean(axis=0) if len(s) else np.zeros(self.n_mels)
                           for s in segments])
        tokens = frames @ self.token_proj / max(np.abs(frames).max(), 1e-12)
        return torch.from_numpy(e_s).float(), torch.from_numpy(tokens).float()


# --------------------------------------------------------------------------
# scene encoder

SCENE_VOCABULARY = (
    "street", "residential", "neighborhood", "park", "beach", "forest", "river", "lake",
    "mountain", "field", "farm", "highway", "road", "plaza", "market", "downtown",
    "harbor", "garden", "desert", "snow", "village", "bridge", "station", "campus",
)


class ToySceneEncoder:
    """Scene prompt -> embedding over a closed vocabulary.

    Each known word has a fixed embedding seeded from the word itself; a prompt
    maps to the normalized mean over its known words. Prompts with no known
    word return ``None`` (the caller substitutes the null scene embedding).
    """

    def __init__(self, scene_dim: int = 32, vocabulary: Sequence[str] = SCENE_VOCABULARY,
                 seed: int = 0):
        self.scene_dim = scene_dim
        self.vocabulary = tuple(vocabulary)
        self.table = {w: seeded_rng("scene-word", seed, w).standard_normal(scene_dim)
                      for w in self.vocabulary}

    def tokens(self, prompt: str) -> list[str]:
        return [w for w in re.findall(r"[a-z]+", prompt.lower()) if w in self.table]

    def encode(self, prompt: str | None) -> torch.Tensor | None:
        words = self.tokens(prompt or "")
        if not words:
            return None
        v = np.mean([self.table[w] for w in words], axis=0)
        return torch.from_numpy(v / max(np.linalg.norm(v), 1e-12)).float()
