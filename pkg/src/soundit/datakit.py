"""Soundscape-landscape pairing pipeline and the JSONL manifest format.

Pipeline: segment recordings into 10 s clips -> drop voice-dominated clips ->
pick the best-matching image (or video frame) per clip -> drop pairs with a
large capture-time gap -> annotate scene prompts -> write the manifest.

Media directory layout consumed by :func:`run_pairing`::

    media/
      <rec>.wav          mono PCM recording (one per recording)
      <rec>.json         optional sidecar: lat, lon, captured_at, kind,
                         images: [{path, captured_at}], frames_dir, fps
      <rec>_*.png        default candidate images when the sidecar lists none
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .encoders import read_image, read_wav

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "soundit-manifest"
MANIFEST_VERSION = 1
CLIP_SECONDS = 10.0


@dataclass
class Recording:
    id: str
    waveform: np.ndarray
    sr: int
    lat: float | None = None
    lon: float | None = None
    captured_at: str | None = None
    kind: str = "recording"            # or "video"
    audio_path: str | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"recording {self.id!r} is empty")
        if self.lat is not None and not -90 <= self.lat <= 90:
            raise ValueError(f"latitude out of range: {self.lat}")
        if self.lon is not None and not -180 <= self.lon <= 180:
            raise ValueError(f"longitude out of range: {self.lon}")
        if self.kind not in ("recording", "video"):
            raise ValueError(f"unknown source kind {self.kind!r}")

    @property
    def duration(self) -> float:
        return len(self.waveform) / self.sr


@dataclass
class Clip:
    recording_id: str
    index: int
    start: float
    end: float
    waveform: np.ndarray
    sr: int


@dataclass
class PairRecord:
    pair_id: str
    audio_path: str
    clip_start: float
    clip_end: float
    image_path: str
    scene_prompt: str = ""
    lat: float | None = None
    lon: float | None = None
    audio_time: str | None = None
    image_time: str | None = None
    time_gap: float | None = None
    localization_score: float | None = None
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PairRecord":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Manifest:
    records: list[PairRecord]
    config_hash: str = ""
    root: Path | None = None        # directory relative paths resolve against

    def header(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION,
                "config_hash": self.config_hash, "count": len(self.records)}

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Manifest) and self.records == other.records
                and self.config_hash == other.config_hash)


# --------------------------------------------------------------------------
# backend interfaces

class VoiceDetector(Protocol):
    def __call__(self, clip: Clip) -> float: ...


class Localizer(Protocol):
    def __call__(self, clip: Clip, image: np.ndarray) -> float: ...


class SceneAnnotator(Protocol):
    def __call__(self, image: np.ndarray) -> str: ...


class SpectralVoiceDetector:
    """Fraction of active frames that look voiced: most energy inside the
    speech band and a strong autocorrelation peak at a pitch lag (70-400 Hz)."""

    name = "spectral-voice"

    def __init__(self, frame_ms: float = 32.0, band=(80.0, 3400.0), band_ratio: float = 0.7,
                 min_periodicity: float = 0.5, pitch_range=(70.0, 400.0), floor_db: float = -50.0):
        self.frame_ms, self.band, self.pitch_range = frame_ms, band, pitch_range
        self.band_ratio, self.min_periodicity, self.floor_db = band_ratio, min_periodicity, floor_db

    def __call__(self, clip: Clip) -> float:
        n = int(clip.sr * self.frame_ms / 1000)
        frames = clip.waveform[: len(clip.waveform) // n * n].reshape(-1, n)
        if frames.size == 0:
            return 0.0
        level = 10 * np.log10(np.mean(frames ** 2, axis=1) + 1e-20)
        active = level > self.floor_db
        if not active.any():
            return 0.0
        spec = np.abs(np.fft.rfft(frames * np.hanning(n), axis=1)) ** 2 + 1e-20
        freqs = np.fft.rfftfreq(n, 1.0 / clip.sr)
        in_band = spec[:, (freqs >= self.band[0]) & (freqs <= self.band[1])].sum(axis=1) / spec.sum(axis=1)
        x = frames - frames.mean(axis=1, keepdims=True)
        ac = np.fft.irfft(np.abs(np.fft.rfft(x, 2 * n, axis=1)) ** 2, axis=1)[:, :n]
        ac = ac / (ac[:, :1] + 1e-20)
        lo, hi = int(clip.sr / self.pitch_range[1]), min(n - 1, int(clip.sr / self.pitch_range[0]))
        periodicity = ac[:, lo:hi + 1].max(axis=1)
        voiced = active & (in_band > self.band_ratio) & (periodicity > self.min_periodicity)
        return float(voiced.sum() / active.sum())


class EmbeddingLocalizer:
    """Relevance = joint-space cosine between clip audio and image, in [0, 1]."""

    name = "embedding-localizer"

    def __init__(self, embedder):
        self.embedder = embedder

    def __call__(self, clip: Clip, image: np.ndarray) -> float:
        a = self.embedder.embed_audio(clip.waveform, clip.sr)
        b = self.embedder.embed_image(image)
        cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        return 0.5 * (1.0 + cos)


class ColorSceneAnnotator:
    """Nearest mean-colour prototype -> scene prompt."""

    name = "color-scene"
    PROTOTYPES = {
        "park": (70, 140, 60),
        "forest": (30, 80, 35),
        "beach": (215, 195, 150),
        "lake": (60, 110, 190),
        "street": (120, 120, 125),
        "residential neighborhood": (170, 120, 90),
        "snow": (235, 240, 245),
        "desert": (220, 160, 90),
    }

    def __call__(self, image: np.ndarray) -> str:
        mean = np.asarray(image, dtype=np.float64).reshape(-1, 3).mean(axis=0)
        names = list(self.PROTOTYPES)
        d = [np.sum((mean - np.array(self.PROTOTYPES[k])) ** 2) for k in names]
        return names[int(np.argmin(d))]


# --------------------------------------------------------------------------
# pipeline operations

def segment_recording(rec: Recording, clip_seconds: float = CLIP_SECONDS) -> list[Clip]:
    """Consecutive non-overlapping windows from t=0; a trailing remainder
    shorter than ``clip_seconds`` is dropped."""
    per_clip = int(round(clip_seconds * rec.sr))
    if per_clip <= 0:
        raise ValueError("clip length must be positive")
    count = len(rec.waveform) // per_clip
    return [Clip(rec.id, i, i * clip_seconds, (i + 1) * clip_seconds,
                 rec.waveform[i * per_clip:(i + 1) * per_clip], rec.sr)
            for i in range(count)]


def frame_indices(num_frames: int, count: int = 10) -> list[int]:
    """Centred strata: ``floor((i + 0.5) * F / count)`` for i < count."""
    if num_frames < count:
        raise ValueError(f"need at least {count} frames, got {num_frames}")
    return [int(math.floor((i + 0.5) * num_frames / count)) for i in range(count)]


def extract_frames(frames: Sequence, count: int = 10) -> list:
    return [frames[i] for i in frame_indices(len(frames), count)]


def filter_voice(clips: Iterable[Clip], detector: VoiceDetector, threshold: float = 0.5) -> list[Clip]:
    """Keep clips whose voice fraction is below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    kept = []
    for clip in clips:
        try:
            frac = float(detector(clip))
        except Exception as exc:  # noqa: BLE001 - detector is a plugin
            log.warning("voice detector failed on %s[%d]: %s", clip.recording_id, clip.index, exc)
            continue
        if frac < threshold:
            kept.append(clip)
    return kept


def match_pair(clip: Clip, candidates: Sequence[np.ndarray], localizer: Localizer) -> tuple[int, float]:
    """Index and score of the best candidate; ties go to the earliest index."""
    if not candidates:
        raise ValueError("no candidates to match")
    best, best_score = -1, -math.inf
    for i, cand in enumerate(candidates):
        try:
            score = float(localizer(clip, cand))
        except Exception as exc:  # noqa: BLE001
            log.warning("localizer failed on candidate %d: %s", i, exc)
            continue
        if math.isfinite(score) and score > best_score:
            best, best_score = i, score
    if best < 0:
        raise RuntimeError(f"all {len(candidates)} candidates failed scoring")
    return best, best_score


def _parse_time(s: str | None) -> datetime | None:
    return datetime.fromisoformat(s) if s else None


def time_gap_seconds(audio_time: str | None, image_time: str | None) -> float | None:
    a, b = _parse_time(audio_time), _parse_time(image_time)
    if a is None or b is None:
        return None
    return abs((a - b).total_seconds())


def filter_time_gap(pairs: Iterable[PairRecord], max_gap_days: float = 365.0) -> list[PairRecord]:
    """Drop pairs captured more than ``max_gap_days`` apart. Pairs missing a
    timestamp are kept and flagged ``missing_time``."""
    kept = []
    limit = max_gap_days * 86400.0
    for p in pairs:
        gap = time_gap_seconds(p.audio_time, p.image_time)
        if gap is None:
            flags = p.flags if "missing_time" in p.flags else [*p.flags, "missing_time"]
            kept.append(replace(p, time_gap=None, flags=flags))
        elif gap <= limit:
            kept.append(replace(p, time_gap=gap))
    return kept


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _atomic_write_lines(path: Path, lines: Iterable[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=True)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    _atomic_write_lines(path, [_dumps(manifest.header())]
                        + [_dumps(r.to_json()) for r in manifest.records])


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest file (missing header)")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: not a manifest (schema={header.get('schema')!r})")
    if header.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {header.get('version')}")
    records = [PairRecord.from_json(json.loads(ln)) for ln in lines[1:]]
    if header.get("count", len(records)) != len(records):
        raise ValueError(f"{path}: header count {header['count']} != {len(records)} records")
    return Manifest(records, header.get("config_hash", ""), root=path.parent.resolve())


def quarantine_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".quarantine.jsonl")


def build_manifest(pairs: Sequence[PairRecord], annotator: SceneAnnotator | None,
                   path: str | Path | None = None, config: dict | None = None,
                   load_image: Callable[[str], np.ndarray] | None = None) -> Manifest:
    """Annotate scene prompts and write the manifest.

    Pairs that already carry a prompt keep it. Pairs whose annotation fails or
    comes back empty go to the ``.quarantine.jsonl`` sidecar.
    """
    root = Path(path).parent if path is not None else Path(".")
    load_image = load_image or (lambda p: read_image(p if Path(p).is_absolute() else root / p))
    good, quarantined = [], []
    seen = set()
    for p in pairs:
        if p.pair_id in seen:
            raise ValueError(f"duplicate pair_id {p.pair_id!r}")
        seen.add(p.pair_id)
        prompt = p.scene_prompt
        if not prompt and annotator is not None:
            try:
                prompt = (annotator(load_image(p.image_path)) or "").strip()
            except Exception as exc:  # noqa: BLE001
                log.warning("scene annotation failed for %s: %s", p.pair_id, exc)
                prompt = ""
        (good if prompt else quarantined).append(replace(p, scene_prompt=prompt))
    manifest = Manifest(good, config_hash(config or {}), root=root.resolve())
    if path is not None:
        write_manifest(path, manifest)
        if quarantined:
            _atomic_write_lines(quarantine_path(path), [_dumps(r.to_json()) for r in quarantined])
    return manifest


# --------------------------------------------------------------------------
# media directory driver

@dataclass
class PairingConfig:
    clip_seconds: float = CLIP_SECONDS
    frames_per_clip: int = 10
    voice_threshold: float = 0.5
    max_gap_days: float = 365.0


@dataclass
class FilterBackends:
    voice_detector: VoiceDetector
    localizer: Localizer
    scene_annotator: SceneAnnotator

    def describe(self) -> dict:
        return {f.name: getattr(getattr(self, f.name), "name", type(getattr(self, f.name)).__name__)
                for f in fields(self)}


def default_filter_backends(seed: int = 0) -> FilterBackends:
    from .backends import ToyJointEmbedder
    return FilterBackends(SpectralVoiceDetector(), EmbeddingLocalizer(ToyJointEmbedder(seed=seed)),
                          ColorSceneAnnotator())


def _rel(path: Path, root: Path) -> str:
    return os.path.relpath(path.resolve(), root.resolve()).replace(os.sep, "/")


def _load_sidecar(wav: Path) -> dict:
    side = wav.with_suffix(".json")
    if side.exists():
        with open(side, encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def _candidates(wav: Path, meta: dict, clip: Clip) -> list[tuple[Path, str | None]]:
    """(image path, capture time) candidates for one clip."""
    base = wav.parent
    if meta.get("kind", "recording") == "video":
        frames = sorted((base / meta["frames_dir"]).glob("*.png"))
        fps = float(meta["fps"])
        lo, hi = math.ceil(clip.start * fps - 1e-9), math.ceil(clip.end * fps - 1e-9)
        window = frames[lo:min(hi, len(frames))]
        return [(f, meta.get("captured_at")) for f in extract_frames(window, meta.get("frames_per_clip", 10))]
    if "images" in meta:
        return [(base / im["path"], im.get("captured_at")) for im in meta["images"]]
    return [(p, None) for p in sorted(base.glob(f"{wav.stem}_*.png"))]


def pair_recording(wav: Path, backends: FilterBackends, cfg: PairingConfig,
                   out_root: Path) -> list[PairRecord]:
    meta = _load_sidecar(wav)
    waveform, sr = read_wav(wav)
    rec = Recording(wav.stem, waveform, sr, meta.get("lat"), meta.get("lon"),
                    meta.get("captured_at"), meta.get("kind", "recording"), str(wav))
    clips = filter_voice(segment_recording(rec, cfg.clip_seconds), backends.voice_detector,
                         cfg.voice_threshold)
    pairs = []
    for clip in clips:
        meta_clip = {**meta, "frames_per_clip": cfg.frames_per_clip}
        cands = _candidates(wav, meta_clip, clip)
        if not cands:
            log.warning("%s[%d]: no candidate images", rec.id, clip.index)
            continue
        images = [read_image(p) for p, _ in cands]
        best, score = match_pair(clip, images, backends.localizer)
        img_path, img_time = cands[best]
        pairs.append(PairRecord(
            pair_id=f"{rec.id}-{clip.index:04d}", audio_path=_rel(wav, out_root),
            clip_start=clip.start, clip_end=clip.end, image_path=_rel(img_path, out_root),
            lat=rec.lat, lon=rec.lon, audio_time=rec.captured_at, image_time=img_time,
            localization_score=score))
    return pairs


def run_pairing(media_dir: str | Path, out_path: str | Path, backends: FilterBackends | None = None,
                cfg: PairingConfig | None = None) -> tuple[Manifest, list[str]]:
    """Run the full pipeline over ``media_dir``. Returns the manifest and the
    list of per-file failures (which do not stop the run)."""
    media_dir, out_path = Path(media_dir), Path(out_path)
    backends = backends or default_filter_backends()
    cfg = cfg or PairingConfig()
    out_root = out_path.parent
    out_root.mkdir(parents=True, exist_ok=True)
    wavs = sorted(media_dir.glob("*.wav"))
    if not wavs:
        log.warning("no .wav recordings found in %s", media_dir)
    failures, pairs = [], []
    for wav in wavs:
        try:
            pairs.extend(pair_recording(wav, backends, cfg, out_root))
        except Exception as exc:  # noqa: BLE001 - isolate per-file failures
            log.error("skipping %s: %s", wav.name, exc)
            failures.append(f"{wav.name}: {exc}")
    pairs = filter_time_gap(pairs, cfg.max_gap_days)
    hashed = {**asdict(cfg), "backends": backends.describe()}
    manifest = build_manifest(pairs, backends.scene_annotator, out_path, hashed)
    return manifest, failures
