"""Place Similarity Score (element / scene / perception), FID, AIS and IIS.

Scores compare each real landscape ``l_i`` against the generated ``l̂_i``.
Per-pair kernels work on predictor outputs; the ``pss_*`` wrappers take
image pairs plus a backend.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import NUM_ELEMENTS, PredictorBackends
from .datakit import Manifest, read_manifest
from .encoders import SAMPLE_RATE, read_image, read_wav

log = logging.getLogger(__name__)

REPORT_SCHEMA = "soundit-metric-report"
REPORT_VERSION = 1
FID_EPS = 1e-6

ImagePair = tuple[np.ndarray, np.ndarray]


class EvaluationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# element level

def element_vector(image: np.ndarray, segmenter, num_classes: int = NUM_ELEMENTS) -> np.ndarray:
    """Per-class pixel fractions over labels in ``[0, num_classes)``.

    Pixels with any other label are ignored; an all-unlabeled map gives zeros.
    """
    labels = np.asarray(segmenter(image)).ravel()
    labels = labels[(labels >= 0) & (labels < num_classes)].astype(np.int64)
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    total = counts.sum()
    return counts / total if total else counts


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    """Cosine similarity, or ``None`` when either vector is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.dot(a, b) / (na * nb))


def _require(pairs: Sequence) -> None:
    if len(pairs) == 0:
        raise ValueError("need at least one pair")


def pss_element(pairs: Sequence[ImagePair], segmenter) -> float:
    """Mean element-ratio cosine; pairs with an all-zero vector are skipped."""
    _require(pairs)
    sims = [cosine(element_vector(r, segmenter), element_vector(g, segmenter)) for r, g in pairs]
    sims = [s for s in sims if s is not None]
    if not sims:
        raise EvaluationError("every pair has an empty element vector")
    return float(np.mean(sims))


# --------------------------------------------------------------------------
# scene level

def top_k_labels(confidences: np.ndarray, k: int) -> list[int]:
    """Top-k class indices by confidence; ties go to the lower index."""
    conf = np.asarray(confidences, dtype=np.float64)
    order = np.lexsort((np.arange(conf.size), -conf))
    return [int(i) for i in order[:k]]


def scene_hit(conf_real: np.ndarray, conf_gen: np.ndarray, k: int) -> bool:
    return bool(set(top_k_labels(conf_real, k)) & set(top_k_labels(conf_gen, k)))


def pss_scene(pairs: Sequence[ImagePair], scene_classifier, k: int) -> float:
    """Fraction of pairs whose top-k scene sets intersect."""
    if k not in (1, 5):
        raise ValueError(f"k must be 1 or 5, got {k}")
    _require(pairs)
    return float(np.mean([scene_hit(scene_classifier(r), scene_classifier(g), k) for r, g in pairs]))


# --------------------------------------------------------------------------
# perception level

def perception_distance(r_real: np.ndarray, r_gen: np.ndarray) -> float:
    return float(np.sum(np.abs(np.asarray(r_real, np.float64) - np.asarray(r_gen, np.float64))))


def pss_perception(pairs: Sequence[ImagePair], perceiver) -> float:
    """Mean L1 distance between six-dimensional perception vectors (lower is better)."""
    _require(pairs)
    return float(np.mean([perception_distance(perceiver(r), perceiver(g)) for r, g in pairs]))


# --------------------------------------------------------------------------
# general metrics

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Tr((S1 S2)^{1/2}) via the similar PSD matrix S1^{1/2} S2 S1^{1/2}."""
    r = _psd_sqrt(s1)
    vals = np.linalg.eigvalsh((r @ s2 @ r + (r @ s2 @ r).T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -1e-8 * scale:
        raise np.linalg.LinAlgError("covariance product is not PSD")
    return float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = FID_EPS) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    diff = mu1 - mu2
    try:
        tr_cov = _trace_sqrt_product(s1, s2)
    except np.linalg.LinAlgError:
        log.warning("FID: covariance product not PSD, adding %g to the diagonal", eps)
        offset = eps * np.eye(s1.shape[0])
        s1, s2 = s1 + offset, s2 + offset
        tr_cov = _trace_sqrt_product(s1, s2)
    return max(0.0, float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_cov))


def fid(features_real: np.ndarray, features_gen: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(features_real, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_gen, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature width mismatch {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("FID needs at least two samples per set")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def embedding_similarity(u: np.ndarray, v: np.ndarray, signed: bool = True) -> float:
    """Cosine similarity; signed backends are remapped to [0, 1] by (1 + cos) / 2."""
    c = cosine(np.asarray(u, np.float64), np.asarray(v, np.float64))
    if c is None:
        raise EvaluationError("zero embedding")
    return 0.5 * (1.0 + c) if signed else c


def similarity(a, image_b: np.ndarray, joint_embedder, sr: int | None = None) -> float:
    """AIS when ``a`` is a waveform (1-D), IIS when it is an image."""
    a = np.asarray(a)
    ea = joint_embedder.embed_audio(a, sr or SAMPLE_RATE) if a.ndim == 1 else joint_embedder.embed_image(a)
    return embedding_similarity(ea, joint_embedder.embed_image(image_b), joint_embedder.signed)


# --------------------------------------------------------------------------
# suite

@dataclass
class MetricReport:
    n: int
    fid: float | None
    ais: float | None
    iis: float | None
    pss_element: float | None
    pss_scene: dict[int, float]
    pss_perception: float | None
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    skipped_element: list[str] = field(default_factory=list)
    backends: dict = field(default_factory=dict)

    @property
    def pss_scene_top1(self) -> float | None:
        return self.pss_scene.get(1)

    @property
    def pss_scene_top5(self) -> float | None:
        return self.pss_scene.get(5)

    def summary(self) -> dict:
        out = {"n": self.n, "n_evaluated": len(self.rows), "fid": self.fid, "ais": self.ais,
               "iis": self.iis, "pss_element": self.pss_element, "pss_perception": self.pss_perception}
        for k, v in sorted(self.pss_scene.items()):
            out[f"pss_scene_top{k}"] = v
        return out

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "summary": self.summary(),
                "backends": self.backends, "failures": self.failures,
                "skipped_element": self.skipped_element, "rows": self.rows}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema") != REPORT_SCHEMA or d.get("version") != REPORT_VERSION:
            raise ValueError("not a metric report of a supported version")
        s = d["summary"]
        scene = {int(k[len("pss_scene_top"):]): v for k, v in s.items() if k.startswith("pss_scene_top")}
        return cls(s["n"], s["fid"], s["ais"], s["iis"], s["pss_element"], scene, s["pss_perception"],
                   d["rows"], d["failures"], d["skipped_element"], d["backends"])


def generated_path(generated_dir: str | Path, pair_id: str) -> Path:
    return Path(generated_dir) / f"{pair_id}.png"


def _load_clip(manifest: Manifest, rec) -> tuple[np.ndarray, int]:
    wave, sr = read_wav(manifest.resolve(rec.audio_path))
    lo, hi = int(round(rec.clip_start * sr)), int(round(rec.clip_end * sr))
    return wave[lo:hi], sr


def _pair_row(manifest: Manifest, rec, generated_dir: Path, backends: PredictorBackends,
              k_list: Sequence[int]) -> dict:
    real = read_image(manifest.resolve(rec.image_path))
    gen = read_image(generated_path(generated_dir, rec.pair_id))
    wave, sr = _load_clip(manifest, rec)
    conf_r, conf_g = backends.scene_classifier(real), backends.scene_classifier(gen)
    je = backends.joint_embedder
    row = {
        "pair_id": rec.pair_id,
        "element": cosine(element_vector(real, backends.segmenter), element_vector(gen, backends.segmenter)),
        "perception": perception_distance(backends.perceiver(real), backends.perceiver(gen)),
        "ais": embedding_similarity(je.embed_audio(wave, sr), je.embed_image(gen), je.signed),
        "iis": embedding_similarity(je.embed_image(real), je.embed_image(gen), je.signed),
    }
    for k in k_list:
        row[f"scene_top{k}"] = int(scene_hit(conf_r, conf_g, k))
    row["_features"] = (backends.feature_extractor(real), backends.feature_extractor(gen))
    return row


def evaluate_suite(manifest: Manifest | str | Path, generated_dir: str | Path,
                   backends: PredictorBackends, k_list: Sequence[int] = (1, 5),
                   workers: int = 1) -> MetricReport:
    """Score every manifest pair against ``<generated_dir>/<pair_id>.png``.

    Pairs whose generated image is missing (or whose predictors fail) are
    listed under ``failures`` and left out of every mean.
    """
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    if len(manifest) == 0:
        raise ValueError("manifest has no pairs")
    for k in k_list:
        if k not in (1, 5):
            raise ValueError(f"k must be 1 or 5, got {k}")
    generated_dir = Path(generated_dir)

    def work(rec):
        if not generated_path(generated_dir, rec.pair_id).exists():
            return {"pair_id": rec.pair_id, "error": "missing generated image"}
        try:
            return _pair_row(manifest, rec, generated_dir, backends, k_list)
        except Exception as exc:  # noqa: BLE001 - a failing pair must not sink the run
            return {"pair_id": rec.pair_id, "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1 and backends.thread_safe:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, manifest.records))
    else:
        results = [work(r) for r in manifest.records]

    rows = [r for r in results if "error" not in r]
    failures = [r for r in results if "error" in r]
    feats = [r.pop("_features") for r in rows]
    skipped = [r["pair_id"] for r in rows if r["element"] is None]

    def mean(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    fid_value = None
    if len(rows) >= 2:
        fid_value = fid(np.stack([f[0] for f in feats]), np.stack([f[1] for f in feats]))
    elif rows:
        log.warning("FID needs at least two evaluated pairs; reporting null")
    return MetricReport(
        n=len(manifest), fid=fid_value, ais=mean("ais"), iis=mean("iis"),
        pss_element=mean("element"), pss_scene={k: mean(f"scene_top{k}") for k in k_list},
        pss_perception=mean("perception"), rows=rows, failures=failures,
        skipped_element=skipped, backends=backends.describe())


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_report(report: MetricReport, path: str | Path) -> Path:
    """Write the JSON report and a ``.rows.csv`` with the per-pair rows."""
    path = Path(path)
    _atomic_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    csv_path = path.with_suffix(".rows.csv")
    cols = ["pair_id", "element", *(f"scene_top{k}" for k in sorted(report.pss_scene)),
            "perception", "ais", "iis"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in report.rows:
        writer.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                         for c in cols])
    _atomic_text(csv_path, buf.getvalue())
    return csv_path


def read_report(path: str | Path) -> MetricReport:
    with open(path, encoding="utf-8") as fh:
        return MetricReport.from_dict(json.load(fh))

