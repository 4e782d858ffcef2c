"""Training, checkpointing, sampling and ablation runs."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backends import load_backends
from .config import RunConfig
from .datakit import Manifest, read_manifest
from .diffusion import NoiseSchedule, build_schedule, sample_loop, training_loss
from .encoders import (DownsampleCodec, ToySceneEncoder, ToySoundscapeEncoder, read_image,
                       read_wav, write_png)
from .metrics import evaluate_suite
from .model import ConditioningBundle, SounDiT, count_parameters

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "soundit-checkpoint"
CHECKPOINT_VERSION = 1


def make_codec(cfg: RunConfig):
    if cfg.codec.kind != "downsample":
        raise ValueError(f"unsupported codec kind {cfg.codec.kind!r}")
    codec = DownsampleCodec(cfg.codec.image_size, cfg.codec.factor)
    if codec.latent_shape != cfg.model.latent_shape:
        raise ValueError(f"codec latent {codec.latent_shape} != model latent {cfg.model.latent_shape}")
    return codec


@dataclass
class Encoders:
    soundscape: ToySoundscapeEncoder
    scene: ToySceneEncoder

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Encoders":
        m = cfg.model
        return cls(ToySoundscapeEncoder(m.summary_dim, m.token_dim, m.num_tokens, seed=cfg.encoder_seed),
                   ToySceneEncoder(m.scene_dim, seed=cfg.encoder_seed))

    def conditions(self, waveforms: Sequence[np.ndarray], srs: Sequence[int],
                   prompts: Sequence[str | None]) -> ConditioningBundle:
        sound = [self.soundscape.encode(w, sr) for w, sr in zip(waveforms, srs)]
        scenes = [self.scene.encode(p) for p in prompts]
        known = torch.tensor([s is not None for s in scenes])
        zero = torch.zeros(self.scene.scene_dim)
        e_c = torch.stack([zero if s is None else s for s in scenes])
        return ConditioningBundle.build(torch.stack([s[0] for s in sound]),
                                        torch.stack([s[1] for s in sound]), e_c, scene_known=known)


def load_clip(path, start: float | None = None, end: float | None = None) -> tuple[np.ndarray, int]:
    wave, sr = read_wav(path)
    lo = 0 if start is None else int(round(start * sr))
    hi = len(wave) if end is None else int(round(end * sr))
    return wave[lo:hi], sr


@dataclass
class EncodedDataset:
    pair_ids: list[str]
    latents: torch.Tensor
    cond: ConditioningBundle

    def __len__(self) -> int:
        return len(self.pair_ids)

    @classmethod
    def from_manifest(cls, manifest: Manifest, codec, encoders: Encoders) -> "EncodedDataset":
        if len(manifest) == 0:
            raise ValueError("manifest has no pairs")
        latents, waves, srs, prompts = [], [], [], []
        for rec in manifest.records:
            latents.append(codec.encode(read_image(manifest.resolve(rec.image_path))))
            w, sr = load_clip(manifest.resolve(rec.audio_path), rec.clip_start, rec.clip_end)
            waves.append(w)
            srs.append(sr)
            prompts.append(rec.scene_prompt)
        return cls([r.pair_id for r in manifest.records], torch.stack(latents),
                   encoders.conditions(waves, srs, prompts))


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class Trainer:
    """Single-owner training loop with condition dropout for guidance."""

    def __init__(self, cfg: RunConfig, data: EncodedDataset):
        self.cfg, self.data = cfg, data
        torch.manual_seed(cfg.seed)
        self.model = SounDiT(cfg.model)
        self.schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.train.lr)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.losses: list[float] = []

    def next_batch(self) -> tuple[torch.Tensor, ConditioningBundle]:
        n, bs, g = len(self.data), self.cfg.train.batch_size, self.generator
        idx = torch.randperm(n, generator=g)[:bs] if bs <= n else torch.randint(n, (bs,), generator=g)
        return self.data.latents[idx], self.data.cond.index(idx)

    def train_step(self) -> float:
        z0, cond = self.next_batch()
        g, b, p = self.generator, z0.shape[0], self.cfg.train.dropout
        t = torch.randint(1, self.schedule.T + 1, (b,), generator=g)
        noise = torch.randn(z0.shape, generator=g)
        cond = cond.dropped(torch.rand(b, generator=g) < p, torch.rand(b, generator=g) < p)
        try:
            loss = training_loss(self.model, z0, cond, t, noise, self.schedule)
        except FloatingPointError as exc:
            raise FloatingPointError(f"step {self.step + 1}: {exc} (t={t.tolist()})") from exc
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self.losses.append(loss.item())
        return self.losses[-1]

    def train(self, steps: int, out_dir: Path | None = None,
              callback: Callable[[int, float], None] | None = None) -> list[float]:
        every = self.cfg.train.checkpoint_every
        for _ in range(steps):
            loss = self.train_step()
            if self.step % self.cfg.train.log_every == 0:
                log.info("step %d loss %.6f", self.step, loss)
            if callback is not None:
                callback(self.step, loss)
            if out_dir is not None and every and self.step % every == 0:
                self.save(Path(out_dir) / f"ckpt_{self.step:06d}.pt")
        if out_dir is not None:
            self.save(Path(out_dir) / "last.pt")
        return self.losses

    @torch.no_grad()
    def probe_loss(self, repeats: int = 8, seed: int = 1234) -> float:
        """Mean loss over a fixed set of (pair, t, noise) draws, no dropout."""
        g = torch.Generator().manual_seed(seed)
        idx = torch.arange(len(self.data)).repeat(repeats)
        z0, cond = self.data.latents[idx], self.data.cond.index(idx)
        t = torch.randint(1, self.schedule.T + 1, (len(idx),), generator=g)
        noise = torch.randn(z0.shape, generator=g)
        return training_loss(self.model, z0, cond, t, noise, self.schedule).item()

    def state(self) -> dict:
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": self.cfg.to_dict(), "config_hash": self.cfg.hash(),
                "model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(),
                "rng": self.generator.get_state(), "schedule": self.schedule.to_dict(),
                "step": self.step, "losses": list(self.losses)}

    def save(self, path: Path) -> None:
        _atomic_save(self.state(), Path(path))

    @classmethod
    def resume(cls, path, data: EncodedDataset) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(RunConfig.from_dict(ckpt["config"]), data)
        trainer.model.load_state_dict(ckpt["model"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.generator.set_state(ckpt["rng"])
        trainer.step = ckpt["step"]
        trainer.losses = list(ckpt["losses"])
        return trainer


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - corrupt or truncated file
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a SounDiT checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def load_model(path) -> tuple[SounDiT, RunConfig, NoiseSchedule]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt["config"])
    model = SounDiT(cfg.model)
    model.load_state_dict(ckpt["model"])
    return model.eval(), cfg, NoiseSchedule.from_dict(ckpt["schedule"])


def chain_generators(seed: int, keys: Sequence[str]) -> list[torch.Generator]:
    """One independent stream per chain, derived from (seed, key)."""
    out = []
    for k in keys:
        h = hashlib.sha256(f"{seed}\x1f{k}".encode()).digest()
        out.append(torch.Generator().manual_seed(int.from_bytes(h[:8], "little") >> 1))
    return out


@torch.no_grad()
def generate(model: SounDiT, cond: ConditioningBundle, schedule: NoiseSchedule, guidance: float,
             generators: Sequence[torch.Generator] | torch.Generator, guided: bool = True) -> torch.Tensor:
    shape = (cond.batch_size, *model.cfg.latent_shape)
    return sample_loop(model, cond, schedule, guidance, generators, shape, guided=guided)


def generate_for_manifest(model: SounDiT, data: EncodedDataset, schedule: NoiseSchedule, codec,
                          out_dir, guidance: float, seed: int) -> list[Path]:
    """Write ``<pair_id>.png`` for every pair, one RNG stream per pair."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z = generate(model, data.cond, schedule, guidance, chain_generators(seed, data.pair_ids))
    paths = []
    for pid, latent in zip(data.pair_ids, z):
        p = out_dir / f"{pid}.png"
        write_png(p, codec.decode(latent))
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# ablation

VARIANTS = {
    "full": {},
    "no_slrcm": {"use_slrcm": False},
    "no_s_adaln": {"use_s_adaln": False},
    "no_slrcm_s_adaln": {"use_slrcm": False, "use_s_adaln": False},
}


def ablation_plan(cfg: RunConfig, variants: Sequence[str] | None = None,
                  experts: Sequence[int] | None = None) -> list[tuple[str, RunConfig]]:
    variants = list(cfg.ablation.variants if variants is None else variants)
    experts = list(cfg.ablation.experts if experts is None else experts)
    plan = []
    for name in variants:
        if name not in VARIANTS:
            raise ValueError(f"unknown ablation variant {name!r}; known: {sorted(VARIANTS)}")
        plan.append((name, RunConfig.from_dict({**cfg.to_dict(),
                                                 "model": {**cfg.model.to_dict(), **VARIANTS[name]}})))
    for m in experts:
        model = {**cfg.model.to_dict(), "num_experts": int(m), "top_k": min(cfg.model.top_k, int(m))}
        plan.append((f"experts_{m}", RunConfig.from_dict({**cfg.to_dict(), "model": model})))
    if not plan:
        raise ValueError("ablation plan has no variants")
    return plan


ABLATION_COLUMNS = ["variant", "config_hash", "params_total", "params_expert", "final_loss",
                    "fid", "ais", "iis", "pss_element", "pss_scene_top1", "pss_scene_top5",
                    "pss_perception", "error"]


def run_ablation(cfg: RunConfig, manifest: Manifest | str | Path, out_dir,
                 plan: list[tuple[str, RunConfig]] | None = None) -> list[dict]:
    """Train and evaluate each variant on the same data and seed.

    A failing variant yields a row with ``error`` set; the others still run.
    """
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    out_dir = Path(out_dir)
    plan = plan or ablation_plan(cfg)
    backends = load_backends(cfg.backends)
    rows = []
    for name, vcfg in plan:
        row = {c: None for c in ABLATION_COLUMNS}
        row["variant"], row["config_hash"] = name, vcfg.hash()
        try:
            data = EncodedDataset.from_manifest(manifest, make_codec(vcfg), Encoders.from_config(vcfg))
            trainer = Trainer(vcfg, data)
            counts = count_parameters(trainer.model)
            row["params_total"], row["params_expert"] = counts["total"], counts["expert"]
            losses = trainer.train(vcfg.ablation.steps)
            row["final_loss"] = float(np.mean(losses[-10:]))
            gen_dir = out_dir / name / "generated"
            generate_for_manifest(trainer.model.eval(), data, trainer.schedule, make_codec(vcfg),
                                  gen_dir, vcfg.sample.guidance, vcfg.seed)
            report = evaluate_suite(manifest, gen_dir, backends)
            row.update({k: v for k, v in report.summary().items() if k in row})
        except Exception as exc:  # noqa: BLE001 - isolate variants
            log.error("variant %s failed: %s", name, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, ABLATION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r[k]) for k in ABLATION_COLUMNS})
    return buf.getvalue()
