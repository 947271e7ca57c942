"""End-to-end optimization: per-sample forward pipeline, in-batch shape
swapping, the two-phase articulation schedule, and checkpoint/resume.

Each step renders every batch member twice (once normally, once as the swap
recipient of another member's deformed shape); camera hypotheses other than
the argmax are scored on detached quarter-resolution silhouettes only.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import SampleRecord, balanced_batches, bilinear_resize_np
from .losses import (LossTerms, LossReport, NonFiniteLossError,
                     PerceptualPyramid, l_depth, l_mask, l_part, l_percp,
                     l_pose_score, l_rgb, shape_regularizers, total_loss,
                     REPORT_FIELDS)
from .mesh import face_adjacency, uniform_laplacian
from .networks import SaorModel
from .optim import adam_step, load_checkpoint, save_checkpoint
from .render import CameraPose, RenderOutput, render
from .skinning import lbs_apply, swap_shape

log = logging.getLogger("saor")


class StageError(RuntimeError):
    """A forward stage produced non-finite values; carries the stage name."""


@dataclass
class ForwardResult:
    phi: Tensor
    deformed: Tensor          # S' (N, 3)
    articulation: object
    shape: Tensor             # S (N, 3)
    texture: Tensor
    pose: CameraPose
    hypotheses: Tensor        # (C, 6) decoded poses
    alpha: Tensor             # (C,) scores
    out: RenderOutput


def _check(stage: str, *tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise StageError(f"non-finite values after stage {stage!r}")


def forward_sample(model: SaorModel, image, rcfg, size: int) -> ForwardResult:
    """One generation pass: encode, deform, articulate, texture, pose, render.

    Only the argmax-score camera is rendered (with gradients)."""
    phi = model.encode(image)
    _check("encode", phi)
    deformed = model.deform(phi)
    _check("deform", deformed)
    art = model.articulation_params(phi)
    shape = lbs_apply(deformed, art)
    _check("articulate", shape)
    tex = model.texture(phi)
    pose, hyps, alpha = model.pose(phi)
    _check("pose", hyps, alpha)
    out = render(shape, tex, pose, model.mesh, rcfg, size, size)
    _check("render", out.silhouette, out.depth)
    return ForwardResult(phi=phi, deformed=deformed, articulation=art,
                         shape=shape, texture=tex, pose=pose,
                         hypotheses=hyps, alpha=alpha, out=out)


def swap_pairing(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed-point-free pairing j(i) = (i + r) mod B, r uniform in [1, B-1]."""
    if batch_size < 2:
        raise ValueError("swap pairing needs a batch of at least 2")
    r = int(rng.integers(1, batch_size))
    return (np.arange(batch_size) + r) % batch_size


def score_hypotheses(model: SaorModel, fwd: ForwardResult, mask_np,
                     rcfg, size: int) -> np.ndarray:
    """Detached quarter-resolution silhouette loss for every camera."""
    q = max(size // 4, 8)
    mask_q = bilinear_resize_np(mask_np.astype(np.float32), q, q)
    losses = np.empty(model.cfg.num_cameras, dtype=np.float64)
    shape_const = Tensor(fwd.shape.data)
    hyp_np = fwd.hypotheses.data
    with ad.no_grad():
        for c in range(model.cfg.num_cameras):
            pose = CameraPose(azimuth=float(hyp_np[c, 0]),
                              elevation=float(hyp_np[c, 1]),
                              roll=float(hyp_np[c, 2]),
                              translation=hyp_np[c, 3:6])
            out = render(shape_const, None, pose, model.mesh, rcfg, q, q,
                         with_rgb=False)
            losses[c] = float(np.mean((out.silhouette.data - mask_q) ** 2))
    return losses


def sample_losses(model: SaorModel, trainer_ctx, record: SampleRecord,
                  fwd: ForwardResult, swap_out: RenderOutput,
                  hyp_losses) -> LossTerms:
    """Raw per-sample loss terms (reconstruction, swap, regularizers)."""
    image = Tensor(record.image)
    mask = Tensor(record.mask)
    terms = LossTerms()
    terms.rgb = l_rgb(image, fwd.out.rgb)
    terms.percp = l_percp(image, fwd.out.rgb, trainer_ctx.percp)
    terms.mask = l_mask(mask, fwd.out.silhouette)
    terms.depth = l_depth(Tensor(record.depth), fwd.out.depth, mask)
    if swap_out is not None:
        terms.swap_mask = l_mask(mask, swap_out.silhouette)
        terms.swap_rgb = l_rgb(image, swap_out.rgb)
    terms.part = l_part(fwd.articulation.weights)
    terms.smooth, terms.normal = shape_regularizers(
        model.mesh, trainer_ctx.laplacian, trainer_ctx.adjacency, fwd.shape)
    if hyp_losses is not None:
        terms.pose = l_pose_score(fwd.alpha, hyp_losses)
    return terms


def _mean_terms(per_sample: list[LossTerms]) -> LossTerms:
    out = LossTerms()
    n = len(per_sample)
    for name in vars(out):
        vals = [getattr(t, name) for t in per_sample
                if getattr(t, name) is not None]
        if vals:
            acc = vals[0]
            for v in vals[1:]:
                acc = acc + v
            setattr(out, name, acc * (1.0 / n))
    return out


class Trainer:
    """Owns the model, data, RNG, and output directory for one run."""

    def __init__(self, cfg: TrainConfig, records: list[SampleRecord],
                 out_dir, finetune: bool = False):
        from ._fpu import flush_subnormals
        flush_subnormals()
        cfg.validate()
        self.cfg = cfg
        self.records = records
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.finetune = finetune
        self.model = SaorModel(cfg.model, seed=cfg.seed)
        self.percp = PerceptualPyramid(self.model.store, seed=cfg.seed + 1)
        self.laplacian = uniform_laplacian(self.model.mesh)
        self.adjacency = face_adjacency(self.model.mesh)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.global_step = 0
        ids = [r.cluster_id for r in records]
        if any(i < 0 for i in ids):
            raise ValueError("all records need cluster ids; run clustering first")
        self._n_clusters = max(max(ids) + 1, 1)
        if cfg.finetune_from:
            load_checkpoint(self.model.store, cfg.finetune_from)

    # ------------------------------------------------------------- schedule

    def articulation_active(self, epoch: int) -> bool:
        if self.finetune:
            return True
        return epoch >= self.cfg.articulation_start_epoch

    @property
    def total_epochs(self) -> int:
        return self.cfg.finetune_epochs if self.finetune else self.cfg.epochs

    # ----------------------------------------------------------------- step

    def step(self, batch: np.ndarray) -> LossReport:
        cfg = self.cfg
        size = cfg.model.image_size
        ad.clear_tape()
        forwards = []
        for i in batch:
            rec = self.records[int(i)]
            forwards.append(forward_sample(self.model, rec.image, cfg.render,
                                           size))
        pairing = swap_pairing(len(batch), self.rng) if len(batch) >= 2 else None

        per_sample = []
        for bi, i in enumerate(batch):
            rec = self.records[int(i)]
            fwd = forwards[bi]
            swap_out = None
            if pairing is not None:
                donor = forwards[int(pairing[bi])]
                s_sw = swap_shape(donor.deformed, fwd.articulation)
                swap_out = render(s_sw, fwd.texture, fwd.pose, self.model.mesh,
                                  cfg.render, size, size)
            hyp = score_hypotheses(self.model, fwd, rec.mask, cfg.render, size)
            per_sample.append(sample_losses(self.model, self, rec, fwd,
                                            swap_out, hyp))
        total, report = total_loss(_mean_terms(per_sample), cfg.weights)
        self.model.store.zero_grad()
        ad.backward(total)
        adam_step(self.model.store, cfg.lr)
        ad.clear_tape()
        self.global_step += 1
        return report

    # ------------------------------------------------------------------ run

    def run(self):
        """Train to completion, writing loss CSVs and periodic checkpoints.

        A non-finite loss checkpoints and halts.  Returns the per-epoch mean
        total losses.
        """
        cfg = self.cfg
        steps_per_epoch = max(1, (len(self.records) + cfg.batch - 1) // cfg.batch)
        stream = balanced_batches([r.cluster_id for r in self.records],
                                  cfg.batch, self.rng, self._n_clusters)
        step_csv = self.out_dir / "losses_steps.csv"
        epoch_csv = self.out_dir / "losses_epochs.csv"
        new_run = self.global_step == 0
        mode = "w" if new_run else "a"
        epoch_means = []
        with open(step_csv, mode, newline="") as sf, \
                open(epoch_csv, mode, newline="") as ef:
            sw = csv.writer(sf)
            ew = csv.writer(ef)
            if new_run:
                sw.writerow(["epoch", "step"] + list(REPORT_FIELDS))
                ew.writerow(["epoch"] + list(REPORT_FIELDS))
            for epoch in range(self.epoch, self.total_epochs):
                self.epoch = epoch
                self.model.articulation_enabled = self.articulation_active(epoch)
                t0 = time.time()
                sums = {k: 0.0 for k in REPORT_FIELDS}
                for _ in range(steps_per_epoch):
                    batch = next(stream)
                    try:
                        report = self.step(batch)
                    except NonFiniteLossError as err:
                        log.error("halting: %s", err)
                        self.save(self.out_dir / "checkpoint_halt.saor")
                        raise
                    sw.writerow([epoch, self.global_step]
                                + [report.values[k] for k in REPORT_FIELDS])
                    for k in REPORT_FIELDS:
                        sums[k] += report.values[k]
                means = {k: v / steps_per_epoch for k, v in sums.items()}
                ew.writerow([epoch] + [means[k] for k in REPORT_FIELDS])
                sf.flush()
                ef.flush()
                epoch_means.append(means["total"])
                log.info("epoch %d: total %.5f (%.1fs)", epoch,
                         means["total"], time.time() - t0)
                self.epoch = epoch + 1
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    self.save(self.out_dir / f"checkpoint_ep{epoch + 1:04d}.saor")
        self.save(self.out_dir / "checkpoint_last.saor")
        return epoch_means

    # ------------------------------------------------------------ persist

    def save(self, path):
        save_checkpoint(self.model.store, path)
        state = {
            "epoch": self.epoch,
            "global_step": self.global_step,
            "rng_state": _rng_state_to_json(self.rng),
            "finetune": self.finetune,
        }
        Path(str(path) + ".state.json").write_text(json.dumps(state))

    def resume(self, path):
        """Restore weights, optimizer state, epoch counters, and RNG state."""
        load_checkpoint(self.model.store, path)
        state = json.loads(Path(str(path) + ".state.json").read_text())
        self.epoch = int(state["epoch"])
        self.global_step = int(state["global_step"])
        _rng_state_from_json(self.rng, state["rng_state"])
        self.finetune = bool(state.get("finetune", False))


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: int(v) for k, v in st["state"].items()},
            "has_uint32": int(st.get("has_uint32", 0)),
            "uinteger": int(st.get("uinteger", 0))}


def _rng_state_from_json(rng: np.random.Generator, blob: dict):
    st = rng.bit_generator.state
    st["state"] = {k: int(v) for k, v in blob["state"].items()}
    st["has_uint32"] = blob.get("has_uint32", 0)
    st["uinteger"] = blob.get("uinteger", 0)
    rng.bit_generator.state = st
