"""Error-path contracts: stage aborts, halt-and-checkpoint, degenerate
batches, and the seeded smoke pipeline."""

import numpy as np
import pytest

from saor import data as D
from saor.cli import main
from saor.config import TrainConfig, ModelConfig, RenderConfig
from saor.evaluation import SyntheticSpec, generate_synthetic
from saor.losses import NonFiniteLossError
from saor.mesh import export_obj, icosphere
from saor.networks import SaorModel
from saor.training import StageError, Trainer, forward_sample


def tiny_cfg(**kw):
    cfg = TrainConfig(
        epochs=kw.pop("epochs", 1), batch=kw.pop("batch", 4), lr=1e-3,
        articulation_start_epoch=0, seed=0, checkpoint_every=100,
        model=ModelConfig(feature_dim=32, subdivisions=1, image_size=32,
                          uv_height=8, uv_width=16, texture_res=8,
                          num_parts=4, num_cameras=2),
        render=RenderConfig(k_faces=6, tile=8))
    cfg.validate()
    return cfg


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("errdata")
    spec = SyntheticSpec(image_size=32)
    manifest = generate_synthetic(spec, 8, seed=1, out_dir=root)
    records = D.read_manifest(manifest)
    for i, rec in enumerate(records):
        rec["cluster_id"] = i % 4
    clustered = root / "clustered.jsonl"
    D.write_manifest(clustered, records)
    return D.load_records(clustered, 32)


def test_nan_weights_abort_with_stage_name(small_data):
    cfg = tiny_cfg()
    model = SaorModel(cfg.model, seed=0)
    model.store["enc.stem.k"].data = np.full_like(
        model.store["enc.stem.k"].data, np.nan)
    with pytest.raises(StageError) as exc:
        forward_sample(model, small_data[0].image, cfg.render, 32)
    assert "encode" in str(exc.value)


def test_nonfinite_loss_checkpoints_and_halts(small_data, tmp_path,
                                              monkeypatch):
    cfg = tiny_cfg(epochs=2)
    trainer = Trainer(cfg, small_data, tmp_path / "halt")

    def boom(batch):
        raise NonFiniteLossError("loss term 'depth' is nan")

    monkeypatch.setattr(trainer, "step", boom)
    with pytest.raises(NonFiniteLossError):
        trainer.run()
    assert (tmp_path / "halt" / "checkpoint_halt.saor").exists()


def test_batch_of_one_skips_swap(small_data, tmp_path):
    cfg = tiny_cfg(batch=1)
    trainer = Trainer(cfg, small_data, tmp_path / "b1")
    from saor.data import balanced_batches
    stream = balanced_batches([r.cluster_id for r in small_data], 1,
                              trainer.rng, trainer._n_clusters)
    batch = next(stream)
    assert len(batch) == 1
    report = trainer.step(batch)
    assert report.values["swap"] == 0.0
    assert np.isfinite(report.values["total"])


def test_obj_export_io_error_names_path():
    m = icosphere(0)
    with pytest.raises(OSError) as exc:
        export_obj(m, m.vertices, "/nonexistent_dir_xyz/out.obj")
    assert "/nonexistent_dir_xyz/out.obj" in str(exc.value)


@pytest.mark.slow
def test_smoke_command_end_to_end(tmp_path):
    import time
    t0 = time.time()
    assert main(["smoke", "--out", str(tmp_path / "smoke"), "--seed", "0"]) == 0
    assert time.time() - t0 < 300  # well under the five-minute budget
    epochs_csv = (tmp_path / "smoke" / "run" / "losses_epochs.csv") \
        .read_text().splitlines()
    assert len(epochs_csv) == 1 + 3  # header + 3 epoch rows
    metrics = (tmp_path / "smoke" / "metrics.json").read_text()
    assert "pck@0.1" in metrics


def test_smoke_corrupt_manifest_nonzero_exit(tmp_path, monkeypatch):
    # corrupting the generated manifest must fail the pipeline with a
    # nonzero exit and the failing stage on stderr
    from saor import cli as C

    real_fit = D.fit_gmm

    def poisoned(masks, **kw):
        raise D.DataError("corrupt manifest")

    monkeypatch.setattr(D, "fit_gmm", poisoned)
    assert C.main(["smoke", "--out", str(tmp_path / "s"), "--seed", "1"]) == 1
    monkeypatch.setattr(D, "fit_gmm", real_fit)
