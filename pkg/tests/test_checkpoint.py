import pytest
import torch

from advpurify import container
from advpurify.checkpoint import load_checkpoint, save_checkpoint
from advpurify.classifier import MicroClassifier, predict
from advpurify.diffusion import make_linear_schedule
from advpurify.errors import CheckpointMismatchError, CheckpointVersionError, CorruptCheckpointError

from helpers import tiny_classifier, tiny_predictor

SCHEDULE = make_linear_schedule()


def test_classifier_round_trip_is_byte_identical(tmp_path):
    model = tiny_classifier()
    save_checkpoint(model, tmp_path / "a.ckpt", seed=3, extra={"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt", expect_kind="classifier")
    assert meta["seed"] == 3 and meta["extra"] == {"note": "x"}
    x = torch.rand(4, 1, 32, 32)
    assert torch.equal(predict(model, x), predict(loaded, x))
    save_checkpoint(loaded, tmp_path / "b.ckpt", seed=3, extra={"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_double_precision_micro_network_keeps_dtype(tmp_path):
    model = MicroClassifier().double()
    save_checkpoint(model, tmp_path / "m.ckpt", seed=0)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert next(loaded.parameters()).dtype == torch.float64


def test_denoiser_round_trip_with_schedule(tmp_path):
    model = tiny_predictor()
    save_checkpoint(model, tmp_path / "d.ckpt", seed=1, schedule=SCHEDULE)
    loaded, meta = load_checkpoint(tmp_path / "d.ckpt", expect_kind="denoiser", schedule=SCHEDULE)
    assert meta["schedule"] == SCHEDULE
    x = torch.rand(2, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(model(x, 5), loaded(x, 5))


def test_denoiser_needs_schedule(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tiny_predictor(), tmp_path / "d.ckpt", seed=1)


def test_schedule_mismatch(tmp_path):
    save_checkpoint(tiny_predictor(), tmp_path / "d.ckpt", seed=1, schedule=SCHEDULE)
    with pytest.raises(CheckpointMismatchError, match="schedule"):
        load_checkpoint(tmp_path / "d.ckpt", schedule=make_linear_schedule(500))


def test_wrong_kind(tmp_path):
    save_checkpoint(tiny_classifier(), tmp_path / "c.ckpt", seed=0)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "c.ckpt", expect_kind="denoiser")


def test_shape_mismatch(tmp_path):
    save_checkpoint(tiny_classifier(), tmp_path / "c.ckpt", seed=0)
    meta, arrays = container.read(tmp_path / "c.ckpt")
    meta["config"]["hidden"] = 16
    container.write(tmp_path / "bad.ckpt", meta, arrays)
    with pytest.raises(CheckpointMismatchError, match="shape"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_truncated_and_bitflipped_files(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(tiny_classifier(), path, seed=0)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_future_version_rejected(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(tiny_classifier(), path, seed=0)
    blob = bytearray(path.read_bytes())
    blob[8] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
