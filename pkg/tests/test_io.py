import gzip
import struct

import numpy as np
import pytest

from spinectx.checkpoint import (Checkpoint, CheckpointError, dumps, load_checkpoint, loads,
                                 read_config, save_checkpoint)
from spinectx.network import ModelConfig, init_params
from spinectx.training import OptimState, adam_step
from spinectx.volume import (HEADER_DTYPE, Volume, VolumeFormatError, build_nifti, parse_nifti,
                             read_volume, write_volume)


@pytest.fixture
def mask_volume(rng):
    data = (rng.random((5, 6, 7)) < 0.3).astype(np.float32)
    return Volume(data, spacing=(2.0, 0.8, 0.8), origin=(-10.0, 4.0, 1.5), kind="binary-mask")


def test_raw_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.standard_normal((4, 5, 6)).astype(np.float32)
    data[0, 0, 0] = np.nan
    data[0, 0, 1] = -0.0
    vol = Volume(data, spacing=(1.5, 1.0, 0.7), origin=(1, 2, 3))
    write_volume(tmp_path / "v.json", vol)
    back = read_volume(tmp_path / "v.f32")
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing == vol.spacing and back.origin == vol.origin


@pytest.mark.parametrize("name", ["m.nii", "m.nii.gz"])
def test_nifti_mask_round_trip(tmp_path, mask_volume, name):
    write_volume(tmp_path / name, mask_volume)
    back = read_volume(tmp_path / name)
    assert back.kind == "binary-mask"
    assert np.array_equal(back.data, mask_volume.data)
    assert back.spacing == pytest.approx(mask_volume.spacing)
    assert back.origin == pytest.approx(mask_volume.origin)


def test_nifti_gzip_output_is_deterministic(tmp_path, mask_volume):
    write_volume(tmp_path / "a.nii.gz", mask_volume)
    write_volume(tmp_path / "b.nii.gz", mask_volume)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_nifti_header_layout(mask_volume):
    raw = build_nifti(mask_volume)
    hdr = np.frombuffer(raw[:348], HEADER_DTYPE)[0]
    assert hdr["sizeof_hdr"] == 348 and hdr["magic"] == b"n+1"
    assert list(hdr["dim"][:4]) == [3, 7, 6, 5]
    assert hdr["datatype"] == 2 and hdr["vox_offset"] == 352
    assert len(raw) == 352 + 5 * 6 * 7


def test_nifti_big_endian_and_scaling():
    hdr = np.zeros(1, HEADER_DTYPE.newbyteorder(">"))
    hdr["sizeof_hdr"] = 348
    hdr["dim"][0, :4] = [3, 2, 2, 2]
    hdr["datatype"] = 4
    hdr["bitpix"] = 16
    hdr["pixdim"][0, 1:4] = [0.5, 0.5, 3.0]
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = 2.0
    hdr["scl_inter"] = -1024.0
    hdr["magic"] = b"n+1"
    payload = np.arange(8, dtype=">i2")
    vol = parse_nifti(hdr.tobytes() + b"\0" * 4 + payload.tobytes())
    assert vol.spacing == (3.0, 0.5, 0.5)
    assert np.array_equal(vol.data.ravel(), np.arange(8) * 2.0 - 1024.0)


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b[:200], "truncated NIfTI header"),
    (lambda b: b[:-10], "truncated NIfTI payload"),
    (lambda b: b[:344] + b"ni1\0" + b[348:], "magic"),
    (lambda b: b[:70] + struct.pack("<h", 64) + b[72:], "datatype"),
    (lambda b: b"\x1f\x8b" + b"garbage", "gzip"),
])
def test_nifti_rejects_malformed(mask_volume, mutate, match):
    with pytest.raises(VolumeFormatError, match=match):
        parse_nifti(mutate(build_nifti(mask_volume)))


def test_unknown_extension(tmp_path):
    with pytest.raises(VolumeFormatError, match="extension"):
        read_volume(tmp_path / "x.mhd")


def test_volume_kind_validation():
    with pytest.raises(ValueError, match="binary-mask"):
        Volume(np.full((2, 2, 2), 0.5), kind="binary-mask")
    with pytest.raises(ValueError, match="probability"):
        Volume(np.full((2, 2, 2), 1.5), kind="probability")
    with pytest.raises(ValueError, match="3-D"):
        Volume(np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@pytest.fixture
def checkpoint(micro_config):
    params = init_params(micro_config, 7)
    grads = {k: np.ones_like(t.data) for k, t in params.params.items()}
    state = adam_step({k: t.data for k, t in params.params.items()}, grads, OptimState())
    return Checkpoint(micro_config, params, {"epoch": 3, "best_val_loss": 0.25},
                      optimizer=state.to_dict())


def test_checkpoint_save_load_save_identical(tmp_path, checkpoint):
    save_checkpoint(tmp_path / "a.scru", checkpoint)
    loaded = load_checkpoint(tmp_path / "a.scru")
    save_checkpoint(tmp_path / "b.scru", loaded)
    assert (tmp_path / "a.scru").read_bytes() == (tmp_path / "b.scru").read_bytes()
    assert loaded.config == checkpoint.config
    assert loaded.metadata == checkpoint.metadata
    for k, t in checkpoint.params.params.items():
        assert np.array_equal(loaded.params.params[k].data, t.data)
    assert loaded.optimizer["t"] == 1


def test_checkpoint_float64_survives(checkpoint):
    ck = Checkpoint(checkpoint.config, checkpoint.params.astype(np.float64))
    back = loads(dumps(ck))
    assert all(t.dtype == np.float64 for t in back.params.params.values())


def test_read_config_only_reads_header(tmp_path, checkpoint):
    path = tmp_path / "c.scru"
    blob = dumps(checkpoint)
    path.write_bytes(blob[: len(blob) // 2])  # payload damaged, header intact
    assert read_config(path) == checkpoint.config
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:-20] + bytes([b[-20] ^ 1]) + b[-19:], "CRC"),
])
def test_checkpoint_corruption_detected(checkpoint, mutate, match):
    with pytest.raises(CheckpointError, match=match):
        loads(mutate(dumps(checkpoint)))
