"""Frozen-key handling across the whole pipeline, library and CLI."""

import json

import numpy as np
import pytest

from tallpack import (
    MergeConfig,
    TrainableKeySpec,
    build_archive,
    load_archive,
    merge_checkpoints,
    read_tallpack,
    reconstruct_task,
    save_archive,
    write_tallpack,
)
from tallpack.cli import run
from tallpack.errors import FrozenKeyModified

from conftest import tmap


@pytest.fixture
def frozen_collection():
    """Two checkpoints sharing an untouched classification head."""
    rng = np.random.default_rng(21)
    head = rng.standard_normal((3, 4)).astype(np.float32)
    base = rng.standard_normal(32).astype(np.float32)
    pretrained = tmap(**{"enc.w": base, "head.w": head})
    checkpoints = []
    for _ in range(2):
        tuned = base + rng.uniform(0.1, 1.0, 32).astype(np.float32)
        checkpoints.append(tmap(**{"enc.w": tuned, "head.w": head}))
    return pretrained, checkpoints


def test_masks_cover_only_trainable_scalars(frozen_collection):
    pretrained, checkpoints = frozen_collection
    spec = TrainableKeySpec.from_frozen_patterns(pretrained.keys(), ["head.*"])
    archive = build_archive(pretrained, checkpoints, key_spec=spec)
    assert archive.mtl_vector.keys() == ("enc.w",)
    assert all(m.bit_count == 32 for m in archive.masks)
    assert archive.manifest["frozen_keys"] == ["head.w"]


def test_reconstruction_keeps_frozen_tensor_bits(frozen_collection, tmp_path):
    pretrained, checkpoints = frozen_collection
    spec = TrainableKeySpec.from_frozen_patterns(pretrained.keys(), ["head.*"])
    archive = build_archive(pretrained, checkpoints, labels=["a", "b"], key_spec=spec)
    path = tmp_path / "frozen.tlpk"
    write_tallpack(archive, path)
    rebuilt = reconstruct_task(read_tallpack(path), "a")
    assert rebuilt["head.w"].tobytes() == pretrained["head.w"].tobytes()


def test_merge_keeps_frozen_tensor(frozen_collection):
    pretrained, checkpoints = frozen_collection
    spec = TrainableKeySpec.from_frozen_patterns(pretrained.keys(), ["head.*"])
    result = merge_checkpoints(
        pretrained, checkpoints, key_spec=spec, config=MergeConfig(alpha=0.5)
    )
    assert result.merged["head.w"].tobytes() == pretrained["head.w"].tobytes()


def test_modified_frozen_tensor_is_an_error(frozen_collection):
    pretrained, checkpoints = frozen_collection
    spec = TrainableKeySpec.from_frozen_patterns(pretrained.keys(), ["head.*"])
    tampered = tmap(
        **{
            "enc.w": checkpoints[0]["enc.w"],
            "head.w": checkpoints[0]["head.w"] + np.float32(1.0),
        }
    )
    with pytest.raises(FrozenKeyModified):
        build_archive(pretrained, [tampered], key_spec=spec)


def test_cli_frozen_keys_flag(frozen_collection, tmp_path):
    pretrained, checkpoints = frozen_collection
    pre_path = tmp_path / "pre.safetensors"
    save_archive(pretrained, pre_path)
    ckpt_paths = []
    for i, ckpt in enumerate(checkpoints):
        p = tmp_path / f"ckpt{i}.safetensors"
        save_archive(ckpt, p)
        ckpt_paths.append(str(p))

    archive_path = tmp_path / "out.tlpk"
    code = run(
        ["compress", "--pretrained", str(pre_path), "--checkpoints", *ckpt_paths,
         "--frozen-keys", "head.*", "--out", str(archive_path)]
    )
    assert code == 0
    archive = read_tallpack(archive_path)
    assert archive.manifest["frozen_keys"] == ["head.w"]

    rebuilt_path = tmp_path / "rebuilt.safetensors"
    assert run(
        ["reconstruct", str(archive_path), "--task", "ckpt0", "--out", str(rebuilt_path)]
    ) == 0
    rebuilt = load_archive(rebuilt_path)
    assert rebuilt["head.w"].tobytes() == pretrained["head.w"].tobytes()
