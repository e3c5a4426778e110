import json
import struct

import numpy as np
import pytest

from mctfuse.data import (
    ContainerFormatError, ManifestSchemaError, ShapeMismatchError, SynthConfig, TruncatedPayloadError,
    decode_tensor, encode_tensor, generate_dataset, read_dataset, read_tensor, write_dataset, write_tensor,
)
from mctfuse.data.synth import (
    AMPLITUDE_THRESHOLD, LABEL_RULES, NUM_LABELS, GenerationError, check_manifest_invariants,
    generate_archetypes, labels_from_indicators, trajectory,
)


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "<i8"])
def test_container_round_trip(dtype, tmp_path, rng):
    arr = (rng.standard_normal((2, 3, 4)) * 10).astype(dtype)
    write_tensor(tmp_path / "a.mmt", arr)
    back = read_tensor(tmp_path / "a.mmt")
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_container_header_layout():
    buf = encode_tensor(np.zeros((2, 5), dtype=np.float32))
    assert buf[:4] == b"MMT1" and buf[4] == 1 and buf[5] == 2
    assert struct.unpack_from("<2I", buf, 6) == (2, 5)
    assert len(buf) == 6 + 8 + 40


def test_container_errors(tmp_path):
    good = encode_tensor(np.ones(4))
    with pytest.raises(ContainerFormatError):
        decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(ContainerFormatError):
        decode_tensor(good[:4] + bytes([9]) + good[5:])
    with pytest.raises(TruncatedPayloadError):
        decode_tensor(good[:-1])
    (tmp_path / "t.mmt").write_bytes(good + b"\0")
    with pytest.raises(ContainerFormatError):
        read_tensor(tmp_path / "t.mmt")
    with pytest.raises(TypeError):
        encode_tensor(np.ones(2, dtype=np.int16))


def test_labels_from_indicators_rules():
    assert len(LABEL_RULES) == NUM_LABELS
    assert labels_from_indicators(np.zeros(10)).sum() == 0
    assert labels_from_indicators(np.ones(10)).sum() == NUM_LABELS


def test_archetype_labels_follow_amplitudes():
    for a in generate_archetypes(24, 6, seed=2):
        np.testing.assert_array_equal(a.label, labels_from_indicators(a.amplitude.reshape(-1) > AMPLITUDE_THRESHOLD))


def test_archetypes_distinct_and_novel_unseen():
    arch = generate_archetypes(24, 6, seed=0)
    known = {tuple(a.label) for a in arch if not a.novel}
    new = [tuple(a.label) for a in arch if a.novel]
    assert len(known) == 24 and len(set(new)) == 6
    assert not known & set(new)
    seen_bits = np.any(np.array(list(known), dtype=bool), axis=0)
    assert all(not np.any(np.array(n, dtype=bool) & ~seen_bits) for n in new)


def test_archetype_request_too_large():
    with pytest.raises(GenerationError):
        generate_archetypes(1, 1, seed=0)


def test_trajectory_without_jitter_is_deterministic():
    a = generate_archetypes(4, 2, seed=0)[0]
    np.testing.assert_array_equal(trajectory(a, None, 8, 0.0), trajectory(a, None, 8, 0.0))


def test_default_dataset_shape_and_splits():
    ds = generate_dataset(SynthConfig())
    assert ds.video.shape == (600, 8, 32, 32, 1) and ds.skeleton.shape == (600, 8, 5, 2)
    counts = {s: len(ds.indices(s)) for s in ("train", "known_val", "known_test", "new_val", "new_test")}
    assert counts == {"train": 336, "known_val": 72, "known_test": 72, "new_val": 60, "new_test": 60}
    check_manifest_invariants(ds)


@pytest.mark.parametrize("seed", range(6))
def test_manifest_invariants_hold_across_seeds(seed):
    check_manifest_invariants(generate_dataset(SynthConfig(seed=seed, n_known=8, n_new=3,
                                                           samples_per_archetype=6)))


def test_manifest_invariant_violation_detected(tiny_ds):
    import copy
    ds = copy.deepcopy(tiny_ds)
    ds.manifest.train.append(ds.manifest.new_test[0])
    with pytest.raises(AssertionError):
        check_manifest_invariants(ds)


def test_generation_is_seed_deterministic():
    cfg = SynthConfig(seed=5, n_known=6, n_new=3, samples_per_archetype=6)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    np.testing.assert_array_equal(a.video, b.video)
    np.testing.assert_array_equal(a.skeleton, b.skeleton)
    assert a.manifest == b.manifest
    c = generate_dataset(SynthConfig(seed=6, n_known=6, n_new=3, samples_per_archetype=6))
    assert not np.array_equal(a.video, c.video)


def test_dataset_round_trip(tiny_ds, tmp_path):
    write_dataset(tiny_ds, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.video, tiny_ds.video)
    np.testing.assert_array_equal(back.skeleton, tiny_ds.skeleton)
    np.testing.assert_array_equal(back.labels, tiny_ds.labels)
    assert back.ids == tiny_ds.ids and back.manifest == tiny_ds.manifest
    assert back.config == tiny_ds.config


def test_dataset_schema_errors(tiny_ds, tmp_path):
    root = tmp_path / "d"
    write_dataset(tiny_ds, root)
    manifest = json.loads((root / "manifest.json").read_text())

    bad = [dict(manifest[0], label=manifest[0]["label"][:5])] + manifest[1:]
    (root / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(ManifestSchemaError):
        read_dataset(root)

    bad = [dict(manifest[0], extra=1)] + manifest[1:]
    (root / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(ManifestSchemaError):
        read_dataset(root)

    (root / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestSchemaError):
        read_dataset(root)

    (root / "manifest.json").write_text(json.dumps(manifest))
    write_tensor(root / manifest[0]["video_file"], np.zeros((8, 16, 16, 1), dtype=np.float32))
    with pytest.raises(ShapeMismatchError):
        read_dataset(root)


def test_truncated_tensor_file(tiny_ds, tmp_path):
    root = tmp_path / "d"
    write_dataset(tiny_ds, root)
    f = root / "tensors" / f"{tiny_ds.ids[0]}.skeleton.mmt"
    f.write_bytes(f.read_bytes()[:-3])
    with pytest.raises(TruncatedPayloadError):
        read_dataset(root)


def test_synth_config_rejects_other_joint_counts():
    with pytest.raises(ValueError):
        SynthConfig(joints=4)
