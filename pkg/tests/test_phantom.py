import json

import numpy as np
import pytest

from serdiff.phantom import (
    INTENSITY_TEMPLATES,
    N_CLASSES,
    TaskSpec,
    generate_sample,
    generate_task,
    load_dataset,
    make_task_spec,
    save_dataset,
    split_sizes,
)


def test_task_one_mapping():
    spec = make_task_spec(1, 42)
    assert spec.shape_family == "ellipse"
    assert spec.noise_sigma == 0.05
    assert spec.modality_gains == (1.0, 1.0, 1.0, 1.0)
    assert spec.seed == 43


@pytest.mark.parametrize(
    "task_id, family, sigma, spread",
    [(2, "lobulated", 0.08, 0.20), (3, "ring", 0.10, 0.35)],
)
def test_shifted_task_mapping(task_id, family, sigma, spread):
    spec = make_task_spec(task_id, 42)
    assert spec.shape_family == family
    assert spec.noise_sigma == sigma
    assert spec.seed == 42 + task_id
    dev = np.abs(np.array(spec.modality_gains) - 1.0)
    assert (dev <= spread + 1e-9).all() and (dev > 0).all()


def test_task_spec_deterministic():
    assert make_task_spec(2, 42) == make_task_spec(2, 42)
    assert make_task_spec(2, 42) != make_task_spec(2, 43)


def test_task_id_must_be_positive():
    with pytest.raises(ValueError):
        make_task_spec(0, 42)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(image_size=8),
        dict(modality_gains=(1.0, 1.0, 1.0)),
        dict(modality_gains=(1.0, 1.0, 1.0, 2.5)),
        dict(noise_sigma=1.0),
        dict(n_samples=0),
    ],
)
def test_task_spec_invariants(kwargs):
    with pytest.raises(ValueError):
        TaskSpec(task_id=1, **{"n_samples": 4, **kwargs})


def test_sample_deterministic():
    spec = make_task_spec(3, 7, n_samples=5, image_size=32)
    a, b = generate_sample(spec, 2), generate_sample(spec, 2)
    assert a.modalities.tobytes() == b.modalities.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()


@pytest.mark.parametrize("task_id", [1, 2, 3])
def test_sample_invariants(task_id):
    spec = make_task_spec(task_id, 0, n_samples=12, image_size=32)
    for i in range(spec.n_samples):
        s = generate_sample(spec, i)
        assert s.modalities.shape == (4, 32, 32)
        assert s.mask.shape == (N_CLASSES, 32, 32)
        assert (s.mask.sum(axis=0) == 1).all()
        assert np.isfinite(s.modalities).all()
        assert s.modalities.min() >= 0 and s.modalities.max() <= 1
        assert s.mask[1:].sum() > 0


def test_sample_index_out_of_range():
    spec = make_task_spec(1, 0, n_samples=3)
    with pytest.raises(ValueError):
        generate_sample(spec, 3)


def test_noise_free_sample_is_template_plus_ramp():
    spec = TaskSpec(task_id=1, n_samples=2, image_size=32, noise_sigma=0.0)
    s = generate_sample(spec, 0)
    labels = s.labels
    # Within a region, intensity minus its template is a plane (the ramp), so the
    # second differences along both axes vanish wherever three neighbours share a label.
    resid = s.modalities - INTENSITY_TEMPLATES[labels].transpose(2, 0, 1)
    same_row = (labels[:, :-2] == labels[:, 1:-1]) & (labels[:, 1:-1] == labels[:, 2:])
    d2 = resid[:, :, :-2] - 2 * resid[:, :, 1:-1] + resid[:, :, 2:]
    assert np.abs(d2[:, same_row]).max() < 1e-6
    assert np.abs(resid).max() < 0.1


def test_split_sizes_example():
    assert split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)


@pytest.mark.parametrize("bad", [(0.5, 0.5, 0.0), (0.5, 0.3, 0.3), (1.0, -0.5, 0.5)])
def test_split_fractions_invalid(bad):
    with pytest.raises(ValueError):
        split_sizes(10, bad)


def test_generate_task_splits():
    spec = make_task_spec(2, 1, n_samples=10, image_size=16)
    train, val, test = generate_task(spec, (0.8, 0.1, 0.1))
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    ids = [set(d.indices) for d in (train, val, test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == set(range(10))


def test_dataset_round_trip(tmp_path):
    spec = make_task_spec(1, 3, n_samples=6, image_size=16)
    train, _, _ = generate_task(spec, (0.5, 0.25, 0.25))
    save_dataset(train, tmp_path / "d", spec)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["format"] == "serdiff-dataset/1"
    assert manifest["n_samples"] == len(train)
    assert manifest["spec"]["task_id"] == 1
    back = load_dataset(tmp_path / "d")
    assert back.indices == train.indices
    np.testing.assert_array_equal(back.arrays()[0], train.arrays()[0])


def test_dataset_checksum_detects_tampering(tmp_path):
    spec = make_task_spec(1, 3, n_samples=4, image_size=16)
    train, _, _ = generate_task(spec, (0.5, 0.25, 0.25))
    save_dataset(train, tmp_path, spec)
    victim = tmp_path / f"sample_{train.indices[0]:05d}.npz"
    np.savez(victim, modalities=np.zeros((4, 16, 16), np.float32), mask=train.samples[0].mask)
    with pytest.raises(ValueError, match="checksum"):
        load_dataset(tmp_path)
