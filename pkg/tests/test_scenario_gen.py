import numpy as np
import pytest

from trajdiff.io import ConfigError, DataError, read_csv
from trajdiff.scenario_gen import (GenConfig, class_counts, current_state, export_csv, generate_dataset,
                                   labels_from_future, load_dataset, save_dataset)
from trajdiff.vmm import rollout_array


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(GenConfig(n_scenarios=300, seed=4))


def test_shapes_and_masks(ds):
    assert ds.xi.shape == (300, 9, 4, 75)
    assert ds.Y.shape == (300, 2, 25) and ds.x0.shape == (300, 2, 25)
    assert ds.labels.shape == (300, 3) and np.all(ds.labels.sum(axis=1) == 1)
    present = ds.mask.sum(axis=1)
    assert present.min() >= 4 and present.max() <= 9
    assert np.all(ds.mask[:, 0] == 1)
    absent = ds.mask == 0
    assert np.all(ds.xi[absent] == 0)


def test_target_frame_convention(ds):
    st0 = current_state(ds.xi)
    assert np.allclose(st0[:, 0], 0.0, atol=1e-12)
    assert np.all((st0[:, 2] > 20) & (st0[:, 2] < 45))
    assert np.allclose(st0[:, :2], ds.state0[:, :2], atol=1e-9)


def test_lane_keep_stays_in_lane(ds):
    keep = ds.label_index == 0
    drift = np.abs(ds.Y[keep, 1, -1] - ds.xi[keep, 0, 1, 0])
    assert drift.max() < 0.5


def test_lane_changes_cross_one_lane(ds):
    for label, sign in ((1, 1.0), (2, -1.0)):
        sel = ds.label_index == label
        shift = ds.Y[sel, 1, -1] - ds.xi[sel, 0, 1, 0]
        assert np.all(np.abs(shift - sign * 3.4) < 0.3)


def test_balanced_class_counts():
    counts = class_counts(9841, (1 / 3, 1 / 3, 1 / 3))
    assert counts.sum() == 9841 and counts.max() - counts.min() <= 1
    assert sorted(class_counts(10, (0.5, 0.25, 0.25))) == [2, 3, 5]


def test_generated_counts_follow_mix():
    ds = generate_dataset(GenConfig(n_scenarios=100, seed=1))
    assert list(np.bincount(ds.label_index, minlength=3)) == list(class_counts(100, (1 / 3, 1 / 3, 1 / 3)))


def test_labels_match_realised_motion(ds):
    assert np.array_equal(labels_from_future(ds.Y, 3.4), ds.label_index)


def test_controls_round_trip_through_rollout(ds):
    pos = rollout_array(ds.state0, ds.x0, 0.2)
    err = np.max(np.linalg.norm(pos - ds.Y, axis=1))
    assert err < 0.1


def test_same_seed_gives_identical_bytes(tmp_path):
    cfg = GenConfig(n_scenarios=40, seed=9)
    save_dataset(generate_dataset(cfg), tmp_path / "a.bin")
    save_dataset(generate_dataset(cfg), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    save_dataset(generate_dataset(GenConfig(n_scenarios=40, seed=10)), tmp_path / "c.bin")
    assert (tmp_path / "a.bin").read_bytes() != (tmp_path / "c.bin").read_bytes()


def test_save_load_and_csv(tmp_path, ds):
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.config == ds.config
    for name in ("xi", "mask", "Y", "labels", "x0", "state0"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    export_csv(ds, tmp_path / "ds.csv")
    header, rows = read_csv(tmp_path / "ds.csv")
    assert len(rows) == 300 and len(header) == 6 + 4 * 25
    assert rows[0][1] in ("kl", "lcl", "lcr")


def test_corrupt_dataset_rejected(tmp_path, ds):
    path = tmp_path / "ds.bin"
    save_dataset(ds.subset(np.arange(5)), path)
    raw = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError):
        load_dataset(tmp_path / "short.bin")
    (tmp_path / "long.bin").write_bytes(raw + b"\0")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "long.bin")
    bumped = raw[:4] + (2).to_bytes(4, "little") + raw[8:]
    (tmp_path / "ver.bin").write_bytes(bumped)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "ver.bin")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing.bin")


@pytest.mark.parametrize("kw", [dict(mix=(0.5, 0.5, 0.5)), dict(mix=(1.0, 0.0)), dict(n_scenarios=0),
                                dict(speed_min=30.0, speed_max=20.0), dict(max_neighbors=9), dict(tau=0.0),
                                dict(mix=(1.2, -0.1, -0.1))])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        GenConfig(**kw)


def test_defaults():
    c = GenConfig()
    assert (c.n_scenarios, c.lane_width, c.t_obs_steps, c.t_pred_steps, c.tau) == (9841, 3.4, 75, 25, 0.2)
    assert c.speed_min <= 36 <= c.speed_max
