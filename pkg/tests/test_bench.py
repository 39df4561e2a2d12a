import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dat_ctta.bench import (ConfusionMatrix, DomainSpec, SceneConfig, StreamConfig, clean_stream, corrupt,
                            gen_scene, load_directory_dataset, make_stream)
from dat_ctta.bench import rawio
from dat_ctta.bench.corrupt import FOG_COLOR
from dat_ctta.errors import ConfigError, ContractError, LoadError


# scenes

def test_scene_determinism_and_range():
    cfg = SceneConfig()
    a, la = gen_scene(7, cfg)
    b, lb = gen_scene(7, cfg)
    assert a.tobytes() == b.tobytes() and la.tobytes() == lb.tobytes()
    assert a.shape == (3, 64, 64) and a.dtype == np.float32
    assert 0 <= a.min() and a.max() <= 1 and la.max() < cfg.num_classes


def test_every_class_occurs_over_200_seeds():
    cfg = SceneConfig(H=32, W=32)
    seen = set()
    for s in range(200):
        seen |= set(np.unique(gen_scene(s, cfg)[1]).tolist())
    assert seen == set(range(cfg.num_classes))


def test_scene_size_must_fit_model_depth():
    with pytest.raises(ConfigError):
        SceneConfig(H=60).validate(8)


# corruptions

@pytest.mark.parametrize("kind", ["clear", "fog", "night", "rain", "snow"])
def test_severity_zero_is_identity(kind):
    img, _ = gen_scene(1, SceneConfig())
    out = corrupt(img, DomainSpec(kind, 0.0), np.random.default_rng(0))
    assert out.tobytes() == img.tobytes()


def test_fog_full_severity_top_row():
    img, _ = gen_scene(2, SceneConfig())
    out = corrupt(img, DomainSpec("fog", 1.0), np.random.default_rng(0))
    assert np.all(np.abs(out[:, 0, :] - FOG_COLOR[:, None]) <= 0.05)


def test_night_darkens_monotonically():
    img, _ = gen_scene(3, SceneConfig())
    means = [corrupt(img, DomainSpec("night", s), np.random.default_rng(0)).mean() for s in (0.0, 0.5, 1.0)]
    assert means[0] > means[1] > means[2]


@pytest.mark.parametrize("kind", ["fog", "night"])
def test_distortion_non_decreasing_in_severity(kind):
    img, _ = gen_scene(4, SceneConfig())
    dev = [np.abs(corrupt(img, DomainSpec(kind, s), np.random.default_rng(5)) - img).mean()
           for s in np.linspace(0, 1, 6)]
    assert all(b >= a for a, b in zip(dev, dev[1:]))


def test_corruptions_clamped_and_validated():
    img, _ = gen_scene(5, SceneConfig())
    for kind in ("fog", "night", "rain", "snow"):
        out = corrupt(img, DomainSpec(kind, 1.0), np.random.default_rng(0))
        assert out.min() >= 0 and out.max() <= 1 and out.dtype == img.dtype
    with pytest.raises(ConfigError):
        corrupt(img, DomainSpec("hail", 0.5), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        corrupt(img, DomainSpec("fog", 1.5), np.random.default_rng(0))


# streams

def test_stream_layout():
    m = make_stream(StreamConfig(frames_per_domain=25, rounds=3), SceneConfig(H=16, W=16), seed=0)
    assert len(m) == 300
    assert [r.frame for r in m.records if r.boundary] == list(range(0, 300, 25))
    assert [r.domain for r in m.records[:100:25]] == ["fog", "night", "rain", "snow"]
    assert len({r.scene_seed for r in m.records}) == 300
    assert m.records[-1].round == 2


def test_stream_iteration_is_reproducible():
    m = make_stream(StreamConfig(frames_per_domain=3, rounds=1), SceneConfig(H=16, W=16), seed=4)
    a = b"".join(s.image.tobytes() + s.label.tobytes() for s in m)
    b = b"".join(s.image.tobytes() + s.label.tobytes() for s in m)
    assert a == b
    other = make_stream(StreamConfig(frames_per_domain=3, rounds=1), SceneConfig(H=16, W=16), seed=5)
    assert m.digest() != other.digest()
    assert m.digest() == make_stream(StreamConfig(frames_per_domain=3, rounds=1), SceneConfig(H=16, W=16), 4).digest()


def test_stream_ramp_and_validation():
    m = make_stream(StreamConfig(domains=("fog",), severities=(0.8,), frames_per_domain=4, rounds=1, ramp_frames=4),
                    SceneConfig(H=16, W=16))
    assert [r.severity for r in m.records] == pytest.approx([0.2, 0.4, 0.6, 0.8])
    with pytest.raises(ConfigError):
        StreamConfig(severities=(0.5,)).validate()
    with pytest.raises(ConfigError):
        StreamConfig(rounds=0).validate()


def test_clean_streams_are_disjoint_from_target():
    scene = SceneConfig(H=16, W=16)
    train = {r.scene_seed for r in clean_stream(scene, 50).records}
    held = {r.scene_seed for r in clean_stream(scene, 50, heldout=True).records}
    target = {r.scene_seed for r in make_stream(StreamConfig(frames_per_domain=5), scene).records}
    assert not (train & held) and not (train & target) and not (held & target)


# metrics

def brute_force_miou(pred, label, C):
    ious = []
    for c in range(C):
        p = {i for i, v in enumerate(pred.ravel()) if v == c}
        t = {i for i, v in enumerate(label.ravel()) if v == c}
        if p | t:
            ious.append(len(p & t) / len(p | t))
    return float(np.mean(ious))


def test_confusion_hand_case():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [1, 3]]
    np.testing.assert_allclose(cm.per_class_iou(), [0.6, 0.6])
    assert cm.miou() == pytest.approx(0.6)
    assert cm.pixel_acc() == pytest.approx(0.75)


def test_perfect_and_constant_predictions(rng):
    label = rng.integers(0, 4, (10, 10))
    cm = ConfusionMatrix(4).update(label, label)
    assert cm.miou() == 1.0 and cm.pixel_acc() == 1.0 and cm.total == 100
    cm = ConfusionMatrix(4).update(np.full_like(label, 2), label)
    assert cm.pixel_acc() == pytest.approx(np.mean(label == 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 5))
def test_miou_matches_brute_force(seed, C):
    rng = np.random.default_rng(seed)
    pred, label = rng.integers(0, C, (5, 6)), rng.integers(0, C, (5, 6))
    cm = ConfusionMatrix(C).update(pred, label)
    assert cm.miou() == pytest.approx(brute_force_miou(pred, label, C), abs=1e-12)
    assert cm.counts.min() >= 0 and cm.total == 30


def test_confusion_contract():
    with pytest.raises(ContractError):
        ConfusionMatrix(3).update(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ContractError):
        ConfusionMatrix(3).update(np.full((2, 2), 3), np.zeros((2, 2), int))


# raw files

def test_raw_roundtrip_and_exact_bytes(tmp_path, rng):
    img = rng.random((3, 4, 5)).astype(np.float32)
    lbl = rng.integers(0, 6, (4, 5))
    rawio.write_image(tmp_path / "img_0000", img)
    rawio.write_label(tmp_path / "lbl_0000", lbl)
    blob = (tmp_path / "img_0000").read_bytes()
    assert blob[:10] == b"DATI\x01\x03\x04\x00\x05\x00" and len(blob) == 10 + 4 * 60
    assert (tmp_path / "lbl_0000").read_bytes()[:10] == b"DATL\x01\x01\x04\x00\x05\x00"
    samples = list(load_directory_dataset(tmp_path, 6))
    assert len(samples) == 1
    assert samples[0].image.tobytes() == img.tobytes()
    np.testing.assert_array_equal(samples[0].label, lbl)


def test_directory_loader_errors(tmp_path, rng):
    assert list(load_directory_dataset(tmp_path, 6)) == []
    rawio.write_image(tmp_path / "img_0001", rng.random((3, 4, 4)).astype(np.float32))
    rawio.write_label(tmp_path / "lbl_0001", np.full((4, 4), 6))
    with pytest.raises(LoadError, match=r"lbl_0001.*6"):
        list(load_directory_dataset(tmp_path, 6))
    rawio.write_image(tmp_path / "img_0002", rng.random((3, 4, 4)).astype(np.float32))
    with pytest.raises(LoadError, match="no matching label"):
        load_directory_dataset(tmp_path, 6)
    (tmp_path / "lbl_0001").unlink()
    (tmp_path / "img_0001").unlink()
    (tmp_path / "lbl_0002").write_bytes(b"XXXX\x01\x01\x04\x00\x04\x00" + bytes(16))
    with pytest.raises(LoadError, match="bad magic"):
        list(load_directory_dataset(tmp_path, 6))


def test_samples_ordered_by_index(tmp_path, rng):
    for i in (10, 2, 7):
        rawio.write_image(tmp_path / f"img_{i:04d}", np.full((3, 4, 4), i / 10, np.float32))
        rawio.write_label(tmp_path / f"lbl_{i:04d}", np.zeros((4, 4)))
    vals = [float(s.image[0, 0, 0]) for s in load_directory_dataset(tmp_path, 6)]
    assert vals == pytest.approx([0.2, 0.7, 1.0])
