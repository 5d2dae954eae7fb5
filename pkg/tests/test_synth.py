import filecmp
import os

import numpy as np
import pytest

from splatfit import synth


def small_cfg(schedule=(), seed=0, entities=1):
    return synth.SceneConfig(n_frames=10, height=24, width=24,
                             schedule=list(schedule), seed=seed,
                             entities=entities, n_vertices=64)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    sched = [synth.Perturbation("occluder", 3, 5, 0.5),
             synth.Perturbation("illumination", 7, 9, 0.5)]
    root = tmp_path_factory.mktemp("scene")
    return synth.synthesize(small_cfg(sched), str(root / "d"))


def test_unknown_perturbation_rejected():
    with pytest.raises(ValueError):
        synth.Perturbation("fog", 1, 2, 0.5)
    with pytest.raises(ValueError):
        synth.Perturbation("blur", 4, 2, 0.5)
    with pytest.raises(ValueError):
        synth.Perturbation("blur", 1, 2, 1.5)


def test_schedule_must_fit_sequence():
    with pytest.raises(ValueError):
        small_cfg([synth.Perturbation("blur", 1, 99, 0.5)])


def test_zero_strength_injectors_are_identity():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3))
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True
    out, disc = synth.inject_occluder(img, mask, 0.0, 0.5)
    assert np.array_equal(out, img) and not disc.any()
    assert np.array_equal(synth.inject_illumination(img, 0.0, 0.5), img)
    assert np.array_equal(synth.inject_blur(img, 0.0, [1.0, 0.0]), img)


def test_occluder_paints_disc_inside_entity_bbox():
    img = np.zeros((32, 32, 3))
    mask = np.zeros((32, 32), bool)
    mask[8:24, 8:24] = True
    out, disc = synth.inject_occluder(img, mask, 0.5, 0.5)
    assert disc.any()
    assert np.all(out[disc] == synth.OCCLUDER_COLOR)
    assert np.array_equal(out[~disc], img[~disc])


def test_illumination_gain_peaks_at_one_plus_strength():
    img = np.full((8, 8, 3), 0.4)
    out = synth.inject_illumination(img, 0.5, 0.5)   # mid-schedule peak
    assert abs(out[0, 0, 0] - 0.4 * (1 + 0.5 * np.sin(np.pi * 0.5))) < 1e-12
    assert np.max(synth.inject_illumination(np.ones((4, 4, 3)), 0.8, 0.5)) <= 1.0


def test_every_scheduled_illumination_frame_is_changed():
    img = np.full((8, 8, 3), 0.4)
    for phase in [0.0, 0.25, 0.5, 0.75, 1.0]:
        out = synth.inject_illumination(img, 0.5, phase)
        assert np.max(np.abs(out - img)) > 1e-3


def test_blur_kernel_is_normalized_and_keeps_constants():
    for length, d in [(3, [1.0, 0.0]), (5, [1.0, 2.0]), (9, [0.0, -1.0])]:
        k = synth._line_kernel(length, d)
        assert abs(k.sum() - 1.0) < 1e-12
        assert np.all(k >= 0)
    flat = np.full((12, 12, 3), 0.7)
    assert np.allclose(synth.inject_blur(flat, 0.8, [1.0, 1.0]), flat,
                       atol=1e-12)


def test_blur_strength_sets_kernel_length():
    rng = np.random.default_rng(1)
    img = rng.random((16, 16, 3))
    weak = synth.inject_blur(img, 0.2, [0.0, 1.0])
    strong = synth.inject_blur(img, 0.8, [0.0, 1.0])
    assert np.mean(np.abs(strong - img)) > np.mean(np.abs(weak - img))


def test_split_is_disjoint_and_covers_all_frames(scene_dir):
    ds = synth.Dataset(scene_dir)
    train, val, test = (ds.split[k] for k in ("train", "val", "test"))
    allf = sorted(train + val + test)
    assert allf == list(range(1, ds.n_frames + 1))
    assert not (set(train) & set(val) or set(train) & set(test)
                or set(val) & set(test))


def test_test_frames_come_from_unperturbed_spans(scene_dir):
    ds = synth.Dataset(scene_dir)
    for l in ds.split["test"]:
        assert ds.perturbations(l) == []


def test_frames_match_clean_outside_the_schedule(scene_dir):
    ds = synth.Dataset(scene_dir)
    for l in range(1, ds.n_frames + 1):
        same = np.array_equal(ds.frame(l), ds.clean(l))
        assert same == (ds.perturbations(l) == [])


def test_masks_cover_each_frame(scene_dir):
    # entity keeps its full silhouette even under the occluder, so entity
    # and occluder may overlap; background is everything else
    ds = synth.Dataset(scene_dir)
    for l in (1, 4, 8):
        ent = ds.mask(l, "entity")
        occ = ds.mask(l, "occluder")
        bg = ds.mask(l, "background")
        assert np.array_equal(bg, ~(ent | occ))
    assert ds.mask(4, "occluder").any()       # inside the occluder span
    assert not ds.mask(1, "occluder").any()   # outside it


def test_occluded_pixels_carry_the_occluder_color(scene_dir):
    ds = synth.Dataset(scene_dir)
    occ = ds.mask(4, "occluder")
    assert np.allclose(ds.frame(4)[occ], synth.OCCLUDER_COLOR, atol=1e-7)


def test_pose_extreme_changes_observation_not_ground_truth(tmp_path):
    sched = [synth.Perturbation("pose-extreme", 2, 4, 0.8)]
    ds = synth.Dataset(synth.synthesize(small_cfg(sched, seed=3),
                                        str(tmp_path / "p")))
    assert not np.array_equal(ds.frame(3), ds.clean(3))
    base = synth.Dataset(synth.synthesize(small_cfg(seed=3),
                                          str(tmp_path / "b")))
    assert np.array_equal(ds.clean(3), base.clean(3))
    assert np.array_equal(ds.poses, base.poses)


def test_synthesis_is_bitwise_reproducible(tmp_path):
    sched = [synth.Perturbation("blur", 2, 6, 0.5)]
    a = synth.synthesize(small_cfg(sched, seed=7), str(tmp_path / "a"))
    b = synth.synthesize(small_cfg(sched, seed=7), str(tmp_path / "b"))
    for sub, _, files in os.walk(a):
        rel = os.path.relpath(sub, a)
        for f in files:
            fa = os.path.join(sub, f)
            fb = os.path.join(b, rel, f)
            assert filecmp.cmp(fa, fb, shallow=False), f"{rel}/{f} differs"


def test_different_seeds_give_different_scenes(tmp_path):
    a = synth.Dataset(synth.synthesize(small_cfg(seed=0), str(tmp_path / "a")))
    b = synth.Dataset(synth.synthesize(small_cfg(seed=1), str(tmp_path / "b")))
    assert not np.array_equal(a.frame(1), b.frame(1))


def test_two_entity_scene_renders_both(tmp_path):
    ds = synth.Dataset(synth.synthesize(small_cfg(seed=0, entities=2),
                                        str(tmp_path / "t")))
    mask = ds.mask(1, "entity")
    cols = np.nonzero(mask.any(axis=0))[0]
    assert ds.config.entities == 2
    # two separated silhouettes: some empty column between occupied spans
    occupied = mask.any(axis=0)
    gaps = np.diff(cols)
    assert gaps.max() > 1 or occupied.sum() > mask.shape[1] * 0.5


def test_dataset_round_trips_poses_and_camera(scene_dir):
    ds = synth.Dataset(scene_dir)
    state = ds.pose_state(5)
    assert state.theta.shape == (ds.template.n_joints, 3)
    assert ds.camera.width == ds.config.width
    assert ds.frame(1).shape == (24, 24, 3)
