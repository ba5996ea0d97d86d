"""Hindsight truth, voxel IoU, and the behavioral map metrics.

The latency / stability / correction metrics get two kinds of coverage:
hand-built frame records where the right answer is pure arithmetic, and
the bundled scenario fixtures where the right answer was worked out from
the scene geometry.
"""

import numpy as np
import pytest

from terravox import (
    ONTOLOGY_6,
    ONTOLOGY_10,
    ConfigurationError,
    SemanticCloud,
    VoxelMap,
    load_rig,
    load_scene,
    load_trajectory,
    run_scenario,
)
from terravox import _kernels as K
from terravox.evaluation import (
    FREE_CELL,
    FusionReport,
    HindsightMap,
    bleed_correction_rate,
    build_hindsight_map,
    evaluate_timeline,
    map_iou,
    popup_hazard_keys,
    popup_latency,
    reverse_stability,
)
from terravox.fixtures import fixture_path
from terravox.simulator import (
    FrameRecord,
    GroundModel,
    Scene,
    SceneObject,
    ScenarioTimeline,
    WaterRegion,
)

GROUND = ONTOLOGY_10.index("ground")
TRAIL = ONTOLOGY_10.index("trail")
DRY_VEG = ONTOLOGY_10.index("dry_vegetation")
LUSH_VEG = ONTOLOGY_10.index("lush_vegetation")
OBSTACLE = ONTOLOGY_10.index("obstacle_rock")
WATER = ONTOLOGY_10.index("water")


def pack(*ijk_rows):
    return K.pack_keys(np.asarray(ijk_rows, np.int64))


def flat_scene(height=0.0, cls=GROUND, objects=(), water=()):
    return Scene("flat", GroundModel(height, cls, []), objects, water)


class TestHindsight:
    def test_flat_ground_cells_and_air_cells(self):
        scene = flat_scene()
        keys = pack([0, 0, 0], [3, -2, 0], [1, 1, 5])
        gt = build_hindsight_map(scene, keys, 0.2)
        assert gt.class_of(pack([0, 0, 0]))[0] == GROUND
        assert gt.class_of(pack([3, -2, 0]))[0] == GROUND
        # a cell in mid-air holds no surface
        assert gt.class_of(pack([1, 1, 5]))[0] == FREE_CELL
        assert gt.n_free == 1

    def test_popup_scene_cells(self):
        scene = load_scene(fixture_path("popup_rock.scene.yaml"))
        keys = pack([46, 0, 2], [29, 0, 3], [10, 0, 0])
        gt = build_hindsight_map(scene, keys, 0.2)
        assert gt.class_of(pack([46, 0, 2]))[0] == OBSTACLE
        assert gt.class_of(pack([29, 0, 3]))[0] == DRY_VEG
        assert gt.class_of(pack([10, 0, 0]))[0] == TRAIL

    def test_overhang_scene_separates_slab_from_floor(self):
        scene = load_scene(fixture_path("overhang_water.scene.yaml"))
        keys = pack([28, 0, 10], [28, 0, 0], [50, 0, 1])
        gt = build_hindsight_map(scene, keys, 0.2)
        assert gt.class_of(pack([28, 0, 10]))[0] == LUSH_VEG
        assert gt.class_of(pack([28, 0, 0]))[0] == TRAIL
        assert gt.class_of(pack([50, 0, 1]))[0] == WATER

    def test_water_surface_beats_ground_paint(self):
        water = WaterRegion([[0, -1], [2, -1], [2, 1], [0, 1]], 0.1, WATER)
        scene = flat_scene(height=0.1, water=[water])
        gt = build_hindsight_map(scene, pack([5, 0, 0]), 0.2)
        assert gt.classes[0] == WATER

    def test_object_face_on_cell_boundary_claims_both_cells(self):
        # a face exactly on a grid plane: returns binned either side of
        # it must still match the object
        box = SceneObject("box", OBSTACLE, (1.0, 0.1, 0.1), (0.4, 0.2, 0.2))
        scene = flat_scene(objects=[box])
        gt = build_hindsight_map(scene, pack([3, 0, 0], [4, 0, 0]), 0.2)
        assert (gt.classes == OBSTACLE).all()

    def test_unknown_key_reads_free(self):
        gt = build_hindsight_map(flat_scene(), pack([0, 0, 0]), 0.2)
        assert gt.class_of(pack([9, 9, 9]))[0] == FREE_CELL

    def test_idempotent(self):
        scene = load_scene(fixture_path("popup_rock.scene.yaml"))
        keys = pack([46, 0, 2], [29, 0, 3], [10, 0, 0], [1, 1, 5])
        a = build_hindsight_map(scene, keys, 0.2)
        b = build_hindsight_map(scene, keys, 0.2)
        np.testing.assert_array_equal(a.keys, b.keys)
        np.testing.assert_array_equal(a.classes, b.classes)


def map_from_labels(keys, classes, resolution=0.2):
    """A fused map whose argmax equals the given labels exactly."""
    m = VoxelMap(resolution, ONTOLOGY_10, "range_based")
    centers = (K.unpack_keys(np.asarray(keys, np.int64)) + 0.5) * resolution
    conf = np.zeros((len(classes), ONTOLOGY_10.n_cls), np.float32)
    conf[np.arange(len(classes)), np.asarray(classes)] = 1.0
    m.fuse_cloud(SemanticCloud(centers, conf,
                               np.full(len(classes), 5.0, np.float32)))
    return m


class TestMapIoU:
    def test_identical_map_scores_100(self):
        keys = pack([0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0])
        classes = [GROUND, GROUND, OBSTACLE, TRAIL]
        gt = HindsightMap(0.2, ONTOLOGY_10, keys, classes)
        snap = map_from_labels(keys, classes).snapshot()
        r = map_iou(snap, gt)
        assert r.mean == pytest.approx(100.0)
        assert r.class_iou(OBSTACLE) == pytest.approx(100.0)

    def test_half_mislabeled_rock_scores_50(self):
        keys = pack([0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0])
        gt = HindsightMap(0.2, ONTOLOGY_10, keys, [OBSTACLE] * 4)
        snap = map_from_labels(keys, [OBSTACLE, OBSTACLE, DRY_VEG, DRY_VEG]).snapshot()
        r = map_iou(snap, gt)
        assert r.class_iou(OBSTACLE) == pytest.approx(50.0)

    def test_empty_map_gives_no_score(self):
        gt = HindsightMap(0.2, ONTOLOGY_10, pack([0, 0, 0]), [GROUND])
        snap = VoxelMap(0.2, ONTOLOGY_10, "range_based").snapshot()
        assert map_iou(snap, gt).mean is None

    def test_free_cells_never_score(self):
        keys = pack([0, 0, 0], [1, 0, 0])
        gt = HindsightMap(0.2, ONTOLOGY_10, keys, [GROUND, FREE_CELL])
        snap = map_from_labels(keys, [GROUND, GROUND]).snapshot()
        r = map_iou(snap, gt)
        assert r.n_scored == 1
        assert r.mean == pytest.approx(100.0)

    def test_resolution_mismatch_rejected(self):
        gt = HindsightMap(0.1, ONTOLOGY_10, pack([0, 0, 0]), [GROUND])
        snap = map_from_labels(pack([0, 0, 0]), [GROUND]).snapshot()
        with pytest.raises(ConfigurationError, match="resolution"):
            map_iou(snap, gt)

    def test_ontology_mismatch_rejected(self):
        gt = HindsightMap(0.2, ONTOLOGY_6, pack([0, 0, 0]), [0])
        snap = map_from_labels(pack([0, 0, 0]), [GROUND]).snapshot()
        with pytest.raises(ConfigurationError, match="ontolog"):
            map_iou(snap, gt)

    def test_below_threshold_cells_are_ignored_not_wrong(self):
        keys = pack([0, 0, 0], [1, 0, 0])
        gt = HindsightMap(0.2, ONTOLOGY_10, keys, [GROUND, GROUND])
        m = VoxelMap(0.2, ONTOLOGY_10, "range_based")
        centers = (K.unpack_keys(keys) + 0.5) * 0.2
        conf = np.full((2, ONTOLOGY_10.n_cls), np.nan, np.float32)
        conf[0, GROUND] = 0.9
        conf[1, GROUND] = 0.3   # confident nowhere near the cut
        m.fuse_cloud(SemanticCloud(centers, conf, np.full(2, 5.0, np.float32)))
        r = map_iou(m.snapshot(), gt, threshold=0.5)
        assert r.cm.ignored == 1
        assert r.class_iou(GROUND) == pytest.approx(100.0)


def fake_frame(idx, tag, keys, obs_class, obs_range, true_class, map_argmax):
    return FrameRecord(
        idx=idx, t=idx * 0.1, pose=(0.0, 0.0, 0.0), tag=tag,
        keys=np.asarray(keys, np.int64),
        obs_range=np.asarray(obs_range, np.float32),
        obs_class=np.asarray(obs_class, np.int8),
        true_class=np.asarray(true_class, np.int8),
        stats=None,
        map_argmax=np.asarray(map_argmax, np.int16),
        water_offset=None, water_injected=0, snapshot_due=False)


def fake_timeline(frames, rowkeys):
    return ScenarioTimeline(
        scene_name="fake", trajectory_name="fake", rig_name="fake",
        strategy="range_based", seed=0, resolution=0.2, map_rate=5.0,
        ontology=ONTOLOGY_10, frames=frames,
        rowkeys=np.asarray(rowkeys, np.int64), final_snapshot=None)


K0, K1 = (int(k) for k in pack([0, 0, 0], [1, 0, 0]))


class TestPopupLatency:
    def timeline(self):
        frames = [
            # both cells first seen far away, labeled vegetation
            fake_frame(0, "forward", [K0, K1], [DRY_VEG, DRY_VEG],
                       [10.0, 10.0], [OBSTACLE, OBSTACLE],
                       [DRY_VEG, DRY_VEG]),
            # reveal: K0 gets a correct, closer look
            fake_frame(1, "forward", [K0], [OBSTACLE], [5.0], [OBSTACLE],
                       [OBSTACLE, DRY_VEG]),
            fake_frame(2, "forward", [K1], [OBSTACLE], [5.0], [OBSTACLE],
                       [OBSTACLE, OBSTACLE]),
        ]
        return fake_timeline(frames, [K0, K1])

    def test_hazard_keys_found_at_reveal(self):
        f0, keys = popup_hazard_keys(self.timeline(), OBSTACLE)
        assert f0 == 1
        assert keys.tolist() == sorted([K0])

    def test_latency_counts_frames_to_ensemble_agreement(self):
        tl = self.timeline()
        assert popup_latency(tl, [K0, K1], OBSTACLE, threshold=0.9) == 1
        # a laxer ensemble cut is satisfied immediately at the reveal
        assert popup_latency(tl, [K0, K1], OBSTACLE, threshold=0.5) == 0

    def test_never_observed_is_distinct_from_zero(self):
        frames = [fake_frame(0, "forward", [K0], [DRY_VEG], [10.0],
                             [DRY_VEG], [DRY_VEG])]
        tl = fake_timeline(frames, [K0])
        f0, keys = popup_hazard_keys(tl, OBSTACLE)
        assert f0 is None and keys.size == 0
        with pytest.raises(ConfigurationError):
            popup_latency(tl, keys, OBSTACLE)

    def test_map_never_agreeing_reads_inf(self):
        frames = [
            fake_frame(0, "forward", [K0], [OBSTACLE], [5.0], [OBSTACLE],
                       [DRY_VEG]),
            fake_frame(1, "forward", [], [], [], [], [DRY_VEG]),
        ]
        tl = fake_timeline(frames, [K0])
        assert popup_latency(tl, [K0], OBSTACLE) == float("inf")

    def test_unobserved_hazard_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="never observed"):
            popup_latency(self.timeline(), pack([9, 9, 9]), OBSTACLE)


class TestReverseStability:
    def test_requires_a_reverse_leg(self):
        frames = [fake_frame(0, "forward", [K0], [OBSTACLE], [5.0],
                             [OBSTACLE], [OBSTACLE])]
        with pytest.raises(ConfigurationError, match="reverse"):
            reverse_stability(fake_timeline(frames, [K0]), [K0])

    def test_empty_protected_set_counts_zero(self):
        frames = [
            fake_frame(0, "forward", [K0], [OBSTACLE], [5.0], [OBSTACLE],
                       [OBSTACLE]),
            fake_frame(1, "reverse", [], [], [], [], [DRY_VEG]),
        ]
        assert reverse_stability(fake_timeline(frames, [K0]), []) == 0

    def test_flip_without_closer_look_is_a_violation(self):
        frames = [
            fake_frame(0, "forward", [K0], [OBSTACLE], [5.0], [OBSTACLE],
                       [OBSTACLE]),
            # flips while its only fresh look is from farther away
            fake_frame(1, "reverse", [K0], [DRY_VEG], [9.0], [OBSTACLE],
                       [DRY_VEG]),
            # flips again with no look at all
            fake_frame(2, "reverse", [], [], [], [], [OBSTACLE]),
        ]
        assert reverse_stability(fake_timeline(frames, [K0]), [K0]) == 2

    def test_flip_with_closer_look_is_excused(self):
        frames = [
            fake_frame(0, "forward", [K0], [OBSTACLE], [5.0], [OBSTACLE],
                       [OBSTACLE]),
            fake_frame(1, "reverse", [K0], [DRY_VEG], [3.0], [OBSTACLE],
                       [DRY_VEG]),
        ]
        assert reverse_stability(fake_timeline(frames, [K0]), [K0]) == 0

    def test_flips_before_the_reverse_leg_do_not_count(self):
        frames = [
            fake_frame(0, "forward", [K0], [OBSTACLE], [5.0], [OBSTACLE],
                       [OBSTACLE]),
            fake_frame(1, "forward", [], [], [], [], [DRY_VEG]),
            fake_frame(2, "reverse", [], [], [], [], [DRY_VEG]),
        ]
        assert reverse_stability(fake_timeline(frames, [K0]), [K0]) == 0


class TestBleedCorrection:
    def test_rate_counts_fixed_cells(self):
        gt = HindsightMap(0.2, ONTOLOGY_10, [K0, K1], [OBSTACLE, TRAIL])
        frames = [
            fake_frame(0, "forward", [], [], [], [], [DRY_VEG, TRAIL]),
            fake_frame(1, "forward", [], [], [], [], [OBSTACLE, TRAIL]),
        ]
        tl = fake_timeline(frames, [K0, K1])
        assert bleed_correction_rate(tl, gt) == pytest.approx(1.0)

    def test_uncorrected_cells_lower_the_rate(self):
        gt = HindsightMap(0.2, ONTOLOGY_10, [K0, K1], [OBSTACLE, OBSTACLE])
        frames = [
            fake_frame(0, "forward", [], [], [], [], [DRY_VEG, DRY_VEG]),
            fake_frame(1, "forward", [], [], [], [], [OBSTACLE, DRY_VEG]),
        ]
        tl = fake_timeline(frames, [K0, K1])
        assert bleed_correction_rate(tl, gt) == pytest.approx(0.5)

    def test_nothing_wrong_gives_none(self):
        gt = HindsightMap(0.2, ONTOLOGY_10, [K0], [TRAIL])
        frames = [fake_frame(0, "forward", [], [], [], [], [TRAIL])]
        assert bleed_correction_rate(fake_timeline(frames, [K0]), gt) is None


class TestFusionReport:
    def small_report(self, **kw):
        keys = pack([0, 0, 0])
        gt = HindsightMap(0.2, ONTOLOGY_10, keys, [GROUND])
        iou = map_iou(map_from_labels(keys, [GROUND]).snapshot(), gt)
        defaults = dict(scenario="s", strategy="range_based", seed=1,
                        ontology=ONTOLOGY_10, n_frames=3, n_voxels=1, iou=iou)
        defaults.update(kw)
        return FusionReport(**defaults)

    def test_text_and_row_carry_the_metrics(self):
        r = self.small_report(popup_latency_frames=0, reverse_violations=2,
                              bleed_correction=0.25)
        text = r.to_text()
        assert "popup latency (frames): 0" in text
        assert "reverse violations: 2" in text
        assert "0.2500" in text
        assert len(r.header().split(",")) == len(r.to_row().split(","))

    def test_absent_metrics_read_na_and_empty(self):
        r = self.small_report()
        assert "n/a" in r.to_text()
        row = r.to_row().split(",")
        header = r.header().split(",")
        assert row[header.index("popup_latency")] == ""

    def test_invariants_enforced(self):
        with pytest.raises(ConfigurationError):
            self.small_report(popup_latency_frames=-1)
        with pytest.raises(ConfigurationError):
            self.small_report(reverse_violations=-3)
        with pytest.raises(ConfigurationError):
            self.small_report(bleed_correction=1.5)


@pytest.fixture(scope="module")
def popup_runs():
    scene = load_scene(fixture_path("popup_rock.scene.yaml"))
    tr = load_trajectory(fixture_path("popup_rock.trajectory.yaml"))
    rig = load_rig(fixture_path("default.rig.yaml"))
    out = {}
    for strategy in ("range_based", "average"):
        out[strategy] = run_scenario(scene, tr, rig, strategy, seed=7)
    return scene, out


class TestOnScenarioFixtures:
    def test_range_based_corrects_popup_immediately(self, popup_runs):
        scene, runs = popup_runs
        rep = evaluate_timeline(runs["range_based"], scene)
        assert rep.popup_latency_frames == 0
        assert rep.reverse_violations is None

    def test_range_based_beats_average_on_obstacle_iou(self, popup_runs):
        scene, runs = popup_runs
        a = evaluate_timeline(runs["range_based"], scene)
        b = evaluate_timeline(runs["average"], scene)
        assert a.iou.class_iou(OBSTACLE) >= b.iou.class_iou(OBSTACLE)

    def test_hindsight_covers_every_observed_key(self, popup_runs):
        scene, runs = popup_runs
        tl = runs["range_based"]
        gt = build_hindsight_map(scene, tl.observed_keys(), tl.resolution)
        np.testing.assert_array_equal(gt.keys, tl.observed_keys())
