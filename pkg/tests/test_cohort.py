import numpy as np
import pytest

from glioworld.cohort import (
    LABEL_ET, LABEL_NET, PatientTrajectory, SegMask, TreatmentPlan,
    TreatmentToken, Volume, classify_voxels, derive_tumor_state, evolve_state,
    generate_cohort, load_cohort, make_pairs, normalize_intensities,
    plan_union, save_cohort, split_cohort)
from glioworld.config import CohortConfig


def centroid_bruteforce(mask: SegMask):
    idx = np.argwhere(mask.data[1:].sum(axis=0) > 0)
    return idx.mean(axis=0)


class TestTypes:
    def test_plan_canonical_order(self):
        a = TreatmentPlan((TreatmentToken.AM, TreatmentToken.SUR))
        b = TreatmentPlan((TreatmentToken.SUR, TreatmentToken.AM))
        assert a == b
        assert str(a) == "[SUR] + [AM]"

    def test_plan_rejects_empty(self):
        with pytest.raises(ValueError):
            TreatmentPlan(())

    def test_plan_parse(self):
        assert TreatmentPlan.parse("SUR+CRT").short() == "SUR+CRT"
        assert TreatmentPlan.parse("[SUR] + [CRT]").short() == "SUR+CRT"
        with pytest.raises(ValueError):
            TreatmentPlan.parse("XYZ")

    def test_exactly_five_tokens(self):
        assert len(TreatmentToken) == 5
        assert [t.name for t in TreatmentToken] == ["SUR", "CRT", "RT", "TMZ", "AM"]


class TestGeneration:
    def test_basic_invariants(self, small_cohort):
        assert len(small_cohort) == 4
        for traj in small_cohort:
            traj.validate()
            assert 2 <= len(traj.timepoints) <= 5
            for tp in traj.timepoints:
                tp.volume.validate()
                tp.mask.validate()
                assert tp.volume.data.min() >= -1.0
                assert tp.volume.data.max() <= 1.0

    def test_mask_one_hot_everywhere(self, small_cohort):
        for traj in small_cohort:
            for tp in traj.timepoints:
                s = tp.mask.data.sum(axis=0)
                assert np.allclose(s, 1.0)
                assert set(np.unique(tp.mask.data)) <= {0.0, 1.0}

    def test_determinism_bit_identical(self, small_cohort, small_cohort_cfg):
        again = generate_cohort(7, small_cohort_cfg)
        for a, b in zip(small_cohort, again):
            assert a.subject_id == b.subject_id
            for ta, tb in zip(a.timepoints, b.timepoints):
                assert np.array_equal(ta.volume.data, tb.volume.data)
                assert np.array_equal(ta.mask.data, tb.mask.data)

    def test_seeds_move_tumor_centroids(self, small_cohort, small_cohort_cfg):
        other = generate_cohort(8, small_cohort_cfg)
        moved = 0
        for a, b in zip(small_cohort, other):
            ca = centroid_bruteforce(a.timepoints[0].mask)
            cb = centroid_bruteforce(b.timepoints[0].mask)
            if np.linalg.norm(ca - cb) > 0.5:
                moved += 1
        assert moved >= len(small_cohort) - 1

    def test_rejects_grid_not_divisible_by_patch(self):
        with pytest.raises(ValueError):
            generate_cohort(1, CohortConfig(n_subjects=1, grid=30, patch=4))


class TestEvolve:
    def test_am_strictly_grows(self, small_cohort, small_cohort_cfg, rng):
        tp = small_cohort[0].timepoints[0]
        nxt = evolve_state(tp, TreatmentPlan((TreatmentToken.AM,)), 90, rng,
                           small_cohort_cfg)
        assert nxt.mask.core_voxels() > tp.mask.core_voxels()
        assert nxt.mask.foreground_voxels() > tp.mask.foreground_voxels()

    def test_sur_removes_at_least_in_sphere_count(self, small_cohort,
                                                  small_cohort_cfg, rng):
        tp = small_cohort[1].timepoints[0]
        state = derive_tumor_state(tp.volume)
        rho = state.r_net + small_cohort_cfg.resection_frac * (state.r_et - state.r_net)
        lab = classify_voxels(tp.volume.data)
        shape = lab.shape
        in_sphere = 0
        for v in np.argwhere((lab == LABEL_ET) | (lab == LABEL_NET)):
            if np.sqrt(((v - state.center) ** 2).sum()) < rho:
                in_sphere += 1
        assert in_sphere > 0
        nxt = evolve_state(tp, TreatmentPlan((TreatmentToken.SUR,)), 1, rng,
                           small_cohort_cfg)
        decrease = tp.mask.core_voxels() - nxt.mask.core_voxels()
        assert decrease >= in_sphere

    def test_tmz_one_day_is_near_identity(self, small_cohort, small_cohort_cfg, rng):
        tp = small_cohort[0].timepoints[0]
        nxt = evolve_state(tp, TreatmentPlan((TreatmentToken.TMZ,)), 1, rng,
                           small_cohort_cfg)
        changed = int((nxt.mask.labels() != tp.mask.labels()).sum())
        assert changed < 0.02 * tp.mask.foreground_voxels()

    def test_rejects_nonpositive_tau(self, small_cohort, rng):
        with pytest.raises(ValueError):
            evolve_state(small_cohort[0].timepoints[0],
                         TreatmentPlan((TreatmentToken.AM,)), 0, rng)

    def test_mean_monotonicity(self, small_cohort, small_cohort_cfg):
        """Mean core-voxel delta over >=100 evolutions: positive under AM,
        negative under every treatment."""
        rng = np.random.default_rng(3)
        deltas = {name: [] for name in ("AM", "TMZ", "RT", "CRT", "SUR")}
        n_each = 110 // (len(small_cohort) * len(deltas)) + 1
        for traj in small_cohort:
            tp = traj.timepoints[0]
            for name, acc in deltas.items():
                for _ in range(n_each * 7):
                    if sum(len(v) for v in deltas.values()) >= 110 * 5:
                        break
                    tau = int(rng.integers(30, 150))
                    nxt = evolve_state(tp, TreatmentPlan.parse(name), tau, rng,
                                       small_cohort_cfg)
                    acc.append(nxt.mask.core_voxels() - tp.mask.core_voxels())
        assert all(len(v) >= 25 for v in deltas.values())
        assert np.mean(deltas["AM"]) > 0
        for name in ("TMZ", "RT", "CRT", "SUR"):
            assert np.mean(deltas[name]) < 0, name


class TestNormalize:
    def test_constant_maps_to_zero(self):
        out = normalize_intensities(np.full((5, 5, 5), 7.0))
        assert np.all(out == 0.0)

    def test_linspace_extremes(self):
        raw = np.linspace(0.0, 100.0, 4096).reshape(16, 16, 16)
        out = normalize_intensities(raw)
        lo, hi = np.percentile(raw, [1.0, 99.0])  # independent oracle: sort-based
        assert np.isclose(out.min(), -1.0)
        assert np.isclose(out.max(), 1.0)
        mid_val = (lo + hi) / 2
        idx = np.unravel_index(np.abs(raw - mid_val).argmin(), raw.shape)
        assert abs(out[idx]) < 0.01

    def test_already_normalized_is_identity_up_to_clip(self):
        rng = np.random.default_rng(5)
        raw = rng.uniform(-1, 1, size=(12, 12, 12))
        raw.flat[0], raw.flat[1] = -1.0, 1.0
        out = normalize_intensities(raw)
        lo, hi = np.percentile(raw, [1, 99])
        inside = (raw >= lo) & (raw <= hi)
        expected = (np.clip(raw, lo, hi) - lo) / (hi - lo) * 2 - 1
        assert np.allclose(out[inside], expected[inside], atol=1e-6)

    def test_rejects_nonfinite(self):
        bad = np.zeros((3, 3, 3))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            normalize_intensities(bad)


class TestPairs:
    def _traj_with(self, small_cohort, n):
        for traj in small_cohort:
            if len(traj.timepoints) == n:
                return traj
        pytest.skip(f"no trajectory with {n} timepoints in fixture")

    def test_pair_count_choose_2(self, small_cohort):
        for traj in small_cohort:
            n = len(traj.timepoints)
            pairs = make_pairs(traj)
            assert len(pairs) == n * (n - 1) // 2
            for p in pairs:
                assert p.interval_days > 0
                assert len(p.history) == p.source_index

    def test_plan_between_is_union(self, small_cohort):
        traj = small_cohort[0]
        pairs = make_pairs(traj)
        pair02 = next(p for p in pairs if p.source_index == 0 and p.target_index == 2)
        assert pair02.plan_between == plan_union(traj.plans[0:2])

    def test_union_example_sur_crt(self):
        plans = [TreatmentPlan((TreatmentToken.SUR,)),
                 TreatmentPlan((TreatmentToken.CRT,))]
        assert plan_union(plans).short() == "SUR+CRT"


class TestSplit:
    def test_eight_two(self):
        cohort = generate_cohort(1, CohortConfig(n_subjects=10, tp_min=2, tp_max=2,
                                                 grid=16, patch=4))
        train, val = split_cohort(cohort, 0.8, seed=0)
        assert len(train) == 8 and len(val) == 2

    def test_no_subject_straddles(self, small_cohort):
        train, val = split_cohort(small_cohort, 0.8, seed=1)
        ids_t = {t.subject_id for t in train}
        ids_v = {t.subject_id for t in val}
        assert not (ids_t & ids_v)
        assert ids_t | ids_v == {t.subject_id for t in small_cohort}

    def test_split_deterministic(self, small_cohort):
        a = split_cohort(small_cohort, 0.8, seed=9)
        b = split_cohort(small_cohort, 0.8, seed=9)
        assert [t.subject_id for t in a[0]] == [t.subject_id for t in b[0]]

    def test_rejects_single_subject(self, small_cohort):
        with pytest.raises(ValueError):
            split_cohort(small_cohort[:1])


class TestPersistence:
    def test_round_trip_bit_exact(self, small_cohort, tmp_path):
        split = split_cohort(small_cohort, 0.8, seed=0)
        save_cohort(small_cohort, tmp_path / "c", split=split)
        loaded, split_map = load_cohort(tmp_path / "c")
        assert len(loaded) == len(small_cohort)
        assert set(split_map.values()) == {"train", "val"}
        for a, b in zip(small_cohort, loaded):
            assert a.subject_id == b.subject_id
            assert [p.short() for p in a.plans] == [p.short() for p in b.plans]
            for ta, tb in zip(a.timepoints, b.timepoints):
                assert ta.day == tb.day
                assert np.array_equal(ta.volume.data, tb.volume.data)
                assert np.array_equal(ta.mask.data, tb.mask.data)

    def test_rejects_foreign_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_cohort(tmp_path)
