import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glioworld.cohort import TreatmentPlan, TreatmentToken, Volume
from glioworld.metrics import nmse
from glioworld.tokenizer import (
    LatentGrid, PatchAutoencoder, TokenSequence, Vocabulary, build_sequence,
    grid_positions, noise_augment, render_context, text_decode, text_encode)

VOCAB = Vocabulary()

HISTORY = [TreatmentPlan((TreatmentToken.SUR,))]
PLAN_TEMPLATE = ("Female, 57 years old, brain glioma grade 4. "
                 "Prior treatment: [SUR]. What is the next-step treatment plan?")
IMG_TEMPLATE = ("Female, 57 years old, brain glioma grade 4. "
                "Prior treatment: [SUR]. Conducted treatment: [SUR] + [CRT] "
                "over an interval of 92 days.")


class TestVocabulary:
    def test_planning_ids_reserved_and_disjoint(self):
        assert len(set(VOCAB.planning_ids)) == 5
        specials = {VOCAB.bos, VOCAB.eos, VOCAB.boi, VOCAB.eoi, VOCAB.pad}
        assert specials.isdisjoint(VOCAB.planning_ids)
        assert len(VOCAB.tokens) == len(set(VOCAB.tokens))

    def test_canonical_token_order_by_id(self):
        ids = [VOCAB.plan_id(t) for t in TreatmentToken]
        assert ids == sorted(ids)


class TestTemplates:
    def test_planning_template_exact(self):
        out = render_context("F", 57, 4, HISTORY, "plan")
        assert out == PLAN_TEMPLATE

    def test_imaging_template_exact(self):
        plan = TreatmentPlan((TreatmentToken.SUR, TreatmentToken.CRT))
        out = render_context("F", 57, 4, HISTORY, "img", plan=plan, tau=92)
        assert out == IMG_TEMPLATE

    def test_empty_history_renders_none(self):
        out = render_context("M", 61, 3, [], "plan")
        assert "Prior treatment: none." in out

    def test_img_requires_plan_and_tau(self):
        with pytest.raises(ValueError):
            render_context("F", 57, 4, HISTORY, "img")

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            render_context("F", 57, 4, HISTORY, "nope")


class TestTextCodec:
    @pytest.mark.parametrize("text", [PLAN_TEMPLATE, IMG_TEMPLATE])
    def test_round_trip_templates(self, text):
        assert text_decode(VOCAB, text_encode(VOCAB, text)) == text

    def test_planning_token_single_id(self):
        ids = text_encode(VOCAB, "[SUR]")
        assert ids == [VOCAB.plan_id(TreatmentToken.SUR)]

    def test_empty_string(self):
        assert text_encode(VOCAB, "") == []
        assert text_decode(VOCAB, []) == ""

    def test_unknown_span_named_in_error(self):
        with pytest.raises(ValueError, match="zorp"):
            text_encode(VOCAB, "Prior zorp treatment")

    @given(age=st.integers(35, 99), tau=st.integers(1, 999),
           grade=st.integers(3, 4))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_any_template_numbers(self, age, tau, grade):
        plan = TreatmentPlan((TreatmentToken.RT, TreatmentToken.TMZ))
        text = render_context("M", age, grade, [plan], "img", plan=plan, tau=tau)
        assert text_decode(VOCAB, text_encode(VOCAB, text)) == text


class TestAutoencoder:
    def test_identity_round_trip_exact(self, rng):
        ae = PatchAutoencoder(patch=4)
        vol = Volume(rng.uniform(-1, 1, (3, 32, 32, 32)).astype(np.float32))
        rec = ae.decode(ae.encode(vol))
        assert np.abs(rec.data - vol.data).max() == 0.0

    def test_token_count_512(self, rng):
        ae = PatchAutoencoder(patch=4)
        g = ae.encode(Volume(np.zeros((3, 32, 32, 32), dtype=np.float32)))
        assert g.n_tokens == 512
        assert g.channels == 3 * 4 ** 3

    def test_prefit_round_trip_under_1pct(self, small_cohort):
        ae = PatchAutoencoder(patch=4)
        vols = [tp.volume for t in small_cohort for tp in t.timepoints]
        ae.prefit(vols, c_lat=96)
        worst = max(nmse(ae.decode(ae.encode(v)).data, v.data) for v in vols)
        assert worst < 1.0

    def test_shape_mismatch_rejected(self, rng):
        ae = PatchAutoencoder(patch=5)
        with pytest.raises(ValueError):
            ae.encode(Volume(np.zeros((3, 32, 32, 32), dtype=np.float32)))


class TestNoiseAugment:
    def _grid(self, values):
        side = 2
        return LatentGrid(values=values, side=side, positions=grid_positions(side))

    def test_endpoints(self, rng):
        z1 = self._grid(rng.standard_normal((8, 6)))
        z0 = rng.standard_normal((8, 6))
        assert np.allclose(noise_augment(z1, 1.0, z0).values, z1.values)
        assert np.allclose(noise_augment(z1, 0.0, z0).values, z0)

    def test_midpoint(self):
        z1 = self._grid(np.ones((8, 4)))
        z0 = np.zeros((8, 4))
        assert np.allclose(noise_augment(z1, 0.5, z0).values, 0.5)

    @given(t=st.floats(0, 1), tp=st.floats(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_affine_in_t(self, t, tp):
        rng = np.random.default_rng(4)
        z1 = self._grid(rng.standard_normal((8, 3)))
        z0 = rng.standard_normal((8, 3))
        lhs = noise_augment(z1, t, z0).values - noise_augment(z1, tp, z0).values
        rhs = (t - tp) * (z1.values - z0)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch(self, rng):
        z1 = self._grid(rng.standard_normal((8, 3)))
        with pytest.raises(ValueError):
            noise_augment(z1, 0.5, np.zeros((8, 4)))


class TestBuildSequence:
    def _latent(self, rng, side=8, c=192):
        return LatentGrid(values=rng.standard_normal((side ** 3, c)),
                          side=side, positions=grid_positions(side))

    def test_layout_arithmetic(self, rng):
        text = list(range(10, 30))  # 20 text tokens
        seq = build_sequence(VOCAB, self._latent(rng), text, "plan")
        assert seq.length == 512 + 20 + 4
        assert list(seq.i_boundary) == [0, 1, 514, 535]
        assert seq.ids[0] == VOCAB.bos and seq.ids[1] == VOCAB.boi
        assert seq.ids[514] == VOCAB.eoi and seq.ids[535] == VOCAB.eos

    def test_partition_covers_everything(self, rng):
        seq = build_sequence(VOCAB, self._latent(rng), [12, 13], "plan")
        union = np.sort(np.concatenate([seq.i_text, seq.i_img, seq.i_boundary]))
        assert np.array_equal(union, np.arange(seq.length))
        assert not set(seq.i_text) & set(seq.i_img)

    def test_img_task_requires_current(self, rng):
        with pytest.raises(ValueError):
            build_sequence(VOCAB, self._latent(rng), [12], "img")

    def test_img_current_shape_checked(self, rng):
        z = self._latent(rng)
        bad = LatentGrid(values=np.zeros((8, 192)), side=2,
                         positions=grid_positions(2))
        with pytest.raises(ValueError):
            build_sequence(VOCAB, z, [12], "img", current=bad)
