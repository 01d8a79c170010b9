import itertools

import numpy as np
import pytest

from glioworld.config import ModelConfig
from glioworld.model import WorldModel, build_attention_mask
from glioworld.tokenizer import LatentGrid, build_sequence, grid_positions


def micro_config(**kw):
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ff=16, patch=4, grid=8,
                aligner_taps=(1,), aligner_width=4, flow_depth=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def micro_model():
    return WorldModel(micro_config(), seed=3, dtype=np.float64)


def make_latent(rng, side, c):
    return LatentGrid(values=rng.standard_normal((side ** 3, c)),
                      side=side, positions=grid_positions(side))


def plan_seq(model, rng, n_text=4):
    v = model.vocab
    ids = list(rng.integers(10, v.size, size=n_text))
    lat = make_latent(rng, model.cfg.latent_side, model.cfg.lat_channels)
    return build_sequence(v, lat, ids, "plan")


class TestAttentionMask:
    def test_example_L4(self):
        M = build_attention_mask([2, 3], 4)
        want = np.zeros((4, 4))
        want[2, 3] = -np.inf
        assert np.array_equal(M, want)

    def test_empty_text_all_zero(self):
        assert not build_attention_mask([], 5).any()

    def test_L6_forbidden_set(self):
        M = build_attention_mask([3, 4, 5], 6)
        forbidden = {(i, j) for i in range(6) for j in range(6)
                     if M[i, j] == -np.inf}
        assert forbidden == {(3, 4), (3, 5), (4, 5)}

    def test_exhaustive_small(self):
        for L in range(1, 9):
            for r in range(0, 4):
                for it in itertools.combinations(range(L), r):
                    M = build_attention_mask(it, L)
                    s = set(it)
                    for i in range(L):
                        for j in range(L):
                            want = -np.inf if (i in s and j in s and j > i) else 0.0
                            assert M[i, j] == want


class TestUnifiedAttention:
    def test_zero_value_projection_is_pure_residual(self, rng):
        from glioworld.layers import AttnBlock
        blk = AttnBlock(8, 2, rng, np.float64)
        blk.attn.wv.w[...] = 0.0
        blk.attn.wv.b[...] = 0.0
        blk.attn.wo.b[...] = 0.0
        x = rng.standard_normal((1, 5, 8))
        assert np.allclose(blk.forward(x, None), x)

    def test_masked_token_cannot_influence(self, micro_model, rng):
        """Perturbing a future text token leaves earlier text rows unchanged."""
        seq = plan_seq(micro_model, rng)
        batch = micro_model.collate([seq])
        out1, _, _ = micro_model.trunk_forward(batch)
        j = seq.length - 2          # last text token
        i = seq.length - 4          # an earlier text position
        ids2 = batch.ids.copy()
        v = micro_model.vocab
        ids2[0, j] = (v.id_of["none"] if ids2[0, j] != v.id_of["none"]
                      else v.id_of["Prior"])
        batch2 = type(batch)(ids=ids2, img=batch.img, img_cur=batch.img_cur,
                             attn_mask=batch.attn_mask, i_img=batch.i_img,
                             lengths=batch.lengths, task=batch.task)
        out2, _, _ = micro_model.trunk_forward(batch2)
        assert np.allclose(out1[0, i], out2[0, i], atol=1e-12)
        assert not np.allclose(out1[0, j], out2[0, j])

    def test_attention_rows_sum_to_one(self, rng):
        from glioworld.layers import MultiHeadAttention, softmax
        mha = MultiHeadAttention(8, 2, rng, np.float64)
        x = rng.standard_normal((1, 6, 8))
        M = build_attention_mask([3, 4, 5], 6)
        ctx = {}
        mha.forward(x, M, ctx)
        sums = ctx["attn"].sum(axis=-1)
        assert np.allclose(sums, 1.0)
        # masked positions carry zero weight
        assert np.all(ctx["attn"][0, :, 3, 4:] == 0.0)


class TestFFNRouting:
    def test_shared_layers_bit_identical_across_tasks(self, rng):
        from glioworld.layers import TrunkLayer
        layer = TrunkLayer(8, 2, 16, rng, np.float64, task_specific=False)
        x = rng.standard_normal((1, 5, 8))
        a = layer.forward(x, None, "plan")
        b = layer.forward(x, None, "img")
        assert np.array_equal(a, b)

    def test_specific_layers_differ(self, rng):
        from glioworld.layers import TrunkLayer
        layer = TrunkLayer(8, 2, 16, rng, np.float64, task_specific=True)
        x = rng.standard_normal((1, 5, 8))
        assert not np.allclose(layer.forward(x, None, "plan"),
                               layer.forward(x, None, "img"))

    def test_zero_second_linear_is_identity(self, rng):
        from glioworld.layers import FFNBlock
        blk = FFNBlock(8, 16, rng, np.float64)
        blk.ffn.lin2.w[...] = 0.0
        blk.ffn.lin2.b[...] = 0.0
        x = rng.standard_normal((2, 5, 8))
        assert np.allclose(blk.forward(x), x)


class TestForward:
    def test_toy_shapes_L536(self, rng):
        cfg = ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ff=128, patch=4,
                          grid=32, aligner_taps=(1, 2, 4), aligner_width=8,
                          flow_depth=2)
        model = WorldModel(cfg, seed=0, dtype=np.float32)
        lat = make_latent(np.random.default_rng(0), 8, cfg.lat_channels)
        ids = list(range(10, 30))
        seq = build_sequence(model.vocab, lat, ids, "plan")
        res = model.forward_single(seq)
        assert len(res["hidden"]) == 8
        assert all(h.shape == (536, 64) for h in res["hidden"])
        assert set(res["taps"]) == {1, 2, 4}
        assert res["plan_logits"].shape == (536, model.vocab.size)

    def test_forward_deterministic(self, micro_model, rng):
        seq = plan_seq(micro_model, rng)
        a = micro_model.forward_single(seq)
        b = micro_model.forward_single(seq)
        assert np.array_equal(a["final"], b["final"])

    def test_img_forward_requires_t(self, micro_model, rng):
        lat = make_latent(rng, micro_model.cfg.latent_side,
                          micro_model.cfg.lat_channels)
        cur = make_latent(rng, micro_model.cfg.latent_side,
                          micro_model.cfg.lat_channels)
        seq = build_sequence(micro_model.vocab, lat, [11, 12], "img", current=cur)
        with pytest.raises(ValueError):
            micro_model.forward_single(seq)


class TestHeads:
    def test_plan_head_zero_params_uniform(self, rng):
        model = WorldModel(micro_config(), seed=1, dtype=np.float64)
        model.plan_head.w[...] = 0.0
        model.plan_head.b[...] = 0.0
        seq = plan_seq(model, rng)
        logits = model.forward_single(seq)["plan_logits"]
        probs = np.exp(logits[-2]) / np.exp(logits[-2]).sum()
        assert np.allclose(probs, 1.0 / model.vocab.size)

    def test_flow_head_shape_and_zero_output(self, rng):
        model = WorldModel(micro_config(), seed=1, dtype=np.float64)
        c = model.cfg.lat_channels
        lat = make_latent(rng, model.cfg.latent_side, c)
        cur = make_latent(rng, model.cfg.latent_side, c)
        seq = build_sequence(model.vocab, lat, [11, 12], "img", current=cur)
        v = model.forward_single(seq, t=0.3)["velocity"]
        assert v.shape == (model.cfg.n_img_tokens, c)
        model.flow_head.out.w[...] = 0.0
        model.flow_head.out.b[...] = 0.0
        model.flow_head.skip.w[...] = 0.0
        model.flow_head.skip.b[...] = 0.0
        v0 = model.forward_single(seq, t=0.3)["velocity"]
        assert np.all(v0 == 0.0)

    def test_flow_head_distinct_timesteps(self, rng):
        model = WorldModel(micro_config(), seed=1, dtype=np.float64)
        # generic (non-zero) output parameters
        model.flow_head.out.w[...] = rng.standard_normal(model.flow_head.out.w.shape)
        model.flow_head.mod_f.w[...] = rng.standard_normal(model.flow_head.mod_f.w.shape)
        c = model.cfg.lat_channels
        lat = make_latent(rng, model.cfg.latent_side, c)
        cur = make_latent(rng, model.cfg.latent_side, c)
        seq = build_sequence(model.vocab, lat, [11, 12], "img", current=cur)
        v1 = model.forward_single(seq, t=0.1)["velocity"]
        v2 = model.forward_single(seq, t=0.9)["velocity"]
        assert not np.allclose(v1, v2)


class TestStructure:
    def test_parameter_partition(self):
        cfg = micro_config(n_layers=4, aligner_taps=(1, 2))
        model = WorldModel(cfg, seed=0)
        params = model.params()
        n_sha = cfg.n_shared
        shared_ffn = [k for k in params
                      if ".ffn." in k and any(k.startswith(f"trunk{i}.")
                                              for i in range(1, n_sha + 1))]
        task_ffn = [k for k in params if ".ffn_plan." in k or ".ffn_img." in k]
        # no task-specific FFN parameters in shared layers
        for k in task_ffn:
            layer = int(k.split(".")[0].removeprefix("trunk"))
            assert layer > n_sha
        per_layer_shared = sum(params[k].size for k in shared_ffn) // n_sha
        n_spe = cfg.n_layers - n_sha
        assert sum(params[k].size for k in task_ffn) == 2 * per_layer_shared * n_spe

    def test_causality_of_plan_logits(self, micro_model, rng):
        seq = plan_seq(micro_model, rng, n_text=5)
        res = micro_model.forward_single(seq)
        i = seq.length - 4  # third-from-last text position
        ids2 = seq.ids.copy()
        ids2[seq.length - 2] = (micro_model.vocab.id_of["none"] if ids2[seq.length - 2] != micro_model.vocab.id_of["none"] else micro_model.vocab.id_of["Prior"])
        seq2 = type(seq)(ids=ids2, img=seq.img, task=seq.task, i_text=seq.i_text,
                         i_img=seq.i_img, i_boundary=seq.i_boundary,
                         img_cur=seq.img_cur, text_ids=seq.text_ids)
        res2 = micro_model.forward_single(seq2)
        assert np.allclose(res["plan_logits"][i], res2["plan_logits"][i],
                           atol=1e-12)

    def test_full_context_image_sees_text(self, micro_model, rng):
        """On the imaging task a text change reaches every image position."""
        c = micro_model.cfg.lat_channels
        lat = make_latent(rng, micro_model.cfg.latent_side, c)
        cur = make_latent(rng, micro_model.cfg.latent_side, c)
        v = micro_model.vocab
        seq = build_sequence(v, lat, [11, 12, 13], "img", current=cur)
        res = micro_model.forward_single(seq, t=0.5)
        ids2 = seq.ids.copy()
        ids2[seq.length - 2] = (v.id_of["none"] if ids2[seq.length - 2] != v.id_of["none"] else v.id_of["Prior"])
        seq2 = type(seq)(ids=ids2, img=seq.img, task=seq.task, i_text=seq.i_text,
                         i_img=seq.i_img, i_boundary=seq.i_boundary,
                         img_cur=seq.img_cur, text_ids=seq.text_ids)
        res2 = micro_model.forward_single(seq2, t=0.5)
        for img_pos in seq.i_img:
            assert not np.allclose(res["final"][img_pos], res2["final"][img_pos])

    def test_positional_rows_pairwise_distinct(self):
        model = WorldModel(micro_config(), seed=5)
        rows = model.emb_pos
        assert len(np.unique(rows.round(10), axis=0)) == rows.shape[0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(n_layers=3).validate()
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=4).validate()
        with pytest.raises(ValueError):
            micro_config(aligner_taps=(2,)).validate()  # beyond shared half
        with pytest.raises(ValueError):
            micro_config(lambda_img=0.0).validate()
