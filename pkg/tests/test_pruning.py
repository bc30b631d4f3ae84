import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from homodistil.losses import IGNORE_INDEX, LossWeights, ProjectionSet, total_loss
from homodistil.model import ModelConfig, clone_model, forward, init_model
from homodistil.numerics import backward
from homodistil.optim import Adam
from homodistil.pruning import (
    ImportanceState,
    MaskIntegrityError,
    MaskSet,
    SparsitySchedule,
    alternative_scores,
    apply_masks,
    build_masks,
    check_masked_zero,
    column_importance,
    compact,
    compute_schedule,
    coupling_groups,
    ema_update,
    kept_count,
    platon_score,
    scored_matrices,
    sensitivity_scores,
    top_columns,
)


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        s = SparsitySchedule(200, 0.25, t_initial=0, t_final=100)
        assert compute_schedule(0, s) == 1.0
        assert compute_schedule(100, s) == 0.25
        assert compute_schedule(50, s) == 0.34375

    def test_before_initial(self):
        s = SparsitySchedule(100, 0.5, t_initial=20, t_final=60)
        assert all(compute_schedule(t, s) == 1.0 for t in range(21))

    def test_single_shot(self):
        s = SparsitySchedule(100, 0.5, t_initial=0, t_final=0)
        assert compute_schedule(0, s) == 0.5

    def test_out_of_range(self):
        s = SparsitySchedule(10, 0.5)
        for t in (-1, 11):
            with pytest.raises(ValueError):
                compute_schedule(t, s)

    def test_bad_schedule(self):
        with pytest.raises(ValueError):
            SparsitySchedule(10, 0.5, t_initial=6, t_final=5)
        with pytest.raises(ValueError):
            SparsitySchedule(10, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(T=st.integers(1, 300), rf=st.floats(0.01, 1.0), a=st.floats(0, 1), b=st.floats(0, 1))
    def test_monotone_non_increasing(self, T, rf, a, b):
        ti, tf = sorted((int(a * T), int(b * T)))
        s = SparsitySchedule(T, rf, t_initial=ti, t_final=tf)
        r = [compute_schedule(t, s) for t in range(T + 1)]
        assert all(x >= y for x, y in zip(r, r[1:]))
        assert all(rf <= x <= 1.0 for x in r)

    def test_per_matrix_type_final_step(self):
        s = SparsitySchedule(100, 0.5, tf_fractions={"embedding": 0.5, "query": 0.9, "other": 0.7})
        assert compute_schedule(50, s, "embedding") == 0.5
        assert compute_schedule(50, s, "query") > 0.5
        assert s.final_step("ffn_input") == 70.0

    def test_kept_count(self):
        assert kept_count(0.5, 32) == 16
        assert kept_count(0.34375, 32) == 11
        assert kept_count(0.01, 8) == 1
        assert kept_count(1.0, 7) == 7
        assert kept_count(0.7 * 10 / 10, 10) == 7  # float noise must not round up


class TestScores:
    def test_sensitivity(self):
        assert np.array_equal(sensitivity_scores(np.array([2.0, -3.0]), np.array([0.5, 1.0])), [1.0, 3.0])

    def test_zero_param(self):
        assert sensitivity_scores(np.array([0.0]), np.array([123.0]))[0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sensitivity_scores(np.ones(2), np.ones(3))

    def test_magnitude_and_movement(self):
        th, g = np.array([2.0, -3.0]), np.array([0.5, 1.0])
        assert np.array_equal(alternative_scores("magnitude", th), [2.0, 3.0])
        assert np.array_equal(alternative_scores("movement", th, g), [1.0, -3.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            alternative_scores("random", np.ones(2), np.ones(2))

    def test_platon_with_unit_uncertainty(self):
        s = np.array([0.3, 1.2])
        assert np.array_equal(platon_score(s, np.ones(2)), s)

    def test_platon_state(self):
        st_ = ImportanceState("platon", beta=0.5, beta_uncertainty=0.5)
        th, g = np.array([[2.0, 1.0]]), np.array([[1.0, 1.0]])
        st_.update("w", th, g)
        # I = [2, 1]; EMA = [1, .5]; U = .5 * |I - EMA| = [.5, .25]
        assert np.allclose(st_.buffers["w"], [[1.0, 0.5]])
        assert np.allclose(st_.uncertainty["w"], [[0.5, 0.25]])
        assert np.allclose(st_.score("w"), [[0.5, 0.125]])


class TestEMA:
    def test_arithmetic(self):
        assert ema_update(np.array([1.0]), np.array([2.0]), 0.9)[0] == pytest.approx(1.1, abs=1e-15)

    def test_beta_zero(self):
        new = np.array([3.0, -1.0])
        assert np.array_equal(ema_update(np.array([9.0, 9.0]), new, 0.0), new)

    def test_fixed_point(self):
        b = np.zeros(3)
        for _ in range(400):
            b = ema_update(b, np.full(3, 2.5), 0.9)
        assert np.allclose(b, 2.5, atol=1e-12)

    @pytest.mark.parametrize("beta", [-0.1, 1.0, 1.5])
    def test_bad_beta(self, beta):
        with pytest.raises(ValueError):
            ema_update(np.zeros(1), np.zeros(1), beta)


class TestColumnImportance:
    def test_l1_columns(self):
        assert np.array_equal(column_importance(np.array([[1.0, 2.0], [3.0, 4.0]])), [4.0, 6.0])

    def test_zero_column(self):
        assert column_importance(np.array([[0.0, 1.0], [0.0, 2.0]]))[0] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_row_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(5, 4))
        assert np.allclose(column_importance(s), column_importance(s[rng.permutation(5)]), rtol=0, atol=1e-12)


class TestTopColumns:
    def test_top_two(self):
        assert np.array_equal(top_columns(np.array([4.0, 6.0, 1.0]), 2), [1, 1, 0])

    def test_tie_lower_index(self):
        assert np.array_equal(top_columns(np.array([5.0, 5.0, 1.0]), 2), [1, 1, 0])
        assert np.array_equal(top_columns(np.array([1.0, 5.0, 5.0, 5.0]), 2), [0, 1, 1, 0])

    def test_allowed_subset(self):
        m = top_columns(np.array([9.0, 1.0, 2.0, 3.0]), 2, allowed=np.array([0.0, 1.0, 1.0, 1.0]))
        assert np.array_equal(m, [0, 0, 1, 1])

    def test_empty(self):
        with pytest.raises(ValueError):
            top_columns(np.array([]), 1)


@pytest.fixture
def toy():
    cfg = ModelConfig(vocab_size=24, max_seq_len=6, num_layers=2, hidden_dim=8, ffn_dim=12, num_heads=2)
    model = init_model(cfg, 0)
    proj = ProjectionSet.init(8, 8, seed=1)
    return model, proj


def _scored_state(model, proj, seed=0):
    teacher = clone_model(model)
    rng = np.random.default_rng(seed)
    toks = rng.integers(5, 24, (3, 6))
    labels = np.where(rng.random((3, 6)) < 0.3, toks, IGNORE_INDEX)
    labels[:, 0] = toks[:, 0]
    for p in model.parameters():
        p.data += rng.normal(scale=0.02, size=p.shape)
    b = total_loss(forward(model, toks), forward(teacher, toks), labels, proj, LossWeights())
    model.zero_grad()
    backward(b.total)
    groups = coupling_groups(model)
    state = ImportanceState("sensitivity", beta=0.0)
    for g in groups:
        for name in g.scored:
            state.update(name, model.params[name].data, model.params[name].grad)
    return state, groups


class TestMasks:
    def test_group_layout(self, toy):
        model, _ = toy
        groups = coupling_groups(model)
        assert [g.name for g in groups][0] == "hidden"
        assert {g.kind for g in groups} == {"hidden", "qk", "vo", "ffn"}
        assert len(groups) == 1 + 3 * 2
        for g in groups:
            for name, axis in g.members:
                if name in model.params:
                    assert model.params[name].shape[axis] == g.width

    def test_ratio_one_all_ones_and_bit_identical(self, toy):
        model, proj = toy
        state, groups = _scored_state(model, proj)
        before = model.digest()
        masks = build_masks(state, {g.name: 1.0 for g in groups}, groups)
        assert all(m.all() for m in masks.masks.values())
        apply_masks(model, proj, masks, groups)
        assert model.digest() == before

    def test_cardinality_and_idempotence(self, toy):
        model, proj = toy
        state, groups = _scored_state(model, proj)
        for r in (0.9, 0.5, 0.3, 0.01):
            masks = build_masks(state, {g.name: r for g in groups}, groups)
            for g in groups:
                m = masks.masks[g.name]
                assert set(np.unique(m)) <= {0.0, 1.0}
                assert int(m.sum()) == kept_count(r, g.width)
        apply_masks(model, proj, masks, groups)
        once = model.digest()
        apply_masks(model, proj, masks, groups)
        assert model.digest() == once
        check_masked_zero(model, proj, masks, groups)

    def test_coupled_rows_zeroed(self, toy):
        model, proj = toy
        groups = coupling_groups(model)
        masks = MaskSet.full(groups)
        masks.masks["layers.0.vo"][3] = 0.0
        masks.masks["layers.1.ffn"][5] = 0.0
        masks.masks["hidden"][2] = 0.0
        apply_masks(model, proj, masks, groups)
        P = model.params
        assert np.all(P["layers.0.attn.v.weight"].data[:, 3] == 0)
        assert np.all(P["layers.0.attn.o.weight"].data[3] == 0)
        assert np.all(P["layers.1.ffn.in.weight"].data[:, 5] == 0)
        assert np.all(P["layers.1.ffn.out.weight"].data[5] == 0)
        for k in range(2):
            for w in ("q", "k", "v"):
                assert np.all(P[f"layers.{k}.attn.{w}.weight"].data[2] == 0)
            assert P[f"layers.{k}.ln2.gamma"].data[2] == 0
        assert np.all(proj.hidden.data[2] == 0) and np.all(proj.embedding.data[2] == 0)
        assert model.buffers["hidden_live"][2] == 0

    def test_qk_share_mask(self, toy):
        model, proj = toy
        state, groups = _scored_state(model, proj)
        masks = build_masks(state, {g.name: 0.5 for g in groups}, groups)
        apply_masks(model, proj, masks, groups)
        q = model.params["layers.1.attn.q.weight"].data
        k = model.params["layers.1.attn.k.weight"].data
        assert np.array_equal(np.all(q == 0, axis=0), np.all(k == 0, axis=0))

    def test_optimizer_moments_zeroed(self, toy):
        model, proj = toy
        params = dict(model.params)
        opt = Adam(params)
        for name, p in params.items():
            opt.m[name][:] = 1.0
            opt.v[name][:] = 1.0
        groups = coupling_groups(model)
        masks = MaskSet.full(groups)
        masks.masks["layers.0.ffn"][0] = 0.0
        apply_masks(model, proj, masks, groups, opt)
        assert np.all(opt.m["layers.0.ffn.in.weight"][:, 0] == 0)
        assert np.all(opt.v["layers.0.ffn.out.weight"][0] == 0)
        assert np.all(opt.m["layers.0.ffn.in.weight"][:, 1] == 1)

    def test_shape_mismatch(self, toy):
        model, proj = toy
        groups = coupling_groups(model)
        masks = MaskSet.full(groups)
        masks.masks["hidden"] = np.ones(5)
        with pytest.raises(MaskIntegrityError):
            apply_masks(model, proj, masks, groups)

    def test_tampered_weights_detected(self, toy):
        model, proj = toy
        groups = coupling_groups(model)
        masks = MaskSet.full(groups)
        masks.masks["layers.1.vo"][0] = 0.0
        apply_masks(model, proj, masks, groups)
        model.params["layers.1.attn.o.weight"].data[0, 1] = 0.5
        with pytest.raises(MaskIntegrityError):
            compact(model, proj, masks, groups)

    def test_monotone_chain(self, toy):
        model, proj = toy
        state, groups = _scored_state(model, proj)
        prev = None
        for r in (0.9, 0.7, 0.5):
            masks = build_masks(state, {g.name: r for g in groups}, groups, prev, monotone=True)
            if prev is not None:
                for g in groups:
                    assert np.all(masks.masks[g.name] <= prev.masks[g.name])
            # scramble importance so non-monotone selection would differ
            for k in state.buffers:
                state.buffers[k] = state.buffers[k][..., ::-1].copy() if state.buffers[k].ndim == 2 else state.buffers[k]
            prev = masks

    def test_pruned_column_scores_zero_with_zero_beta(self, toy):
        model, proj = toy
        state, groups = _scored_state(model, proj)
        masks = build_masks(state, {g.name: 0.5 for g in groups}, groups)
        apply_masks(model, proj, masks, groups)
        teacher = clone_model(model)
        toks = np.array([[5, 6, 7, 8, 9, 10]])
        labels = np.full((1, 6), IGNORE_INDEX)
        labels[0, 2] = 7
        model.zero_grad()
        backward(total_loss(forward(model, toks), forward(teacher, toks), labels, proj, LossWeights()).total)
        st0 = ImportanceState("sensitivity", beta=0.0)
        for g in groups:
            for name in g.scored:
                st0.update(name, model.params[name].data, model.params[name].grad)
            dead = masks.masks[g.name] == 0
            for name in g.scored:
                assert np.all(st0.column_scores(name)[dead] == 0)


class TestCompactEquivalence:
    @pytest.mark.parametrize("ratio", [1.0, 0.75, 0.5, 0.25])
    def test_masked_equals_narrowed(self, toy, ratio):
        model, proj = toy
        state, groups = _scored_state(model, proj)
        masks = build_masks(state, {g.name: ratio for g in groups}, groups)
        apply_masks(model, proj, masks, groups)
        narrow, nproj = compact(model, proj, masks, groups)
        toks = np.random.default_rng(7).integers(0, 24, (4, 6))
        pad = np.ones((4, 6), dtype=bool)
        pad[1, 4:] = False
        a, b = forward(model, toks, pad), forward(narrow, toks, pad)
        assert np.max(np.abs(a.logits.data - b.logits.data)) <= 1e-10
        for ha, hb in zip(a.attention_maps, b.attention_maps):
            assert np.max(np.abs(ha.data - hb.data)) <= 1e-10
        for g in groups:
            assert narrow.widths()[g.name] == kept_count(ratio, g.width)
        assert nproj.hidden.shape[0] == narrow.hidden_width

    def test_all_ones_same_content(self, toy):
        model, proj = toy
        groups = coupling_groups(model)
        narrow, _ = compact(model, proj, MaskSet.full(groups), groups)
        for name, p in model.params.items():
            assert narrow.params[name].data.tobytes() == p.data.tobytes()


def test_taylor_fidelity_one_layer():
    # column scores of every scored matrix, ranked together, at the clone point
    cfg = ModelConfig(vocab_size=24, max_seq_len=8, num_layers=1, hidden_dim=8, ffn_dim=16, num_heads=2)
    teacher = init_model(cfg, 3)
    student = clone_model(teacher)
    rng = np.random.default_rng(0)
    proj = ProjectionSet.init(8, 8, seed=0)
    toks = rng.integers(5, 24, (8, 8))
    labels = np.where(rng.random((8, 8)) < 0.3, toks, IGNORE_INDEX)
    labels[:, 0] = toks[:, 0]
    tout = forward(teacher, toks)

    def loss():
        return total_loss(forward(student, toks), tout, labels, proj, LossWeights()).total.item()

    base = total_loss(forward(student, toks), tout, labels, proj, LossWeights()).total
    student.zero_grad()
    backward(base)
    sens, brute = [], []
    for name in scored_matrices(coupling_groups(student)):
        w = student.params[name]
        sens += list(column_importance(sensitivity_scores(w.data, w.grad)))
        for j in range(w.shape[1]):
            saved = w.data[:, j].copy()
            w.data[:, j] = 0.0
            brute.append(abs(loss() - base.item()))
            w.data[:, j] = saved
    assert spearmanr(sens, brute).statistic >= 0.8
