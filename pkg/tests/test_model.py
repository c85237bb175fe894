import io
import math

import numpy as np
import pytest

from linkforge.errors import NonFiniteError, ValidationError
from linkforge.model import (AdamState, DropoutMasks, HeadParams, LossTerms,
                             adam_step, combine_terms, compute_gradients,
                             compute_loss, ed_forward, init_adam, init_params,
                             load_checkpoint, md_forward, sample_dropout_masks,
                             save_checkpoint, softmax_rows, zeros_like_params)

# ---------------------------------------------------------------------------
# Independent scalar oracles (no numpy vectorization, no shared code paths).
# ---------------------------------------------------------------------------


def oracle_softmax(row):
    top = max(row)
    exps = [math.exp(v - top) for v in row]
    total = sum(exps)
    return [v / total for v in exps]


def oracle_md_probs(H, weight, bias, mask=None):
    probs = []
    for i in range(len(H)):
        x = [H[i][j] * (mask[i][j] if mask is not None else 1.0)
             for j in range(len(H[i]))]
        logits = [sum(weight[t][j] * x[j] for j in range(len(x))) + bias[t]
                  for t in range(3)]
        probs.append(oracle_softmax(logits))
    return probs


def oracle_ed_proj(H, weight, bias, mask=None):
    out = []
    for i in range(len(H)):
        x = [H[i][j] * (mask[i][j] if mask is not None else 1.0)
             for j in range(len(H[i]))]
        out.append([
            math.tanh(sum(weight[u][j] * x[j] for j in range(len(x))) + bias[u])
            for u in range(len(weight))
        ])
    return out


def oracle_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (max(na, 1e-12) * max(nb, 1e-12))


def oracle_loss(H, md_labels, ed_mask, ed_targets, params, md_loss_weight,
                dropout=None):
    Hl = H.tolist()
    md_mask = dropout.md.tolist() if dropout is not None else None
    ed_drop = dropout.ed.tolist() if dropout is not None else None
    probs = oracle_md_probs(Hl, params.md_weight.tolist(),
                            params.md_bias.tolist(), md_mask)
    md_terms = [-math.log(probs[i][md_labels[i]])
                for i in range(len(Hl)) if md_labels[i] >= 0]
    proj = oracle_ed_proj(Hl, params.ed_weight.tolist(),
                          params.ed_bias.tolist(), ed_drop)
    ed_terms = [1.0 - oracle_cosine(proj[i], ed_targets[i].tolist())
                for i in range(len(Hl)) if ed_mask[i]]
    md = sum(md_terms) / len(md_terms) if md_terms else 0.0
    ed = sum(ed_terms) / len(ed_terms) if ed_terms else 0.0
    return md_loss_weight * md + (1.0 - md_loss_weight) * ed, md, ed


def random_instance(rng, p=None, m=None, d=None, with_pads=True):
    p = p or int(rng.integers(3, 13))
    m = m or int(rng.integers(2, 17))
    d = d or int(rng.integers(2, 9))
    H = rng.standard_normal((p, m))
    md_labels = rng.integers(0, 3, size=p)
    # sprinkle tail/pad positions that carry no labels
    if with_pads:
        ignored = rng.random(p) < 0.3
        md_labels = np.where(ignored, -1, md_labels)
    ed_mask = (md_labels == 2) & (rng.random(p) < 0.7)
    ed_targets = np.zeros((p, d))
    for i in np.flatnonzero(ed_mask):
        v = rng.standard_normal(d)
        while np.linalg.norm(v) == 0:
            v = rng.standard_normal(d)
        ed_targets[i] = v
    params = HeadParams(
        md_weight=rng.standard_normal((3, m)) * 0.7,
        md_bias=rng.standard_normal(3) * 0.3,
        ed_weight=rng.standard_normal((d, m)) * 0.7,
        ed_bias=rng.standard_normal(d) * 0.3,
    )
    return H, md_labels, ed_mask, ed_targets, params


class TestMdForward:
    def test_zero_params_uniform_probs_and_tie_break(self):
        params = HeadParams(np.zeros((3, 4)), np.zeros(3),
                            np.zeros((2, 4)), np.zeros(2))
        H = np.ones((5, 4))
        _, probs, tags = md_forward(H, params)
        assert np.allclose(probs, 1.0 / 3.0, atol=1e-15)
        assert (tags == 0).all()  # I wins ties at the lowest index

    def test_analytic_softmax(self):
        params = HeadParams(np.eye(3), np.zeros(3), np.zeros((2, 3)), np.zeros(2))
        H = np.array([[math.log(2.0), 0.0, 0.0]])
        _, probs, tags = md_forward(H, params)
        assert np.allclose(probs[0], [0.5, 0.25, 0.25], atol=1e-12)
        assert tags[0] == 0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(100)
        for _ in range(10):
            H, _, _, _, params = random_instance(rng)
            _, probs, _ = md_forward(H, params)
            expected = oracle_md_probs(H.tolist(), params.md_weight.tolist(),
                                       params.md_bias.tolist())
            assert np.max(np.abs(probs - np.array(expected))) < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(101)
        H, _, _, _, params = random_instance(rng, p=12)
        _, probs, _ = md_forward(H * 40, params)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-12)
        assert np.all(probs >= 0) and np.all(probs <= 1)

    def test_non_finite_rejected(self):
        params = HeadParams(np.zeros((3, 2)), np.zeros(3),
                            np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(NonFiniteError):
            md_forward(np.array([[np.nan, 0.0]]), params)


class TestEdForward:
    def test_zero_case(self):
        params = HeadParams(np.zeros((3, 4)), np.zeros(3),
                            np.zeros((2, 4)), np.zeros(2))
        out = ed_forward(np.random.default_rng(0).standard_normal((3, 4)) * 0,
                         params)
        assert np.array_equal(out, np.zeros((3, 2)))

    def test_saturation(self):
        params = HeadParams(np.zeros((3, 2)), np.zeros(3),
                            np.zeros((1, 2)), np.array([100.0]))
        out = ed_forward(np.zeros((1, 2)), params)
        assert abs(out[0, 0] - 1.0) < 1e-12

    def test_matches_scalar_oracle_and_open_interval(self):
        rng = np.random.default_rng(102)
        for _ in range(10):
            H, _, _, _, params = random_instance(rng)
            out = ed_forward(H, params)
            expected = oracle_ed_proj(H.tolist(), params.ed_weight.tolist(),
                                      params.ed_bias.tolist())
            assert np.max(np.abs(out - np.array(expected))) < 1e-12
            assert np.all(out > -1.0) and np.all(out < 1.0)


class TestComputeLoss:
    def test_weighted_mix_is_exact(self):
        breakdown = combine_terms(LossTerms(1.0, 1, 0.5, 1), 0.1)
        assert breakdown.total == 0.55

    def test_perfect_predictions_reach_zero(self):
        # logits with a huge gold margin give probability exactly 1.0;
        # a projection equal to its target gives cosine 1 up to one ulp.
        m, d = 3, 2
        H = np.array([[1.0, 0.0, 0.0]])
        params = HeadParams(
            md_weight=np.array([[0.0, 0.0, 0.0],
                                [0.0, 0.0, 0.0],
                                [2000.0, 0.0, 0.0]]),
            md_bias=np.zeros(3),
            ed_weight=np.zeros((d, m)),
            ed_bias=np.array([0.3, -0.2]),
        )
        target = np.tanh(np.array([0.3, -0.2]))
        breakdown = compute_loss(H, np.array([2]), np.array([True]),
                                 target[None, :], params, 0.1)
        assert breakdown.md_loss == 0.0
        assert abs(breakdown.ed_loss) < 1e-12
        assert abs(breakdown.total) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(103)
        for _ in range(20):
            H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
            w = float(rng.choice([0.0, 0.1, 0.5, 1.0]))
            got = compute_loss(H, md_labels, ed_mask, ed_targets, params, w)
            expected_total, expected_md, expected_ed = oracle_loss(
                H, md_labels, ed_mask, ed_targets, params, w)
            assert abs(got.total - expected_total) < 1e-12
            assert abs(got.md_loss - expected_md) < 1e-12
            assert abs(got.ed_loss - expected_ed) < 1e-12

    def test_matches_scalar_oracle_with_dropout(self):
        rng = np.random.default_rng(104)
        for _ in range(10):
            H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
            masks = sample_dropout_masks(rng, H.shape[0], H.shape[1], 0.1)
            got = compute_loss(H, md_labels, ed_mask, ed_targets, params,
                               0.1, masks)
            expected_total, _, _ = oracle_loss(H, md_labels, ed_mask,
                                               ed_targets, params, 0.1, masks)
            assert abs(got.total - expected_total) < 1e-12

    def test_no_ed_targets_means_md_only(self):
        rng = np.random.default_rng(105)
        H, md_labels, _, _, params = random_instance(rng, d=4)
        ed_mask = np.zeros(len(H), dtype=bool)
        ed_targets = np.zeros((len(H), 4))
        breakdown = compute_loss(H, md_labels, ed_mask, ed_targets, params, 0.3)
        assert breakdown.ed_loss == 0.0
        assert breakdown.ed_count == 0
        assert breakdown.total == 0.3 * breakdown.md_loss

    def test_objective_affine_in_weight(self):
        terms = LossTerms(1.7, 3, 0.9, 2)
        for w in np.linspace(0.0, 1.0, 11):
            breakdown = combine_terms(terms, float(w))
            assert breakdown.total == float(w) * breakdown.md_loss + \
                (1.0 - float(w)) * breakdown.ed_loss

    def test_invalid_weight_rejected(self):
        rng = np.random.default_rng(106)
        H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
        for w in (-0.1, 1.1):
            with pytest.raises(ValidationError):
                compute_loss(H, md_labels, ed_mask, ed_targets, params, w)

    def test_zero_norm_target_rejected(self):
        rng = np.random.default_rng(107)
        H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
        ed_mask = ed_mask.copy()
        ed_mask[0] = True
        ed_targets = ed_targets.copy()
        ed_targets[0] = 0.0
        with pytest.raises(ValidationError, match="zero norm"):
            compute_loss(H, md_labels, ed_mask, ed_targets, params, 0.1)


class TestMaskingSemantics:
    def test_pad_and_tail_perturbations_change_nothing(self):
        rng = np.random.default_rng(108)
        for _ in range(20):
            H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
            excluded = np.flatnonzero(md_labels < 0)
            if excluded.size == 0:
                continue
            base = compute_loss(H, md_labels, ed_mask, ed_targets, params, 0.1)
            H2 = H.copy()
            H2[excluded] += rng.standard_normal((excluded.size, H.shape[1])) * 5
            again = compute_loss(H2, md_labels, ed_mask, ed_targets, params, 0.1)
            assert again.md_loss == base.md_loss
            assert again.ed_loss == base.ed_loss

    def test_non_first_mention_pieces_do_not_touch_ed_loss(self):
        rng = np.random.default_rng(109)
        for _ in range(20):
            H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
            labelled = np.flatnonzero((md_labels >= 0) & ~ed_mask)
            if labelled.size == 0:
                continue
            base = compute_loss(H, md_labels, ed_mask, ed_targets, params, 0.1)
            H2 = H.copy()
            H2[labelled] += rng.standard_normal((labelled.size, H.shape[1]))
            again = compute_loss(H2, md_labels, ed_mask, ed_targets, params, 0.1)
            assert again.ed_loss == base.ed_loss


def flatten_params(params):
    return np.concatenate([arr.ravel() for _, arr in params.arrays()])


def unflatten_params(flat, like):
    arrays = []
    offset = 0
    for _, arr in like.arrays():
        arrays.append(flat[offset:offset + arr.size].reshape(arr.shape))
        offset += arr.size
    return HeadParams(*arrays)


def finite_difference_gradients(H, md_labels, ed_mask, ed_targets, params,
                                md_loss_weight, dropout=None, h=1e-6):
    flat = flatten_params(params)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        up = compute_loss(H, md_labels, ed_mask, ed_targets,
                          unflatten_params(bumped, params), md_loss_weight,
                          dropout).total
        bumped[i] -= 2 * h
        down = compute_loss(H, md_labels, ed_mask, ed_targets,
                            unflatten_params(bumped, params), md_loss_weight,
                            dropout).total
        grad[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))


class TestGradients:
    def test_decoupled_objective_zeroes_the_other_head(self):
        rng = np.random.default_rng(110)
        H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
        g1 = compute_gradients(H, md_labels, ed_mask, ed_targets, params, 1.0)
        assert np.array_equal(g1.ed_weight, np.zeros_like(g1.ed_weight))
        assert np.array_equal(g1.ed_bias, np.zeros_like(g1.ed_bias))
        g0 = compute_gradients(H, md_labels, ed_mask, ed_targets, params, 0.0)
        assert np.array_equal(g0.md_weight, np.zeros_like(g0.md_weight))
        assert np.array_equal(g0.md_bias, np.zeros_like(g0.md_bias))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(111)
        for trial in range(10):
            H, md_labels, ed_mask, ed_targets, params = random_instance(
                rng, p=6, m=5, d=4)
            w = [0.0, 0.1, 1.0, 0.5][trial % 4]
            analytic = flatten_params(compute_gradients(
                H, md_labels, ed_mask, ed_targets, params, w))
            numeric = finite_difference_gradients(
                H, md_labels, ed_mask, ed_targets, params, w)
            assert max_relative_error(analytic, numeric) < 1e-5

    def test_matches_finite_differences_with_frozen_dropout(self):
        rng = np.random.default_rng(112)
        for _ in range(5):
            H, md_labels, ed_mask, ed_targets, params = random_instance(
                rng, p=5, m=4, d=3)
            masks = sample_dropout_masks(rng, H.shape[0], H.shape[1], 0.1)
            analytic = flatten_params(compute_gradients(
                H, md_labels, ed_mask, ed_targets, params, 0.1, masks))
            numeric = finite_difference_gradients(
                H, md_labels, ed_mask, ed_targets, params, 0.1, masks)
            assert max_relative_error(analytic, numeric) < 1e-5


def scalar_adam_oracle(initial, grads_per_step, lr, beta1=0.9, beta2=0.999,
                       eps=1e-8):
    """Plain-float Adam, mirroring the documented update formulas."""
    values = list(initial)
    m = [0.0] * len(values)
    v = [0.0] * len(values)
    t = 0
    for grads in grads_per_step:
        t += 1
        for i, g in enumerate(grads):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
            m_hat = m[i] / (1.0 - beta1 ** t)
            v_hat = v[i] / (1.0 - beta2 ** t)
            values[i] = values[i] - lr * m_hat / (math.sqrt(v_hat) + eps)
    return values


def tiny_params(values):
    a, b = values
    return HeadParams(np.array([[a]] * 3), np.zeros(3),
                      np.array([[b]]), np.zeros(1))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        lr = 2e-5
        params = HeadParams(np.array([[1.0]] * 3), np.zeros(3),
                            np.array([[2.0]]), np.zeros(1))
        grads = HeadParams(np.array([[0.5]] * 3), np.zeros(3),
                           np.array([[-0.25]]), np.zeros(1))
        state = init_adam(params, lr=lr)
        updated, new_state = adam_step(params, grads, state)
        delta = updated.md_weight[0, 0] - 1.0
        assert abs(abs(delta) - lr) < 1e-6 * lr
        assert delta < 0  # moves against the gradient
        assert updated.ed_weight[0, 0] - 2.0 > 0
        assert new_state.t == 1

    def test_zero_gradient_zero_state_is_fixed_point(self):
        params = init_params(4, 3, seed=0)
        state = init_adam(params)
        updated, _ = adam_step(params, zeros_like_params(params), state)
        for (_, a), (_, b) in zip(updated.arrays(), params.arrays()):
            assert np.array_equal(a, b)

    def test_three_step_trajectory_matches_scalar_oracle_bitwise(self):
        lr = 1e-2
        # 2-parameter quadratic J = (a - 3)^2/2 + (b + 1)^2/2
        values = [0.0, 0.0]
        params = tiny_params(values)
        state = init_adam(params, lr=lr)
        grad_log = []
        for _ in range(3):
            a = params.md_weight[0, 0]
            b = params.ed_weight[0, 0]
            grad_log.append((a - 3.0, b + 1.0))
            grads = tiny_params((a - 3.0, b + 1.0))
            params, state = adam_step(params, grads, state)
        expected = scalar_adam_oracle([0.0, 0.0], grad_log, lr)
        assert params.md_weight[0, 0] == expected[0]
        assert params.ed_weight[0, 0] == expected[1]

    def test_step_decreases_convex_objective(self):
        rng = np.random.default_rng(113)
        H, md_labels, ed_mask, ed_targets, params = random_instance(rng)
        state = init_adam(params, lr=1e-3)
        before = compute_loss(H, md_labels, ed_mask, ed_targets, params, 0.1)
        grads = compute_gradients(H, md_labels, ed_mask, ed_targets, params, 0.1)
        params, state = adam_step(params, grads, state)
        after = compute_loss(H, md_labels, ed_mask, ed_targets, params, 0.1)
        assert after.total < before.total

    def test_non_finite_gradients_rejected(self):
        params = init_params(3, 2, seed=1)
        state = init_adam(params)
        bad = zeros_like_params(params)
        bad.md_weight[0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            adam_step(params, bad, state)


class TestCheckpoint:
    def test_round_trip(self):
        params = init_params(6, 4, seed=9)
        state = init_adam(params, lr=3e-4)
        grads = compute_gradients(
            *random_instance(np.random.default_rng(114), p=5, m=6, d=4)[:4],
            params, 0.1)
        params, state = adam_step(params, grads, state)
        config = {"md_loss_weight": 0.1, "seed": 9,
                  "vocab_digest": "abc", "entity_table_digest": "def",
                  "encoder": {"m": 6, "window": 1, "seed": 0}}
        buf = io.BytesIO()
        save_checkpoint(buf, params, state, config)
        buf.seek(0)
        loaded_params, loaded_state, loaded_config = load_checkpoint(buf)
        for (_, a), (_, b) in zip(loaded_params.arrays(), params.arrays()):
            assert np.array_equal(a, b)
        for moments, expected in ((loaded_state.first_moment, state.first_moment),
                                  (loaded_state.second_moment, state.second_moment)):
            for (_, a), (_, b) in zip(moments.arrays(), expected.arrays()):
                assert np.array_equal(a, b)
        assert loaded_state.t == state.t
        assert loaded_state.lr == state.lr
        assert loaded_config["vocab_digest"] == "abc"
        assert loaded_config["encoder"]["m"] == 6


class TestSoftmaxHelper:
    def test_extreme_logits_stay_normalized(self):
        logits = np.array([[1000.0, -1000.0, 0.0], [5.0, 5.0, 5.0]])
        probs = softmax_rows(logits)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-12)
        assert probs[0, 0] == 1.0


class TestDropoutMasks:
    def test_masks_are_zero_or_scaled(self):
        rng = np.random.default_rng(115)
        masks = sample_dropout_masks(rng, 30, 20, 0.1)
        scale = 1.0 / 0.9
        for arr in (masks.md, masks.ed):
            assert set(np.unique(arr)).issubset({0.0, scale})
        assert not np.array_equal(masks.md, masks.ed)  # independent per head

    def test_rate_zero_is_none(self):
        rng = np.random.default_rng(116)
        assert sample_dropout_masks(rng, 4, 4, 0.0) is None

    def test_bad_rate_rejected(self):
        rng = np.random.default_rng(117)
        with pytest.raises(ValidationError):
            sample_dropout_masks(rng, 4, 4, 1.0)
