import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rpmlab import autodiff as ad
from rpmlab.autodiff import Tensor
from rpmlab.dataset import LabelAccessError, Pack, generate_dataset
from rpmlab.nn import NetworkSpec, NumericError, build_network
from rpmlab.raster import render_panel
from rpmlab.solvers import (
    ONE_HOT, ROW_INDEX, TWO_HOT, build_mcpt_rows, initial_model, mcpt_forward, mcpt_loss,
    predict_mcpt, predict_pack, predict_supervised, pseudo_target, stack_supervised_input,
    supervised_loss, train_mcpt, train_supervised,
)

SMALL = dict(conv_channels=(4, 8, 8, 8))


@pytest.fixture(scope="module")
def pack():
    return generate_dataset({"Center": 12, "2*2Grid": 4}, seed=3)


def direct_ce(logits, c):
    """-sum_k z_k log softmax(logits)_k with plain floats and the math module."""
    m = max(logits)
    denom = sum(math.exp(v - m) for v in logits)
    return -sum((1.0 if k == c else 0.0) * ((v - m) - math.log(denom)) for k, v in enumerate(logits))


def direct_bce(p, z):
    return -sum(zk * math.log(pk) + (1 - zk) * math.log(1 - pk) for pk, zk in zip(p, z))


class TestInputs:
    def test_row_index_mapping(self):
        assert ROW_INDEX.tolist()[:2] == [[0, 1, 2], [3, 4, 5]]
        for j in range(8):
            assert ROW_INDEX[j + 2].tolist() == [6, 7, 8 + j]

    def test_rows_from_rendered_problem(self, pack):
        p = pack.problem(0)
        rows = build_mcpt_rows(pack.images[0])
        assert rows.shape == (10, 3, 32, 32)
        for k in range(3):
            assert rows[0, k].tobytes() == render_panel(p.context[k]).tobytes()
        assert rows[4, 2].tobytes() == render_panel(p.candidates[2]).tobytes()
        for r in range(2, 10):
            assert rows[r, :2].tobytes() == rows[2, :2].tobytes()

    def test_stacked_input(self, pack):
        p = pack.problem(1)
        x = stack_supervised_input(pack.images[1])
        assert x.shape == (16, 32, 32)
        assert x[0].tobytes() == render_panel(p.context[0]).tobytes()
        swapped = x.copy()
        swapped[[8, 9]] = swapped[[9, 8]]
        assert not np.array_equal(swapped, x)

    @pytest.mark.parametrize("shape", [(15, 32, 32), (16, 32, 16)])
    def test_rejects_bad_stacks(self, shape):
        with pytest.raises(ValueError):
            stack_supervised_input(np.zeros(shape))
        with pytest.raises(ValueError):
            build_mcpt_rows(np.zeros(shape))

    def test_pseudo_targets(self):
        assert pseudo_target(TWO_HOT).tolist() == [1, 1] + [0] * 8
        assert pseudo_target(ONE_HOT).tolist() == [1] + [0] * 9
        with pytest.raises(ValueError):
            pseudo_target("three-hot")


class TestLossOracles:
    def test_supervised_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            z = rng.normal(scale=rng.uniform(0.1, 20), size=8)
            c = int(rng.integers(8))
            got = float(supervised_loss(Tensor(z), c).data)
            assert abs(got - direct_ce(z.tolist(), c)) <= 1e-12 * max(1.0, abs(got))

    def test_mcpt_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        for i in range(1000):
            p = rng.uniform(1e-6, 1 - 1e-6, size=10)
            z = pseudo_target(TWO_HOT if i % 2 else ONE_HOT, np.float64)
            got = float(mcpt_loss(Tensor(p), z).data)
            assert abs(got - direct_bce(p.tolist(), z.tolist())) <= 1e-12 * max(1.0, abs(got))

    def test_uniform_values(self):
        for c in range(8):
            assert abs(float(supervised_loss(Tensor(np.zeros(8)), c).data) - math.log(8)) < 1e-12
        half = Tensor(np.full(10, 0.5))
        assert abs(float(mcpt_loss(half, pseudo_target(TWO_HOT, np.float64)).data) - 10 * math.log(2)) < 1e-12

    def test_confident_limits(self):
        z = np.zeros(8)
        z[3] = 60
        assert float(supervised_loss(Tensor(z), 3).data) < 1e-12
        p = Tensor(pseudo_target(TWO_HOT, np.float64))
        assert float(mcpt_loss(p, pseudo_target(TWO_HOT, np.float64)).data) < 1e-5


class TestPrediction:
    def test_supervised_argmax(self):
        assert predict_supervised(np.array([0, 0, 5, 0, 0, 0, 0, 0.0])) == 2
        assert predict_supervised(np.zeros(8)) == 0

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(-30, 30)))
    def test_supervised_argmax_matches_softmax(self, z):
        assert predict_supervised(z) == predict_supervised(ad.softmax(z)) or np.isclose(
            np.sort(z)[-1], np.sort(z)[-2])

    def test_mcpt_drops_context_rows(self):
        probs = np.array([0.9, 0.9, 0.1, 0.2, 0.8, 0.1, 0.1, 0.1, 0.1, 0.1])
        assert predict_mcpt(probs) == 2  # candidate y3

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 10, elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
    def test_mcpt_ignores_first_two(self, probs, a, b):
        changed = probs.copy()
        changed[:2] = a, b
        assert predict_mcpt(changed) == predict_mcpt(probs)

    def test_mcpt_needs_ten(self):
        with pytest.raises(ValueError):
            predict_mcpt(np.zeros(8))


class TestMcptForward:
    def test_zero_output_model_gives_half(self, pack):
        m = build_network(NetworkSpec.row_scorer(**SMALL), 0)
        m.params["fc.weight"].data[:] = 0
        probs = mcpt_forward(m, build_mcpt_rows(pack.float_images([0])[0])).data
        np.testing.assert_array_equal(probs, np.full(10, 0.5, np.float32))

    def test_shape_range_and_duplicates(self, pack):
        m = build_network(NetworkSpec.row_scorer(**SMALL), 1)
        imgs = pack.float_images([2])[0]
        imgs[12] = imgs[9]
        probs = mcpt_forward(m, build_mcpt_rows(imgs)).data
        assert probs.shape == (10,) and ((probs > 0) & (probs < 1)).all()
        assert probs[2 + 4] == probs[2 + 1]

    def test_spec_mismatch(self, pack):
        m = build_network(NetworkSpec.supervised(**SMALL), 0)
        with pytest.raises(ValueError):
            mcpt_forward(m, build_mcpt_rows(pack.float_images([0])[0]))

    def test_candidate_permutation_equivariance(self, pack):
        m = build_network(NetworkSpec.row_scorer(**SMALL), 2)
        imgs = pack.float_images([0])[0]
        base = mcpt_forward(m, build_mcpt_rows(imgs)).data
        rng = np.random.default_rng(0)
        for _ in range(20):
            sigma = rng.permutation(8)
            permuted = imgs.copy()
            permuted[8:] = imgs[8 + sigma]
            probs = mcpt_forward(m, build_mcpt_rows(permuted)).data
            assert probs[2:].tobytes() == base[2:][sigma].tobytes()
            assert sigma[predict_mcpt(probs)] == predict_mcpt(base)

    def test_batched_equals_single(self, pack):
        m = build_network(NetworkSpec.row_scorer(**SMALL), 3)
        rows = build_mcpt_rows(pack.float_images([0, 1, 2]))
        batched = mcpt_forward(m, rows).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], mcpt_forward(m, rows[i]).data, rtol=1e-6)


class TestTraining:
    def test_supervised_determinism(self, pack):
        a = train_supervised(pack, range(8), NetworkSpec.supervised(**SMALL), epochs=2, seed=4, batch_size=4)
        b = train_supervised(pack, range(8), NetworkSpec.supervised(**SMALL), epochs=2, seed=4, batch_size=4)
        assert a.batch_losses == b.batch_losses
        assert len(a.batch_losses) == 4 and len(a.epoch_losses) == 2

    def test_mcpt_determinism(self, pack):
        spec = NetworkSpec.row_scorer(**SMALL)
        a = train_mcpt(pack, range(8), spec, epochs=2, seed=5, batch_size=4)
        b = train_mcpt(pack, range(8), spec, epochs=2, seed=5, batch_size=4)
        assert a.batch_losses == b.batch_losses
        c = train_mcpt(pack, range(8), spec, epochs=2, seed=6, batch_size=4)
        assert a.batch_losses != c.batch_losses

    def test_initial_losses_near_uniform(self, pack):
        idx = list(range(16))
        for seed in range(5):
            sup = train_supervised(pack, idx, NetworkSpec.supervised(), epochs=1, seed=seed, batch_size=16)
            assert abs(sup.batch_losses[0] - math.log(8)) <= 0.7
            mc = train_mcpt(pack, idx, NetworkSpec.row_scorer(), epochs=1, seed=seed, batch_size=16)
            assert abs(mc.batch_losses[0] - 10 * math.log(2)) <= 1.0

    def test_initial_model_is_training_start(self, pack):
        spec = NetworkSpec.row_scorer(**SMALL)
        a, b = initial_model(spec, 9), initial_model(spec, 9)
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_mcpt_never_reads_labels(self, pack):
        class Poisoned(Pack):
            @property
            def answers(self):
                raise AssertionError("answers read during unsupervised training")

            @answers.setter
            def answers(self, value):
                pass

        poisoned = Poisoned(pack.resolution, pack.config_codes, None, [], pack.images)
        train_mcpt(poisoned, range(4), NetworkSpec.row_scorer(**SMALL), epochs=1, seed=0, batch_size=4)
        with pytest.raises(LabelAccessError):
            pack.unlabeled().answers

    def test_supervised_needs_labels(self, pack):
        with pytest.raises(LabelAccessError):
            train_supervised(pack.unlabeled(), range(4), NetworkSpec.supervised(**SMALL), epochs=1)

    def test_non_finite_loss_aborts_with_context(self, pack):
        class Broken(Pack):
            def float_images(self, idx):
                return np.full((len(idx), 16, 32, 32), np.nan, np.float32)

        broken = Broken(pack.resolution, pack.config_codes, pack.answers, pack.annotations, pack.images)
        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            train_supervised(broken, range(4), NetworkSpec.supervised(**SMALL), epochs=1)

    def test_empty_split(self, pack):
        with pytest.raises(ValueError):
            train_supervised(pack, [], NetworkSpec.supervised(**SMALL))

    def test_predict_pack_modes(self, pack):
        sup = build_network(NetworkSpec.supervised(**SMALL), 0)
        out = predict_pack(sup, pack, range(5), "supervised", batch_size=2)
        assert out.shape == (5,) and ((0 <= out) & (out < 8)).all()
        with pytest.raises(ValueError):
            predict_pack(sup, pack, range(5), "mcpt")
        with pytest.raises(ValueError):
            predict_pack(sup, pack, range(5), "ranking")
