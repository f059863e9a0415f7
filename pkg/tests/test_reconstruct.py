import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feater import blocks as B
from feater.core import kernels as K
from feater.core.autograd import Tensor
from feater.core.gradcheck import grad_check
from feater.core.rng import RngStream
from feater.errors import ConfigurationError, DimensionError, ParameterError
from feater.reconstruct import (
    MaskPlan,
    apply_mask,
    make_mask_plan,
    masked_count,
    reconstruction_forward,
    reconstruction_loss,
)


class TestMaskPlan:
    def test_ratio_point_three(self):
        plan = make_mask_plan(32, 0.3, RngStream(0))
        assert plan.m == 10 and len(set(plan.indices)) == 10
        assert all(0 <= i < 32 for i in plan.indices)

    def test_zero_ratio(self):
        plan = make_mask_plan(32, 0.0, RngStream(0))
        assert plan.m == 0 and plan.indices == ()

    def test_deterministic(self):
        assert make_mask_plan(32, 0.3, RngStream(4, "m")) == make_mask_plan(32, 0.3, RngStream(4, "m"))

    def test_half_rounds_up(self):
        assert masked_count(2, 0.25) == 1
        assert masked_count(10, 0.25) == 3

    @pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ParameterError):
            make_mask_plan(8, ratio, RngStream(0))

    def test_ratio_rounding_to_all(self):
        with pytest.raises(ParameterError):
            make_mask_plan(2, 0.8, RngStream(0))

    def test_too_few_channels(self):
        with pytest.raises(ParameterError):
            make_mask_plan(1, 0.0, RngStream(0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 64), st.floats(0, 0.99), st.integers(0, 1000))
    def test_count_tracks_ratio(self, n, ratio, seed):
        if masked_count(n, ratio) >= n:
            return
        plan = make_mask_plan(n, ratio, RngStream(seed))
        assert abs(plan.m / n - ratio) <= 0.5 / n + 1e-12
        assert len(set(plan.indices)) == plan.m

    def test_json(self):
        plan = make_mask_plan(8, 0.5, RngStream(1))
        data = json.loads(plan.to_json())
        assert set(data) == {"n", "ratio", "m", "indices", "fill"}
        assert data["fill"] == "zeros" and data["m"] == 4
        assert MaskPlan.from_dict(data) == plan


class TestApplyMask:
    def test_empty_plan(self, rng):
        x = rng.normal((4, 3, 3))
        assert np.array_equal(apply_mask(x, MaskPlan(4, 0.0, ())).data, x)

    def test_all_but_one(self):
        out = apply_mask(np.ones((4, 2, 2)), MaskPlan(4, 0.75, (0, 1, 3))).data
        assert not out[[0, 1, 3]].any() and (out[2] == 1).all()

    def test_random_stack(self, rng):
        x = rng.normal((32, 5, 5))
        plan = make_mask_plan(32, 0.3, RngStream(2))
        out = apply_mask(x, plan).data
        zero = [i for i in range(32) if not out[i].any()]
        assert zero == list(plan.indices)
        keep = [i for i in range(32) if i not in plan.indices]
        assert np.array_equal(out[keep], x[keep])

    def test_index_out_of_range(self):
        with pytest.raises(DimensionError):
            apply_mask(np.ones((4, 2, 2)), MaskPlan(4, 0.25, (7,)))

    def test_channel_count_mismatch(self):
        with pytest.raises(DimensionError):
            apply_mask(np.ones((3, 2, 2)), MaskPlan(4, 0.25, (1,)))

    def test_learned_fill_is_a_stub(self):
        with pytest.raises(NotImplementedError):
            apply_mask(np.ones((4, 2, 2)), MaskPlan(4, 0.25, (1,), "learned"))


class TestLoss:
    def test_identical(self, rng):
        x = rng.normal((3, 4, 4))
        assert reconstruction_loss(x, x).item() == 0.0

    def test_constant_offset(self, rng):
        x = rng.normal((3, 4, 4))
        assert reconstruction_loss(x + 0.5, x).item() == pytest.approx(0.25, abs=1e-14)

    def test_summation_oracle(self, rng):
        a, b = rng.normal((3, 4, 5)), rng.normal((3, 4, 5))
        total = 0.0
        for v, w in zip(a.ravel(), b.ravel()):
            total += (v - w) ** 2
        assert abs(reconstruction_loss(a, b).item() - total / a.size) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            reconstruction_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_positive_when_different(self, rng):
        x = rng.normal((2, 2, 2))
        y = x.copy()
        y[0, 0, 0] = np.nextafter(y[0, 0, 0], np.inf)
        assert reconstruction_loss(x, y).item() > 0


def _stack(depth=2, n=4, h=4, w=4, init="uniform", seed=0):
    cfg = B.BlockStackConfig(depth, "feater", n, h, w, init=init, seed=seed)
    return cfg, B.init_stack_params(cfg)


class TestForward:
    def test_eval_is_plain_stack(self, rng):
        cfg, params = _stack()
        x = rng.normal((4, 4, 4))
        out, loss = reconstruction_forward(x, cfg, params, make_mask_plan(4, 0.5, rng), mode="eval")
        assert loss is None
        assert np.array_equal(out.data, B.stack_forward(x, cfg, params).data)

    def test_zero_ratio_train(self, rng):
        cfg, params = _stack()
        x = rng.normal((4, 4, 4))
        _, loss = reconstruction_forward(x, cfg, params, MaskPlan(4, 0.0, ()), mode="train")
        assert loss.item() == reconstruction_loss(B.stack_forward(x, cfg, params), x).item()

    def test_identity_stack_closed_form(self, rng):
        cfg, params = _stack(n=32, init="zeros")
        x = rng.normal((32, 4, 4))
        plan = make_mask_plan(32, 0.3, RngStream(3))
        out, loss = reconstruction_forward(x, cfg, params, plan, mode="train")
        assert np.array_equal(out.data, apply_mask(x, plan).data)
        expected = float((x[list(plan.indices)] ** 2).sum() / x.size)
        assert abs(loss.item() - expected) <= 1e-12

    def test_train_needs_plan(self, rng):
        cfg, params = _stack()
        with pytest.raises(ConfigurationError):
            reconstruction_forward(rng.normal((4, 4, 4)), cfg, params, None, mode="train")

    def test_bad_mode(self, rng):
        cfg, params = _stack()
        with pytest.raises(ConfigurationError):
            reconstruction_forward(rng.normal((4, 4, 4)), cfg, params, None, mode="infer")

    def test_gradient(self, rng):
        cfg, params = _stack(depth=1, n=3)
        x = Tensor(rng.normal((3, 4, 4)))
        plan = MaskPlan(3, 0.3, (1,))
        groups = {f"{k}": t for k, t in params[0].tensors().items()}
        groups["x"] = x
        rep = grad_check(lambda: reconstruction_forward(x, cfg, params, plan, "train")[1], groups)
        assert rep.worst < 1e-5, rep.max_rel_error
