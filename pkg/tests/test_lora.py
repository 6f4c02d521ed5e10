import numpy as np
import pytest

from renormlab import lora, tensor as T
from renormlab.errors import ConfigError, DegenerateWeightError


def make_adapter(seed, d=6, k=5, rank=2, alpha=2.0, mode=lora.RenormMode.FUNCTIONAL,
                 norm_kind="frobenius", nonzero_up=True):
    r = np.random.default_rng(seed)
    base = T.Tensor(r.normal(size=(d, k)))
    adapter = lora.init_adapter(base, rank=rank, alpha=alpha, mode=mode,
                                norm_kind=norm_kind, seed=seed + 1)
    if nonzero_up:
        adapter.up.array[:] = r.normal(size=(d, rank)) * 0.3
    return adapter


class TestEffectiveWeight:
    def test_zero_factors_passthrough_bitwise(self):
        for mode in lora.RenormMode:
            a = make_adapter(0, mode=mode, nonzero_up=False)  # B = 0
            w = lora.effective_weight(a)
            assert np.array_equal(w.array, a.base.array)

    def test_hand_scale(self):
        # W = [[3,4]], update doubles it; renorm must fold it back
        base = T.Tensor([[3.0, 4.0]])
        a = lora.LoraAdapter(base=base,
                             down=T.Tensor([[3.0, 4.0]], requires_grad=True),
                             up=T.Tensor([[1.0]], requires_grad=True),
                             rank=1, alpha=1.0, mode=lora.RenormMode.FUNCTIONAL)
        np.testing.assert_allclose(lora.effective_weight(a).array, [[3.0, 4.0]], rtol=1e-12)

    @pytest.mark.parametrize("norm_kind", ["frobenius", "spectral"])
    def test_norm_preserved_seeded(self, norm_kind):
        for seed in range(50):
            a = make_adapter(seed, norm_kind=norm_kind)
            rep = lora.norm_preservation_report(a)
            assert rep["relative_drift"] <= 1e-9

    def test_direction_preserved(self):
        a = make_adapter(3)
        combined = a.base.array + (a.alpha / a.rank) * (a.up.array @ a.down.array)
        w = lora.effective_weight(a).array
        mask = np.abs(combined) > 1e-12
        ratios = w[mask] / combined[mask]
        assert ratios.std() < 1e-12 and ratios.min() > 0

    def test_degenerate_cancellation(self):
        base = T.Tensor(np.eye(2))
        a = lora.LoraAdapter(base=base,
                             down=T.Tensor(-np.eye(2), requires_grad=True),
                             up=T.Tensor(np.eye(2), requires_grad=True),
                             rank=2, alpha=2.0, mode=lora.RenormMode.FUNCTIONAL)
        with pytest.raises(DegenerateWeightError):
            lora.effective_weight(a)

    def test_alpha_doubles_update_exactly(self):
        a1 = make_adapter(4, mode=lora.RenormMode.OFF, alpha=8.0, rank=8, d=9, k=9)
        a2 = lora.LoraAdapter(base=a1.base, down=a1.down, up=a1.up, rank=a1.rank,
                              alpha=16.0, mode=lora.RenormMode.OFF)
        d1 = lora.delta_weight(a1).array
        d2 = lora.delta_weight(a2).array
        assert np.array_equal(d2, 2.0 * d1)

    def test_off_mode_drift_matches_recomputation(self):
        a = make_adapter(5, mode=lora.RenormMode.OFF, alpha=8.0, rank=4, d=8, k=8)
        rep = lora.norm_preservation_report(a)
        combined = a.base.array + (a.up.array @ a.down.array) * (8.0 / 4)
        expected = abs(np.linalg.norm(combined) - np.linalg.norm(a.base.array))
        expected /= np.linalg.norm(a.base.array)
        assert rep["relative_drift"] == pytest.approx(expected, rel=1e-12)

    def test_off_mode_double_update_norm(self):
        # dW = W doubles the combined norm
        base = T.Tensor(np.eye(2))
        a = lora.LoraAdapter(base=base, down=T.Tensor(np.eye(2), requires_grad=True),
                             up=T.Tensor(np.eye(2), requires_grad=True),
                             rank=2, alpha=2.0, mode=lora.RenormMode.OFF)
        rep = lora.norm_preservation_report(a)
        assert rep["combined_norm"] == pytest.approx(2.0 * rep["base_norm"], rel=1e-12)


class TestLoraForward:
    def test_frozen_base_passthrough(self):
        a = make_adapter(6, mode=lora.RenormMode.OFF, nonzero_up=False)
        x = T.Tensor(np.random.default_rng(0).normal(size=(3, 5)))
        out = lora.lora_forward(x, a)
        np.testing.assert_array_equal(out.array, x.array @ a.base.array.T)

    @pytest.mark.parametrize("mode", list(lora.RenormMode))
    def test_grad_reaches_factors_only(self, mode):
        a = make_adapter(7, mode=mode)
        x = T.Tensor(np.random.default_rng(1).normal(size=(3, 5)))
        with T.Tape() as tape:
            out = lora.lora_forward(x, a)
            T.backward(tape, T.sum_(out))
        assert a.down.grad is not None and a.up.grad is not None
        assert a.base.grad is None

    def test_grad_check_functional_seed3(self):
        a = make_adapter(3, mode=lora.RenormMode.FUNCTIONAL)
        x = T.Tensor(np.random.default_rng(3).normal(size=(4, 5)))

        def loss_wrt_down(t):
            probe = lora.LoraAdapter(base=a.base, down=t, up=a.up, rank=a.rank,
                                     alpha=a.alpha, mode=a.mode, norm_kind=a.norm_kind)
            return T.sum_(T.square(lora.lora_forward(x, probe)))

        def loss_wrt_up(t):
            probe = lora.LoraAdapter(base=a.base, down=a.down, up=t, rank=a.rank,
                                     alpha=a.alpha, mode=a.mode, norm_kind=a.norm_kind)
            return T.sum_(T.square(lora.lora_forward(x, probe)))

        assert T.grad_check(loss_wrt_down, a.down, eps=1e-5) < 1e-4
        assert T.grad_check(loss_wrt_up, a.up, eps=1e-5) < 1e-4

    def test_functional_vs_detached_gradients_differ(self):
        grads = {}
        for mode in (lora.RenormMode.FUNCTIONAL, lora.RenormMode.DETACHED):
            a = make_adapter(8, mode=mode)
            x = T.Tensor(np.random.default_rng(2).normal(size=(3, 5)))
            with T.Tape() as tape:
                T.backward(tape, T.sum_(T.square(lora.lora_forward(x, a))))
            grads[mode] = a.down.grad.copy()
        assert not np.allclose(grads[lora.RenormMode.FUNCTIONAL],
                               grads[lora.RenormMode.DETACHED])


class TestSerialization:
    def test_round_trip(self, tmp_path):
        a = make_adapter(9, mode=lora.RenormMode.DETACHED, norm_kind="spectral")
        lora.save_adapter(a, tmp_path / "ad")
        b = lora.load_adapter(tmp_path / "ad")
        assert np.array_equal(a.base.array, b.base.array)
        assert np.array_equal(a.down.array, b.down.array)
        assert np.array_equal(a.up.array, b.up.array)
        assert (b.rank, b.alpha, b.mode, b.norm_kind) == (a.rank, a.alpha, a.mode, a.norm_kind)
        assert b.base_norm == pytest.approx(a.base_norm, rel=1e-12)


def test_rank_bound_enforced():
    base = T.Tensor(np.eye(3))
    with pytest.raises(ConfigError):
        lora.init_adapter(base, rank=4)


def test_cached_base_norm_matches_norm_kind():
    for kind in lora.NORM_KINDS:
        a = make_adapter(11, norm_kind=kind)
        assert a.base_norm == pytest.approx(lora._norm_value(a.base.array, kind), rel=1e-12)
