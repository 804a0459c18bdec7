import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atcasr.nn import (
    AdamState,
    CheckpointError,
    GradCheckError,
    LRSchedule,
    ParameterStore,
    adam_step,
    clip_grad_norm,
    grad_check,
    halving_schedule,
    load_checkpoint,
    load_into,
    lr_at,
    save_checkpoint,
    srl_schedule,
)
from atcasr.nn.checkpoint import deserialize, serialize
from atcasr.nn.layers import CausalConv1d, ChannelLayerNorm, conv_out_len


def scalar_store(value=1.0):
    return ParameterStore({"w": torch.tensor([value], dtype=torch.float64)})


# -- parameter store ---------------------------------------------------------

def test_store_rejects_duplicates_and_shape_changes():
    s = scalar_store()
    with pytest.raises(KeyError):
        s.add("w", torch.zeros(1))
    with pytest.raises(ValueError):
        s.assign("w", torch.zeros(2, dtype=torch.float64))
    s.assign("w", torch.tensor([5.0], dtype=torch.float64))
    assert s["w"].item() == 5.0


def test_store_order_is_insertion_order():
    s = ParameterStore()
    for n in ["b", "a", "c"]:
        s.add(n, torch.zeros(1))
    assert list(s) == ["b", "a", "c"]


def test_store_of_module_holds_references():
    lin = torch.nn.Linear(2, 3)
    s = ParameterStore.of(lin, "lin.")
    assert list(s) == ["lin.weight", "lin.bias"]
    assert s["lin.weight"] is lin.weight
    assert s.numel() == 9


# -- Adam ------------------------------------------------------------------

def test_adam_first_step_by_hand():
    s = scalar_store(1.0)
    state = AdamState(beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(s, {"w": torch.tensor([2.0], dtype=torch.float64)}, state, lr=0.1)
    # m_hat = 2, v_hat = 4 -> step = 0.1 * 2 / (2 + 1e-8)
    assert s["w"].item() == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    assert s["w"].item() == pytest.approx(0.9, abs=1e-8)
    assert state.step == 1


def test_adam_two_steps_follow_recurrences():
    s = scalar_store(1.0)
    state = AdamState()
    g = {"w": torch.tensor([2.0], dtype=torch.float64)}
    adam_step(s, g, state, lr=0.1)
    adam_step(s, g, state, lr=0.1)
    assert state.step == 2
    m = 0.9 * (0.1 * 2.0) + 0.1 * 2.0
    v = 0.999 * (0.001 * 4.0) + 0.001 * 4.0
    assert state.exp_avg["w"].item() == pytest.approx(m, rel=1e-14)
    assert state.exp_avg_sq["w"].item() == pytest.approx(v, rel=1e-14)
    step2 = 0.1 * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert s["w"].item() == pytest.approx(1.0 - 0.1 * 2 / (2 + 1e-8) - step2, abs=1e-14)


def test_adam_fresh_zero_gradient_is_identity():
    s = ParameterStore({"a": torch.randn(3, 4, dtype=torch.float64)})
    before = s.snapshot()
    adam_step(s, {"a": torch.zeros(3, 4, dtype=torch.float64)}, AdamState(), lr=0.5)
    assert torch.equal(before["a"], s["a"])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.floats(1e-4, 1.0), st.integers(0, 2**31 - 1))
def test_adam_zero_gradient_identity_for_any_state(warm_steps, lr, seed):
    gen = torch.Generator().manual_seed(seed)
    s = ParameterStore({"a": torch.randn(4, generator=gen, dtype=torch.float64)})
    state = AdamState()
    for _ in range(warm_steps):
        adam_step(s, {"a": torch.randn(4, generator=gen, dtype=torch.float64)}, state, lr)
    before = s.snapshot()
    adam_step(s, {"a": torch.zeros(4, dtype=torch.float64)}, state, lr)
    assert torch.equal(before["a"], s["a"])


def test_adam_shape_mismatch_names_parameter():
    s = ParameterStore({"layer.weight": torch.zeros(2, 2)})
    with pytest.raises(ValueError, match="layer.weight"):
        adam_step(s, {"layer.weight": torch.zeros(3)}, AdamState(), lr=0.1)


def test_adam_rejects_unknown_name_and_bad_lr():
    s = scalar_store()
    with pytest.raises(KeyError):
        adam_step(s, {"nope": torch.zeros(1)}, AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        adam_step(s, {"w": torch.ones(1, dtype=torch.float64)}, AdamState(), lr=0.0)


def test_adam_lr_scale_applies_per_parameter():
    s = ParameterStore({"a": torch.ones(1, dtype=torch.float64), "b": torch.ones(1, dtype=torch.float64)})
    g = {"a": torch.ones(1, dtype=torch.float64), "b": torch.ones(1, dtype=torch.float64)}
    adam_step(s, g, AdamState(), lr=0.1, lr_scale={"b": 0.5})
    assert (1 - s["a"].item()) == pytest.approx(2 * (1 - s["b"].item()))


def test_clip_grad_norm():
    p = torch.zeros(2, requires_grad=True)
    p.grad = torch.tensor([3.0, 4.0])
    s = ParameterStore({"p": p})
    assert clip_grad_norm(s, 1.0) == pytest.approx(5.0)
    assert p.grad.norm().item() == pytest.approx(1.0, rel=1e-6)


# -- schedules -------------------------------------------------------------

def test_srl_schedule_endpoints():
    sch = srl_schedule(total_iters=5000)
    assert lr_at(sch, 0) == 1e-7
    assert lr_at(sch, 500) == 1e-3
    assert lr_at(sch, 4999) == 1e-9
    assert lr_at(sch, 4998) > 1e-9
    assert lr_at(sch, 9999) == 1e-9


def test_halving_schedule():
    sch = halving_schedule(1e-4, 25)
    assert lr_at(sch, 0, epoch=0) == 1e-4
    assert lr_at(sch, 0, epoch=24) == 1e-4
    assert lr_at(sch, 0, epoch=25) == 5e-5
    assert lr_at(sch, 0, epoch=50) == 2.5e-5


def test_halving_with_warmup_ramps_linearly():
    sch = halving_schedule(1e-4, 25, warmup_iters=1000, warmup_start_lr=1e-5)
    assert lr_at(sch, 0) == 1e-5
    assert lr_at(sch, 500) == pytest.approx(5.5e-5)
    assert lr_at(sch, 1000) == 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 3000), st.integers(0, 3000))
def test_cosine_monotone_after_peak_and_bounded(a, b):
    sch = srl_schedule(total_iters=2500)
    lo, hi = sorted((a, b))
    if lo >= sch.warmup_iters:
        assert lr_at(sch, hi) <= lr_at(sch, lo)
    for it in (a, b):
        assert sch.min_lr <= lr_at(sch, it) <= sch.peak_lr


def test_schedule_validation():
    with pytest.raises(ValueError):
        LRSchedule(kind="linear", peak_lr=1.0)
    with pytest.raises(ValueError):
        lr_at(srl_schedule(1000), -1)


# -- gradient check ----------------------------------------------------------

def test_grad_check_quadratic():
    s = scalar_store(3.0)
    err = grad_check(lambda p: (p["w"] ** 2).sum(), s, probe_count=1, h=1e-5)
    assert err < 1e-6


def test_grad_check_detects_wrong_gradient():
    s = scalar_store(3.0)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert grad_check(lambda p: Wrong.apply(p["w"]).sum(), s, probe_count=1) > 0.1


def test_grad_check_reports_non_finite_loss():
    with pytest.raises(GradCheckError):
        grad_check(lambda p: torch.log(p["w"] * 0).sum(), scalar_store(1.0), probe_count=1)
    # finite at the base point, NaN one step to the left
    with pytest.raises(GradCheckError, match=r"w\[0\]"):
        grad_check(lambda p: torch.sqrt(p["w"]).sum(), scalar_store(0.0), probe_count=1)


def test_grad_check_restores_parameters():
    s = ParameterStore({"a": torch.randn(5, dtype=torch.float64)})
    before = s.snapshot()
    grad_check(lambda p: (p["a"] ** 3).sum(), s, probe_count=5)
    assert torch.equal(before["a"], s["a"])


# -- checkpoints ---------------------------------------------------------------

def _toy_store():
    torch.manual_seed(0)
    return ParameterStore({"x.w": torch.randn(3, 2, dtype=torch.float64), "x.b": torch.randn(2), "s": torch.tensor(1.5)})


def test_checkpoint_round_trip_bit_exact(tmp_path):
    s = _toy_store()
    save_checkpoint(tmp_path / "a.ckpt", s, {"stage": "test", "note": "héllo"})
    values, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"stage": "test", "note": "héllo"}
    assert list(values) == list(s)
    for n in s:
        assert torch.equal(values[n].to(s[n].dtype), s[n])
        assert values[n].shape == s[n].shape
    assert serialize(values, meta) == (tmp_path / "a.ckpt").read_bytes()


def test_checkpoint_forward_pass_identical(tmp_path):
    torch.manual_seed(1)
    lin = torch.nn.Linear(4, 3)
    x = torch.randn(5, 4)
    y = lin(x)
    save_checkpoint(tmp_path / "l.ckpt", ParameterStore.of(lin))
    lin2 = torch.nn.Linear(4, 3)
    load_into(ParameterStore.of(lin2), tmp_path / "l.ckpt")
    assert torch.equal(lin2(x), y)


def test_empty_checkpoint(tmp_path):
    save_checkpoint(tmp_path / "e.ckpt", ParameterStore())
    values, meta = load_checkpoint(tmp_path / "e.ckpt")
    assert values == {} and meta == {}


def test_truncated_checkpoint_is_rejected(tmp_path):
    save_checkpoint(tmp_path / "t.ckpt", _toy_store())
    blob = (tmp_path / "t.ckpt").read_bytes()
    for end in (len(blob) - 1, 20, 3):
        with pytest.raises(CheckpointError):
            deserialize(blob[:end])
    target = ParameterStore.of(torch.nn.Linear(2, 2))
    before = target.snapshot()
    (tmp_path / "t2.ckpt").write_bytes(blob[:-1])
    with pytest.raises(CheckpointError):
        load_into(target, tmp_path / "t2.ckpt", strict=False)
    assert all(torch.equal(before[n], target[n]) for n in target)


def test_corrupt_header_is_rejected():
    blob = serialize(_toy_store())
    bad = blob[:8] + b"\x00" + blob[9:]
    with pytest.raises(CheckpointError):
        deserialize(bad)
    with pytest.raises(CheckpointError):
        deserialize(b"\xff" * 8 + blob[8:])


def test_extra_bytes_are_rejected():
    with pytest.raises(CheckpointError):
        deserialize(serialize(_toy_store()) + b"\0")


# -- layers ------------------------------------------------------------------

def test_conv_out_len_matches_torch():
    for L, k, s, p in [(100, 10, 5, 0), (7, 3, 1, 1), (16, 4, 2, 0), (9, 8, 4, 0)]:
        conv = torch.nn.Conv1d(1, 1, k, stride=s, padding=p)
        assert conv(torch.zeros(1, 1, L)).shape[-1] == conv_out_len(L, k, s, p)


def test_causal_conv_ignores_future():
    torch.manual_seed(0)
    conv = CausalConv1d(2, 3, 4).double()
    x = torch.randn(1, 2, 10, dtype=torch.float64)
    y = conv(x)
    assert y.shape == (1, 3, 10)
    x2 = x.clone()
    x2[..., 6] += 1.0
    y2 = conv(x2)
    assert torch.equal(y[..., :6], y2[..., :6])
    assert not torch.equal(y[..., 6:], y2[..., 6:])


def test_channel_layer_norm_normalizes_each_frame():
    ln = ChannelLayerNorm(6, elementwise_affine=False).double()
    x = torch.randn(2, 6, 5, dtype=torch.float64) * 3 + 2
    y = ln(x)
    assert np.allclose(y.mean(dim=1).numpy(), 0, atol=1e-12)
    assert np.allclose(y.var(dim=1, unbiased=False).numpy(), 1, atol=1e-4)
