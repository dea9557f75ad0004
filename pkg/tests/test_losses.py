import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from selfreg_unet.errors import AlignmentError, ChannelParityError, LabelRangeError, ShapeError
from selfreg_unet.losses import (
    IFDConfig,
    SCRConfig,
    dice_ce_loss,
    ifd_loss,
    random_channel_select,
    scr_loss,
    spatial_average_pool,
    split_scr_taps,
    total_loss,
)
from selfreg_unet.unet import FeatureTap, TapAddress, build_unet

import oracles
from conftest import random_taps, toy_config


def tap(name, array, requires_grad=False):
    return FeatureTap(TapAddress.parse(name), torch.as_tensor(array, dtype=torch.float64).requires_grad_(requires_grad))


# ---------------------------------------------------------------- dice + CE


def test_dice_ce_near_perfect():
    labels = torch.randint(0, 3, (2, 8, 8), generator=torch.Generator().manual_seed(0))
    logits = 20.0 * torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    assert dice_ce_loss(logits, labels) < 1e-4


def test_dice_ce_uniform_logits_ce_is_ln2():
    labels = torch.tensor([[[0, 1], [1, 0]]])
    logits = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    ce = torch.nn.functional.cross_entropy(logits, labels)
    assert math.isclose(float(ce), math.log(2), rel_tol=1e-12)
    # soft dice: p = 0.5 everywhere, each class covers half the pixels
    dice = (2 * 1.0 + 1e-5) / (2.0 + 2.0 + 1e-5)
    assert math.isclose(float(dice_ce_loss(logits, labels)), 0.5 * math.log(2) + 0.5 * (1 - dice), rel_tol=1e-12)


def test_dice_ce_matches_loop_oracle_2x2x2x2():
    rng = np.random.default_rng(11)
    logits = rng.standard_normal((2, 2, 2, 2))
    labels = rng.integers(0, 2, (2, 2, 2))
    got = float(dice_ce_loss(torch.as_tensor(logits), torch.as_tensor(labels)))
    assert abs(got - oracles.dice_ce(logits, labels)) < 1e-10


def test_dice_ce_errors():
    logits = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ShapeError):
        dice_ce_loss(logits, torch.zeros(1, 4, 5, dtype=torch.long))
    with pytest.raises(LabelRangeError):
        dice_ce_loss(logits, torch.full((1, 4, 4), 2))
    with pytest.raises(LabelRangeError):
        dice_ce_loss(logits, torch.full((1, 4, 4), -1))


# ---------------------------------------------------------------- channel selection


def test_rcs_full_selection_is_permutation():
    x = torch.arange(6.0).reshape(1, 6, 1, 1)
    out, idx = random_channel_select(x, 6, np.random.default_rng(0))
    assert sorted(idx) == list(range(6))
    assert out.flatten().tolist() == [float(i) for i in idx]


def test_rcs_seeded_determinism():
    x = torch.randn(2, 8, 3, 3)
    a = random_channel_select(x, 4, np.random.default_rng(7))
    b = random_channel_select(x, 4, np.random.default_rng(7))
    assert a[1] == b[1] and len(set(a[1])) == 4
    assert torch.equal(a[0], b[0])
    assert a[0].shape == (2, 4, 3, 3)


def test_rcs_selection_frequency_binomial():
    rng = np.random.default_rng(123)
    x = torch.zeros(1, 6, 1, 1)
    counts = np.zeros(6)
    n = 10_000
    for _ in range(n):
        counts[random_channel_select(x, 3, rng)[1]] += 1
    sigma = math.sqrt(n * 0.5 * 0.5)
    assert np.all(np.abs(counts - n * 0.5) <= 3 * sigma), counts


def test_rcs_keeps_gradient_path():
    x = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
    out, idx = random_channel_select(x, 2, np.random.default_rng(1))
    out.sum().backward()
    mask = torch.zeros(4, dtype=torch.float64)
    mask[idx] = 1
    assert torch.equal(x.grad, mask.view(1, 4, 1, 1).expand_as(x))


@pytest.mark.parametrize("k", [0, 5])
def test_rcs_bad_k(k):
    with pytest.raises(ValueError):
        random_channel_select(torch.zeros(1, 4, 1, 1), k, np.random.default_rng(0))


# ---------------------------------------------------------------- pooling


def test_pool_identity_and_constant():
    x = torch.randn(2, 3, 8, 8)
    assert torch.equal(spatial_average_pool(x, (8, 8)), x)
    c = torch.full((1, 2, 8, 8), 3.25)
    assert torch.equal(spatial_average_pool(c, (2, 4)), torch.full((1, 2, 2, 4), 3.25))


def test_pool_ramp():
    x = torch.arange(16.0, dtype=torch.float64).reshape(1, 1, 4, 4)
    expected = oracles.avg_pool(x.numpy(), 2, 2)
    assert np.array_equal(expected[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    assert torch.equal(spatial_average_pool(x, (2, 2)), torch.as_tensor(expected))


def test_pool_rejects_non_divisible():
    with pytest.raises(ShapeError):
        spatial_average_pool(torch.zeros(1, 1, 6, 6), (4, 4))


# ---------------------------------------------------------------- SCR


def test_scr_zero_when_taps_equal_pooled_teacher():
    # teacher channels share one pattern so any channel draw matches
    pattern = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    final = np.repeat(pattern, 4, axis=1)
    students = [
        tap("E2(1)", np.repeat(oracles.avg_pool(pattern, 4, 4), 8, axis=1)),
        tap("B(2)", np.repeat(oracles.avg_pool(pattern, 1, 1), 64, axis=1)),
    ]
    for seed in range(5):
        assert float(scr_loss(students, tap("D1(2)", final), np.random.default_rng(seed))) < 1e-28


def test_scr_constant_teacher_zero_taps():
    c = 1.7
    students = [tap("E2(1)", np.zeros((1, 8, 4, 4))), tap("B(1)", np.zeros((1, 64, 1, 1)))]
    final = tap("D1(2)", np.full((1, 4, 16, 16), c))
    assert math.isclose(float(scr_loss(students, final, np.random.default_rng(0))), c * c, rel_tol=1e-12)


def test_scr_two_tap_loop_oracle_seed3():
    rng = np.random.default_rng(99)
    s1, s2 = rng.standard_normal((2, 6, 4, 4)), rng.standard_normal((2, 8, 2, 2))
    final = rng.standard_normal((2, 4, 8, 8))
    got = float(scr_loss([tap("E2(2)", s1), tap("E3(1)", s2)], tap("D1(2)", final), np.random.default_rng(3)))
    assert abs(got - oracles.scr([s1, s2], final, 3)) < 1e-10


def test_scr_alignment_error():
    with pytest.raises(AlignmentError):
        scr_loss([tap("E1(1)", np.zeros((1, 2, 4, 4)))], tap("D1(2)", np.zeros((1, 4, 4, 4))), np.random.default_rng(0))


def test_split_scr_taps_excludes_d1():
    taps = random_taps(np.random.default_rng(0))
    students, final = split_scr_taps(taps)
    assert len(students) == 16
    assert all(t.address.block != "D1" for t in students)
    assert str(final.address) == "D1(2)"


def test_scr_18_tap_oracle_equivalence():
    taps = random_taps(np.random.default_rng(4), batch=2)
    students, final = split_scr_taps(taps)
    got = float(scr_loss(students, final, np.random.default_rng(8)))
    want = oracles.scr([t.values.numpy() for t in students], final.values.numpy(), 8)
    assert abs(got - want) < 1e-10


def test_scr_permutation_invariance_in_expectation():
    rng = np.random.default_rng(2024)
    student = rng.standard_normal((1, 8, 2, 2))
    final = rng.standard_normal((1, 4, 4, 4))
    permuted = student[:, rng.permutation(8)]
    n = 2000
    a = np.array([float(scr_loss([tap("E2(1)", student)], tap("D1(2)", final), np.random.default_rng(s))) for s in range(n)])
    b = np.array([float(scr_loss([tap("E2(1)", permuted)], tap("D1(2)", final), np.random.default_rng(s + n))) for s in range(n)])
    se = math.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)
    assert abs(a.mean() - b.mean()) <= 3 * se


# ---------------------------------------------------------------- IFD


def test_ifd_identical_halves_zero():
    half = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    assert float(ifd_loss([tap("E1(1)", np.concatenate([half, half], axis=1))])) == 0.0


def test_ifd_unit_residual():
    x = np.concatenate([np.ones((1, 4, 3, 3)), np.zeros((1, 4, 3, 3))], axis=1)
    assert float(ifd_loss([tap("E1(1)", x)])) == 1.0


def test_ifd_loop_oracle_1x4x2x2():
    x = np.random.default_rng(6).standard_normal((1, 4, 2, 2))
    assert abs(float(ifd_loss([tap("E1(1)", x)])) - oracles.ifd([x])) < 1e-10


def test_ifd_18_tap_oracle_equivalence():
    taps = random_taps(np.random.default_rng(5), batch=2)
    want = oracles.ifd([t.values.numpy() for t in taps])
    assert abs(float(ifd_loss(taps)) - want) < 1e-10


def test_ifd_parity_error():
    with pytest.raises(ChannelParityError):
        ifd_loss([tap("E1(1)", np.zeros((1, 3, 2, 2)))])


# ---------------------------------------------------------------- stop-gradient


def test_scr_teacher_receives_no_gradient():
    rng = np.random.default_rng(1)
    final = tap("D1(2)", rng.standard_normal((1, 4, 8, 8)), requires_grad=True)
    student = tap("E2(1)", rng.standard_normal((1, 8, 4, 4)), requires_grad=True)
    # teacher also feeds the students, as in a real forward: no gradient may reach it via the SCR target
    loss = scr_loss([student], final, np.random.default_rng(0))
    loss.backward()
    assert final.values.grad is None or torch.count_nonzero(final.values.grad) == 0
    assert torch.count_nonzero(student.values.grad) > 0


def test_ifd_shallow_half_receives_no_gradient():
    x = tap("E1(1)", np.random.default_rng(2).standard_normal((2, 6, 3, 3)), requires_grad=True)
    ifd_loss([x]).backward()
    assert torch.count_nonzero(x.values.grad[:, :3]) == 0
    assert torch.count_nonzero(x.values.grad[:, 3:]) > 0


# ---------------------------------------------------------------- total


def _toy_forward(seed=0):
    model = build_unet(toy_config(seed=seed), dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 2, (2, 16, 16), generator=gen)
    logits, taps = model(x)
    return model, x, y, logits, taps


def test_total_reduces_to_baseline():
    _, _, y, logits, taps = _toy_forward()
    out = total_loss(logits, y, taps, SCRConfig(lambda1=0.0), IFDConfig(lambda2=0.0), np.random.default_rng(0))
    assert torch.equal(out.total, out.l_cd)
    assert torch.equal(out.l_cd, dice_ce_loss(logits, y))


def test_total_arithmetic_default_lambdas():
    assert math.isclose(1.0 + 0.015 * 2.0 + 0.015 * 4.0, 1.09, rel_tol=1e-12)


def test_total_breakdown_identity_and_reproducibility():
    _, _, y, logits, taps = _toy_forward(3)
    scr, ifd = SCRConfig(lambda1=0.015), IFDConfig(lambda2=0.015)
    a = total_loss(logits, y, taps, scr, ifd, np.random.default_rng(9))
    b = total_loss(logits, y, taps, scr, ifd, np.random.default_rng(9))
    f = a.as_floats()
    assert abs(f["total"] - (f["l_cd"] + 0.015 * f["l_scr"] + 0.015 * f["l_ifd"])) < 1e-12
    assert a.as_floats() == b.as_floats()
    assert min(f["l_cd"], f["l_scr"], f["l_ifd"]) >= 0


def test_disabled_terms_are_zero():
    _, _, y, logits, taps = _toy_forward()
    out = total_loss(logits, y, taps, SCRConfig(enabled=False), IFDConfig(enabled=False), np.random.default_rng(0))
    assert float(out.l_scr) == 0.0 and float(out.l_ifd) == 0.0
    assert torch.equal(out.total, out.l_cd)


def test_negative_lambdas_rejected():
    with pytest.raises(ValueError, match="scr.lambda1 must be ≥ 0"):
        SCRConfig(lambda1=-1)
    with pytest.raises(ValueError, match="ifd.lambda2 must be ≥ 0"):
        IFDConfig(lambda2=-0.1)
    with pytest.raises(ValueError):
        IFDConfig(p=1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_losses_non_negative(seed, scale):
    rng = np.random.default_rng(seed)
    taps = random_taps(rng, scale=scale)
    students, final = split_scr_taps(taps)
    assert float(scr_loss(students, final, rng)) >= 0
    assert float(ifd_loss(taps)) >= 0
    logits = torch.as_tensor(scale * rng.standard_normal((1, 3, 4, 4)))
    labels = torch.as_tensor(rng.integers(0, 3, (1, 4, 4)))
    assert float(dice_ce_loss(logits, labels)) >= 0


def frozen_teacher_objective(model, x, y, scr, ifd, seed):
    """Total loss with SCR/IFD targets pinned to their values at the current parameters.

    Its finite-difference derivative at the current point equals the
    analytic gradient of the stop-gradient objective.
    """
    with torch.no_grad():
        _, taps0 = model(x)
    _, final0 = split_scr_taps(taps0)

    def objective():
        logits, taps = model(x)
        l_cd = dice_ce_loss(logits, y)
        students, _ = split_scr_taps(taps)
        l_scr = scr_loss(students, final0, np.random.default_rng(seed))
        halves = []
        for t, t0 in zip(taps, taps0):
            c = t.values.shape[1]
            halves.append(FeatureTap(t.address, torch.cat([t0.values[:, : c // 2], t.values[:, c // 2 :]], dim=1)))
        return l_cd + scr.lambda1 * l_scr + ifd.lambda2 * ifd_loss(halves)

    return objective


def check_total_loss_gradients(seed, n_params=10):
    """Max relative error between autograd and finite differences of the total loss."""
    model = build_unet(toy_config(seed=seed), dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 2, (2, 16, 16), generator=gen)
    scr, ifd = SCRConfig(lambda1=0.5), IFDConfig(lambda2=0.5)
    model.zero_grad()
    logits, taps = model(x)
    total_loss(logits, y, taps, scr, ifd, np.random.default_rng(4)).total.backward()
    objective = frozen_teacher_objective(model, x, y, scr, ifd, 4)
    named = sorted(model.named_parameters())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_params):
        _, p = named[rng.integers(len(named))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        numeric = oracles.finite_difference(objective, p.data, idx)
        worst = max(worst, oracles.relative_error(p.grad[idx].item(), numeric))
    return worst


def test_total_loss_finite_difference_toy_unet():
    assert check_total_loss_gradients(seed=2) < 1e-4
