import numpy as np
import pytest

from robustq.attacks import AttackConfig, clip_eps, cw_linf, fgsm, ifgsm, input_gradient, pgd, run_attack
from robustq.errors import AttackError, ContractError
from robustq.nets import NetworkSpec, build_network, forward
from robustq.robust_train import natural_loss

EPS = 0.05


def within_budget(x, x_adv, eps, lo=0.0, hi=1.0):
    return np.all(np.abs(x_adv - x) <= eps + 1e-12) and x_adv.min() >= lo and x_adv.max() <= hi


def test_clip_eps():
    assert np.array_equal(clip_eps([-1.0, 0.01, 2.0], 0.1), [-0.1, 0.01, 0.1])
    with pytest.raises(ContractError):
        clip_eps([0.0], -0.1)


def test_input_gradient_matches_finite_difference(tiny_net, tiny_batch):
    x, y = tiny_batch
    loss, grad = input_gradient(tiny_net, x, y)
    h = 1e-5
    index = (1, 0, 2, 3)
    shifted = x.copy()
    shifted[index] += h
    upper, _ = input_gradient(tiny_net, shifted, y)
    shifted[index] -= 2 * h
    lower, _ = input_gradient(tiny_net, shifted, y)
    assert grad[index] == pytest.approx((upper - lower) / (2 * h), rel=1e-4, abs=1e-9)
    assert loss > 0


def test_unknown_objective(tiny_net, tiny_batch):
    with pytest.raises(ContractError):
        input_gradient(tiny_net, *tiny_batch, objective="hinge")


def test_non_finite_gradient_raises_attack_error(tiny_net, tiny_batch):
    x, y = tiny_batch
    tiny_net.weights["m0.fc.weight"][0, 0] = np.nan
    with pytest.raises(AttackError):
        input_gradient(tiny_net, x, y)


def test_fgsm_steps_along_gradient_sign(tiny_net, tiny_batch):
    x, y = tiny_batch
    x = np.clip(x, 0.1, 0.9)
    x_adv = fgsm(tiny_net, x, y, EPS)
    _, grad = input_gradient(tiny_net, x, y)
    assert np.allclose(x_adv, x + EPS * np.sign(grad))
    assert within_budget(x, x_adv, EPS)


def test_fgsm_with_zero_budget_returns_copy(tiny_net, tiny_batch):
    x, y = tiny_batch
    x_adv = fgsm(tiny_net, x, y, 0.0)
    assert np.array_equal(x_adv, x) and x_adv is not x


def test_fgsm_raises_loss(tiny_net, tiny_batch):
    x, y = tiny_batch
    clean, _ = input_gradient(tiny_net, x, y)
    attacked, _ = input_gradient(tiny_net, fgsm(tiny_net, x, y, 0.01), y)
    assert attacked > clean


def test_single_large_step_ifgsm_is_fgsm(tiny_net, tiny_batch):
    x, y = tiny_batch
    cfg = AttackConfig(eps=EPS, alpha=EPS, iters=1)
    assert np.array_equal(ifgsm(tiny_net, x, y, cfg), fgsm(tiny_net, x, y, EPS))
    bigger = AttackConfig(eps=EPS, alpha=3 * EPS, iters=1)
    assert np.array_equal(ifgsm(tiny_net, x, y, bigger), fgsm(tiny_net, x, y, EPS))


@pytest.mark.parametrize("final_clip_only", [False, True])
def test_ifgsm_stays_in_budget(tiny_net, tiny_batch, final_clip_only):
    x, y = tiny_batch
    cfg = AttackConfig(eps=EPS, alpha=0.02, iters=5, final_clip_only=final_clip_only)
    x_adv = ifgsm(tiny_net, x, y, cfg)
    assert within_budget(x, x_adv, EPS)


def test_attacks_never_modify_inputs(tiny_net, tiny_batch):
    x, y = tiny_batch
    original = x.copy()
    cfg = AttackConfig(eps=EPS, iters=2, cw_iters=2)
    for method in ("fgsm", "ifgsm", "cw", "pgd"):
        run_attack(tiny_net, x, y, method, cfg, np.random.default_rng(0))
        assert np.array_equal(x, original)


def test_cw_stays_in_budget_and_lowers_margin(tiny_net, tiny_batch):
    x, y = tiny_batch
    cfg = AttackConfig(eps=EPS, cw_lr=0.002, cw_iters=5)
    x_adv = cw_linf(tiny_net, x, y, cfg)
    assert within_budget(x, x_adv, EPS)
    before, _ = input_gradient(tiny_net, x, y, objective="margin", kappa=100.0)
    after, _ = input_gradient(tiny_net, x_adv, y, objective="margin", kappa=100.0)
    assert after <= before


@pytest.mark.parametrize("objective", ["ce", "kl"])
def test_pgd_stays_in_budget(tiny_net, tiny_batch, objective):
    x, y = tiny_batch
    x_adv = pgd(tiny_net, x, y, EPS, 0.01, 4, np.random.default_rng(0), objective=objective)
    assert within_budget(x, x_adv, EPS)


def test_pgd_is_reproducible_from_the_seed(tiny_net, tiny_batch):
    x, y = tiny_batch
    a = pgd(tiny_net, x, y, EPS, 0.01, 3, np.random.default_rng(9))
    b = pgd(tiny_net, x, y, EPS, 0.01, 3, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_pgd_respects_custom_pixel_range(tiny_net, tiny_batch):
    x, y = tiny_batch
    x = np.clip(x, 0.2, 0.8)
    x_adv = pgd(tiny_net, x, y, 0.5, 0.1, 3, np.random.default_rng(0), lo=0.2, hi=0.8)
    assert within_budget(x, x_adv, 0.5, lo=0.2, hi=0.8)


def test_attack_lowers_accuracy_on_separable_blobs(blobs, blobs_net):
    # a hand-set linear separator along x0 + x1
    blobs_net.weights["m0.h0.weight"][:] = 0.0
    blobs_net.weights["m0.h0.weight"][0] = [1.0, 1.0]
    blobs_net.weights["m0.h0.bias"][:] = 0.0
    blobs_net.weights["m0.fc.weight"][:] = 0.0
    blobs_net.weights["m0.fc.weight"][1, 0] = 10.0
    blobs_net.weights["m0.fc.bias"][:] = [0.0, -10.0]
    x, y = blobs.images, blobs.labels
    clean = np.mean(forward(blobs_net, x).data.argmax(axis=1) == y)
    attacked = np.mean(forward(blobs_net, fgsm(blobs_net, x, y, 0.3)).data.argmax(axis=1) == y)
    assert attacked < clean


def test_run_attack_rejects_unknown_method(tiny_net, tiny_batch):
    with pytest.raises(ContractError):
        run_attack(tiny_net, *tiny_batch, "deepfool", AttackConfig())


def test_pgd_dispatch_needs_rng(tiny_net, tiny_batch):
    with pytest.raises(ContractError):
        run_attack(tiny_net, *tiny_batch, "pgd", AttackConfig())


@pytest.mark.parametrize("kwargs", [{"eps": -0.1}, {"alpha": 0.0}, {"iters": 0}, {"lo": 1.0, "hi": 0.0}])
def test_attack_config_validation(kwargs):
    with pytest.raises(ContractError):
        AttackConfig(**kwargs)


@pytest.fixture
def linear_net():
    net = build_network(NetworkSpec(input_shape=(1, 1, 2), arch="mlp", hidden=(), num_classes=2), seed=0)
    net.weights["m0.fc.weight"][:] = [[1.0, -2.0], [-0.5, 0.75]]
    net.weights["m0.fc.bias"][:] = [0.1, -0.1]
    return net


@pytest.fixture
def interior_batch():
    rng = np.random.default_rng(11)
    x = rng.uniform(0.3, 0.7, size=(10, 1, 1, 2))
    return x, np.arange(10) % 2


def worst_corner(net, x, y, eps):
    # cross-entropy of linear logits grows with the margin (W[1-y] - W[y]) . x
    w = net.weights["m0.fc.weight"]
    direction = np.sign(w[1 - y] - w[y]).reshape(x.shape)
    return x + eps * direction


def test_fgsm_hits_worst_case_corner_of_linear_model(linear_net, interior_batch):
    x, y = interior_batch
    assert np.allclose(fgsm(linear_net, x, y, 0.1), worst_corner(linear_net, x, y, 0.1), rtol=0.0, atol=1e-12)


def test_pgd_converges_to_analytic_worst_case(linear_net, interior_batch):
    x, y = interior_batch
    x_adv = pgd(linear_net, x, y, 0.1, 0.05, 10, np.random.default_rng(0))
    corner = worst_corner(linear_net, x, y, 0.1)
    assert np.allclose(x_adv, corner, rtol=0.0, atol=1e-12)
    attained = natural_loss(linear_net, (x_adv, y)).item()
    assert attained == pytest.approx(natural_loss(linear_net, (corner, y)).item(), rel=1e-10)


def test_larger_budget_never_lowers_fgsm_loss(linear_net, interior_batch):
    x, y = interior_batch
    losses = [natural_loss(linear_net, (fgsm(linear_net, x, y, eps), y)).item() for eps in (0.0, 0.05, 0.1, 0.2)]
    assert losses == sorted(losses)
