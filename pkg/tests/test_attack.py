import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ghostnet import attack as at
from ghostnet import evaluation as ev
from ghostnet.attack import AttackConfig


def test_default_iteration_count():
    assert AttackConfig(epsilon=8).n_iter == 10
    assert AttackConfig(epsilon=4).n_iter == 5
    assert AttackConfig(epsilon=16).n_iter == 20
    assert AttackConfig(epsilon=8, n_iter=3).n_iter == 3


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(method="PGD")
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0)
    with pytest.raises(ValueError):
        AttackConfig(mu=-1)


def test_single_ifgsm_step_by_hand():
    x = np.array([[0.5, 0.0, 1.0, 0.2]])
    g = np.array([[1.0, -1.0, 2.0, 0.0]])
    out = at.attack_step(at.AttackState.start(x), g, AttackConfig(epsilon=8)).adv
    assert np.array_equal(out, [[0.5 + 1 / 255, 0.0, 1.0, 0.2]])


def test_zero_gradient_leaves_image_unchanged():
    x = np.random.default_rng(0).random((3, 5))
    for method in at.METHODS:
        out = at.run_attack(x, [0, 1, 0], lambda j, a, y: np.zeros_like(a), AttackConfig(method))
        assert np.array_equal(out, x)


def test_mifgsm_without_momentum_matches_ifgsm():
    rng = np.random.default_rng(1)
    x = rng.random((4, 6))
    grads = [rng.normal(size=(4, 6)) for _ in range(10)]
    provider = lambda j, a, y: grads[j]  # noqa: E731
    a = at.run_attack(x, np.zeros(4), provider, AttackConfig("IFGSM", 8))
    b = at.run_attack(x, np.zeros(4), provider, AttackConfig("MIFGSM", 8, mu=0.0))
    assert np.array_equal(a, b)


def test_momentum_accumulates_normalized_gradient():
    x = np.full((1, 2), 0.5)
    grads = [np.array([[3.0, -1.0]]), np.array([[-1.0, 1.0]])]
    states = []
    at.run_attack(x, [0], lambda j, a, y: grads[j], AttackConfig("MIFGSM", 8, n_iter=2),
                  on_step=states.append)
    assert np.allclose(states[0].g, [[0.75, -0.25]])
    assert np.allclose(states[1].g, [[0.25, 0.25]])
    # second step follows the momentum sign, not the raw gradient sign
    assert np.allclose(states[1].adv, [[0.5 + 2 / 255, 0.5]])


def test_l1_normalize_floor():
    g = np.array([[0.0, 0.0], [1e-13, 0.0], [2.0, -2.0]])
    assert np.array_equal(at.l1_normalize(g), [[0, 0], [0, 0], [0.5, -0.5]])


def test_non_finite_gradient_names_iteration():
    x = np.full((1, 2), 0.5)
    bad = lambda j, a, y: np.array([[np.nan, 0.0]]) if j == 3 else np.ones_like(a)  # noqa: E731
    with pytest.raises(at.AttackError, match="iteration 3"):
        at.run_attack(x, [0], bad, AttackConfig())


def test_rejects_out_of_range_images():
    with pytest.raises(at.AttackError):
        at.run_attack(np.array([[1.5]]), [0], lambda j, a, y: a, AttackConfig())


@settings(max_examples=60, deadline=None)
@given(
    x=arrays(np.float64, (2, 5), elements=st.floats(0, 1)),
    eps=st.integers(1, 32),
    mu=st.floats(0, 2),
    method=st.sampled_from(at.METHODS),
    seed=st.integers(0, 2**16),
)
def test_clip_invariants_hold_after_every_step(x, eps, mu, method, seed):
    rng = np.random.default_rng(seed)
    cfg = AttackConfig(method, eps, alpha=float(rng.uniform(0.5, 4)), mu=mu)

    def check(state):
        assert np.abs(state.adv - x).max() <= eps / 255 + 1e-12
        assert state.adv.min() >= 0 and state.adv.max() <= 1

    at.run_attack(x, [0, 1], lambda j, a, y: rng.normal(size=a.shape), cfg, on_step=check)


def test_attack_is_deterministic(spiral_mlp, spirals):
    atk = spirals.split("attack")
    cfg = AttackConfig("MIFGSM", 8)
    prov = at.model_grad_provider(spiral_mlp)
    assert np.array_equal(at.run_attack(atk.x[:50], atk.y[:50], prov, cfg),
                          at.run_attack(atk.x[:50], atk.y[:50], prov, cfg))


def test_white_box_spirals(spiral_mlp, spirals):
    atk = ev.filter_dataset(spirals.split("attack"), [spiral_mlp])
    adv = at.run_attack(atk.x, atk.y, at.model_grad_provider(spiral_mlp), AttackConfig("IFGSM", 8))
    assert ev.attack_rate(adv, atk.y, spiral_mlp) >= 0.99
