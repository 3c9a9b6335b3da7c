import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import pmgaft.attack as attack_mod
from conftest import random_images, tiny_model
from pmgaft.attack import AttackConfig, PGDAttack, pgd_attack, project_linf
from pmgaft.errors import AttackFailureError, DegenerateConfigWarning, ShapeError, ValidationError
from pmgaft.losses import ce_from_logits, one_hot
from pmgaft.model import HashTextEncoder, LinearImageEncoder, TwoTowerModel, parameter_checksum


def one_pixel_model():
    enc = LinearImageEncoder((1, 1, 1), dim=2, bias=False, pixel_mean=0.0, pixel_std=1.0).double()
    with torch.no_grad():
        enc.proj.weight.copy_(torch.tensor([[1.0], [0.0]]))
    T = torch.tensor([[-1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)  # logits = [-x, x]
    return TwoTowerModel(enc, HashTextEncoder(2).double()), T


def _setup(n=6, seed=0, c=3):
    m = tiny_model(seed=seed)
    T = m.build_text_matrix([f"k{i}" for i in range(c)])
    X = random_images(n, seed=seed)
    Y = one_hot(torch.arange(n) % c, c, torch.float64)
    return m, T, X, Y


class TestProjection:
    def test_interior_point_unchanged(self):
        x = random_images(2)
        assert torch.equal(project_linf(x.clone(), x, 0.1), x)

    def test_scalar_clamp(self):
        out = project_linf(torch.tensor([0.9]), torch.tensor([0.5]), 0.1)
        assert abs(out.item() - 0.6) < 1e-7

    def test_pixel_bound_binds_first(self):
        out = project_linf(torch.tensor([-0.2]), torch.tensor([0.0]), 0.5, (0.0, 1.0))
        assert out.item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            project_linf(torch.zeros(2), torch.zeros(3), 0.1)


class TestConfig:
    def test_default_step_size(self):
        assert AttackConfig(epsilon=0.04, steps=10).resolved_step_size == pytest.approx(0.01)

    @pytest.mark.parametrize("kw", [dict(epsilon=-1.0), dict(step_size=-0.1), dict(steps=-1),
                                    dict(init_mode="gaussian"), dict(pixel_bounds=(1.0, 0.0))])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            AttackConfig(**kw)


class TestPGD:
    @pytest.mark.parametrize("steps", [0, 1, 10])
    def test_zero_radius_returns_input(self, steps):
        m, T, X, Y = _setup()
        out = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.0, steps=steps, step_size=0.1))
        assert torch.equal(out.adversarial, X)

    def test_no_steps_zero_init(self):
        m, T, X, Y = _setup()
        out = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.1, steps=0, init_mode="zero"))
        assert torch.equal(out.adversarial, X)

    def test_one_pixel_closed_form(self):
        m, T = one_pixel_model()
        x = torch.tensor([[[[0.4]]]], dtype=torch.float64)
        Y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        eps = 0.05
        out = pgd_attack(m, T, x, Y, AttackConfig(epsilon=eps, step_size=eps, steps=10, init_mode="zero"))
        assert out.adversarial.item() == (x + eps).clamp(0, 1).item()
        # grid search over the eps-interval agrees with the closed form
        grid = torch.linspace(0.4 - eps, 0.4 + eps, 1001, dtype=torch.float64).reshape(-1, 1, 1, 1)
        losses = [ce_from_logits(m.logits(g.unsqueeze(0), T), Y).item() for g in grid]
        assert abs(grid[int(np.argmax(losses))].item() - out.adversarial.item()) < 1e-12

    def test_one_pixel_closed_form_clamped_at_bound(self):
        m, T = one_pixel_model()
        x = torch.tensor([[[[0.98]]]], dtype=torch.float64)
        Y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        out = pgd_attack(m, T, x, Y, AttackConfig(epsilon=0.05, step_size=0.05, steps=10, init_mode="zero"))
        assert out.adversarial.item() == 1.0

    def test_deterministic_given_seed(self):
        m, T, X, Y = _setup()
        cfg = AttackConfig(epsilon=0.03, steps=5, seed=7)
        assert torch.equal(pgd_attack(m, T, X, Y, cfg).adversarial, pgd_attack(m, T, X, Y, cfg).adversarial)

    def test_seed_changes_init(self):
        m, T, X, Y = _setup()
        a = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.03, steps=0, seed=1)).adversarial
        b = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.03, steps=0, seed=2)).adversarial
        assert not torch.equal(a, b)

    def test_parameters_untouched(self):
        m, T, X, Y = _setup()
        before = parameter_checksum(m)
        pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.03, steps=5))
        assert parameter_checksum(m) == before
        assert all(p.grad is None for p in m.parameters())

    def test_nonneg_init(self):
        m, T, X, Y = _setup()
        out = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.05, steps=0, init_mode="uniform_nonneg"))
        d = out.adversarial - X
        assert (d >= 0).all() and (d <= 0.05 + 1e-12).all() and d.max() > 0

    def test_symmetric_init(self):
        m, T, X, Y = _setup()
        d = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.05, steps=0)).adversarial - X
        assert d.min() < 0 < d.max()

    def test_degenerate_step_size_warns(self):
        m, T, X, Y = _setup()
        with pytest.warns(DegenerateConfigWarning):
            pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.05, steps=3, step_size=0.0))

    def test_non_finite_gradient_reports_batch(self, monkeypatch):
        m, T, X, Y = _setup()
        monkeypatch.setattr(attack_mod, "attack_objective", lambda logits, Y: logits.sum() * float("nan"))
        with pytest.raises(AttackFailureError) as err:
            pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.05, steps=2), batch_index=4)
        assert err.value.batch_index == 4

    def test_raw_gradient_mode_contained(self):
        m, T, X, Y = _setup()
        out = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.02, steps=5, step_size=1.0, signed=False))
        assert (out.adversarial - X).abs().max() <= 0.02 + 1e-7

    def test_plugin_seed_override(self):
        m, T, X, Y = _setup()
        atk = PGDAttack(AttackConfig(epsilon=0.03, steps=2))
        direct = pgd_attack(m, T, X, Y, AttackConfig(epsilon=0.03, steps=2, seed=11)).adversarial
        assert torch.equal(atk.attack(m, T, X, Y, seed=11), direct)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0, 0.3), steps=st.integers(0, 5),
       mode=st.sampled_from(["zero", "uniform_symmetric", "uniform_nonneg"]))
def test_containment(seed, eps, steps, mode):
    m, T, X, Y = _setup(n=4, seed=seed % 50)
    X = random_images(4, seed=seed, lo=0.0, hi=1.0)
    out = pgd_attack(m, T, X, Y, AttackConfig(epsilon=eps, steps=steps, init_mode=mode, seed=seed))
    assert (out.adversarial - X).abs().max() <= eps + 1e-7
    assert out.adversarial.min() >= 0 and out.adversarial.max() <= 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 6), eps=st.floats(1e-3, 0.2))
def test_loss_never_decreases_on_linear_model(seed, steps, eps):
    torch.manual_seed(seed)
    enc = LinearImageEncoder((1, 3, 3), dim=4).double()
    m = TwoTowerModel(enc, HashTextEncoder(4).double())
    T = m.build_text_matrix(["a", "b", "c"])
    X = random_images(5, (1, 3, 3), seed=seed, lo=0, hi=1)
    Y = one_hot(torch.arange(5) % 3, 3, torch.float64)
    Xa = pgd_attack(m, T, X, Y, AttackConfig(epsilon=eps, steps=steps, init_mode="zero")).adversarial
    with torch.no_grad():
        assert ce_from_logits(m.logits(Xa, T), Y) >= ce_from_logits(m.logits(X, T), Y) - 1e-12
