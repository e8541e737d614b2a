from collections import Counter

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from taigen.attack import (
    AttackConfig,
    AttackResult,
    _ce_logit_grad,
    batch_attack,
    mifgsm_inner,
    mifgsm_pixel,
    taigen_attack,
    taigen_attack_early_stop,
)
from taigen.classifier import ToyCNN
from taigen.diffusion import make_linear_schedule, sample
from taigen.rng import AttackStreams, stream_seed
from taigen.train import seeded_init
from taigen.unet import ToyUNet


class Linear1D(nn.Module):
    """Two-class logits (0, w . x)."""

    def __init__(self, w):
        super().__init__()
        self.w = torch.as_tensor(w, dtype=torch.float64)

    def forward(self, x):
        s = x.reshape(len(x), -1) @ self.w
        return torch.stack([torch.zeros_like(s), s], dim=1)


class Bump1D(nn.Module):
    """Logits (0, -(x - c)^2); class 0 loss is pushed away from c."""

    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x):
        s = -((x.reshape(len(x)) - self.c) ** 2)
        return torch.stack([torch.zeros_like(s), s], dim=1)


def test_mifgsm_linear_hand_oracle():
    # the normalised gradient is constant, so every step moves by alpha * sign(w)
    clf = Linear1D([0.5, -2.0, 0.0])
    z0 = torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64)
    out = mifgsm_inner(clf, z0, torch.tensor([0]), 0.1, 10, 1.0)
    assert torch.allclose(out, z0 + torch.tensor([[0.1, -0.1, 0.0]], dtype=torch.float64), atol=1e-15)
    out = mifgsm_inner(clf, z0, torch.tensor([1]), 0.1, 10, 1.0)
    assert torch.allclose(out, z0 + torch.tensor([[-0.1, 0.1, 0.0]], dtype=torch.float64), atol=1e-15)


def _scalar_mifgsm(x0, c, eps, iters, mu):
    """Independent scalar reference for Bump1D with label 0."""
    alpha, g, x = eps / iters, 0.0, x0
    for _ in range(iters):
        grad_sign = -1.0 if x > c else (1.0 if x < c else 0.0)
        g = mu * g + grad_sign
        x = x + alpha * (1.0 if g > 0 else (-1.0 if g < 0 else 0.0))
    return min(max(x, x0 - eps), x0 + eps)


@pytest.mark.parametrize("x0,mu", [(0.05, 1.2), (0.05, 0.0), (-0.3, 0.5), (0.011, 1.0)])
def test_mifgsm_momentum_oracle(x0, mu):
    clf = Bump1D(0.0)
    out = mifgsm_inner(clf, torch.tensor([[x0]], dtype=torch.float64), torch.tensor([0]), 0.2, 8, mu)
    assert float(out) == pytest.approx(_scalar_mifgsm(x0, 0.0, 0.2, 8, mu), abs=1e-12)


def test_mifgsm_zero_gradient_stays():
    clf = Linear1D([0.0, 0.0])
    z0 = torch.tensor([[0.3, -0.4]], dtype=torch.float64)
    assert torch.equal(mifgsm_inner(clf, z0, torch.tensor([0]), 0.5, 5, 1.2), z0)


def test_mifgsm_saturated_classifier_still_moves():
    # true class leads by ~600 logits: float32 softmax - onehot is exactly zero here
    clf = Linear1D(torch.tensor([300.0, -300.0]))
    clf.w = clf.w.float()
    z0 = torch.tensor([[1.0, -1.0]])
    out = mifgsm_inner(clf, z0, torch.tensor([1]), 0.1, 5, 1.0)
    assert torch.allclose(out - z0, torch.tensor([[-0.1, 0.1]]), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10000), st.integers(2, 5))
def test_rescaled_logit_grad_matches_cross_entropy(seed, n_classes):
    g = torch.Generator().manual_seed(seed)
    logits = (torch.randn(4, n_classes, generator=g, dtype=torch.float64) * 3).requires_grad_(True)
    y = torch.randint(0, n_classes, (4,), generator=g)
    (ref,) = torch.autograd.grad(nn.functional.cross_entropy(logits, y, reduction="sum"), logits)
    got = _ce_logit_grad(logits.detach(), y)
    ref = ref / ref.abs().sum(1, keepdim=True)
    got = got / got.abs().sum(1, keepdim=True)
    assert torch.allclose(got, ref, atol=1e-12)


def test_mifgsm_counter_and_eps_zero():
    clf = Linear1D([1.0, 1.0])
    z0 = torch.randn(3, 2, dtype=torch.float64)
    c = Counter()
    out = mifgsm_inner(clf, z0, torch.zeros(3, dtype=torch.long), 0.0, 7, 1.2, c)
    assert torch.equal(out, z0) and c["grad_evals"] == 21


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0.0, 0.5), st.integers(1, 12), st.floats(0.0, 2.0),
    st.integers(1, 3), st.integers(4, 8), st.integers(0, 10000),
)
def test_mifgsm_budget_property(eps, iters, mu, b, side, seed):
    g = torch.Generator().manual_seed(seed)
    clf = seeded_init(ToyCNN, seed, n_classes=3, image_size=side, width=4)
    z0 = torch.randn(b, 3, side, side, generator=g) * 2
    y = torch.randint(0, 3, (b,), generator=g)
    out = mifgsm_inner(clf, z0, y, eps, iters, mu)
    assert float((out - z0).abs().max()) <= eps + 1e-7


def test_mifgsm_pixel_clamps():
    clf = Linear1D([1.0] * 4)
    x = torch.full((1, 4), 0.99, dtype=torch.float64)
    assert mifgsm_pixel(clf, x, torch.tensor([0]), 0.5, 5, 1.0).max() <= 1.0


def test_config_validation():
    assert AttackConfig().alpha_step == pytest.approx(8 / 255 / 20)
    assert AttackConfig().window_steps == 21
    for bad in (dict(epsilon=-1), dict(iterations=0), dict(t_start=10, t_end=20),
                dict(omega_threshold=1.5), dict(k_target=0), dict(z0_source="x")):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_stream_seeds_independent():
    seeds = {stream_seed(0, i, n) for i in range(20) for n in ("forward", "sampling", "target")}
    assert len(seeds) == 60
    assert stream_seed(1, 0, "forward") != stream_seed(0, 0, "forward")


# ---- engine tests on a tiny untrained pair --------------------------------

T = 12
S = make_linear_schedule(T, 1e-3, 0.2)


@pytest.fixture(scope="module")
def tiny():
    model = seeded_init(ToyUNet, 0, image_size=16, channels=(8, 16), emb_dim=16).eval()
    clf = seeded_init(ToyCNN, 1, n_classes=3, image_size=16, width=4).eval()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 16, 16, generator=g) * 2 - 1
    y = torch.tensor([0, 1, 2, 0])
    return model, clf, x, y


def _cfg(**kw):
    base = dict(t_start=8, t_end=5, iterations=3, epsilon=0.05, seed=11)
    base.update(kw)
    return AttackConfig(**base)


def _clean(model, x, cfg):
    from taigen.diffusion import forward_diffuse, randn_like

    st_ = AttackStreams.derive(cfg.seed, range(len(x)))
    x_T = forward_diffuse(x, T, randn_like(x, st_.forward), S)
    return sample(model, S, x_T, generator=AttackStreams.derive(cfg.seed, range(len(x))).sampling, record=None)[0]


def test_eps_zero_equals_clean(tiny):
    model, clf, x, y = tiny
    cfg = _cfg(epsilon=0.0)
    r = taigen_attack(model, S, clf, x, y, cfg)
    assert torch.equal(r.adversarial, r.clean_reconstruction)
    assert torch.equal(r.clean_reconstruction, _clean(model, x, cfg))


def test_all_ones_mask_equals_clean(tiny):
    model, clf, x, y = tiny
    r = taigen_attack(model, S, clf, x, y, _cfg(epsilon=0.3), mask_hook=lambda t, C: torch.ones_like(C))
    assert torch.equal(r.adversarial, r.clean_reconstruction)


def test_nonzero_eps_changes_output(tiny):
    model, clf, x, y = tiny
    r = taigen_attack(model, S, clf, x, y, _cfg(epsilon=0.3))
    assert not torch.equal(r.adversarial, r.clean_reconstruction)
    assert r.adversarial.abs().max() <= 1.0


def test_never_triggering_early_stop_equals_full(tiny):
    model, _, x, _ = tiny

    class Never(nn.Module):
        image_size = 16

        def __init__(self):
            super().__init__()
            self.conv = nn.Conv2d(3, 2, 3, padding=1)

        def forward(self, z):
            # class 0 always wins by a wide margin, and the gradient is nonzero
            s = self.conv(z).mean(dim=(2, 3))
            return torch.stack([s[:, 0] * 0 + 1e6 + s[:, 0], s[:, 1]], dim=1)

    clf = seeded_init(Never, 0).eval()
    y = torch.zeros(len(x), dtype=torch.long)
    full = taigen_attack(model, S, clf, x, y, _cfg(epsilon=0.3), with_clean=False)
    early = taigen_attack_early_stop(model, S, clf, x, y, _cfg(epsilon=0.3), with_clean=False)
    assert torch.equal(full.adversarial, early.adversarial)
    assert early.steps_used.tolist() == [T] * len(x)


def test_early_stop_on_always_wrong_classifier(tiny):
    model, _, x, y = tiny

    class Wrong(nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = nn.Conv2d(3, 1, 3, padding=1)

        def forward(self, z):
            s = self.conv(z).mean(dim=(1, 2, 3))
            return torch.stack([s, s + 100.0], dim=1)

    y0 = torch.zeros(len(x), dtype=torch.long)
    clf = seeded_init(Wrong, 0)
    assert taigen_attack(model, S, clf, x, y0, _cfg(epsilon=0.1), with_clean=False).success.all()
    rs = taigen_attack_early_stop(model, S, clf, x, y0, _cfg(epsilon=0.1), with_clean=False)
    assert rs.steps_used.tolist() == [1] * len(x) and rs.inner_grad_evals.sum() == 0


def test_grad_eval_count_is_window_times_iterations(tiny):
    model, clf, x, y = tiny
    cfg = _cfg()
    r = taigen_attack(model, S, clf, x, y, cfg, with_clean=False)
    assert r.inner_grad_evals.tolist() == [cfg.window_steps * cfg.iterations] * len(x)
    assert r.counters["grad_evals"] == len(x) * cfg.window_steps * cfg.iterations
    assert r.counters["unet_evals"] == len(x) * (T + cfg.window_steps)


def test_determinism_and_batch_independence(tiny):
    model, clf, x, y = tiny
    cfg = _cfg(epsilon=0.2)
    a = taigen_attack(model, S, clf, x, y, cfg, with_clean=False)
    b = taigen_attack(model, S, clf, x, y, cfg, with_clean=False)
    assert torch.equal(a.adversarial, b.adversarial)
    # image 2 attacked alone with its own index follows the same streams
    c = taigen_attack(model, S, clf, x[2:3], y[2:3], cfg, indices=[2], with_clean=False)
    assert torch.allclose(c.adversarial, a.adversarial[2:3], atol=1e-5)
    assert c.target_class_used.item() == a.target_class_used[2].item()


def test_target_never_true_label(tiny):
    model, clf, x, y = tiny
    r = taigen_attack(model, S, clf, x, y, _cfg(), with_clean=False)
    assert (r.target_class_used != y).all()


def test_trajectory_recording(tiny):
    model, clf, x, y = tiny
    r = taigen_attack(model, S, clf, x, y, _cfg(), with_clean=False, record_trajectory=True)
    assert r.trajectory.timesteps == list(range(T, -1, -1))
    with pytest.raises(ValueError):
        taigen_attack(model, S, clf, x, y, _cfg(early_stop=True), record_trajectory=True)


def test_window_validation(tiny):
    model, clf, x, y = tiny
    with pytest.raises(ValueError):
        taigen_attack(model, S, clf, x, y, _cfg(t_start=T + 1))
    with pytest.raises(ValueError):
        taigen_attack(model, S, clf, x[:, :, :8, :8], y, _cfg())


def test_batch_attack_split_and_failures(tiny):
    model, clf, x, y = tiny
    cfg = _cfg()
    results, summary = batch_attack(model, S, clf, x, y, cfg, batch_size=3, with_clean=False)
    assert len(results) == 4 and summary.n_images == 4 and not summary.failures
    merged = AttackResult.concat(results)
    whole = taigen_attack(model, S, clf, x, y, cfg, with_clean=False)
    assert torch.allclose(merged.adversarial, whole.adversarial, atol=1e-5)
    assert summary.grad_evals_total == 4 * cfg.window_steps * cfg.iterations

    class Flaky(nn.Module):
        image_size = 16

        def __init__(self):
            super().__init__()
            self.inner = clf

        def forward(self, z):
            if not torch.isfinite(z).all():
                raise FloatingPointError("bad input")
            return self.inner(z)

    bad = x.clone()
    bad[1, 0, 0, 0] = float("nan")
    results, summary = batch_attack(model, S, Flaky(), bad, y, cfg, batch_size=4, with_clean=False)
    assert [i for i, _ in summary.failures] == [1] and summary.n_images == 3
