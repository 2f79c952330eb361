import numpy as np
import pytest

from mupad import flow
from mupad.flow import GuidanceSchedule, SamplerConfig, SamplerError
from mupad.model import ConditionSet, Denoiser, ModelConfig


class ConstantVelocity:
    def __init__(self, v):
        self.v = v

    def velocity(self, z, t, cond, step):
        return self.v


class SmoothField:
    """v(z,t) = sin(z)*(0.5+t); smooth, nonlinear, used for convergence checks."""

    def velocity(self, z, t, cond, step):
        return np.sin(z) * (0.5 + t)


def _tiny_denoiser_velocity(seed=5):
    cfg = ModelConfig(depth=2, dim=32, heads=4, patch=2, latent_shape=(8, 4, 4))
    model = Denoiser(cfg, seed=seed)
    model.randomize(np.random.default_rng(seed), scale=0.08)

    class Vel:
        def velocity(self, z, t, cond, step):
            return model.forward(z, t, cond).v_patch.data

    return Vel(), cfg


# -- interpolate ---------------------------------------------------------------------

def test_interpolate_endpoints(rng):
    x0 = rng.standard_normal((2, 3))
    eps = rng.standard_normal((2, 3))
    xt, v = flow.interpolate(x0, eps, 0.0)
    assert np.array_equal(xt, x0)
    xt, v = flow.interpolate(x0, eps, 1.0)
    assert np.array_equal(xt, eps)
    assert np.array_equal(v, eps - x0)


def test_interpolate_midpoint():
    x0 = np.zeros(3)
    eps = np.full(3, 2.0)
    xt, v = flow.interpolate(x0, eps, 0.5)
    assert np.allclose(xt, 1.0)
    assert np.allclose(v, 2.0)


def test_interpolate_velocity_independent_of_t(rng):
    x0, eps = rng.standard_normal(4), rng.standard_normal(4)
    targets = [flow.interpolate(x0, eps, t)[1] for t in (0.0, 0.3, 0.9)]
    assert all(np.array_equal(targets[0], v) for v in targets)


def test_interpolate_rejects_bad_t():
    with pytest.raises(ValueError):
        flow.interpolate(np.zeros(2), np.zeros(2), 1.5)


def test_interpolate_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        flow.interpolate(np.zeros(2), np.zeros(3), 0.5)


# -- guidance -----------------------------------------------------------------------

def test_guided_velocity_limits(rng):
    vc, vu = rng.standard_normal(4), rng.standard_normal(4)
    assert np.array_equal(flow.guided_velocity(vc, vu, 0.0), vu)
    assert np.array_equal(flow.guided_velocity(vc, vu, 1.0), vc)


def test_guided_velocity_paper_initial_weight():
    assert flow.guided_velocity(np.array([1.0]), np.array([0.0]), 2.5)[0] == 2.5


def test_guided_velocity_self_consistency(rng):
    v = rng.standard_normal(5)
    for w in (0.0, 0.7, 1.0, 2.5, 10.0):
        assert np.allclose(flow.guided_velocity(v, v, w), v)


def test_guidance_schedule_endpoints():
    sched = GuidanceSchedule(w_start=2.5, w_end=0.0)
    assert sched(0.0) == 2.5
    assert sched(1.0) == 0.0
    assert np.isclose(sched(0.5), 1.25)


def test_sampler_config_defaults_and_validation():
    assert SamplerConfig().steps == 250
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(mode="heun")


# -- ODE sampler ---------------------------------------------------------------------

def test_ode_constant_field_exact(rng):
    v = rng.standard_normal((2, 2))
    zT = rng.standard_normal((2, 2))
    out = flow.sample_ode(ConstantVelocity(v), zT, None, SamplerConfig(steps=17))
    assert np.allclose(out, zT - v, atol=1e-12)


def test_ode_single_step_is_one_euler_step(rng):
    field = SmoothField()
    zT = rng.standard_normal((3,))
    out = flow.sample_ode(field, zT, None, SamplerConfig(steps=1))
    assert np.allclose(out, zT - field.velocity(zT, 1.0, None, 0))


def test_ode_first_order_convergence(rng):
    """Global error vs a 10,000-step reference decays like O(1/steps)."""
    field = SmoothField()
    zT = rng.standard_normal((6,))
    ref = flow.sample_ode(field, zT, None, SamplerConfig(steps=10_000))
    steps = [25, 50, 100, 200]
    errs = [np.linalg.norm(flow.sample_ode(field, zT, None, SamplerConfig(steps=n)) - ref)
            for n in steps]
    for e1, e2 in zip(errs, errs[1:]):
        assert e1 / e2 == pytest.approx(2.0, rel=0.25)
    slope = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert 0.7 <= slope <= 1.3


def test_ode_aborts_on_divergence():
    class Exploding:
        def velocity(self, z, t, cond, step):
            return z * -1e300

    with pytest.raises(SamplerError) as err:
        with np.errstate(over="ignore", invalid="ignore"):
            flow.sample_ode(Exploding(), np.ones(3), None, SamplerConfig(steps=50))
    assert "step" in str(err.value)


# -- SDE sampler ---------------------------------------------------------------------

def test_sde_zero_noise_equals_ode(rng):
    field = SmoothField()
    zT = rng.standard_normal((4,))
    ode = flow.sample_ode(field, zT, None, SamplerConfig(steps=30))
    sde = flow.sample_sde(field, zT, None, SamplerConfig(steps=30, mode="sde", noise_scale=0.0))
    assert np.array_equal(ode, sde)


def test_sde_deterministic_given_seed(rng):
    field = SmoothField()
    zT = rng.standard_normal((4,))
    cfg = SamplerConfig(steps=30, mode="sde", noise_scale=1.0, seed=42)
    assert np.array_equal(flow.sample_sde(field, zT, None, cfg),
                          flow.sample_sde(field, zT, None, cfg))


def test_sde_variance_grows_with_noise_scale(rng):
    field = ConstantVelocity(np.zeros(4))
    zT = rng.standard_normal((4,))
    variances = []
    for scale in (0.25, 1.0, 4.0):
        outs = [flow.sample_sde(field, zT, None,
                                SamplerConfig(steps=20, mode="sde", noise_scale=scale, seed=s))
                for s in range(100)]
        variances.append(np.var(np.stack(outs)))
    assert variances[0] < variances[1] < variances[2]


# -- DDIM inversion --------------------------------------------------------------------

def test_invert_constant_field(rng):
    v = rng.standard_normal((2, 3))
    z0 = rng.standard_normal((2, 3))
    zT = flow.ddim_invert(ConstantVelocity(v), z0, None, steps=13)
    assert np.allclose(zT, z0 + v, atol=1e-12)


def test_invert_round_trip_on_seeded_model(rng):
    vel, cfg = _tiny_denoiser_velocity()
    z0 = rng.standard_normal(cfg.latent_shape)
    errs = {}
    for steps in (25, 200):
        zT = flow.ddim_invert(vel, z0, ConditionSet(), steps)
        back = flow.sample_ode(vel, zT, ConditionSet(), SamplerConfig(steps=steps))
        errs[steps] = np.linalg.norm(back - z0) / np.linalg.norm(z0)
    assert errs[200] < 5e-2
    assert errs[200] < errs[25]


def test_invert_round_trip_monotone_in_steps(rng):
    vel, cfg = _tiny_denoiser_velocity(seed=9)
    z0 = rng.standard_normal(cfg.latent_shape)
    errs = []
    for steps in (25, 50, 100, 200):
        zT = flow.ddim_invert(vel, z0, ConditionSet(), steps)
        back = flow.sample_ode(vel, zT, ConditionSet(), SamplerConfig(steps=steps))
        errs.append(np.linalg.norm(back - z0) / np.linalg.norm(z0))
    assert all(a > b for a, b in zip(errs, errs[1:]))
