import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatmask.attack import (
    AttackAborted,
    AttackConfig,
    AttackTrace,
    eot_loss_and_grad,
    identity_loss,
    identity_loss_slope,
    perturbation_norm,
    project_l2,
    project_linf,
    run_attack,
    step_size_from_epsilon,
    view_similarity,
)
from splatmask.camera import ViewpointDistribution, default_frontal, rotate_view
from splatmask.embedder import reference_embedding
from splatmask.renderer import ParamClass, fd_gradient
from splatmask.scene import select_region, synth_scene

DIST32 = ViewpointDistribution((-0.3, 0.3), (-0.3, 0.3), default_frontal(32, 32))


@pytest.fixture(scope="module")
def small_head():
    return synth_scene(7, 60, "head_like")


def test_step_size():
    assert math.isclose(step_size_from_epsilon(0.3), 0.01)
    assert math.isclose(step_size_from_epsilon(0.1), 0.1 / 30)
    with pytest.raises(ValueError):
        step_size_from_epsilon(0.0)


def test_identity_loss_examples():
    assert identity_loss(0.0) == math.log(2.0)
    assert math.isclose(identity_loss(1.0), math.log1p(math.exp(-20)))
    assert math.isclose(identity_loss(-1.0), 20 + math.log1p(math.exp(-20)))
    assert math.isfinite(identity_loss(-1e3))


@given(st.floats(-1, 1), st.floats(0.5, 20))
def test_identity_loss_slope_matches_derivative(s, lam):
    h = 1e-6
    fd = (identity_loss(s + h, lam) - identity_loss(s - h, lam)) / (2 * h)
    assert math.isclose(identity_loss_slope(s, lam), fd, rel_tol=1e-5, abs_tol=1e-8)
    assert identity_loss_slope(s, lam) < 0


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=30), st.floats(0.01, 2))
def test_linf_projection(vals, eps):
    theta0 = np.zeros(len(vals))
    p = project_linf(vals, theta0, eps)
    assert np.max(np.abs(p)) <= eps
    inside = np.abs(vals) <= eps
    assert np.array_equal(p[inside], np.asarray(vals)[inside])


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=30), st.floats(0.01, 2))
def test_l2_projection(vals, eps):
    theta0 = np.full(len(vals), 0.25)
    p = project_l2(np.asarray(vals) + 0.25, theta0, eps)
    assert perturbation_norm(p, theta0, "l2") <= eps * (1 + 1e-12)
    # idempotent
    assert np.allclose(project_l2(p, theta0, eps), p, atol=1e-15)


def test_perturbation_norm():
    assert perturbation_norm([3.0, -4.0], [0, 0], "l2") == 5.0
    assert perturbation_norm([3.0, -4.0], [0, 0], "linf") == 4.0


def test_config_validation():
    assert AttackConfig(epsilon=0.1, method="fgsm").t_max == 1
    assert AttackConfig(epsilon=None, method="ddn", success_threshold=0.5).norm == "l2"
    assert math.isclose(AttackConfig(epsilon=0.3).alpha, 0.01)
    for bad in [dict(norm="l1"), dict(method="cw"), dict(epsilon=0.0), dict(t_max=0),
                dict(k_viewpoints=0), dict(lam=0.0), dict(workers=0),
                dict(method="ddn", epsilon=None), dict(region="ears")]:
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_eot_gradient_matches_fd(small_head, embedder):
    base = DIST32.base_view
    e_ref = reference_embedding(embedder, synth_scene(8, 60, "head_like"), base)
    views = [base, rotate_view(base, 0.2, -0.1)]

    def loss_fn_for(view):
        from splatmask.attack import identity_loss as L
        from splatmask.embedder import embed_image

        return lambda p: L(float(embed_image(embedder, p) @ e_ref))

    _, grad, _ = eot_loss_and_grad(small_head, views, embedder, e_ref)
    idx = list(range(0, 180, 17))
    fd = sum(fd_gradient(small_head, v, None, loss_fn_for(v), "dc_color", indices=idx)
             for v in views) / 2
    a, f = grad.reshape(-1)[idx], fd.reshape(-1)[idx]
    assert np.max(np.abs(a - f) / (np.abs(f) + 1e-8)) < 1e-3


def test_eot_is_worker_independent(small_head, embedder):
    base = DIST32.base_view
    e_ref = reference_embedding(embedder, small_head, base)
    views = [rotate_view(base, y, 0.1) for y in (-0.2, 0.0, 0.25)]
    a = eot_loss_and_grad(small_head, views, embedder, e_ref, workers=1)
    b = eot_loss_and_grad(small_head, views, embedder, e_ref, workers=3)
    assert a[0] == b[0] and a[2] == b[2] and np.array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        eot_loss_and_grad(small_head, [], embedder, e_ref)


def test_pgd_reduces_similarity_and_respects_budget(small_head, embedder):
    cfg = AttackConfig(epsilon=0.3, t_max=12, k_viewpoints=2, viewpoint_dist=DIST32)
    masked, trace = run_attack(small_head, embedder, cfg)
    assert len(trace) == 12
    assert trace.records[-1]["s_mean"] < trace.records[0]["s_mean"]
    assert np.max(np.abs(masked.sh_dc - small_head.sh_dc)) <= 0.3
    for name in ("means", "rotations", "scales", "opacities"):
        assert np.array_equal(getattr(masked, name), getattr(small_head, name))
    e_ref = reference_embedding(embedder, small_head, DIST32.base_view)
    assert trace.final_similarity < view_similarity(small_head, DIST32.base_view, embedder, e_ref)


def test_attack_is_deterministic(small_head, embedder):
    cfg = AttackConfig(epsilon=0.1, t_max=3, k_viewpoints=2, viewpoint_dist=DIST32, seed=4)
    a, ta = run_attack(small_head, embedder, cfg)
    b, tb = run_attack(small_head, embedder, cfg)
    assert a.equals(b) and ta.to_jsonl() == tb.to_jsonl()


def test_region_attack_touches_only_region(small_head, embedder):
    cfg = AttackConfig(epsilon=0.2, t_max=3, k_viewpoints=1, viewpoint_dist=DIST32, region="eyes,nose")
    masked, _ = run_attack(small_head, embedder, cfg)
    inside = np.zeros(len(small_head.means), dtype=bool)
    inside[select_region(small_head, cfg.region)] = True
    diff = np.any(masked.sh_dc != small_head.sh_dc, axis=1)
    assert diff[inside].any() and not diff[~inside].any()


def test_opacity_attack_keeps_constraints(small_head, embedder):
    cfg = AttackConfig(epsilon=0.5, t_max=3, k_viewpoints=1, viewpoint_dist=DIST32,
                       param_class=ParamClass.OPACITY)
    masked, _ = run_attack(small_head, embedder, cfg)
    assert masked.opacities.min() >= 0 and masked.opacities.max() <= 1
    assert np.array_equal(masked.sh_dc, small_head.sh_dc)


def test_fgsm_uses_full_budget(small_head, embedder):
    cfg = AttackConfig(epsilon=0.05, method="fgsm", viewpoint_dist=DIST32, k_viewpoints=2)
    masked, trace = run_attack(small_head, embedder, cfg)
    delta = np.abs(masked.sh_dc - small_head.sh_dc)
    assert len(trace) == 1
    assert np.allclose(delta[delta > 0], 0.05, atol=1e-15)


def test_ddn_reaches_threshold(small_head, embedder):
    cfg = AttackConfig(epsilon=None, method="ddn", success_threshold=0.9, t_max=25,
                       k_viewpoints=2, viewpoint_dist=DIST32)
    _, trace = run_attack(small_head, embedder, cfg)
    assert trace.success
    rhos = [r["rho"] for r in trace.records]
    assert rhos[0] == 1.0
    for r, nxt in zip(trace.records, rhos[1:]):
        assert math.isclose(nxt, r["rho"] * (0.95 if r["s_mean"] < 0.9 else 1.05))
    succ = [r["norm"] for r in trace.records if r["s_mean"] < 0.9]
    assert np.isclose(np.linalg.norm(trace.final_params - small_head.sh_dc), min(succ))


def test_non_finite_gradient_aborts_with_partial_trace(small_head, embedder, monkeypatch):
    import splatmask.attack as attack_mod

    calls = {"n": 0}
    real = attack_mod.eot_loss_and_grad

    def flaky(*args, **kw):
        calls["n"] += 1
        loss, grad, s = real(*args, **kw)
        if calls["n"] == 3:
            grad = grad.copy()
            grad[0, 0] = np.nan
        return loss, grad, s

    monkeypatch.setattr(attack_mod, "eot_loss_and_grad", flaky)
    cfg = AttackConfig(epsilon=0.1, t_max=5, k_viewpoints=1, viewpoint_dist=DIST32)
    with pytest.raises(AttackAborted) as info:
        run_attack(small_head, embedder, cfg)
    assert len(info.value.trace) == 2
    assert "iteration 3" in str(info.value)


def test_trace_round_trip(tmp_path):
    tr = AttackTrace()
    tr.add(1, 0.5, 0.1, 0.01)
    tr.add(2, 0.25, 0.05, 0.02)
    tr.save(tmp_path / "t.jsonl")
    assert AttackTrace.load_records(tmp_path / "t.jsonl") == tr.records
