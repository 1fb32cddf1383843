"""Adversarial masking of scene parameters against a face embedder.

Iterative attacks (sign-PGD, normalized-gradient l2-PGD, FGSM, DDN) maximize the
identity loss ``log(1 + exp(-2 s lambda))`` averaged over randomly sampled camera
viewpoints, where ``s`` is the cosine similarity between the embedding of the
perturbed render and the reference embedding of the untouched scene.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import Pose, ViewpointDistribution, grid_viewpoints, sample_viewpoints
from .embedder import (
    SurrogateEmbedder,
    align,
    align_backward,
    embed_backward,
    embed_forward,
    reference_embedding,
)
from .renderer import (
    DEFAULT_SETTINGS,
    ParamClass,
    RenderSettings,
    apply_param_constraints,
    get_params,
    render,
    render_backward,
    set_params,
)
from .scene import Scene, check_epsilon_range, parse_regions, select_region

NORMS = ("linf", "l2")
METHODS = ("pgd", "fgsm", "ddn")


class AttackAborted(RuntimeError):
    """Raised when an iteration produces a non-finite loss or gradient.

    ``trace`` holds the records completed before the failure.
    """

    def __init__(self, message: str, trace: AttackTrace):
        super().__init__(message)
        self.trace = trace


def step_size_from_epsilon(epsilon: float) -> float:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return (0.01 / 0.3) * epsilon


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float | None = 0.1
    step_alpha: float | None = None
    t_max: int = 300
    k_viewpoints: int = 5
    lam: float = 10.0
    norm: str = "linf"
    method: str = "pgd"
    param_class: ParamClass = ParamClass.DC_COLOR
    region: frozenset = frozenset({"all"})
    seed: int = 0
    viewpoint_dist: ViewpointDistribution = field(default_factory=ViewpointDistribution)
    # similarity threshold used by DDN to decide success
    success_threshold: float | None = None
    ddn_init_rho: float = 1.0
    ddn_gamma: float = 0.05
    ddn_step: float = 1.0
    workers: int = 1
    eval_grid: int = 3

    def __post_init__(self):
        object.__setattr__(self, "param_class", ParamClass(self.param_class))
        object.__setattr__(self, "region", parse_regions(self.region))
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method in ("pgd", "fgsm") and not (self.epsilon is not None and self.epsilon > 0):
            raise ValueError(f"{self.method} requires epsilon > 0")
        if self.method == "fgsm":
            object.__setattr__(self, "t_max", 1)
        if self.method == "ddn":
            object.__setattr__(self, "norm", "l2")
            if self.success_threshold is None:
                raise ValueError("ddn requires a success_threshold")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.k_viewpoints < 1:
            raise ValueError("k_viewpoints must be >= 1")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def alpha(self) -> float:
        if self.step_alpha is not None:
            return float(self.step_alpha)
        if self.method == "ddn":
            return self.ddn_step
        return step_size_from_epsilon(self.epsilon)


@dataclass
class AttackTrace:
    records: list = field(default_factory=list)
    final_params: np.ndarray | None = None
    final_similarity: float | None = None
    wall_time: float = 0.0
    success: bool | None = None

    def add(self, t: int, s_mean: float, loss: float, norm: float, **extra) -> None:
        self.records.append({"t": t, "s_mean": s_mean, "loss": loss, "norm": norm, **extra})

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def load_records(path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------- loss


def identity_loss(s: float, lam: float = 10.0) -> float:
    """``log(1 + exp(-2 s lam))`` evaluated as a stable softplus."""
    x = -2.0 * s * lam
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def identity_loss_slope(s: float, lam: float = 10.0) -> float:
    """dL/ds = -2 lam sigmoid(-2 s lam)."""
    x = -2.0 * s * lam
    if x >= 0:
        sig = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        sig = e / (1.0 + e)
    return -2.0 * lam * sig


def view_similarity(scene: Scene, view, embedder: SurrogateEmbedder, e_ref: np.ndarray,
                    pose: Pose | None = None, settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    img, _ = render(scene, view, pose, settings)
    return float(embed_forward(embedder, align(img.pixels)).embedding @ e_ref)


def _view_term(scene, view, embedder, e_ref, lam, param_class, pose, settings):
    img, inter = render(scene, view, pose, settings)
    cache = embed_forward(embedder, align(img.pixels))
    s = float(cache.embedding @ e_ref)
    slope = identity_loss_slope(s, lam)
    g_img = align_backward(embed_backward(embedder, cache, slope * e_ref), img.pixels.shape)
    grad = render_backward(scene, view, pose, inter, g_img, param_class, settings)
    return s, identity_loss(s, lam), grad


def eot_loss_and_grad(scene: Scene, views, embedder: SurrogateEmbedder, e_ref: np.ndarray,
                      lam: float = 10.0, param_class=ParamClass.DC_COLOR, pose: Pose | None = None,
                      settings: RenderSettings = DEFAULT_SETTINGS, workers: int = 1):
    """Mean loss, mean gradient and mean similarity over ``views``.

    Per-view terms are computed independently (optionally on a thread pool) and summed
    in view order, so the result does not depend on ``workers``.
    """
    views = list(views)
    if not views:
        raise ValueError("views must be nonempty")
    param_class = ParamClass(param_class)

    def term(i):
        try:
            return _view_term(scene, views[i], embedder, e_ref, lam, param_class, pose, settings)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise type(exc)(f"view {i}: {exc}") from exc

    if workers > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            terms = list(pool.map(term, range(len(views))))
    else:
        terms = [term(i) for i in range(len(views))]
    k = len(views)
    loss = sum(t[1] for t in terms) / k
    s_mean = sum(t[0] for t in terms) / k
    grad = terms[0][2].copy()
    for t in terms[1:]:
        grad += t[2]
    grad /= k
    return loss, grad, s_mean


# --------------------------------------------------------------------------- projections


def project_linf(theta, theta0, epsilon: float) -> np.ndarray:
    theta0 = np.asarray(theta0, dtype=np.float64)
    return np.clip(np.asarray(theta, dtype=np.float64), theta0 - epsilon, theta0 + epsilon)


def project_l2(theta, theta0, epsilon: float) -> np.ndarray:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    delta = theta - theta0
    norm = float(np.linalg.norm(delta))
    if norm <= epsilon:
        return theta.copy()
    return theta0 + delta * (epsilon / norm)


def perturbation_norm(theta, theta0, norm: str) -> float:
    delta = np.asarray(theta) - np.asarray(theta0)
    if delta.size == 0:
        return 0.0
    if norm == "linf":
        return float(np.max(np.abs(delta)))
    return float(np.linalg.norm(delta))


def _unit(g: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g / n if n > 0 else np.zeros_like(g)


# --------------------------------------------------------------------------- driver


class _Problem:
    """Holds the restricted parameter vector and maps it in and out of the scene."""

    def __init__(self, scene: Scene, embedder: SurrogateEmbedder, config: AttackConfig,
                 pose: Pose | None, settings: RenderSettings):
        self.scene = scene
        self.embedder = embedder
        self.config = config
        self.pose = pose
        self.settings = settings
        self.cls = config.param_class
        self.full0 = get_params(scene, self.cls)
        self.index = select_region(scene, config.region)
        self.theta0 = self.full0[self.index].copy()
        base = config.viewpoint_dist.base_view
        self.e_ref = reference_embedding(embedder, scene, base, pose, settings)

    def scene_for(self, theta: np.ndarray) -> Scene:
        full = self.full0.copy()
        full[self.index] = theta
        return set_params(self.scene, self.cls, full)

    def constrain(self, theta: np.ndarray) -> np.ndarray:
        if self.cls is ParamClass.DC_COLOR or self.cls is ParamClass.AC_COLOR:
            return theta
        if self.cls is ParamClass.POSITION:
            return theta
        fixed = apply_param_constraints(self.scene_for(theta), self.cls)
        return get_params(fixed, self.cls)[self.index]

    def views(self, t: int):
        c = self.config
        return sample_viewpoints(c.viewpoint_dist, c.k_viewpoints, c.seed, t)

    def loss_grad(self, theta: np.ndarray, t: int):
        loss, grad, s_mean = eot_loss_and_grad(
            self.scene_for(theta), self.views(t), self.embedder, self.e_ref, self.config.lam,
            self.cls, self.pose, self.settings, self.config.workers)
        return loss, grad[self.index], s_mean

    def final_similarity(self, theta: np.ndarray) -> float:
        c = self.config
        scene = self.scene_for(theta)
        views = grid_viewpoints(c.viewpoint_dist, c.eval_grid, c.eval_grid)
        sims = [view_similarity(scene, v, self.embedder, self.e_ref, self.pose, self.settings)
                for v in views]
        return float(sum(sims) / len(sims))


def _check_finite(trace, t, loss, grad):
    if not (math.isfinite(loss) and np.isfinite(grad).all()):
        raise AttackAborted(f"non-finite loss or gradient at iteration {t}", trace)


def run_attack(scene: Scene, embedder: SurrogateEmbedder, config: AttackConfig,
               pose: Pose | None = None, settings: RenderSettings = DEFAULT_SETTINGS):
    """Dispatch on ``config.method``; returns ``(masked scene, trace)``."""
    runner = {"pgd": run_pgd, "fgsm": run_fgsm, "ddn": run_ddn}[config.method]
    return runner(scene, embedder, config, pose, settings)


def _finish(prob: _Problem, trace: AttackTrace, theta: np.ndarray, start: float):
    trace.final_params = theta
    trace.final_similarity = prob.final_similarity(theta)
    trace.wall_time = time.perf_counter() - start
    return prob.scene_for(theta), trace


def run_pgd(scene: Scene, embedder: SurrogateEmbedder, config: AttackConfig,
            pose: Pose | None = None, settings: RenderSettings = DEFAULT_SETTINGS):
    """Projected gradient ascent on the EOT identity loss.

    Each iteration takes a step (sign of the gradient for linf, unit gradient for l2),
    projects onto the epsilon ball around the original parameters, then applies the
    parameter-class constraints.
    """
    start = time.perf_counter()
    if config.norm == "linf" and config.param_class is ParamClass.DC_COLOR:
        check_epsilon_range(scene, config.epsilon)
    prob = _Problem(scene, embedder, config, pose, settings)
    trace = AttackTrace()
    theta = prob.theta0.copy()
    alpha, eps = config.alpha, config.epsilon
    for t in range(1, config.t_max + 1):
        loss, grad, s_mean = prob.loss_grad(theta, t)
        _check_finite(trace, t, loss, grad)
        if config.norm == "linf":
            theta = project_linf(theta + alpha * np.sign(grad), prob.theta0, eps)
        else:
            theta = project_l2(theta + alpha * _unit(grad), prob.theta0, eps)
        theta = prob.constrain(theta)
        trace.add(t, s_mean, loss, perturbation_norm(theta, prob.theta0, config.norm))
    return _finish(prob, trace, theta, start)


def run_fgsm(scene: Scene, embedder: SurrogateEmbedder, config: AttackConfig,
             pose: Pose | None = None, settings: RenderSettings = DEFAULT_SETTINGS):
    """Single full-budget step from the original parameters."""
    start = time.perf_counter()
    prob = _Problem(scene, embedder, config, pose, settings)
    trace = AttackTrace()
    eps = config.epsilon
    loss, grad, s_mean = prob.loss_grad(prob.theta0, 1)
    _check_finite(trace, 1, loss, grad)
    if config.norm == "linf":
        theta = project_linf(prob.theta0 + eps * np.sign(grad), prob.theta0, eps)
    else:
        theta = project_l2(prob.theta0 + eps * _unit(grad), prob.theta0, eps)
    theta = prob.constrain(theta)
    trace.add(1, s_mean, loss, perturbation_norm(theta, prob.theta0, config.norm))
    return _finish(prob, trace, theta, start)


def run_ddn(scene: Scene, embedder: SurrogateEmbedder, config: AttackConfig,
            pose: Pose | None = None, settings: RenderSettings = DEFAULT_SETTINGS):
    """Decoupled direction and norm: minimal-l2 perturbation reaching s_mean < threshold.

    The radius ``rho`` shrinks by ``1 - gamma`` after a successful iteration and grows by
    ``1 + gamma`` otherwise; the step size follows a cosine schedule from ``alpha`` down
    to ``alpha / 100``. The smallest successful perturbation is returned (the last iterate
    when none succeeds).
    """
    start = time.perf_counter()
    prob = _Problem(scene, embedder, config, pose, settings)
    trace = AttackTrace()
    theta0 = prob.theta0
    delta = np.zeros_like(theta0)
    rho = config.ddn_init_rho
    gamma = config.ddn_gamma
    tau = config.success_threshold
    best, best_norm = None, math.inf
    t_max = config.t_max
    for t in range(1, t_max + 1):
        theta = prob.constrain(theta0 + delta)
        loss, grad, s_mean = prob.loss_grad(theta, t)
        _check_finite(trace, t, loss, grad)
        norm = float(np.linalg.norm(theta - theta0))
        success = s_mean < tau
        if success and norm < best_norm:
            best, best_norm = theta.copy(), norm
        rho_t = rho
        alpha_t = config.alpha * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * (t - 1) / t_max)))
        delta = delta + alpha_t * _unit(grad)
        rho *= (1.0 - gamma) if success else (1.0 + gamma)
        dn = float(np.linalg.norm(delta))
        if dn > 0:
            delta = delta * (rho / dn)
        trace.add(t, s_mean, loss, norm, rho=rho_t)
    trace.success = best is not None
    final = best if best is not None else prob.constrain(theta0 + delta)
    return _finish(prob, trace, final, start)
