"""Command-line driver: ``splatmask {synth,render,mask,eval,gradcheck,calibrate}``.

Every verb reads one YAML run config (``--config``); ``--out`` and ``--seed`` override
the corresponding config keys. Exit codes: 0 success, 1 check failure, 2 invalid
input, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import copy
import glob
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .attack import AttackAborted, AttackConfig, identity_loss, run_attack
from .camera import ViewpointDistribution, default_frontal, grid_angles, rotate_view
from .embedder import SurrogateEmbedder, align, embed, embed_image
from .evalharness import (
    ScorePairs,
    build_synthetic_protocol,
    calibrate_eer,
    evaluate_scene,
    protocol_angles,
    rotation_grid_report,
)
from .renderer import (
    ParamClass,
    RenderSettings,
    fd_gradient,
    render,
    render_backward,
)
from .scene import REGIONS, SceneError, load_scene, save_scene, synth_scene

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "scene": {"file": None, "synth": {"n": 300, "layout": "head_like", "sh_bands": 1}},
    "camera": {"width": 64, "height": 64, "radius": 3.0,
               "pitch_range": [-0.5, 0.5], "yaw_range": [-0.5, 0.5]},
    "render": {"grid_range": [-0.8, 0.8]},
    "embedders": [{"arch": "A", "seed": 0}],
    "attack": {"embedder": 0, "method": "pgd", "norm": "linf", "epsilon": 0.1, "t_max": 300,
               "k_viewpoints": 5, "lambda": 10.0, "param_class": "dc_color", "region": "all",
               "step_alpha": None, "workers": 1, "tau": None,
               "ddn": {"init_rho": 1.0, "gamma": 0.05, "step": 1.0}},
    "eval": {"embedder": 0, "identity": None, "ks": [1, 50], "queries": 22, "grid": [5, 5],
             "grid_range": [-0.8, 0.8], "masked": None,
             "protocol": {"identities": 10, "views": 22, "jitter": 0.05, "n_primitives": 300}},
    "gradcheck": {"n": 20, "size": 32, "tolerance": 1e-4, "chain_tolerance": 1e-3,
                  "h": 1e-4, "corrupt": None},
    "calibrate": {"pairs": None},
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path: str | None, out: str | None = None, seed: int | None = None) -> RunConfig:
        user, base_dir = {}, Path.cwd()
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    user = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from exc
            if not isinstance(user, dict):
                raise ConfigError("config must be a mapping")
            base_dir = Path(path).resolve().parent
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = _merge(DEFAULTS, user)
        if out is not None:
            raw["out"] = out
        if seed is not None:
            raw["seed"] = seed
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg = cls(raw, base_dir)
        scene_file = raw["scene"].get("file")
        if scene_file is not None and not cfg.path(scene_file).exists():
            raise ConfigError(f"scene file not found: {scene_file}")
        return cfg

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out_dir(self) -> Path:
        d = Path(self.raw["out"])
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def hash(self) -> str:
        # output location and worker count do not affect results
        raw = copy.deepcopy(self.raw)
        raw.pop("out", None)
        raw["attack"].pop("workers", None)
        text = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def sub_seed(self, section: dict) -> int:
        s = section.get("seed")
        return self.seed if s is None else int(s)

    def scene(self):
        spec = self.raw["scene"]
        if spec.get("file"):
            return load_scene(self.path(spec["file"]))
        synth = spec.get("synth") or {}
        return synth_scene(self.sub_seed(synth), int(synth.get("n", 300)),
                           synth.get("layout", "head_like"), int(synth.get("sh_bands", 1)))

    def base_view(self):
        c = self.raw["camera"]
        return default_frontal(int(c["width"]), int(c["height"]), float(c["radius"]))

    def viewpoints(self) -> ViewpointDistribution:
        c = self.raw["camera"]
        return ViewpointDistribution(tuple(c["pitch_range"]), tuple(c["yaw_range"]), self.base_view())

    def grid_dist(self, key: str) -> ViewpointDistribution:
        lo, hi = self.raw[key]["grid_range"]
        return ViewpointDistribution((lo, hi), (lo, hi), self.base_view())

    def settings(self) -> RenderSettings:
        r = {k: v for k, v in self.raw["render"].items() if k in RenderSettings.__dataclass_fields__}
        return RenderSettings(**r)

    def embedder(self, index: int) -> SurrogateEmbedder:
        specs = self.raw["embedders"]
        if not 0 <= index < len(specs):
            raise ConfigError(f"embedder index {index} out of range")
        e = specs[index]
        return SurrogateEmbedder(int(e.get("seed", 0)), e.get("arch", "A"), float(e.get("input_std", 0.5)))

    def epsilons(self) -> list:
        eps = self.raw["attack"]["epsilon"]
        return list(eps) if isinstance(eps, (list, tuple)) else [eps]

    def attack_config(self, epsilon, tau=None) -> AttackConfig:
        a = self.raw["attack"]
        ddn = a.get("ddn") or {}
        return AttackConfig(
            epsilon=epsilon,
            step_alpha=a.get("step_alpha"),
            t_max=int(a["t_max"]),
            k_viewpoints=int(a["k_viewpoints"]),
            lam=float(a["lambda"]),
            norm=a["norm"],
            method=a["method"],
            param_class=a["param_class"],
            region=a["region"],
            seed=self.sub_seed(a),
            viewpoint_dist=self.viewpoints(),
            success_threshold=tau if tau is not None else a.get("tau"),
            ddn_init_rho=float(ddn.get("init_rho", 1.0)),
            ddn_gamma=float(ddn.get("gamma", 0.05)),
            ddn_step=float(ddn.get("step", 1.0)),
            workers=int(a.get("workers", 1)),
        )

    def protocol(self, embedder):
        p = self.raw["eval"]["protocol"]
        return build_synthetic_protocol(
            self.sub_seed(p), int(p["identities"]), int(p["views"]), float(p["jitter"]),
            embedder, self.viewpoints(), int(p["n_primitives"]), settings=self.settings())


# --------------------------------------------------------------------------- output helpers


def to_ppm(pixels: np.ndarray) -> bytes:
    """Binary P6 with round-half-up 8-bit quantization."""
    px = np.asarray(pixels, dtype=np.float64)
    h, w = px.shape[:2]
    q = np.floor(np.clip(px, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _eps_tag(eps) -> str:
    return "none" if eps is None else repr(float(eps))


# --------------------------------------------------------------------------- verbs


def cmd_synth(cfg: RunConfig, args) -> int:
    scene = cfg.scene()
    path = cfg.out_dir / "scene.json"
    save_scene(scene, path)
    hist = {r: scene.regions.count(r) for r in REGIONS}
    print(f"primitives={scene.n}")
    print("regions=" + ",".join(f"{r}:{hist[r]}" for r in REGIONS))
    print(f"wrote {path}")
    return EXIT_OK


def _parse_view(text: str) -> tuple[float, float]:
    try:
        p, y = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--view expects 'pitch,yaw', got {text!r}") from exc
    return p, y


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--grid expects 'RxC', got {text!r}") from exc
    if r < 1 or c < 1:
        raise ConfigError("grid dimensions must be >= 1")
    return r, c


def cmd_render(cfg: RunConfig, args) -> int:
    scene = cfg.scene()
    settings = cfg.settings()
    out = cfg.out_dir
    if args.grid:
        rows, cols = _parse_grid(args.grid)
        dist = cfg.grid_dist("render")
        for n, (p, y) in enumerate(grid_angles(dist, rows, cols)):
            r, c = divmod(n, cols)
            img, _ = render(scene, rotate_view(dist.base_view, p, y), None, settings)
            (out / f"render_r{r}_c{c}.ppm").write_bytes(to_ppm(img.pixels))
        print(f"wrote {rows * cols} images to {out}")
        return EXIT_OK
    p, y = _parse_view(args.view) if args.view else (0.0, 0.0)
    img, _ = render(scene, rotate_view(cfg.base_view(), p, y), None, settings)
    path = out / "render.ppm"
    path.write_bytes(to_ppm(img.pixels))
    print(f"wrote {path}")
    return EXIT_OK


def _calibrated_tau(cfg: RunConfig) -> float:
    emb = cfg.embedder(int(cfg.raw["eval"]["embedder"]))
    return calibrate_eer(cfg.protocol(emb).pairs)[0]


def cmd_mask(cfg: RunConfig, args) -> int:
    scene = cfg.scene()
    emb = cfg.embedder(int(cfg.raw["attack"]["embedder"]))
    settings = cfg.settings()
    out = cfg.out_dir
    tau = None
    if cfg.raw["attack"]["method"] == "ddn" and cfg.raw["attack"].get("tau") is None:
        tau = _calibrated_tau(cfg)
    sweep = cfg.epsilons()
    timing = {}
    for eps in sweep:
        config = cfg.attack_config(eps, tau)
        suffix = "" if len(sweep) == 1 else f"_eps{_eps_tag(eps)}"
        try:
            masked, trace = run_attack(scene, emb, config, None, settings)
        except AttackAborted as exc:
            exc.trace.save(out / f"trace{suffix}.jsonl")
            print(f"attack aborted: {exc}", file=sys.stderr)
            return EXIT_ABORT
        save_scene(masked, out / f"masked{suffix}.json")
        trace.save(out / f"trace{suffix}.jsonl")
        last = trace.records[-1]
        summary = {
            "config_hash": cfg.hash,
            "epsilon": eps,
            "method": config.method,
            "norm": config.norm,
            "param_class": config.param_class.value,
            "region": sorted(config.region),
            "iterations": len(trace),
            "final_s_mean": trace.final_similarity,
            "final_norm": last["norm"],
            "success": trace.success,
        }
        _write_json(out / f"summary{suffix}.json", summary)
        timing[_eps_tag(eps)] = trace.wall_time
        print(json.dumps({"final_s_mean": trace.final_similarity, "final_norm": last["norm"],
                          "iterations": len(trace), "epsilon": eps}))
    # wall time lives apart from the deterministic outputs
    _write_json(out / "timing.json", timing)
    return EXIT_OK


def _masked_paths(cfg: RunConfig) -> list[Path]:
    listed = cfg.raw["eval"].get("masked")
    if listed:
        paths = [cfg.path(p) for p in listed]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ConfigError(f"masked scene files not found: {missing}")
        return paths
    return sorted(Path(p) for p in glob.glob(str(cfg.out_dir / "masked*.json")))


def cmd_eval(cfg: RunConfig, args) -> int:
    ev = cfg.raw["eval"]
    settings = cfg.settings()
    emb = cfg.embedder(int(ev["embedder"]))
    original = cfg.scene()
    protocol = cfg.protocol(emb)
    identity = ev.get("identity")
    gallery = protocol.gallery
    if identity is None:
        found = [name for name, sc in protocol.scenes.items() if sc.equals(original)]
        if not found:
            raise ConfigError("scene is not a protocol identity; set eval.identity or use a protocol scene")
        identity = found[0]
    if identity not in protocol.scenes:
        raise ConfigError(f"identity {identity!r} is not part of the protocol")
    if not protocol.scenes[identity].equals(original):
        raise ConfigError(f"scene does not match protocol identity {identity!r}")
    tau, eer = calibrate_eer(protocol.pairs)
    dist = cfg.viewpoints()
    pseed = cfg.sub_seed(ev["protocol"])
    views = [rotate_view(dist.base_view, p, y)
             for p, y in protocol_angles(dist, pseed, "queries", 0, int(ev["queries"]))]
    rows, cols = (int(v) for v in ev["grid"])
    gdist = cfg.grid_dist("eval")
    refs = gallery.of(identity)
    targets = [("unmasked", original)] + [(p.stem, load_scene(p)) for p in _masked_paths(cfg)]

    out = cfg.out_dir
    lines = [f"config_hash={cfg.hash}", f"tau_eer={tau!r}", f"eer={eer!r}",
             f"positives={protocol.pairs.positives.size}", f"negatives={protocol.pairs.negatives.size}", ""]
    for name, scene in targets:
        report = evaluate_scene(scene, original, identity, gallery, emb, tau, views,
                                ks=[int(k) for k in ev["ks"]], settings=settings)
        grid = rotation_grid_report(scene, original, emb, refs, gdist, rows, cols, tau, None, settings)
        report.extra = {"grid_no_match": grid.n_no_match, "grid_cells": rows * cols}
        lines.append(f"[{name}]")
        lines.append(report.to_text())
        _write_text(out / f"ranks_{name}.csv", report.ranks_csv())
        _write_text(out / f"grid_{name}.csv", grid.to_csv())
        _write_text(out / f"grid_{name}.txt", grid.to_text())
    _write_text(out / "report.txt", "\n".join(lines))
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------- gradcheck


def _rel_error(analytic, fd, mask):
    rel = np.abs(analytic - fd) / (np.abs(fd) + 1e-8)
    rel = np.where(mask, rel, 0.0)
    j = int(np.argmax(rel))
    return float(rel.reshape(-1)[j]), np.unravel_index(j, rel.shape)


def run_gradcheck(cfg: RunConfig) -> tuple[bool, list[dict]]:
    """Analytic vs central-difference gradients for every parameter class and the full chain."""
    gc = cfg.raw["gradcheck"]
    n, size, h = int(gc["n"]), int(gc["size"]), float(gc["h"])
    tol, chain_tol = float(gc["tolerance"]), float(gc["chain_tolerance"])
    corrupt = gc.get("corrupt")
    seed = cfg.sub_seed(gc)
    scene = synth_scene(seed, n, "blob", sh_bands=2)
    view = rotate_view(default_frontal(size, size), 0.1, 0.2)
    settings = RenderSettings(view_dependent=True)
    fd_settings = RenderSettings(view_dependent=True, dtype="longdouble")
    weights = np.random.default_rng(seed).normal(size=(size, size, 3))
    _, inter = render(scene, view, None, settings)
    results = []

    def record(name, analytic, fd, mask, limit):
        if corrupt == name:
            analytic = analytic * 1.01
        err, where = _rel_error(analytic, fd, mask)
        results.append({"check": name, "max_rel_error": err, "tolerance": limit,
                        "coordinate": [int(i) for i in where], "passed": err < limit})

    for pc in ParamClass:
        analytic = render_backward(scene, view, None, inter, weights, pc, settings)
        fd, mask = fd_gradient(scene, view, None, lambda px: np.sum(weights * px), pc, h,
                               fd_settings, return_mask=True)
        record(pc.value, analytic, fd, mask, tol)

    # full chain: render -> align -> embed -> cosine -> identity loss, w.r.t. dc_color
    emb = cfg.embedder(0)
    other, _ = render(synth_scene(seed + 1, n, "blob"), view, None, settings)
    e_ref = embed_image(emb, other.pixels)
    lam = float(cfg.raw["attack"]["lambda"])
    from .attack import eot_loss_and_grad

    _, analytic, _ = eot_loss_and_grad(scene, [view], emb, e_ref, lam, ParamClass.DC_COLOR, None, settings)

    def chain_loss(px):
        return identity_loss(float(embed(emb, align(np.asarray(px, dtype=np.float64))) @ e_ref), lam)

    fd, mask = fd_gradient(scene, view, None, chain_loss, ParamClass.DC_COLOR, h, fd_settings,
                           return_mask=True)
    record("chain_dc_color", analytic, fd, mask, chain_tol)
    return all(r["passed"] for r in results), results


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    ok, results = run_gradcheck(cfg)
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['check']:<16} max_rel_error={r['max_rel_error']:.3e} "
              f"tolerance={r['tolerance']:.0e} at={tuple(r['coordinate'])}")
    _write_json(cfg.out_dir / "gradcheck.json", {"config_hash": cfg.hash, "results": results})
    return EXIT_OK if ok else EXIT_CHECK


def cmd_calibrate(cfg: RunConfig, args) -> int:
    toy = cfg.raw["calibrate"].get("pairs")
    if toy:
        pairs = ScorePairs(toy.get("positives", []), toy.get("negatives", []))
    else:
        ev = cfg.raw["eval"]
        pairs = cfg.protocol(cfg.embedder(int(ev["embedder"]))).pairs
    if pairs.positives.size == 0 or pairs.negatives.size == 0:
        raise ConfigError("calibration needs positive and negative pairs")
    tau, eer = calibrate_eer(pairs)
    result = {"config_hash": cfg.hash, "tau": tau, "eer": eer,
              "positives": int(pairs.positives.size), "negatives": int(pairs.negatives.size)}
    _write_json(cfg.out_dir / "tau.json", result)
    print(json.dumps(result))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "mask": cmd_mask,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "calibrate": cmd_calibrate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatmask", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML run config")
    parser.add_argument("--out", help="output directory (overrides config 'out')")
    parser.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
    parser.add_argument("--view", help="render a single view at 'pitch,yaw' radians")
    parser.add_argument("--grid", help="render an RxC pitch/yaw grid, e.g. 5x5")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.out, args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, SceneError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
