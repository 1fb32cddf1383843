"""Identification, verification and image-fidelity metrics plus the synthetic protocol."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView, Pose, ViewpointDistribution, grid_angles, rotate_view
from .embedder import EMBED_DIM, SurrogateEmbedder, align, cosine_similarity, embed_image, reference_embedding
from .renderer import DEFAULT_SETTINGS, RenderSettings, render
from .rng import substream
from .scene import Scene, synth_scene

HIST_EDGES = np.linspace(-1.0, 1.0, 21)


def cosine_distance(q, g) -> float:
    return 1.0 - cosine_similarity(q, g)


# --------------------------------------------------------------------------- gallery


@dataclass(eq=False)
class Gallery:
    ids: list[str]
    embeddings: np.ndarray
    index: dict[str, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        emb = np.array(self.embeddings, dtype=np.float64).reshape(len(self.ids), -1)
        if len(self.ids) and emb.shape[1] != EMBED_DIM:
            raise ValueError(f"gallery embeddings must be {EMBED_DIM}-d, got {emb.shape[1]}")
        if not np.isfinite(emb).all():
            raise ValueError("gallery embeddings must be finite")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("gallery embeddings must have unit norm")
        emb.setflags(write=False)
        self.embeddings = emb
        self.index = {}
        for pos, i in enumerate(self.ids):
            self.index.setdefault(i, []).append(pos)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def identities(self) -> list[str]:
        return list(self.index)

    def of(self, identity: str) -> np.ndarray:
        if identity not in self.index:
            raise ValueError(f"identity {identity!r} not in gallery")
        return self.embeddings[self.index[identity]]

    def save(self, path) -> None:
        """Header line ``{"count", "dim"}`` then per entry: u16 id length, id, 512 LE float32."""
        with open(path, "wb") as fh:
            fh.write((json.dumps({"count": len(self), "dim": EMBED_DIM}) + "\n").encode())
            for i, e in zip(self.ids, self.embeddings):
                raw = i.encode()
                fh.write(struct.pack("<H", len(raw)) + raw)
                fh.write(np.asarray(e, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> Gallery:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            if header.get("dim") != EMBED_DIM:
                raise ValueError(f"unsupported gallery dimension {header.get('dim')}")
            ids, rows = [], []
            for _ in range(int(header["count"])):
                (n,) = struct.unpack("<H", fh.read(2))
                ids.append(fh.read(n).decode())
                rows.append(np.frombuffer(fh.read(4 * EMBED_DIM), dtype="<f4").astype(np.float64))
        emb = np.array(rows).reshape(len(ids), EMBED_DIM)
        # float32 storage: renormalize so the unit-norm invariant holds in float64
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        return cls(ids, emb)


def rank_of(query, true_id: str, gallery: Gallery) -> int:
    """1-based rank of the first ``true_id`` entry by ascending cosine distance.

    Ties keep gallery order.
    """
    if true_id not in gallery.index:
        raise ValueError(f"identity {true_id!r} not in gallery")
    q = np.asarray(query, dtype=np.float64)
    dist = 1.0 - gallery.embeddings @ (q / np.linalg.norm(q))
    order = np.argsort(dist, kind="stable")
    ids = np.asarray(gallery.ids, dtype=object)[order]
    return int(np.flatnonzero(ids == true_id)[0]) + 1


def accuracy_at_k(queries, gallery: Gallery, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    queries = list(queries)
    if not queries:
        raise ValueError("no queries")
    ranks = [rank_of(e, i, gallery) for e, i in queries]
    return sum(r <= k for r in ranks) / len(ranks)


def accuracy_from_ranks(ranks, ks) -> dict[int, float]:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no queries")
    return {int(k): float(np.mean(ranks <= k)) for k in ks}


# --------------------------------------------------------------------------- verification


@dataclass(eq=False)
class ScorePairs:
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.float64).reshape(-1)
        self.negatives = np.asarray(self.negatives, dtype=np.float64).reshape(-1)


def far_frr(pairs: ScorePairs, tau: float) -> tuple[float, float]:
    far = float(np.mean(pairs.negatives >= tau))
    frr = float(np.mean(pairs.positives < tau))
    return far, frr


def calibrate_eer(pairs: ScorePairs) -> tuple[float, float]:
    """Threshold where FAR and FRR cross, and the error rate there.

    Candidates are the sorted distinct scores. FAR - FRR never increases with the
    threshold; the crossing is located between the last candidate where it is positive
    and the first where it is not, and both curves are interpolated linearly there.
    """
    pos, neg = pairs.positives, pairs.negatives
    if pos.size == 0 or neg.size == 0:
        raise ValueError("calibration needs positive and negative scores")
    cand = np.unique(np.concatenate([pos, neg]))
    # one step past the top score, where FAR = 0 and FRR = 1
    cand = np.append(cand, np.nextafter(cand[-1], np.inf))
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    far = 1.0 - np.searchsorted(neg_sorted, cand, side="left") / neg.size
    frr = np.searchsorted(pos_sorted, cand, side="left") / pos.size
    d = far - frr
    i = int(np.flatnonzero(d <= 0)[0])
    if d[i] == 0 or i == 0:
        return float(cand[i]), float(0.5 * (far[i] + frr[i]))
    w = d[i - 1] / (d[i - 1] - d[i])
    tau = cand[i - 1] + w * (cand[i] - cand[i - 1])
    eer = far[i - 1] + w * (far[i] - far[i - 1])
    return float(tau), float(eer)


def match_rate(queries, references: Gallery, tau: float) -> float:
    """Fraction of queries whose best same-identity reference similarity is >= tau."""
    queries = list(queries)
    if not queries:
        raise ValueError("no queries")
    hits = 0
    for e, i in queries:
        refs = references.of(i)
        hits += float(np.max(refs @ np.asarray(e, dtype=np.float64))) >= tau
    return hits / len(queries)


# --------------------------------------------------------------------------- fidelity


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, len(g), axis=0)
    x = win @ g
    win = np.lib.stride_tricks.sliding_window_view(x, len(g), axis=1)
    return win @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, averaged over RGB channels."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < window:
        raise ValueError(f"images must be at least {window}x{window}")
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def psnr(a, b) -> float:
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# --------------------------------------------------------------------------- rotation grid


@dataclass
class RotationReport:
    rows: int
    cols: int
    tau: float
    cells: list[dict]
    histogram: list[int]

    @property
    def similarities(self) -> np.ndarray:
        return np.array([c["similarity"] for c in self.cells]).reshape(self.rows, self.cols)

    @property
    def n_match(self) -> int:
        return sum(c["match"] for c in self.cells)

    @property
    def n_no_match(self) -> int:
        return len(self.cells) - self.n_match

    def to_text(self) -> str:
        lines = [f"rows={self.rows}", f"cols={self.cols}", f"tau={self.tau!r}",
                 f"match={self.n_match}", f"no_match={self.n_no_match}",
                 f"histogram={','.join(str(h) for h in self.histogram)}", ""]
        lines.append(f"{'row':>4} {'col':>4} {'pitch':>8} {'yaw':>8} {'similarity':>11} verdict")
        for c in self.cells:
            verdict = "match" if c["match"] else "no_match"
            lines.append(f"{c['row']:>4} {c['col']:>4} {c['pitch']:>8.3f} {c['yaw']:>8.3f} "
                         f"{c['similarity']:>11.6f} {verdict}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["row,col,pitch,yaw,similarity,match"]
        for c in self.cells:
            out.append(f"{c['row']},{c['col']},{c['pitch']!r},{c['yaw']!r},{c['similarity']!r},{int(c['match'])}")
        return "\n".join(out) + "\n"


def similarity_histogram(values) -> list[int]:
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=HIST_EDGES)
    return [int(c) for c in counts]


def rotation_grid_report(scene_masked: Scene, scene_original: Scene, embedder: SurrogateEmbedder,
                         references, dist: ViewpointDistribution, rows: int, cols: int,
                         tau: float, pose: Pose | None = None,
                         settings: RenderSettings = DEFAULT_SETTINGS) -> RotationReport:
    """Render ``scene_masked`` over a pitch/yaw grid and verify each render.

    ``references`` is a single embedding, an (M, 512) array (best match counts) or
    None, in which case the original scene's frontal embedding is used.
    """
    if references is None:
        references = reference_embedding(embedder, scene_original, dist.base_view, pose, settings)
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    cells = []
    for n, (p, y) in enumerate(grid_angles(dist, rows, cols)):
        r, c = divmod(n, cols)
        try:
            img, _ = render(scene_masked, rotate_view(dist.base_view, p, y), pose, settings)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise type(exc)(f"grid cell ({r},{c}): {exc}") from exc
        sim = float(np.max(refs @ embed_image(embedder, img.pixels)))
        cells.append({"row": r, "col": c, "pitch": p, "yaw": y, "similarity": sim, "match": sim >= tau})
    return RotationReport(rows, cols, float(tau), cells,
                          similarity_histogram([c["similarity"] for c in cells]))


# --------------------------------------------------------------------------- synthetic protocol


def identity_name(index: int) -> str:
    return f"id{index:03d}"


def identity_seed(seed: int, index: int) -> int:
    return 1000 * seed + index


def protocol_angles(dist: ViewpointDistribution, seed: int, stream: str, index: int, count: int) -> np.ndarray:
    """(count, 2) pitch/yaw pairs drawn from substream (seed, stream, index, j)."""
    (plo, phi), (ylo, yhi) = dist.pitch_range, dist.yaw_range
    out = np.empty((count, 2))
    for j in range(count):
        u = substream(seed, stream, index, j).random(2)
        out[j] = plo + (phi - plo) * u[0], ylo + (yhi - ylo) * u[1]
    return out


@dataclass(eq=False)
class SyntheticProtocol:
    gallery: Gallery
    pairs: ScorePairs
    scenes: dict[str, Scene]
    seed: int
    dist: ViewpointDistribution

    def __iter__(self):
        yield self.gallery
        yield self.pairs


def build_synthetic_protocol(seed: int, n_identities: int = 10, per_id_views: int = 22,
                             jitter: float = 0.05, embedder: SurrogateEmbedder | None = None,
                             dist: ViewpointDistribution | None = None, n_primitives: int = 300,
                             pose: Pose | None = None,
                             settings: RenderSettings = DEFAULT_SETTINGS) -> SyntheticProtocol:
    """Seeded identities rendered under viewpoint and color jitter.

    Identity ``i`` is ``synth_scene(1000 * seed + i, n_primitives, "head_like")``. Each of
    its views draws (pitch, yaw) uniformly from ``dist`` and adds Gaussian noise of std
    ``jitter`` to the DC coefficients. Positives are all same-identity embedding pairs,
    negatives all cross-identity pairs.
    """
    if n_identities < 2:
        raise ValueError("need at least two identities")
    if per_id_views < 2:
        raise ValueError("need at least two views per identity")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    embedder = embedder or SurrogateEmbedder()
    dist = dist or ViewpointDistribution()
    ids, rows, scenes = [], [], {}
    for i in range(n_identities):
        name = identity_name(i)
        scene = synth_scene(identity_seed(seed, i), n_primitives, "head_like")
        scenes[name] = scene
        for j, (p, y) in enumerate(protocol_angles(dist, seed, "protocol-views", i, per_id_views)):
            s = scene
            if jitter > 0:
                noise = substream(seed, "protocol-color", i, j).normal(scale=jitter, size=scene.sh_dc.shape)
                s = scene.replace(sh_dc=scene.sh_dc + noise)
            img, _ = render(s, rotate_view(dist.base_view, p, y), pose, settings)
            ids.append(name)
            rows.append(embed_image(embedder, img.pixels))
    gallery = Gallery(ids, np.array(rows))
    sims = gallery.embeddings @ gallery.embeddings.T
    same = np.equal.outer(np.array(ids, dtype=object), np.array(ids, dtype=object))
    iu = np.triu_indices(len(ids), 1)
    pairs = ScorePairs(sims[iu][same[iu]], sims[iu][~same[iu]])
    return SyntheticProtocol(gallery, pairs, scenes, seed, dist)


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    accuracy_at_k: dict[int, float]
    match_rate: float
    tau_eer: float
    ssim: float
    psnr: float
    ranks: list[int]
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for k, v in sorted(self.accuracy_at_k.items()):
            lines.append(f"rank_{k}={v!r}")
        lines += [f"match_rate={self.match_rate!r}", f"tau_eer={self.tau_eer!r}",
                  f"ssim={self.ssim!r}", f"psnr={self.psnr!r}"]
        lines += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        lines.append("")
        head = "".join(f"{'Rank-' + str(k):>10}" for k in sorted(self.accuracy_at_k))
        lines.append(f"{head}{'Match':>10}{'SSIM':>10}{'PSNR':>10}")
        vals = "".join(f"{100 * v:>9.1f}%" for _, v in sorted(self.accuracy_at_k.items()))
        lines.append(f"{vals}{100 * self.match_rate:>9.1f}%{self.ssim:>10.4f}{self.psnr:>10.2f}")
        return "\n".join(lines) + "\n"

    def ranks_csv(self) -> str:
        return "query,rank\n" + "".join(f"{i},{r}\n" for i, r in enumerate(self.ranks))


def evaluate_scene(masked: Scene, original: Scene, identity: str, gallery: Gallery,
                   embedder: SurrogateEmbedder, tau: float, views: list[CameraView],
                   ks=(1, 50), pose: Pose | None = None,
                   settings: RenderSettings = DEFAULT_SETTINGS) -> EvalReport:
    """Rank-k, match rate and fidelity of ``masked`` renders over ``views``.

    SSIM and PSNR compare aligned crops of masked and original renders from the same
    view and are averaged over views.
    """
    queries, ssims, psnrs = [], [], []
    for v in views:
        img_m, _ = render(masked, v, pose, settings)
        img_o, _ = render(original, v, pose, settings)
        queries.append((embed_image(embedder, img_m.pixels), identity))
        a, b = align(img_m.pixels), align(img_o.pixels)
        ssims.append(ssim(a, b))
        psnrs.append(psnr(a, b))
    ranks = [rank_of(e, i, gallery) for e, i in queries]
    return EvalReport(
        accuracy_at_k=accuracy_from_ranks(ranks, ks),
        match_rate=match_rate(queries, gallery, tau),
        tau_eer=float(tau),
        ssim=float(np.mean(ssims)),
        psnr=float(np.mean(psnrs)),
        ranks=ranks,
    )
