"""Cross-frame appearance encoder with a multi-level triplet objective.

A 3-layer dense encoder f maps each feature-map location to an embedding.
Two same-level maps are compared by the mean per-location cosine of their
embeddings; distance is one minus that. The training loss hinges, per pyramid
level, on the anchor frame being closer to a nearby frame than to a distant
one, and the trainer mines the hardest of a few candidate distant frames at
every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .geometry import BBox  # noqa: F401  (re-exported for callers building RoIs)
from .optim import Adam
from .pyramid import FeaturePyramid, read_tensor_record, write_tensor_record


@dataclass
class EncoderParams:
    """Three affine layers; rectifier after the first two, linear output."""

    weights: tuple[np.ndarray, np.ndarray, np.ndarray]
    biases: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ValueError("encoder has exactly three layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")
        for i in range(2):
            if self.weights[i].shape[0] != self.weights[i + 1].shape[1]:
                raise ValueError(
                    f"layer {i} out dim {self.weights[i].shape[0]} != "
                    f"layer {i + 1} in dim {self.weights[i + 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights[2].shape[0])

    def flat(self) -> list[np.ndarray]:
        return [
            self.weights[0], self.biases[0],
            self.weights[1], self.biases[1],
            self.weights[2], self.biases[2],
        ]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            tuple(w.copy() for w in self.weights),
            tuple(b.copy() for b in self.biases),
        )


def init_encoder(
    in_dim: int, hidden: tuple[int, int] = (32, 32), out_dim: int = 16, seed: int = 0
) -> EncoderParams:
    """Symmetric uniform fan-in init, zero biases, float64."""
    g = rng.stream(seed, "encoder-init")
    dims = [in_dim, hidden[0], hidden[1], out_dim]
    weights, biases = [], []
    for i in range(3):
        bound = 1.0 / np.sqrt(dims[i])
        weights.append(g.uniform(-bound, bound, size=(dims[i + 1], dims[i])))
        biases.append(np.zeros(dims[i + 1]))
    return EncoderParams(tuple(weights), tuple(biases))


def _forward(x: np.ndarray, params: EncoderParams):
    """x: (N, C) batch. Returns embeddings (N, E) and the backprop cache."""
    w1, w2, w3 = params.weights
    b1, b2, b3 = params.biases
    z1 = x @ w1.T + b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ w2.T + b2
    h2 = np.maximum(z2, 0.0)
    out = h2 @ w3.T + b3
    return out, (x, z1, h1, z2, h2)


def _backward(grad_out: np.ndarray, cache, params: EncoderParams, grads: list[np.ndarray]):
    """Accumulate d(loss)/d(params) into grads given d(loss)/d(embeddings)."""
    x, z1, h1, z2, h2 = cache
    w2, w3 = params.weights[1], params.weights[2]
    grads[4] += grad_out.T @ h2
    grads[5] += grad_out.sum(axis=0)
    gh2 = grad_out @ w3
    gz2 = gh2 * (z2 > 0.0)  # subgradient 0 at the kink
    grads[2] += gz2.T @ h1
    grads[3] += gz2.sum(axis=0)
    gh1 = gz2 @ w2
    gz1 = gh1 * (z1 > 0.0)
    grads[0] += gz1.T @ x
    grads[1] += gz1.sum(axis=0)


def encode(v: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Embed one C-vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != params.in_dim:
        raise ValueError(f"expected ({params.in_dim},) vector, got shape {v.shape}")
    out, _ = _forward(v[None, :], params)
    return out[0]


def _as_batch(level: np.ndarray, params: EncoderParams) -> np.ndarray:
    if level.ndim != 3 or level.shape[0] != params.in_dim:
        raise ValueError(
            f"expected ({params.in_dim}, H, W) tensor, got shape {level.shape}"
        )
    c, h, w = level.shape
    return np.asarray(level, dtype=np.float64).reshape(c, h * w).T


def encode_map(level: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Embed every location of a (C, H, W) map, returning (E, H, W)."""
    c, h, w = level.shape
    out, _ = _forward(_as_batch(level, params), params)
    return out.T.reshape(params.out_dim, h, w)


def _mean_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0.0).any() or (nb == 0.0).any():
        raise ValueError("zero-norm embedding: cosine undefined")
    return (a * b).sum(axis=1) / (na * nb)


def similarity(pi: np.ndarray, pj: np.ndarray, params: EncoderParams) -> float:
    """Mean over all locations of the embedding cosine; in [-1, 1]."""
    if pi.shape != pj.shape:
        raise ValueError(f"shape mismatch {pi.shape} vs {pj.shape}")
    a, _ = _forward(_as_batch(pi, params), params)
    b, _ = _forward(_as_batch(pj, params), params)
    return float(_mean_cosine(a, b).mean())


def distance(pi: np.ndarray, pj: np.ndarray, params: EncoderParams) -> float:
    return 1.0 - similarity(pi, pj, params)


@dataclass(frozen=True)
class MclConfig:
    margin: float = 0.5

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")


def mcl_loss(
    x: FeaturePyramid, xp: FeaturePyramid, xn: FeaturePyramid,
    params: EncoderParams, cfg: MclConfig,
) -> float:
    """Sum over levels of max(0, D(X, X+) - D(X, X-) + margin)."""
    total = 0.0
    for xk, pk, nk in zip(x.levels, xp.levels, xn.levels):
        d_pos = distance(xk, pk, params)
        d_neg = distance(xk, nk, params)
        total += max(0.0, d_pos - d_neg + cfg.margin)
    return total


def _cosine_mean_with_grads(a: np.ndarray, b: np.ndarray):
    """Mean cosine over rows plus d(mean)/da and d(mean)/db."""
    n = a.shape[0]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0.0).any() or (nb == 0.0).any():
        raise ValueError("zero-norm embedding: cosine undefined")
    dot = (a * b).sum(axis=1)
    cos = dot / (na * nb)
    ga = (b / (na * nb)[:, None] - (cos / na**2)[:, None] * a) / n
    gb = (a / (na * nb)[:, None] - (cos / nb**2)[:, None] * b) / n
    return float(cos.mean()), ga, gb


def mcl_gradient(
    x: FeaturePyramid, xp: FeaturePyramid, xn: FeaturePyramid,
    params: EncoderParams, cfg: MclConfig,
) -> tuple[float, list[np.ndarray]]:
    """Loss and its analytic gradient w.r.t. the flattened parameter list.

    Hinge terms exactly at zero contribute no gradient. The returned loss is
    computed in the same pass so trainer logs see consistent values.
    """
    grads = [np.zeros_like(p) for p in params.flat()]
    total = 0.0
    for xk, pk, nk in zip(x.levels, xp.levels, xn.levels):
        if xk.shape != pk.shape or xk.shape != nk.shape:
            raise ValueError("pyramids must share level shapes")
        bx = _as_batch(xk, params)
        bp = _as_batch(pk, params)
        bn = _as_batch(nk, params)
        ax, cache_x = _forward(bx, params)
        ap, cache_p = _forward(bp, params)
        an, cache_n = _forward(bn, params)
        s_pos, d_sp_dax, d_sp_dap = _cosine_mean_with_grads(ax, ap)
        s_neg, d_sn_dax, d_sn_dan = _cosine_mean_with_grads(ax, an)
        term = s_neg - s_pos + cfg.margin  # equals D(X,X+) - D(X,X-) + m
        if term > 0.0:
            total += term
            _backward(d_sn_dax - d_sp_dax, cache_x, params, grads)
            _backward(-d_sp_dap, cache_p, params, grads)
            _backward(d_sn_dan, cache_n, params, grads)
    return total, grads


@dataclass(frozen=True)
class Triplet:
    video_id: int
    anchor_frame: int
    positive_frame: int
    negative_frame: int


def _positive_candidates(x: int, frame_rate: float, t_max: int) -> list[int]:
    lo = int(np.ceil(x - 0.5 * frame_rate))
    hi = int(np.floor(x + 0.5 * frame_rate))
    return [f for f in range(max(lo, 0), min(hi, t_max) + 1) if f != x]


def _negative_candidates(x: int, frame_rate: float, t_max: int) -> list[int]:
    left_hi = int(np.floor(x - 10.0 * frame_rate))
    right_lo = int(np.ceil(x + 10.0 * frame_rate))
    return list(range(0, min(left_hi, t_max) + 1)) + list(
        range(max(right_lo, 0), t_max + 1)
    )


def sample_triplets(
    video, anchor_frames: Sequence[int], seed: int
) -> tuple[list[Triplet], list[dict]]:
    """Draw one (anchor, positive, negative) per anchor frame.

    Positives come from within half a second of the anchor, negatives from at
    least ten seconds away, both uniform over the in-range frame indices of
    the video (0 through num_frames - 1). Anchors with an empty candidate set
    are skipped; each skip is returned as a warning record.
    """
    t_max = video.num_frames - 1
    if t_max < 1:
        raise ValueError(f"video {video.id}: need at least 2 frames")
    g = rng.stream(seed, "sample-triplets", video.id)
    triplets: list[Triplet] = []
    skipped: list[dict] = []
    for x in anchor_frames:
        if not 0 <= x <= t_max:
            raise ValueError(f"anchor frame {x} outside [0, {t_max}]")
        pos = _positive_candidates(x, video.frame_rate, t_max)
        neg = _negative_candidates(x, video.frame_rate, t_max)
        if not pos or not neg:
            reason = "no positive candidates" if not pos else "no negative candidates"
            skipped.append({"video_id": video.id, "anchor_frame": x, "reason": reason})
            continue
        xp = pos[int(g.integers(len(pos)))]
        xn = neg[int(g.integers(len(neg)))]
        triplets.append(Triplet(video.id, x, xp, xn))
    return triplets, skipped


@dataclass
class VideoFeatures:
    """One clip's metadata plus its per-frame pyramids, frame index order."""

    video: object  # dataset.Video-shaped: has id, frame_rate, num_frames
    pyramids: list[FeaturePyramid]

    def __post_init__(self):
        if len(self.pyramids) != self.video.num_frames:
            raise ValueError(
                f"video {self.video.id}: {len(self.pyramids)} pyramids for "
                f"{self.video.num_frames} frames"
            )


@dataclass(frozen=True)
class TrainConfig:
    n_pairs: int = 1000
    n_neg: int = 5
    top_k: int = 1
    lr: float = 0.001
    margin: float = 0.5
    steps: int = 2000
    hidden: tuple[int, int] = (32, 32)
    out_dim: int = 16

    def __post_init__(self):
        if self.n_pairs < 1 or self.n_neg < 1 or self.steps < 0:
            raise ValueError("n_pairs, n_neg must be >= 1 and steps >= 0")
        if not 1 <= self.top_k <= self.n_neg:
            raise ValueError(f"top_k must lie in [1, {self.n_neg}]")


def train_srn(
    clips: Sequence[VideoFeatures], config: TrainConfig, seed: int
) -> tuple[EncoderParams, list[dict]]:
    """Hard-negative-mined triplet training, bit-reproducible per seed.

    Builds ``n_pairs`` anchor/positive pairs spread over the clips, each with
    ``n_neg`` candidate negatives from the distant-frame range of the same
    video. Steps cycle through the pairs; every visit re-scores the pair's
    candidates under the current parameters, keeps the ``top_k`` hardest, and
    applies one Adam update on their mean gradient. Returns the trained
    parameters and a per-step trajectory log.
    """
    if len(clips) < 2:
        raise ValueError("need at least 2 videos")
    channels = {c.pyramids[0].channels for c in clips}
    if len(channels) != 1:
        raise ValueError(f"clips disagree on channel count: {sorted(channels)}")

    valid: list[tuple[int, int, list[int], list[int]]] = []
    for ci, clip in enumerate(clips):
        t_max = clip.video.num_frames - 1
        for x in range(t_max + 1):
            pos = _positive_candidates(x, clip.video.frame_rate, t_max)
            neg = _negative_candidates(x, clip.video.frame_rate, t_max)
            if pos and neg:
                valid.append((ci, x, pos, neg))
    if not valid:
        raise ValueError("no video offers frames with both near and distant company")

    g = rng.stream(seed, "train-srn")
    pairs = []
    for _ in range(config.n_pairs):
        ci, x, pos, neg = valid[int(g.integers(len(valid)))]
        xp = pos[int(g.integers(len(pos)))]
        negs = [neg[int(g.integers(len(neg)))] for _ in range(config.n_neg)]
        pairs.append((ci, x, xp, negs))

    params = init_encoder(
        channels.pop(), hidden=config.hidden, out_dim=config.out_dim,
        seed=rng.child_seed(seed, "encoder"),
    )
    opt = Adam(lr=config.lr)
    cfg = MclConfig(margin=config.margin)
    flat = params.flat()
    log: list[dict] = []
    for step in range(config.steps):
        ci, x, xp, negs = pairs[step % len(pairs)]
        pyr = clips[ci].pyramids
        scored = []
        for xn in negs:
            loss, grads = mcl_gradient(pyr[x], pyr[xp], pyr[xn], params, cfg)
            scored.append((loss, xn, grads))
        # hardest first; frame index breaks ties deterministically
        scored.sort(key=lambda item: (-item[0], item[1]))
        chosen = scored[: config.top_k]
        mean_grads = [np.zeros_like(p) for p in flat]
        for loss, _, grads in chosen:
            for acc, grad in zip(mean_grads, grads):
                acc += grad / len(chosen)
        opt.step(flat, mean_grads)
        log.append(
            {
                "step": step,
                "video_id": clips[ci].video.id,
                "anchor_frame": x,
                "positive_frame": xp,
                "negative_frame": chosen[0][1],
                "loss": float(chosen[0][0]),
            }
        )
    return params, log


def pyramid_distance(a: FeaturePyramid, b: FeaturePyramid, params: EncoderParams) -> float:
    """Mean over levels of the per-level distance."""
    return float(
        np.mean([distance(ak, bk, params) for ak, bk in zip(a.levels, b.levels)])
    )


def triplet_accuracy(
    clips: Sequence[VideoFeatures], triplets: Sequence[Triplet], params: EncoderParams
) -> float:
    """Fraction of triplets with the anchor closer to its positive frame."""
    if not triplets:
        raise ValueError("no triplets to score")
    by_id = {c.video.id: c for c in clips}
    hits = 0
    for t in triplets:
        pyr = by_id[t.video_id].pyramids
        d_pos = pyramid_distance(pyr[t.anchor_frame], pyr[t.positive_frame], params)
        d_neg = pyramid_distance(pyr[t.anchor_frame], pyr[t.negative_frame], params)
        hits += d_pos < d_neg
    return hits / len(triplets)


def _min_pre_activation(pyr: FeaturePyramid, params: EncoderParams) -> float:
    """Smallest |z| entering either ReLU over every location of a pyramid."""
    closest = np.inf
    for lvl in pyr.levels:
        _, (_, z1, _, z2, _) = _forward(_as_batch(lvl, params), params)
        closest = min(closest, float(np.abs(z1).min()), float(np.abs(z2).min()))
    return closest


def random_check_config(
    seed: int, margin_distance: float = 1e-3, kink_distance: float = 2e-3
) -> tuple[FeaturePyramid, FeaturePyramid, FeaturePyramid, EncoderParams, MclConfig]:
    """Small random triplet and params with the loss smooth around them.

    Resamples until each level's hinge term sits at least margin_distance
    from zero and every ReLU pre-activation at least kink_distance, so a
    finite-difference probe never straddles a non-smooth point. Levels are
    kept tiny to make that joint condition cheap to hit.
    """
    g = rng.stream(seed, "gradcheck-config")
    for attempt in range(200):
        channels = int(g.integers(4, 10))
        hidden = (int(g.integers(4, 10)), int(g.integers(4, 10)))
        out_dim = int(g.integers(3, 8))
        cfg = MclConfig(margin=float(g.uniform(0.1, 0.8)))
        params = init_encoder(
            channels, hidden, out_dim, seed=rng.child_seed(seed, "gradcheck-params", attempt)
        )
        # nonzero biases exercise every gradient path
        for b in params.biases:
            b += g.uniform(-0.3, 0.3, size=b.shape)
        pyramids = []
        for _ in range(3):
            sides = (2, 1, 1, 1)
            levels = [g.standard_normal((channels, s, s)) for s in sides]
            pyramids.append(FeaturePyramid(levels, strides=(4, 8, 16, 32)))
        x, xp, xn = pyramids
        if min(_min_pre_activation(p, params) for p in pyramids) < kink_distance:
            continue
        clear = True
        for xk, pk, nk in zip(x.levels, xp.levels, xn.levels):
            term = distance(xk, pk, params) - distance(xk, nk, params) + cfg.margin
            if abs(term) < margin_distance:
                clear = False
                break
        if clear:
            return x, xp, xn, params, cfg
    raise RuntimeError("could not find a configuration away from hinge boundaries")


def gradient_check(
    x: FeaturePyramid,
    xp: FeaturePyramid,
    xn: FeaturePyramid,
    params: EncoderParams,
    cfg: MclConfig,
    step: float = 1e-4,
) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Error is measured per parameter block: the largest entrywise difference
    divided by the larger of the two gradients' magnitudes (with a tiny
    floor), so dead entries with exact zeros on both sides compare clean.
    """
    _, analytic = mcl_gradient(x, xp, xn, params, cfg)
    worst = 0.0
    flat = params.flat()
    for block, ga in zip(flat, analytic):
        fd = np.zeros_like(block)
        it = np.nditer(block, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = block[idx]
            block[idx] = orig + step
            up = mcl_loss(x, xp, xn, params, cfg)
            block[idx] = orig - step
            down = mcl_loss(x, xp, xn, params, cfg)
            block[idx] = orig
            fd[idx] = (up - down) / (2.0 * step)
            it.iternext()
        scale = max(float(np.abs(ga).max(initial=0.0)), float(np.abs(fd).max(initial=0.0)), 1e-12)
        worst = max(worst, float(np.abs(ga - fd).max(initial=0.0)) / scale)
    return worst


def save_encoder(path, params: EncoderParams) -> None:
    """Six tensor records: weight then bias for each layer, 32-bit."""
    with open(path, "wb") as f:
        for w, b in zip(params.weights, params.biases):
            write_tensor_record(f, w)
            write_tensor_record(f, b)


def load_encoder(path) -> EncoderParams:
    weights, biases = [], []
    with open(path, "rb") as f:
        for _ in range(3):
            weights.append(read_tensor_record(f).astype(np.float64))
            biases.append(read_tensor_record(f).astype(np.float64))
    return EncoderParams(tuple(weights), tuple(biases))
