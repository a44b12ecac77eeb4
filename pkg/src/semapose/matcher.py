"""Transformer matching network between partial and full feature clouds.

Both sides are embedded (Fourier positional encoding of normalized point
coordinates combined with projected semantic features), fused through
blocks of shared self-attention and bidirectional cross-attention, and
compared by cosine similarity rescaled to [0, 1]. Two sigmoid heads
predict per-point inlier probabilities which gate the assignment matrix:

    A_hat[i, j] = sigma_p[i] * sigma_q[j] * A[i, j]

Training loss = mean BCE on both inlier heads + a focal loss on the gated
assignment over positive/negative ground-truth pairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, NonFiniteActivation, NonFiniteGradient
from .featurelift import FeatureCloud
from .geometry import _freeze


@dataclass(frozen=True)
class MatcherConfig:
    feature_dim: int
    model_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    pe_freqs: int = 6
    gamma: float = 2.0
    score_floor: float = 1e-6
    combine: str = "concat"  # keep geometry separate from semantics; "add" also supported

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise DimensionMismatch("model_dim must be divisible by num_heads")
        if self.num_blocks < 1 or self.pe_freqs < 1 or self.feature_dim < 1:
            raise DimensionMismatch("num_blocks, pe_freqs and feature_dim must be >= 1")
        if self.gamma < 0:
            raise DimensionMismatch("gamma must be >= 0")
        if not (0.0 < self.score_floor < 0.5):
            raise DimensionMismatch("score_floor must be in (0, 0.5)")
        if self.combine not in ("add", "concat"):
            raise DimensionMismatch("combine must be 'add' or 'concat'")

    def to_json(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "model_dim": self.model_dim,
            "num_blocks": self.num_blocks,
            "num_heads": self.num_heads,
            "pe_freqs": self.pe_freqs,
            "gamma": self.gamma,
            "score_floor": self.score_floor,
            "combine": self.combine,
        }

    @staticmethod
    def from_json(obj: dict) -> "MatcherConfig":
        return MatcherConfig(**obj)


@dataclass(frozen=True)
class CorrespondenceGT:
    """Ground-truth supervision: positive/negative pairs and inlier labels.

    sigma_p_gt[i] = 1 iff partial point i appears in a positive pair, and
    likewise for sigma_q_gt over full points.
    """

    a_pos: np.ndarray  # (P, 2) int pairs (i, j)
    a_neg: np.ndarray  # (G, 2) int pairs
    sigma_p_gt: np.ndarray  # (M,) in {0, 1}
    sigma_q_gt: np.ndarray  # (N,) in {0, 1}

    def __post_init__(self):
        pos = np.asarray(self.a_pos, dtype=np.int64).reshape(-1, 2)
        neg = np.asarray(self.a_neg, dtype=np.int64).reshape(-1, 2)
        sp = np.asarray(self.sigma_p_gt, dtype=np.float64)
        sq = np.asarray(self.sigma_q_gt, dtype=np.float64)
        n_full = len(sq)
        if len(pos) and len(neg):
            flat_pos = pos[:, 0] * n_full + pos[:, 1]
            flat_neg = neg[:, 0] * n_full + neg[:, 1]
            if np.intersect1d(flat_pos, flat_neg).size:
                raise DimensionMismatch("positive and negative pair sets overlap")
        want_p = np.zeros(len(sp))
        want_q = np.zeros(len(sq))
        if len(pos):
            want_p[np.unique(pos[:, 0])] = 1.0
            want_q[np.unique(pos[:, 1])] = 1.0
        if not np.array_equal(sp, want_p) or not np.array_equal(sq, want_q):
            raise DimensionMismatch("inlier labels inconsistent with the positive set")
        object.__setattr__(self, "a_pos", _freeze(pos))
        object.__setattr__(self, "a_neg", _freeze(neg))
        object.__setattr__(self, "sigma_p_gt", _freeze(sp))
        object.__setattr__(self, "sigma_q_gt", _freeze(sq))

    @staticmethod
    def from_pairs(a_pos, a_neg, n_partial: int, n_full: int) -> "CorrespondenceGT":
        pos = np.asarray(a_pos, dtype=np.int64).reshape(-1, 2)
        neg = np.asarray(a_neg, dtype=np.int64).reshape(-1, 2)
        sp = np.zeros(n_partial)
        sq = np.zeros(n_full)
        if len(pos):
            sp[np.unique(pos[:, 0])] = 1.0
            sq[np.unique(pos[:, 1])] = 1.0
        return CorrespondenceGT(pos, neg, sp, sq)


@dataclass(frozen=True)
class AssignmentOutput:
    """Raw and gated assignment matrices plus the fused features."""

    A: np.ndarray  # (M, N) in [0, 1]
    A_hat: np.ndarray  # (M, N) in [0, 1]
    sigma_p: np.ndarray  # (M,)
    sigma_q: np.ndarray  # (N,)
    fused_p: np.ndarray  # (M, d)
    fused_q: np.ndarray  # (N, d)

    def __post_init__(self):
        gate = self.sigma_p[:, None] * self.sigma_q[None, :] * self.A
        if self.A_hat.shape != gate.shape or not np.array_equal(self.A_hat, gate):
            raise DimensionMismatch("A_hat must equal sigma_p * sigma_q * A exactly")


class MatcherWeights:
    """Named parameter tensors for one matcher configuration."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def astype(self, dtype) -> "MatcherWeights":
        return MatcherWeights({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "MatcherWeights":
        return MatcherWeights({k: v.copy() for k, v in self.tensors.items()})

    @staticmethod
    def tensor_shapes(config: MatcherConfig) -> dict[str, tuple]:
        d = config.model_dim
        pe = 6 * config.pe_freqs
        shapes: dict[str, tuple] = {}
        if config.combine == "add":
            shapes["embed/positional/w"] = (pe, d)
            shapes["embed/positional/b"] = (d,)
            shapes["embed/semantic/w"] = (config.feature_dim, d)
            shapes["embed/semantic/b"] = (d,)
        else:
            shapes["embed/joint/w"] = (pe + config.feature_dim, d)
            shapes["embed/joint/b"] = (d,)
        for k in range(config.num_blocks):
            for kind in ("self", "cross"):
                for mat in ("wq", "wk", "wv", "wo"):
                    shapes[f"block{k}/{kind}/{mat}"] = (d, d)
            for ff in ("ff1", "ff2"):
                shapes[f"block{k}/{ff}/w1"] = (d, 2 * d)
                shapes[f"block{k}/{ff}/b1"] = (2 * d,)
                shapes[f"block{k}/{ff}/w2"] = (2 * d, d)
                shapes[f"block{k}/{ff}/b2"] = (d,)
            for ln in ("ln1", "ln2", "ln3", "ln4"):
                shapes[f"block{k}/{ln}/g"] = (d,)
                shapes[f"block{k}/{ln}/b"] = (d,)
        for side in ("partial", "full"):
            shapes[f"head/{side}/w"] = (d, 1)
            shapes[f"head/{side}/b"] = (1,)
        return shapes

    @staticmethod
    def initialize(config: MatcherConfig, seed: int = 0, dtype=np.float32) -> "MatcherWeights":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in sorted(MatcherWeights.tensor_shapes(config).items()):
            if name.endswith("/g"):
                tensors[name] = np.ones(shape, dtype=dtype)
            elif name.endswith("/b") or name.endswith("b1") or name.endswith("b2"):
                tensors[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in, fan_out = shape[0], shape[-1]
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        return MatcherWeights(tensors)


def positional_encode(points, freqs: int) -> np.ndarray:
    """Fourier features: per axis, per band b: sin(2^b pi p), cos(2^b pi p).

    Layout: axis-major blocks of 2*freqs columns -> (M, 6*freqs). Expects
    normalized coordinates in [-1, 1].
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionMismatch(f"points must be Mx3, got {pts.shape}")
    bands = (2.0 ** np.arange(freqs)) * np.pi
    ang = pts[:, :, None] * bands[None, None, :]  # (M, 3, F)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=3)  # (M, 3, F, 2)
    return enc.reshape(len(pts), 6 * freqs)


def _linear(x, w, b=None):
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


def _layer_norm(x, g, b, eps=1e-5):
    mu = ad.tmean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.tmean(ad.mul(xc, xc), axis=-1, keepdims=True)
    xn = ad.div(xc, ad.sqrt(ad.add(var, eps)))
    return ad.add(ad.mul(xn, g), b)


def _attention(x, y, p, prefix, heads):
    """Multi-head attention with queries from x, keys/values from y."""
    n, d = x.shape
    m = y.shape[0]
    dh = d // heads
    q = ad.matmul(x, p[f"{prefix}/wq"]).reshape((n, heads, dh)).swapaxes(0, 1)
    k = ad.matmul(y, p[f"{prefix}/wk"]).reshape((m, heads, dh)).swapaxes(0, 1)
    v = ad.matmul(y, p[f"{prefix}/wv"]).reshape((m, heads, dh)).swapaxes(0, 1)
    scores = ad.mul(ad.matmul(q, k.swapaxes(1, 2)), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v).swapaxes(0, 1).reshape((n, d))
    return ad.matmul(out, p[f"{prefix}/wo"])


def _feed_forward(x, p, prefix):
    h = ad.gelu(_linear(x, p[f"{prefix}/w1"], p[f"{prefix}/b1"]))
    return _linear(h, p[f"{prefix}/w2"], p[f"{prefix}/b2"])


def _embed(points, feats, p, config: MatcherConfig):
    pe = ad.Tensor(positional_encode(points, config.pe_freqs).astype(feats.dtype))
    sem = ad.Tensor(feats)
    if config.combine == "add":
        return ad.add(
            _linear(pe, p["embed/positional/w"], p["embed/positional/b"]),
            _linear(sem, p["embed/semantic/w"], p["embed/semantic/b"]),
        )
    joint = ad.concat([pe, sem], axis=1)
    return _linear(joint, p["embed/joint/w"], p["embed/joint/b"])


def embed_inputs(cloud: FeatureCloud, weights: MatcherWeights, config: MatcherConfig) -> np.ndarray:
    """Embed one normalized cloud to (M, model_dim); numpy output."""
    if cloud.dim != config.feature_dim:
        raise DimensionMismatch(
            f"cloud features have D={cloud.dim}, config expects {config.feature_dim}"
        )
    with ad.no_grad():
        p = {k: ad.Tensor(v) for k, v in weights.tensors.items()}
        dtype = p["head/partial/w"].data.dtype
        out = _embed(cloud.points, cloud.features.astype(dtype), p, config)
    return out.data


def _forward_graph(partial: FeatureCloud, full: FeatureCloud, p, config: MatcherConfig,
                   with_inlier: bool = True):
    """Shared forward computation; `p` maps names to ad.Tensors."""
    if partial.dim != config.feature_dim or full.dim != config.feature_dim:
        raise DimensionMismatch(
            f"feature dims ({partial.dim}, {full.dim}) do not match config "
            f"feature_dim={config.feature_dim}"
        )
    dtype = p["head/partial/w"].data.dtype
    xp = _embed(partial.points, partial.features.astype(dtype), p, config)
    xq = _embed(full.points, full.features.astype(dtype), p, config)

    for k in range(config.num_blocks):
        ln = lambda x, which: _layer_norm(x, p[f"block{k}/{which}/g"], p[f"block{k}/{which}/b"])
        xp = ln(ad.add(xp, _attention(xp, xp, p, f"block{k}/self", config.num_heads)), "ln1")
        xq = ln(ad.add(xq, _attention(xq, xq, p, f"block{k}/self", config.num_heads)), "ln1")
        xp = ln(ad.add(xp, _feed_forward(xp, p, f"block{k}/ff1")), "ln2")
        xq = ln(ad.add(xq, _feed_forward(xq, p, f"block{k}/ff1")), "ln2")
        xp_c = ln(ad.add(xp, _attention(xp, xq, p, f"block{k}/cross", config.num_heads)), "ln3")
        xq_c = ln(ad.add(xq, _attention(xq, xp, p, f"block{k}/cross", config.num_heads)), "ln3")
        xp = ln(ad.add(xp_c, _feed_forward(xp_c, p, f"block{k}/ff2")), "ln4")
        xq = ln(ad.add(xq_c, _feed_forward(xq_c, p, f"block{k}/ff2")), "ln4")

    cos = ad.matmul(ad.l2_normalize_rows(xp), ad.l2_normalize_rows(xq).swapaxes(0, 1))
    A = ad.mul(ad.add(cos, 1.0), 0.5)

    eps = config.score_floor
    if with_inlier:
        sp = ad.clip(ad.sigmoid(_linear(xp, p["head/partial/w"], p["head/partial/b"])), eps, 1.0 - eps)
        sq = ad.clip(ad.sigmoid(_linear(xq, p["head/full/w"], p["head/full/b"])), eps, 1.0 - eps)
    else:
        sp = ad.Tensor(np.ones((xp.shape[0], 1), dtype=dtype))
        sq = ad.Tensor(np.ones((xq.shape[0], 1), dtype=dtype))
    A_hat = ad.mul(ad.mul(sp, sq.swapaxes(0, 1)), A)
    return {"A": A, "A_hat": A_hat, "sigma_p": sp, "sigma_q": sq, "fused_p": xp, "fused_q": xq}


def forward(partial: FeatureCloud, full: FeatureCloud, weights: MatcherWeights,
            config: MatcherConfig, with_inlier: bool = True) -> AssignmentOutput:
    """Run the network; returns numpy AssignmentOutput (no graph kept)."""
    with ad.no_grad():
        p = {k: ad.Tensor(v) for k, v in weights.tensors.items()}
        out = _forward_graph(partial, full, p, config, with_inlier)
    arrays = {k: v.data for k, v in out.items()}
    for key in ("A_hat", "sigma_p", "sigma_q", "fused_p", "fused_q"):
        if not np.all(np.isfinite(arrays[key])):
            raise NonFiniteActivation(f"non-finite values in {key}")
    return AssignmentOutput(
        A=arrays["A"],
        A_hat=arrays["A_hat"],
        sigma_p=arrays["sigma_p"].reshape(-1),
        sigma_q=arrays["sigma_q"].reshape(-1),
        fused_p=arrays["fused_p"],
        fused_q=arrays["fused_q"],
    )


def gate_assignment(A, sigma_p, sigma_q) -> np.ndarray:
    """A_hat[i, j] = sigma_p[i] * sigma_q[j] * A[i, j]."""
    A = np.asarray(A)
    sp = np.asarray(sigma_p).reshape(-1, 1)
    sq = np.asarray(sigma_q).reshape(1, -1)
    return sp * sq * A


def _bce_graph(sigma, gt, eps: float):
    s = ad.clip(sigma, eps, 1.0 - eps)
    gt_t = ad.Tensor(np.asarray(gt, dtype=s.data.dtype).reshape(s.shape))
    ll = ad.add(
        ad.mul(gt_t, ad.log(s)),
        ad.mul(ad.sub(1.0, gt_t), ad.log(ad.sub(1.0, s))),
    )
    return ad.mul(ad.tmean(ll), -1.0)


def inlier_bce_loss(sigma, sigma_gt, eps: float = 1e-6) -> float:
    """Mean binary cross-entropy with natural log, inputs clamped to [eps, 1-eps]."""
    with ad.no_grad():
        return float(_bce_graph(ad.Tensor(np.asarray(sigma, dtype=np.float64)), sigma_gt, eps).data)


def _focal_graph(a_hat, gt: CorrespondenceGT, gamma: float, eps: float):
    clamped = ad.clip(a_hat, eps, 1.0 - eps)
    terms = []
    if len(gt.a_pos):
        pos = ad.gather_pairs(clamped, gt.a_pos[:, 0], gt.a_pos[:, 1])
        w = ad.power(ad.sub(1.0, pos), gamma)
        terms.append(ad.mul(ad.tmean(ad.mul(w, ad.log(pos))), -1.0))
    else:
        warnings.warn("focal loss: empty positive set contributes 0", RuntimeWarning)
    if len(gt.a_neg):
        neg = ad.gather_pairs(clamped, gt.a_neg[:, 0], gt.a_neg[:, 1])
        w = ad.power(neg, gamma)
        terms.append(ad.mul(ad.tmean(ad.mul(w, ad.log(ad.sub(1.0, neg)))), -1.0))
    else:
        warnings.warn("focal loss: empty negative set contributes 0", RuntimeWarning)
    if not terms:
        return ad.Tensor(np.zeros((), dtype=a_hat.data.dtype))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def focal_assignment_loss(a_hat, gt: CorrespondenceGT, gamma: float = 2.0,
                          eps: float = 1e-6) -> float:
    """Focal loss over positive and negative assignment entries (natural log).

    mean over positives of (1-a)^gamma * (-ln a)
    + mean over negatives of a^gamma * (-ln(1-a)).
    """
    with ad.no_grad():
        return float(_focal_graph(ad.Tensor(np.asarray(a_hat, dtype=np.float64)), gt, gamma, eps).data)


def _total_loss_graph(out, gt: CorrespondenceGT, config: MatcherConfig, with_inlier: bool = True):
    eps = config.score_floor
    focal = _focal_graph(out["A_hat"], gt, config.gamma, eps)
    if not with_inlier:
        zero = ad.Tensor(np.zeros((), dtype=focal.data.dtype))
        return {"L_P": zero, "L_Q": zero, "L_focal": focal, "total": focal}
    lp = _bce_graph(out["sigma_p"], gt.sigma_p_gt, eps)
    lq = _bce_graph(out["sigma_q"], gt.sigma_q_gt, eps)
    total = ad.add(ad.add(lp, lq), focal)
    return {"L_P": lp, "L_Q": lq, "L_focal": focal, "total": total}


def total_loss(output: AssignmentOutput, gt: CorrespondenceGT, config: MatcherConfig,
               with_inlier: bool = True) -> float:
    """L_P + L_Q + L_focal evaluated on a numpy AssignmentOutput."""
    out = {
        "A_hat": ad.Tensor(output.A_hat.astype(np.float64)),
        "sigma_p": ad.Tensor(output.sigma_p.reshape(-1, 1).astype(np.float64)),
        "sigma_q": ad.Tensor(output.sigma_q.reshape(-1, 1).astype(np.float64)),
    }
    with ad.no_grad():
        return float(_total_loss_graph(out, gt, config, with_inlier)["total"].data)


def loss_and_gradients(partial: FeatureCloud, full: FeatureCloud, gt: CorrespondenceGT,
                       weights: MatcherWeights, config: MatcherConfig,
                       with_inlier: bool = True):
    """Loss components plus reverse-mode gradients for every parameter tensor."""
    p = {k: ad.Tensor(v, requires_grad=True) for k, v in weights.tensors.items()}
    out = _forward_graph(partial, full, p, config, with_inlier)
    losses = _total_loss_graph(out, gt, config, with_inlier)
    total = losses["total"]
    if not np.isfinite(total.data):
        raise NonFiniteGradient("loss is non-finite before backward")
    total.backward()
    grads = {}
    for name, tensor in p.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        grads[name] = g
    components = {k: float(v.data) for k, v in losses.items()}
    return components, grads


def param_gradients(partial: FeatureCloud, full: FeatureCloud, gt: CorrespondenceGT,
                    weights: MatcherWeights, config: MatcherConfig,
                    with_inlier: bool = True) -> dict[str, np.ndarray]:
    """Gradient tensors of the total loss, keyed like MatcherWeights."""
    _, grads = loss_and_gradients(partial, full, gt, weights, config, with_inlier)
    return grads
