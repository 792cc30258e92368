"""Compact dual-head transformer with hand-written reverse-mode gradients.

Parameters live in a flat ``dict[str, ndarray]``. Every function here also
accepts parameter/input stacks with extra leading axes (one slice per
independent run), which is how the sweep advances many subjects in lockstep.
"""

from __future__ import annotations

import importlib.util
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .exceptions import ContractViolation, NumericFailure, TrainingFailure

LN_EPS = 1e-5

# compiled batch kernel when numba is available, numpy otherwise
_HAVE_KERNELS = importlib.util.find_spec("numba") is not None
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    masked: frozenset

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ContractViolation(f"mask ratio {self.ratio} outside [0, 1]")
        object.__setattr__(self, "masked", frozenset(int(i) for i in self.masked))

    @staticmethod
    def count(S: int, ratio: float) -> int:
        return int(math.floor(ratio * S + 0.5))

    @classmethod
    def random(cls, S: int, ratio: float, rng: np.random.Generator) -> "MaskSpec":
        n = cls.count(S, ratio)
        return cls(ratio, frozenset(rng.choice(S, size=n, replace=False).tolist()))

    def to_bool(self, S: int) -> np.ndarray:
        out = np.zeros(S, dtype=bool)
        if self.masked:
            idx = np.fromiter(self.masked, dtype=int)
            if idx.min() < 0 or idx.max() >= S:
                raise ContractViolation(f"mask index outside 0..{S - 1}")
            out[idx] = True
        return out


@dataclass(frozen=True)
class ShrinkageParams:
    a: float = 10.0
    c: float = 0.2

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.c) and self.a > 0 and self.c > 0):
            raise ContractViolation("shrinkage a and c must be finite and > 0")


@dataclass(frozen=True)
class LossWeights:
    lambda_pred: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda_pred) and self.lambda_pred >= 0):
            raise ContractViolation("lambda_pred must be finite and >= 0")


def random_masks(rng: np.random.Generator, n_items: int, S: int, ratio: float) -> np.ndarray:
    """Boolean ``(n_items, S)`` array, each row a uniform subset of round(ratio*S) tokens."""
    n = MaskSpec.count(S, ratio)
    # rank of each token in a random order; the first n ranks are masked
    ranks = rng.random((n_items, S)).argsort(axis=1).argsort(axis=1)
    return ranks < n


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(d: int = 16, h: int = 32, S: int = 16, E: int = 2, rng=None) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm scales."""
    rng = np.random.default_rng(rng)

    def w(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    p = {
        "embed.w": w(d, h),
        "embed.b": np.zeros(h),
        "pos": rng.uniform(-1.0 / math.sqrt(h), 1.0 / math.sqrt(h), size=(S, h)),
        "mask_token": np.zeros(h),
    }
    for i in range(E):
        pre = f"blocks.{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = w(h, h)
        p[pre + "mlp.w1"] = w(h, 4 * h)
        p[pre + "mlp.b1"] = np.zeros(4 * h)
        p[pre + "mlp.w2"] = w(4 * h, h)
        p[pre + "mlp.b2"] = np.zeros(h)
        for norm in ("norm1", "norm2"):
            p[pre + norm + ".gamma"] = np.ones(h)
            p[pre + norm + ".beta"] = np.zeros(h)
    for head, out in (("decoder", d), ("regressor", 2)):
        p[head + ".w1"] = w(h, h)
        p[head + ".b1"] = np.zeros(h)
        p[head + ".w2"] = w(h, out)
        p[head + ".b2"] = np.zeros(out)
    return p


def geometry(params: dict) -> dict:
    """Infer (d, h, S, E) from parameter shapes; tolerates leading run axes."""
    d, h = params["embed.w"].shape[-2:]
    S = params["pos"].shape[-2]
    E = sum(1 for k in params if k.startswith("blocks.") and k.endswith(".wq"))
    return {"d": int(d), "h": int(h), "S": int(S), "E": E}


def validate_params(params: dict) -> None:
    g = geometry(params)
    ref = init_params(g["d"], g["h"], g["S"], g["E"], rng=0)
    if set(ref) != set(params):
        raise ContractViolation(f"parameter names differ from a (d,h,S,E)={tuple(g.values())} model")
    lead = params["embed.w"].shape[:-2]
    for k, v in ref.items():
        if params[k].shape != lead + v.shape:
            raise ContractViolation(f"{k}: shape {params[k].shape}, expected {lead + v.shape}")
        if not np.all(np.isfinite(params[k])):
            raise ContractViolation(f"{k} has non-finite entries")


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def stack_params(many) -> dict:
    many = list(many)
    return {k: np.stack([p[k] for p in many]) for k in many[0]}


def unstack_params(params: dict, i: int) -> dict:
    return {k: v[i].copy() for k, v in params.items()}


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """Plain SGD: returns a new parameter dict ``p - lr * g``."""
    if not lr > 0:
        raise ContractViolation("learning rate must be > 0")
    _check_congruent(params, grads)
    return {k: params[k] - lr * grads[k] for k in params}


def _check_congruent(params, grads):
    if params.keys() != grads.keys():
        raise ContractViolation("gradient bundle names do not match parameters")
    for k, v in params.items():
        if grads[k].shape != v.shape:
            raise ContractViolation(f"{k}: gradient shape {grads[k].shape} != parameter shape {v.shape}")


def _sgd_inplace(params, grads, lr):
    for k, g in grads.items():
        params[k] -= lr * g


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _row(b):
    return b[..., None, :]


def _T(x):
    return x.swapaxes(-1, -2)


def _gelu(u):
    cdf = ndtr(u)
    return u * cdf, cdf


def _gelu_grad(u, cdf):
    return cdf + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI


def _ln(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * _row(gamma) + _row(beta), (xh, inv)


def _ln_back(dy, gamma, cache):
    xh, inv = cache
    dxh = dy * _row(gamma)
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, (dy * xh).sum(axis=-2), dy.sum(axis=-2)


def _encode(params, tokens, mask):
    """Run the embedder and encoder blocks.

    tokens: (..., M, S, d); mask: (..., M, S) bool or None.
    Returns the flat (..., M*S, h) encoder output and a cache for backward.
    """
    lead_m = tokens.shape[:-2]
    S, d = tokens.shape[-2:]
    h = params["embed.w"].shape[-1]
    x_in = tokens.reshape(tokens.shape[:-3] + (-1, d))
    e = (x_in @ params["embed.w"] + _row(params["embed.b"])).reshape(lead_m + (S, h))
    if mask is not None:
        mt = params["mask_token"][..., None, None, :]
        e = np.where(mask[..., None], mt, e)
    x = (e + params["pos"][..., None, :, :]).reshape(x_in.shape[:-1] + (h,))
    scale = 1.0 / math.sqrt(h)
    blocks = []
    i = 0
    while f"blocks.{i}.wq" in params:
        pre = f"blocks.{i}."
        a, ln1 = _ln(x, params[pre + "norm1.gamma"], params[pre + "norm1.beta"])
        q = (a @ params[pre + "wq"]).reshape(lead_m + (S, h))
        k = (a @ params[pre + "wk"]).reshape(lead_m + (S, h))
        v = (a @ params[pre + "wv"]).reshape(lead_m + (S, h))
        sc = (q @ _T(k)) * scale
        sc -= sc.max(axis=-1, keepdims=True)
        P = np.exp(sc)
        P /= P.sum(axis=-1, keepdims=True)
        o = (P @ v).reshape(x.shape)
        x1 = x + o @ params[pre + "wo"]
        c, ln2 = _ln(x1, params[pre + "norm2.gamma"], params[pre + "norm2.beta"])
        u = c @ params[pre + "mlp.w1"] + _row(params[pre + "mlp.b1"])
        g, cdf = _gelu(u)
        x = x1 + g @ params[pre + "mlp.w2"] + _row(params[pre + "mlp.b2"])
        blocks.append((a, ln1, q, k, v, P, o, c, ln2, u, g, cdf))
        i += 1
    return x, (x_in, mask, blocks, lead_m, S)


def _encode_back(params, dx, cache, grads):
    x_in, mask, blocks, lead_m, S = cache
    h = dx.shape[-1]
    scale = 1.0 / math.sqrt(h)
    for i in reversed(range(len(blocks))):
        pre = f"blocks.{i}."
        a, ln1, q, k, v, P, o, c, ln2, u, g, cdf = blocks[i]
        grads[pre + "mlp.w2"] = _T(g) @ dx
        grads[pre + "mlp.b2"] = dx.sum(axis=-2)
        du = (dx @ _T(params[pre + "mlp.w2"])) * _gelu_grad(u, cdf)
        grads[pre + "mlp.w1"] = _T(c) @ du
        grads[pre + "mlp.b1"] = du.sum(axis=-2)
        dc = du @ _T(params[pre + "mlp.w1"])
        dln, grads[pre + "norm2.gamma"], grads[pre + "norm2.beta"] = _ln_back(dc, params[pre + "norm2.gamma"], ln2)
        dx1 = dx + dln
        grads[pre + "wo"] = _T(o) @ dx1
        do = (dx1 @ _T(params[pre + "wo"])).reshape(lead_m + (S, h))
        dP = do @ _T(v)
        dv = _T(P) @ do
        dsc = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dq = (dsc @ k).reshape(dx.shape)
        dk = (_T(dsc) @ q).reshape(dx.shape)
        dv = dv.reshape(dx.shape)
        grads[pre + "wq"] = _T(a) @ dq
        grads[pre + "wk"] = _T(a) @ dk
        grads[pre + "wv"] = _T(a) @ dv
        da = dq @ _T(params[pre + "wq"]) + dk @ _T(params[pre + "wk"]) + dv @ _T(params[pre + "wv"])
        dln, grads[pre + "norm1.gamma"], grads[pre + "norm1.beta"] = _ln_back(da, params[pre + "norm1.gamma"], ln1)
        dx = dx1 + dln
    dz = dx.reshape(lead_m + (S, h))
    grads["pos"] = dz.sum(axis=-3)
    if mask is not None:
        m = mask[..., None]
        grads["mask_token"] = np.where(m, dz, 0.0).sum(axis=(-3, -2))
        de = np.where(m, 0.0, dz).reshape(dx.shape)
    else:
        grads["mask_token"] = np.zeros(dx.shape[:-2] + (h,))
        de = dx
    grads["embed.w"] = _T(x_in) @ de
    grads["embed.b"] = de.sum(axis=-2)


def _mlp_head(params, head, x):
    u = x @ params[head + ".w1"] + _row(params[head + ".b1"])
    g, cdf = _gelu(u)
    return g @ params[head + ".w2"] + _row(params[head + ".b2"]), (x, u, g, cdf)


def _mlp_head_back(params, head, dy, cache, grads):
    x, u, g, cdf = cache
    grads[head + ".w2"] = _T(g) @ dy
    grads[head + ".b2"] = dy.sum(axis=-2)
    du = (dy @ _T(params[head + ".w2"])) * _gelu_grad(u, cdf)
    grads[head + ".w1"] = _T(x) @ du
    grads[head + ".b1"] = du.sum(axis=-2)
    return du @ _T(params[head + ".w1"])


def _check_tokens(params, tokens):
    g = geometry(params)
    if tokens.shape[-2:] != (g["S"], g["d"]):
        raise ContractViolation(f"tokens shaped {tokens.shape[-2:]}, model expects (S, d)=({g['S']}, {g['d']})")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def forward_recon(params: dict, tokens: np.ndarray, mask) -> np.ndarray:
    """Reconstruct an ``(S, d)`` token matrix (or a stack of them) from its masked version."""
    tokens = np.asarray(tokens, dtype=np.float64)
    _check_tokens(params, tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    S = tokens.shape[-2]
    if isinstance(mask, MaskSpec):
        mask = mask.to_bool(S)
    mask = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), tokens.shape[:-1])
    x, _ = _encode(params, tokens, mask)
    r, _ = _mlp_head(params, "decoder", x)
    r = r.reshape(tokens.shape)
    return r[0] if single else r


def forward_predict(params: dict, tokens: np.ndarray) -> np.ndarray:
    """Normalized (sbp, dbp) from unmasked tokens; ``(S, d) -> (2,)``, ``(..., M, S, d) -> (..., M, 2)``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    _check_tokens(params, tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    x, _ = _encode(params, tokens, None)
    pooled = x.reshape(tokens.shape[:-1] + (x.shape[-1],)).mean(axis=-2)
    y, _ = _mlp_head(params, "regressor", pooled)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def masked_mse(recon, target, mask) -> float:
    """Mean squared error over the entries of masked tokens only."""
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ContractViolation("recon and target shapes differ")
    m = mask.to_bool(recon.shape[-2]) if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ContractViolation("masked_mse needs at least one masked token")
    sq = ((recon - target) ** 2)[m]
    return float(sq.mean())


def shrinkage_terms(residual, sp: ShrinkageParams):
    l = np.abs(residual)
    return l * l * expit(sp.a * (l - sp.c))


def shrinkage(pred, target, sp: ShrinkageParams = ShrinkageParams()) -> float:
    """Mean over outputs of ``l**2 / (1 + exp(a * (c - l)))`` with ``l = |pred - target|``."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(shrinkage_terms(r, sp).mean())


def combined_loss(recon_loss: float, pred_loss: float, w: LossWeights = LossWeights()) -> float:
    if not (math.isfinite(recon_loss) and math.isfinite(pred_loss)):
        raise ContractViolation("combined_loss needs finite inputs")
    return recon_loss + w.lambda_pred * pred_loss


def batch_loss(params, tokens, masks, labels, labeled, w=LossWeights(), sp=ShrinkageParams(), recon_weight=1.0):
    """Forward-only batch loss, composed from the public forward passes.

    Same objective and argument conventions as :func:`loss_and_grads`, but no
    backward pass; this is what finite-difference checks differentiate.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=bool)
    item = np.zeros(tokens.shape[:-2])
    if recon_weight != 0.0:
        m = np.asarray(masks, dtype=bool)
        sq = (forward_recon(params, tokens, m) - tokens) ** 2
        item += recon_weight * (sq * m[..., None]).sum(axis=(-1, -2)) / (m.sum(axis=-1) * tokens.shape[-1])
    if labeled.any() and w.lambda_pred != 0.0:
        res = forward_predict(params, tokens[..., labeled, :, :]) - np.asarray(labels)[..., labeled, :]
        item[..., labeled] += w.lambda_pred * shrinkage_terms(res, sp).mean(axis=-1)
    return item.mean(axis=-1)


def loss_and_grads_reference(params, tokens, masks, labels, labeled, w=LossWeights(), sp=ShrinkageParams(),
                             recon_weight=1.0):
    """Batch loss and exact gradients (plain numpy).

    tokens (..., B, S, d); masks (..., B, S) bool; labels (..., B, 2) normalized
    (ignored where not labeled); labeled (B,) bool shared across leading axes.
    Loss per run = mean_i [recon_weight * masked_mse_i + lambda * shrinkage_i * labeled_i].
    Returns (loss with the leading shape, grads dict).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=bool)
    B, S, d = tokens.shape[-3:]
    lead = tokens.shape[:-3]
    use_recon = recon_weight != 0.0
    use_pred = bool(labeled.any()) and w.lambda_pred != 0.0
    if not (use_recon or use_pred):
        raise ContractViolation("batch has nothing to learn from")

    # one encoder pass: recon items (masked), then the labeled items again unmasked
    parts, part_masks = [], []
    if use_recon:
        masks = np.asarray(masks, dtype=bool)
        n_masked = masks.sum(axis=-1)
        if np.any(n_masked == 0):
            raise ContractViolation("every reconstruction item needs a nonempty mask")
        parts.append(tokens)
        part_masks.append(masks)
    if use_pred:
        pred_tokens = tokens[..., labeled, :, :]
        parts.append(pred_tokens)
        part_masks.append(np.zeros(pred_tokens.shape[:-1], dtype=bool))
    x_all = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-3)
    m_all = part_masks[0] if len(part_masks) == 1 else np.concatenate(part_masks, axis=-2)
    xE, enc_cache = _encode(params, x_all, m_all if use_recon else None)
    h = xE.shape[-1]
    dxE = np.zeros_like(xE)
    item_loss = np.zeros(lead + (B,))
    grads = {}
    n_rec_rows = B * S if use_recon else 0

    if use_recon:
        r, dec_cache = _mlp_head(params, "decoder", xE[..., :n_rec_rows, :])
        diff = r.reshape(tokens.shape) - tokens
        denom = (n_masked * d).astype(np.float64)
        diff = np.where(masks[..., None], diff, 0.0)
        item_loss += recon_weight * (diff * diff).sum(axis=(-1, -2)) / denom
        dr = (2.0 * recon_weight / B) * diff / denom[..., None, None]
        dxE[..., :n_rec_rows, :] = _mlp_head_back(params, "decoder", dr.reshape(r.shape), dec_cache, grads)
    else:
        for k in ("w1", "b1", "w2", "b2"):
            grads["decoder." + k] = np.zeros(params["decoder." + k].shape)

    if use_pred:
        P = int(labeled.sum())
        pooled = xE[..., n_rec_rows:, :].reshape(lead + (P, S, h)).mean(axis=-2)
        y, reg_cache = _mlp_head(params, "regressor", pooled)
        res = y - np.asarray(labels, dtype=np.float64)[..., labeled, :]
        l = np.abs(res)
        sig = expit(sp.a * (l - sp.c))
        item_loss[..., labeled] += w.lambda_pred * (l * l * sig).mean(axis=-1)
        dy = (w.lambda_pred / B) * 0.5 * (2.0 * res * sig + sp.a * res * l * sig * (1.0 - sig))
        dpooled = _mlp_head_back(params, "regressor", dy, reg_cache, grads)
        dxE[..., n_rec_rows:, :] = np.repeat(dpooled / S, S, axis=-2)
    else:
        for k in ("w1", "b1", "w2", "b2"):
            grads["regressor." + k] = np.zeros(params["regressor." + k].shape)

    bad = ~np.isfinite(item_loss)
    if bad.any():
        where = np.argwhere(bad)[0]
        raise NumericFailure(f"non-finite loss at batch item {int(where[-1])}", item=int(where[-1]))
    _encode_back(params, dxE, enc_cache, grads)
    return item_loss.mean(axis=-1), grads


_BLOCK_KEYS = ("wq", "wk", "wv", "wo", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
               "norm1.gamma", "norm1.beta", "norm2.gamma", "norm2.beta")
_EMBED_KEYS = ("embed.w", "embed.b", "pos", "mask_token")
_HEAD_KEYS = ("decoder.w1", "decoder.b1", "decoder.w2", "decoder.b2",
              "regressor.w1", "regressor.b1", "regressor.w2", "regressor.b2")


def _fused_loss_and_grads(params, tokens, masks, labels, labeled, w, sp, recon_weight):
    from . import _kernels

    single = tokens.ndim == 3
    if single:
        params = {k: v[None] for k, v in params.items()}
        tokens = tokens[None]
        masks = None if masks is None else np.asarray(masks)[None]
        labels = np.asarray(labels)[None]
    R, B, S, _ = tokens.shape
    E = geometry(params)["E"]
    blocks = [np.ascontiguousarray(np.stack([params[f"blocks.{b}.{n}"] for b in range(E)], axis=1))
              for n in _BLOCK_KEYS]
    flat = [np.ascontiguousarray(params[n], dtype=np.float64) for n in _EMBED_KEYS + _HEAD_KEYS]
    args = flat[:4] + blocks + flat[4:]
    gbuf = [np.zeros(x.shape) for x in args]
    masks = np.zeros((R, B, S), dtype=bool) if masks is None else np.ascontiguousarray(masks, dtype=bool)
    item_loss = np.zeros((R, B))
    _kernels.batch_loss_grads(
        np.ascontiguousarray(tokens, dtype=np.float64), masks,
        np.ascontiguousarray(np.broadcast_to(labels, (R, B, 2)), dtype=np.float64),
        np.ascontiguousarray(labeled, dtype=np.bool_), float(recon_weight), float(w.lambda_pred),
        float(sp.a), float(sp.c), *args, *gbuf, item_loss,
    )
    grads = dict(zip(_EMBED_KEYS, gbuf[:4]))
    for n, g in zip(_BLOCK_KEYS, gbuf[4:4 + len(_BLOCK_KEYS)]):
        for b in range(E):
            grads[f"blocks.{b}.{n}"] = g[:, b]
    grads.update(zip(_HEAD_KEYS, gbuf[4 + len(_BLOCK_KEYS):]))
    if single:
        grads = {k: v[0] for k, v in grads.items()}
        item_loss = item_loss[0]
    return item_loss, grads


def loss_and_grads(params, tokens, masks, labels, labeled, w=LossWeights(), sp=ShrinkageParams(),
                   recon_weight=1.0):
    """Batch loss and exact gradients.

    Same contract as :func:`loss_and_grads_reference`; runs the compiled
    batch kernel for inputs with zero or one leading run axis.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=bool)
    if labeled.ndim > 1:
        flat_lab = labeled.reshape(-1, labeled.shape[-1])
        if (flat_lab == flat_lab[0]).all():
            labeled = flat_lab[0]
    if tokens.ndim not in (3, 4) or labeled.ndim != 1 or not _HAVE_KERNELS:
        return loss_and_grads_reference(params, tokens, masks, labels, labeled, w, sp, recon_weight)
    use_recon = recon_weight != 0.0
    use_pred = bool(labeled.any()) and w.lambda_pred != 0.0
    if not (use_recon or use_pred):
        raise ContractViolation("batch has nothing to learn from")
    if use_recon:
        n_masked = np.asarray(masks, dtype=bool).sum(axis=-1)
        if np.any(n_masked == 0):
            raise ContractViolation("every reconstruction item needs a nonempty mask")
    else:
        masks = None
    item_loss, grads = _fused_loss_and_grads(params, tokens, masks, labels, labeled, w, sp, recon_weight)
    bad = ~np.isfinite(item_loss)
    if bad.any():
        where = np.argwhere(bad)[0]
        raise NumericFailure(f"non-finite loss at batch item {int(where[-1])}", item=int(where[-1]))
    return item_loss.mean(axis=-1), grads


def backward(params, batch, w: LossWeights = LossWeights(), sp: ShrinkageParams = ShrinkageParams()):
    """Gradients of the mean per-item loss for a list of ``(tokens, label_or_None, MaskSpec)``.

    Unlabeled items contribute masked MSE; labeled ones add ``lambda * shrinkage``
    (labels on the normalized scale).
    """
    if not batch:
        raise ContractViolation("empty batch")
    tokens = np.stack([np.asarray(t, dtype=np.float64) for t, _, _ in batch])
    _check_tokens(params, tokens)
    S = tokens.shape[-2]
    masks = np.stack([m.to_bool(S) for _, _, m in batch])
    labeled = np.array([lab is not None for _, lab, _ in batch])
    labels = np.zeros((len(batch), 2))
    for i, (_, lab, _) in enumerate(batch):
        if lab is not None:
            labels[i] = lab
    loss, grads = loss_and_grads(params, tokens, masks, labels, labeled, w, sp)
    return grads, float(loss)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def source_arrays(streams, stats, d):
    """Normalized token stack and label matrix for all labeled source events."""
    from .signals import apply_norm, normalize_labels, tokenize

    segs, labs = [], []
    for s in streams:
        for ev in s.events:
            if ev.label is None:
                raise ContractViolation(f"source event {s.subject_id}/{ev.index} is unlabeled")
            segs.append(tokenize(apply_norm(ev.segment, stats), d))
            labs.append([ev.label.sbp, ev.label.dbp])
    return np.stack(segs), normalize_labels(np.array(labs), stats)


def pretrain(params, source, stats, epochs=100, batch_size=32, lr_ssl=1e-2, lr_sl=1e-2, mask_ratio=0.5,
             rng=None, sp=ShrinkageParams(), callback=None):
    """Sequential SSL-then-SL SGD over a labeled source population.

    For every minibatch: one step on masked MSE at ``lr_ssl``, then one step on
    the shrinkage loss (unmasked input) at ``lr_sl``.
    """
    rng = np.random.default_rng(rng)
    params = copy_params(params)
    d, S = geometry(params)["d"], geometry(params)["S"]
    X, Y = source_arrays(source, stats, d)
    n = X.shape[0]
    if n == 0:
        raise ContractViolation("no source events")
    all_labeled = np.ones(min(batch_size, n), dtype=bool)
    w_sl = LossWeights(1.0)
    for epoch in range(epochs):
        order = rng.permutation(n)
        ssl_total = sl_total = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            xb, yb = X[idx], Y[idx]
            masks = random_masks(rng, len(idx), S, mask_ratio)
            try:
                loss_ssl, g = loss_and_grads(params, xb, masks, yb, np.zeros(len(idx), dtype=bool), w_sl, sp)
                _sgd_inplace(params, g, lr_ssl)
                loss_sl, g = loss_and_grads(params, xb, None, yb, all_labeled[:len(idx)], w_sl, sp, recon_weight=0.0)
                _sgd_inplace(params, g, lr_sl)
            except NumericFailure as exc:
                raise TrainingFailure(f"pretraining diverged at epoch {epoch}, batch {b}", epoch, b) from exc
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingFailure(f"non-finite parameters at epoch {epoch}, batch {b}", epoch, b)
            ssl_total += float(loss_ssl)
            sl_total += float(loss_sl)
            n_batches += 1
        if callback is not None:
            callback(epoch, ssl_total / n_batches, sl_total / n_batches, params)
    return params
