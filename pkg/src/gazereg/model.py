"""Gaze-regularized global-query attention classifier.

Each frame is cut into ``patch_px`` squares (row-major) and embedded
linearly. One query, built from the mean of every token in the observed
sequence, attends over the patches of each frame; the per-frame contexts
are averaged and read out by a linear head. Training minimizes

    cross_entropy + lam * sum_t KL(A_t || target_t)

with plain gradient descent. Gradients are derived by hand and checked
against central differences in the test suite.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import DimensionError, DivergenceError, DomainError, FormatError, GeometryError, LengthError
from .numerics import DTYPE, RngState, softmax_rows

CHECKPOINT_MAGIC = b"GZRM"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("patch_embed", "b_embed", "W_Q", "b_Q", "W_K", "b_K", "W_V", "b_V", "head", "b_head")
TASKS = ("understand", "predict")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_k: int = 32
    patch_px: int = 8
    n_classes: int = 6
    lam: float = 100.0
    lr: float = 0.01
    epochs: int = 60
    batch: int = 20
    seed: int = 0
    kl_floor: float = 1e-8
    channels: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("lambda must be nonnegative")
        if not self.lr > 0:
            raise DomainError("learning rate must be positive")
        if self.batch < 1:
            raise DomainError("batch size must be positive")
        if not 0 < self.kl_floor < 1:
            raise DomainError("kl_floor must lie in (0, 1)")

    @property
    def token_dim(self):
        return self.patch_px * self.patch_px * self.channels

    def param_shapes(self):
        dm, dk, c = self.d_model, self.d_k, self.n_classes
        return {
            "patch_embed": (self.token_dim, dm),
            "b_embed": (dm,),
            "W_Q": (dm, dk),
            "b_Q": (dk,),
            "W_K": (dm, dk),
            "b_K": (dk,),
            "W_V": (dm, dm),
            "b_V": (dm,),
            "head": (dm, c),
            "b_head": (c,),
        }

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class ModelParams:
    patch_embed: np.ndarray
    b_embed: np.ndarray
    W_Q: np.ndarray
    b_Q: np.ndarray
    W_K: np.ndarray
    b_K: np.ndarray
    W_V: np.ndarray
    b_V: np.ndarray
    head: np.ndarray
    b_head: np.ndarray

    @classmethod
    def init(cls, cfg, rng=None):
        """Gaussian weights scaled by ``1/sqrt(fan_in)``, zero biases."""
        rng = rng or RngState(cfg.seed)
        gen = rng.stream("init")
        arrays = {}
        for name, shape in cfg.param_shapes().items():
            if len(shape) == 2:
                arrays[name] = gen.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            else:
                arrays[name] = np.zeros(shape, dtype=DTYPE)
        return cls(**arrays)

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def flatten(self):
        return np.concatenate([a.ravel() for _, a in self.items()])

    @classmethod
    def unflatten(cls, vec, cfg):
        out, pos = {}, 0
        for name, shape in cfg.param_shapes().items():
            n = int(np.prod(shape))
            out[name] = np.array(vec[pos : pos + n], dtype=DTYPE).reshape(shape)
            pos += n
        if pos != len(vec):
            raise DimensionError(f"parameter vector has {len(vec)} entries, expected {pos}")
        return cls(**out)

    def copy(self):
        return ModelParams(**{n: a.copy() for n, a in self.items()})

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.items())


@dataclass
class AttentionRecord:
    """Per-frame attention rows ``A`` (T x P) and contexts (T x d_model)."""

    attention: np.ndarray
    context: np.ndarray


@dataclass
class Batch:
    """Frames ``(B, T, H, W)``, patch targets ``(B, T, P)`` and labels ``(B,)``."""

    frames: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    task: str = "understand"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=DTYPE)
        self.targets = np.asarray(self.targets, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.frames.ndim == 3:
            self.frames = self.frames[None]
            self.targets = self.targets[None]
            self.labels = self.labels.reshape(1)
        if self.task not in TASKS:
            raise DomainError(f"unknown task {self.task!r}")
        if self.frames.shape[:2] != self.targets.shape[:2] or len(self.labels) != len(self.frames):
            raise DimensionError(
                f"frames {self.frames.shape}, targets {self.targets.shape} and labels {self.labels.shape} do not align"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Batch(self.frames[idx], self.targets[idx], self.labels[idx], self.task)


def embed_patches(frames, params, patch_px):
    """Row-major patch tokens ``(..., P, d_model)`` from frames ``(..., H, W)``."""
    x = patch_tokens(frames, patch_px)
    return x @ params.patch_embed + params.b_embed


def patch_tokens(frames, patch_px):
    """Flattened row-major patches ``(..., P, patch_px**2)``."""
    frames = np.asarray(frames, dtype=DTYPE)
    *lead, h, w = frames.shape
    if h % patch_px or w % patch_px:
        raise GeometryError(f"patch size {patch_px} does not tile a {w}x{h} frame")
    nv, nh = h // patch_px, w // patch_px
    x = frames.reshape(*lead, nv, patch_px, nh, patch_px)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, nv * nh, patch_px * patch_px)


def global_query(embeddings, params):
    """Mean over every token of the sequence, projected to query space.

    ``embeddings`` is ``(T, P, d_model)`` or batched ``(B, T, P, d_model)``.
    """
    embeddings = np.asarray(embeddings, dtype=DTYPE)
    if embeddings.size == 0 or embeddings.shape[-3] == 0:
        raise DimensionError("global query needs at least one frame")
    pooled = embeddings.mean(axis=(-3, -2))
    return pooled @ params.W_Q + params.b_Q


def attention_forward(query, embeddings, params):
    """Attention of ``query`` (d_k) over one frame's tokens (P x d_model)."""
    if query.shape[-1] != params.W_K.shape[1] or embeddings.shape[-1] != params.W_K.shape[0]:
        raise DimensionError(f"query {query.shape} and tokens {embeddings.shape} do not fit the projections")
    keys = embeddings @ params.W_K + params.b_K
    values = embeddings @ params.W_V + params.b_V
    scores = keys @ query / math.sqrt(keys.shape[-1])
    attn = softmax_rows(scores)
    return attn, np.einsum("...p,...pm->...m", attn, values)


def floored_target(target, kl_floor):
    t = np.maximum(np.asarray(target, dtype=DTYPE), kl_floor)
    return t / t.sum(axis=-1, keepdims=True)


def kl_regularizer(attn, target, kl_floor=1e-8):
    """``sum_i A_i log(A_i / target_i)`` with the target floored and renormalized."""
    attn = np.asarray(attn, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if attn.shape != target.shape:
        raise DimensionError(f"attention {attn.shape} and target {target.shape} differ")
    tgt = floored_target(target, kl_floor)
    pos = attn > 0
    terms = np.zeros_like(attn)
    terms[pos] = attn[pos] * (np.log(attn[pos]) - np.log(tgt[pos]))
    return max(float(terms.sum()), 0.0)


# -- batched forward / backward -------------------------------------------


def _forward(batch, params, cfg):
    x = patch_tokens(batch.frames, cfg.patch_px)  # B T P D
    emb = x @ params.patch_embed + params.b_embed  # B T P dm
    pooled = emb.mean(axis=(1, 2))  # B dm
    q = pooled @ params.W_Q + params.b_Q  # B dk
    keys = emb @ params.W_K + params.b_K  # B T P dk
    values = emb @ params.W_V + params.b_V  # B T P dm
    scale = 1.0 / math.sqrt(cfg.d_k)
    scores = np.einsum("btpk,bk->btp", keys, q) * scale
    attn = softmax_rows(scores)
    ctx = np.einsum("btp,btpm->btm", attn, values)
    pooled_ctx = ctx.mean(axis=1)
    logits = pooled_ctx @ params.head + params.b_head
    return dict(x=x, emb=emb, pooled=pooled, q=q, keys=keys, values=values, attn=attn, ctx=ctx,
                pooled_ctx=pooled_ctx, logits=logits, scale=scale)


def _per_sample_terms(cache, batch, cfg):
    logits = cache["logits"]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(len(batch)), batch.labels]
    attn = cache["attn"]
    if cfg.kl_floor >= 1.0 / attn.shape[-1]:
        raise DomainError(f"kl_floor {cfg.kl_floor} must be below 1/P = {1.0 / attn.shape[-1]}")
    tgt = floored_target(batch.targets, cfg.kl_floor)
    pos = attn > 0
    terms = np.where(pos, attn * (np.log(np.where(pos, attn, 1.0)) - np.log(tgt)), 0.0)
    kl = terms.sum(axis=(1, 2))
    return ce, kl, logp, tgt


def total_loss(batch, params, cfg):
    """Mean over the batch of ``CE + lam * sum_t KL``, with diagnostics."""
    cache = _forward(batch, params, cfg)
    ce, kl, logp, _ = _per_sample_terms(cache, batch, cfg)
    total = float(np.mean(ce + cfg.lam * kl))
    diag = {
        "ce": float(ce.mean()),
        "kl": float(kl.mean()),
        "correct": int(np.sum(logp.argmax(axis=1) == batch.labels)),
        "attention": cache["attn"],
    }
    return total, diag


def backward(batch, params, cfg):
    """Exact gradient of :func:`total_loss`; returns ``(loss, diag, grads)``."""
    cache = _forward(batch, params, cfg)
    ce, kl, logp, tgt = _per_sample_terms(cache, batch, cfg)
    B, T, P = cache["attn"].shape
    attn, values, keys, emb, x = cache["attn"], cache["values"], cache["keys"], cache["emb"], cache["x"]
    q, scale = cache["q"], cache["scale"]

    dlogits = np.exp(logp)
    dlogits[np.arange(B), batch.labels] -= 1.0
    dlogits /= B
    g_head = cache["pooled_ctx"].T @ dlogits
    g_b_head = dlogits.sum(axis=0)
    dctx = (dlogits @ params.head.T)[:, None, :] / T  # B 1 dm, same for every frame

    dattn = np.einsum("btpm,bm->btp", values, dctx[:, 0, :])
    dvalues = attn[..., None] * dctx[:, :, None, :]  # B T P dm
    if cfg.lam != 0:
        pos = attn > 0
        dkl = np.where(pos, np.log(np.where(pos, attn, 1.0)) - np.log(tgt) + 1.0, 0.0)
        dattn = dattn + (cfg.lam / B) * dkl
    dscores = attn * (dattn - np.sum(attn * dattn, axis=2, keepdims=True))

    dkeys = dscores[..., None] * q[:, None, None, :] * scale  # B T P dk
    dq = np.einsum("btpk,btp->bk", keys, dscores) * scale
    g_W_Q = cache["pooled"].T @ dq
    g_b_Q = dq.sum(axis=0)
    dpooled = dq @ params.W_Q.T  # B dm

    flat = lambda a: a.reshape(-1, a.shape[-1])
    g_W_K = flat(emb).T @ flat(dkeys)
    g_b_K = flat(dkeys).sum(axis=0)
    g_W_V = flat(emb).T @ flat(dvalues)
    g_b_V = flat(dvalues).sum(axis=0)

    demb = dkeys @ params.W_K.T + dvalues @ params.W_V.T + dpooled[:, None, None, :] / (T * P)
    g_embed = flat(x).T @ flat(demb)
    g_b_embed = flat(demb).sum(axis=0)

    grads = ModelParams(g_embed, g_b_embed, g_W_Q, g_b_Q, g_W_K, g_b_K, g_W_V, g_b_V, g_head, g_b_head)
    total = float(np.mean(ce + cfg.lam * kl))
    diag = {"ce": float(ce.mean()), "kl": float(kl.mean()), "correct": int(np.sum(logp.argmax(axis=1) == batch.labels))}
    return total, diag, grads


def sgd_step(params, grads, lr):
    return ModelParams(**{n: a - lr * getattr(grads, n) for n, a in params.items()})


def attend(params, cfg, frames):
    """Attention record and class probabilities for one sequence ``(T, H, W)``."""
    emb = embed_patches(frames, params, cfg.patch_px)
    q = global_query(emb, params)
    attn, ctx = attention_forward(q, emb, params)
    logits = ctx.mean(axis=0) @ params.head + params.b_head
    return AttentionRecord(attn, ctx), softmax_rows(logits)


def predict(params, cfg, frames):
    """Attention ``(B, T, P)`` and predicted labels for batched frames."""
    dummy = np.zeros(frames.shape[:2] + (1,))
    cache = _forward(Batch(frames, dummy, np.zeros(len(frames), dtype=np.intp)), params, cfg)
    return cache["attn"], cache["logits"].argmax(axis=1)


def train(dataset, cfg, params=None, on_epoch=None):
    """Minibatch gradient descent with a seeded shuffle; returns ``(params, log)``."""
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    rng = RngState(cfg.seed)
    params = params.copy() if params is not None else ModelParams.init(cfg, rng)
    shuffle = rng.stream("shuffle")
    log = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        ce_sum = kl_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch):
            idx = np.sort(order[start : start + cfg.batch])
            batch = dataset.subset(idx)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                # divergence is detected below; numpy's own warnings add nothing
                loss, diag, grads = backward(batch, params, cfg)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", last_finite_epoch=epoch - 1)
            ce_sum += diag["ce"] * len(idx)
            kl_sum += diag["kl"] * len(idx)
            correct += diag["correct"]
            with np.errstate(over="ignore", invalid="ignore"):
                params = sgd_step(params, grads, cfg.lr)
        if not params.is_finite():
            raise DivergenceError(f"parameters became non-finite in epoch {epoch}", last_finite_epoch=epoch - 1)
        record = {"epoch": epoch, "ce": ce_sum / n, "kl": kl_sum / n, "acc": correct / n}
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return params, log


# -- checkpoint -------------------------------------------------------------


def save_checkpoint(params, cfg, meta=None):
    header = json.dumps({"model": cfg.to_json(), "meta": meta or {}}, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    out += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in params.items()]
    return b"".join(out)


def load_checkpoint(data):
    """Parse checkpoint bytes into ``(params, cfg, meta)``."""
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a GZRM checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    cfg = ModelConfig.from_json(header["model"])
    body = data[12 + n :]
    total = sum(int(np.prod(s)) for s in cfg.param_shapes().values())
    if len(body) != 8 * total:
        raise LengthError(f"checkpoint holds {len(body)} parameter bytes, expected {8 * total}")
    vec = np.frombuffer(body, dtype="<f8").astype(DTYPE)
    return ModelParams.unflatten(vec, cfg), cfg, header.get("meta", {})
