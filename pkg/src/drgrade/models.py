"""The three grading heads over frozen encoder features.

* zero-shot: cosine similarity between an image embedding and fixed per-grade
  prompt embeddings;
* attention FCN head: conv/batchnorm/relu blocks with channel+spatial gating,
  pooled into a 5-way linear classifier;
* ranking prompt head: learnable per-grade prompt vectors scored by
  temperature-scaled cosine similarity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container as ct
from . import nn
from .errors import ShapeError

NUM_GRADES = 5
SPATIAL_KERNEL = 7  # spatial gate: single 7x7 conv, padding 3

PROMPT_TEMPLATE = "a fundus photograph showing {severity} diabetic retinopathy"
SEVERITY_WORDS = ("no", "mild", "moderate", "severe", "proliferative")


def default_prompt_texts():
    return [PROMPT_TEMPLATE.format(severity=w) for w in SEVERITY_WORDS]


def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# CBAM: sequential channel and spatial gates
# ---------------------------------------------------------------------------

@dataclass
class CbamParams:
    reduce_w: np.ndarray   # (C/r, C, 1, 1)
    reduce_b: np.ndarray
    expand_w: np.ndarray   # (C, C/r, 1, 1)
    expand_b: np.ndarray
    spatial_w: np.ndarray  # (1, C, 7, 7)
    spatial_b: np.ndarray
    reduction: int = 16

    @property
    def channels(self):
        return self.expand_w.shape[0]

    @classmethod
    def init(cls, channels, reduction=16, rng=None, dtype=np.float32):
        if channels % reduction != 0:
            raise ShapeError(f"channel count {channels} is not divisible by reduction {reduction}")
        rng = rng or np.random.default_rng(0)
        mid = channels // reduction
        return cls(
            reduce_w=_he_init(rng, (mid, channels, 1, 1), channels, dtype),
            reduce_b=np.zeros(mid, dtype=dtype),
            expand_w=_he_init(rng, (channels, mid, 1, 1), mid, dtype),
            expand_b=np.zeros(channels, dtype=dtype),
            spatial_w=_he_init(rng, (1, channels, SPATIAL_KERNEL, SPATIAL_KERNEL),
                               channels * SPATIAL_KERNEL ** 2, dtype),
            spatial_b=np.zeros(1, dtype=dtype),
            reduction=reduction,
        )

    def named(self, prefix=""):
        for name in ("reduce_w", "reduce_b", "expand_w", "expand_b", "spatial_w", "spatial_b"):
            yield f"{prefix}{name}", getattr(self, name)


def cbam_forward(x, p):
    """x gated channel-wise then spatially; output magnitude never exceeds |x|."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"cbam expects NCHW input with C={p.channels}, got shape {x.shape}")
    pooled, c_pool = nn.adaptive_avg_pool_1x1(x)
    r1, c_r1 = nn.conv2d(pooled, p.reduce_w, p.reduce_b)
    a1, c_relu = nn.relu(r1)
    e1, c_e1 = nn.conv2d(a1, p.expand_w, p.expand_b)
    gate_c, c_sc = nn.sigmoid(e1)
    x1, c_m1 = nn.mul_broadcast(x, gate_c)
    s1, c_s1 = nn.conv2d(x1, p.spatial_w, p.spatial_b, padding=SPATIAL_KERNEL // 2)
    gate_s, c_ss = nn.sigmoid(s1)
    out, c_m2 = nn.mul_broadcast(x1, gate_s)
    ctx = (c_pool, c_r1, c_relu, c_e1, c_sc, c_m1, c_s1, c_ss, c_m2, gate_s)
    return out, ctx


def cbam_backward(ctx, d_out):
    c_pool, c_r1, c_relu, c_e1, c_sc, c_m1, c_s1, c_ss, c_m2, _ = ctx
    d_x1a, d_gs = nn.mul_broadcast_backward(c_m2, d_out)
    d_s1 = nn.sigmoid_backward(c_ss, d_gs)
    d_x1b, d_sw, d_sb = nn.conv2d_backward(c_s1, d_s1)
    d_x1 = d_x1a + d_x1b
    d_xa, d_gc = nn.mul_broadcast_backward(c_m1, d_x1)
    d_e1 = nn.sigmoid_backward(c_sc, d_gc)
    d_a1, d_ew, d_eb = nn.conv2d_backward(c_e1, d_e1)
    d_r1 = nn.relu_backward(c_relu, d_a1)
    d_pooled, d_rw, d_rb = nn.conv2d_backward(c_r1, d_r1)
    d_x = d_xa + nn.adaptive_avg_pool_1x1_backward(c_pool, d_pooled)
    return nn.LayerGrads(d_x, {"reduce_w": d_rw, "reduce_b": d_rb,
                               "expand_w": d_ew, "expand_b": d_eb,
                               "spatial_w": d_sw, "spatial_b": d_sb})


def export_spatial_gate(x, p):
    """The spatial attention map sigma(conv7x7(channel-gated x)), shape N x 1 x H x W."""
    _, ctx = cbam_forward(x, p)
    return ctx[-1]


# ---------------------------------------------------------------------------
# FCN head: conv blocks + gating + pooled linear classifier
# ---------------------------------------------------------------------------

@dataclass
class FcnHeadConfig:
    in_channels: int
    block_widths: tuple = ()      # default: (C, C/2, C/4)
    kernel_size: int = 3
    reduction: int = 16
    cbam_after: tuple = (0, 1, 2)  # insert a gate after each conv block
    bn_eps: float = nn.BN_EPS
    bn_momentum: float = nn.BN_MOMENTUM

    def __post_init__(self):
        if not self.block_widths:
            c = self.in_channels
            self.block_widths = (c, max(c // 2, 1), max(c // 4, 1))
        widths = tuple(self.block_widths)
        if any(widths[i] < widths[i + 1] for i in range(len(widths) - 1)):
            raise ShapeError(f"block widths must be non-increasing, got {widths}")
        self.block_widths = widths
        self.cbam_after = tuple(sorted(set(self.cbam_after)))
        for i in self.cbam_after:
            if not 0 <= i < len(widths):
                raise ShapeError(f"cbam insertion point {i} outside blocks 0..{len(widths) - 1}")

    def to_dict(self):
        return {"in_channels": self.in_channels, "block_widths": list(self.block_widths),
                "kernel_size": self.kernel_size, "reduction": self.reduction,
                "cbam_after": list(self.cbam_after), "bn_eps": self.bn_eps,
                "bn_momentum": self.bn_momentum}

    @classmethod
    def from_dict(cls, d):
        return cls(in_channels=d["in_channels"], block_widths=tuple(d["block_widths"]),
                   kernel_size=d["kernel_size"], reduction=d["reduction"],
                   cbam_after=tuple(d["cbam_after"]), bn_eps=d["bn_eps"],
                   bn_momentum=d["bn_momentum"])


@dataclass
class ConvBlockParams:
    conv_w: np.ndarray
    conv_b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    bn_state: nn.BatchNormState

    def named(self, prefix=""):
        for name in ("conv_w", "conv_b", "gamma", "beta"):
            yield f"{prefix}{name}", getattr(self, name)


@dataclass
class FcnHeadParams:
    config: FcnHeadConfig
    blocks: list = field(default_factory=list)
    cbams: dict = field(default_factory=dict)  # block index -> CbamParams
    classifier_w: np.ndarray = None
    classifier_b: np.ndarray = None

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        k = config.kernel_size
        blocks = []
        prev = config.in_channels
        for w in config.block_widths:
            blocks.append(ConvBlockParams(
                conv_w=_he_init(rng, (w, prev, k, k), prev * k * k, dtype),
                conv_b=np.zeros(w, dtype=dtype),
                gamma=np.ones(w, dtype=dtype),
                beta=np.zeros(w, dtype=dtype),
                bn_state=nn.BatchNormState.initial(w, dtype=dtype),
            ))
            prev = w
        cbams = {i: CbamParams.init(config.block_widths[i], config.reduction, rng, dtype)
                 for i in config.cbam_after}
        cw = (rng.standard_normal((prev, NUM_GRADES)) / np.sqrt(prev)).astype(dtype)
        return cls(config, blocks, cbams, cw, np.zeros(NUM_GRADES, dtype=dtype))

    def named_parameters(self):
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"block{i}.")
        for i in sorted(self.cbams):
            yield from self.cbams[i].named(f"cbam{i}.")
        yield "classifier_w", self.classifier_w
        yield "classifier_b", self.classifier_b

    def set_parameter(self, name, value):
        if name.startswith("block"):
            idx, attr = name.split(".", 1)
            setattr(self.blocks[int(idx[5:])], attr, value)
        elif name.startswith("cbam"):
            idx, attr = name.split(".", 1)
            setattr(self.cbams[int(idx[4:])], attr, value)
        else:
            setattr(self, name, value)

    def astype(self, dtype):
        clone = FcnHeadParams.init(self.config, seed=0, dtype=dtype)
        for name, value in self.named_parameters():
            clone.set_parameter(name, value.astype(dtype))
        for i, blk in enumerate(self.blocks):
            clone.blocks[i].bn_state = nn.BatchNormState(
                blk.bn_state.running_mean.astype(dtype),
                blk.bn_state.running_var.astype(dtype))
        return clone


def fcn_head_forward(x, params, training=False):
    """Feature map (N,C,H,W) -> grade logits (N,5); eval mode is deterministic."""
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"fcn head expects NCHW input with C={cfg.in_channels}, got {x.shape}")
    pad = cfg.kernel_size // 2
    caches = []
    h = x
    for i, blk in enumerate(params.blocks):
        h, c_conv = nn.conv2d(h, blk.conv_w, blk.conv_b, padding=pad)
        h, c_bn = nn.batchnorm2d(h, blk.gamma, blk.beta, blk.bn_state, training,
                                 momentum=cfg.bn_momentum, eps=cfg.bn_eps)
        h, c_relu = nn.relu(h)
        if i in params.cbams:
            h, c_cbam = cbam_forward(h, params.cbams[i])
        else:
            c_cbam = None
        caches.append((c_conv, c_bn, c_relu, c_cbam))
    pooled, c_pool = nn.global_avg_pool(h)
    logits, c_lin = nn.linear(pooled, params.classifier_w, params.classifier_b)
    return logits, (caches, c_pool, c_lin)


def fcn_head_backward(ctx, d_logits, params):
    caches, c_pool, c_lin = ctx
    grads = {}
    d_pooled, grads["classifier_w"], grads["classifier_b"] = nn.linear_backward(c_lin, d_logits)
    d_h = nn.global_avg_pool_backward(c_pool, d_pooled)
    for i in range(len(caches) - 1, -1, -1):
        c_conv, c_bn, c_relu, c_cbam = caches[i]
        if c_cbam is not None:
            g = cbam_backward(c_cbam, d_h)
            d_h = g.d_input
            for name, arr in g.d_params.items():
                grads[f"cbam{i}.{name}"] = arr
        d_h = nn.relu_backward(c_relu, d_h)
        d_h, grads[f"block{i}.gamma"], grads[f"block{i}.beta"] = nn.batchnorm2d_backward(c_bn, d_h)
        d_h, grads[f"block{i}.conv_w"], grads[f"block{i}.conv_b"] = nn.conv2d_backward(c_conv, d_h)
    return nn.LayerGrads(d_h, grads)


# ---------------------------------------------------------------------------
# Prompt bank: zero-shot and ranking heads
# ---------------------------------------------------------------------------

@dataclass
class PromptBank:
    embeddings: np.ndarray        # (5, D), grade order No DR .. Proliferative
    temperature: float = 0.2
    learnable: bool = False
    normalize: bool = True        # cosine scores; False = raw inner products

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != NUM_GRADES:
            raise ShapeError(f"prompt bank needs a {NUM_GRADES} x D matrix, "
                             f"got shape {self.embeddings.shape}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @classmethod
    def init_random(cls, dim, temperature=0.2, seed=0, dtype=np.float64,
                    scale=0.02):
        # small-norm init keeps the cosine direction trainable at small
        # learning rates (an Adam step moves each coordinate by ~lr)
        rng = np.random.default_rng(seed)
        emb = (scale * rng.standard_normal((NUM_GRADES, dim))).astype(dtype)
        return cls(emb, temperature=temperature, learnable=True)


def _checked_norms(rows, what):
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm {what} cannot be scored by cosine similarity")
    return norms


def cosine_scores(embs, bank):
    """Similarity matrix between image embeddings (N,D) and the 5 prompt rows."""
    embs = np.atleast_2d(np.asarray(embs, dtype=np.float64))
    prompts = np.asarray(bank.embeddings, dtype=np.float64)
    if embs.shape[1] != prompts.shape[1]:
        raise ShapeError(f"embedding dim {embs.shape[1]} does not match prompt dim {prompts.shape[1]}")
    if not bank.normalize:
        return embs @ prompts.T
    en = _checked_norms(embs, "image embedding")
    pn = _checked_norms(prompts, "prompt row")
    return (embs / en[:, None]) @ (prompts / pn[:, None]).T


def argmax_highest_grade(values):
    """Argmax over the 5 grades with ties broken toward the higher grade."""
    values = np.asarray(values)
    rev = values[..., ::-1]
    return values.shape[-1] - 1 - np.argmax(rev, axis=-1)


def zero_shot_classify(image_emb, bank):
    """Grade by highest cosine similarity; returns (grade, 5 similarities)."""
    image_emb = np.asarray(image_emb, dtype=np.float64)
    if image_emb.ndim != 1:
        raise ShapeError(f"zero_shot_classify takes a single embedding vector, got shape {image_emb.shape}")
    sims = cosine_scores(image_emb, bank)[0]
    return int(argmax_highest_grade(sims)), sims


def ranking_head_forward(embs, bank):
    """Temperature-scaled similarity logits (N,5); softmax over them defines the grades."""
    sims = cosine_scores(embs, bank)
    logits = sims / bank.temperature
    ctx = (np.atleast_2d(np.asarray(embs, dtype=np.float64)), bank, sims)
    return logits, ctx


def ranking_head_backward(ctx, d_logits):
    """Gradient of the logits w.r.t. the prompt embeddings (the learnable part)."""
    embs, bank, sims = ctx
    d_sims = np.asarray(d_logits, dtype=np.float64) / bank.temperature
    prompts = np.asarray(bank.embeddings, dtype=np.float64)
    if not bank.normalize:
        return d_sims.T @ embs
    en = np.linalg.norm(embs, axis=1)
    pn = np.linalg.norm(prompts, axis=1)
    vhat = embs / en[:, None]
    phat = prompts / pn[:, None]
    # d s_ig / d p_g = (vhat_i - s_ig * phat_g) / |p_g|
    d_prompts = d_sims.T @ vhat - (d_sims * sims).sum(axis=0)[:, None] * phat
    return d_prompts / pn[:, None]


# ---------------------------------------------------------------------------
# Checkpoints: container payload + JSON architecture sidecar
# ---------------------------------------------------------------------------

CHECKPOINT_SUFFIX = ".gck"
ARCH_SUFFIX = ".arch.json"


def _sidecar(path):
    return Path(str(path) + ARCH_SUFFIX)


def save_fcn_checkpoint(path, params):
    entries = [ct.Entry(name, ct.KIND_PARAM, arr) for name, arr in params.named_parameters()]
    for i, blk in enumerate(params.blocks):
        entries.append(ct.Entry(f"block{i}.running_mean", ct.KIND_PARAM, blk.bn_state.running_mean))
        entries.append(ct.Entry(f"block{i}.running_var", ct.KIND_PARAM, blk.bn_state.running_var))
    ct.write_container(path, entries, meta={"head": "fcn"})
    arch = {"head": "fcn", "config": params.config.to_dict()}
    _sidecar(path).write_text(json.dumps(arch, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)


def save_ranking_checkpoint(path, bank):
    entries = [ct.Entry("prompt_embeddings", ct.KIND_PARAM, bank.embeddings)]
    ct.write_container(path, entries, meta={"head": "ranking"})
    arch = {"head": "ranking", "config": {"temperature": bank.temperature,
                                          "normalize": bank.normalize,
                                          "dim": int(bank.embeddings.shape[1])}}
    _sidecar(path).write_text(json.dumps(arch, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)


def load_checkpoint(path):
    """Returns ("fcn", FcnHeadParams) or ("ranking", PromptBank)."""
    arch = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    reader = ct.ContainerReader(path)
    if arch["head"] == "fcn":
        config = FcnHeadConfig.from_dict(arch["config"])
        params = FcnHeadParams.init(config, seed=0)
        for name, _ in list(params.named_parameters()):
            params.set_parameter(name, reader.get(name))
        for i, blk in enumerate(params.blocks):
            blk.bn_state = nn.BatchNormState(reader.get(f"block{i}.running_mean"),
                                             reader.get(f"block{i}.running_var"))
        return "fcn", params
    if arch["head"] == "ranking":
        cfg = arch["config"]
        bank = PromptBank(reader.get("prompt_embeddings"), temperature=cfg["temperature"],
                          learnable=True, normalize=cfg["normalize"])
        return "ranking", bank
    raise ValueError(f"unknown head kind {arch['head']!r} in {path}")
