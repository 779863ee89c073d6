"""Two-stage training: prompt/pseudo-label alignment, then dual guidance.

Stage 1 freezes both encoders and learns the per-identity prompt slots ``V``
together with the attribute encoder. Stage 2 freezes ``V`` and the text side
and trains the image encoder, an ID head and the attribute encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import losses as L
from . import tensor as tc
from .binio import FormatError, Reader, write_atomic
from .encoders import (AttributeEncoder, AttributeEncoderConfig, ImageEncoder,
                       ImageEncoderConfig, Linear, Module, Projections, TextEncoder,
                       TextEncoderConfig, similarity_logits)
from .prompts import PromptTemplate, build_vocabulary, embed_prompt
from .synthdata import Dataset, apply_occlusion
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AGCK"
CHECKPOINT_VERSION = 1

# Full-scale schedule: 3.5e-4 (stage 1), 5e-6 (stage 2), warm-up from 1e-6.
STAGE_LR_RATIO = 3.5e-4 / 5e-6
WARMUP_FLOOR_RATIO = 1e-6 / 3.5e-4


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    instances_per_id: int = 4
    stage2_lr: float = 3e-4
    stage1_lr: float = 3e-4 * STAGE_LR_RATIO
    warmup_steps: int = 100
    stage1_epochs: int = 40
    stage2_epochs: int = 150
    lam: float = 1.0
    beta: float = 0.01
    margin: float = 0.3
    smoothing: float = 0.1
    tau: float = 0.07
    gamma_strategy: str = "otsu"
    gamma_scope: str = "batch"
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.2, 0.4)
    triplet_mining: str = "hard"
    train_projections: bool = True
    attr_loss_updates_v: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size % self.instances_per_id:
            raise ValueError("batch_size must be divisible by instances_per_id")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.gamma_strategy.lower() not in L.THRESHOLD_STRATEGIES:
            raise ValueError(f"gamma_strategy must be one of {L.THRESHOLD_STRATEGIES}")
        if self.gamma_scope not in ("batch", "epoch"):
            raise ValueError("gamma_scope must be 'batch' or 'epoch'")

    @property
    def ids_per_batch(self) -> int:
        return self.batch_size // self.instances_per_id

    def with_stage2_lr(self, lr: float) -> "TrainConfig":
        """Set the stage-2 rate and derive the stage-1 rate from the fixed ratio."""
        return replace(self, stage2_lr=lr, stage1_lr=lr * STAGE_LR_RATIO)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    num_ids: int
    template: str = "attr_d"
    variant: str = "SE"
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text_depth: int = 2
    text_heads: int = 4
    d_embed: int = 32
    d_text_out: int = 32
    d_shared: int = 32
    max_seq_len: int = 48
    attr_layers: int = 4
    attr_heads: int = 4
    attr_d_model: int = 64
    template_file: str | None = None


class AGReIDModel(Module):
    """Every trainable tensor of both stages, addressable by dotted name."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.vocab = build_vocabulary()
        if cfg.template_file:
            self.template = PromptTemplate.from_file(cfg.template_file, self.vocab)
        else:
            self.template = PromptTemplate.from_catalog(cfg.template, self.vocab)
        rng = np.random.default_rng(seed)
        self.image_encoder = ImageEncoder(cfg.image, rng)
        tcfg = TextEncoderConfig(vocab_size=len(self.vocab), max_seq_len=cfg.max_seq_len,
                                 depth=cfg.text_depth, heads=cfg.text_heads,
                                 d_embed=cfg.d_embed, d_out=cfg.d_text_out)
        if len(self.template) > tcfg.max_seq_len:
            raise ValueError(f"template has {len(self.template)} tokens > max_seq_len {tcfg.max_seq_len}")
        self.text_encoder = TextEncoder(tcfg, rng)
        self.projections = Projections(cfg.image.d_out, cfg.d_text_out, cfg.d_shared, rng)
        r = max(self.template.r, 1)
        self.pseudo_labels = Tensor(rng.normal(0.0, 0.02, (cfg.num_ids, r, cfg.d_embed)),
                                    requires_grad=True)
        acfg = AttributeEncoderConfig(variant=cfg.variant, layers=cfg.attr_layers,
                                      heads=cfg.attr_heads, d_model=cfg.attr_d_model, r=r,
                                      d_out=cfg.d_embed, d_in=cfg.image.d_model)
        self.attr_encoder = AttributeEncoder(acfg, rng)
        self.id_head = Linear(cfg.image.d_out, cfg.num_ids, rng, bias=False)

    @property
    def V(self) -> Tensor:
        return self.pseudo_labels

    def text_features(self, identities) -> Tensor:
        """Projected text features of the identities' prompts, ``[n, d_shared]``."""
        T = embed_prompt(self.template, identities, self.V, self.text_encoder.token_embedding)
        return self.projections.text(self.text_encoder(T))

    def encode_images(self, images: np.ndarray, chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
        """Tape-free forward over many images; returns ``(f_M, patch_tokens)`` arrays."""
        fs, ps = [], []
        for s in range(0, len(images), chunk):
            f, p = self.image_encoder(images[s:s + chunk])
            fs.append(f.data)
            ps.append(p.data)
        return np.concatenate(fs), np.concatenate(ps)

    def state(self) -> dict[str, Tensor]:
        return self.parameters()

    def load_state(self, state: Mapping[str, Tensor]) -> None:
        own = self.parameters()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in state.items():
            if own[name].shape != t.shape:
                raise ContractError(f"{name}: shape {t.shape} != model {own[name].shape}")
            own[name].data = np.array(t.data, copy=True)
            own[name].requires_grad = t.requires_grad
            own[name].grad = None


def freeze_all_but(model: AGReIDModel, *parts) -> None:
    model.set_trainable(False)
    for part in parts:
        if isinstance(part, Tensor):
            part.requires_grad = True
        else:
            part.set_trainable(True)


# --------------------------------------------------------------------------
# sampling, optimiser, schedule
# --------------------------------------------------------------------------

def _draw(idx: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(idx, size=K, replace=len(idx) < K)


def pk_sample_batch(dataset: Dataset, P: int, K: int, rng: np.random.Generator):
    """One batch of ``P`` distinct identities with ``K`` images each."""
    by_pid = {k: v for k, v in dataset.index_by_pid().items() if len(v)}
    if len(by_pid) < P:
        raise ContractError(f"need {P} identities with images, dataset has {len(by_pid)}")
    ids = rng.choice(sorted(by_pid), size=P, replace=False)
    idx = np.concatenate([_draw(by_pid[int(k)], K, rng) for k in ids])
    pids = dataset.pids[idx]
    return dataset.images[idx], L.BatchLabels(pids, dataset.camids[idx])


def pk_epoch(dataset: Dataset, P: int, K: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Record indices for one epoch: a shuffled partition of identities into groups of ``P``.

    A trailing group smaller than ``P`` is dropped.
    """
    by_pid = {k: v for k, v in dataset.index_by_pid().items() if len(v)}
    if len(by_pid) < P:
        raise ContractError(f"need {P} identities with images, dataset has {len(by_pid)}")
    order = rng.permutation(sorted(by_pid))
    for s in range(0, len(order) - P + 1, P):
        yield np.concatenate([_draw(by_pid[int(k)], K, rng) for k in order[s:s + P]])


def lr_at(step: int, base_lr: float, warmup_steps: int, warmup_floor: float | None = None) -> float:
    """Linear warm-up from ``warmup_floor`` to ``base_lr``, then constant."""
    if warmup_floor is None:
        warmup_floor = base_lr * WARMUP_FLOOR_RATIO
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return warmup_floor + (base_lr - warmup_floor) * step / warmup_steps


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: Mapping[str, Tensor], lr: float) -> None:
        """Update every parameter with ``requires_grad``; frozen ones are left alone."""
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(f"trainable parameter {name!r} has no gradient")
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: Mapping[str, Tensor], optimizer: Adam, lr: float) -> None:
    optimizer.step(params, lr)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# --------------------------------------------------------------------------
# losses per stage
# --------------------------------------------------------------------------

def stage1_losses(model: AGReIDModel, f_M: np.ndarray, patches: np.ndarray, pids: np.ndarray,
                  cfg: TrainConfig) -> dict[str, Tensor]:
    """``L_align`` and its parts for one batch of precomputed image-side features."""
    uniq, inv = np.unique(pids, return_inverse=True)
    f_T = tc.take_rows(model.text_features(uniq), inv)
    logits = similarity_logits(model.projections.image(Tensor(f_M)), f_T, cfg.tau)
    l_feat = L.feature_alignment_loss(logits, pids)
    A = model.attr_encoder(Tensor(patches))
    # V is shaped by L_feat; E_A chases it. Letting L_attrA pull on V as well
    # collapses every identity onto E_A's near-constant early output.
    target = tc.take_rows(model.V, pids) if cfg.attr_loss_updates_v else Tensor(model.V.data[pids])
    l_attr = L.attr_align_loss(A, target)
    return {"feat": l_feat, "attrA": l_attr, "align": L.stage1_loss(l_feat, l_attr, cfg.lam)}


def stage2_losses(model: AGReIDModel, images: np.ndarray, pids: np.ndarray,
                  text_feats: Tensor, cfg: TrainConfig, mask: np.ndarray | None = None,
                  gamma: float | None = None, cosines: list | None = None
                  ) -> tuple[dict[str, Tensor], dict[str, float]]:
    """``L_guide`` and its parts.

    ``mask`` overrides the noise mask outright; ``gamma`` replaces the per-batch
    threshold. Batch cosines are appended to ``cosines`` when it is given.
    """
    f_M, patches = model.image_encoder(images)
    l_id = L.id_loss(model.id_head(f_M), pids, cfg.smoothing)
    l_tri = L.triplet_loss(f_M, pids, cfg.margin, cfg.triplet_mining)
    l_ce = L.ce_guidance_loss(model.projections.image(f_M), text_feats, pids, cfg.tau)
    out = {"id": l_id, "tri": l_tri, "ce": l_ce}
    info: dict[str, float] = {}
    if cfg.beta > 0:
        A = model.attr_encoder(patches)
        Vb = Tensor(model.V.data[pids])
        cos = L.attribute_cosines(A, Vb)
        if cosines is not None:
            cosines.append(cos.data.ravel().copy())
        if mask is None:
            if gamma is None:
                gamma = L.select_threshold(cos.data, cfg.gamma_strategy)
            mask = L.noise_mask(cos.data, gamma)
            info["gamma"] = gamma
        info["kept"] = float(mask.mean())
        out["attrG"] = L.attr_guidance_loss(A, Vb, mask)
        out["guide"] = L.stage2_loss(l_id, l_tri, l_ce, out["attrG"], cfg.beta)
    else:
        out["guide"] = L.stage2_loss(l_id, l_tri, l_ce, 0.0, 0.0)
    return out, info


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

@dataclass
class TrainLog:
    steps: list[dict[str, float]] = field(default_factory=list)

    def series(self, key: str) -> np.ndarray:
        return np.array([s[key] for s in self.steps if key in s])

    def epoch_means(self, key: str) -> np.ndarray:
        epochs = sorted({s["epoch"] for s in self.steps})
        return np.array([np.mean([s[key] for s in self.steps if s["epoch"] == e]) for e in epochs])


def _optimize(model: AGReIDModel, opt: Adam, loss: Tensor, lr: float) -> None:
    tc.backward(loss)
    params = model.parameters()
    opt.step(params, lr)
    zero_grad(params)


def train_stage1(dataset: Dataset, cfg: TrainConfig, model: AGReIDModel) -> TrainLog:
    """Learn ``V`` and the attribute encoder against frozen encoders."""
    parts = [model.V, model.attr_encoder] + ([model.projections] if cfg.train_projections else [])
    freeze_all_but(model, *parts)
    f_all, p_all = model.encode_images(dataset.images)
    pids_all = dataset.pids
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam()
    history = TrainLog()
    step = 0
    for epoch in range(cfg.stage1_epochs):
        for idx in pk_epoch(dataset, cfg.ids_per_batch, cfg.instances_per_id, rng):
            lr = lr_at(step, cfg.stage1_lr, cfg.warmup_steps)
            with tc.tape():
                parts_ = stage1_losses(model, f_all[idx], p_all[idx], pids_all[idx], cfg)
                _optimize(model, opt, parts_["align"], lr)
            history.steps.append({"epoch": epoch, "step": step, "lr": lr,
                                  **{k: v.item() for k, v in parts_.items()}})
            step += 1
        log.info("stage1 epoch %d align=%.4f", epoch, history.epoch_means("align")[-1])
    return history


def identity_text_features(model: AGReIDModel) -> Tensor:
    feats = model.text_features(np.arange(model.cfg.num_ids))
    return Tensor(feats.data)


def train_stage2(dataset: Dataset, cfg: TrainConfig, model: AGReIDModel) -> TrainLog:
    """Train the image encoder with ReID, prompt and pseudo-label guidance."""
    if model.V is None or model.V.shape[0] != dataset.num_ids:
        raise ContractError("stage-1 pseudo-labels missing or sized for another dataset")
    model.set_trainable(False)
    text_feats = identity_text_features(model)
    tuned = [model.image_encoder, model.id_head] + ([model.attr_encoder] if cfg.beta > 0 else [])
    freeze_all_but(model, *tuned)
    rng = np.random.default_rng([cfg.seed, 2])
    images_all = dataset.images
    pids_all = dataset.pids
    opt = Adam()
    history = TrainLog()
    step = 0
    epoch_gamma = None  # with gamma_scope="epoch": threshold from the previous epoch's cosines
    for epoch in range(cfg.stage2_epochs):
        seen: list[np.ndarray] = []
        for idx in pk_epoch(dataset, cfg.ids_per_batch, cfg.instances_per_id, rng):
            imgs = images_all[idx]
            if cfg.erase_prob > 0:
                imgs = np.stack([apply_occlusion(im, rng, cfg.erase_prob, cfg.erase_area)[0]
                                 for im in imgs])
            lr = lr_at(step, cfg.stage2_lr, cfg.warmup_steps)
            with tc.tape():
                parts_, info = stage2_losses(model, imgs, pids_all[idx], text_feats, cfg,
                                             gamma=epoch_gamma,
                                             cosines=seen if cfg.gamma_scope == "epoch" else None)
                _optimize(model, opt, parts_["guide"], lr)
            history.steps.append({"epoch": epoch, "step": step, "lr": lr, **info,
                                  **{k: v.item() for k, v in parts_.items()}})
            step += 1
        if cfg.gamma_scope == "epoch" and seen:
            epoch_gamma = L.select_threshold(np.concatenate(seen), cfg.gamma_strategy)
        log.info("stage2 epoch %d guide=%.4f", epoch, history.epoch_means("guide")[-1])
    return history


def extract_features(model: AGReIDModel, dataset: Dataset) -> np.ndarray:
    return model.encode_images(dataset.images)[0]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(state: Mapping[str, Tensor], path) -> None:
    parts = [CHECKPOINT_MAGIC, np.array([CHECKPOINT_VERSION, len(state)], "<u4").tobytes()]
    for name, t in state.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or t.ndim > 255:
            raise ValueError(f"cannot encode tensor {name!r}")
        parts.append(np.array([len(raw)], "<u2").tobytes())
        parts.append(raw)
        parts.append(np.array([int(t.requires_grad), t.ndim], "<u1").tobytes())
        parts.append(np.array(t.shape, "<u4").tobytes())
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    write_atomic(path, b"".join(parts))


def load_checkpoint(path) -> dict[str, Tensor]:
    rd = Reader(Path(path).read_bytes(), f"checkpoint {path}")
    rd.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    count = rd.unpack("I")
    state: dict[str, Tensor] = {}
    for _ in range(count):
        at = rd.pos
        name = rd.take(rd.unpack("H")).decode("utf-8", errors="replace")
        trainable, rank = rd.unpack("2B")
        shape = tuple(int(s) for s in rd.array("u4", rank))
        if trainable > 1 or any(s == 0 for s in shape):
            raise FormatError(f"checkpoint {path}: malformed entry {name!r} at offset {at}")
        if name in state:
            raise FormatError(f"checkpoint {path}: duplicate tensor {name!r} at offset {at}")
        data = rd.array("f8", int(np.prod(shape))).astype(np.float64).reshape(shape)
        state[name] = Tensor(data, requires_grad=bool(trainable), name=name)
    rd.finish()
    return state


def config_to_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
