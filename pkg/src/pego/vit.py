"""A compact vision transformer whose attention query/value projections
are adapter hook points.

The layout is the usual pre-norm encoder: patch embedding with a class
token and learned positions, then blocks of layernorm, multi-head
attention, layernorm, and a GELU MLP, with residual connections. The
class-token embedding after a final layernorm feeds a linear head.

Only the adapter matrices and the head are ever trainable; everything
else is frozen by name. A model is single-writer: training mutates the
trainable tensors from one thread, while read-only inference on an
unchanging model may run from many.

Parameter names (also the checkpoint tensor names):

    patch_embed.w, patch_embed.b, class_token, pos_embed,
    blocks.{b}.ln1.scale, blocks.{b}.ln1.offset,
    blocks.{b}.attn.{wq|wk|wv|wo}.base, ....bias,
    blocks.{b}.attn.{wq|wv}.lora.{i}.A, ....B,
    blocks.{b}.ln2.scale, blocks.{b}.ln2.offset,
    blocks.{b}.mlp.fc1.w, ....b, blocks.{b}.mlp.fc2.w, ....b,
    final_ln.scale, final_ln.offset, head.w, head.b
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adapters
from . import autograd as ag
from .adapters import AdaptedLinear, LoraGroup, LoraModule
from .autograd import Tensor
from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class VitConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    num_blocks: int
    num_heads: int
    mlp_ratio: float = 4.0
    num_classes: int = 2

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.num_blocks < 1:
            raise ConfigError("at least one block is required")
        if self.num_classes < 2:
            raise ConfigError("at least two classes are required")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp ratio must be positive, got {self.mlp_ratio}")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class Attention:
    wq: AdaptedLinear
    wk: AdaptedLinear
    wv: AdaptedLinear
    wo: AdaptedLinear


@dataclass
class Block:
    ln1_scale: Tensor
    ln1_offset: Tensor
    attn: Attention
    ln2_scale: Tensor
    ln2_offset: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class VitModel:
    cfg: VitConfig
    patch_w: Tensor
    patch_b: Tensor
    class_token: Tensor
    pos_embed: Tensor
    blocks: list[Block]
    final_ln_scale: Tensor
    final_ln_offset: Tensor
    head_w: Tensor
    head_b: Tensor

    def has_adapters(self) -> bool:
        return any(blk.attn.wq.group or blk.attn.wv.group for blk in self.blocks)


def is_trainable_name(name: str) -> bool:
    """Trainable means exactly the adapter pairs and the classifier head."""
    if name.startswith("head."):
        return True
    return ".lora." in name and name.endswith((".A", ".B"))


def named_params(model: VitModel):
    """Yield (name, tensor) pairs in a fixed canonical order."""
    yield "patch_embed.w", model.patch_w
    yield "patch_embed.b", model.patch_b
    yield "class_token", model.class_token
    yield "pos_embed", model.pos_embed
    for b, blk in enumerate(model.blocks):
        yield f"blocks.{b}.ln1.scale", blk.ln1_scale
        yield f"blocks.{b}.ln1.offset", blk.ln1_offset
        for proj in ("wq", "wk", "wv", "wo"):
            lin = getattr(blk.attn, proj)
            yield f"blocks.{b}.attn.{proj}.base", lin.base
            yield f"blocks.{b}.attn.{proj}.bias", lin.bias
            if lin.group is not None:
                for i, mod in enumerate(lin.group.modules):
                    yield f"blocks.{b}.attn.{proj}.lora.{i}.A", mod.a
                    yield f"blocks.{b}.attn.{proj}.lora.{i}.B", mod.b
        yield f"blocks.{b}.ln2.scale", blk.ln2_scale
        yield f"blocks.{b}.ln2.offset", blk.ln2_offset
        yield f"blocks.{b}.mlp.fc1.w", blk.fc1_w
        yield f"blocks.{b}.mlp.fc1.b", blk.fc1_b
        yield f"blocks.{b}.mlp.fc2.w", blk.fc2_w
        yield f"blocks.{b}.mlp.fc2.b", blk.fc2_b
    yield "final_ln.scale", model.final_ln_scale
    yield "final_ln.offset", model.final_ln_offset
    yield "head.w", model.head_w
    yield "head.b", model.head_b


def get_param(model: VitModel, name: str) -> Tensor:
    for n, t in named_params(model):
        if n == name:
            return t
    raise KeyError(name)


def apply_trainability(model: VitModel) -> None:
    for name, t in named_params(model):
        t.requires_grad = is_trainable_name(name)


def trainable_params(model: VitModel) -> dict[str, Tensor]:
    return {n: t for n, t in named_params(model) if is_trainable_name(n)}


def init_vit(cfg: VitConfig, rng: np.random.Generator) -> VitModel:
    """Fresh model, every weight matrix Gaussian with std 0.02, biases zero,
    layernorm at identity. The draw order is fixed, so a seed pins the model."""
    cfg.validate()
    d = cfg.embed_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, shape))

    def zeros(*shape):
        return Tensor(np.zeros(shape))

    def ones(*shape):
        return Tensor(np.ones(shape))

    patch_w = w(d, cfg.patch_dim)
    class_token = w(1, d)
    pos_embed = w(cfg.seq_len, d)
    blocks = []
    for _ in range(cfg.num_blocks):
        attn = Attention(
            wq=AdaptedLinear(w(d, d), zeros(1, d)),
            wk=AdaptedLinear(w(d, d), zeros(1, d)),
            wv=AdaptedLinear(w(d, d), zeros(1, d)),
            wo=AdaptedLinear(w(d, d), zeros(1, d)),
        )
        blocks.append(
            Block(
                ln1_scale=ones(1, d),
                ln1_offset=zeros(1, d),
                attn=attn,
                ln2_scale=ones(1, d),
                ln2_offset=zeros(1, d),
                fc1_w=w(cfg.hidden_dim, d),
                fc1_b=zeros(1, cfg.hidden_dim),
                fc2_w=w(d, cfg.hidden_dim),
                fc2_b=zeros(1, d),
            )
        )
    model = VitModel(
        cfg=cfg,
        patch_w=patch_w,
        patch_b=zeros(1, d),
        class_token=class_token,
        pos_embed=pos_embed,
        blocks=blocks,
        final_ln_scale=ones(1, d),
        final_ln_offset=zeros(1, d),
        head_w=w(cfg.num_classes, d),
        head_b=zeros(1, cfg.num_classes),
    )
    apply_trainability(model)
    return model


def inject_groups(model: VitModel, rank: int, n: int, rng: np.random.Generator) -> None:
    """Attach a fresh adapter group to the query and value projection of
    every block; keys, outputs, MLPs, and embeddings never get one."""
    d = model.cfg.embed_dim
    for blk in model.blocks:
        blk.attn.wq.group = adapters.init_group(d, d, rank, n, rng)
        blk.attn.wv.group = adapters.init_group(d, d, rank, n, rng)
    apply_trainability(model)


def model_to_arrays(model: VitModel) -> dict[str, np.ndarray]:
    return {name: np.array(t.data) for name, t in named_params(model)}


def model_from_arrays(cfg: VitConfig, arrays: dict[str, np.ndarray]) -> VitModel:
    """Rebuild a model from named tensors; adapter groups are recovered
    from the presence of ``...lora.{i}.A/B`` names."""

    def t(name):
        return Tensor(np.array(arrays[name]))

    def lin(prefix):
        layer = AdaptedLinear(t(f"{prefix}.base"), t(f"{prefix}.bias"))
        modules = []
        i = 0
        while f"{prefix}.lora.{i}.A" in arrays:
            modules.append(LoraModule(a=t(f"{prefix}.lora.{i}.A"), b=t(f"{prefix}.lora.{i}.B")))
            i += 1
        if modules:
            layer.group = LoraGroup(modules=modules)
        return layer

    blocks = []
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}"
        blocks.append(
            Block(
                ln1_scale=t(f"{p}.ln1.scale"),
                ln1_offset=t(f"{p}.ln1.offset"),
                attn=Attention(
                    wq=lin(f"{p}.attn.wq"),
                    wk=lin(f"{p}.attn.wk"),
                    wv=lin(f"{p}.attn.wv"),
                    wo=lin(f"{p}.attn.wo"),
                ),
                ln2_scale=t(f"{p}.ln2.scale"),
                ln2_offset=t(f"{p}.ln2.offset"),
                fc1_w=t(f"{p}.mlp.fc1.w"),
                fc1_b=t(f"{p}.mlp.fc1.b"),
                fc2_w=t(f"{p}.mlp.fc2.w"),
                fc2_b=t(f"{p}.mlp.fc2.b"),
            )
        )
    model = VitModel(
        cfg=cfg,
        patch_w=t("patch_embed.w"),
        patch_b=t("patch_embed.b"),
        class_token=t("class_token"),
        pos_embed=t("pos_embed"),
        blocks=blocks,
        final_ln_scale=t("final_ln.scale"),
        final_ln_offset=t("final_ln.offset"),
        head_w=t("head.w"),
        head_b=t("head.b"),
    )
    apply_trainability(model)
    return model


def clone(model: VitModel) -> VitModel:
    return model_from_arrays(model.cfg, model_to_arrays(model))


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(batch, H, W) images to (batch, patches, patch*patch) rows."""
    bs, hh, ww = images.shape
    gh, gw = hh // patch, ww // patch
    x = images.reshape(bs, gh, patch, gw, patch)
    x = x.transpose(0, 1, 3, 2, 4).reshape(bs, gh * gw, patch * patch)
    return np.ascontiguousarray(x)


def _linear(x: Tensor, lin: AdaptedLinear) -> Tensor:
    # Factored adapter order: (x A_i^T) B_i^T, never the dense product.
    y = ag.matmul(x, lin.base, transpose_b=True)
    if lin.group is not None:
        for m in lin.group.modules:
            y = ag.add(y, ag.matmul(ag.matmul(x, m.a, transpose_b=True), m.b, transpose_b=True))
    if lin.bias is not None:
        y = ag.add(y, lin.bias)
    return y


def _attention(x: Tensor, block: Block, cfg: VitConfig, capture) -> Tensor:
    bs, n, d = x.data.shape
    h, dh = cfg.num_heads, cfg.head_dim

    def split(t):
        return ag.transpose(ag.reshape(t, (bs, n, h, dh)), (0, 2, 1, 3))

    q = split(_linear(x, block.attn.wq))
    k = split(_linear(x, block.attn.wk))
    v = split(_linear(x, block.attn.wv))
    scores = ag.scale(ag.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(dh))
    probs = ag.softmax_last(scores)
    if capture is not None:
        capture.setdefault("attention", []).append(np.array(probs.data))
    ctx = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (bs, n, d))
    return _linear(ctx, block.attn.wo)


def _block_forward(x: Tensor, block: Block, cfg: VitConfig, capture) -> Tensor:
    a = _attention(ag.layernorm(x, block.ln1_scale, block.ln1_offset), block, cfg, capture)
    x = ag.add(x, a)
    m = ag.layernorm(x, block.ln2_scale, block.ln2_offset)
    m = ag.add(ag.matmul(m, block.fc1_w, transpose_b=True), block.fc1_b)
    m = ag.gelu(m)
    m = ag.add(ag.matmul(m, block.fc2_w, transpose_b=True), block.fc2_b)
    return ag.add(x, m)


def batch_features_tensor(model: VitModel, images: np.ndarray, capture=None) -> Tensor:
    """Class-token embeddings after the final layernorm, (batch, d)."""
    cfg = model.cfg
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"expected images of shape (batch, {cfg.image_size}, {cfg.image_size}), got {images.shape}"
        )
    bs = images.shape[0]
    d = cfg.embed_dim
    patches = ag.constant(extract_patches(images, cfg.patch_size))
    x = ag.add(ag.matmul(patches, model.patch_w, transpose_b=True), model.patch_b)
    cls = ag.broadcast_to(ag.reshape(model.class_token, (1, 1, d)), (bs, 1, d))
    x = ag.concat(cls, x, axis=1)
    x = ag.add(x, model.pos_embed)
    for block in model.blocks:
        x = _block_forward(x, block, cfg, capture)
    cls_out = ag.reshape(ag.narrow(x, 1, 0, 1), (bs, d))
    return ag.layernorm(cls_out, model.final_ln_scale, model.final_ln_offset)


def batch_logits_tensor(model: VitModel, images: np.ndarray, capture=None) -> Tensor:
    feats = batch_features_tensor(model, images, capture)
    return ag.add(ag.matmul(feats, model.head_w, transpose_b=True), model.head_b)


def batch_loss_tensor(
    model: VitModel,
    images: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    preserve_on: bool = True,
    diversify_on: bool = True,
) -> Tensor:
    loss = ag.cross_entropy_mean(batch_logits_tensor(model, images), labels)
    if alpha != 0.0 and (preserve_on or diversify_on):
        loss = ag.add(loss, ag.scale(adapters.loss_or_tensor(model, preserve_on, diversify_on), alpha))
    return loss


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


def forward_features(model: VitModel, image: np.ndarray) -> np.ndarray:
    """Feature vector of a single image (the representation before the head)."""
    with ag.no_grad():
        out = batch_features_tensor(model, np.asarray(image, dtype=np.float64)[None])
    return _check_finite(out.data[0], "feature vector")


def forward_logits(model: VitModel, image: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        out = batch_logits_tensor(model, np.asarray(image, dtype=np.float64)[None])
    return _check_finite(out.data[0], "logits")


def forward_logits_batch(model: VitModel, images: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        out = batch_logits_tensor(model, images)
    return _check_finite(out.data, "logits")


def predict(model: VitModel, image: np.ndarray) -> int:
    """Argmax class; ties resolve to the lowest class index."""
    return int(np.argmax(forward_logits(model, image)))


def predict_batch(model: VitModel, images: np.ndarray) -> np.ndarray:
    return np.argmax(forward_logits_batch(model, images), axis=1)
