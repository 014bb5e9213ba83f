"""Desk-scale dual encoder with deep prompt injection, plus the student projector.

The image tower sees ``[CLS, prompts, patches]``; the text tower sees
``[prompts, class-name tokens, EOS]`` where the level-0 textual prompts take
the slots of the template words. Deeper prompt levels replace the prompt
slots before each of the first ``depth`` transformer layers.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Literal, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

Branch = Literal["visual", "textual"]
PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    width: int = 64
    num_heads: int = 4
    patch_grid: int = 4
    patch_size: int = 4
    vocab_size: int = 64
    max_seq_len: int = 16
    output_dim: int = 64

    @property
    def image_side(self) -> int:
        return self.patch_grid * self.patch_size

    @property
    def num_patches(self) -> int:
        return self.patch_grid**2

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"encoder field {name} must be a positive int, got {value!r}")
        if self.width % self.num_heads:
            raise ConfigError(f"width {self.width} not divisible by num_heads {self.num_heads}")


TEACHER_CONFIG = EncoderConfig(num_layers=6, width=64, num_heads=4, output_dim=64)
STUDENT_CONFIG = EncoderConfig(num_layers=4, width=32, num_heads=2, output_dim=32)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        b, t, w = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, t, 3, h, w // h).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.out(y.transpose(1, 2).reshape(b, t, w))


class QuickGELU(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.sigmoid(1.702 * x)


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), QuickGELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), causal)
        return x + self.mlp(self.ln_2(x))


class PromptSet(nn.Module):
    """Learnable prompt vectors, one ``length x width`` matrix per depth level."""

    def __init__(self, levels: torch.Tensor, branch: Branch):
        super().__init__()
        if levels.dim() != 3:
            raise ShapeError(f"prompt levels must be (depth, length, width), got {tuple(levels.shape)}")
        if branch not in ("visual", "textual"):
            raise ConfigError(f"unknown prompt branch {branch!r}")
        self.branch = branch
        self.levels = nn.Parameter(levels)

    @property
    def depth(self) -> int:
        return self.levels.shape[0]

    @property
    def length(self) -> int:
        return self.levels.shape[1]

    @property
    def width(self) -> int:
        return self.levels.shape[2]

    def extra_repr(self) -> str:
        return f"branch={self.branch}, depth={self.depth}, length={self.length}"


def _active_depth(prompts: PromptSet | None, num_layers: int) -> int:
    return 0 if prompts is None else min(prompts.depth, num_layers)


class ImageTower(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.patch_embed = nn.Linear(cfg.patch_size**2, w, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(w))
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.num_patches + 1, w))
        self.ln_pre = nn.LayerNorm(w)
        self.blocks = nn.ModuleList(Block(w, cfg.num_heads) for _ in range(cfg.num_layers))
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Parameter(torch.zeros(w, cfg.output_dim))

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        b = images.shape[0]
        if images.shape[1:] != (cfg.image_side, cfg.image_side):
            raise ShapeError(
                f"expected images of shape (*, {cfg.image_side}, {cfg.image_side}), "
                f"got {tuple(images.shape)}"
            )
        g, p = cfg.patch_grid, cfg.patch_size
        x = images.reshape(b, g, p, g, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, g * g, p * p)

    def tokens(self, images: torch.Tensor, prompts: PromptSet | None = None) -> torch.Tensor:
        """Input sequence after level-0 prompt insertion: ``(B, 1 + M + P, width)``."""
        x = self.patch_embed(self.patchify(images))
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        if prompts is not None:
            if prompts.branch != "visual":
                raise ConfigError("image tower needs visual prompts")
            p0 = prompts.levels[0].to(x.dtype).expand(x.shape[0], -1, -1)
            x = torch.cat([x[:, :1], p0, x[:, 1:]], dim=1)
        return x

    def forward(self, images: torch.Tensor, prompts: PromptSet | None = None) -> torch.Tensor:
        x = self.ln_pre(self.tokens(images, prompts))
        depth = _active_depth(prompts, len(self.blocks))
        m = 0 if prompts is None else prompts.length
        for layer, block in enumerate(self.blocks):
            if 0 < layer < depth:
                pl = prompts.levels[layer].to(x.dtype).expand(x.shape[0], -1, -1)
                x = torch.cat([x[:, :1], pl, x[:, 1 + m:]], dim=1)
            x = block(x)
        return self.ln_post(x[:, 0]) @ self.proj


class TextTower(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.token_embedding = nn.Embedding(cfg.vocab_size, w)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.max_seq_len, w))
        self.blocks = nn.ModuleList(Block(w, cfg.num_heads) for _ in range(cfg.num_layers))
        self.ln_final = nn.LayerNorm(w)
        self.proj = nn.Parameter(torch.zeros(w, cfg.output_dim))

    def forward(self, token_ids: torch.Tensor, prompts: PromptSet | None = None) -> torch.Tensor:
        """Encode ``(B, T)`` ids ending in EOS; the final position is pooled."""
        t = token_ids.shape[1]
        if t > self.cfg.max_seq_len:
            raise ShapeError(f"sequence of {t} tokens exceeds max_seq_len {self.cfg.max_seq_len}")
        if int(token_ids.max()) >= self.cfg.vocab_size or int(token_ids.min()) < 0:
            raise ShapeError("token id outside the embedding table")
        x = self.token_embedding(token_ids)
        m = 0
        if prompts is not None:
            if prompts.branch != "textual":
                raise ConfigError("text tower needs textual prompts")
            m = prompts.length
            if t <= m:
                raise ShapeError(f"sequence of {t} tokens leaves no room after {m} prompt slots")
            p0 = prompts.levels[0].to(x.dtype).expand(x.shape[0], -1, -1)
            x = torch.cat([p0, x[:, m:]], dim=1)
        x = x + self.positional_embedding[:t]
        depth = _active_depth(prompts, len(self.blocks))
        for layer, block in enumerate(self.blocks):
            if 0 < layer < depth:
                pl = prompts.levels[layer].to(x.dtype).expand(x.shape[0], -1, -1)
                x = torch.cat([pl, x[:, m:]], dim=1)
            x = block(x, causal=True)
        return self.ln_final(x[:, -1]) @ self.proj


class DualEncoder(nn.Module):
    """Frozen-backbone stand-in for a pretrained CLIP: image and text towers."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image = ImageTower(cfg)
        self.text = TextTower(cfg)


def build_encoder(config: EncoderConfig, seed: int) -> DualEncoder:
    """Deterministically initialized dual encoder."""
    config.validate()
    enc = DualEncoder(config)
    g = torch.Generator().manual_seed(int(seed))
    w = config.width
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln_" in name:
                p.fill_(1.0)
            elif name.endswith("proj"):
                p.copy_(torch.randn(p.shape, generator=g) * w**-0.5)
            elif p.dim() == 2 and "embedding" not in name:
                p.copy_(torch.randn(p.shape, generator=g) * p.shape[1] ** -0.5)
            else:
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
    return enc


def init_prompts(depth: int, length: int, width: int, branch: Branch, seed: int, *,
                 num_layers: int | None = None, embedding_table: torch.Tensor | None = None,
                 template_tokens: Sequence[int] | None = None) -> PromptSet:
    """Gaussian(0, 0.02) prompts; textual level 0 copies the template word embeddings.

    ``num_layers`` clamps the depth to the encoder it will be used with.
    """
    if depth < 1 or length < 1:
        raise ConfigError(f"prompt depth and length must be >= 1, got {depth}, {length}")
    if num_layers is not None and depth > num_layers:
        log.info("prompt depth %d clamped to %d encoder layers", depth, num_layers)
        depth = num_layers
    g = torch.Generator().manual_seed(int(seed))
    levels = torch.randn(depth, length, width, generator=g) * PROMPT_INIT_STD
    if branch == "textual" and template_tokens is not None:
        if len(template_tokens) != length:
            raise ConfigError(
                f"template has {len(template_tokens)} tokens but prompt length is {length}"
            )
        if embedding_table is None:
            raise ConfigError("textual prompt init needs the word embedding table")
        with torch.no_grad():
            levels[0] = embedding_table[torch.as_tensor(list(template_tokens))].detach()
    return PromptSet(levels, branch)


class Projector(nn.Module):
    """MLP bridging student feature dim to teacher dim; ReLU between affine maps."""

    def __init__(self, in_dim: int, out_dim: int, seed: int, num_layers: int = 2,
                 hidden: int | None = None):
        super().__init__()
        if num_layers < 1:
            raise ConfigError(f"projector needs at least one layer, got {num_layers}")
        hidden = hidden or in_dim
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for lin in self.layers:
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_((torch.rand(lin.weight.shape, generator=g) * 2 - 1) * bound)
                lin.bias.copy_((torch.rand(lin.bias.shape, generator=g) * 2 - 1) * bound)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"projector expects dim {self.in_dim}, got {x.shape[-1]}")
        for i, lin in enumerate(self.layers):
            if i:
                x = torch.relu(x)
            x = lin(x)
        return x


def project(proj: Projector, features: torch.Tensor) -> torch.Tensor:
    return proj(features)


class Teacher(nn.Module):
    def __init__(self, backbone: DualEncoder, image_prompts: PromptSet | None,
                 text_prompts: PromptSet | None):
        super().__init__()
        self.backbone = backbone
        self.image_prompts = image_prompts
        self.text_prompts = text_prompts

    @property
    def feature_dim(self) -> int:
        return self.backbone.cfg.output_dim

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone.image(images, self.image_prompts)

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.backbone.text(token_ids, self.text_prompts)


class Student(nn.Module):
    """Student image branch: backbone, visual prompts and the projector.

    ``text_prompts`` is only populated for the variant that scores against
    the student's own text encoder instead of the shared class vectors.
    """

    def __init__(self, backbone: DualEncoder, image_prompts: PromptSet | None,
                 projector: Projector | None, text_prompts: PromptSet | None = None):
        super().__init__()
        self.backbone = backbone
        self.image_prompts = image_prompts
        self.projector = projector
        self.text_prompts = text_prompts

    @property
    def feature_dim(self) -> int:
        return self.projector.out_dim if self.projector is not None else self.backbone.cfg.output_dim

    def encode_image_raw(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone.image(images, self.image_prompts)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """Image features in the space of the class vectors (projected if a projector exists)."""
        raw = self.encode_image_raw(images)
        return raw if self.projector is None else self.projector(raw)

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.backbone.text(token_ids, self.text_prompts)


@dataclass
class ParameterPartition:
    trainable: dict[str, nn.Parameter]
    frozen: dict[str, nn.Parameter]

    def apply(self) -> "ParameterPartition":
        """Set ``requires_grad`` to match the partition."""
        for p in self.trainable.values():
            p.requires_grad_(True)
        for p in self.frozen.values():
            p.requires_grad_(False)
        return self


STAGES = ("teacher_pretrain", "student_distill", "projector_only", "full_finetune",
          "student_distill_own_text")


def named_model_parameters(teacher: nn.Module | None = None,
                           student: nn.Module | None = None) -> dict[str, nn.Parameter]:
    out: dict[str, nn.Parameter] = {}
    for prefix, module in (("teacher", teacher), ("student", student)):
        if module is not None:
            out.update({f"{prefix}.{n}": p for n, p in module.named_parameters()})
    return out


def partition_parameters(stage: str, teacher: Teacher | None = None,
                         student: Student | None = None) -> ParameterPartition:
    """Split every registered parameter into trainable and frozen sets for a stage."""
    if stage not in STAGES:
        raise ConfigError(f"unknown training stage {stage!r}; expected one of {STAGES}")
    params = named_model_parameters(teacher, student)
    if stage == "teacher_pretrain":
        prefixes = ("teacher.image_prompts.", "teacher.text_prompts.")
    elif stage == "student_distill":
        prefixes = ("student.image_prompts.", "student.projector.")
    elif stage == "student_distill_own_text":
        prefixes = ("student.image_prompts.", "student.text_prompts.")
    elif stage == "projector_only":
        prefixes = ("student.projector.",)
    else:
        prefixes = ("student.",)
    trainable = {n: p for n, p in params.items() if n.startswith(prefixes)}
    frozen = {n: p for n, p in params.items() if n not in trainable}
    if not trainable:
        raise ConfigError(f"stage {stage!r} has no trainable parameters in the given models")
    return ParameterPartition(trainable, frozen)


def checksum(named: dict[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    items = sorted(dict(named).items())
    h = hashlib.sha256()
    for name, t in items:
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
