"""Shared windowed-attention encoder with prompt-conditioned segmentation and
classification decoders.

Parameter names follow a fixed hierarchy that checkpoints and the adapter
protocol rely on::

    encoder.patch_embed.*            encoder.stage2..4.merge.*
    encoder.stage1..4.layer1..N.*    encoder.norm.*
    decoder.seg.layer1..3.*          decoder.seg.final.*      decoder.seg.head.*
    decoder.cls.layer1..3.*          decoder.cls.head.*
    projection.{seg|cls}.layer1..3.{weight|bias}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from promptus.prompts import (
    PROMPT_DIM,
    InvalidPromptVector,
    PromptSet,
    Task,
    encode_prompt_set,
    validate_prompt_vector,
)

NUM_DECODER_LAYERS = 3
BRANCHES = ("seg", "cls")


class ShapeMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class InvalidPrompt(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 4
    embed_dim: int = 48
    depths: tuple[int, ...] = (2, 2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    num_decoder_layers: int = NUM_DECODER_LAYERS
    num_seg_classes: int = 2
    num_cls_classes: int = 2
    prompt_dim: int = PROMPT_DIM
    prompt_enabled: bool = True

    def __post_init__(self):
        self.depths = tuple(int(depth) for depth in self.depths)
        self.num_heads = tuple(int(heads) for heads in self.num_heads)
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def grid_sides(self) -> list[int]:
        side = self.image_size // self.patch_size
        return [side // 2**stage for stage in range(self.num_stages)]

    @property
    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2**stage for stage in range(self.num_stages)]

    @property
    def decoder_dims(self) -> list[int]:
        """Channel width of decoder layers 1..3 (coarse to fine), shared by both branches."""
        return [self.embed_dim * 2 ** (self.num_stages - 1 - layer) for layer in range(1, self.num_decoder_layers + 1)]

    def validate(self) -> None:
        if self.num_decoder_layers != NUM_DECODER_LAYERS:
            raise ValueError(f"num_decoder_layers is fixed at {NUM_DECODER_LAYERS}")
        if self.num_stages != self.num_decoder_layers + 1:
            raise ValueError("encoder needs exactly num_decoder_layers + 1 stages")
        if len(self.num_heads) != self.num_stages:
            raise ValueError("num_heads must give one entry per stage")
        if self.prompt_dim != PROMPT_DIM:
            raise ValueError(f"prompt_dim must be {PROMPT_DIM}")
        factor = self.patch_size * 2 ** (self.num_stages - 1)
        if self.image_size % factor:
            raise ValueError(f"image_size {self.image_size} not divisible by {factor}")
        for side in self.grid_sides:
            if side % self.window_size:
                raise ValueError(f"window_size {self.window_size} does not divide grid side {side}")
        for dim, heads in zip(self.stage_dims, self.num_heads):
            if dim % heads:
                raise ValueError(f"stage dim {dim} not divisible by {heads} heads")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["depths"] = list(self.depths)
        out["num_heads"] = list(self.num_heads)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        return cls(**values)


def toy_config(**overrides) -> ModelConfig:
    """Small configuration used by tests and desk-scale experiments."""
    base = dict(image_size=64, patch_size=4, embed_dim=24, depths=(2, 2, 2, 2),
                num_heads=(2, 4, 8, 16), window_size=2)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# windowed attention blocks


def window_partition(grid: torch.Tensor, ws: int) -> torch.Tensor:
    """(batch, height, width, channels) -> (batch * windows, ws * ws, channels)"""
    batch, height, width, channels = grid.shape
    grid = grid.view(batch, height // ws, ws, width // ws, ws, channels)
    return grid.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, channels)


def window_reverse(windows: torch.Tensor, ws: int, height: int, width: int) -> torch.Tensor:
    batch = windows.shape[0] // ((height // ws) * (width // ws))
    grid = windows.view(batch, height // ws, width // ws, ws, ws, -1)
    return grid.permute(0, 1, 3, 2, 4, 5).reshape(batch, height, width, -1)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        ws = window_size
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        self.register_buffer("relative_position_index", rel[..., 0] * (2 * ws - 1) + rel[..., 1], persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        windows, count, channels = tokens.shape
        qkv = self.qkv(tokens).reshape(windows, count, 3, self.num_heads, channels // self.num_heads)
        query, key, value = qkv.permute(2, 0, 3, 1, 4)
        attn = (query * self.scale) @ key.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        attn = attn + bias.view(count, count, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            per_image = mask.shape[0]
            attn = attn.view(windows // per_image, per_image, self.num_heads, count, count) + mask[None, :, None]
            attn = attn.view(-1, self.num_heads, count, count)
        attn = attn.softmax(dim=-1)
        out = (attn @ value).transpose(1, 2).reshape(windows, count, channels)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, side: int, num_heads: int, window_size: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.side = side
        self.window_size = window_size
        # shifting is pointless when one window covers the whole grid
        self.shift = shift if side > window_size else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        if self.shift:
            self.register_buffer("attn_mask", self._shift_mask(), persistent=False)
        else:
            self.attn_mask = None

    def _shift_mask(self) -> torch.Tensor:
        ws, shift, side = self.window_size, self.shift, self.side
        img = torch.zeros(1, side, side, 1)
        regions = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
        cnt = 0
        for rows in regions:
            for cols in regions:
                img[:, rows, cols, :] = cnt
                cnt += 1
        win = window_partition(img, ws).squeeze(-1)
        mask = win[:, None, :] - win[:, :, None]
        return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        batch, length, channels = tokens.shape
        side = self.side
        grid = self.norm1(tokens).view(batch, side, side, channels)
        if self.shift:
            grid = torch.roll(grid, shifts=(-self.shift, -self.shift), dims=(1, 2))
        mask = self.attn_mask.to(grid.dtype) if self.attn_mask is not None else None
        windows = self.attn(window_partition(grid, self.window_size), mask)
        grid = window_reverse(windows, self.window_size, side, side)
        if self.shift:
            grid = torch.roll(grid, shifts=(self.shift, self.shift), dims=(1, 2))
        tokens = tokens + grid.reshape(batch, length, channels)
        return tokens + self.mlp(self.norm2(tokens))


class SwinLayer(nn.Sequential):
    """A stack of alternating regular / shifted window blocks at one resolution."""

    def __init__(self, dim, side, depth, num_heads, window_size, mlp_ratio):
        super().__init__(*[
            SwinBlock(dim, side, num_heads, window_size, 0 if index % 2 == 0 else window_size // 2, mlp_ratio)
            for index in range(depth)
        ])


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(1, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, image):
        return self.norm(self.proj(image).flatten(2).transpose(1, 2))


class PatchMerging(nn.Module):
    def __init__(self, dim: int, side: int):
        super().__init__()
        self.side = side
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, tokens):
        batch, _, channels = tokens.shape
        grid = tokens.view(batch, self.side, self.side, channels)
        grid = torch.cat([grid[:, 0::2, 0::2], grid[:, 1::2, 0::2], grid[:, 0::2, 1::2], grid[:, 1::2, 1::2]], -1)
        return self.reduction(self.norm(grid.view(batch, -1, 4 * channels)))


class PatchExpand(nn.Module):
    """Doubles (or multiplies by ``scale``) the grid side via a linear pixel shuffle."""

    def __init__(self, dim_in: int, dim_out: int, side: int, scale: int = 2):
        super().__init__()
        self.side, self.scale, self.dim_out = side, scale, dim_out
        self.expand = nn.Linear(dim_in, dim_out * scale * scale, bias=False)
        self.norm = nn.LayerNorm(dim_out)

    def forward(self, tokens):
        batch = tokens.shape[0]
        side, scale, dim = self.side, self.scale, self.dim_out
        grid = self.expand(tokens).view(batch, side, side, scale, scale, dim).permute(0, 1, 3, 2, 4, 5)
        return self.norm(grid.reshape(batch, (side * scale) ** 2, dim))


# --------------------------------------------------------------------------
# prompt projections


class PromptProjection(nn.Module):
    """Affine map from the prompt vector to one decoder layer's channel width.

    Zero-initialised so that a freshly built prompt model computes exactly the
    same function as its prompt-free counterpart.
    """

    def __init__(self, prompt_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(prompt_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def forward(self, prompt: torch.Tensor) -> torch.Tensor:
        return prompt @ self.weight + self.bias


# --------------------------------------------------------------------------
# network


@dataclass
class EncoderFeatures:
    stage_features: list[torch.Tensor]
    bottleneck: torch.Tensor


@dataclass
class ForwardOutput:
    bottleneck_embedding: torch.Tensor
    seg_logits: torch.Tensor | None = None
    cls_logits: torch.Tensor | None = None


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        for number, (dim, side, depth, heads) in enumerate(
            zip(cfg.stage_dims, cfg.grid_sides, cfg.depths, cfg.num_heads), start=1
        ):
            stage = nn.Module()
            if number > 1:
                stage.merge = PatchMerging(dim // 2, side * 2)
            for layer in range(1, depth + 1):
                shift = 0 if layer % 2 == 1 else cfg.window_size // 2
                stage.add_module(f"layer{layer}", SwinBlock(dim, side, heads, cfg.window_size, shift, cfg.mlp_ratio))
            self.add_module(f"stage{number}", stage)
        self.norm = nn.LayerNorm(cfg.stage_dims[-1])
        self.num_stages = cfg.num_stages

    def forward(self, image: torch.Tensor) -> EncoderFeatures:
        tokens = self.patch_embed(image)
        feats = []
        for number in range(1, self.num_stages + 1):
            for module in getattr(self, f"stage{number}").children():
                tokens = module(tokens)
            feats.append(tokens)
        bottleneck = self.norm(tokens)
        feats[-1] = bottleneck
        return EncoderFeatures(feats, bottleneck)


class DecoderLayer(nn.Module):
    """Resize step (upsample + skip fusion, or plain channel reduction) then window blocks.

    The prompt is added between the resize step and the blocks, i.e. to the
    feature that the layer's transformer blocks are about to process.
    """

    def __init__(self, dim_in, dim, side_out, depth, heads, window_size, mlp_ratio, upsample: bool):
        super().__init__()
        self.upsample = upsample
        if upsample:
            self.expand = PatchExpand(dim_in, dim, side_out // 2)
            self.fuse = nn.Linear(2 * dim, dim)
        else:
            self.reduce = nn.Linear(dim_in, dim)
        self.blocks = SwinLayer(dim, side_out, depth, heads, window_size, mlp_ratio)

    def resize(self, tokens, skip=None):
        if self.upsample:
            return self.fuse(torch.cat([self.expand(tokens), skip], dim=-1))
        return self.reduce(tokens)


class SegmentationDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        for layer in range(1, NUM_DECODER_LAYERS + 1):
            stage = cfg.num_stages - 1 - layer  # matching encoder stage (0-based)
            self.add_module(f"layer{layer}", DecoderLayer(
                cfg.stage_dims[stage + 1], cfg.stage_dims[stage], cfg.grid_sides[stage], cfg.depths[stage],
                cfg.num_heads[stage], cfg.window_size, cfg.mlp_ratio, upsample=True,
            ))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.final = PatchExpand(cfg.embed_dim, cfg.embed_dim, cfg.grid_sides[0], scale=cfg.patch_size)
        self.head = nn.Conv2d(cfg.embed_dim, cfg.num_seg_classes, kernel_size=1, bias=False)
        self.image_size = cfg.image_size


class ClassificationDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        side = cfg.grid_sides[-1]
        for layer in range(1, NUM_DECODER_LAYERS + 1):
            stage = cfg.num_stages - 1 - layer
            self.add_module(f"layer{layer}", DecoderLayer(
                cfg.stage_dims[stage + 1], cfg.stage_dims[stage], side, cfg.depths[stage],
                cfg.num_heads[stage], cfg.window_size, cfg.mlp_ratio, upsample=False,
            ))
        # no LayerNorm before the head: it would discard the pooled feature's scale
        self.head = nn.Linear(cfg.embed_dim, cfg.num_cls_classes)

    def reset_reductions(self):
        # Norm-preserving reductions. At std 0.02 each one shrinks the signal about
        # fourfold, and after three of them the blocks' residual branches drown it out.
        for number in range(1, NUM_DECODER_LAYERS + 1):
            reduce = getattr(self, f"layer{number}").reduce
            nn.init.orthogonal_(reduce.weight, gain=(reduce.in_features / reduce.out_features) ** 0.5)


def _init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class PromptedUSNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.decoder = nn.Module()
        self.decoder.seg = SegmentationDecoder(cfg)
        self.decoder.cls = ClassificationDecoder(cfg)
        self.apply(_init_weights)
        self.decoder.cls.reset_reductions()
        # built last, without touching the RNG, so prompt and prompt-free
        # models share every other initial weight under the same seed
        if cfg.prompt_enabled:
            self.projection = nn.Module()
            for branch_name in BRANCHES:
                branch = nn.Module()
                for layer, dim in enumerate(cfg.decoder_dims, start=1):
                    branch.add_module(f"layer{layer}", PromptProjection(cfg.prompt_dim, dim))
                self.projection.add_module(branch_name, branch)
        else:
            self.projection = None

    # -- helpers ---------------------------------------------------------

    def _projection(self, layer: int, branch: str) -> PromptProjection:
        if branch not in BRANCHES or not 1 <= layer <= NUM_DECODER_LAYERS:
            raise ValueError(f"no projection for layer {layer}, branch {branch!r}")
        return getattr(getattr(self.projection, branch), f"layer{layer}")

    def prompt_tensor(self, prompts, batch: int) -> torch.Tensor:
        """Accept PromptSets, encoded vectors, or a (batch, 15) tensor; return validated (batch, 15)."""
        dtype = next(self.parameters()).dtype
        if isinstance(prompts, PromptSet):
            prompts = [prompts]
        if isinstance(prompts, torch.Tensor):
            vectors = prompts.to(dtype)
        else:
            rows = [encode_prompt_set(item) if isinstance(item, PromptSet) else np.asarray(item, dtype=np.float32)
                    for item in prompts]
            vectors = torch.as_tensor(np.stack(rows) if rows else np.empty((0, PROMPT_DIM)), dtype=dtype)
        if vectors.dim() == 1:
            vectors = vectors.unsqueeze(0)
        if vectors.shape[0] == 1 and batch > 1:
            vectors = vectors.expand(batch, -1)
        if vectors.shape[0] != batch:
            raise InvalidPrompt(f"{vectors.shape[0]} prompts for a batch of {batch}")
        for row in vectors.detach().cpu().numpy():
            try:
                validate_prompt_vector(row)
            except InvalidPromptVector as exc:
                raise InvalidPrompt(str(exc)) from exc
        return vectors

    # -- operations ------------------------------------------------------

    def inject_prompt(self, tokens: torch.Tensor, prompt: torch.Tensor, layer: int, branch: str) -> torch.Tensor:
        """Add the projected prompt of (layer, branch) to every token of ``tokens`` (batch, length, channels)."""
        proj = self._projection(layer, branch)
        if tokens.shape[-1] != proj.bias.shape[0]:
            raise DimensionMismatch(f"feature width {tokens.shape[-1]} != projection width {proj.bias.shape[0]}")
        if prompt.dim() == 1:
            prompt = prompt.unsqueeze(0)
        return tokens + proj(prompt).unsqueeze(1)

    def encode(self, image: torch.Tensor) -> EncoderFeatures:
        if image.dim() == 2:
            image = image[None, None]
        elif image.dim() == 3:
            image = image.unsqueeze(1)
        size = self.config.image_size
        if image.dim() != 4 or image.shape[1] != 1 or image.shape[-2:] != (size, size):
            raise ShapeMismatch(f"expected (batch, 1, {size}, {size}) input, got {tuple(image.shape)}")
        return self.encoder(image)

    def _maybe_inject(self, tokens, prompt, layer, branch):
        if self.projection is None or prompt is None:
            return tokens
        return self.inject_prompt(tokens, prompt, layer, branch)

    def decode_segmentation(self, features: EncoderFeatures, prompt: torch.Tensor | None) -> torch.Tensor:
        dec = self.decoder.seg
        tokens = features.bottleneck
        skips = features.stage_features[:-1][::-1]
        for number in range(1, NUM_DECODER_LAYERS + 1):
            layer = getattr(dec, f"layer{number}")
            tokens = layer.resize(tokens, skips[number - 1])
            tokens = self._maybe_inject(tokens, prompt, number, "seg")
            tokens = layer.blocks(tokens)
        tokens = dec.final(dec.norm(tokens))
        batch, _, channels = tokens.shape
        side = self.config.image_size
        return dec.head(tokens.transpose(1, 2).reshape(batch, channels, side, side))

    def decode_classification(self, features: EncoderFeatures, prompt: torch.Tensor | None) -> torch.Tensor:
        dec = self.decoder.cls
        tokens = features.bottleneck
        for number in range(1, NUM_DECODER_LAYERS + 1):
            layer = getattr(dec, f"layer{number}")
            tokens = layer.resize(tokens)
            tokens = self._maybe_inject(tokens, prompt, number, "cls")
            tokens = layer.blocks(tokens)
        return dec.head(tokens.mean(dim=1))

    def forward(self, image: torch.Tensor, prompts) -> ForwardOutput:
        """Run the shared encoder then the branch selected by the task prompt.

        ``prompts`` is a PromptSet (applied to the whole batch) or a sequence of
        PromptSets, one per image; all must name the same task.
        """
        if isinstance(prompts, PromptSet):
            prompts = [prompts]
        prompts = list(prompts)
        tasks = {item.task for item in prompts}
        if len(tasks) != 1:
            raise InvalidPrompt(f"a batch must share a single task, got {sorted(task.value for task in tasks)}")
        features = self.encode(image)
        vectors = self.prompt_tensor(prompts, features.bottleneck.shape[0])
        emb = features.bottleneck.mean(dim=1)
        if tasks.pop() is Task.SEGMENTATION:
            return ForwardOutput(emb, seg_logits=self.decode_segmentation(features, vectors))
        return ForwardOutput(emb, cls_logits=self.decode_classification(features, vectors))

    # -- bookkeeping -----------------------------------------------------

    def projection_parameter_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters() if name.startswith("projection.")]


def build_model(cfg: ModelConfig, seed: int | None = None) -> PromptedUSNet:
    if seed is not None:
        torch.manual_seed(seed)
    return PromptedUSNet(cfg)


def count_parameters(model: PromptedUSNet) -> dict[str, int]:
    total = sum(param.numel() for param in model.parameters())
    proj = sum(param.numel() for name, param in model.named_parameters() if name.startswith("projection."))
    return {"total": total, "projection_only": proj}


def projection_count_closed_form(cfg: ModelConfig) -> int:
    if not cfg.prompt_enabled:
        return 0
    return len(BRANCHES) * sum(cfg.prompt_dim * dim + dim for dim in cfg.decoder_dims)
