"""
Network backbones.

- WindowTransformerEncoder / WindowTransformerDecoder: small shifted-window
  attention transformer (reference configuration for the source codec)
- ConvEncoder / ConvDecoder: convolutional fallback for desk-scale runs
- TransformerBlock: plain pre-norm transformer block (channel codec)

Encoders map a (B, C, H, W) image batch to (B, M) logits; decoders map
(B, M) real-valued bits back to (B, C, H, W) values in (0, 1).
"""

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

BACKBONES = ("swin", "conv")


class Mlp(nn.Module):
    def __init__(self, dim, hidden_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


# =============================================================================
# WINDOWED ATTENTION
# =============================================================================


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window, with relative position bias"""

    def __init__(self, dim, num_heads, window_size):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5

        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

        coords = torch.stack(
            torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij")
        ).flatten(1)
        relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
        relative = relative + (window_size - 1)
        index = relative[..., 0] * (2 * window_size - 1) + relative[..., 1]
        self.register_buffer("relative_position_index", index, persistent=False)

    def forward(self, x, mask=None):
        # x: (B * num_windows, T, dim)
        BW, T, C = x.shape
        q, k, v = rearrange(
            self.qkv(x), "b t (k h e) -> k b h t e", k=3, h=self.num_heads
        )
        attn = (q * self.scale) @ k.transpose(-2, -1)

        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        attn = attn + bias.reshape(T, T, -1).permute(2, 0, 1).unsqueeze(0)

        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(BW // nW, nW, self.num_heads, T, T) + mask[None, :, None]
            attn = attn.view(BW, self.num_heads, T, T)

        out = attn.softmax(dim=-1) @ v
        return self.proj(rearrange(out, "b h t e -> b t (h e)"))


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, grid_size, window_size, shift_size=0, mlp_ratio=2.0):
        super().__init__()
        gh, gw = grid_size
        if window_size >= min(gh, gw):
            window_size = min(gh, gw)
            shift_size = 0
        if gh % window_size or gw % window_size:
            raise ValueError(f"window {window_size} does not tile grid {grid_size}")

        self.grid_size = (gh, gw)
        self.window_size = window_size
        self.shift_size = shift_size

        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

        if shift_size:
            self.register_buffer("attn_mask", self._shift_mask(), persistent=False)
        else:
            self.attn_mask = None

    def _partition(self, x):
        ws = self.window_size
        return rearrange(x, "b (nh wh) (nw ww) c -> (b nh nw) (wh ww) c", wh=ws, ww=ws)

    def _merge(self, windows, batch):
        ws = self.window_size
        gh, gw = self.grid_size
        return rearrange(
            windows,
            "(b nh nw) (wh ww) c -> b (nh wh) (nw ww) c",
            b=batch, nh=gh // ws, nw=gw // ws, wh=ws, ww=ws,
        )

    def _shift_mask(self):
        gh, gw = self.grid_size
        ws, s = self.window_size, self.shift_size
        regions = torch.zeros(1, gh, gw, 1)
        label = 0
        for hs in (slice(0, -ws), slice(-ws, -s), slice(-s, None)):
            for wsl in (slice(0, -ws), slice(-ws, -s), slice(-s, None)):
                regions[:, hs, wsl, :] = label
                label += 1
        windows = self._partition(regions).squeeze(-1)
        mask = windows.unsqueeze(1) - windows.unsqueeze(2)
        return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)

    def forward(self, x):
        B, N, C = x.shape
        gh, gw = self.grid_size

        shortcut = x
        x = self.norm1(x).view(B, gh, gw, C)
        if self.shift_size:
            x = torch.roll(x, shifts=(-self.shift_size, -self.shift_size), dims=(1, 2))

        x = self._merge(self.attn(self._partition(x), self.attn_mask), B)

        if self.shift_size:
            x = torch.roll(x, shifts=(self.shift_size, self.shift_size), dims=(1, 2))
        x = shortcut + x.reshape(B, N, C)
        return x + self.mlp(self.norm2(x))


def _swin_stack(dim, depth, num_heads, grid_size, window_size):
    return nn.ModuleList(
        SwinBlock(
            dim,
            num_heads,
            grid_size,
            window_size,
            shift_size=0 if i % 2 == 0 else window_size // 2,
        )
        for i in range(depth)
    )


class WindowTransformerEncoder(nn.Module):
    def __init__(
        self,
        image_shape,
        bit_count,
        embed_dim=64,
        depth=2,
        num_heads=4,
        window_size=4,
        patch_size=2,
    ):
        super().__init__()
        H, W, C = image_shape
        if H % patch_size or W % patch_size:
            raise ValueError(f"patch {patch_size} does not tile image {H}x{W}")
        self.grid_size = (H // patch_size, W // patch_size)
        tokens = self.grid_size[0] * self.grid_size[1]

        self.patch_embed = nn.Conv2d(C, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, tokens, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = _swin_stack(embed_dim, depth, num_heads, self.grid_size, window_size)
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(tokens * embed_dim, bit_count)

    def forward(self, s):
        x = rearrange(self.patch_embed(s), "b c h w -> b (h w) c") + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x).flatten(1))


class WindowTransformerDecoder(nn.Module):
    def __init__(
        self,
        image_shape,
        bit_count,
        embed_dim=64,
        depth=2,
        num_heads=4,
        window_size=4,
        patch_size=2,
    ):
        super().__init__()
        H, W, C = image_shape
        if H % patch_size or W % patch_size:
            raise ValueError(f"patch {patch_size} does not tile image {H}x{W}")
        self.patch_size = patch_size
        self.grid_size = (H // patch_size, W // patch_size)
        self.embed_dim = embed_dim
        tokens = self.grid_size[0] * self.grid_size[1]

        self.embed = nn.Linear(bit_count, tokens * embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, tokens, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = _swin_stack(embed_dim, depth, num_heads, self.grid_size, window_size)
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, patch_size * patch_size * C)

    def forward(self, b):
        x = self.embed(b).view(b.shape[0], -1, self.embed_dim) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.head(self.norm(x))
        p = self.patch_size
        x = rearrange(
            x, "b (h w) (p1 p2 c) -> b c (h p1) (w p2)",
            h=self.grid_size[0], w=self.grid_size[1], p1=p, p2=p,
        )
        return torch.sigmoid(x)


# =============================================================================
# CONVOLUTIONAL FALLBACK
# =============================================================================


class ConvEncoder(nn.Module):
    def __init__(self, image_shape, bit_count, embed_dim=32, **_):
        super().__init__()
        H, W, C = image_shape
        if H % 4 or W % 4:
            raise ValueError(f"conv backbone needs H, W divisible by 4, got {H}x{W}")
        self.features = nn.Sequential(
            nn.Conv2d(C, embed_dim, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(embed_dim, 2 * embed_dim, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(2 * embed_dim, 2 * embed_dim, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.head = nn.Linear(2 * embed_dim * (H // 4) * (W // 4), bit_count)

    def forward(self, s):
        return self.head(self.features(s).flatten(1))


class ConvDecoder(nn.Module):
    def __init__(self, image_shape, bit_count, embed_dim=32, **_):
        super().__init__()
        H, W, C = image_shape
        if H % 4 or W % 4:
            raise ValueError(f"conv backbone needs H, W divisible by 4, got {H}x{W}")
        self.start_shape = (2 * embed_dim, H // 4, W // 4)
        self.embed = nn.Linear(bit_count, 2 * embed_dim * (H // 4) * (W // 4))
        self.body = nn.Sequential(
            nn.GELU(),
            nn.ConvTranspose2d(2 * embed_dim, embed_dim, 4, stride=2, padding=1),
            nn.GELU(),
            nn.ConvTranspose2d(embed_dim, embed_dim, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(embed_dim, C, 3, padding=1),
        )

    def forward(self, b):
        x = self.embed(b).view(b.shape[0], *self.start_shape)
        return torch.sigmoid(self.body(x))


def build_source_backbone(kind, image_shape, bit_count, **options):
    """(encoder, decoder) pair for the source codec"""
    if kind == "swin":
        return (
            WindowTransformerEncoder(image_shape, bit_count, **options),
            WindowTransformerDecoder(image_shape, bit_count, **options),
        )
    if kind == "conv":
        embed_dim = options.get("embed_dim", 32)
        return (
            ConvEncoder(image_shape, bit_count, embed_dim=embed_dim),
            ConvDecoder(image_shape, bit_count, embed_dim=embed_dim),
        )
    raise ValueError(f"unknown backbone {kind!r}, expected one of {BACKBONES}")


# =============================================================================
# PLAIN TRANSFORMER
# =============================================================================


class TransformerBlock(nn.Module):
    """Pre-norm global self-attention block over a token sequence"""

    def __init__(self, dim, num_heads, mlp_ratio=2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))
