"""A small CLIP-style dual encoder trained on synthetic desk scenes.

Architecturally it mirrors CLIP ViT (pre-LN blocks, [CLS] pooling, linear
projection heads), just much smaller, so the attack exercises the same
internals it would on a full-size model while running on a laptop CPU.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from sgma.surrogate.base import Encoder, EncoderHandle, EncoderLoadError, VisualOutput

PACKAGED_WEIGHTS = Path(__file__).resolve().parent.parent / "data" / "desk_clip.pt"

_MEAN = (0.48145466, 0.4578275, 0.40821073)
_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class DeskCLIPConfig:
    resolution: int = 64
    patch_size: int = 8
    vision_width: int = 96
    vision_layers: int = 4
    vision_heads: int = 4
    text_width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    context_length: int = 16
    embed_dim: int = 64


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, mask=None):
        b, t, c = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(c // self.heads)
        if mask is not None:
            scores = scores + mask
        weights = scores.softmax(dim=-1)
        merged = (weights @ v).transpose(1, 2).reshape(b, t, c)
        values = v.transpose(1, 2).reshape(b, t, c)
        return self.out(merged), weights, values


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, mask=None):
        attended, weights, values = self.attn(self.ln_1(x), mask)
        x = x + attended
        x = x + self.mlp(self.ln_2(x))
        return x, weights, values


class VisionTower(nn.Module):
    def __init__(self, cfg: DeskCLIPConfig):
        super().__init__()
        grid = cfg.resolution // cfg.patch_size
        self.conv = nn.Conv2d(3, cfg.vision_width, cfg.patch_size, stride=cfg.patch_size, bias=False)
        self.cls = nn.Parameter(torch.randn(cfg.vision_width) * 0.02)
        self.pos = nn.Parameter(torch.randn(grid * grid + 1, cfg.vision_width) * 0.02)
        self.ln_pre = nn.LayerNorm(cfg.vision_width)
        self.blocks = nn.ModuleList(Block(cfg.vision_width, cfg.vision_heads) for _ in range(cfg.vision_layers))
        self.ln_post = nn.LayerNorm(cfg.vision_width)
        self.proj = nn.Parameter(torch.randn(cfg.vision_width, cfg.embed_dim) * cfg.vision_width**-0.5)

    def forward(self, x):
        x = self.conv(x).flatten(2).transpose(1, 2)
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = self.ln_pre(torch.cat([cls, x], dim=1) + self.pos)
        for block in self.blocks:
            x, weights, values = block(x)
        # value vectors mapped into the residual stream (output projection, no bias)
        values = values @ self.blocks[-1].attn.out.weight.T
        return x, weights, values


class TextTower(nn.Module):
    def __init__(self, cfg: DeskCLIPConfig, vocab_size: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, cfg.text_width)
        self.pos = nn.Parameter(torch.randn(cfg.context_length, cfg.text_width) * 0.01)
        self.blocks = nn.ModuleList(Block(cfg.text_width, cfg.text_heads) for _ in range(cfg.text_layers))
        self.ln_final = nn.LayerNorm(cfg.text_width)
        self.proj = nn.Parameter(torch.randn(cfg.text_width, cfg.embed_dim) * cfg.text_width**-0.5)
        mask = torch.full((cfg.context_length, cfg.context_length), float("-inf")).triu(1)
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, ids, eos_positions):
        x = self.embed(ids) + self.pos
        for block in self.blocks:
            x, _, _ = block(x, self.mask.to(x.dtype))
        x = self.ln_final(x)
        pooled = x[torch.arange(x.shape[0]), eos_positions]
        return pooled @ self.proj


class WordTokenizer:
    """Lowercased word-level tokenizer over a closed vocabulary."""

    PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"

    def __init__(self, words: list[str], context_length: int):
        self.itos = [self.PAD, self.SOS, self.EOS, self.UNK] + list(words)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.context_length = context_length

    def encode(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor, list[bool]]:
        ids = torch.zeros(len(texts), self.context_length, dtype=torch.long)
        eos = torch.zeros(len(texts), dtype=torch.long)
        truncated = []
        room = self.context_length - 2
        for row, text in enumerate(texts):
            words = re.findall(r"[a-z0-9]+", text.lower())
            truncated.append(len(words) > room)
            tokens = [self.SOS] + words[:room] + [self.EOS]
            for col, word in enumerate(tokens):
                ids[row, col] = self.stoi.get(word, self.stoi[self.UNK])
            eos[row] = len(tokens) - 1
        return ids, eos, truncated


class DeskCLIPModel(nn.Module):
    def __init__(self, cfg: DeskCLIPConfig, words: list[str]):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = WordTokenizer(words, cfg.context_length)
        self.visual = VisionTower(cfg)
        self.text = TextTower(cfg, len(self.tokenizer.itos))
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
        self.register_buffer("mean", torch.tensor(_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_STD).view(1, 3, 1, 1))

    def encode_image(self, pixels):
        hidden, _, _ = self.visual((pixels - self.mean) / self.std)
        return F.normalize(self.visual.ln_post(hidden[:, 0]) @ self.visual.proj, dim=-1)

    def encode_text(self, texts: list[str]):
        ids, eos, _ = self.tokenizer.encode(texts)
        return F.normalize(self.text(ids.to(self.mean.device), eos.to(self.mean.device)), dim=-1)

    def save(self, path: str | Path) -> None:
        state = {k: v.float() if v.is_floating_point() else v for k, v in self.state_dict().items()}
        torch.save({"config": asdict(self.cfg), "words": self.tokenizer.itos[4:], "state": state}, path)

    @classmethod
    def load(cls, path: str | Path) -> "DeskCLIPModel":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError as exc:
            raise EncoderLoadError(f"desk-clip weights not found at {path}") from exc
        model = cls(DeskCLIPConfig(**blob["config"]), blob["words"])
        model.load_state_dict(blob["state"])
        return model.eval()


class DeskCLIP(Encoder):
    """Encoder adapter around :class:`DeskCLIPModel`."""

    def __init__(self, model: DeskCLIPModel, id: str = "desk-clip", dtype: torch.dtype = torch.float32):
        super().__init__()
        self.model = model.to(dtype).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        cfg = model.cfg
        grid = cfg.resolution // cfg.patch_size
        self.handle = EncoderHandle(id, cfg.resolution, (grid, grid), cfg.embed_dim, cfg.vision_width)
        self._dtype = dtype

    @classmethod
    def pretrained(cls, path: str | Path | None = None, dtype: torch.dtype = torch.float32, id: str = "desk-clip"):
        return cls(DeskCLIPModel.load(path or PACKAGED_WEIGHTS), id=id, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def visual(self, pixels: torch.Tensor) -> VisualOutput:
        m = self.model
        hidden, weights, values = m.visual((pixels.to(self._dtype) - m.mean) / m.std)
        cls_output = hidden[:, 0]
        return VisualOutput(
            embedding=self.head(cls_output),
            all_tokens=m.visual.ln_post(hidden),
            attn_cls=weights[:, :, 0, 1:].mean(dim=1),
            values=values[:, 1:],
            cls_output=cls_output,
        )

    def head(self, cls_output: torch.Tensor) -> torch.Tensor:
        m = self.model
        return F.normalize(m.visual.ln_post(cls_output) @ m.visual.proj, dim=-1)

    def text(self, texts: list[str]) -> tuple[torch.Tensor, list[bool]]:
        ids, eos, truncated = self.model.tokenizer.encode(texts)
        return F.normalize(self.model.text(ids, eos), dim=-1), truncated
