"""Adapter for Hugging Face ``transformers`` CLIP checkpoints."""

from __future__ import annotations

import os

import torch
import torch.nn.functional as F

from sgma.surrogate.base import CapabilityError, Encoder, EncoderHandle, EncoderLoadError, VisualOutput

_MEAN = (0.48145466, 0.4578275, 0.40821073)
_STD = (0.26862954, 0.26130258, 0.27577711)


class HFCLIP(Encoder):
    """Wraps a ``transformers.CLIPModel``.

    Final-layer value vectors are captured with a forward hook on the last
    layer's ``v_proj``; [CLS] attention comes from eager attention weights.
    """

    def __init__(self, model, tokenizer, id: str, dtype: torch.dtype = torch.float32):
        super().__init__()
        vcfg = model.config.vision_config
        if getattr(model.config, "_attn_implementation", "eager") != "eager":
            model.config._attn_implementation = "eager"
            vcfg._attn_implementation = "eager"
        self.model = model.to(dtype).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self._dtype = dtype
        grid = vcfg.image_size // vcfg.patch_size
        self.handle = EncoderHandle(id, vcfg.image_size, (grid, grid), model.config.projection_dim, vcfg.hidden_size)
        layers = getattr(model.vision_model.encoder, "layers", None)
        if not layers or not hasattr(layers[-1].self_attn, "v_proj"):
            raise CapabilityError(f"{id}: vision tower does not expose self_attn.v_proj in its final layer")
        self._last_attn = layers[-1].self_attn
        self.mean = torch.tensor(_MEAN, dtype=self._dtype).view(1, 3, 1, 1)
        self.std = torch.tensor(_STD, dtype=self._dtype).view(1, 3, 1, 1)

    @classmethod
    def from_pretrained(cls, source: str, id: str | None = None, dtype: torch.dtype = torch.float32):
        try:
            from transformers import CLIPModel, CLIPTokenizer

            cache_dir = os.environ.get("SGMA_CACHE_DIR")
            model = CLIPModel.from_pretrained(source, cache_dir=cache_dir, attn_implementation="eager")
            tokenizer = CLIPTokenizer.from_pretrained(source, cache_dir=cache_dir)
        except Exception as exc:  # network, missing files, bad checkpoints
            raise EncoderLoadError(f"could not load CLIP weights from {source!r}: {exc}") from exc
        return cls(model, tokenizer, id or source, dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def visual(self, pixels: torch.Tensor) -> VisualOutput:
        captured = {}

        def hook(_module, _inputs, output):
            captured["v"] = output

        handle = self._last_attn.v_proj.register_forward_hook(hook)
        try:
            out = self.model.vision_model(
                pixel_values=(pixels.to(self._dtype) - self.mean) / self.std,
                output_attentions=True,
            )
        finally:
            handle.remove()
        if out.attentions is None or "v" not in captured:
            raise CapabilityError(f"{self.handle.id}: attention weights or value vectors were not exposed")
        hidden = out.last_hidden_state
        weights = out.attentions[-1]
        values = captured["v"] @ self._last_attn.out_proj.weight.T
        cls_output = hidden[:, 0]
        return VisualOutput(
            embedding=self.head(cls_output),
            all_tokens=self.model.vision_model.post_layernorm(hidden),
            attn_cls=weights[:, :, 0, 1:].mean(dim=1),
            values=values[:, 1:],
            cls_output=cls_output,
        )

    def head(self, cls_output: torch.Tensor) -> torch.Tensor:
        pooled = self.model.vision_model.post_layernorm(cls_output)
        return F.normalize(self.model.visual_projection(pooled), dim=-1)

    def text(self, texts: list[str]) -> tuple[torch.Tensor, list[bool]]:
        limit = self.model.config.text_config.max_position_embeddings
        full = self.tokenizer(texts, padding=False, truncation=False)["input_ids"]
        truncated = [len(ids) > limit for ids in full]
        batch = self.tokenizer(texts, padding=True, truncation=True, max_length=limit, return_tensors="pt")
        features = self.model.get_text_features(
            input_ids=batch["input_ids"], attention_mask=batch.get("attention_mask")
        )
        if not isinstance(features, torch.Tensor):  # newer transformers return a model output
            features = features.pooler_output
        return F.normalize(features, dim=-1), truncated
