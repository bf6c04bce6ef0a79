"""The transformers CLIP adapter, on a tiny random model and (when cached) real weights."""

import os

import pytest
import torch
import torch.nn.functional as F

transformers = pytest.importorskip("transformers")

from sgma.saliency import semantic_mask  # noqa: E402
from sgma.surrogate.base import EncoderLoadError, embed_image, embed_text, forward_tokens  # noqa: E402
from sgma.surrogate.hf_clip import HFCLIP  # noqa: E402


class WordTokenizer:
    """Minimal tokenizer: one id per word, BOS/EOS framing, right padding."""

    def __init__(self, vocab_size=99):
        self.vocab_size = vocab_size

    def _ids(self, text):
        return [1] + [2 + hash(w) % (self.vocab_size - 3) for w in text.split()] + [self.vocab_size - 1]

    def __call__(self, texts, padding=False, truncation=False, max_length=None, return_tensors=None):
        ids = [self._ids(t) for t in texts]
        if truncation and max_length:
            ids = [i[: max_length - 1] + [self.vocab_size - 1] if len(i) > max_length else i for i in ids]
        if return_tensors != "pt":
            return {"input_ids": ids}
        width = max(len(i) for i in ids)
        mask = [[1] * len(i) + [0] * (width - len(i)) for i in ids]
        ids = [i + [0] * (width - len(i)) for i in ids]
        return {"input_ids": torch.tensor(ids), "attention_mask": torch.tensor(mask)}


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    config = transformers.CLIPConfig(
        text_config=dict(vocab_size=99, hidden_size=32, intermediate_size=37, num_hidden_layers=2,
                         num_attention_heads=4, max_position_embeddings=16, eos_token_id=98),
        vision_config=dict(image_size=32, patch_size=8, hidden_size=32, intermediate_size=37,
                           num_hidden_layers=2, num_attention_heads=4),
        projection_dim=16,
    )
    model = transformers.CLIPModel(config)
    return HFCLIP(model, WordTokenizer(), id="tiny-clip", dtype=torch.float64)


def test_tiny_adapter_shapes_and_internals(tiny):
    image = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    tokens = forward_tokens(tiny, image)
    assert tiny.handle.patch_grid == (4, 4)
    assert tokens.all_tokens.shape == (17, 32)
    assert tokens.values.shape == (16, 32)
    assert bool((tokens.attn_cls >= 0).all())
    assert abs(float(embed_image(tiny, image).vector.norm()) - 1) < 1e-5


def test_tiny_adapter_embedding_matches_reference_path(tiny):
    image = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    mean, std = tiny.mean, tiny.std
    with torch.no_grad():
        feats = tiny.model.get_image_features(pixel_values=(image.unsqueeze(0) - mean) / std)
        if not isinstance(feats, torch.Tensor):
            feats = feats.pooler_output
    assert torch.allclose(embed_image(tiny, image).vector, F.normalize(feats, dim=-1)[0], atol=1e-10)


def test_tiny_adapter_saliency_and_truncation(tiny):
    image = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    mask = semantic_mask(tiny, image, "a small dog")
    assert mask.values.shape == (32, 32)
    assert embed_text(tiny, " ".join(["word"] * 40)).metadata["truncated"] is True
    assert embed_text(tiny, "a dog").metadata["truncated"] is False


@pytest.fixture(scope="module")
def pretrained():
    if not os.environ.get("SGMA_ALLOW_DOWNLOAD"):
        os.environ.setdefault("HF_HUB_OFFLINE", "1")
    try:
        return HFCLIP.from_pretrained("openai/clip-vit-base-patch32", id="clip-vit-b32")
    except EncoderLoadError as exc:
        pytest.skip(f"pretrained CLIP weights unavailable: {exc}")


def test_pretrained_text_neighbours(pretrained):
    dog, puppy, sheet = (embed_text(pretrained, t).vector for t in ("dog", "puppy", "spreadsheet"))
    assert float(dog @ puppy) > float(dog @ sheet)


def test_pretrained_zero_shot_cat_photo(pretrained):
    from skimage import data

    from sgma.images import from_uint8

    image = torch.nn.functional.interpolate(from_uint8(data.chelsea()).unsqueeze(0), size=(224, 224),
                                            mode="bicubic", align_corners=False)[0].clamp(0, 1)
    v = embed_image(pretrained, image).vector
    cat = embed_text(pretrained, "a photo of a cat").vector
    truck = embed_text(pretrained, "a photo of a truck").vector
    assert float(v @ cat) > float(v @ truck)
