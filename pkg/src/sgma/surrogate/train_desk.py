"""Contrastive pretraining for the bundled desk-clip encoder.

    python -m sgma.surrogate.train_desk --steps 4000 --out src/sgma/data/desk_clip.pt

Scenes are rendered on the fly from :mod:`sgma.desk`; the pinned desk corpus
seed is never used for training.
"""

from __future__ import annotations

import argparse
import logging
import time

import numpy as np
import torch
import torch.nn.functional as F

from sgma import desk
from sgma.surrogate.desk_clip import PACKAGED_WEIGHTS, DeskCLIPConfig, DeskCLIPModel

logger = logging.getLogger(__name__)


class CropBank:
    """Pre-cut photo crops reused with random flips and quarter turns."""

    def __init__(self, rng: np.random.Generator, size: int, count: int = 3000):
        self.crops = np.stack([desk._crop(rng, size) for _ in range(count)])

    def __call__(self, rng: np.random.Generator, size: int) -> np.ndarray:
        patch = self.crops[rng.integers(len(self.crops))]
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
        return np.rot90(patch, int(rng.integers(4)))


def make_batch(rng: np.random.Generator, batch_size: int, size: int, crop=None):
    images, captions = [], []
    for _ in range(batch_size):
        objects = desk.random_objects(rng)
        images.append(desk.render(objects, rng, size, crop))
        captions.append(desk.describe(objects, rng))
    pixels = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
    return pixels, captions


def train(steps: int, batch_size: int = 128, lr: float = 1e-3, seed: int = 0) -> DeskCLIPModel:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = DeskCLIPConfig()
    model = DeskCLIPModel(cfg, desk.vocabulary())
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.05)
    warmup = max(1, steps // 20)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warmup) * 0.5 * (1 + np.cos(np.pi * min(1.0, s / steps)))
    )
    bank = CropBank(rng, cfg.resolution)
    start = time.time()
    for step in range(steps):
        pixels, captions = make_batch(rng, batch_size, cfg.resolution, bank)
        img = model.encode_image(pixels)
        txt = model.encode_text(captions)
        logits = model.logit_scale.exp().clamp(max=100) * img @ txt.T
        # identical captions in a batch are not negatives of each other
        same = torch.tensor([[a == b for b in captions] for a in captions], dtype=torch.float32)
        targets = same / same.sum(dim=1, keepdim=True)
        loss = 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 100 == 0 or step == steps - 1:
            acc = (logits.argmax(1) == torch.arange(batch_size)).float().mean().item()
            logger.info("step %d loss %.4f acc %.3f (%.0fs)", step, loss.item(), acc, time.time() - start)
    return model.eval()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--steps", type=int, default=4000)
    parser.add_argument("--batch-size", type=int, default=128)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=str(PACKAGED_WEIGHTS))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    model = train(args.steps, args.batch_size, args.lr, args.seed)
    model.save(args.out)
    logger.info("saved %s", args.out)


if __name__ == "__main__":
    main()
