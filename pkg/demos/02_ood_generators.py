"""What each OOD generator does to a batch.

Every generator maps a batch to a same-shaped batch. This script prints a
small summary per kind and draws one jigsaw-shuffled image as ASCII so the
patch structure is visible.
"""

import numpy as np

from okd_forge import nets
from okd_forge.oodgen import KINDS, Augmentor

SHADES = " .:-=+*#%@"


def ascii_image(img):
    lo, hi = img.min(), img.max()
    levels = ((img - lo) / (hi - lo + 1e-12) * (len(SHADES) - 1)).round().astype(int)
    return "\n".join("   " + "".join(SHADES[v] * 2 for v in row) for row in levels)


def main():
    rng = np.random.default_rng(0)
    # four 1-channel 8x8 images with a bright diagonal gradient, plus a 3-channel batch
    ramp = np.add.outer(np.arange(8.0), np.arange(8.0))
    gray = np.stack([ramp + 10 * i for i in range(4)])[:, None]
    images = rng.normal(size=(4, 3, 16, 16))
    waves = rng.normal(size=(4, 1, 64))
    labels = np.arange(4)
    teacher = nets.build(nets.preset("teacher2d", 4, (3, 16, 16), seed=0))

    print("kind            shape            mean|A(x)-x|  min..max of A(x)")
    for kind in KINDS:
        aug = Augmentor(kind)
        x = waves if kind.startswith("wave") else images
        out = aug(x, np.random.default_rng(1), labels=labels, model=teacher)
        print(f"{kind:<15} {str(out.shape):<16} {np.abs(out - x).mean():>12.4f}  {out.min():.2f}..{out.max():.2f}")

    print("\nadv_gradient moves every pixel by exactly epsilon:")
    adv = Augmentor("adv_gradient", epsilon=0.03)(images, None, labels=labels, model=teacher)
    print(f"   distinct |A(x)-x| values: {np.unique(np.round(np.abs(adv - images), 12))}")

    print("\nOne image before and after jigsaw with k=16 (a 4x4 grid of 2x2 patches):")
    print(ascii_image(gray[0, 0]))
    shuffled = Augmentor("jigsaw", k=16)(gray, np.random.default_rng(5))
    print()
    print(ascii_image(shuffled[0, 0]))
    same = np.array_equal(np.sort(shuffled[0].ravel()), np.sort(gray[0].ravel()))
    print(f"   same pixel multiset: {same}")

    print("\nmixup stays inside the per-pixel hull of the batch:")
    mixed = Augmentor("mixup")(gray, np.random.default_rng(2))
    inside = (mixed >= gray.min(axis=0) - 1e-12).all() and (mixed <= gray.max(axis=0) + 1e-12).all()
    print(f"   inside hull: {inside}")


if __name__ == "__main__":
    main()
