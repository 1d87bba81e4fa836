"""Patch swap on two same-class glyphs, printed as text.

Each glyph holds a strong motif in one 8x8 cell and a faint motif in another.
Swapping a random subset of cells between two images of the same class can
hand both strong motifs to one image and leave the other with faint evidence
only; the distillation term then asks the network to agree on the pair.

    python demos/swap_walkthrough.py [--seed 3]
"""

import argparse

import numpy as np

from patchswap.augment import apply_patch_swap, make_swap_mask
from patchswap.data import GlyphSpec, gen_two_part_glyphs

SHADES = " .:-=+*#%@"


def show(img, cell):
    rows = []
    for r in range(img.shape[0]):
        line = "".join(SHADES[min(9, int(v * 9.999))] for v in img[r])
        rows.append(" ".join(line[c : c + cell] for c in range(0, len(line), cell)))
        if (r + 1) % cell == 0:
            rows.append("")
    return "\n".join(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    spec = GlyphSpec(noise_std=0.05, train_per_class=4, test_per_class=1)
    train, _ = gen_two_part_glyphs(spec)
    a, b = np.flatnonzero(train.labels == 0)[:2]
    x_a, x_b = train.images[a], train.images[b]
    rng = np.random.default_rng(args.seed)
    grid = spec.image_size // spec.cell
    mask = make_swap_mask(grid, grid, rng)
    s_a, s_b = apply_patch_swap(x_a, x_b, mask, spec.cell)

    print(f"class 0, images {a} and {b}; swapping {mask.count} of {grid * grid} cells:")
    print("\n".join("  " + " ".join("X" if v else "." for v in row) for row in mask.selected))
    for title, img in (("x_a", x_a), ("x_b", x_b), ("swapped x_a", s_a), ("swapped x_b", s_b)):
        print(f"\n{title}\n{show(img[0], spec.cell)}")
    back_a, back_b = apply_patch_swap(s_a, s_b, mask, spec.cell)
    print("swapping again restores both images:", np.array_equal(back_a, x_a) and np.array_equal(back_b, x_b))


if __name__ == "__main__":
    main()
