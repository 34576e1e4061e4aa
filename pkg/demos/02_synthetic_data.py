"""
Synthetic organ / tumour samples
================================

"""

import numpy as np

from smaformer.data import CLASS_NAMES, augment, generate_sample, make_dataset

s = generate_sample(seed=11, height=32, width=32)
print("image", s.image.shape, s.image.dtype, "mask", s.mask.shape)

# class fractions and mean gray level per class
gray = s.image.mean(0)
for c, name in CLASS_NAMES.items():
    sel = s.mask == c
    print(f"{name:<20} {sel.mean():6.3f} of pixels, mean intensity {gray[sel].mean():.3f}")

# the mask as text, every other row: . background, o organ, # tumour
for row in s.mask[::2]:
    print("".join(".o#"[v] for v in row))

# flips and quarter turns keep image and mask aligned
a = augment(s, np.random.default_rng(0))
print("class histogram before", np.bincount(s.mask.ravel()), "after", np.bincount(a.mask.ravel()))

manifest, samples = make_dataset(20, seed=0, height=32, width=32)
print({k: len(v) for k, v in manifest.splits.items()})
