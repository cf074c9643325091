"""
Classifying images from their latents
=====================================

Images are encoded once; the classifier never sees pixels. Labels here are
the dominant colour channel of each synthetic image, which the latents must
carry for the task to be solvable.

Run:  python demos/classify_latents.py
"""

import numpy as np

from functa.classify import ClassifierConfig, classify_eval, classify_train
from functa.data import synthetic_images
from functa.field import SirenConfig
from functa.meta import MetaConfig, build_functaset, init_meta_state, meta_train

images = synthetic_images(600, 16, seed=7)
labels = images.mean(axis=(1, 2)).argmax(axis=1)
print("class counts:", np.bincount(labels))

state = init_meta_state(SirenConfig(2, 3, 32, 3, 30.0), (4, 4, 8), interpolation="nearest", coord_scheme="per_patch", resolution=16)
state = meta_train(images[:200], MetaConfig(outer_lr=1e-3, batch_size=16, iterations=300), state)
fs = build_functaset(state, images, labels)
print(f"encoded {len(fs)} images, mean PSNR {np.nanmean(fs.psnr):.2f} dB")

train, test = np.arange(450), np.arange(450, 600)

# a small transformer that reads the 16 latent cells as tokens,
# and an MLP on the flattened latent
for arch in ("token_transformer", "residual_mlp"):
    cfg = ClassifierConfig(arch=arch, num_classes=3, width=64, ffw_width=128, epochs=40, batch_size=32, ema_decay=0.99)
    clf = classify_train(fs, cfg, train)
    print(f"{arch:18s} train {classify_eval(clf, fs, train):.3f}  test {classify_eval(clf, fs, test):.3f}")

# the majority class is the baseline to beat
print(f"majority baseline  test {np.mean(labels[test] == np.bincount(labels[train]).argmax()):.3f}")
