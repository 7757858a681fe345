"""What the shared and exclusive codes carry, measured on a trained checkpoint.

    python notebooks/03_evaluate.py [CHECKPOINT]

Defaults to the Full desk model in ``artifacts/acceptance``.
"""

# %%
import sys
from pathlib import Path

import numpy as np

from crossdis import datagen
from crossdis import evaluate as ev
from crossdis.model import load_checkpoint

ckpt = sys.argv[1] if len(sys.argv) > 1 else "artifacts/acceptance/full.ckpt"
OUT = Path("figures")
model, header, _ = load_checkpoint(ckpt)
test = datagen.mnist_cdcb("test", seed=0, resolution=model.cfg.resolution)
X, Y, L = test.images("X"), test.images("Y"), test.labels
print("step", header["training_step"], "| test pairs", len(test))

# %% [markdown]
# Cross-domain retrieval. Shared codes should find the same digit in the other
# domain; exclusive codes should do no better than chance (0.1 for labels).

# %%
for kind in ev.FEATURE_KINDS:
    for src, q, db in (("X", X, Y), ("Y", Y, X)):
        r = ev.cross_domain_retrieval(model if kind != "pixels" else None, q, db, src, kind, L, L, k=1)
        print(f"{kind:9s} {src}->{'Y' if src == 'X' else 'X'}  pair R@1 {r.recall_at_1:.3f}  "
              f"label R@1 {r.label_recall_at_1:.3f}")

# %% [markdown]
# Many outputs per input: fixed shared code, eight z ~ N(0, I).

# %%
rows = [[X[i]] + ev.sample_translations(model, X[i], "X", 8, seed=i) for i in range(6)]
ev.save_grid(rows, OUT / "samples_cd2cb.png")

# %% [markdown]
# Visual analogies: query digit, reference color. Columns are query, reference,
# output and the rendered ground truth.

# %%
q, r = ev.analogy_pairs(len(test), 8, seed=0)
for d in ("X", "Y"):
    imgs = test.images(d)
    out = ev.visual_analogy(model, imgs[q], imgs[r], d)
    truth = ev.analogy_ground_truth(test, q, r, d)
    ev.save_grid([[imgs[a], imgs[b], o, t] for a, b, o, t in zip(q, r, out, truth)], OUT / f"analogy_{d}.png")
    print(d, ev.analogy_benchmark(model, test, d, 1000, 0).to_dict())

# %% [markdown]
# Interpolating the exclusive code sweeps the color; the shared code morphs the digit.

# %%
for part in ("exclusive", "shared"):
    rows = [ev.interpolate(model, Y[2 * i], Y[2 * i + 1], "Y", part, 8) for i in range(4)]
    ev.save_grid(rows, OUT / f"interpolate_{part}.png")

# %% [markdown]
# The exclusive codes should look like draws from N(0, I).

# %%
for d in ("X", "Y"):
    _, e = ev.encode_images(model, test.images(d), d)
    print(d, "mean", np.round(e.mean(0), 2), "std", np.round(e.std(0), 2))
