"""A short training run to watch the losses move.

The desk configuration is 64x64 images, batch 16, Adam(2e-4, 0.5, 0.999) and
loss weights 1 / 0.1 / 100 / 10. Here we cut it to 800 pairs and one epoch so
it finishes in a couple of minutes per 50 steps on a CPU.
"""

# %%
import json
import logging
from dataclasses import replace
from pathlib import Path

from crossdis.training import PRESETS, train

logging.basicConfig(level=logging.INFO)
cfg = replace(PRESETS["desk"], epochs=1, train_count=800)
run = Path("runs/short")
ckpt = train(cfg, run, log_every=10)

# %% [markdown]
# The L1 terms (cross-domain reconstruction and latent reconstruction) fall
# steadily; the WGAN terms wander because the critic output has no fixed offset.

# %%
rows = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
for r in rows[::10]:
    print(r["step"], {k: round(r[k], 3) for k in ("L_auto_X", "L_auto_Y", "L_recon_X", "L_S", "total")})
print("checkpoint:", ckpt)
