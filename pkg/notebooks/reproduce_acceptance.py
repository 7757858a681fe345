"""Train the two desk-scale models the acceptance tests evaluate.

Runs the Full model and the "No auto." ablation (64x64, all available training
pairs, 15 epochs, batch 16) through the ablation-suite command, then copies the
final weights without optimizer state to ``artifacts/acceptance/``.

    python notebooks/reproduce_acceptance.py              # train, then export
    python notebooks/reproduce_acceptance.py RUN_DIR      # export an existing suite run

About 2.7 h per model on one CPU core.
"""

# %%
import json
import shutil
import sys
from pathlib import Path

from crossdis import cli
from crossdis.training import export_model

ROOT = Path(__file__).resolve().parents[1]
DEST = ROOT / "artifacts" / "acceptance"

# %% [markdown]
# Train both variants in one suite run, unless a finished run was given.

# %%
if len(sys.argv) > 1:
    run_dir = Path(sys.argv[1])
else:
    out = ROOT / "runs"
    code = cli.main(["--out", str(out), "ablation-suite", "--variants", "full,no-auto"])
    if code != 0:
        sys.exit(code)
    run_dir = sorted(out.glob("*-ablation-suite"))[-1]

# %% [markdown]
# Export the final epoch of each variant and keep the suite's small records.

# %%
DEST.mkdir(parents=True, exist_ok=True)
for name in ("full", "no-auto"):
    final = json.loads((run_dir / name / "summary.json").read_text())["final_checkpoint"]
    path = export_model(final, DEST / f"{name}.ckpt")
    shutil.copy(run_dir / name / "summary.json", DEST / f"{name}-summary.json")
    shutil.copy(run_dir / name / "metrics.jsonl", DEST / f"{name}-metrics.jsonl")
    print(name, "->", path)
if (run_dir / "ablation.csv").exists():
    shutil.copy(run_dir / "ablation.csv", DEST / "ablation.csv")
