"""The whole pipeline at desk scale: synthetic cohort, encoder, graphs, 5-fold CV.

Equivalent to ``cellgraph synth`` followed by ``cellgraph run-cv`` with a
smaller cohort so it finishes in a few minutes on one core.

    python demos/04_cross_validation.py [work_dir]
"""
import sys
import tempfile
from pathlib import Path

from cellgraph.config import RunConfig
from cellgraph.pipeline import run_cv, write_synthetic_dataset

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cellgraph-"))
data = work / "data"
write_synthetic_dataset(data, 30, side=384, seed=0)
cfg = RunConfig(data_root=str(data), output_dir=str(work / "run"), synth_side=384,
                cpc_patches=2048, cpc_epochs=4, epochs=10)
metrics = run_cv(cfg)
print(metrics.table())
print(f"\nartifacts in {work / 'run'} (metrics.json, cpc.json, graphs/, fold*/roc.tsv)")
