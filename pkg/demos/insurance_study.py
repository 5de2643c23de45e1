"""Insurance claims: embeddings plus a two-layer network against linear baselines.

A reduced run (5000 policies, smoke grid) that finishes in under a minute.
Pass an output directory to keep results.csv, manifest.json and the
learning curves.
"""
import sys

from deepbiz import experiments as ex

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else None
    config = ex.ExperimentConfig("insurance", n=5000, grid="smoke",
                                 models=["majority", "ridge", "forest", "dnn2"], out_dir=out)
    print(ex.run_case_study(config).to_text())
