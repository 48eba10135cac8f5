"""Synthetic scenes and the command-line pipeline."""

# %%
import json
import tempfile
from pathlib import Path

from deforest_cd.cli import main

# %%
with tempfile.TemporaryDirectory() as d:
    d = Path(d)
    main(["synth", "--out", str(d / "s"), "--size", "256", "--blobs", "10", "--tile", "64"])
    main(["train-ensemble", "--manifest", str(d / "s/producers_train.json"), "--out", str(d / "w.fcnw"), "--epochs", "20", "--lr", "1e-3"])
    main(["vote", "--manifest", str(d / "s/producers_test.json"), "--mode", "fcn", "--weights", str(d / "w.fcnw"), "--out", str(d / "fcn")])
    main(["evaluate", "--manifest", str(d / "s/producers_test.json"), "--pred", f"fcn={d / 'fcn'}"])
    print(json.loads((d / "s/synth.json").read_text())["producers"])
