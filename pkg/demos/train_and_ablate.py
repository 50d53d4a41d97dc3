"""Desk-scale training on synthetic centre-biased scenes, then the ablation.

Writes a small dataset under ``demo_out/``, trains DF-LBC, predicts one map,
and compares the three centre-bias variants. The short default schedule
runs in a few minutes; pass ``--full`` for the 500/100, three-seed setting
(about 20 minutes on one core).
"""
import sys
from pathlib import Path

from deepfix.cli import main

full = "--full" in sys.argv
out = Path("demo_out")
count, val, iters, seeds = (500, 100, 2000, 3) if full else (60, 20, 300, 1)

main(["synth", "--out", str(out / "data"), "--count", str(count), "--val", str(val),
      "--test", "4", "--seed", "0"])
manifest = str(out / "data" / "manifest.tsv")

main(["-v", "train", "--manifest", manifest, "--out", str(out / "lbc"), "--iters", str(iters)])
main(["predict", "--weights", str(out / "lbc" / "weights.dfx"), "--out", str(out / "pred"),
      str(out / "data" / "images" / f"{count + val:05d}.ppm")])
main(["evaluate", "--weights", str(out / "lbc" / "weights.dfx"), "--manifest", manifest,
      "--out", str(out / "test_report.tsv"), "--emd-grid", "16"])

# DF-No-LBC, DF-Explicit-CB and DF-LBC on the same data
main(["ablate", "--manifest", manifest, "--out", str(out / "ablation.tsv"), "--iters", str(iters),
      "--seeds", str(seeds), "--cb-weight", "0.5,1,2"])
