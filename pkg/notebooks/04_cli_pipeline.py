"""
A recorded pipeline from the command line
==========================================

Every subcommand writes a manifest next to its outputs. ``rerun`` repeats a
recorded run and checks that each output comes back byte for byte.
"""

import json
import tempfile
from pathlib import Path

from overinterp.cli import main

out = Path(tempfile.mkdtemp())
shape = ["--shape", "8,8,3"]


def run(*argv):
    code = main([str(a) for a in argv] + ["--out", str(out)])
    print("exit", code, "<-", argv[0])
    return code


run("make-synth", "--n", "300", "--shape", "8,8,3", "--output", "train.bin", "--name", "train-data")
run("make-synth", "--n", "60", "--shape", "8,8,3", "--output", "test.bin", "--seed", "1", "--name", "test-data")
run("train", "--data", out / "train.bin", "--test-data", out / "test.bin", "--hidden", "16",
    "--epochs", "4", "--decay-epochs", "2", "--batch-size", "32", *shape)
run("make-subsets", "--data", out / "test.bin", "--model", out / "model.ckpt", "--rho", "0.1", *shape)
run("heatmap", "--subsets", out / "subsets.json")

manifest = json.loads((out / "train.manifest.json").read_text())
print("train manifest records:", sorted(manifest))
print("outputs:", manifest["outputs"])

# repeat the training run elsewhere and verify it
print("rerun exit code:", main(["rerun", str(out / "train.manifest.json"), "--out", str(out / "again")]))

# a missing input file is a usage error (exit 1)
print("missing data exit code:", main(["train", "--data", str(out / "nope.bin"), "--out", str(out)]))
