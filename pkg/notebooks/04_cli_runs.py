# %% [markdown]
# # Command line runs
#
# The same experiments from the shell. Each run writes a manifest next to its outputs;
# `--deterministic true` pins BLAS to one thread and zeroes wall-clock fields, so
# rerunning gives byte-identical files.
#
# ```
# export APGP_OUTPUT_DIR=runs/sweep
# apgp solve --synth_n 1000 --methods ap_gs,ap_cyclic,ap_random,cg,pcg --precond_rank 100
# apgp train --synth_n 1000 --steps 20 --solver ap
# apgp predict --synth_n 1000 --model_path runs/sweep/model.json --solver cg
# apgp check --synth_n 1000 --noise_variance 0.1
# ```

# %%
import json
import tempfile

from apgp.cli import main

out = tempfile.mkdtemp()
main(["solve", "--synth_n", "400", "--synth_d", "3", "--methods", "ap_gs,cg",
      "--output_dir", out, "--deterministic", "true"])
summary = json.load(open(f"{out}/summary.json"))
{m: v["epochs_to_tolerance"] for m, v in summary["methods"].items()}
