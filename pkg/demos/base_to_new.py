"""
Comparing every method on base-to-new generalization
====================================================

Runs each method over the three default seeds on the same split and prints
a small table. The linear probe has no text side, so it cannot score the
new classes and reports them as not applicable.
"""

from visprompt import ExperimentConfig, compare, run

METHODS = ["zero_shot", "erm_linear", "coop", "cocoop", "ms_cocoop", "applenet"]

records = [run(ExperimentConfig(method=m)) for m in METHODS]
compare(records)  # refuses to mix data, encoder or optimiser settings

print(f"{'method':12s} {'base':>7s} {'new':>7s} {'H':>7s}")
for rec in records:
    mean = rec.mean_accuracy()
    new = "n/a" if mean["new"] is None else f"{mean['new']:.2f}"
    H = "n/a" if rec.mean_H is None else f"{rec.mean_H:.2f}"
    print(f"{rec.method:12s} {mean['base']:7.2f} {new:>7s} {H:>7s}")
