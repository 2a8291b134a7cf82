"""
Ablation sweeps with result files
=================================

Sweeps the number of attention modules in the injection block and the
regularizer toggle, writes JSON and CSV under ``$VISPROMPT_OUT`` (default
``./results``) and prints the markdown report the CLI would produce.
"""

from visprompt import ExperimentConfig, output_root, run_sweep, summarize, write_sweep

out = output_root() / "demo_sweeps"
cfg = ExperimentConfig()

for axis in ("attention_modules", "crp_toggle"):
    rows = run_sweep(axis, cfg)
    jpath, cpath = write_sweep(out, axis, rows)
    for r in rows:
        print(f"{axis}={r['value']!s:8s} H={r['record'].mean_H:.2f}")
    print("wrote", jpath.name, "and", cpath.name)

print()
print(summarize(out))
