"""
Paired seed sweeps
==================

Each seed fixes the student initialization and batch order, and every
variant shares them. Differences within a seed are therefore paired.
Set BDD_THREADS to spread the runs over threads.
"""

from bddlab.train import (
    SWEEP_COLUMNS,
    DataConfig,
    TrainConfig,
    Variant,
    paired_deltas,
    run_seed_sweep,
    summarize,
    sweep_rows,
    to_csv,
)

data_cfg = DataConfig()
cfg = TrainConfig(record_wall_time=False)
variants = [Variant.of(f"alpha{a:g}", "bdd", alpha=a, tau_f=4.0, tau_r=4.0) for a in (0.0, 1.0, 4.0)]
variants.insert(0, Variant.of("kd", "kd"))

reports = run_seed_sweep(cfg, range(4), variants, data_cfg=data_cfg)

print(to_csv(sweep_rows(reports), SWEEP_COLUMNS))
for row in summarize(reports):
    print(f"{row['label']:<8s} {row['mean']:.4f} +/- {row['std']:.4f}")

###############################################################################
# With alpha = 0 and matching temperatures the BDD run reduces to plain KD.

for row in paired_deltas(reports, ["kd", "alpha0"]):
    print(row["seed"], row["alpha0_minus_kd"])
