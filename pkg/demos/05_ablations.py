"""The ablation harness: retrain with one component removed, plus a sweep
over (number of experts, experts kept).

Run: python demos/05_ablations.py   (about a minute)
"""

from flowmoe import (
    EncodedDataset,
    TrainConfig,
    ablation_config,
    count_parameters,
    make_blobs,
    run_ablation,
    run_expert_grid,
)

data = make_blobs(1350, seed=5)
cut = 900
train_set = EncodedDataset(x=data.x[:cut], y=data.y[:cut], class_names=data.class_names)
test_set = EncodedDataset(x=data.x[cut:], y=data.y[cut:], class_names=data.class_names)

base = TrainConfig(batch_size=128, max_epochs=3, n_experts=8, top_k=2, seed=0)

# Three reductions: zero both balancing losses; swap the expert head for one
# dense layer; collapse everything to a single affine map on the 78 inputs.
print(f"{'variant':<14} {'accuracy':>9} {'weighted F1':>12} {'params':>9}")
for variant in ("zero_losses", "no_moe", "no_cnn"):
    result = run_ablation(base, variant, train_set, test_set)
    print(f"{result.variant:<14} {result.report.accuracy:>9.4f} "
          f"{result.report.weighted_f1:>12.4f} "
          f"{count_parameters(result.model):>9}")

# The config diff shows exactly what each variant touched and nothing else.
changed = ablation_config(base, "no_moe")
print("\nno_moe flips only:",
      [name for name in vars(base) if getattr(base, name) != getattr(changed, name)])

# Sweeping the expert bank: one full train/evaluate cycle per (n, k) pair.
print(f"\n{'(n, k)':<10} {'accuracy':>9}")
for result in run_expert_grid(base, ((8, 4), (8, 2), (4, 2)), train_set, test_set):
    print(f"{result.variant:<10} {result.report.accuracy:>9.4f}")
