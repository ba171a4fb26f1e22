"""Compare the three continual-learning strategies on a small scenario.

Runs rainbow (evolved prompts + adaptive layer gate), fixed_weighted_sum
(frozen per-task prompts combined with input-conditioned weights), and
frozen_specific (the selected task's raw prompt) on a shared 3-task
scenario, then prints the accuracy matrices, average accuracy A, average
forgetting F, and the prompt-diversity trace for each.

Takes roughly a minute.
"""

from rainbowlab import harness as hn

scenario = hn.build_scenario(hn.ScenarioConfig(
    tasks=3, classes_per_task=2, samples_per_class=20,
    separation=3.0, patches=8, dim=16, seed=7,
))

for strategy in hn.STRATEGIES:
    runner = hn.ContinualRunner(
        scenario, strategy, layers=4, heads=4, prompt_length=8,
        proj_dim=8, align_dim=4,
        loss_config=hn.LossConfig(epochs_per_task=15, batch_size=16),
        seed=7,
    )
    result = runner.run()
    print(f"\n=== {strategy} ===")
    print("accuracy matrix (row = after task t, columns = tasks seen):")
    for row in result.accuracy_matrix:
        print("  " + "  ".join(f"{v:.3f}" for v in row))
    print(f"A = {result.average_accuracy:.3f}   "
          f"F = {result.average_forgetting:.3f}")
    divs = ["-" if d is None else f"{d:.2f}" for d in result.diversity]
    print("prompt diversity per step:", "  ".join(divs))
