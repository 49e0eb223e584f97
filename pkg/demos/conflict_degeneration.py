"""Watch a Regime-3 task get demoted.

The second task relabels 30% of the first task's samples. Early on its
gradient still agrees with the (underfit) first task, so the first task lands
in Regime 3; once training reaches the flipped labels the alignment check
fails and the task is demoted to Regime 2.
"""
from cuber.experiment import run_conflict_pair


def main():
    for seed in range(5):
        on = run_conflict_pair(seed)
        off = run_conflict_pair(seed, degeneration=False)
        print(f"seed {seed}: initial regimes {[sorted(l['reg3']) for l in on['initial_regimes']]} (reg3 per layer)")
        for ev in on["degenerations"]:
            print(f"    epoch {ev['epoch']}: layer {ev['layer']} demoted task {ev['task']}")
        print(f"    old task accuracy {on['old_before']:.3f} -> {on['old_after']:.3f} "
              f"(no demotion: {off['old_after']:.3f})")


if __name__ == "__main__":
    main()
