"""When does the recurrent model overtake the random forest?

Retrains both on growing chronological slices of the synthetic store-sales
history and prints test MSE per slice.  Uses 20 stores to stay around two
minutes; the full 50-store grid is what the acceptance suite runs.
"""
from deepbiz import experiments as ex

if __name__ == "__main__":
    config = ex.ExperimentConfig("sales", stores=20, grid="smoke")
    for p in ex.size_sensitivity_sweep(config, [0.05, 0.2, 1.0]):
        print(f"{p.fraction:>5g}  {p.model:<7} rows={p.n_train:<6} mse={p.metric:.4f}")
